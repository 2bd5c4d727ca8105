use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate_protocol, select_query_slices, DiceReport};
use crate::model::ModelConfig;
use crate::retrieval::{build_index, QueryOptions};
use crate::tensor::Scalar;

use super::{train, LossWeights, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub weights: LossWeights,
    pub report: DiceReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridReport {
    pub points: Vec<GridPoint>,
    /// Position of the highest entire-Dice mean (first on ties).
    pub best: usize,
}

impl GridReport {
    pub fn best_weights(&self) -> LossWeights {
        self.points[self.best].weights
    }

    /// CSV with one row per candidate.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "gamma1,gamma2,normal_mean,normal_std,tumoural_mean,tumoural_std,entire_mean,entire_std,n_queries\n",
        );
        for p in &self.points {
            let r = &p.report;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                p.weights.recon(),
                p.weights.class(),
                r.normal.mean,
                r.normal.std,
                r.tumoural.mean,
                r.tumoural.std,
                r.entire.mean,
                r.entire.std,
                r.n_queries
            ));
        }
        out
    }
}

/// Candidate γ1 values `0, step, 2·step, …, 1`.
pub fn grid_points(step: f64) -> Result<Vec<f64>> {
    let n = (1.0 / step).round();
    if !(step > 0.0 && step <= 1.0) || (n * step - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("grid step {step} does not divide 1 evenly")));
    }
    let n = n as usize;
    Ok((0..=n).map(|i| i as f64 / n as f64).collect())
}

/// Retrains from scratch for every γ1 on the grid and scores each model by
/// entire Dice on a retrieval task: the index holds `train_set`, the
/// queries are the largest-tumour slices of `validation`.
pub fn gamma_grid_search<T: Scalar>(
    train_set: &Dataset,
    validation: &Dataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
    step: f64,
    query: &QueryOptions,
    mut on_point: impl FnMut(&GridPoint),
) -> Result<GridReport> {
    let gammas = grid_points(step)?;
    let picks = select_query_slices(validation);
    if picks.is_empty() {
        return Err(Error::invalid("validation set has no tumoural query slices"));
    }
    let queries = validation.subset(&picks);
    let mut points = Vec::with_capacity(gammas.len());
    for g in gammas {
        let cfg = TrainConfig {
            weights: LossWeights::from_recon(g)?,
            ..config.clone()
        };
        let ckpt = train::<T>(train_set, validation, model_config, &cfg)?;
        let index = build_index(&ckpt.model, train_set)?;
        let report = evaluate_protocol(&index, train_set, &ckpt.model, &queries, query, "")?;
        let point = GridPoint {
            weights: cfg.weights,
            report,
        };
        on_point(&point);
        points.push(point);
    }
    let best = points
        .iter()
        .enumerate()
        .fold(0, |best, (i, p)| {
            if p.report.entire.mean > points[best].report.entire.mean {
                i
            } else {
                best
            }
        });
    Ok(GridReport { points, best })
}
