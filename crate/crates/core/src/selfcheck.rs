//! Finite-difference verification of every differentiable graph primitive
//! and of the full training objective, at 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Mocae, ModelConfig};
use crate::nn::{Ctx, Mode};
use crate::tensor::gradcheck::{check_gradients, ridders_derivative};
use crate::tensor::{Graph, Tensor, Var};
use crate::train::{objective, LossWeights};

/// Largest acceptable relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step for the primitives.
pub const STEP: f64 = 1e-6;
/// Initial step of the extrapolated differences used on the objective.
pub const OBJECTIVE_STEP: f64 = 1e-4;
/// Objective points are drawn until every ReLU input is at least this far
/// from zero, so that no probe crosses a kink.
pub const RELU_MARGIN: f64 = 1e-3;
const MAX_DRAWS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub points: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values with magnitude in [0.1, 1] and random sign, away from ReLU's kink.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ w ⊙ y` for a fixed random `w`, turning any output into a scalar.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type Probe = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: Probe,
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        inputs,
        f: Box::new(f),
    }
}

/// One randomized instance of every primitive.
fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let s: u64 = rng.random();
    let mut cases = Vec::new();
    let ab = vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0)];
    cases.push(case("add", ab.clone(), move |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, s)
    }));
    cases.push(case("mul", ab.clone(), move |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, s)
    }));
    let c: f64 = rng.random_range(-2.0..2.0);
    cases.push(case("scale", vec![ab[0].clone()], move |g, v| {
        let y = g.scale(v[0], c);
        project(g, y, s)
    }));
    cases.push(case("relu", vec![off_zero(rng, &[3, 4])], move |g, v| {
        let y = g.relu(v[0]);
        project(g, y, s)
    }));
    cases.push(case("tanh", vec![uniform(rng, &[3, 4], -2.0, 2.0)], move |g, v| {
        let y = g.tanh(v[0]);
        project(g, y, s)
    }));
    cases.push(case("sigmoid", vec![uniform(rng, &[3, 4], -3.0, 3.0)], move |g, v| {
        let y = g.sigmoid(v[0]);
        project(g, y, s)
    }));
    cases.push(case("sum", vec![ab[0].clone()], |g, v| {
        let y = g.tanh(v[0]);
        Ok(g.sum(y))
    }));
    cases.push(case("mean", vec![ab[1].clone()], |g, v| {
        let y = g.tanh(v[0]);
        Ok(g.mean(y))
    }));
    cases.push(case("reshape", vec![uniform(rng, &[2, 6], -1.0, 1.0)], move |g, v| {
        let y = g.reshape(v[0], &[3, 4])?;
        project(g, y, s)
    }));
    let mask: Vec<f64> = (0..12).map(|_| if rng.random_bool(0.3) { 0.0 } else { 2.0 }).collect();
    cases.push(case("mask_mul", vec![ab[0].clone()], move |g, v| {
        let y = g.mask_mul(v[0], mask.clone())?;
        project(g, y, s)
    }));
    let (stride, pad) = (rng.random_range(1..=2), rng.random_range(0..=1));
    cases.push(case(
        "conv2d",
        vec![
            uniform(rng, &[2, 3, 5, 5], -1.0, 1.0),
            uniform(rng, &[2, 3, 3, 3], -1.0, 1.0),
            uniform(rng, &[2], -1.0, 1.0),
        ],
        move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            project(g, y, s)
        },
    ));
    let (stride, pad) = (rng.random_range(1..=2), rng.random_range(0..=1));
    cases.push(case(
        "depthwise_conv2d",
        vec![uniform(rng, &[2, 3, 6, 6], -1.0, 1.0), uniform(rng, &[3, 1, 3, 3], -1.0, 1.0)],
        move |g, v| {
            let y = g.depthwise_conv2d(v[0], v[1], stride, pad)?;
            project(g, y, s)
        },
    ));
    cases.push(case(
        "dense",
        vec![
            uniform(rng, &[3, 4], -1.0, 1.0),
            uniform(rng, &[5, 4], -1.0, 1.0),
            uniform(rng, &[5], -1.0, 1.0),
        ],
        move |g, v| {
            let y = g.dense(v[0], v[1], Some(v[2]))?;
            project(g, y, s)
        },
    ));
    let bn_inputs = vec![
        uniform(rng, &[3, 2, 3, 3], -2.0, 2.0),
        uniform(rng, &[2], 0.5, 1.5),
        uniform(rng, &[2], -0.5, 0.5),
    ];
    cases.push(case("batch_norm_train", bn_inputs.clone(), move |g, v| {
        let (y, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
        project(g, y, s)
    }));
    let mean = vec![rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
    let var = vec![rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)];
    cases.push(case("batch_norm_infer", bn_inputs, move |g, v| {
        let y = g.batch_norm_infer(v[0], v[1], v[2], &mean, &var, 1e-5)?;
        project(g, y, s)
    }));
    cases.push(case("upsample_nearest", vec![uniform(rng, &[2, 2, 3, 3], -1.0, 1.0)], move |g, v| {
        let y = g.upsample_nearest(v[0], 2)?;
        project(g, y, s)
    }));
    cases.push(case("mse", ab, |g, v| g.mse(v[0], v[1])));
    let targets: Vec<f64> = (0..6).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
    cases.push(case("bce_with_logits", vec![uniform(rng, &[6], -4.0, 4.0)], move |g, v| {
        g.bce_with_logits(v[0], &targets)
    }));
    cases
}

/// Checks every primitive at `points` random points each.
pub fn primitive_checks(points: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results: Vec<CheckResult> = Vec::new();
    for _ in 0..points {
        for c in primitive_cases(&mut rng) {
            let report = check_gradients(&c.f, &c.inputs, STEP)?;
            match results.iter_mut().find(|r| r.name == c.name) {
                Some(r) => {
                    r.points += 1;
                    r.coordinates += report.coordinates;
                    r.max_rel_error = r.max_rel_error.max(report.max_rel_error);
                }
                None => results.push(CheckResult {
                    name: c.name.to_string(),
                    points: 1,
                    coordinates: report.coordinates,
                    max_rel_error: report.max_rel_error,
                }),
            }
        }
    }
    Ok(results)
}

/// A model small enough to probe every parameter coordinate.
pub fn probe_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        input_size: (8, 8),
        latent_dim: 4,
        stage_widths: vec![3, 4],
        blocks_per_stage: 1,
        decoder_blocks_per_stage: 1,
        classifier_hidden: 3,
        seed,
        ..ModelConfig::default()
    }
}

fn objective_value(
    model: &Mocae<f64>,
    x: &Tensor<f64>,
    labels: &[f64],
    weights: LossWeights,
    dropout_seed: u64,
) -> Result<f64> {
    let mut ctx = Ctx::new(model.params(), Mode::Train, dropout_seed);
    let xv = ctx.input(x.clone());
    let (_, _, lt) = objective(model, &mut ctx, xv, labels, weights)?;
    Ok(ctx.value(lt).data()[0])
}

/// Checks d(γ1·L_r + γ2·L_c)/dθ for every trainable coordinate of a freshly
/// initialized probe model, at `points` random (parameters, batch, γ).
pub fn objective_check(points: usize, seed: u64) -> Result<CheckResult> {
    loss_check("objective", points, seed, None)
}

/// As [`objective_check`] with γ = (1, 0): the reconstruction loss alone.
pub fn reconstruction_check(points: usize, seed: u64) -> Result<CheckResult> {
    loss_check("reconstruction", points, seed, Some(1.0))
}

fn loss_check(name: &str, points: usize, seed: u64, recon: Option<f64>) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut result = CheckResult {
        name: name.into(),
        points: 0,
        coordinates: 0,
        max_rel_error: 0.0,
    };
    let labels = [1.0, 0.0, 1.0, 0.0];
    for _ in 0..points {
        let mut draws = 0;
        let (mut model, x, weights, dropout_seed, grads) = loop {
            draws += 1;
            if draws > MAX_DRAWS {
                return Err(Error::invalid("no kink-free objective point found"));
            }
            let model = Mocae::<f64>::build(&probe_model_config(rng.random()))?;
            let x = uniform(&mut rng, &[4, 4, 8, 8], -1.0, 1.0);
            let weights = LossWeights::from_recon(recon.unwrap_or_else(|| rng.random_range(0.05..0.95)))?;
            let dropout_seed: u64 = rng.random();
            let (margin, grads) = {
                let mut ctx = Ctx::new(model.params(), Mode::Train, dropout_seed).with_grad();
                let xv = ctx.input(x.clone());
                let (_, _, lt) = objective(&model, &mut ctx, xv, &labels, weights)?;
                let mut g = ctx.graph.backward(lt)?;
                (ctx.graph.relu_margin(), ctx.param_grads(&mut g))
            };
            if margin.is_none_or(|m| m >= RELU_MARGIN) {
                break (model, x, weights, dropout_seed, grads);
            }
        };
        let ids: Vec<_> = model
            .params()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let analytic = grads[id.index()]
                .clone()
                .ok_or_else(|| Error::invalid("trainable parameter without gradient"))?;
            for i in 0..analytic.len() {
                let base = model.params().get(id).data()[i];
                let (numeric, _) = ridders_derivative(
                    |v| {
                        model.params_mut().get_mut(id).data_mut()[i] = v;
                        objective_value(&model, &x, &labels, weights, dropout_seed)
                    },
                    base,
                    OBJECTIVE_STEP,
                )?;
                model.params_mut().get_mut(id).data_mut()[i] = base;
                let a = analytic.data()[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
                result.max_rel_error = result.max_rel_error.max(err);
                result.coordinates += 1;
            }
        }
        result.points += 1;
    }
    Ok(result)
}

/// Primitive checks followed by the objective check.
pub fn run_all(points: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut all = primitive_checks(points, seed)?;
    all.push(objective_check(points, seed)?);
    Ok(all)
}
