//! Sørensen–Dice scoring of retrieval: normal (anatomical), tumoural and
//! entire Dice over largest-tumour-slice queries.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SliceSample, ANAT_LABELS};
use crate::error::{Error, Result};
use crate::model::Mocae;
use crate::par;
use crate::retrieval::{describe, Index, QueryOptions};
use crate::tensor::Scalar;

/// `2|A∩B| / (|A| + |B|)`, with two empty masks scoring 1.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("dice", &[a.len()], &[b.len()]));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Mean per-label Dice over anatomical labels 1–6, skipping labels absent
/// from both maps; 1 when every label is absent from both.
pub fn multilabel_dice(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("multilabel_dice", &[a.len()], &[b.len()]));
    }
    let mut na = [0usize; 7];
    let mut nb = [0usize; 7];
    let mut both = [0usize; 7];
    for (&x, &y) in a.iter().zip(b) {
        if x > 6 || y > 6 {
            return Err(Error::invalid(format!("label {} outside 0..=6", x.max(y))));
        }
        na[x as usize] += 1;
        nb[y as usize] += 1;
        if x == y {
            both[x as usize] += 1;
        }
    }
    let scores: Vec<f64> = ANAT_LABELS
        .map(usize::from)
        .filter(|&l| na[l] + nb[l] > 0)
        .map(|l| 2.0 * both[l] as f64 / (na[l] + nb[l]) as f64)
        .collect();
    if scores.is_empty() {
        return Ok(1.0);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Per case with any tumour, the index of the slice with the largest
/// tumour area (lowest z on ties). Cases are returned sorted by id.
pub fn select_query_slices(data: &Dataset) -> Vec<usize> {
    let mut out = Vec::new();
    for indices in data.by_case().values() {
        let best = indices
            .iter()
            .map(|&i| (data.samples[i].tumour_area(), data.samples[i].z, i))
            .filter(|&(area, _, _)| area > 0)
            .min_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        if let Some((_, _, i)) = best {
            out.push(i);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and population standard deviation; zeros for an empty sample.
    pub fn of(values: &[f64]) -> Stat {
        if values.is_empty() {
            return Stat::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Stat {
            mean,
            std: var.sqrt(),
        }
    }
}

/// Scores of one query.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryScore {
    pub case_id: String,
    pub z: usize,
    /// `None` when the query or a retrieved slice has no anatomical map.
    pub normal: Option<f64>,
    pub tumoural: f64,
    pub gate_applied: bool,
    pub retrieved: usize,
}

impl QueryScore {
    pub fn entire(&self) -> Option<f64> {
        self.normal.map(|n| (n + self.tumoural) / 2.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub normal: Stat,
    pub tumoural: Stat,
    pub entire: Stat,
    pub n_queries: usize,
    pub config_digest: String,
}

const CSV_HEADER: &str =
    "normal_mean,normal_std,tumoural_mean,tumoural_std,entire_mean,entire_std,n_queries,config_digest";

impl DiceReport {
    /// Aggregates in query order. Normal and entire Dice cover the queries
    /// with anatomy; tumoural Dice covers all of them.
    pub fn from_scores(scores: &[QueryScore], config_digest: impl Into<String>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("empty query set"));
        }
        let normal: Vec<f64> = scores.iter().filter_map(|s| s.normal).collect();
        let tumoural: Vec<f64> = scores.iter().map(|s| s.tumoural).collect();
        let entire: Vec<f64> = scores.iter().filter_map(QueryScore::entire).collect();
        Ok(DiceReport {
            normal: Stat::of(&normal),
            tumoural: Stat::of(&tumoural),
            entire: Stat::of(&entire),
            n_queries: scores.len(),
            config_digest: config_digest.into(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("report JSON: {e}")))
    }

    /// Header line plus one data row.
    pub fn to_csv(&self) -> String {
        format!(
            "{CSV_HEADER}\n{},{},{},{},{},{},{},{}\n",
            self.normal.mean,
            self.normal.std,
            self.tumoural.mean,
            self.tumoural.std,
            self.entire.mean,
            self.entire.std,
            self.n_queries,
            self.config_digest
        )
    }
}

/// Averages Dice between `query` and each retrieved database slice. No
/// retrieved slice scores 0 on both.
fn score_against(query: &SliceSample, retrieved: &[&SliceSample]) -> Result<(Option<f64>, f64)> {
    if retrieved.is_empty() {
        return Ok((query.has_anatomy.then_some(0.0), 0.0));
    }
    let mask = query.tumour_mask();
    let mut tum = 0.0;
    let mut norm = Some(0.0);
    for r in retrieved {
        tum += dice(&mask, &r.tumour_mask())?;
        norm = match (norm, query.has_anatomy && r.has_anatomy) {
            (Some(n), true) => Some(n + multilabel_dice(&query.anat, &r.anat)?),
            _ => None,
        };
    }
    let k = retrieved.len() as f64;
    Ok((norm.map(|n| n / k), tum / k))
}

fn lookup(database: &Dataset) -> HashMap<(&str, usize), usize> {
    database
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| ((s.case_id.as_str(), s.z), i))
        .collect()
}

/// Retrieves for every query slice and scores the result against the
/// database slices the index entries refer to.
pub fn score_queries<T: Scalar>(
    index: &Index,
    database: &Dataset,
    model: &Mocae<T>,
    queries: &Dataset,
    opts: &QueryOptions,
) -> Result<Vec<QueryScore>> {
    let by_id = lookup(database);
    let slots: Vec<usize> = index
        .entries()
        .iter()
        .map(|e| {
            by_id.get(&(e.case_id.as_str(), e.z)).copied().ok_or_else(|| {
                Error::invalid(format!("index entry {}:{} is not in the database", e.case_id, e.z))
            })
        })
        .collect::<Result<_>>()?;
    let described = describe(model, queries)?;
    par::map_range(queries.len(), |qi| {
        let q = &queries.samples[qi];
        let (descriptor, probability) = &described[qi];
        let result = index.search(descriptor, *probability, Some((&q.case_id, q.z)), opts)?;
        let retrieved: Vec<&SliceSample> = result
            .hits
            .iter()
            .map(|h| &database.samples[slots[h.entry]])
            .collect();
        let (normal, tumoural) = score_against(q, &retrieved)?;
        Ok(QueryScore {
            case_id: q.case_id.clone(),
            z: q.z,
            normal,
            tumoural,
            gate_applied: result.gate_applied,
            retrieved: retrieved.len(),
        })
    })
    .into_iter()
    .collect()
}

/// The scoring protocol: top-`opts.k` retrieval per query, then mean and
/// population standard deviation of the three Dice scores.
pub fn evaluate_protocol<T: Scalar>(
    index: &Index,
    database: &Dataset,
    model: &Mocae<T>,
    queries: &Dataset,
    opts: &QueryOptions,
    config_digest: &str,
) -> Result<DiceReport> {
    if queries.is_empty() {
        return Err(Error::invalid("empty query set"));
    }
    let scores = score_queries(index, database, model, queries, opts)?;
    DiceReport::from_scores(&scores, config_digest)
}

/// Replaces retrieval with uniform random picks from `database`, averaging
/// each query's scores over `trials` draws. With `exclude_self`, a query's
/// own slice is never picked.
pub fn random_baseline(
    database: &Dataset,
    queries: &Dataset,
    seed: u64,
    trials: usize,
    exclude_self: bool,
    config_digest: &str,
) -> Result<DiceReport> {
    let scores = random_baseline_scores(database, queries, seed, trials, exclude_self)?;
    DiceReport::from_scores(&scores, config_digest)
}

/// Per-query scores of [`random_baseline`].
pub fn random_baseline_scores(
    database: &Dataset,
    queries: &Dataset,
    seed: u64,
    trials: usize,
    exclude_self: bool,
) -> Result<Vec<QueryScore>> {
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    if queries.is_empty() {
        return Err(Error::invalid("empty query set"));
    }
    if database.is_empty() {
        return Err(Error::invalid("empty database"));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..queries.len()).map(|_| master.random()).collect();
    par::map_range(queries.len(), |qi| {
        let q = &queries.samples[qi];
        let pool: Vec<usize> = (0..database.len())
            .filter(|&i| {
                let s = &database.samples[i];
                !(exclude_self && s.case_id == q.case_id && s.z == q.z)
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seeds[qi]);
        let (mut normal, mut tum) = (Some(0.0), 0.0);
        for _ in 0..trials {
            let picked: Vec<&SliceSample> = if pool.is_empty() {
                Vec::new()
            } else {
                vec![&database.samples[pool[rng.random_range(0..pool.len())]]]
            };
            let (n, t) = score_against(q, &picked)?;
            tum += t;
            normal = normal.zip(n).map(|(a, b)| a + b);
        }
        let k = trials as f64;
        Ok(QueryScore {
            case_id: q.case_id.clone(),
            z: q.z,
            normal: normal.map(|n| n / k),
            tumoural: tum / k,
            gate_applied: false,
            retrieved: 1,
        })
    })
    .into_iter()
    .collect()
}
