//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use mocae::data::{generate_phantom, slice_volume, Dataset, PhantomConfig};
use mocae::retrieval::{Index, IndexEntry};
use mocae::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// max |a − b| / max |b|.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// Direct summation over (n, f, oy, ox, c, ky, kx).
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let [n, c, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [f, _, kh, kw] = <[usize; 4]>::try_from(k.shape()).unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; n * f * oh * ow];
    for b in 0..n {
        for o in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bias.map_or(0.0, |bb| bb[o]);
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = xd[((b * c + ci) * h + iy as usize) * w + ix as usize];
                                s += xv * kd[((o * c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((b * f + o) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    Tensor::new(&[n, f, oh, ow], out).unwrap()
}

/// Depthwise convolution as C independent single-channel naive convolutions.
pub fn naive_depthwise(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, c, h, w] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [_, _, kh, kw] = <[usize; 4]>::try_from(k.shape()).unwrap();
    let mut planes = Vec::new();
    let mut shape = [n, c, 0, 0];
    for b in 0..n {
        for ci in 0..c {
            let xs = Tensor::new(&[1, 1, h, w], x.data()[(b * c + ci) * h * w..][..h * w].to_vec()).unwrap();
            let ks = Tensor::new(&[1, 1, kh, kw], k.data()[ci * kh * kw..][..kh * kw].to_vec()).unwrap();
            let y = naive_conv(&xs, &ks, None, stride, pad);
            shape[2] = y.shape()[2];
            shape[3] = y.shape()[3];
            planes.extend_from_slice(y.data());
        }
    }
    Tensor::new(&shape, planes).unwrap()
}

/// Every (case, z) of a generated phantom corpus, empty slices included.
pub fn phantom_dataset(cfg: &PhantomConfig) -> Dataset {
    let mut samples = Vec::new();
    for case in generate_phantom(cfg).unwrap() {
        samples.extend(slice_volume(&case, true).unwrap());
    }
    Dataset::new(samples)
}

/// Full-scan kNN: filter, sort every candidate by (distance, case, z, position).
pub fn knn_oracle(
    index: &Index,
    q: &[f64],
    k: usize,
    admit: impl Fn(&IndexEntry) -> bool,
) -> Vec<usize> {
    let mut all: Vec<(f64, &str, usize, usize)> = index
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| admit(e))
        .map(|(i, e)| {
            let d = e.descriptor.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            (d, e.case_id.as_str(), e.z, i)
        })
        .collect();
    all.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(b.1))
            .then(a.2.cmp(&b.2))
            .then(a.3.cmp(&b.3))
    });
    all.into_iter().take(k).map(|t| t.3).collect()
}

/// Dice by counting set members.
pub fn dice_oracle(a: &[bool], b: &[bool]) -> f64 {
    let ca = a.iter().filter(|&&v| v).count();
    let cb = b.iter().filter(|&&v| v).count();
    let both = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    if ca + cb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (ca + cb) as f64
    }
}

/// Mean per-label Dice over labels 1..=6 present in either map.
pub fn multilabel_oracle(a: &[u8], b: &[u8]) -> f64 {
    let mut scores = Vec::new();
    for label in 1..=6u8 {
        let ma: Vec<bool> = a.iter().map(|&v| v == label).collect();
        let mb: Vec<bool> = b.iter().map(|&v| v == label).collect();
        if ma.iter().chain(&mb).any(|&v| v) {
            scores.push(dice_oracle(&ma, &mb));
        }
    }
    if scores.is_empty() {
        1.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}
