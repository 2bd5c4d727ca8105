use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::LossWeights;

/// Predicted probabilities are clamped to `[c, 1 − c]` before the logarithm.
pub const PROBABILITY_CLAMP: f64 = 1e-7;

/// Mean over every element of `(x − x̂)²`.
pub fn reconstruction_loss<T: Scalar>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape("reconstruction_loss", x.shape(), x_hat.shape()));
    }
    let s: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    Ok(s / x.len() as f64)
}

/// Mean binary cross-entropy `−(1/N) Σ [y ln ŷ + (1 − y) ln(1 − ŷ)]`.
pub fn classification_loss(labels: &[f64], predicted: &[f64]) -> Result<f64> {
    if labels.is_empty() || labels.len() != predicted.len() {
        return Err(Error::shape(
            "classification_loss",
            &[labels.len()],
            &[predicted.len()],
        ));
    }
    if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::invalid(format!("label {bad} is not 0 or 1")));
    }
    let s: f64 = labels
        .iter()
        .zip(predicted)
        .map(|(&y, &p)| {
            let p = p.clamp(PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    Ok(-s / labels.len() as f64)
}

pub fn total_loss(recon: f64, class: f64, weights: LossWeights) -> f64 {
    weights.recon() * recon + weights.class() * class
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reconstruction_edge_values() {
        let ones = Tensor::<f64>::full(&[2, 4, 3, 3], 1.0);
        let zeros = Tensor::<f64>::zeros(&[2, 4, 3, 3]);
        assert_eq!(reconstruction_loss(&ones, &ones).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(&ones, &zeros).unwrap(), 1.0);
        assert!(reconstruction_loss(&ones, &Tensor::zeros(&[2, 4, 3, 2])).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let l = classification_loss(&[1.0], &[0.5]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let l = classification_loss(&[1.0], &[1.0]).unwrap();
        assert!(l < 1e-6, "{l}");
        assert!(classification_loss(&[2.0], &[0.5]).is_err());
        assert!(classification_loss(&[], &[]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::new(0.2, 0.8).unwrap();
        assert!((total_loss(1.0, 0.5, w) - 0.6).abs() < 1e-15);
        let ae = LossWeights::new(1.0, 0.0).unwrap();
        assert_eq!(total_loss(0.37, 5.0, ae), 0.37);
        let cls = LossWeights::new(0.0, 1.0).unwrap();
        assert_eq!(total_loss(0.37, 5.0, cls), 5.0);
    }
}
