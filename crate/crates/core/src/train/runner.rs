use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Mocae, ModelConfig};
use crate::nn::{apply_bn_updates, Ctx, Mode};
use crate::tensor::{Scalar, Var};

use super::{
    adam_step, classification_loss, reconstruction_loss, total_loss, AdamState, History,
    LossRecord, LossWeights, TrainConfig,
};

/// Per-epoch callback payload.
#[derive(Clone, Copy, Debug)]
pub struct EpochProgress {
    pub epoch: usize,
    pub train: LossRecord,
    pub validation: Option<LossRecord>,
}

/// Builds `L_t = γ1·L_r + γ2·L_c` on the graph; returns (L_r, L_c, L_t).
pub fn objective<T: Scalar>(
    model: &Mocae<T>,
    ctx: &mut Ctx<'_, T>,
    x: Var,
    labels: &[T],
    weights: LossWeights,
) -> Result<(Var, Var, Var)> {
    let out = model.forward(ctx, x)?;
    let lr = ctx.graph.mse(out.recon, x)?;
    let lc = ctx.graph.bce_with_logits(out.logit, labels)?;
    let a = ctx.graph.scale(lr, T::from_f64(weights.recon()));
    let b = ctx.graph.scale(lc, T::from_f64(weights.class()));
    let lt = ctx.graph.add(a, b)?;
    Ok((lr, lc, lt))
}

#[derive(Default)]
struct Mean {
    sum: [f64; 3],
    count: usize,
}

impl Mean {
    fn add(&mut self, r: [f64; 3], n: usize) {
        for (s, v) in self.sum.iter_mut().zip(r) {
            *s += v * n as f64;
        }
        self.count += n;
    }

    fn record(&self) -> LossRecord {
        let n = self.count.max(1) as f64;
        LossRecord {
            recon: self.sum[0] / n,
            class: self.sum[1] / n,
            total: self.sum[2] / n,
        }
    }
}

/// Inference-mode losses of `model` over `data`.
pub fn evaluate_losses<T: Scalar>(
    model: &Mocae<T>,
    data: &Dataset,
    weights: LossWeights,
    batch_size: usize,
) -> Result<LossRecord> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate losses on an empty dataset"));
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut mean = Mean::default();
    for part in indices.chunks(batch_size.max(1)) {
        let x = data.batch::<T>(part)?;
        let out = model.infer(&x)?;
        let lr = reconstruction_loss(&x, &out.recon)?;
        let probs: Vec<f64> = out.probability.iter().map(|p| p.as_f64()).collect();
        let lc = classification_loss(&data.labels::<f64>(part), &probs)?;
        mean.add([lr, lc, total_loss(lr, lc, weights)], part.len());
    }
    Ok(mean.record())
}

/// Trains a fresh model on `train_set`, recording inference-mode losses on
/// `validation` (if non-empty) after every epoch.
pub fn train<T: Scalar>(
    train_set: &Dataset,
    validation: &Dataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<Checkpoint<T>> {
    train_with_progress(train_set, validation, model_config, config, |_| {})
}

pub fn train_with_progress<T: Scalar>(
    train_set: &Dataset,
    validation: &Dataset,
    model_config: &ModelConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochProgress),
) -> Result<Checkpoint<T>> {
    config.validate()?;
    let tumours = train_set.tumour_count();
    if tumours == 0 || tumours == train_set.len() {
        return Err(Error::invalid(format!(
            "training data must contain tumoural and healthy slices ({tumours} of {} tumoural)",
            train_set.len()
        )));
    }
    let mut mc = model_config.clone();
    mc.precision = T::DTYPE;
    let mut model = Mocae::<T>::build(&mc)?;
    let mut adam = AdamState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let weights = config.weights;

    // Train-mode losses of the untrained model over the training set.
    let mut initial = Mean::default();
    for part in order.chunks(config.batch_size) {
        let mut ctx = Ctx::new(model.params(), Mode::Train, rng.random());
        let x = ctx.input(train_set.batch::<T>(part)?);
        let labels = train_set.labels::<T>(part);
        let (lr, lc, lt) = objective(&model, &mut ctx, x, &labels, weights)?;
        let v = |var| ctx.value(var).data()[0].as_f64();
        initial.add([v(lr), v(lc), v(lt)], part.len());
    }
    let mut history = History {
        initial: Some(initial.record()),
        ..History::default()
    };

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut mean = Mean::default();
        for (b, part) in order.chunks(config.batch_size).enumerate() {
            let x = train_set.batch::<T>(part)?;
            let labels = train_set.labels::<T>(part);
            let (grads, updates, losses) = {
                let mut ctx = Ctx::new(model.params(), Mode::Train, rng.random()).with_grad();
                let x = ctx.input(x);
                let (lr, lc, lt) = objective(&model, &mut ctx, x, &labels, weights)?;
                let v = |var| ctx.value(var).data()[0].as_f64();
                let losses = [v(lr), v(lc), v(lt)];
                if !losses[2].is_finite() {
                    return Err(Error::Diverged {
                        epoch: epoch + 1,
                        batch: b,
                        loss: losses[2],
                    });
                }
                let mut g = ctx.graph.backward(lt)?;
                (ctx.param_grads(&mut g), ctx.take_bn_updates(), losses)
            };
            adam_step(model.params_mut(), &grads, &mut adam, &config.adam)?;
            apply_bn_updates(model.params_mut(), updates);
            mean.add(losses, part.len());
        }
        let train_record = mean.record();
        let validation_record = if validation.is_empty() {
            None
        } else {
            Some(evaluate_losses(&model, validation, weights, config.batch_size)?)
        };
        history.train.push(train_record);
        history.validation.extend(validation_record);
        on_epoch(&EpochProgress {
            epoch: epoch + 1,
            train: train_record,
            validation: validation_record,
        });
    }

    if !model.is_calibrated() {
        let part: Vec<usize> = order.iter().copied().take(config.batch_size).collect();
        model.calibrate(&train_set.batch::<T>(&part)?, config.seed)?;
    }
    Ok(Checkpoint {
        model,
        train_config: Some(config.clone()),
        optimizer: Some(adam),
        history,
    })
}
