use rand_chacha::ChaCha8Rng;

use super::{Ctx, Init, Mode, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Scalar, Var};

/// Per-channel batch normalization with running statistics.
///
/// Running statistics start uninitialized; the first train-mode batch seeds
/// them directly and later batches blend in with `momentum`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    /// Number of batches folded into the running statistics.
    pub tracked: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: store.add(format!("{prefix}.gamma"), &[channels], Init::Ones, true),
            beta: store.add(format!("{prefix}.beta"), &[channels], Init::Zeros, true),
            running_mean: store.add(format!("{prefix}.running_mean"), &[channels], Init::Zeros, false),
            running_var: store.add(format!("{prefix}.running_var"), &[channels], Init::Ones, false),
            tracked: store.add(format!("{prefix}.tracked"), &[1], Init::Zeros, false),
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn is_initialized<T: Scalar>(&self, store: &ParamStore<T>) -> bool {
        store.get(self.tracked).data()[0] > T::zero()
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        match ctx.mode() {
            Mode::Train => {
                let (y, stats) = ctx.graph.batch_norm_train(x, gamma, beta, self.eps)?;
                ctx.record_bn(self.clone(), stats);
                Ok(y)
            }
            Mode::Infer => {
                let store = ctx.store();
                if !self.is_initialized(store) {
                    return Err(Error::UninitializedStatistics);
                }
                let mean = store.get(self.running_mean).data().to_vec();
                let var = store.get(self.running_var).data().to_vec();
                ctx.graph.batch_norm_infer(x, gamma, beta, &mean, &var, self.eps)
            }
        }
    }

    /// Exponential moving average of the batch statistics. The running
    /// variance tracks the unbiased (÷(M−1)) estimate.
    pub fn update_running<T: Scalar>(&self, store: &mut ParamStore<T>, stats: &BatchStats) {
        let first = !self.is_initialized(store);
        let m = stats.count as f64;
        let correction = if stats.count > 1 { m / (m - 1.0) } else { 1.0 };
        let blend = |old: T, new: f64| -> T {
            if first {
                T::from_f64(new)
            } else {
                T::from_f64((1.0 - self.momentum) * old.as_f64() + self.momentum * new)
            }
        };
        for (r, &b) in store.get_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
            *r = blend(*r, b);
        }
        for (r, &b) in store.get_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
            *r = blend(*r, b * correction);
        }
        store.get_mut(self.tracked).data_mut()[0] += T::one();
    }
}

/// Inverted dropout: survivors are scaled by 1/(1−rate) in train mode,
/// identity at inference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    rate: f64,
}

impl Dropout {
    pub const DEFAULT_RATE: f64 = 0.1;

    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Dropout { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        if ctx.mode() == Mode::Infer || self.rate == 0.0 {
            return Ok(x);
        }
        let mask = ctx.dropout_mask(ctx.value(x).len(), self.rate);
        ctx.graph.mask_mul(x, mask)
    }
}

/// `y = x Wᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        inputs: usize,
        outputs: usize,
    ) -> Self {
        Dense {
            weight: store.add(
                format!("{prefix}.weight"),
                &[outputs, inputs],
                Init::FanIn { fan_in: inputs, rng },
                true,
            ),
            bias: store.add(format!("{prefix}.bias"), &[outputs], Init::Zeros, true),
            inputs,
            outputs,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.graph.dense(x, w, Some(b))
    }
}

/// Depthwise 3×3 convolution (one kernel per channel) followed by a 1×1
/// pointwise convolution. Padding keeps the spatial size at stride 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableConv {
    pub depthwise: ParamId,
    pub pointwise: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl SeparableConv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    ) -> Self {
        let kernel = 3;
        SeparableConv {
            depthwise: store.add(
                format!("{prefix}.depthwise"),
                &[in_channels, 1, kernel, kernel],
                Init::FanIn {
                    fan_in: kernel * kernel,
                    rng,
                },
                true,
            ),
            pointwise: store.add(
                format!("{prefix}.pointwise"),
                &[out_channels, in_channels, 1, 1],
                Init::FanIn {
                    fan_in: in_channels,
                    rng,
                },
                true,
            ),
            in_channels,
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let dw = ctx.param(self.depthwise);
        let pw = ctx.param(self.pointwise);
        let h = ctx
            .graph
            .depthwise_conv2d(x, dw, self.stride, self.kernel / 2)?;
        ctx.graph.conv2d(h, pw, None, 1, 0)
    }
}

/// 1×1 (optionally strided) convolution on the skip path.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub kernel: ParamId,
    pub stride: usize,
}

impl Projection {
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let k = ctx.param(self.kernel);
        ctx.graph.conv2d(x, k, None, self.stride, 0)
    }
}

/// Full pre-activation residual unit:
/// `y = skip(x) + [BN → ReLU → SepConv → Dropout]²(x)`.
///
/// The skip path is the identity when shape is preserved, otherwise a 1×1
/// projection carrying the block's stride.
#[derive(Clone, Debug, PartialEq)]
pub struct PreactBlock {
    pub bn1: BatchNorm,
    pub conv1: SeparableConv,
    pub bn2: BatchNorm,
    pub conv2: SeparableConv,
    pub dropout: Dropout,
    pub skip: Option<Projection>,
}

impl PreactBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        dropout: Dropout,
    ) -> Self {
        let bn1 = BatchNorm::new(store, &format!("{prefix}.bn1"), in_channels);
        let conv1 = SeparableConv::new(
            store,
            rng,
            &format!("{prefix}.conv1"),
            in_channels,
            out_channels,
            stride,
        );
        let bn2 = BatchNorm::new(store, &format!("{prefix}.bn2"), out_channels);
        let conv2 = SeparableConv::new(
            store,
            rng,
            &format!("{prefix}.conv2"),
            out_channels,
            out_channels,
            1,
        );
        let skip = (in_channels != out_channels || stride != 1).then(|| Projection {
            kernel: store.add(
                format!("{prefix}.skip"),
                &[out_channels, in_channels, 1, 1],
                Init::FanIn {
                    fan_in: in_channels,
                    rng,
                },
                true,
            ),
            stride,
        });
        PreactBlock {
            bn1,
            conv1,
            bn2,
            conv2,
            dropout,
            skip,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let c = ctx.graph.shape(x).get(1).copied().unwrap_or(0);
        if c != self.in_channels() {
            return Err(Error::shape(
                "preact_residual_block",
                ctx.graph.shape(x),
                &[self.out_channels(), self.in_channels()],
            ));
        }
        let mut h = x;
        for (bn, conv) in [(&self.bn1, &self.conv1), (&self.bn2, &self.conv2)] {
            h = bn.forward(ctx, h)?;
            h = ctx.graph.relu(h);
            h = conv.forward(ctx, h)?;
            h = self.dropout.forward(ctx, h)?;
        }
        let skip = match &self.skip {
            Some(p) => p.forward(ctx, x)?,
            None => x,
        };
        ctx.graph.add(skip, h)
    }
}
