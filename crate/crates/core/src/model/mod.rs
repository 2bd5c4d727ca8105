//! The dual-output network: encoder → latent descriptor → (decoder
//! reconstruction, classifier tumour probability).

mod checkpoint;

pub use checkpoint::{AnyCheckpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::nn::{
    apply_bn_updates, BatchNorm, Ctx, Dense, Dropout, Init, Mode, ParamId, ParamStore, PreactBlock,
};
use crate::par;
use crate::tensor::{DType, Scalar, Tensor, Var};

/// Number of scanner modalities stacked as input channels.
pub const MODALITIES: usize = 4;

/// Samples per independent inference pass when a batch is split across threads.
const INFER_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// (H, W) in pixels.
    pub input_size: (usize, usize),
    pub input_channels: usize,
    pub latent_dim: usize,
    /// Channel width of each encoder stage; every stage halves the grid.
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Residual blocks after each nearest-neighbour upsampling.
    pub decoder_blocks_per_stage: usize,
    pub classifier_hidden: usize,
    pub dropout: f64,
    pub seed: u64,
    pub precision: DType,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: (64, 64),
            input_channels: MODALITIES,
            latent_dim: 64,
            stage_widths: vec![16, 32, 64],
            blocks_per_stage: 2,
            decoder_blocks_per_stage: 1,
            classifier_hidden: 64,
            dropout: Dropout::DEFAULT_RATE,
            seed: 0,
            precision: DType::F32,
        }
    }
}

impl ModelConfig {
    /// 240×240 inputs with a 500-dimensional descriptor and a 64-unit
    /// classifier layer.
    pub fn full_scale() -> Self {
        ModelConfig {
            input_size: (240, 240),
            latent_dim: 500,
            stage_widths: vec![32, 64, 128, 256],
            classifier_hidden: 64,
            ..Self::default()
        }
    }

    /// Checks the configuration and returns the encoder's final grid size.
    pub fn validate(&self) -> Result<(usize, usize)> {
        if self.input_channels != MODALITIES {
            return Err(Error::Config(format!(
                "input_channels must be {MODALITIES}, got {}",
                self.input_channels
            )));
        }
        if self.latent_dim == 0 || self.classifier_hidden == 0 {
            return Err(Error::Config(
                "latent_dim and classifier_hidden must be positive".into(),
            ));
        }
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return Err(Error::Config("stage_widths must be non-empty and positive".into()));
        }
        if self.blocks_per_stage == 0 || self.decoder_blocks_per_stage == 0 {
            return Err(Error::Config("blocks per stage must be positive".into()));
        }
        Dropout::new(self.dropout)?;
        let (mut h, mut w) = self.input_size;
        for stage in 0..self.stage_widths.len() {
            if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
                return Err(Error::Config(format!(
                    "stage {stage}: input grid {h}x{w} cannot be halved"
                )));
            }
            h /= 2;
            w /= 2;
        }
        Ok((h, w))
    }

    pub fn to_kv(&self, kv: &mut KvConfig) {
        kv.set("model.input_size", format!("{}x{}", self.input_size.0, self.input_size.1));
        kv.set("model.input_channels", self.input_channels);
        kv.set("model.latent_dim", self.latent_dim);
        kv.set(
            "model.stage_widths",
            self.stage_widths
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv.set("model.blocks_per_stage", self.blocks_per_stage);
        kv.set("model.decoder_blocks_per_stage", self.decoder_blocks_per_stage);
        kv.set("model.classifier_hidden", self.classifier_hidden);
        kv.set("model.dropout", self.dropout);
        kv.set("model.seed", self.seed);
        kv.set("model.precision", self.precision.name());
    }

    /// Reads `model.*` keys, falling back to the desk defaults.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let input_size = match kv.raw("model.input_size") {
            None => d.input_size,
            Some(s) => parse_size(s)
                .ok_or_else(|| Error::Config(format!("model.input_size = {s:?}: expected HxW")))?,
        };
        let cfg = ModelConfig {
            input_size,
            input_channels: kv.get_or("model.input_channels", d.input_channels)?,
            latent_dim: kv.get_or("model.latent_dim", d.latent_dim)?,
            stage_widths: kv.get_list("model.stage_widths")?.unwrap_or(d.stage_widths),
            blocks_per_stage: kv.get_or("model.blocks_per_stage", d.blocks_per_stage)?,
            decoder_blocks_per_stage: kv
                .get_or("model.decoder_blocks_per_stage", d.decoder_blocks_per_stage)?,
            classifier_hidden: kv.get_or("model.classifier_hidden", d.classifier_hidden)?,
            dropout: kv.get_or("model.dropout", d.dropout)?,
            seed: kv.get_or("model.seed", d.seed)?,
            precision: kv.get_or("model.precision", d.precision)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_size(s: &str) -> Option<(usize, usize)> {
    let (h, w) = s.split_once('x')?;
    Some((h.trim().parse().ok()?, w.trim().parse().ok()?))
}

#[derive(Clone, Debug, PartialEq)]
struct Encoder {
    blocks: Vec<PreactBlock>,
    bn: BatchNorm,
    latent: Dense,
}

#[derive(Clone, Debug, PartialEq)]
struct DecoderStage {
    blocks: Vec<PreactBlock>,
}

#[derive(Clone, Debug, PartialEq)]
struct Decoder {
    expand: Dense,
    stages: Vec<DecoderStage>,
    bn: BatchNorm,
    out_kernel: ParamId,
    out_bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Classifier {
    hidden: Dense,
    out: Dense,
}

/// Graph handles of one joint forward pass. Reconstruction and logit are
/// both computed from the single `latent`.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub latent: Var,
    pub recon: Var,
    pub logit: Var,
}

/// Inference results for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference<T> {
    pub latent: Tensor<T>,
    pub recon: Tensor<T>,
    pub probability: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mocae<T> {
    config: ModelConfig,
    grid: (usize, usize),
    store: ParamStore<T>,
    encoder: Encoder,
    decoder: Decoder,
    classifier: Classifier,
}

/// Logistic function clamped into the open unit interval.
pub fn probability<T: Scalar>(logit: T) -> T {
    let p = if logit >= T::zero() {
        T::one() / (T::one() + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (T::one() + e)
    };
    p.max(T::epsilon()).min(T::one() - T::epsilon())
}

impl<T: Scalar> Mocae<T> {
    /// Allocates and initializes every parameter from `config.seed`. The
    /// stored configuration records `T`'s precision.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        let grid = config.validate()?;
        let config = &ModelConfig {
            precision: T::DTYPE,
            ..config.clone()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dropout = Dropout::new(config.dropout)?;
        let widths = &config.stage_widths;

        let mut blocks = Vec::new();
        let mut ch = config.input_channels;
        for (s, &w) in widths.iter().enumerate() {
            for b in 0..config.blocks_per_stage {
                let stride = if b == 0 { 2 } else { 1 };
                let name = format!("encoder.stage{s}.block{b}");
                blocks.push(PreactBlock::new(&mut store, &mut rng, &name, ch, w, stride, dropout));
                ch = w;
            }
        }
        let flat = ch * grid.0 * grid.1;
        let bn = BatchNorm::new(&mut store, "encoder.bn", ch);
        let latent = Dense::new(&mut store, &mut rng, "encoder.latent", flat, config.latent_dim);
        let encoder = Encoder { blocks, bn, latent };

        let expand = Dense::new(&mut store, &mut rng, "decoder.expand", config.latent_dim, flat);
        let mut stages = Vec::new();
        for s in (0..widths.len()).rev() {
            let target = if s == 0 { widths[0] } else { widths[s - 1] };
            let mut blocks = Vec::new();
            for b in 0..config.decoder_blocks_per_stage {
                let name = format!("decoder.stage{s}.block{b}");
                blocks.push(PreactBlock::new(&mut store, &mut rng, &name, ch, target, 1, dropout));
                ch = target;
            }
            stages.push(DecoderStage { blocks });
        }
        let dbn = BatchNorm::new(&mut store, "decoder.bn", ch);
        let out_kernel = store.add(
            "decoder.out.weight".into(),
            &[config.input_channels, ch, 1, 1],
            Init::FanIn { fan_in: ch, rng: &mut rng },
            true,
        );
        let out_bias = store.add(
            "decoder.out.bias".into(),
            &[config.input_channels],
            Init::Zeros,
            true,
        );
        let decoder = Decoder {
            expand,
            stages,
            bn: dbn,
            out_kernel,
            out_bias,
        };

        let hidden = Dense::new(
            &mut store,
            &mut rng,
            "classifier.hidden",
            config.latent_dim,
            config.classifier_hidden,
        );
        let out = Dense::new(&mut store, &mut rng, "classifier.out", config.classifier_hidden, 1);
        Ok(Mocae {
            config: config.clone(),
            grid,
            store,
            encoder,
            decoder,
            classifier: Classifier { hidden, out },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Parameter ids belonging to the classifier head.
    pub fn classifier_params(&self) -> Vec<ParamId> {
        let c = &self.classifier;
        vec![c.hidden.weight, c.hidden.bias, c.out.weight, c.out.bias]
    }

    pub fn latent_width(&self) -> usize {
        self.encoder.latent.outputs
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (h, w) = self.config.input_size;
        match *shape {
            [_, c, hh, ww] if c == self.config.input_channels && hh == h && ww == w => Ok(()),
            _ => Err(Error::shape(
                "encode",
                shape,
                &[0, self.config.input_channels, h, w],
            )),
        }
    }

    fn check_latent(&self, shape: &[usize], op: &'static str) -> Result<()> {
        match *shape {
            [_, d] if d == self.config.latent_dim => Ok(()),
            _ => Err(Error::shape(op, shape, &[0, self.config.latent_dim])),
        }
    }

    pub fn encode_var(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        self.check_input(ctx.graph.shape(x))?;
        let mut h = x;
        for block in &self.encoder.blocks {
            h = block.forward(ctx, h)?;
        }
        h = self.encoder.bn.forward(ctx, h)?;
        h = ctx.graph.relu(h);
        let n = ctx.graph.shape(h)[0];
        let flat = ctx.graph.value(h).len() / n;
        h = ctx.graph.reshape(h, &[n, flat])?;
        self.encoder.latent.forward(ctx, h)
    }

    pub fn decode_var(&self, ctx: &mut Ctx<'_, T>, z: Var) -> Result<Var> {
        self.check_latent(ctx.graph.shape(z), "decode")?;
        let n = ctx.graph.shape(z)[0];
        let mut h = self.decoder.expand.forward(ctx, z)?;
        let ch = *self.config.stage_widths.last().expect("validated");
        h = ctx.graph.reshape(h, &[n, ch, self.grid.0, self.grid.1])?;
        for stage in &self.decoder.stages {
            h = ctx.graph.upsample_nearest(h, 2)?;
            for block in &stage.blocks {
                h = block.forward(ctx, h)?;
            }
        }
        h = self.decoder.bn.forward(ctx, h)?;
        h = ctx.graph.relu(h);
        let k = ctx.param(self.decoder.out_kernel);
        let b = ctx.param(self.decoder.out_bias);
        h = ctx.graph.conv2d(h, k, Some(b), 1, 0)?;
        Ok(ctx.graph.tanh(h))
    }

    /// Classifier logit `[N, 1]`.
    pub fn logit_var(&self, ctx: &mut Ctx<'_, T>, z: Var) -> Result<Var> {
        self.check_latent(ctx.graph.shape(z), "classify")?;
        let h = self.classifier.hidden.forward(ctx, z)?;
        let h = ctx.graph.relu(h);
        self.classifier.out.forward(ctx, h)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Outputs> {
        let latent = self.encode_var(ctx, x)?;
        let recon = self.decode_var(ctx, latent)?;
        let logit = self.logit_var(ctx, latent)?;
        Ok(Outputs {
            latent,
            recon,
            logit,
        })
    }

    /// Runs `f` on independent chunks of `batch` (inference only) and
    /// concatenates the per-chunk results in order.
    fn chunked<R: Send>(
        &self,
        batch: &Tensor<T>,
        f: impl Fn(&mut Ctx<'_, T>, Var) -> Result<R> + Sync + Send,
    ) -> Result<Vec<R>> {
        let n = batch.shape()[0];
        let chunks = n.div_ceil(INFER_CHUNK);
        par::map_range(chunks, |i| {
            let part = batch.slice_outer(i * INFER_CHUNK, ((i + 1) * INFER_CHUNK).min(n))?;
            let mut ctx = Ctx::new(&self.store, Mode::Infer, 0);
            let x = ctx.input(part);
            f(&mut ctx, x)
        })
        .into_iter()
        .collect()
    }

    /// Descriptors `[N, D]` in inference mode.
    pub fn encode(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(batch.shape())?;
        let parts = self.chunked(batch, |ctx, x| {
            let z = self.encode_var(ctx, x)?;
            Ok(ctx.value(z).clone())
        })?;
        Tensor::concat_outer(&parts)
    }

    /// Reconstructions `[N, 4, H, W]` with values in (-1, 1).
    pub fn decode(&self, latent: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_latent(latent.shape(), "decode")?;
        let parts = self.chunked(latent, |ctx, z| {
            let r = self.decode_var(ctx, z)?;
            Ok(ctx.value(r).clone())
        })?;
        Tensor::concat_outer(&parts)
    }

    /// Tumour probabilities `[N]`, each in (0, 1).
    pub fn classify(&self, latent: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_latent(latent.shape(), "classify")?;
        let parts = self.chunked(latent, |ctx, z| {
            let l = self.logit_var(ctx, z)?;
            Ok(ctx.value(l).data().to_vec())
        })?;
        let probs: Vec<T> = parts.concat().into_iter().map(probability).collect();
        Tensor::new(&[probs.len()], probs)
    }

    /// All outputs of one encoder pass.
    pub fn infer(&self, batch: &Tensor<T>) -> Result<Inference<T>> {
        self.check_input(batch.shape())?;
        let parts = self.chunked(batch, |ctx, x| {
            let out = self.forward(ctx, x)?;
            Ok((
                ctx.value(out.latent).clone(),
                ctx.value(out.recon).clone(),
                ctx.value(out.logit).data().to_vec(),
            ))
        })?;
        let mut lat = Vec::new();
        let mut rec = Vec::new();
        let mut prob = Vec::new();
        for (l, r, p) in parts {
            lat.push(l);
            rec.push(r);
            prob.extend(p.into_iter().map(probability));
        }
        Ok(Inference {
            latent: Tensor::concat_outer(&lat)?,
            recon: Tensor::concat_outer(&rec)?,
            probability: prob,
        })
    }

    /// Seeds batch-norm running statistics from a train-mode pass over
    /// `batch` without touching trainable parameters.
    pub fn calibrate(&mut self, batch: &Tensor<T>, seed: u64) -> Result<()> {
        let updates = {
            let mut ctx = Ctx::new(&self.store, Mode::Train, seed);
            let x = ctx.input(batch.clone());
            self.forward(&mut ctx, x)?;
            ctx.take_bn_updates()
        };
        apply_bn_updates(&mut self.store, updates);
        Ok(())
    }

    /// True once every batch norm has running statistics.
    pub fn is_calibrated(&self) -> bool {
        self.store
            .iter()
            .filter(|(_, p)| p.name.ends_with(".tracked"))
            .all(|(_, p)| p.value.data()[0] > T::zero())
    }
}
