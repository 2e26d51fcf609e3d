//! Two-stage training: stage 1 fits the decoder with the random encoder
//! frozen until the smoothed loss plateaus, stage 2 trains both.
//!
//! Every step samples non-zero random bitstrings, encodes them, renders
//! with the soft rasterizer, optionally augments and soft-preprocesses,
//! decodes and takes one Adam step on the bit cross-entropy. The batch is
//! split into fixed-size chunks, each with its own tape, so results do not
//! depend on the number of worker threads.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{self, AugmentConfig, AugmentError, AugmentParams};
use crate::codec::{self, ArchConfig, BitString, CodecError, Model, ModelConfig};
use crate::rectify::{self, RectifyError};
use crate::softraster::{self, hard_rasterize, RasterConfig, RasterError};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::vecdraw::Drawing;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step} (stage {stage}): loss {loss}")]
    Diverged { step: usize, stage: u8, loss: f32 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("evaluation needs at least one sample")]
    EmptyEval,
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Rectify(#[from] RectifyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_bits: usize,
    pub batch_size: usize,
    pub stage1_max_steps: usize,
    /// Plateau evaluations without enough improvement before stage 1 ends.
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    /// Steps between plateau evaluations.
    pub plateau_interval: usize,
    pub ema_decay: f64,
    pub stage2_steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Learning rate at the last stage-2 step as a fraction of the initial
    /// one (cosine decay); 1 keeps it constant.
    pub final_lr_fraction: f64,
    /// Standard deviation of the initial encoder entries.
    pub encoder_init_std: f64,
    pub raster: RasterConfig,
    /// Soft-raster `s` and `t` reached at the last stage-2 step, moving
    /// geometrically from the `raster` values; `None` keeps them fixed.
    pub final_sharpness: Option<f64>,
    pub arch: ArchConfig,
    /// `None` disables augmentation.
    pub augment: Option<AugmentConfig>,
    /// Sharpness of the soft threshold standing in for Otsu binarization
    /// during training; `None` feeds decoder inputs unprocessed.
    pub preprocess_sharpness: Option<f32>,
    pub rng_seed: u64,
    /// Images per tape; fixes the gradient summation order.
    pub chunk_size: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_bits: 24,
            batch_size: 32,
            stage1_max_steps: 1000,
            plateau_patience: 20,
            plateau_min_delta: 1e-3,
            plateau_interval: 50,
            ema_decay: 0.98,
            stage2_steps: 3000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            final_lr_fraction: 1.0,
            encoder_init_std: 0.5,
            raster: RasterConfig::default(),
            final_sharpness: None,
            arch: ArchConfig::default(),
            augment: Some(AugmentConfig::default()),
            preprocess_sharpness: Some(20.0),
            rng_seed: 0,
            chunk_size: 8,
            checkpoint_path: None,
            metrics_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.n_bits == 0
            || self.batch_size == 0
            || self.chunk_size == 0
            || self.plateau_interval == 0
        {
            return bad("n_bits, batch_size, chunk_size and plateau_interval must be positive");
        }
        if self.stage1_max_steps == 0 || self.plateau_patience == 0 {
            return bad("stage1_max_steps and plateau_patience must be positive");
        }
        if !(self.plateau_min_delta >= 0.0) {
            return bad("plateau_min_delta must be non-negative");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must be in [0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0)
        {
            return bad("Adam moments must be in [0, 1) and eps positive");
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return bad("final_lr_fraction must be in (0, 1]");
        }
        if !(self.encoder_init_std > 0.0 && self.encoder_init_std.is_finite()) {
            return bad("encoder_init_std must be positive");
        }
        if let Some(k) = self.preprocess_sharpness {
            if !(k > 0.0 && k.is_finite()) {
                return bad("preprocess_sharpness must be positive");
            }
        }
        self.raster.validate()?;
        if self
            .final_sharpness
            .is_some_and(|f| !(f.is_finite() && f > 0.0))
        {
            return bad("final_sharpness must be positive");
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub stage: u8,
    pub loss: f32,
    pub bit_acc: f32,
}

pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<StepMetrics>,
    /// Encoder matrix at initialization and after stage 1.
    pub encoder_init: Vec<f32>,
    pub encoder_after_stage1: Vec<f32>,
    pub stage1_steps: usize,
}

/// Adam with per-parameter moment buffers.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(model: &Model, beta1: f64, beta2: f64, eps: f64) -> Self {
        let sizes: Vec<usize> = model.params().iter().map(|p| p.numel()).collect();
        Self {
            beta1,
            beta2,
            eps,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: vec![0; sizes.len()],
        }
    }

    /// Updates parameter `i` in place from its gradient.
    pub fn step(&mut self, model: &mut Model, i: usize, grad: &[f32], lr: f64) -> Result<()> {
        self.t[i] += 1;
        let t = self.t[i] as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let (m, v) = (&mut self.m[i], &mut self.v[i]);
        let data: Vec<f32> = model.params()[i]
            .data
            .iter()
            .zip(grad)
            .enumerate()
            .map(|(k, (&w, &g))| {
                let g = g as f64;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let step = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                (w as f64 - step) as f32
            })
            .collect();
        model.set_param(i, data)?;
        Ok(())
    }
}

/// Randomness for one image of a step, drawn before any parallel work.
struct Sample {
    bits: BitString,
    augment: Option<AugmentParams>,
}

struct ChunkResult {
    loss_sum: f64,
    correct: usize,
    grads: Vec<Option<Vec<f32>>>,
}

struct Pipeline<'a> {
    d: &'a Drawing,
    cfg: &'a TrainConfig,
    half_ranges: Vec<f32>,
    mask: Vec<[f64; 2]>,
}

impl Pipeline<'_> {
    fn chunk(
        &self,
        model: &Model,
        samples: &[Sample],
        raster: &RasterConfig,
        train_encoder: bool,
    ) -> Result<ChunkResult> {
        let nb = self.cfg.n_bits;
        let tape = Tape::new();
        let bound = model.bind(Some(&tape), |n| train_encoder || n != "encoder.A");
        let bits: Vec<BitString> = samples.iter().map(|s| s.bits.clone()).collect();
        let bt = codec::bits_tensor(&bits, nb)?;
        let hr = Tensor::from_vec(self.half_ranges.clone(), &[self.half_ranges.len()])?;
        let delta = bound.encode_delta(&bt, &hr)?;
        let mut x = softraster::soft_rasterize(self.d, &delta, raster)?;
        if self.cfg.augment.is_some() {
            let params: Vec<AugmentParams> = samples
                .iter()
                .map(|s| s.augment.clone().expect("sampled"))
                .collect();
            x = augment::apply(&x, &params)?;
        }
        if let Some(k) = self.cfg.preprocess_sharpness {
            x = rectify::soft_preprocess(&x, &self.mask, k)?;
        }
        let logits = bound.decode_logits(&x)?;
        let loss = codec::bce_loss(&logits, &bt)?;
        let n = samples.len();
        let correct = logits
            .data()
            .iter()
            .zip(bt.data())
            .filter(|(&z, &b)| (z > 0.0) == (b > 0.5))
            .count();
        let loss_val = loss.item() as f64;
        let g = tape.backward(&loss)?;
        let grads = bound
            .tensors
            .iter()
            .map(|t| g.get(t).map(|v| v.iter().map(|x| x * n as f32).collect()))
            .collect();
        Ok(ChunkResult {
            loss_sum: loss_val * n as f64,
            correct,
            grads,
        })
    }

    /// Mean loss, bit accuracy and summed-then-averaged gradients.
    fn batch(
        &self,
        model: &Model,
        samples: &[Sample],
        raster: &RasterConfig,
        train_encoder: bool,
    ) -> Result<(f32, f32, Vec<Vec<f32>>)> {
        let results: Vec<Result<ChunkResult>> = samples
            .par_chunks(self.cfg.chunk_size)
            .map(|c| self.chunk(model, c, raster, train_encoder))
            .collect();
        let b = samples.len() as f64;
        let mut loss = 0.0;
        let mut correct = 0;
        let mut grads: Vec<Vec<f32>> = model
            .params()
            .iter()
            .map(|p| vec![0.0; p.numel()])
            .collect();
        for r in results {
            let r = r?;
            loss += r.loss_sum;
            correct += r.correct;
            for (acc, g) in grads.iter_mut().zip(r.grads) {
                if let Some(g) = g {
                    acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
                }
            }
        }
        for g in &mut grads {
            g.iter_mut().for_each(|v| *v = (*v as f64 / b) as f32);
        }
        Ok((
            (loss / b) as f32,
            correct as f32 / (b as f32 * self.cfg.n_bits as f32),
            grads,
        ))
    }
}

fn sample_step(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    (0..cfg.batch_size)
        .map(|_| Sample {
            bits: BitString::random_nonzero(cfg.n_bits, rng),
            augment: cfg.augment.as_ref().map(|a| {
                let mut r = ChaCha8Rng::seed_from_u64(rng.gen());
                AugmentParams::sample(a, cfg.raster.width, cfg.raster.height, &mut r)
            }),
        })
        .collect()
}

/// Exponential moving average plateau detector.
struct Plateau {
    decay: f64,
    ema: Option<f64>,
    best: f64,
    stale: usize,
}

impl Plateau {
    fn new(decay: f64) -> Self {
        Self {
            decay,
            ema: None,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    fn update(&mut self, loss: f64) {
        self.ema = Some(match self.ema {
            None => loss,
            Some(e) => self.decay * e + (1.0 - self.decay) * loss,
        });
    }

    /// Records an evaluation; true once `patience` evaluations in a row
    /// improved the best EMA by less than `min_delta`.
    fn evaluate(&mut self, min_delta: f64, patience: usize) -> bool {
        let e = self.ema.unwrap_or(f64::INFINITY);
        if self.best - e >= min_delta {
            self.best = e;
            self.stale = 0;
        } else {
            self.best = self.best.min(e);
            self.stale += 1;
        }
        self.stale >= patience
    }
}

fn write_metrics(path: &PathBuf, metrics: &[StepMetrics]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "step,stage,loss,bit_acc")?;
    for m in metrics {
        writeln!(w, "{},{},{},{}", m.step, m.stage, m.loss, m.bit_acc)?;
    }
    w.flush()?;
    Ok(())
}

fn annealed_raster(cfg: &TrainConfig, progress: f64) -> RasterConfig {
    let mut r = cfg.raster;
    if let Some(f) = cfg.final_sharpness {
        let lerp = |a: f64| a * (f / a).powf(progress);
        r.s = lerp(r.s);
        r.t = lerp(r.t);
    }
    r
}

/// Initial model for `cfg`, as used by [`train`].
pub fn init_model(d: &Drawing, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Model> {
    let mut mc = ModelConfig::for_drawing(d, cfg.n_bits, cfg.raster);
    mc.arch = cfg.arch.clone();
    Ok(Model::random(mc, cfg.encoder_init_std, rng)?)
}

pub fn train(d: &Drawing, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if d.n_vars() < cfg.n_bits {
        warn!(
            "drawing has {} variables for {} bits; capacity is likely insufficient",
            d.n_vars(),
            cfg.n_bits
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut model = init_model(d, cfg, &mut rng)?;
    let pipe = Pipeline {
        d,
        cfg,
        half_ranges: codec::half_ranges(d).to_vec(),
        mask: rectify::mask_pixels(&model.config.capture, cfg.raster.width, cfg.raster.height),
    };
    let mut adam = Adam::new(&model, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let encoder_init = model.encoder_matrix().data.as_ref().clone();
    let mut metrics = Vec::new();
    let mut plateau = Plateau::new(cfg.ema_decay);
    let mut step = 0;

    let mut run_step = |model: &mut Model,
                        stage: u8,
                        lr: f64,
                        raster: &RasterConfig,
                        plateau: &mut Plateau|
     -> Result<()> {
        let samples = sample_step(cfg, &mut rng);
        let train_encoder = stage == 2;
        let (loss, acc, grads) = pipe.batch(model, &samples, raster, train_encoder)?;
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(TrainError::Diverged { step, stage, loss });
        }
        for (i, g) in grads.iter().enumerate() {
            if !train_encoder && model.params()[i].name == "encoder.A" {
                continue;
            }
            adam.step(model, i, g, lr)?;
        }
        plateau.update(loss as f64);
        metrics.push(StepMetrics {
            step,
            stage,
            loss,
            bit_acc: acc,
        });
        if step % 50 == 0 {
            info!("step {step} stage {stage} loss {loss:.4} bit_acc {acc:.4}");
        }
        step += 1;
        Ok(())
    };

    let mut stage1_steps = 0;
    while stage1_steps < cfg.stage1_max_steps {
        run_step(&mut model, 1, cfg.learning_rate, &cfg.raster, &mut plateau)?;
        stage1_steps += 1;
        if stage1_steps % cfg.plateau_interval == 0
            && plateau.evaluate(cfg.plateau_min_delta, cfg.plateau_patience)
        {
            info!("stage 1 plateaued after {stage1_steps} steps");
            break;
        }
    }
    let encoder_after_stage1 = model.encoder_matrix().data.as_ref().clone();

    let mut best: Option<(f64, Model)> = None;
    let mut stage2 = Plateau::new(cfg.ema_decay);
    for k in 0..cfg.stage2_steps {
        let progress = k as f64 / cfg.stage2_steps.max(2).saturating_sub(1) as f64;
        let frac = cfg.final_lr_fraction
            + (1.0 - cfg.final_lr_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        let raster = annealed_raster(cfg, progress);
        run_step(
            &mut model,
            2,
            cfg.learning_rate * frac,
            &raster,
            &mut stage2,
        )?;
        let ema = stage2.ema.unwrap_or(f64::INFINITY);
        if ((k + 1) % cfg.plateau_interval == 0 || k + 1 == cfg.stage2_steps)
            && best.as_ref().is_none_or(|(b, _)| ema < *b)
        {
            best = Some((ema, model.clone()));
        }
    }
    let model = best.map_or(model, |(_, m)| m);
    if let Some(p) = &cfg.checkpoint_path {
        model.save_file(p)?;
    }
    if let Some(p) = &cfg.metrics_path {
        write_metrics(p, &metrics)?;
    }
    Ok(TrainOutcome {
        model,
        metrics,
        encoder_init,
        encoder_after_stage1,
        stage1_steps,
    })
}

/// Mean loss over a fixed batch of bitstrings, decoder path only (no
/// augmentation), for smoke tests of the optimizer.
pub fn fixed_batch_losses(d: &Drawing, cfg: &TrainConfig, steps: usize) -> Result<Vec<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut model = init_model(d, cfg, &mut rng)?;
    let pipe = Pipeline {
        d,
        cfg,
        half_ranges: codec::half_ranges(d).to_vec(),
        mask: rectify::mask_pixels(&model.config.capture, cfg.raster.width, cfg.raster.height),
    };
    let samples = sample_step(cfg, &mut rng);
    let mut adam = Adam::new(&model, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (loss, _, grads) = pipe.batch(&model, &samples, &cfg.raster, false)?;
        out.push(loss);
        for (i, g) in grads.iter().enumerate().skip(1) {
            adam.step(&mut model, i, g, cfg.learning_rate)?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub n_samples: usize,
    pub bit_accuracy: f64,
    pub message_accuracy: f64,
}

/// Encodes random bitstrings, renders them with the hard rasterizer,
/// optionally augments, preprocesses as on the capture side, decodes and
/// thresholds.
pub fn evaluate(
    model: &Model,
    d: &Drawing,
    n_samples: usize,
    augment_cfg: Option<&AugmentConfig>,
    rng_seed: u64,
) -> Result<EvalReport> {
    if n_samples == 0 {
        return Err(TrainError::EmptyEval);
    }
    if let Some(a) = augment_cfg {
        a.validate()?;
    }
    let (w, h) = (model.config.raster.width, model.config.raster.height);
    let mask = rectify::mask_pixels(&model.config.capture, w, h);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let jobs: Vec<(BitString, u64)> = (0..n_samples)
        .map(|_| (BitString::random(model.config.n_bits, &mut rng), rng.gen()))
        .collect();
    let images: Vec<Result<Vec<f32>>> = jobs
        .par_iter()
        .map(|(b, seed)| {
            let delta = model.encode_delta(d, b)?;
            let mut img = hard_rasterize(d, &delta, w, h)?;
            if let Some(a) = augment_cfg {
                let p = AugmentParams::sample(a, w, h, &mut ChaCha8Rng::seed_from_u64(*seed));
                let t = augment::apply(&img.to_tensor(), &[p])?;
                img = softraster::Image::new(w, h, t.to_vec());
            }
            Ok(rectify::preprocess(&img, &mask).0.data)
        })
        .collect();
    let mut data = Vec::with_capacity(n_samples * w * h);
    for i in images {
        data.extend(i?);
    }
    let probits = model.decode_probits(&Tensor::from_vec(data, &[n_samples, 1, h, w])?)?;
    let mut bit_ok = 0usize;
    let mut msg_ok = 0usize;
    for ((b, _), p) in jobs.iter().zip(&probits) {
        let e = b.len() - p.threshold().hamming(b);
        bit_ok += e;
        msg_ok += usize::from(e == b.len());
    }
    Ok(EvalReport {
        n_samples,
        bit_accuracy: bit_ok as f64 / (n_samples * model.config.n_bits) as f64,
        message_accuracy: msg_ok as f64 / n_samples as f64,
    })
}
