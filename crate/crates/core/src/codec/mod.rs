//! Encoder (bits → bounded perturbation), decoder CNN (image → per-bit
//! probabilities), thresholding and the training loss.
//!
//! The encoder is a single matrix `A` of shape `(N_v, N_b)` without bias:
//! `delta = half_range ⊙ (2σ(A·b) − 1)`. Bits enter as 0/1, so the all-zero
//! string always encodes the nominal drawing.

mod bits;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::softraster::{Image, RasterConfig, RasterError};
use crate::tensor::checkpoint::{self, CheckpointError};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::vecdraw::{Drawing, VecdrawError};

pub use bits::BitString;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid bits: {0}")]
    InvalidBits(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Drawing(#[from] VecdrawError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T> = std::result::Result<T, CodecError>;

/// Decoder layer sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Output channels of the three conv layers.
    pub conv_channels: [usize; 3],
    /// Odd square kernel size.
    pub kernel: usize,
    pub fc_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            conv_channels: [16, 32, 64],
            kernel: 3,
            fc_hidden: 256,
        }
    }
}

/// Drawing-space capture geometry carried with a model so an image can be
/// rectified and decoded from the checkpoint alone.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureInfo {
    pub keypoints: Vec<[f64; 2]>,
    pub mask: Vec<[f64; 2]>,
    /// `[min_x, min_y, width, height]` of the drawing canvas.
    pub canvas: [f64; 4],
}

impl CaptureInfo {
    pub fn from_drawing(d: &Drawing) -> Self {
        let c = &d.canvas;
        Self {
            keypoints: d.keypoints.iter().map(|p| [p.x, p.y]).collect(),
            mask: d.mask.iter().map(|p| [p.x, p.y]).collect(),
            canvas: [c.min_x, c.min_y, c.width, c.height],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_bits: usize,
    pub n_vars: usize,
    pub raster: RasterConfig,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub capture: CaptureInfo,
}

impl ModelConfig {
    pub fn for_drawing(d: &Drawing, n_bits: usize, raster: RasterConfig) -> Self {
        Self {
            n_bits,
            n_vars: d.n_vars(),
            raster,
            arch: ArchConfig::default(),
            capture: CaptureInfo::from_drawing(d),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CodecError::InvalidConfig(m));
        if self.n_bits == 0 {
            return bad("n_bits must be positive".into());
        }
        self.raster.validate()?;
        let a = &self.arch;
        if a.kernel.is_multiple_of(2) || a.conv_channels.contains(&0) || a.fc_hidden == 0 {
            return bad(format!("unsupported architecture {a:?}"));
        }
        if self.raster.width < 8 || self.raster.height < 8 {
            return bad("decoder input must be at least 8x8".into());
        }
        Ok(())
    }

    /// Flattened feature length entering the first fully connected layer.
    pub fn feature_len(&self) -> usize {
        self.arch.conv_channels[2] * (self.raster.height / 8) * (self.raster.width / 8)
    }

    /// Parameter names and shapes in checkpoint order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let [c1, c2, c3] = self.arch.conv_channels;
        let k = self.arch.kernel;
        vec![
            ("encoder.A".into(), vec![self.n_vars, self.n_bits]),
            ("decoder.conv1.w".into(), vec![c1, 1, k, k]),
            ("decoder.conv1.b".into(), vec![c1]),
            ("decoder.conv2.w".into(), vec![c2, c1, k, k]),
            ("decoder.conv2.b".into(), vec![c2]),
            ("decoder.conv3.w".into(), vec![c3, c2, k, k]),
            ("decoder.conv3.b".into(), vec![c3]),
            (
                "decoder.fc1.w".into(),
                vec![self.feature_len(), self.arch.fc_hidden],
            ),
            ("decoder.fc1.b".into(), vec![self.arch.fc_hidden]),
            (
                "decoder.fc2.w".into(),
                vec![self.arch.fc_hidden, self.n_bits],
            ),
            ("decoder.fc2.b".into(), vec![self.n_bits]),
        ]
    }
}

/// Named weight array. Storage is shared and immutable; updates replace it.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f32>>,
}

impl Parameter {
    pub fn tensor(&self) -> Tensor {
        Tensor::from_arc(self.data.clone(), &self.shape).expect("parameter shape")
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

const ENCODER: usize = 0;

/// Encoder matrix and decoder weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    params: Vec<Parameter>,
}

/// Per-bit decoder outputs in (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Probits(pub Vec<f32>);

impl Probits {
    /// Bit i is 1 iff its probability exceeds 0.5.
    pub fn threshold(&self) -> BitString {
        threshold(&self.0)
    }
}

/// `b_i = 0` if `x_i ≤ 0.5`, else 1.
pub fn threshold(x: &[f32]) -> BitString {
    BitString::new(x.iter().map(|&v| u8::from(v > 0.5)).collect()).expect("binary")
}

/// Mean over all entries of `softplus(z) − b·z`, the logit-space sigmoid
/// cross-entropy. `bits` must match the shape of `logits` and is treated as
/// a constant.
pub fn bce_loss(logits: &Tensor, bits: &Tensor) -> Result<Tensor> {
    if logits.shape() != bits.shape() {
        return Err(CodecError::DimensionMismatch {
            expected: logits.numel(),
            got: bits.numel(),
        });
    }
    let n = logits.numel().max(1) as f64;
    let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    let z: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = bits.data().iter().map(|&v| v as f64).collect();
    // b·softplus(−z) + (1 − b)·softplus(z) avoids cancellation for large |z|
    let loss: f64 = z
        .iter()
        .zip(&b)
        .map(|(&z, &b)| b * softplus(-z) + (1.0 - b) * softplus(z))
        .sum::<f64>()
        / n;
    Ok(Tensor::custom_op(
        &[logits],
        &[],
        vec![loss as f32],
        move |g, _| {
            let scale = g[0] as f64 / n;
            let grad = z
                .iter()
                .zip(&b)
                .map(|(&z, &b)| (scale * (1.0 / (1.0 + (-z).exp()) - b)) as f32)
                .collect();
            vec![Some(grad)]
        },
    )?)
}

/// Stacks bitstrings into a `(B, N_b)` tensor.
pub fn bits_tensor(bits: &[BitString], n_bits: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(bits.len() * n_bits);
    for b in bits {
        if b.len() != n_bits {
            return Err(CodecError::DimensionMismatch {
                expected: n_bits,
                got: b.len(),
            });
        }
        data.extend(b.as_f32());
    }
    Ok(Tensor::from_vec(data, &[bits.len(), n_bits])?)
}

/// Half-widths of the drawing's variable intervals as a `(N_v)` tensor,
/// rounded toward zero so a saturated f32 encoder stays within bounds.
pub fn half_ranges(d: &Drawing) -> Tensor {
    let hr: Vec<f32> = d
        .variables
        .iter()
        .map(|v| {
            let h = v.half_range();
            let f = h as f32;
            if f as f64 > h {
                f.next_down()
            } else {
                f
            }
        })
        .collect();
    let n = hr.len();
    Tensor::from_vec(hr, &[n]).expect("vector")
}

fn he_uniform(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<f32> {
    let lim = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-lim..lim) as f32).collect()
}

impl Model {
    /// All weights zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = config
            .parameter_shapes()
            .into_iter()
            .map(|(name, shape)| Parameter {
                data: Arc::new(vec![0.0; shape.iter().product()]),
                name,
                shape,
            })
            .collect();
        Ok(Self { config, params })
    }

    /// `A` entries i.i.d. `N(0, a_std²)`; conv and dense weights He-uniform;
    /// biases zero.
    pub fn random(config: ModelConfig, a_std: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let normal =
            Normal::new(0.0, a_std).map_err(|e| CodecError::InvalidConfig(e.to_string()))?;
        for p in &mut m.params {
            let n = p.numel();
            let data = if p.name == "encoder.A" {
                (0..n).map(|_| normal.sample(rng) as f32).collect()
            } else if p.name.ends_with(".w") {
                let fan_in = if p.shape.len() == 4 {
                    p.shape[1..].iter().product()
                } else {
                    p.shape[0]
                };
                he_uniform(rng, n, fan_in)
            } else {
                continue;
            };
            p.data = Arc::new(data);
        }
        Ok(m)
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Replaces the storage of parameter `i`; the length must not change.
    pub fn set_param(&mut self, i: usize, data: Vec<f32>) -> Result<()> {
        let p = &mut self.params[i];
        if data.len() != p.numel() {
            return Err(CodecError::DimensionMismatch {
                expected: p.numel(),
                got: data.len(),
            });
        }
        p.data = Arc::new(data);
        Ok(())
    }

    pub fn encoder_matrix(&self) -> &Parameter {
        &self.params[ENCODER]
    }

    /// Parameter tensors, registered as leaves on `tape` where `trainable`
    /// returns true for the name.
    pub fn bind(&self, tape: Option<&Tape>, trainable: impl Fn(&str) -> bool) -> Bound {
        Bound {
            tensors: self
                .params
                .iter()
                .map(|p| {
                    let t = p.tensor();
                    match tape {
                        Some(tape) if trainable(&p.name) => tape.leaf(&t),
                        _ => t,
                    }
                })
                .collect(),
            config: self.config.clone(),
        }
    }

    fn check_drawing(&self, d: &Drawing) -> Result<()> {
        if d.n_vars() != self.config.n_vars {
            return Err(CodecError::DimensionMismatch {
                expected: self.config.n_vars,
                got: d.n_vars(),
            });
        }
        Ok(())
    }

    /// Perturbation offsets for `b`, in f64. Entries lie strictly inside the
    /// open bounds interval.
    pub fn encode_delta(&self, d: &Drawing, b: &BitString) -> Result<Vec<f64>> {
        self.check_drawing(d)?;
        let nb = self.config.n_bits;
        if b.len() != nb {
            return Err(CodecError::DimensionMismatch {
                expected: nb,
                got: b.len(),
            });
        }
        let a = &self.params[ENCODER].data;
        const EDGE: f64 = 1.0 - 1e-12;
        Ok(d.variables
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let x: f64 = b
                    .bits()
                    .iter()
                    .enumerate()
                    .filter(|(_, &bit)| bit == 1)
                    .map(|(j, _)| a[i * nb + j] as f64)
                    .sum();
                // 2σ(x) − 1 = tanh(x/2)
                v.half_range() * (x / 2.0).tanh().clamp(-EDGE, EDGE)
            })
            .collect())
    }

    /// The perturbed drawing carrying `b`.
    pub fn encode(&self, d: &Drawing, b: &BitString) -> Result<Drawing> {
        Ok(d.apply_perturbation(&self.encode_delta(d, b)?)?)
    }

    /// Per-bit probabilities for a batch `(B, 1, H, W)`, computed in
    /// parallel chunks.
    pub fn decode_probits(&self, images: &Tensor) -> Result<Vec<Probits>> {
        let s = images.shape();
        let (h, w) = (self.config.raster.height, self.config.raster.width);
        if s.len() != 4 || s[1] != 1 || s[2] != h || s[3] != w {
            return Err(TensorError::ShapeMismatch {
                op: "decode_probits",
                detail: format!("expected (B, 1, {h}, {w}), got {s:?}"),
            }
            .into());
        }
        let plane = h * w;
        const CHUNK: usize = 8;
        let chunks: Vec<Result<Vec<Probits>>> = images
            .data()
            .par_chunks(CHUNK * plane)
            .map(|c| {
                let x = Tensor::from_vec(c.to_vec(), &[c.len() / plane, 1, h, w])?;
                let z = self.bind(None, |_| false).decode_logits(&x)?.sigmoid();
                Ok(z.data()
                    .chunks(self.config.n_bits)
                    .map(|r| Probits(r.to_vec()))
                    .collect())
            })
            .collect();
        let mut out = Vec::with_capacity(s[0]);
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    pub fn decode_image(&self, img: &Image) -> Result<Probits> {
        Ok(self.decode_probits(&img.to_tensor())?.remove(0))
    }

    pub fn save(&self, w: &mut impl Write) -> Result<()> {
        let config = serde_json::to_string(&self.config).expect("config serializes");
        let mut entries: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.tensor()))
            .collect();
        entries.push(("config".into(), checkpoint::text_entry(&config)));
        checkpoint::write_entries(w, &entries)?;
        Ok(())
    }

    pub fn load(r: &mut impl Read) -> Result<Self> {
        let entries = checkpoint::read_entries(r)?;
        let find = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| CheckpointError::MissingEntry(name.into()))
        };
        let text = checkpoint::entry_text(find("config")?)?;
        let config: ModelConfig = serde_json::from_str(&text)
            .map_err(|e| CheckpointError::Corrupt(format!("config entry: {e}")))?;
        let mut m = Self::zeros(config)?;
        for p in &mut m.params {
            let t = find(&p.name)?;
            if t.shape() != p.shape.as_slice() {
                return Err(CheckpointError::Corrupt(format!(
                    "{} has shape {:?}, config implies {:?}",
                    p.name,
                    t.shape(),
                    p.shape
                ))
                .into());
            }
            p.data = t.shared_data();
        }
        Ok(m)
    }

    pub fn save_file(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(CheckpointError::from)?;
        let mut w = BufWriter::new(f);
        self.save(&mut w)?;
        w.flush().map_err(CheckpointError::from)?;
        Ok(())
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(CheckpointError::from)?;
        Self::load(&mut BufReader::new(f))
    }
}

/// Model weights as tensors, possibly recorded on a tape.
pub struct Bound {
    pub tensors: Vec<Tensor>,
    config: ModelConfig,
}

impl Bound {
    /// `(B, N_b)` bits → `(B, N_v)` offsets `half_range ⊙ (2σ(b·Aᵀ) − 1)`.
    pub fn encode_delta(&self, bits: &Tensor, half_ranges: &Tensor) -> Result<Tensor> {
        if half_ranges.shape() != [self.config.n_vars] {
            return Err(CodecError::DimensionMismatch {
                expected: self.config.n_vars,
                got: half_ranges.numel(),
            });
        }
        let x = bits.matmul(&self.tensors[ENCODER].transpose()?)?;
        Ok(x.sigmoid().affine_scalar(2.0, -1.0).mul(half_ranges)?)
    }

    /// `(B, 1, H, W)` images → `(B, N_b)` logits.
    pub fn decode_logits(&self, images: &Tensor) -> Result<Tensor> {
        let t = &self.tensors;
        let mut x = images.clone();
        for l in 0..3 {
            x = x
                .conv2d(&t[1 + 2 * l], Some(&t[2 + 2 * l]))?
                .relu()
                .max_pool2d()?;
        }
        let b = x.shape()[0];
        let x = x.reshape(&[b, self.config.feature_len()])?;
        let h = x.matmul(&t[7])?.add(&t[8])?.relu();
        Ok(h.matmul(&t[9])?.add(&t[10])?)
    }
}
