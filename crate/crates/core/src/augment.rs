//! Random image corruptions applied between rendering and decoding during
//! training. Parameters are sampled outside the tape; the image path is
//! differentiable.
//!
//! Stages, in order: projective warp (jittered corners composed with
//! scale/rotation/translation about the image centre, bilinear sampling),
//! intensity `x·a + o`, additive Gaussian noise, salt-and-pepper as the
//! convex blend `(1 − m)·x + m·v`, and a final clamp to [0, 1].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, Mat3};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("invalid augment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, AugmentError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Maximum corner displacement per axis, as a fraction of image size.
    pub perspective_jitter: f64,
    pub scale_range: [f64; 2],
    pub rotation_range_deg: [f64; 2],
    pub translate_range_px: [f64; 2],
    pub intensity_scale_range: [f64; 2],
    pub intensity_offset_range: [f64; 2],
    pub gaussian_noise_std: f64,
    pub salt_pepper_prob: f64,
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            perspective_jitter: 0.05,
            scale_range: [0.9, 1.1],
            rotation_range_deg: [-10.0, 10.0],
            translate_range_px: [-3.0, 3.0],
            intensity_scale_range: [0.8, 1.2],
            intensity_offset_range: [-0.1, 0.1],
            gaussian_noise_std: 0.05,
            salt_pepper_prob: 0.01,
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Every stage disabled.
    pub fn identity() -> Self {
        Self {
            perspective_jitter: 0.0,
            scale_range: [1.0, 1.0],
            rotation_range_deg: [0.0, 0.0],
            translate_range_px: [0.0, 0.0],
            intensity_scale_range: [1.0, 1.0],
            intensity_offset_range: [0.0, 0.0],
            gaussian_noise_std: 0.0,
            salt_pepper_prob: 0.0,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AugmentError::InvalidConfig(m));
        let ranges = [
            ("scale_range", self.scale_range),
            ("rotation_range_deg", self.rotation_range_deg),
            ("translate_range_px", self.translate_range_px),
            ("intensity_scale_range", self.intensity_scale_range),
            ("intensity_offset_range", self.intensity_offset_range),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(format!("{name} [{lo}, {hi}] is not a valid interval"));
            }
        }
        if self.scale_range[0] <= 0.0 {
            return bad("scale_range must be positive".into());
        }
        if !(0.0..0.5).contains(&self.perspective_jitter) {
            return bad(format!(
                "perspective_jitter {} outside [0, 0.5)",
                self.perspective_jitter
            ));
        }
        if !(self.gaussian_noise_std.is_finite() && self.gaussian_noise_std >= 0.0) {
            return bad(format!(
                "gaussian_noise_std {} must be non-negative",
                self.gaussian_noise_std
            ));
        }
        if !(0.0..=1.0).contains(&self.salt_pepper_prob) {
            return bad(format!(
                "salt_pepper_prob {} outside [0, 1]",
                self.salt_pepper_prob
            ));
        }
        Ok(())
    }
}

/// One image's sampled corruption.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    /// Row-major map from output pixel coordinates to input coordinates.
    pub inverse_warp: [f64; 9],
    pub intensity_scale: f32,
    pub intensity_offset: f32,
    pub noise: Vec<f32>,
    /// Salt-and-pepper mask (0 or 1) and replacement values (0 or 1).
    pub sp_mask: Vec<f32>,
    pub sp_values: Vec<f32>,
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Forward map (input → output) of the spatial stage.
pub fn forward_warp(
    width: usize,
    height: usize,
    corners: &[[f64; 2]; 4],
    scale: f64,
    rotation_deg: f64,
    translate: [f64; 2],
) -> Option<Mat3> {
    let (w, h) = (width as f64, height as f64);
    let src = [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]];
    let persp = if src == *corners {
        Mat3::identity()
    } else {
        geom::homography_dlt(&src, corners)?
    };
    let (cx, cy) = (w / 2.0, h / 2.0);
    let (s, c) = rotation_deg.to_radians().sin_cos();
    let to_origin = Mat3::new(1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0);
    let rs = Mat3::new(
        scale * c,
        -scale * s,
        0.0,
        scale * s,
        scale * c,
        0.0,
        0.0,
        0.0,
        1.0,
    );
    let back = Mat3::new(
        1.0,
        0.0,
        cx + translate[0],
        0.0,
        1.0,
        cy + translate[1],
        0.0,
        0.0,
        1.0,
    );
    Some(back * rs * to_origin * persp)
}

impl AugmentParams {
    pub fn identity(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            inverse_warp: geom::row_major(&Mat3::identity()),
            intensity_scale: 1.0,
            intensity_offset: 0.0,
            noise: vec![0.0; n],
            sp_mask: vec![0.0; n],
            sp_values: vec![0.0; n],
        }
    }

    pub fn sample(cfg: &AugmentConfig, width: usize, height: usize, rng: &mut impl Rng) -> Self {
        let (w, h) = (width as f64, height as f64);
        let j = cfg.perspective_jitter;
        let mut corners = [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]];
        if j > 0.0 {
            for c in &mut corners {
                c[0] += rng.gen_range(-j..=j) * w;
                c[1] += rng.gen_range(-j..=j) * h;
            }
        }
        let scale = uniform(rng, cfg.scale_range);
        let rot = uniform(rng, cfg.rotation_range_deg);
        let t = [
            uniform(rng, cfg.translate_range_px),
            uniform(rng, cfg.translate_range_px),
        ];
        // jitter below 0.5 keeps the corner quadrilateral non-degenerate
        let fwd = forward_warp(width, height, &corners, scale, rot, t)
            .expect("jittered corners stay in general position");
        let inverse_warp = geom::row_major(&fwd.try_inverse().expect("invertible warp"));
        let intensity_scale = uniform(rng, cfg.intensity_scale_range) as f32;
        let intensity_offset = uniform(rng, cfg.intensity_offset_range) as f32;
        let n = width * height;
        let noise = if cfg.gaussian_noise_std > 0.0 {
            let normal = Normal::new(0.0, cfg.gaussian_noise_std).expect("valid std");
            (0..n).map(|_| normal.sample(rng) as f32).collect()
        } else {
            vec![0.0; n]
        };
        let p = cfg.salt_pepper_prob;
        let mut sp_mask = vec![0.0; n];
        let mut sp_values = vec![0.0; n];
        if p > 0.0 {
            for (m, v) in sp_mask.iter_mut().zip(&mut sp_values) {
                if rng.gen_bool(p) {
                    *m = 1.0;
                    *v = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
                }
            }
        }
        Self {
            inverse_warp,
            intensity_scale,
            intensity_offset,
            noise,
            sp_mask,
            sp_values,
        }
    }
}

/// Applies per-image parameters to a `(B, 1, H, W)` batch.
pub fn apply(images: &Tensor, params: &[AugmentParams]) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 || params.len() != s[0] {
        return Err(TensorError::ShapeMismatch {
            op: "augment",
            detail: format!("images {s:?} with {} parameter sets", params.len()),
        }
        .into());
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    if params
        .iter()
        .any(|p| p.noise.len() != h * w || p.sp_mask.len() != h * w || p.sp_values.len() != h * w)
    {
        return Err(TensorError::ShapeMismatch {
            op: "augment",
            detail: format!("per-pixel parameters do not match {h}x{w}"),
        }
        .into());
    }
    let warps: Vec<[f64; 9]> = params.iter().map(|p| p.inverse_warp).collect();
    let x = images.affine_grid_sample(&warps, h, w)?;
    let per_image = |f: &dyn Fn(&AugmentParams) -> f32| {
        Tensor::from_vec(params.iter().map(f).collect(), &[b, 1, 1, 1])
    };
    let x = x
        .mul(&per_image(&|p| p.intensity_scale)?)?
        .add(&per_image(&|p| p.intensity_offset)?)?;
    let stack = |f: &dyn Fn(&AugmentParams) -> Vec<f32>| {
        Tensor::from_vec(params.iter().flat_map(f).collect(), &[b, 1, h, w])
    };
    let x = x.add(&stack(&|p| p.noise.clone())?)?;
    let keep = stack(&|p| p.sp_mask.iter().map(|m| 1.0 - m).collect())?;
    let fill = stack(&|p| {
        p.sp_mask
            .iter()
            .zip(&p.sp_values)
            .map(|(m, v)| m * v)
            .collect()
    })?;
    Ok(x.mul(&keep)?.add(&fill)?.clamp01())
}

/// Samples one parameter set per image, each from its own generator seeded
/// by `rng`, and applies them.
pub fn augment(images: &Tensor, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Tensor> {
    cfg.validate()?;
    let s = images.shape();
    if s.len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "augment",
            detail: format!("expected (B, 1, H, W), got {s:?}"),
        }
        .into());
    }
    let params: Vec<AugmentParams> = (0..s[0])
        .map(|_| {
            let mut r = ChaCha8Rng::seed_from_u64(rng.gen());
            AugmentParams::sample(cfg, s[3], s[2], &mut r)
        })
        .collect();
    apply(images, &params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_configs() {
        let mut c = AugmentConfig::default();
        assert!(c.validate().is_ok());
        c.salt_pepper_prob = 1.5;
        assert!(c.validate().is_err());
        let mut c = AugmentConfig::default();
        c.scale_range = [1.1, 0.9];
        assert!(c.validate().is_err());
        let mut c = AugmentConfig::default();
        c.gaussian_noise_std = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn identity_params_for_identity_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = AugmentParams::sample(&AugmentConfig::identity(), 8, 6, &mut rng);
        assert_eq!(p, AugmentParams::identity(8, 6));
    }
}
