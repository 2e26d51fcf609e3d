//! Differentiable soft rasterizer and a conventional hard rasterizer.
//!
//! Image convention: values in `[0, 1]`, 0 = white paper, 1 = black ink.
//! Each primitive contributes `sign · σ(s · sdf)` at every pixel centre
//! (`sdf` in pixel units); contributions are summed and passed through
//! `squash(x) = σ(t · (x − 0.5))`. With layering enabled the running sum is
//! squashed whenever the paint colour changes, so a later white primitive
//! erases earlier black ink instead of merely cancelling it.

pub mod resolve;
pub mod sdf;

use std::io::{BufWriter, Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError};
use crate::vecdraw::{Drawing, VecdrawError};

pub use resolve::{parameter_jacobian, resolve, view_transform};
pub use sdf::{point_in_polygon, RenderItem, SdfShape, StrokePart};

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("invalid raster config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Drawing(#[from] VecdrawError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("image i/o: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, RasterError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterConfig {
    pub width: usize,
    pub height: usize,
    /// Edge sharpness of per-primitive fields.
    pub s: f64,
    /// Sharpness of the final squash.
    pub t: f64,
    pub layering: bool,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            s: 20.0,
            t: 20.0,
            layering: true,
        }
    }
}

impl RasterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(RasterError::InvalidConfig(format!(
                "image size {}x{} must be positive",
                self.width, self.height
            )));
        }
        if !(self.s.is_finite() && self.s > 0.0 && self.t.is_finite() && self.t > 0.0) {
            return Err(RasterError::InvalidConfig(format!(
                "sharpness s={} t={} must be positive and finite",
                self.s, self.t
            )));
        }
        Ok(())
    }
}

/// Single-channel image, row-major, 1 = ink.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "image buffer size");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// `(1, 1, H, W)` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.data.clone(), &[1, 1, self.height, self.width]).expect("image shape")
    }

    /// Takes the last two dimensions of a tensor holding one image.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() < 2 || s[..s.len() - 2].iter().product::<usize>() != 1 {
            return Err(RasterError::Image(format!(
                "tensor of shape {s:?} is not a single image"
            )));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Ok(Self::new(w, h, t.to_vec()))
    }

    /// 8-bit grayscale PNG; ink maps to black.
    pub fn write_png(&self, w: impl Write) -> Result<()> {
        let mut enc = png::Encoder::new(BufWriter::new(w), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8)
            .collect();
        enc.write_header()
            .and_then(|mut wr| wr.write_image_data(&bytes))
            .map_err(|e| RasterError::Image(e.to_string()))
    }

    /// Reads any 8/16-bit PNG; colour images are averaged to gray.
    pub fn read_png(r: impl Read) -> Result<Self> {
        let err = |e: png::DecodingError| RasterError::Image(e.to_string());
        let mut dec = png::Decoder::new(r);
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(err)?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(err)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = info.color_type.samples();
        let color = match info.color_type {
            png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => 1,
            _ => 3,
        };
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            let row = &buf[y * info.line_size..];
            for x in 0..w {
                let px = &row[x * channels..x * channels + color];
                let gray = px.iter().map(|&v| v as f32).sum::<f32>() / color as f32;
                data.push(1.0 - gray / 255.0);
            }
        }
        Ok(Self::new(w, h, data))
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `σ(t · (x − 0.5))`, elementwise and differentiable.
pub fn squash01(x: &Tensor, t: f32) -> Tensor {
    x.affine_scalar(t, -0.5 * t).sigmoid()
}

/// Beyond this |s·sdf| the per-primitive field is treated as saturated.
const SATURATION: f64 = 20.0;

/// Pixel-centre sample positions `(i + 0.5, j + 0.5)`.
fn pixel_center(x: usize, y: usize) -> [f64; 2] {
    [x as f64 + 0.5, y as f64 + 0.5]
}

/// Pixel index range `[x0, x1) × [y0, y1)` whose centres may lie within
/// `margin` of the item.
fn pixel_window(
    item: &RenderItem<f64>,
    margin: f64,
    w: usize,
    h: usize,
) -> (usize, usize, usize, usize) {
    let b = item.bbox(margin);
    let clampi = |v: f64, n: usize| -> usize {
        if v.is_nan() {
            0
        } else {
            v.max(0.0).min(n as f64) as usize
        }
    };
    let x0 = clampi((b[0] - 0.5).floor(), w);
    let y0 = clampi((b[1] - 0.5).floor(), h);
    let x1 = clampi((b[2] - 0.5).floor() + 1.0, w);
    let y1 = clampi((b[3] - 0.5).floor() + 1.0, h);
    (x0, x1, y0, y1)
}

/// Consecutive items sharing a paint colour; the whole list when layering
/// is off.
fn runs(items: &[RenderItem<f64>], layering: bool) -> Vec<std::ops::Range<usize>> {
    if !layering || items.is_empty() {
        return vec![0..items.len()];
    }
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..items.len() {
        if items[i].sign != items[i - 1].sign {
            out.push(start..i);
            start = i;
        }
    }
    out.push(start..items.len());
    out
}

/// Forward state of one rendered sample.
struct Rendered {
    items: Vec<RenderItem<f64>>,
    runs: Vec<std::ops::Range<usize>>,
    /// Pre-squash accumulator after each run.
    acc: Vec<Vec<f64>>,
    image: Vec<f32>,
}

fn render_items(items: Vec<RenderItem<f64>>, cfg: &RasterConfig) -> Rendered {
    let (w, h) = (cfg.width, cfg.height);
    let runs = runs(&items, cfg.layering);
    let t = cfg.t;
    let margin = SATURATION / cfg.s;
    let mut acc: Vec<Vec<f64>> = Vec::with_capacity(runs.len());
    for (k, run) in runs.iter().enumerate() {
        let mut cur: Vec<f64> = match acc.last() {
            Some(prev) if k > 0 => prev.iter().map(|&x| sigmoid(t * (x - 0.5))).collect(),
            _ => vec![0.0; w * h],
        };
        for item in &items[run.clone()] {
            let (x0, x1, y0, y1) = pixel_window(item, margin, w, h);
            for y in y0..y1 {
                for x in x0..x1 {
                    let v = sigmoid(cfg.s * item.sdf(pixel_center(x, y)));
                    cur[y * w + x] += item.sign * v;
                }
            }
        }
        acc.push(cur);
    }
    let image = acc
        .last()
        .map(|a| a.iter().map(|&x| sigmoid(t * (x - 0.5)) as f32).collect())
        .unwrap_or_default();
    Rendered {
        items,
        runs,
        acc,
        image,
    }
}

/// Gradient of `Σ g · image` with respect to the concatenated item
/// parameters.
fn backward_params(r: &Rendered, g: &[f32], cfg: &RasterConfig) -> Vec<f64> {
    let (w, h, t, s) = (cfg.width, cfg.height, cfg.t, cfg.s);
    let margin = SATURATION / s;
    let dsquash = |x: f64| {
        let y = sigmoid(t * (x - 0.5));
        t * y * (1.0 - y)
    };
    let offsets: Vec<usize> = r
        .items
        .iter()
        .scan(0, |o, it| {
            let cur = *o;
            *o += it.n_params();
            Some(cur)
        })
        .collect();
    let total: usize = r.items.iter().map(|i| i.n_params()).sum();
    let mut grad = vec![0.0; total];
    let last = r.acc.len() - 1;
    let mut g_acc: Vec<f64> = r.acc[last]
        .iter()
        .zip(g)
        .map(|(&x, &gi)| gi as f64 * dsquash(x))
        .collect();
    for k in (0..r.runs.len()).rev() {
        for li in r.runs[k].clone() {
            let item = &r.items[li];
            let off = offsets[li];
            let (x0, x1, y0, y1) = pixel_window(item, margin, w, h);
            for y in y0..y1 {
                for x in x0..x1 {
                    let gp = g_acc[y * w + x];
                    if gp == 0.0 {
                        continue;
                    }
                    let q = pixel_center(x, y);
                    let d = item.sdf(q);
                    let z = s * d;
                    if z.abs() > SATURATION {
                        continue;
                    }
                    let sg = sigmoid(z);
                    let coef = gp * item.sign * s * sg * (1.0 - sg);
                    item.sdf_grad(q, &mut |i, v| grad[off + i] += coef * v);
                }
            }
        }
        if k > 0 {
            for (ga, &x) in g_acc.iter_mut().zip(&r.acc[k - 1]) {
                *ga *= dsquash(x);
            }
        }
    }
    grad
}

fn check_delta_values(d: &Drawing, delta: &[f64]) -> Result<()> {
    Ok(d.check_delta(delta)?)
}

/// Soft-rasterizes a batch of perturbations. `delta` has shape `(N_v,)`
/// (output `(1, 1, H, W)`) or `(B, N_v)` (output `(B, 1, H, W)`); the
/// result is differentiable with respect to `delta`.
pub fn soft_rasterize(d: &Drawing, delta: &Tensor, cfg: &RasterConfig) -> Result<Tensor> {
    cfg.validate()?;
    let nv = d.n_vars();
    let (b, got) = match delta.shape() {
        [n] => (1, *n),
        [b, n] => (*b, *n),
        s => {
            return Err(RasterError::Drawing(VecdrawError::DimensionMismatch {
                expected: nv,
                got: s.iter().product(),
            }))
        }
    };
    if got != nv {
        return Err(VecdrawError::DimensionMismatch { expected: nv, got }.into());
    }
    let view = view_transform(&d.canvas, cfg.width, cfg.height);
    let hw = cfg.width * cfg.height;
    let mut out = Vec::with_capacity(b * hw);
    let mut states = Vec::with_capacity(b);
    let mut deltas = Vec::with_capacity(b);
    for i in 0..b {
        let row: Vec<f64> = delta.data()[i * nv..(i + 1) * nv]
            .iter()
            .map(|&v| v as f64)
            .collect();
        check_delta_values(d, &row)?;
        let r = render_items(resolve(d, &row, &view), cfg);
        out.extend_from_slice(&r.image);
        if delta.requires_grad() {
            states.push(r);
            deltas.push(row);
        }
    }
    let drawing = Arc::new(d.clone());
    let cfg = *cfg;
    let shape = [b, 1, cfg.height, cfg.width];
    Ok(Tensor::custom_op(&[delta], &shape, out, move |g, _| {
        let mut gd = vec![0.0f32; b * nv];
        for (i, (r, row)) in states.iter().zip(&deltas).enumerate() {
            let gp = backward_params(r, &g[i * hw..(i + 1) * hw], &cfg);
            if gp.iter().all(|&v| v == 0.0) {
                continue;
            }
            let jac = parameter_jacobian(&drawing, row, &view);
            for j in 0..nv {
                let mut acc = 0.0;
                for (p, &gv) in gp.iter().enumerate() {
                    acc += gv * jac[p * nv + j];
                }
                gd[i * nv + j] = acc as f32;
            }
        }
        vec![Some(gd)]
    })?)
}

/// Soft raster of the drawing at perturbation `delta` (plain values).
pub fn soft_rasterize_values(d: &Drawing, delta: &[f64], cfg: &RasterConfig) -> Result<Image> {
    cfg.validate()?;
    check_delta_values(d, delta)?;
    let view = view_transform(&d.canvas, cfg.width, cfg.height);
    let r = render_items(resolve(d, delta, &view), cfg);
    Ok(Image::new(cfg.width, cfg.height, r.image))
}

/// Tape gradient of one variable next to its central difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub tape: f64,
    pub fd: f64,
    /// `|tape − fd| / max(|fd|, 1)`.
    pub rel_err: f64,
}

/// Compares the tape gradient of `Σ w · soft_raster(δ)` with central
/// differences of the same sum evaluated in f64. Variable `j` is stepped
/// by `eps · min(half_range_j, 1)`.
pub fn gradcheck(
    d: &Drawing,
    delta: &[f64],
    weights: &[f64],
    cfg: &RasterConfig,
    eps: f64,
) -> Result<Vec<GradCheck>> {
    cfg.validate()?;
    check_delta_values(d, delta)?;
    let (w, h) = (cfg.width, cfg.height);
    if weights.len() != w * h {
        return Err(VecdrawError::DimensionMismatch {
            expected: w * h,
            got: weights.len(),
        }
        .into());
    }
    let nv = d.n_vars();
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::from_vec(
        delta.iter().map(|&v| v as f32).collect(),
        &[nv],
    )?);
    let wt = Tensor::from_vec(weights.iter().map(|&v| v as f32).collect(), &[1, 1, h, w])?;
    let loss = soft_rasterize(d, &x, cfg)?.mul(&wt)?.sum();
    let g = tape.backward(&loss)?.wrt(&x);
    let view = view_transform(&d.canvas, w, h);
    let f = |dv: &[f64]| -> f64 {
        let r = render_items(resolve(d, dv, &view), cfg);
        r.acc
            .last()
            .map(|a| {
                a.iter()
                    .zip(weights)
                    .map(|(&x, &wi)| sigmoid(cfg.t * (x - 0.5)) * wi)
                    .sum()
            })
            .unwrap_or(0.0)
    };
    Ok((0..nv)
        .map(|j| {
            let step = eps * d.variables[j].half_range().min(1.0);
            let mut p = delta.to_vec();
            let mut m = delta.to_vec();
            p[j] += step;
            m[j] -= step;
            let fd = (f(&p) - f(&m)) / (2.0 * step);
            let tape = g[j] as f64;
            GradCheck {
                tape,
                fd,
                rel_err: (tape - fd).abs() / fd.abs().max(1.0),
            }
        })
        .collect())
}

/// Per-pixel signed distance of one render item over a `width × height`
/// grid of pixel centres.
pub fn sdf_field(item: &RenderItem<f64>, width: usize, height: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            out.push(item.sdf(pixel_center(x, y)));
        }
    }
    out
}

/// Binary raster in painter's order: each pixel takes the colour of the
/// last primitive containing its centre.
pub fn hard_rasterize(d: &Drawing, delta: &[f64], width: usize, height: usize) -> Result<Image> {
    if width == 0 || height == 0 {
        return Err(RasterError::InvalidConfig(format!(
            "image size {width}x{height} must be positive"
        )));
    }
    check_delta_values(d, delta)?;
    let view = view_transform(&d.canvas, width, height);
    let mut data = vec![0.0f32; width * height];
    for item in resolve(d, delta, &view) {
        let ink = if item.sign > 0.0 { 1.0 } else { 0.0 };
        let (x0, x1, y0, y1) = pixel_window(&item, 1.0, width, height);
        for y in y0..y1 {
            for x in x0..x1 {
                if item.contains(pixel_center(x, y)) {
                    data[y * width + x] = ink;
                }
            }
        }
    }
    Ok(Image::new(width, height, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(w: usize, s: f64, t: f64, layering: bool) -> RasterConfig {
        RasterConfig {
            width: w,
            height: w,
            s,
            t,
            layering,
        }
    }

    #[test]
    fn empty_drawing_is_squash_of_zero() {
        let d = Drawing::parse(r#"<svg viewBox="0 0 8 8"></svg>"#, "").unwrap();
        let img = soft_rasterize_values(&d, &[], &cfg(8, 20.0, 20.0, true)).unwrap();
        let expect = sigmoid(-10.0) as f32;
        assert!(img.data.iter().all(|&v| (v - expect).abs() < 1e-9));
    }

    #[test]
    fn white_over_black_erases_with_layering() {
        let svg = r#"<svg viewBox="0 0 20 20">
            <circle cx="10" cy="10" r="8" fill="black"/>
            <circle cx="10" cy="10" r="4" fill="white"/></svg>"#;
        let d = Drawing::parse(svg, "").unwrap();
        let on = soft_rasterize_values(&d, &[], &cfg(20, 20.0, 20.0, true)).unwrap();
        assert!(on.get(10, 10) < 1e-3);
        assert!(on.get(10, 4) > 0.999);
        let hard = hard_rasterize(&d, &[], 20, 20).unwrap();
        assert_eq!(hard.get(10, 10), 0.0);
        assert_eq!(hard.get(10, 4), 1.0);
    }

    #[test]
    fn double_black_overlap_is_not_darker_than_ink() {
        let svg = r#"<svg viewBox="0 0 20 20">
            <circle cx="8" cy="10" r="5"/><circle cx="12" cy="10" r="5"/>
            <circle cx="10" cy="10" r="1" fill="white"/><circle cx="3" cy="3" r="2"/></svg>"#;
        let d = Drawing::parse(svg, "").unwrap();
        let img = soft_rasterize_values(&d, &[], &cfg(20, 20.0, 20.0, true)).unwrap();
        assert!(img.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(img.get(8, 10) > 0.999);
        assert!(img.get(3, 3) > 0.99);
    }

    #[test]
    fn png_round_trip() {
        let img = Image::new(3, 2, vec![0.0, 1.0, 0.5, 0.25, 0.75, 1.0]);
        let mut buf = Vec::new();
        img.write_png(&mut buf).unwrap();
        let back = Image::read_png(&buf[..]).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(cfg(0, 1.0, 1.0, true).validate().is_err());
        assert!(cfg(4, 0.0, 1.0, true).validate().is_err());
        assert!(cfg(4, 1.0, f64::NAN, true).validate().is_err());
    }
}
