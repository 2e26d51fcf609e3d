//! Capture side: keypoints from heatmaps, homography and camera pose,
//! rectification to the nominal frame, and decoder preprocessing.
//!
//! Images use the crate convention (1 = ink, 0 = paper). Pixel centres sit
//! at `i + 0.5`.

use log::warn;
use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{BitString, CaptureInfo, CodecError, Model, Probits};
use crate::geom::{self, Mat3};
use crate::softraster::{point_in_polygon, view_transform, Image};
use crate::tensor::{Tensor, TensorError};
use crate::vecdraw::{Affine, Canvas};

#[derive(Debug, Error)]
pub enum RectifyError {
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("invalid heatmap: {0}")]
    InvalidHeatmap(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, RectifyError>;

/// Standard deviation of the preprocessing blur.
pub const BLUR_SIGMA: f64 = 0.95;

/// Normalized 3×3 Gaussian, row-major.
pub fn gaussian_kernel3(sigma: f64) -> [f64; 9] {
    let e = (-1.0 / (2.0 * sigma * sigma)).exp();
    let k1 = [e, 1.0, e];
    let s: f64 = k1.iter().sum();
    let mut k = [0.0; 9];
    for y in 0..3 {
        for x in 0..3 {
            k[3 * y + x] = k1[y] * k1[x] / (s * s);
        }
    }
    k
}

/// 3×3 Gaussian blur with replicate padding.
pub fn blur(img: &Image) -> Image {
    let k = gaussian_kernel3(BLUR_SIGMA);
    let mut out = vec![0f32; img.data.len()];
    blur_plane(&img.data, &mut out, img.width, img.height, &k, false);
    Image::new(img.width, img.height, out)
}

/// Blurs `src` into `dst`, or with `adjoint` scatters `src` back through
/// the same stencil (the transpose of the forward map).
fn blur_plane(src: &[f32], dst: &mut [f32], w: usize, h: usize, k: &[f64; 9], adjoint: bool) {
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    if adjoint {
        dst.iter_mut().for_each(|v| *v = 0.0);
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0f64;
            for dy in 0..3 {
                let yy = clampi(y as isize + dy as isize - 1, h);
                for dx in 0..3 {
                    let xx = clampi(x as isize + dx as isize - 1, w);
                    let wt = k[3 * dy + dx];
                    if adjoint {
                        dst[yy * w + xx] += (wt * src[y * w + x] as f64) as f32;
                    } else {
                        acc += wt * src[yy * w + xx] as f64;
                    }
                }
            }
            if !adjoint {
                dst[y * w + x] = acc as f32;
            }
        }
    }
}

/// Differentiable blur of a `(B, C, H, W)` tensor, same kernel and padding
/// as [`blur`].
pub fn blur_tensor(x: &Tensor) -> Result<Tensor> {
    let s = x.shape().to_vec();
    if s.len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "blur",
            detail: format!("expected (B, C, H, W), got {s:?}"),
        }
        .into());
    }
    let (h, w) = (s[2], s[3]);
    let k = gaussian_kernel3(BLUR_SIGMA);
    let mut out = vec![0f32; x.numel()];
    for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
        blur_plane(src, dst, w, h, &k, false);
    }
    Ok(Tensor::custom_op(&[x], &s, out, move |g, _| {
        let mut gi = vec![0f32; g.len()];
        for (src, dst) in g.chunks(h * w).zip(gi.chunks_mut(h * w)) {
            blur_plane(src, dst, w, h, &k, true);
        }
        vec![Some(gi)]
    })?)
}

/// Otsu result on a 256-bin histogram. Pixels whose bin exceeds `level`
/// are foreground (ink).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Otsu {
    pub level: u8,
    /// Set when the histogram has a single occupied bin; `level` is then the
    /// 0.5 fallback (bin 127).
    pub constant: bool,
}

impl Otsu {
    /// Threshold in image units, between bin `level` and `level + 1`.
    pub fn threshold(&self) -> f32 {
        (self.level as f32 + 0.5) / 255.0
    }
}

/// Bin of an image value: `round(255·v)` after clamping to [0, 1].
pub fn bin(v: f32) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

pub fn histogram(values: &[f32]) -> [u64; 256] {
    let mut h = [0u64; 256];
    for &v in values {
        h[bin(v)] += 1;
    }
    h
}

/// Between-class variance of splitting at `k` (classes `≤ k` and `> k`),
/// from the class-0 count `n0` and bin-value sum `s0`. All sums are exact
/// integers in f64.
pub fn between_class_variance(n0: f64, s0: f64, total: f64, sum: f64) -> f64 {
    let n1 = total - n0;
    if n0 == 0.0 || n1 == 0.0 {
        return 0.0;
    }
    let (w0, w1) = (n0 / total, n1 / total);
    let (m0, m1) = (s0 / n0, (sum - s0) / n1);
    w0 * w1 * (m0 - m1) * (m0 - m1)
}

/// Otsu's threshold by one cumulative pass; ties go to the lowest level.
pub fn otsu(values: &[f32]) -> Otsu {
    let hist = histogram(values);
    if hist.iter().filter(|&&c| c > 0).count() <= 1 {
        return Otsu {
            level: 127,
            constant: true,
        };
    }
    let total = values.len() as f64;
    let sum: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| (i as u64 * c) as f64)
        .sum();
    let (mut n0, mut s0) = (0f64, 0f64);
    let mut best = (0usize, f64::NEG_INFINITY);
    for (k, &c) in hist.iter().enumerate().take(255) {
        n0 += c as f64;
        s0 += (k as u64 * c) as f64;
        let v = between_class_variance(n0, s0, total, sum);
        if v > best.1 {
            best = (k, v);
        }
    }
    Otsu {
        level: best.0 as u8,
        constant: false,
    }
}

/// Drawing-to-pixel map of the decoder frame.
fn frame_view(capture: &CaptureInfo, width: usize, height: usize) -> Affine {
    let [min_x, min_y, w, h] = capture.canvas;
    view_transform(
        &Canvas {
            min_x,
            min_y,
            width: w,
            height: h,
        },
        width,
        height,
    )
}

/// Mask polygon mapped into pixel coordinates of the decoder frame.
pub fn mask_pixels(capture: &CaptureInfo, width: usize, height: usize) -> Vec<[f64; 2]> {
    let v = frame_view(capture, width, height);
    capture
        .mask
        .iter()
        .map(|p| {
            let (x, y) = v.apply(p[0], p[1]);
            [x, y]
        })
        .collect()
}

/// 1 at pixels whose centre lies inside `mask` (all ones for an empty mask).
pub fn mask_image(mask: &[[f64; 2]], width: usize, height: usize) -> Vec<f32> {
    let mut out = vec![1f32; width * height];
    if mask.len() >= 3 {
        for y in 0..height {
            for x in 0..width {
                if !point_in_polygon([x as f64 + 0.5, y as f64 + 0.5], mask) {
                    out[y * width + x] = 0.0;
                }
            }
        }
    }
    out
}

/// Ink where the pixel is inside the mask and its bin exceeds `level`;
/// paper (exactly 0) everywhere else.
pub fn binarize(img: &Image, level: u8, inside: &[f32]) -> Image {
    let data = img
        .data
        .iter()
        .zip(inside)
        .map(|(&v, &m)| {
            if m > 0.0 && bin(v) > level as usize {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Image::new(img.width, img.height, data)
}

/// Blur, Otsu binarization (threshold from the whole blurred cutout), mask
/// exterior set to paper, blur again. `mask` is in pixel coordinates.
pub fn preprocess(cutout: &Image, mask: &[[f64; 2]]) -> (Image, Otsu) {
    let b = blur(cutout);
    let o = otsu(&b.data);
    if o.constant {
        warn!("constant image: Otsu undefined, thresholding at 0.5");
    }
    let inside = mask_image(mask, cutout.width, cutout.height);
    (blur(&binarize(&b, o.level, &inside)), o)
}

/// Differentiable stand-in for [`preprocess`] used in training: the hard
/// threshold becomes `σ(k·(x − thr))` with `thr` the per-image Otsu level
/// of the blurred input, held constant.
pub fn soft_preprocess(images: &Tensor, mask: &[[f64; 2]], sharpness: f32) -> Result<Tensor> {
    let s = images.shape().to_vec();
    let b = blur_tensor(images)?;
    let plane = s[2] * s[3];
    let thr: Vec<f32> = b
        .data()
        .chunks(plane)
        .map(|c| otsu(c).threshold())
        .collect();
    let thr = Tensor::from_vec(thr, &[s[0], 1, 1, 1])?;
    let m = Tensor::from_vec(mask_image(mask, s[3], s[2]), &[1, 1, s[2], s[3]])?;
    let x = b
        .sub(&thr)?
        .affine_scalar(sharpness, 0.0)
        .sigmoid()
        .mul(&m)?;
    blur_tensor(&x)
}

/// Keypoint score grid over the photo's pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Heatmap {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height || data.is_empty() {
            return Err(RectifyError::InvalidHeatmap(format!(
                "{} values for a {width}x{height} grid",
                data.len()
            )));
        }
        if data.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(RectifyError::InvalidHeatmap(
                "scores must be finite and non-negative".into(),
            ));
        }
        if !data.iter().any(|&v| v > 0.0) {
            return Err(RectifyError::InvalidHeatmap("no positive score".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// `exp(−|p − c|² / 2σ²)` at every pixel centre.
    pub fn gaussian_blob(
        width: usize,
        height: usize,
        center: [f64; 2],
        sigma: f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let dx = x as f64 + 0.5 - center[0];
                let dy = y as f64 + 0.5 - center[1];
                data.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp() as f32);
            }
        }
        Self::new(width, height, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftArgmax {
    pub point: [f64; 2],
    /// All scores equal; `point` is the grid centroid.
    pub degenerate: bool,
}

/// Softmax(score / temperature)-weighted mean of pixel centres.
pub fn soft_argmax(h: &Heatmap, temperature: f64) -> Result<SoftArgmax> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(RectifyError::InvalidInput(format!(
            "temperature {temperature} must be positive"
        )));
    }
    let max = h.data.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let min = h.data.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let (mut z, mut sx, mut sy) = (0f64, 0f64, 0f64);
    for y in 0..h.height {
        for x in 0..h.width {
            let e = ((h.data[y * h.width + x] as f64 - max) / temperature).exp();
            z += e;
            sx += e * (x as f64 + 0.5);
            sy += e * (y as f64 + 0.5);
        }
    }
    let degenerate = max == min;
    if degenerate {
        warn!("flat heatmap: soft-argmax falls back to the grid centroid");
    }
    Ok(SoftArgmax {
        point: [sx / z, sy / z],
        degenerate,
    })
}

fn collinear(a: [f64; 2], b: [f64; 2], c: [f64; 2], scale: f64) -> bool {
    let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    cross.abs() <= 1e-9 * scale * scale
}

/// Homography with `dst ≈ H·src` and its RMS transfer error in `dst` units.
pub fn estimate_homography(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<(Mat3, f64)> {
    if src.len() != dst.len() {
        return Err(RectifyError::InvalidInput(format!(
            "{} source vs {} target points",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 4 {
        return Err(RectifyError::DegenerateConfiguration(format!(
            "{} correspondences, need 4",
            src.len()
        )));
    }
    if src.len() == 4 {
        for pts in [src, dst] {
            let scale = pts
                .iter()
                .flat_map(|p| p.iter())
                .fold(1.0f64, |m, v| m.max(v.abs()));
            for skip in 0..4 {
                let t: Vec<[f64; 2]> = (0..4).filter(|&i| i != skip).map(|i| pts[i]).collect();
                if collinear(t[0], t[1], t[2], scale) {
                    return Err(RectifyError::DegenerateConfiguration(
                        "three collinear points".into(),
                    ));
                }
            }
        }
    }
    let h = geom::homography_dlt(src, dst).ok_or_else(|| {
        RectifyError::DegenerateConfiguration("rank-deficient correspondences".into())
    })?;
    let mut sq = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let p = geom::project(&h, *s).ok_or_else(|| {
            RectifyError::DegenerateConfiguration("point mapped to infinity".into())
        })?;
        sq += (p[0] - d[0]).powi(2) + (p[1] - d[1]).powi(2);
    }
    Ok((h, (sq / src.len() as f64).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite();
        if !(ok && self.cx.is_finite() && self.cy.is_finite()) {
            return Err(RectifyError::InvalidInput(format!(
                "invalid intrinsics {self:?}"
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Mat3 {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Pixel coordinates of a camera-frame point.
    pub fn project(&self, p: &Vector3<f64>) -> [f64; 2] {
        [self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy]
    }
}

/// Drawing-to-camera rigid transform, `X_cam = R·X + t`, with the planar
/// drawing at z = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub rotation: Mat3,
    pub translation: Vector3<f64>,
    pub rms_px: f64,
    pub converged: bool,
    /// RMS reprojection error after the initial estimate and every accepted
    /// refinement step.
    pub history: Vec<f64>,
}

#[derive(Serialize)]
struct PoseJson {
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
    rms_px: f64,
}

impl CameraPose {
    /// `{"R": [9, row-major], "t": [3], "rms_px": x}`.
    pub fn to_json(&self) -> String {
        let j = PoseJson {
            r: geom::row_major(&self.rotation),
            t: [self.translation.x, self.translation.y, self.translation.z],
            rms_px: self.rms_px,
        };
        serde_json::to_string(&j).expect("pose serializes")
    }

    /// Angle between the drawing normal and the optical axis, in degrees.
    pub fn tilt_deg(&self) -> f64 {
        self.rotation[(2, 2)]
            .abs()
            .clamp(-1.0, 1.0)
            .acos()
            .to_degrees()
    }
}

/// Closest rotation in Frobenius norm.
fn nearest_rotation(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut d = Mat3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * vt;
    }
    r
}

fn rodrigues(w: &Vector3<f64>) -> Mat3 {
    let theta = w.norm();
    let k = if theta > 0.0 {
        w / theta
    } else {
        Vector3::zeros()
    };
    let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Mat3::identity() + kx * theta.sin() + kx * kx * (1.0 - theta.cos())
}

fn reprojection_sq(
    r: &Mat3,
    t: &Vector3<f64>,
    world: &[[f64; 2]],
    image: &[[f64; 2]],
    k: &CameraIntrinsics,
) -> f64 {
    world
        .iter()
        .zip(image)
        .map(|(w, i)| {
            let p = r * Vector3::new(w[0], w[1], 0.0) + t;
            if p.z <= 0.0 {
                return f64::INFINITY;
            }
            let q = k.project(&p);
            (q[0] - i[0]).powi(2) + (q[1] - i[1]).powi(2)
        })
        .sum()
}

/// Pose of a planar target from ≥ 4 correspondences: homography
/// decomposition, then Levenberg–Marquardt on the reprojection error until
/// the step norm drops below 1e-8 or 100 iterations.
pub fn solve_pnp(
    world: &[[f64; 2]],
    image: &[[f64; 2]],
    k: &CameraIntrinsics,
) -> Result<CameraPose> {
    k.validate()?;
    let (h, _) = estimate_homography(world, image)?;
    let kinv = k.matrix().try_inverse().expect("intrinsics invertible");
    let m = kinv * h;
    let (m1, m2, m3) = (
        m.column(0).into_owned(),
        m.column(1).into_owned(),
        m.column(2).into_owned(),
    );
    let mut lambda = 2.0 / (m1.norm() + m2.norm());
    if (m3 * lambda).z < 0.0 {
        lambda = -lambda;
    }
    let (r1, r2) = (m1 * lambda, m2 * lambda);
    let r0 = Mat3::from_columns(&[r1, r2, r1.cross(&r2)]);
    let mut r = nearest_rotation(&r0);
    let mut t = m3 * lambda;

    let n = world.len() as f64;
    let mut cost = reprojection_sq(&r, &t, world, image, k);
    let mut history = vec![(cost / n).sqrt()];
    let mut mu = 1e-3;
    let mut converged = false;
    for _ in 0..100 {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for (w, im) in world.iter().zip(image) {
            let rx = r * Vector3::new(w[0], w[1], 0.0);
            let p = rx + t;
            let q = k.project(&p);
            let res = [q[0] - im[0], q[1] - im[1]];
            let dudp = Vector3::new(k.fx / p.z, 0.0, -k.fx * p.x / (p.z * p.z));
            let dvdp = Vector3::new(0.0, k.fy / p.z, -k.fy * p.y / (p.z * p.z));
            for (d, res) in [(dudp, res[0]), (dvdp, res[1])] {
                // dP/dω = −[R·X]×, dP/dt = I
                let jw = rx.cross(&d);
                let row = Vector6::new(jw.x, jw.y, jw.z, d.x, d.y, d.z);
                jtj += row * row.transpose();
                jtr += row * res;
            }
        }
        let mut step = None;
        for _ in 0..30 {
            let mut a = jtj;
            for i in 0..6 {
                a[(i, i)] += mu * jtj[(i, i)].max(1e-12);
            }
            let Some(delta) = a.lu().solve(&(-jtr)) else {
                mu *= 10.0;
                continue;
            };
            let w = Vector3::new(delta[0], delta[1], delta[2]);
            let nr = rodrigues(&w) * r;
            let nt = t + Vector3::new(delta[3], delta[4], delta[5]);
            let nc = reprojection_sq(&nr, &nt, world, image, k);
            if nc <= cost {
                mu = (mu / 10.0).max(1e-12);
                step = Some((nr, nt, nc, delta.norm()));
                break;
            }
            mu *= 10.0;
            if delta.norm() < 1e-8 {
                break;
            }
        }
        let Some((nr, nt, nc, norm)) = step else {
            converged = true;
            break;
        };
        r = nr;
        t = nt;
        cost = nc;
        history.push((cost / n).sqrt());
        if norm < 1e-8 {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!("pose refinement stopped after 100 iterations");
    }
    Ok(CameraPose {
        rotation: r,
        translation: t,
        rms_px: (cost / n).sqrt(),
        converged,
        history,
    })
}

fn bilinear(img: &Image, u: f64, v: f64) -> f32 {
    let (x, y) = (u - 0.5, v - 0.5);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
    let at = |xi: f64, yi: f64| -> f32 {
        if xi < 0.0 || yi < 0.0 || xi >= img.width as f64 || yi >= img.height as f64 {
            0.0
        } else {
            img.data[yi as usize * img.width + xi as usize]
        }
    };
    (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x0 + 1.0, y0))
        + fy * ((1.0 - fx) * at(x0, y0 + 1.0) + fx * at(x0 + 1.0, y0 + 1.0))
}

/// Resamples `src` onto a `width × height` grid; `out_to_src` maps output
/// pixel coordinates to source coordinates. Each output pixel averages
/// `ss × ss` bilinear samples. Samples outside `src` read as paper.
pub fn warp_image(src: &Image, out_to_src: &Mat3, width: usize, height: usize, ss: usize) -> Image {
    let ss = ss.max(1);
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0f32;
            for sy in 0..ss {
                for sx in 0..ss {
                    let p = [
                        x as f64 + (sx as f64 + 0.5) / ss as f64,
                        y as f64 + (sy as f64 + 0.5) / ss as f64,
                    ];
                    acc += geom::project(out_to_src, p).map_or(0.0, |q| bilinear(src, q[0], q[1]));
                }
            }
            data.push(acc / (ss * ss) as f32);
        }
    }
    Image::new(width, height, data)
}

/// Map from decoder-frame pixels to photo pixels, given the drawing → photo
/// homography.
pub fn frame_to_photo(
    drawing_to_photo: &Mat3,
    capture: &CaptureInfo,
    width: usize,
    height: usize,
) -> Mat3 {
    let view = geom::from_affine(&frame_view(capture, width, height));
    drawing_to_photo * view.try_inverse().expect("view invertible")
}

/// Where keypoints come from.
#[derive(Debug, Clone)]
pub enum KeypointSource {
    /// Image is already in the nominal decoder frame; skip geometry.
    Rectified,
    /// Keypoint positions in photo pixels, in drawing keypoint order.
    Points(Vec<[f64; 2]>),
    /// One heatmap per keypoint over the photo grid.
    Heatmaps {
        maps: Vec<Heatmap>,
        temperature: f64,
    },
}

#[derive(Debug, Clone)]
pub struct Decoded {
    pub bits: BitString,
    pub probits: Probits,
    /// Drawing → photo homography, when geometry was estimated.
    pub homography: Option<Mat3>,
    pub pose: Option<CameraPose>,
    pub otsu: Otsu,
}

/// Rectifies `photo` into the model's decoder frame using the capture
/// geometry stored with the model, preprocesses, decodes and thresholds.
/// With intrinsics, also recovers the camera pose.
pub fn rectify_and_decode(
    photo: &Image,
    model: &Model,
    source: &KeypointSource,
    intrinsics: Option<&CameraIntrinsics>,
) -> Result<Decoded> {
    let cap = &model.config.capture;
    let (w, h) = (model.config.raster.width, model.config.raster.height);
    let points = match source {
        KeypointSource::Rectified => None,
        KeypointSource::Points(p) => Some(p.clone()),
        KeypointSource::Heatmaps { maps, temperature } => Some(
            maps.iter()
                .map(|m| soft_argmax(m, *temperature).map(|s| s.point))
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    let (rectified, homography, pose) = match points {
        None => {
            if photo.width != w || photo.height != h {
                return Err(RectifyError::InvalidInput(format!(
                    "pre-rectified image is {}x{}, decoder expects {w}x{h}",
                    photo.width, photo.height
                )));
            }
            (photo.clone(), None, None)
        }
        Some(pts) => {
            if pts.len() != cap.keypoints.len() {
                return Err(RectifyError::DegenerateConfiguration(format!(
                    "{} keypoints detected, drawing defines {}",
                    pts.len(),
                    cap.keypoints.len()
                )));
            }
            let (hm, _) = estimate_homography(&cap.keypoints, &pts)?;
            let out_to_photo = frame_to_photo(&hm, cap, w, h);
            // average enough samples to cover the photo footprint of a pixel
            let c = [w as f64 / 2.0, h as f64 / 2.0];
            let p0 = geom::project(&out_to_photo, c);
            let px = geom::project(&out_to_photo, [c[0] + 1.0, c[1]]);
            let py = geom::project(&out_to_photo, [c[0], c[1] + 1.0]);
            let ss = match (p0, px, py) {
                (Some(a), Some(b), Some(d)) => {
                    let f = (b[0] - a[0])
                        .hypot(b[1] - a[1])
                        .max((d[0] - a[0]).hypot(d[1] - a[1]));
                    (f.round() as usize).clamp(1, 8)
                }
                _ => 1,
            };
            let img = warp_image(photo, &out_to_photo, w, h, ss);
            let pose = intrinsics
                .map(|k| solve_pnp(&cap.keypoints, &pts, k))
                .transpose()?;
            (img, Some(hm), pose)
        }
    };
    let (pre, otsu) = preprocess(&rectified, &mask_pixels(cap, w, h));
    let probits = model.decode_image(&pre)?;
    Ok(Decoded {
        bits: probits.threshold(),
        probits,
        homography,
        pose,
        otsu,
    })
}
