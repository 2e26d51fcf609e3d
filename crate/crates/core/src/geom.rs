//! Planar projective geometry shared by augmentation and rectification.

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::vecdraw::Affine;

pub type Mat3 = Matrix3<f64>;

/// Maps a point through `h`; `None` on the line at infinity.
pub fn project(h: &Mat3, p: [f64; 2]) -> Option<[f64; 2]> {
    let v = h * Vector3::new(p[0], p[1], 1.0);
    if v.z.abs() < 1e-12 {
        return None;
    }
    Some([v.x / v.z, v.y / v.z])
}

/// Homogeneous matrix of an SVG-order affine map.
pub fn from_affine(a: &Affine) -> Mat3 {
    let m = a.m;
    Mat3::new(m[0], m[2], m[4], m[1], m[3], m[5], 0.0, 0.0, 1.0)
}

pub fn row_major(h: &Mat3) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = h[(r, c)];
        }
    }
    out
}

/// Similarity that moves the centroid to the origin and the mean distance
/// to sqrt(2).
fn normalizer(pts: &[[f64; 2]]) -> Option<Mat3> {
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean = pts
        .iter()
        .map(|p| (p[0] - cx).hypot(p[1] - cy))
        .sum::<f64>()
        / n;
    if !(mean > 1e-12 && mean.is_finite()) {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean;
    Some(Mat3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

/// Homography taking `src[i]` to `dst[i]` by the normalized direct linear
/// transform. Needs at least four correspondences; returns `None` for
/// degenerate configurations (e.g. three collinear points out of four).
pub fn homography_dlt(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Option<Mat3> {
    if src.len() != dst.len() || src.len() < 4 {
        return None;
    }
    let (ts, td) = (normalizer(src)?, normalizer(dst)?);
    let n = src.len();
    // pad to at least 9 rows so the SVD exposes the full null space
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let s = ts * Vector3::new(s[0], s[1], 1.0);
        let d = td * Vector3::new(d[0], d[1], 1.0);
        let (x, y, u, v) = (s.x, s.y, d.x, d.y);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let sv = &svd.singular_values;
    let (k, _) = sv.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
    // rank check: the second-smallest singular value must be clearly nonzero
    let mut sorted: Vec<f64> = sv.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    if sorted[1] < 1e-9 * sorted[8].max(1e-300) {
        return None;
    }
    let h = vt.row(k);
    let hn = Mat3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let h = td.try_inverse()? * hn * ts;
    let scale = h[(2, 2)];
    let h = if scale.abs() > 1e-12 {
        h / scale
    } else {
        h / h.norm()
    };
    h.iter().all(|v| v.is_finite()).then_some(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_known_homography() {
        let h = Mat3::new(1.2, 0.1, 3.0, -0.05, 0.9, 1.0, 0.001, 0.002, 1.0);
        let src = [
            [0.0, 0.0],
            [10.0, 0.0],
            [10.0, 8.0],
            [0.0, 8.0],
            [5.0, 4.0],
            [2.0, 7.0],
        ];
        let dst: Vec<[f64; 2]> = src.iter().map(|&p| project(&h, p).unwrap()).collect();
        for n in [4, 6] {
            let est = homography_dlt(&src[..n], &dst[..n]).unwrap();
            assert!((est - h).abs().max() < 1e-9, "{n} points");
        }
    }

    #[test]
    fn degenerate_input() {
        let line = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        assert!(homography_dlt(&line, &line).is_none());
        assert!(homography_dlt(&line[..3], &line[..3]).is_none());
    }
}
