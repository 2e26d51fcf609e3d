//! Signed distance fields of resolved primitives, in pixel units, with
//! sparse gradients with respect to each primitive's parameter vector.
//! Positive inside, zero on the border, negative outside.

use std::f64::consts::TAU;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub enum StrokePart<T> {
    Segment {
        a: [T; 2],
        b: [T; 2],
    },
    /// Circular arc from `a` to `b` around `c`; `ccw` means increasing
    /// `atan2` angle (clockwise on a y-down screen).
    Arc {
        c: [T; 2],
        r: T,
        a: [T; 2],
        b: [T; 2],
        ccw: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum SdfShape<T> {
    Stroke {
        half_width: T,
        parts: Vec<StrokePart<T>>,
    },
    Disk {
        c: [T; 2],
        r: T,
    },
    Ring {
        c: [T; 2],
        r: T,
        half_width: T,
    },
    /// Disk ∩ {q : (q − c)·n ≥ 0}, `n` unit length.
    HalfDisk {
        c: [T; 2],
        r: T,
        n: [T; 2],
    },
    Polygon {
        points: Vec<[T; 2]>,
    },
}

/// A primitive resolved to pixel space, with its composition sign
/// (+1 black ink, −1 white).
#[derive(Debug, Clone, PartialEq)]
pub struct RenderItem<T> {
    pub shape: SdfShape<T>,
    pub sign: f64,
}

impl<T: Scalar> RenderItem<T> {
    /// Flat parameter vector in a fixed per-shape layout.
    pub fn params(&self) -> Vec<T> {
        let mut p = Vec::new();
        match &self.shape {
            SdfShape::Stroke { half_width, parts } => {
                p.push(*half_width);
                for part in parts {
                    match part {
                        StrokePart::Segment { a, b } => p.extend([a[0], a[1], b[0], b[1]]),
                        StrokePart::Arc { c, r, a, b, .. } => {
                            p.extend([c[0], c[1], *r, a[0], a[1], b[0], b[1]])
                        }
                    }
                }
            }
            SdfShape::Disk { c, r } => p.extend([c[0], c[1], *r]),
            SdfShape::Ring { c, r, half_width } => p.extend([c[0], c[1], *r, *half_width]),
            SdfShape::HalfDisk { c, r, n } => p.extend([c[0], c[1], *r, n[0], n[1]]),
            SdfShape::Polygon { points } => {
                for q in points {
                    p.extend([q[0], q[1]]);
                }
            }
        }
        p
    }

    pub fn value(&self) -> RenderItem<f64> {
        let v = |p: [T; 2]| [p[0].value(), p[1].value()];
        let shape = match &self.shape {
            SdfShape::Stroke { half_width, parts } => SdfShape::Stroke {
                half_width: half_width.value(),
                parts: parts
                    .iter()
                    .map(|part| match part {
                        StrokePart::Segment { a, b } => StrokePart::Segment { a: v(*a), b: v(*b) },
                        StrokePart::Arc { c, r, a, b, ccw } => StrokePart::Arc {
                            c: v(*c),
                            r: r.value(),
                            a: v(*a),
                            b: v(*b),
                            ccw: *ccw,
                        },
                    })
                    .collect(),
            },
            SdfShape::Disk { c, r } => SdfShape::Disk {
                c: v(*c),
                r: r.value(),
            },
            SdfShape::Ring { c, r, half_width } => SdfShape::Ring {
                c: v(*c),
                r: r.value(),
                half_width: half_width.value(),
            },
            SdfShape::HalfDisk { c, r, n } => SdfShape::HalfDisk {
                c: v(*c),
                r: r.value(),
                n: v(*n),
            },
            SdfShape::Polygon { points } => SdfShape::Polygon {
                points: points.iter().map(|p| v(*p)).collect(),
            },
        };
        RenderItem {
            shape,
            sign: self.sign,
        }
    }
}

#[inline]
fn norm(x: f64, y: f64) -> f64 {
    x.hypot(y)
}

/// Distance from q to segment ab and its gradient w.r.t. (ax, ay, bx, by).
#[inline]
fn segment_distance(q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, [f64; 4]) {
    let (abx, aby) = (b[0] - a[0], b[1] - a[1]);
    let l2 = abx * abx + aby * aby;
    let t = if l2 > 0.0 {
        (((q[0] - a[0]) * abx + (q[1] - a[1]) * aby) / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (vx, vy) = (a[0] + t * abx - q[0], a[1] + t * aby - q[1]);
    let d = norm(vx, vy);
    if d == 0.0 {
        return (0.0, [0.0; 4]);
    }
    let (ux, uy) = (vx / d, vy / d);
    (d, [(1.0 - t) * ux, (1.0 - t) * uy, t * ux, t * uy])
}

fn point_distance(q: [f64; 2], a: [f64; 2]) -> (f64, [f64; 2]) {
    let (vx, vy) = (a[0] - q[0], a[1] - q[1]);
    let d = norm(vx, vy);
    if d == 0.0 {
        (0.0, [0.0; 2])
    } else {
        (d, [vx / d, vy / d])
    }
}

fn wrap_angle(a: f64) -> f64 {
    a.rem_euclid(TAU)
}

/// Whether the direction of `v` lies on the arc from `a` to `b` (directions
/// relative to the centre).
fn on_arc_span(v: [f64; 2], a: [f64; 2], b: [f64; 2], ccw: bool) -> bool {
    let ang = |p: [f64; 2]| p[1].atan2(p[0]);
    let (aq, aa, ab) = (ang(v), ang(a), ang(b));
    if ccw {
        wrap_angle(aq - aa) <= wrap_angle(ab - aa)
    } else {
        wrap_angle(aa - aq) <= wrap_angle(aa - ab)
    }
}

/// Distance to an arc and its gradient w.r.t. (cx, cy, r, ax, ay, bx, by).
fn arc_distance(
    q: [f64; 2],
    c: [f64; 2],
    r: f64,
    a: [f64; 2],
    b: [f64; 2],
    ccw: bool,
) -> (f64, [f64; 7]) {
    let v = [q[0] - c[0], q[1] - c[1]];
    let av = [a[0] - c[0], a[1] - c[1]];
    let bv = [b[0] - c[0], b[1] - c[1]];
    let mut g = [0.0; 7];
    if on_arc_span(v, av, bv, ccw) {
        let len = norm(v[0], v[1]);
        let e = len - r;
        let sgn = if e > 0.0 {
            1.0
        } else if e < 0.0 {
            -1.0
        } else {
            0.0
        };
        if len > 0.0 {
            g[0] = -sgn * v[0] / len;
            g[1] = -sgn * v[1] / len;
        }
        g[2] = -sgn;
        (e.abs(), g)
    } else {
        let (da, ga) = point_distance(q, a);
        let (db, gb) = point_distance(q, b);
        if da <= db {
            g[3] = ga[0];
            g[4] = ga[1];
            (da, g)
        } else {
            g[5] = gb[0];
            g[6] = gb[1];
            (db, g)
        }
    }
}

/// Even-odd point-in-polygon by ray crossing.
pub fn point_in_polygon(q: [f64; 2], pts: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = pts.len();
    let mut j = n - 1;
    for i in 0..n {
        let (pi, pj) = (pts[i], pts[j]);
        if (pi[1] > q[1]) != (pj[1] > q[1]) {
            let x = pj[0] + (q[1] - pj[1]) * (pi[0] - pj[0]) / (pi[1] - pj[1]);
            if q[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

impl RenderItem<f64> {
    pub fn n_params(&self) -> usize {
        match &self.shape {
            SdfShape::Stroke { parts, .. } => {
                1 + parts
                    .iter()
                    .map(|p| match p {
                        StrokePart::Segment { .. } => 4,
                        StrokePart::Arc { .. } => 7,
                    })
                    .sum::<usize>()
            }
            SdfShape::Disk { .. } => 3,
            SdfShape::Ring { .. } => 4,
            SdfShape::HalfDisk { .. } => 5,
            SdfShape::Polygon { points } => 2 * points.len(),
        }
    }

    pub fn sdf(&self, q: [f64; 2]) -> f64 {
        self.sdf_grad(q, &mut |_, _| {})
    }

    /// Signed distance at `q`; `grad(param_index, d_sdf/d_param)` is called
    /// for every parameter with a nonzero partial derivative.
    pub fn sdf_grad(&self, q: [f64; 2], grad: &mut impl FnMut(usize, f64)) -> f64 {
        match &self.shape {
            SdfShape::Stroke { half_width, parts } => {
                let mut best = f64::INFINITY;
                let mut best_g = [0.0; 7];
                let mut best_off = 0;
                let mut off = 1;
                for part in parts {
                    match part {
                        StrokePart::Segment { a, b } => {
                            let (d, g) = segment_distance(q, *a, *b);
                            if d < best {
                                best = d;
                                best_g = [g[0], g[1], g[2], g[3], 0.0, 0.0, 0.0];
                                best_off = off;
                            }
                            off += 4;
                        }
                        StrokePart::Arc { c, r, a, b, ccw } => {
                            let (d, g) = arc_distance(q, *c, *r, *a, *b, *ccw);
                            if d < best {
                                best = d;
                                best_g = g;
                                best_off = off;
                            }
                            off += 7;
                        }
                    }
                }
                grad(0, 1.0);
                for (k, &g) in best_g.iter().enumerate() {
                    if g != 0.0 {
                        grad(best_off + k, -g);
                    }
                }
                half_width - best
            }
            SdfShape::Disk { c, r } => {
                let (d, g) = point_distance(q, *c);
                grad(0, -g[0]);
                grad(1, -g[1]);
                grad(2, 1.0);
                r - d
            }
            SdfShape::Ring { c, r, half_width } => {
                let (d, g) = point_distance(q, *c);
                let e = d - r;
                let sgn = if e > 0.0 {
                    1.0
                } else if e < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                // sdf = hw − |d − r|
                grad(0, -sgn * g[0]);
                grad(1, -sgn * g[1]);
                grad(2, sgn);
                grad(3, 1.0);
                half_width - e.abs()
            }
            SdfShape::HalfDisk { c, r, n } => {
                let (d, g) = point_distance(q, *c);
                let disk = r - d;
                let (vx, vy) = (q[0] - c[0], q[1] - c[1]);
                let plane = vx * n[0] + vy * n[1];
                if disk <= plane {
                    grad(0, -g[0]);
                    grad(1, -g[1]);
                    grad(2, 1.0);
                    disk
                } else {
                    grad(0, -n[0]);
                    grad(1, -n[1]);
                    grad(3, vx);
                    grad(4, vy);
                    plane
                }
            }
            SdfShape::Polygon { points } => {
                let n = points.len();
                let mut best = f64::INFINITY;
                let mut best_g = [0.0; 4];
                let mut best_i = 0;
                for i in 0..n {
                    let (d, g) = segment_distance(q, points[i], points[(i + 1) % n]);
                    if d < best {
                        best = d;
                        best_g = g;
                        best_i = i;
                    }
                }
                let sign = if point_in_polygon(q, points) {
                    1.0
                } else {
                    -1.0
                };
                let j = (best_i + 1) % n;
                grad(2 * best_i, sign * best_g[0]);
                grad(2 * best_i + 1, sign * best_g[1]);
                grad(2 * j, sign * best_g[2]);
                grad(2 * j + 1, sign * best_g[3]);
                sign * best
            }
        }
    }

    /// Inside test used by the hard rasterizer.
    pub fn contains(&self, q: [f64; 2]) -> bool {
        let dist = |a: [f64; 2], b: [f64; 2]| norm(a[0] - b[0], a[1] - b[1]);
        match &self.shape {
            SdfShape::Stroke { half_width, parts } => parts.iter().any(|part| match part {
                StrokePart::Segment { a, b } => segment_distance(q, *a, *b).0 < *half_width,
                StrokePart::Arc { c, r, a, b, ccw } => {
                    arc_distance(q, *c, *r, *a, *b, *ccw).0 < *half_width
                }
            }),
            SdfShape::Disk { c, r } => dist(q, *c) < *r,
            SdfShape::Ring { c, r, half_width } => (dist(q, *c) - r).abs() < *half_width,
            SdfShape::HalfDisk { c, r, n } => {
                dist(q, *c) < *r && (q[0] - c[0]) * n[0] + (q[1] - c[1]) * n[1] > 0.0
            }
            SdfShape::Polygon { points } => point_in_polygon(q, points),
        }
    }

    /// Pixel-space axis-aligned box containing every point with sdf > −margin.
    pub fn bbox(&self, margin: f64) -> [f64; 4] {
        let mut b = [
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        ];
        let mut add = |p: [f64; 2], r: f64| {
            b[0] = b[0].min(p[0] - r);
            b[1] = b[1].min(p[1] - r);
            b[2] = b[2].max(p[0] + r);
            b[3] = b[3].max(p[1] + r);
        };
        match &self.shape {
            SdfShape::Stroke { half_width, parts } => {
                for part in parts {
                    match part {
                        StrokePart::Segment { a, b } => {
                            add(*a, half_width + margin);
                            add(*b, half_width + margin);
                        }
                        StrokePart::Arc { c, r, .. } => add(*c, r + half_width + margin),
                    }
                }
            }
            SdfShape::Disk { c, r } | SdfShape::HalfDisk { c, r, .. } => add(*c, r + margin),
            SdfShape::Ring { c, r, half_width } => add(*c, r + half_width + margin),
            SdfShape::Polygon { points } => {
                for p in points {
                    add(*p, margin);
                }
            }
        }
        b
    }
}
