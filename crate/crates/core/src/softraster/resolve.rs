//! Resolves a (perturbed) drawing into pixel-space render items. Generic
//! over [`Scalar`] so the same code yields values (`f64`) and directional
//! derivatives ([`Dual`]) of every item parameter with respect to the
//! perturbation vector.

use crate::scalar::{Dual, Scalar};
use crate::vecdraw::{
    Affine, Canvas, Drawing, ElementPerturbation, Group, Node, Primitive, Segment, Shape,
};

use super::sdf::{RenderItem, SdfShape, StrokePart};

/// Uniform drawing-to-pixel map that fits the canvas inside a
/// `width × height` raster, centred along the slack axis.
pub fn view_transform(canvas: &Canvas, width: usize, height: usize) -> Affine {
    let s = (width as f64 / canvas.width).min(height as f64 / canvas.height);
    let ox = (width as f64 - canvas.width * s) / 2.0 - canvas.min_x * s;
    let oy = (height as f64 - canvas.height * s) / 2.0 - canvas.min_y * s;
    Affine {
        m: [s, 0.0, 0.0, s, ox, oy],
    }
}

fn map_point<T: Scalar>(t: &Affine<T>, x: T, y: T) -> [T; 2] {
    let (x, y) = t.apply(x, y);
    [x, y]
}

/// SVG endpoint-to-centre conversion for a circular arc. Radii too small to
/// span the chord are scaled up to half the chord length.
fn arc_part<T: Scalar>(
    p0: [T; 2],
    p1: [T; 2],
    r: T,
    large_arc: bool,
    sweep: bool,
) -> StrokePart<T> {
    let half = T::cst(0.5);
    let hx = (p0[0] - p1[0]) * half;
    let hy = (p0[1] - p1[1]) * half;
    let d2 = hx * hx + hy * hy;
    if d2.value() == 0.0 {
        return StrokePart::Segment { a: p0, b: p1 };
    }
    let (r_eff, coef) = if d2.value() >= r.value() * r.value() {
        (d2.sqrt(), T::zero())
    } else {
        let c = ((r * r - d2) / d2).sqrt();
        (r, if large_arc != sweep { c } else { -c })
    };
    let c = [
        coef * hy + (p0[0] + p1[0]) * half,
        -(coef * hx) + (p0[1] + p1[1]) * half,
    ];
    StrokePart::Arc {
        c,
        r: r_eff,
        a: p0,
        b: p1,
        ccw: sweep,
    }
}

fn resolve_primitive<T: Scalar>(
    p: &Primitive,
    world: &Affine<T>,
    pert: Option<&ElementPerturbation<T>>,
) -> RenderItem<T> {
    let pts: Vec<[T; 2]> = p
        .shape
        .control_points()
        .iter()
        .enumerate()
        .map(|(k, q)| {
            let off = pert.map_or([T::zero(); 2], |e| e.point_offsets[k]);
            map_point(world, T::cst(q.x) + off[0], T::cst(q.y) + off[1])
        })
        .collect();
    let k = world.length_scale();
    let flip = world.det().value() < 0.0;
    let half_width = T::cst(p.stroke_width * 0.5) * k;
    let shape = match &p.shape {
        Shape::Line { .. } => SdfShape::Stroke {
            half_width,
            parts: vec![StrokePart::Segment {
                a: pts[0],
                b: pts[1],
            }],
        },
        Shape::Path { segments, .. } => SdfShape::Stroke {
            half_width,
            parts: segments
                .iter()
                .enumerate()
                .map(|(i, s)| match s {
                    Segment::Line { .. } => StrokePart::Segment {
                        a: pts[i],
                        b: pts[i + 1],
                    },
                    Segment::Arc {
                        radius,
                        large_arc,
                        sweep,
                        ..
                    } => arc_part(
                        pts[i],
                        pts[i + 1],
                        T::cst(*radius) * k,
                        *large_arc,
                        *sweep != flip,
                    ),
                })
                .collect(),
        },
        Shape::Circle { radius, .. } => {
            let r = T::cst(*radius) * k;
            if p.fill {
                SdfShape::Disk { c: pts[0], r }
            } else {
                SdfShape::Ring {
                    c: pts[0],
                    r,
                    half_width,
                }
            }
        }
        Shape::HalfCircle {
            center,
            radius,
            half_plane_deg,
        } => {
            let off = pert.map_or([T::zero(); 2], |e| e.point_offsets[0]);
            let th = half_plane_deg.to_radians();
            let pole = map_point(
                world,
                T::cst(center.x + radius * th.cos()) + off[0],
                T::cst(center.y + radius * th.sin()) + off[1],
            );
            let (nx, ny) = (pole[0] - pts[0][0], pole[1] - pts[0][1]);
            let len = nx.hypot(ny);
            SdfShape::HalfDisk {
                c: pts[0],
                r: T::cst(*radius) * k,
                n: [nx / len, ny / len],
            }
        }
        Shape::Polygon { .. } => {
            if p.fill {
                SdfShape::Polygon { points: pts }
            } else {
                let n = pts.len();
                SdfShape::Stroke {
                    half_width,
                    parts: (0..n)
                        .map(|i| StrokePart::Segment {
                            a: pts[i],
                            b: pts[(i + 1) % n],
                        })
                        .collect(),
                }
            }
        }
    };
    RenderItem {
        shape,
        sign: p.color.sign(),
    }
}

/// Local-to-parent map of an element: nominal transform after the
/// pivot-centred perturbation.
fn local_map<T: Scalar>(node: &Node, pert: Option<&ElementPerturbation<T>>) -> Option<Affine<T>> {
    let nominal = node.transform().map(|t| t.lift::<T>());
    let delta = pert.and_then(|e| e.affine_map(node.pivot()));
    match (nominal, delta) {
        (Some(n), Some(d)) => Some(n.then_inner(&d)),
        (Some(n), None) => Some(n),
        (None, Some(d)) => Some(d),
        (None, None) => None,
    }
}

/// Render items in paint order for perturbation `delta` (offsets from
/// nominal, not bounds-checked here).
pub fn resolve<T: Scalar>(d: &Drawing, delta: &[T], view: &Affine) -> Vec<RenderItem<T>> {
    let perts = d.element_perturbations(delta);
    fn walk<T: Scalar>(
        g: &Group,
        parent: &Affine<T>,
        perts: &[Option<ElementPerturbation<T>>],
        idx: &mut usize,
        out: &mut Vec<RenderItem<T>>,
    ) {
        for c in &g.children {
            let pert = perts[*idx].as_ref();
            *idx += 1;
            let world = match local_map(c, pert) {
                Some(l) => parent.then_inner(&l),
                None => *parent,
            };
            match c {
                Node::Primitive(p) => out.push(resolve_primitive(p, &world, pert)),
                Node::Group(g) => walk(g, &world, perts, idx, out),
            }
        }
    }
    let mut out = Vec::new();
    let mut idx = 0;
    walk(&d.root, &view.lift::<T>(), &perts, &mut idx, &mut out);
    out
}

/// Jacobian of every item parameter (concatenated in paint order) with
/// respect to `delta`, row-major `(n_params, delta.len())`, by one
/// forward-mode pass per variable.
pub fn parameter_jacobian(d: &Drawing, delta: &[f64], view: &Affine) -> Vec<f64> {
    let nv = delta.len();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(nv);
    for j in 0..nv {
        let dual: Vec<Dual> = delta
            .iter()
            .enumerate()
            .map(|(i, &x)| Dual::new(x, if i == j { 1.0 } else { 0.0 }))
            .collect();
        let col: Vec<f64> = resolve(d, &dual, view)
            .iter()
            .flat_map(|it| it.params())
            .map(|p| p.du)
            .collect();
        cols.push(col);
    }
    let np = cols.first().map_or(0, Vec::len);
    let mut jac = vec![0.0; np * nv];
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            jac[i * nv + j] = v;
        }
    }
    jac
}

/// Same structure as `item` with parameters replaced by `p`.
pub fn rebuild(item: &RenderItem<f64>, p: &[f64]) -> RenderItem<f64> {
    let shape = match &item.shape {
        SdfShape::Stroke { parts, .. } => {
            let mut off = 1;
            let parts = parts
                .iter()
                .map(|part| match part {
                    StrokePart::Segment { .. } => {
                        let s = &p[off..off + 4];
                        off += 4;
                        StrokePart::Segment {
                            a: [s[0], s[1]],
                            b: [s[2], s[3]],
                        }
                    }
                    StrokePart::Arc { ccw, .. } => {
                        let s = &p[off..off + 7];
                        off += 7;
                        StrokePart::Arc {
                            c: [s[0], s[1]],
                            r: s[2],
                            a: [s[3], s[4]],
                            b: [s[5], s[6]],
                            ccw: *ccw,
                        }
                    }
                })
                .collect();
            SdfShape::Stroke {
                half_width: p[0],
                parts,
            }
        }
        SdfShape::Disk { .. } => SdfShape::Disk {
            c: [p[0], p[1]],
            r: p[2],
        },
        SdfShape::Ring { .. } => SdfShape::Ring {
            c: [p[0], p[1]],
            r: p[2],
            half_width: p[3],
        },
        SdfShape::HalfDisk { .. } => SdfShape::HalfDisk {
            c: [p[0], p[1]],
            r: p[2],
            n: [p[3], p[4]],
        },
        SdfShape::Polygon { points } => SdfShape::Polygon {
            points: (0..points.len())
                .map(|i| [p[2 * i], p[2 * i + 1]])
                .collect(),
        },
    };
    RenderItem {
        shape,
        sign: item.sign,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SVG: &str = r#"<svg viewBox="0 0 20 20">
        <g id="g" transform="matrix(1 0 0 1 2 1)">
          <path id="p" d="M2 2 L8 2 A3 3 0 0 1 14 2" stroke-width="1" fill="none"/>
          <circle id="c" cx="10" cy="10" r="3"/>
        </g>
        <polygon id="q" points="1,15 5,15 3,19" fill="none" stroke-width="0.5"/>
    </svg>"#;
    const BOUNDS: &str = r#"{"version":1,"elements":[
        {"id":"g","affine":{"tx":[-1,1],"ty":[-1,1],"rotate_deg":[-10,10],"log_scale":[-0.1,0.1]}},
        {"id":"p","point_radius":1},
        {"id":"c","point_radius":1,"half_plane_deg":30},
        {"id":"q","point_radius":1}]}"#;

    #[test]
    fn view_centres_the_canvas() {
        let c = Canvas {
            min_x: 0.0,
            min_y: 0.0,
            width: 20.0,
            height: 10.0,
        };
        let v = view_transform(&c, 40, 40);
        assert_eq!(v.m, [2.0, 0.0, 0.0, 2.0, 0.0, 10.0]);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let d = Drawing::parse(SVG, BOUNDS).unwrap();
        let view = view_transform(&d.canvas, 64, 64);
        let delta: Vec<f64> = (0..d.n_vars())
            .map(|i| 0.05 * ((i * 7 % 5) as f64 - 2.0))
            .collect();
        let jac = parameter_jacobian(&d, &delta, &view);
        let params = |x: &[f64]| -> Vec<f64> {
            resolve(&d, x, &view)
                .iter()
                .flat_map(|i| i.params())
                .collect()
        };
        let np = params(&delta).len();
        assert_eq!(jac.len(), np * d.n_vars());
        let h = 1e-6;
        for j in 0..d.n_vars() {
            let mut plus = delta.clone();
            let mut minus = delta.clone();
            plus[j] += h;
            minus[j] -= h;
            let (a, b) = (params(&plus), params(&minus));
            for i in 0..np {
                let fd = (a[i] - b[i]) / (2.0 * h);
                assert!(
                    (fd - jac[i * d.n_vars() + j]).abs() < 1e-5,
                    "param {i} var {j}"
                );
            }
        }
    }

    #[test]
    fn arc_through_expected_point() {
        let d = Drawing::parse(SVG, "").unwrap();
        let view = Affine::identity();
        let items = resolve(&d, &[] as &[f64], &view);
        let SdfShape::Stroke { parts, .. } = &items[0].shape else {
            panic!()
        };
        let StrokePart::Arc { c, r, .. } = parts[1] else {
            panic!()
        };
        // group translation (2,1): chord (10,3)-(16,3) of radius 3 is a semicircle
        assert!(
            (c[0] - 13.0).abs() < 1e-12 && (c[1] - 3.0).abs() < 1e-12 && (r - 3.0).abs() < 1e-12
        );
        assert!(items[0].sdf([13.0, 0.0]) > 0.49);
    }
}
