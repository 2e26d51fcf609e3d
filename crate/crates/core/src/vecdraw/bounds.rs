//! Bounds sidecar:
//!
//! ```json
//! {"version": 1,
//!  "elements": [{"id": "l1", "point_radius": 2.0,
//!                "affine": {"tx": [-1, 1], "ty": [-1, 1], "rotate_deg": [-5, 5], "log_scale": [-0.1, 0.1]},
//!                "half_plane_deg": 90.0, "pivot": [10, 10]}],
//!  "keypoints": [[x, y], ...],
//!  "mask": [[x, y], ...]}
//! ```
//!
//! Intervals are offsets from the nominal drawing and must be symmetric
//! about zero.

use std::collections::HashMap;

use serde::Deserialize;

use super::{
    BoundedVariable, Drawing, Group, Node, Point, Result, Shape, VarKind, VarTarget, VecdrawError,
};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundsDoc {
    version: u32,
    #[serde(default)]
    elements: Vec<ElementBounds>,
    #[serde(default)]
    keypoints: Vec<[f64; 2]>,
    #[serde(default)]
    mask: Vec<[f64; 2]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ElementBounds {
    id: String,
    point_radius: Option<f64>,
    affine: Option<AffineBounds>,
    half_plane_deg: Option<f64>,
    pivot: Option<[f64; 2]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AffineBounds {
    tx: Option<[f64; 2]>,
    ty: Option<[f64; 2]>,
    rotate_deg: Option<[f64; 2]>,
    log_scale: Option<[f64; 2]>,
}

fn malformed(id: &str, reason: impl Into<String>) -> VecdrawError {
    VecdrawError::MalformedBounds {
        id: id.into(),
        reason: reason.into(),
    }
}

fn interval(id: &str, name: &str, iv: [f64; 2]) -> Result<(f64, f64)> {
    let [lo, hi] = iv;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(malformed(
            id,
            format!("{name} interval [{lo}, {hi}] is not a valid interval"),
        ));
    }
    if (lo + hi).abs() > 1e-9 * (hi - lo) {
        return Err(malformed(
            id,
            format!("{name} interval [{lo}, {hi}] must be symmetric about 0; shift the nominal drawing instead"),
        ));
    }
    Ok((lo, hi))
}

fn visit_mut(g: &mut Group, f: &mut impl FnMut(usize, &mut Node)) {
    fn walk(g: &mut Group, idx: &mut usize, f: &mut impl FnMut(usize, &mut Node)) {
        for c in &mut g.children {
            f(*idx, c);
            *idx += 1;
            if let Node::Group(g) = c {
                walk(g, idx, f);
            }
        }
    }
    let mut idx = 0;
    walk(g, &mut idx, f);
}

pub(super) fn apply(d: &mut Drawing, text: &str) -> Result<()> {
    // Default pivots for every element, then sidecar overrides.
    visit_mut(&mut d.root, &mut |_, n| {
        let p = n.default_pivot();
        match n {
            Node::Group(g) => g.pivot = p,
            Node::Primitive(pr) => pr.pivot = p,
        }
    });
    if text.trim().is_empty() {
        return Ok(());
    }
    let doc: BoundsDoc = serde_json::from_str(text).map_err(|e| malformed("", e.to_string()))?;
    if doc.version != 1 {
        return Err(malformed(
            "",
            format!("unsupported version {}", doc.version),
        ));
    }

    let index: HashMap<String, usize> = d
        .elements()
        .iter()
        .enumerate()
        .filter_map(|(i, n)| n.id().map(|id| (id.to_string(), i)))
        .collect();
    let mut by_element: HashMap<usize, &ElementBounds> = HashMap::new();
    for e in &doc.elements {
        let &i = index
            .get(&e.id)
            .ok_or_else(|| VecdrawError::DanglingBoundsRef(e.id.clone()))?;
        if by_element.insert(i, e).is_some() {
            return Err(malformed(&e.id, "element listed twice"));
        }
    }

    let mut variables = Vec::new();
    let mut failure = None;
    visit_mut(&mut d.root, &mut |i, node| {
        if failure.is_some() {
            return;
        }
        let Some(eb) = by_element.get(&i) else { return };
        if let Err(e) = element_variables(i, node, eb, &mut variables) {
            failure = Some(e);
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    d.variables = variables;
    d.keypoints = doc.keypoints.into_iter().map(Point::from).collect();
    d.mask = doc.mask.into_iter().map(Point::from).collect();
    if !d.mask.is_empty() && d.mask.len() < 3 {
        return Err(malformed("", "mask polygon needs at least 3 vertices"));
    }
    if d.keypoints
        .iter()
        .chain(&d.mask)
        .any(|p| !(p.x.is_finite() && p.y.is_finite()))
    {
        return Err(malformed("", "non-finite keypoint or mask coordinate"));
    }
    Ok(())
}

fn element_variables(
    index: usize,
    node: &mut Node,
    eb: &ElementBounds,
    out: &mut Vec<BoundedVariable>,
) -> Result<()> {
    let id = eb.id.as_str();
    let target = |kind| VarTarget {
        element: index,
        element_id: id.to_string(),
        kind,
    };
    let push = |out: &mut Vec<BoundedVariable>, kind, (lo, hi): (f64, f64)| {
        out.push(BoundedVariable {
            target: target(kind),
            lo,
            hi,
            nominal: (lo + hi) / 2.0,
        })
    };

    if let Some(deg) = eb.half_plane_deg {
        let Node::Primitive(p) = node else {
            return Err(malformed(id, "half_plane_deg applies to circles only"));
        };
        let Shape::Circle { center, radius } = p.shape else {
            return Err(malformed(id, "half_plane_deg applies to circles only"));
        };
        if !deg.is_finite() {
            return Err(malformed(id, "half_plane_deg must be finite"));
        }
        if !p.fill {
            return Err(VecdrawError::UnsupportedElement(format!(
                "stroked half-circle {id:?}"
            )));
        }
        p.shape = Shape::HalfCircle {
            center,
            radius,
            half_plane_deg: deg,
        };
    }
    if let Some(pv) = eb.pivot {
        if !(pv[0].is_finite() && pv[1].is_finite()) {
            return Err(malformed(id, "pivot must be finite"));
        }
        match node {
            Node::Group(g) => g.pivot = pv.into(),
            Node::Primitive(p) => p.pivot = pv.into(),
        }
    }
    if let Some(r) = eb.point_radius {
        let Node::Primitive(p) = node else {
            return Err(malformed(
                id,
                "point_radius needs a primitive with control points",
            ));
        };
        if !(r.is_finite() && r > 0.0) {
            return Err(malformed(id, format!("point_radius {r} must be positive")));
        }
        for k in 0..p.shape.control_points().len() {
            push(out, VarKind::PointX(k), (-r, r));
            push(out, VarKind::PointY(k), (-r, r));
        }
    }
    if let Some(a) = &eb.affine {
        let parts = [
            (VarKind::Tx, "tx", a.tx),
            (VarKind::Ty, "ty", a.ty),
            (VarKind::RotateDeg, "rotate_deg", a.rotate_deg),
            (VarKind::LogScale, "log_scale", a.log_scale),
        ];
        let mut any = false;
        for (kind, name, iv) in parts {
            if let Some(iv) = iv {
                push(out, kind, interval(id, name, iv)?);
                any = true;
            }
        }
        if !any {
            return Err(malformed(id, "affine entry without components"));
        }
        // Elements with affine variables always carry an explicit transform
        // so the parameter layout does not depend on the perturbation.
        let t = match node {
            Node::Group(g) => &mut g.transform,
            Node::Primitive(p) => &mut p.transform,
        };
        t.get_or_insert_with(super::Affine::identity);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::*;

    const SVG: &str = r#"<svg viewBox="0 0 20 20">
        <g id="g1"><line id="l1" x1="0" y1="0" x2="10" y2="0"/><circle id="c1" cx="5" cy="5" r="2"/></g>
    </svg>"#;

    #[test]
    fn ordering_follows_document_not_sidecar() {
        let b = r#"{"version":1,"elements":[
            {"id":"c1","point_radius":1,"half_plane_deg":90},
            {"id":"g1","affine":{"log_scale":[-0.1,0.1],"tx":[-1,1]}},
            {"id":"l1","point_radius":2}]}"#;
        let d = Drawing::parse(SVG, b).unwrap();
        let kinds: Vec<(String, VarKind)> = d
            .variables
            .iter()
            .map(|v| (v.target.element_id.clone(), v.target.kind))
            .collect();
        assert_eq!(kinds[0], ("g1".into(), VarKind::Tx));
        assert_eq!(kinds[1], ("g1".into(), VarKind::LogScale));
        assert_eq!(kinds[2].0, "l1");
        assert_eq!(kinds[6], ("c1".into(), VarKind::PointX(0)));
        assert_eq!(d.n_vars(), 8);
        assert!(matches!(
            d.elements()[2],
            Node::Primitive(Primitive {
                shape: Shape::HalfCircle { .. },
                ..
            })
        ));
        // group pivot defaults to the bbox centre of its content
        assert_eq!(d.elements()[0].pivot(), Point::new(5.0, 3.5));
        assert_eq!(Drawing::parse(SVG, b).unwrap().variables, d.variables);
    }

    #[test]
    fn malformed_entries() {
        let cases = [
            r#"{"version":1,"elements":[{"id":"l1","point_radius":-1}]}"#,
            r#"{"version":1,"elements":[{"id":"g1","point_radius":1}]}"#,
            r#"{"version":1,"elements":[{"id":"l1","affine":{"tx":[1,-1]}}]}"#,
            r#"{"version":1,"elements":[{"id":"l1","affine":{"tx":[-1,3]}}]}"#,
            r#"{"version":1,"elements":[{"id":"l1","half_plane_deg":3}]}"#,
            r#"{"version":1,"elements":[{"id":"l1"},{"id":"l1"}]}"#,
            r#"{"version":2}"#,
            r#"{"version":1,"elements":[{"id":"l1","radius":1}]}"#,
            r#"{"version":1,"mask":[[0,0],[1,1]]}"#,
            "not json",
        ];
        for c in cases {
            assert!(
                matches!(
                    Drawing::parse(SVG, c),
                    Err(VecdrawError::MalformedBounds { .. })
                ),
                "{c}"
            );
        }
    }

    #[test]
    fn keypoints_and_mask() {
        let b = r#"{"version":1,"keypoints":[[1,1],[19,1]],"mask":[[0,0],[20,0],[20,20]]}"#;
        let d = Drawing::parse(SVG, b).unwrap();
        assert_eq!(
            d.keypoints,
            vec![Point::new(1.0, 1.0), Point::new(19.0, 1.0)]
        );
        assert_eq!(d.mask.len(), 3);
    }
}
