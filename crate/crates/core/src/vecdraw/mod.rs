//! Vector drawing document model: an SVG subset plus a JSON bounds sidecar
//! that turns selected element parameters into bounded perturbation
//! variables.
//!
//! Variables are offsets from the nominal drawing. Point variables translate
//! one control-point coordinate; affine variables `(tx, ty, rotate_deg,
//! log_scale)` compose a pivot-centred similarity with the element's own
//! transform. Within one element, point translations apply first, then the
//! affine perturbation, then the element's nominal transform.

mod bounds;
mod path;
mod svg;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VecdrawError {
    #[error("malformed svg: {0}")]
    Xml(String),
    #[error("unsupported svg element <{0}>")]
    UnsupportedElement(String),
    #[error("unsupported value {value:?} for attribute {attr} on <{element}>")]
    UnsupportedValue {
        element: String,
        attr: String,
        value: String,
    },
    #[error("missing attribute {attr} on <{element}>")]
    MissingAttribute { element: String, attr: String },
    #[error("invalid geometry on <{element}>: {reason}")]
    InvalidGeometry { element: String, reason: String },
    #[error("duplicate element id {0:?}")]
    DuplicateId(String),
    #[error("malformed bounds for {id:?}: {reason}")]
    MalformedBounds { id: String, reason: String },
    #[error("bounds reference unknown element id {0:?}")]
    DanglingBoundsRef(String),
    #[error("perturbation has {got} entries, drawing has {expected} variables")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("perturbation entry {0} lies outside its bounds")]
    OutOfBounds(usize),
}

pub type Result<T> = std::result::Result<T, VecdrawError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

impl From<[f64; 2]> for Point {
    fn from(p: [f64; 2]) -> Self {
        Point::new(p[0], p[1])
    }
}

/// 2-D affine map in SVG `matrix(a b c d e f)` order:
/// `x' = a·x + c·y + e`, `y' = b·x + d·y + f`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine<T = f64> {
    pub m: [T; 6],
}

impl<T: Scalar> Affine<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::cst(1.0), T::zero());
        Self {
            m: [o, z, z, o, z, z],
        }
    }

    pub fn apply(&self, x: T, y: T) -> (T, T) {
        let m = &self.m;
        (m[0] * x + m[2] * y + m[4], m[1] * x + m[3] * y + m[5])
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn then_inner(&self, inner: &Affine<T>) -> Affine<T> {
        let (a, b) = (&self.m, &inner.m);
        Affine {
            m: [
                a[0] * b[0] + a[2] * b[1],
                a[1] * b[0] + a[3] * b[1],
                a[0] * b[2] + a[2] * b[3],
                a[1] * b[2] + a[3] * b[3],
                a[0] * b[4] + a[2] * b[5] + a[4],
                a[1] * b[4] + a[3] * b[5] + a[5],
            ],
        }
    }

    pub fn det(&self) -> T {
        self.m[0] * self.m[3] - self.m[1] * self.m[2]
    }

    /// Isotropic length scale, `sqrt(|det|)`.
    pub fn length_scale(&self) -> T {
        let d = self.det();
        if d.value() < 0.0 {
            (-d).sqrt()
        } else {
            d.sqrt()
        }
    }

    /// Similarity about `pivot`: scale `e^log_scale`, rotate by `theta`
    /// radians, then translate by `(tx, ty)`.
    pub fn pivoted(tx: T, ty: T, theta: T, log_scale: T, pivot: Point) -> Self {
        let s = log_scale.exp();
        let (c, sn) = (theta.cos() * s, theta.sin() * s);
        let (px, py) = (T::cst(pivot.x), T::cst(pivot.y));
        Affine {
            m: [
                c,
                sn,
                -sn,
                c,
                px - (c * px - sn * py) + tx,
                py - (sn * px + c * py) + ty,
            ],
        }
    }
}

impl Affine<f64> {
    pub fn lift<T: Scalar>(&self) -> Affine<T> {
        Affine {
            m: self.m.map(T::cst),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.m == [1.0, 0.0, 0.0, 1.0, 0.0, 0.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Black,
    White,
}

impl Color {
    /// Contribution sign in additive composition: ink is positive.
    pub fn sign(self) -> f64 {
        match self {
            Color::Black => 1.0,
            Color::White => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Line {
        to: Point,
    },
    /// Circular arc in SVG endpoint form.
    Arc {
        radius: f64,
        large_arc: bool,
        sweep: bool,
        to: Point,
    },
}

impl Segment {
    pub fn end(&self) -> Point {
        match self {
            Segment::Line { to } | Segment::Arc { to, .. } => *to,
        }
    }

    fn end_mut(&mut self) -> &mut Point {
        match self {
            Segment::Line { to } | Segment::Arc { to, .. } => to,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Line {
        from: Point,
        to: Point,
    },
    Path {
        start: Point,
        segments: Vec<Segment>,
    },
    Circle {
        center: Point,
        radius: f64,
    },
    /// Disk intersected with the half-plane through its centre whose inward
    /// normal points at `half_plane_deg`.
    HalfCircle {
        center: Point,
        radius: f64,
        half_plane_deg: f64,
    },
    Polygon {
        points: Vec<Point>,
    },
}

impl Shape {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Shape::Line { .. } => "line",
            Shape::Path { .. } => "path",
            Shape::Circle { .. } => "circle",
            Shape::HalfCircle { .. } => "half_circle",
            Shape::Polygon { .. } => "polygon",
        }
    }

    /// Points that point-radius variables translate, in declaration order.
    pub fn control_points(&self) -> Vec<Point> {
        match self {
            Shape::Line { from, to } => vec![*from, *to],
            Shape::Path { start, segments } => std::iter::once(*start)
                .chain(segments.iter().map(Segment::end))
                .collect(),
            Shape::Circle { center, .. } | Shape::HalfCircle { center, .. } => vec![*center],
            Shape::Polygon { points } => points.clone(),
        }
    }

    fn control_points_mut(&mut self) -> Vec<&mut Point> {
        match self {
            Shape::Line { from, to } => vec![from, to],
            Shape::Path { start, segments } => std::iter::once(start)
                .chain(segments.iter_mut().map(Segment::end_mut))
                .collect(),
            Shape::Circle { center, .. } | Shape::HalfCircle { center, .. } => vec![center],
            Shape::Polygon { points } => points.iter_mut().collect(),
        }
    }

    fn extent(&self) -> Vec<Point> {
        match self {
            Shape::Circle { center, radius } | Shape::HalfCircle { center, radius, .. } => vec![
                Point::new(center.x - radius, center.y - radius),
                Point::new(center.x + radius, center.y + radius),
            ],
            _ => self.control_points(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub id: Option<String>,
    pub shape: Shape,
    /// Stroke width in drawing units; meaningful when `fill` is false.
    pub stroke_width: f64,
    pub color: Color,
    pub fill: bool,
    pub transform: Option<Affine>,
    pub pivot: Point,
}

impl Primitive {
    /// Lines and paths are always stroked; circles and polygons are stroked
    /// when unfilled.
    pub fn is_stroked(&self) -> bool {
        match self.shape {
            Shape::Line { .. } | Shape::Path { .. } => true,
            _ => !self.fill,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub id: Option<String>,
    pub transform: Option<Affine>,
    pub pivot: Point,
    pub children: Vec<Node>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Group(Group),
    Primitive(Primitive),
}

impl Node {
    pub fn id(&self) -> Option<&str> {
        match self {
            Node::Group(g) => g.id.as_deref(),
            Node::Primitive(p) => p.id.as_deref(),
        }
    }

    pub fn transform(&self) -> Option<&Affine> {
        match self {
            Node::Group(g) => g.transform.as_ref(),
            Node::Primitive(p) => p.transform.as_ref(),
        }
    }

    fn transform_mut(&mut self) -> &mut Option<Affine> {
        match self {
            Node::Group(g) => &mut g.transform,
            Node::Primitive(p) => &mut p.transform,
        }
    }

    pub fn pivot(&self) -> Point {
        match self {
            Node::Group(g) => g.pivot,
            Node::Primitive(p) => p.pivot,
        }
    }

    fn local_extent(&self) -> Vec<Point> {
        match self {
            Node::Primitive(p) => p.shape.extent(),
            Node::Group(g) => g
                .children
                .iter()
                .flat_map(|c| {
                    let pts = c.local_extent();
                    match c.transform() {
                        Some(t) => pts
                            .into_iter()
                            .map(|p| {
                                let (x, y) = t.apply(p.x, p.y);
                                Point::new(x, y)
                            })
                            .collect(),
                        None => pts,
                    }
                })
                .collect(),
        }
    }

    /// Centre of the bounding box of the node's geometry in its own frame.
    fn default_pivot(&self) -> Point {
        let pts = self.local_extent();
        if pts.is_empty() {
            return Point::new(0.0, 0.0);
        }
        let (mut lo, mut hi) = (pts[0], pts[0]);
        for p in &pts {
            lo = Point::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Point::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        Point::new((lo.x + hi.x) / 2.0, (lo.y + hi.y) / 2.0)
    }

    fn n_control_points(&self) -> usize {
        match self {
            Node::Group(_) => 0,
            Node::Primitive(p) => p.shape.control_points().len(),
        }
    }
}

/// Drawing-unit rectangle mapped onto the raster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Canvas {
    pub min_x: f64,
    pub min_y: f64,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VarKind {
    PointX(usize),
    PointY(usize),
    Tx,
    Ty,
    RotateDeg,
    LogScale,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarTarget {
    /// Pre-order index of the element (the root `<svg>` is not counted).
    pub element: usize,
    pub element_id: String,
    pub kind: VarKind,
}

/// One scalar degree of freedom, as an offset from the nominal drawing.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundedVariable {
    pub target: VarTarget,
    pub lo: f64,
    pub hi: f64,
    pub nominal: f64,
}

impl BoundedVariable {
    pub fn half_range(&self) -> f64 {
        (self.hi - self.lo) / 2.0
    }
}

/// Per-element perturbation derived from a variable vector.
#[derive(Debug, Clone)]
pub struct ElementPerturbation<T> {
    pub point_offsets: Vec<[T; 2]>,
    /// `(tx, ty, theta_radians, log_scale)` when the element has affine variables.
    pub affine: Option<[T; 4]>,
}

impl<T: Scalar> ElementPerturbation<T> {
    /// The pivot-centred affine perturbation, identity when absent.
    pub fn affine_map(&self, pivot: Point) -> Option<Affine<T>> {
        self.affine
            .map(|[tx, ty, th, ls]| Affine::pivoted(tx, ty, th, ls, pivot))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Drawing {
    pub root: Group,
    pub variables: Vec<BoundedVariable>,
    pub keypoints: Vec<Point>,
    pub mask: Vec<Point>,
    pub canvas: Canvas,
}

impl Drawing {
    /// Parses an SVG-subset document and its bounds sidecar. An empty (or
    /// whitespace-only) sidecar means no variables.
    pub fn parse(svg_text: &str, bounds_text: &str) -> Result<Drawing> {
        let (root, canvas) = svg::parse(svg_text)?;
        let mut d = Drawing {
            root,
            variables: Vec::new(),
            keypoints: Vec::new(),
            mask: Vec::new(),
            canvas,
        };
        bounds::apply(&mut d, bounds_text)?;
        Ok(d)
    }

    pub fn n_vars(&self) -> usize {
        self.variables.len()
    }

    /// Elements in pre-order (document order), excluding the root.
    pub fn elements(&self) -> Vec<&Node> {
        fn walk<'a>(g: &'a Group, out: &mut Vec<&'a Node>) {
            for c in &g.children {
                out.push(c);
                if let Node::Group(g) = c {
                    walk(g, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.root, &mut out);
        out
    }

    pub fn n_primitives(&self) -> usize {
        self.elements()
            .iter()
            .filter(|n| matches!(n, Node::Primitive(_)))
            .count()
    }

    /// Every nominal scalar parameter in document order: per group its
    /// transform (when present) then children; per primitive its geometry,
    /// stroke width (stroked kinds), then transform (when present).
    pub fn flatten_parameters(&self) -> Vec<f64> {
        fn prim(p: &Primitive, out: &mut Vec<f64>) {
            match &p.shape {
                Shape::Line { from, to } => out.extend([from.x, from.y, to.x, to.y]),
                Shape::Path { start, segments } => {
                    out.extend([start.x, start.y]);
                    for s in segments {
                        match s {
                            Segment::Line { to } => out.extend([to.x, to.y]),
                            Segment::Arc { radius, to, .. } => out.extend([*radius, to.x, to.y]),
                        }
                    }
                }
                Shape::Circle { center, radius } | Shape::HalfCircle { center, radius, .. } => {
                    out.extend([center.x, center.y, *radius])
                }
                Shape::Polygon { points } => {
                    for q in points {
                        out.extend([q.x, q.y]);
                    }
                }
            }
            if p.is_stroked() {
                out.push(p.stroke_width);
            }
            if let Some(t) = &p.transform {
                out.extend(t.m);
            }
        }
        fn group(g: &Group, out: &mut Vec<f64>) {
            for c in &g.children {
                match c {
                    Node::Primitive(p) => prim(p, out),
                    Node::Group(g) => {
                        if let Some(t) = &g.transform {
                            out.extend(t.m);
                        }
                        group(g, out);
                    }
                }
            }
        }
        let mut out = Vec::new();
        group(&self.root, &mut out);
        out
    }

    /// Groups the variable vector into per-element perturbations, indexed by
    /// pre-order element index. `values` are offsets from nominal.
    pub fn element_perturbations<T: Scalar>(
        &self,
        values: &[T],
    ) -> Vec<Option<ElementPerturbation<T>>> {
        let elements = self.elements();
        let mut out: Vec<Option<ElementPerturbation<T>>> = vec![None; elements.len()];
        for (v, &x) in self.variables.iter().zip(values) {
            let e = v.target.element;
            let entry = out[e].get_or_insert_with(|| ElementPerturbation {
                point_offsets: vec![[T::zero(); 2]; elements[e].n_control_points()],
                affine: None,
            });
            let x = x + T::cst(v.nominal);
            match v.target.kind {
                VarKind::PointX(k) => entry.point_offsets[k][0] = x,
                VarKind::PointY(k) => entry.point_offsets[k][1] = x,
                kind => {
                    let a = entry.affine.get_or_insert([T::zero(); 4]);
                    match kind {
                        VarKind::Tx => a[0] = x,
                        VarKind::Ty => a[1] = x,
                        VarKind::RotateDeg => a[2] = x * T::cst(std::f64::consts::PI / 180.0),
                        VarKind::LogScale => a[3] = x,
                        _ => unreachable!(),
                    }
                }
            }
        }
        out
    }

    /// Checks length and per-entry bounds of a perturbation vector.
    pub fn check_delta(&self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.n_vars() {
            return Err(VecdrawError::DimensionMismatch {
                expected: self.n_vars(),
                got: delta.len(),
            });
        }
        const TOL: f64 = 1e-9;
        for (i, (v, &d)) in self.variables.iter().zip(delta).enumerate() {
            let ok = d.is_finite() && d >= v.lo - v.nominal - TOL && d <= v.hi - v.nominal + TOL;
            if !ok {
                return Err(VecdrawError::OutOfBounds(i));
            }
        }
        Ok(())
    }

    /// New drawing with `delta` (offsets from nominal, one per variable)
    /// folded into the document parameters.
    pub fn apply_perturbation(&self, delta: &[f64]) -> Result<Drawing> {
        self.check_delta(delta)?;
        let perts = self.element_perturbations(delta);
        let mut out = self.clone();
        fn walk(g: &mut Group, perts: &[Option<ElementPerturbation<f64>>], idx: &mut usize) {
            for c in &mut g.children {
                let here = *idx;
                *idx += 1;
                if let Some(p) = &perts[here] {
                    if let Node::Primitive(prim) = c {
                        for (pt, off) in prim
                            .shape
                            .control_points_mut()
                            .into_iter()
                            .zip(&p.point_offsets)
                        {
                            pt.x += off[0];
                            pt.y += off[1];
                        }
                    }
                    if let Some(delta_map) = p.affine_map(c.pivot()) {
                        let t = c.transform_mut();
                        let nominal = t.unwrap_or_else(Affine::identity);
                        *t = Some(nominal.then_inner(&delta_map));
                    }
                }
                if let Node::Group(g) = c {
                    walk(g, perts, idx);
                }
            }
        }
        let mut idx = 0;
        walk(&mut out.root, &perts, &mut idx);
        Ok(out)
    }

    pub fn emit_svg(&self) -> String {
        svg::emit(self)
    }
}
