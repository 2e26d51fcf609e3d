use std::collections::HashSet;
use std::fmt::Write;

use super::path::parse_d;
use super::{
    Affine, Canvas, Color, Drawing, Group, Node, Point, Primitive, Result, Segment, Shape,
    VecdrawError,
};

fn unsupported(element: &str, attr: &str, value: &str) -> VecdrawError {
    VecdrawError::UnsupportedValue {
        element: element.into(),
        attr: attr.into(),
        value: value.into(),
    }
}

fn parse_number(element: &str, attr: &str, v: &str) -> Result<f64> {
    let t = v.trim();
    let t = t.strip_suffix("px").unwrap_or(t);
    t.trim()
        .parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| unsupported(element, attr, v))
}

fn numbers(element: &str, attr: &str, v: &str) -> Result<Vec<f64>> {
    v.split(|c: char| c.is_ascii_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| parse_number(element, attr, s))
        .collect()
}

fn num_attr(n: &roxmltree::Node, attr: &str, default: Option<f64>) -> Result<f64> {
    let el = n.tag_name().name();
    match n.attribute(attr) {
        Some(v) => parse_number(el, attr, v),
        None => default.ok_or_else(|| VecdrawError::MissingAttribute {
            element: el.into(),
            attr: attr.into(),
        }),
    }
}

/// `None` for "none", otherwise black or white.
fn parse_paint(element: &str, attr: &str, v: &str) -> Result<Option<Color>> {
    match v.trim().to_ascii_lowercase().as_str() {
        "none" | "transparent" => Ok(None),
        "black" | "#000" | "#000000" | "rgb(0,0,0)" => Ok(Some(Color::Black)),
        "white" | "#fff" | "#ffffff" | "rgb(255,255,255)" => Ok(Some(Color::White)),
        _ => Err(unsupported(element, attr, v)),
    }
}

fn parse_transform(element: &str, v: &str) -> Result<Affine> {
    let t = v.trim();
    let inner = t
        .strip_prefix("matrix")
        .map(str::trim_start)
        .and_then(|s| s.strip_prefix('('))
        .and_then(|s| s.trim_end().strip_suffix(')'))
        .ok_or_else(|| unsupported(element, "transform", v))?;
    let m = numbers(element, "transform", inner)?;
    let m: [f64; 6] = m
        .try_into()
        .map_err(|_| unsupported(element, "transform", v))?;
    Ok(Affine { m })
}

fn geometry_err(element: &str, reason: impl Into<String>) -> VecdrawError {
    VecdrawError::InvalidGeometry {
        element: element.into(),
        reason: reason.into(),
    }
}

fn parse_element(n: roxmltree::Node, ids: &mut HashSet<String>) -> Result<Node> {
    let name = n.tag_name().name();
    if n.attribute("style").is_some() {
        return Err(unsupported(
            name,
            "style",
            n.attribute("style").unwrap_or_default(),
        ));
    }
    let id = n.attribute("id").map(str::to_string);
    if let Some(id) = &id {
        if !ids.insert(id.clone()) {
            return Err(VecdrawError::DuplicateId(id.clone()));
        }
    }
    let transform = n
        .attribute("transform")
        .map(|v| parse_transform(name, v))
        .transpose()?;

    if name == "g" {
        let children = n
            .children()
            .filter(|c| c.is_element())
            .map(|c| parse_element(c, ids))
            .collect::<Result<Vec<_>>>()?;
        return Ok(Node::Group(Group {
            id,
            transform,
            pivot: Point::new(0.0, 0.0),
            children,
        }));
    }

    let shape = match name {
        "line" => Shape::Line {
            from: Point::new(
                num_attr(&n, "x1", Some(0.0))?,
                num_attr(&n, "y1", Some(0.0))?,
            ),
            to: Point::new(
                num_attr(&n, "x2", Some(0.0))?,
                num_attr(&n, "y2", Some(0.0))?,
            ),
        },
        "circle" => {
            let radius = num_attr(&n, "r", None)?;
            if radius <= 0.0 {
                return Err(geometry_err(
                    name,
                    format!("radius {radius} must be positive"),
                ));
            }
            Shape::Circle {
                center: Point::new(
                    num_attr(&n, "cx", Some(0.0))?,
                    num_attr(&n, "cy", Some(0.0))?,
                ),
                radius,
            }
        }
        "polygon" => {
            let raw = n
                .attribute("points")
                .ok_or_else(|| VecdrawError::MissingAttribute {
                    element: name.into(),
                    attr: "points".into(),
                })?;
            let v = numbers(name, "points", raw)?;
            if v.len() % 2 != 0 {
                return Err(unsupported(name, "points", raw));
            }
            let points: Vec<Point> = v.chunks(2).map(|c| Point::new(c[0], c[1])).collect();
            if points.len() < 3 {
                return Err(geometry_err(name, "polygon needs at least 3 vertices"));
            }
            Shape::Polygon { points }
        }
        "path" => {
            let d = n
                .attribute("d")
                .ok_or_else(|| VecdrawError::MissingAttribute {
                    element: name.into(),
                    attr: "d".into(),
                })?;
            let (start, segments) = parse_d(d)?;
            Shape::Path { start, segments }
        }
        other => return Err(VecdrawError::UnsupportedElement(other.into())),
    };
    if let Some(child) = n.children().find(|c| c.is_element()) {
        return Err(VecdrawError::UnsupportedElement(format!(
            "{} inside <{name}>",
            child.tag_name().name()
        )));
    }

    let stroked_kind = matches!(shape, Shape::Line { .. } | Shape::Path { .. });
    let fill_attr = n.attribute("fill");
    let (fill, color) = if stroked_kind {
        if let Some(f) = fill_attr {
            if parse_paint(name, "fill", f)?.is_some() {
                return Err(unsupported(name, "fill", f));
            }
        }
        (false, None)
    } else {
        // SVG default fill is black
        match fill_attr
            .map(|f| parse_paint(name, "fill", f))
            .transpose()?
        {
            None => (true, Some(Color::Black)),
            Some(None) => (false, None),
            Some(Some(c)) => (true, Some(c)),
        }
    };
    let color = match color {
        Some(c) => c,
        None => match n.attribute("stroke") {
            None => Color::Black,
            Some(s) => {
                parse_paint(name, "stroke", s)?.ok_or_else(|| unsupported(name, "stroke", s))?
            }
        },
    };
    let stroke_width = num_attr(&n, "stroke-width", Some(1.0))?;
    if !fill && stroke_width <= 0.0 {
        return Err(geometry_err(
            name,
            format!("stroke-width {stroke_width} must be positive"),
        ));
    }
    Ok(Node::Primitive(Primitive {
        id,
        shape,
        stroke_width,
        color,
        fill,
        transform,
        pivot: Point::new(0.0, 0.0),
    }))
}

fn parse_canvas(root: &roxmltree::Node) -> Result<Canvas> {
    if let Some(vb) = root.attribute("viewBox") {
        let v = numbers("svg", "viewBox", vb)?;
        if v.len() != 4 || v[2] <= 0.0 || v[3] <= 0.0 {
            return Err(unsupported("svg", "viewBox", vb));
        }
        return Ok(Canvas {
            min_x: v[0],
            min_y: v[1],
            width: v[2],
            height: v[3],
        });
    }
    let width = num_attr(root, "width", None)?;
    let height = num_attr(root, "height", None)?;
    if width <= 0.0 || height <= 0.0 {
        return Err(unsupported(
            "svg",
            "width/height",
            &format!("{width}x{height}"),
        ));
    }
    Ok(Canvas {
        min_x: 0.0,
        min_y: 0.0,
        width,
        height,
    })
}

pub(super) fn parse(text: &str) -> Result<(Group, Canvas)> {
    let doc = roxmltree::Document::parse(text).map_err(|e| VecdrawError::Xml(e.to_string()))?;
    let root = doc.root_element();
    if root.tag_name().name() != "svg" {
        return Err(VecdrawError::UnsupportedElement(
            root.tag_name().name().into(),
        ));
    }
    let canvas = parse_canvas(&root)?;
    let mut ids = HashSet::new();
    let children = root
        .children()
        .filter(|c| c.is_element())
        .map(|c| parse_element(c, &mut ids))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Group {
            id: None,
            transform: None,
            pivot: Point::new(0.0, 0.0),
            children,
        },
        canvas,
    ))
}

fn color_name(c: Color) -> &'static str {
    match c {
        Color::Black => "black",
        Color::White => "white",
    }
}

fn common_attrs(out: &mut String, id: Option<&str>, transform: Option<&Affine>) {
    if let Some(id) = id {
        let _ = write!(out, r#" id="{}""#, escape(id));
    }
    if let Some(t) = transform {
        let m = t.m;
        let _ = write!(
            out,
            r#" transform="matrix({} {} {} {} {} {})""#,
            m[0], m[1], m[2], m[3], m[4], m[5]
        );
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('"', "&quot;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn emit_primitive(out: &mut String, p: &Primitive, indent: usize) {
    let pad = "  ".repeat(indent);
    out.push_str(&pad);
    match &p.shape {
        Shape::Line { from, to } => {
            let _ = write!(
                out,
                r#"<line x1="{}" y1="{}" x2="{}" y2="{}""#,
                from.x, from.y, to.x, to.y
            );
        }
        Shape::Circle { center, radius } | Shape::HalfCircle { center, radius, .. } => {
            let _ = write!(
                out,
                r#"<circle cx="{}" cy="{}" r="{}""#,
                center.x, center.y, radius
            );
        }
        Shape::Polygon { points } => {
            let pts: Vec<String> = points.iter().map(|q| format!("{},{}", q.x, q.y)).collect();
            let _ = write!(out, r#"<polygon points="{}""#, pts.join(" "));
        }
        Shape::Path { start, segments } => {
            let mut d = format!("M {} {}", start.x, start.y);
            for s in segments {
                match s {
                    Segment::Line { to } => {
                        let _ = write!(d, " L {} {}", to.x, to.y);
                    }
                    Segment::Arc {
                        radius,
                        large_arc,
                        sweep,
                        to,
                    } => {
                        let _ = write!(
                            d,
                            " A {r} {r} 0 {} {} {} {}",
                            u8::from(*large_arc),
                            u8::from(*sweep),
                            to.x,
                            to.y,
                            r = radius
                        );
                    }
                }
            }
            let _ = write!(out, r#"<path d="{d}""#);
        }
    }
    common_attrs(out, p.id.as_deref(), p.transform.as_ref());
    if p.is_stroked() {
        if !matches!(p.shape, Shape::Line { .. }) {
            out.push_str(r#" fill="none""#);
        }
        let _ = write!(
            out,
            r#" stroke="{}" stroke-width="{}""#,
            color_name(p.color),
            p.stroke_width
        );
    } else {
        let _ = write!(out, r#" fill="{}""#, color_name(p.color));
    }
    out.push_str("/>\n");
}

fn emit_group(out: &mut String, g: &Group, indent: usize) {
    for c in &g.children {
        match c {
            Node::Primitive(p) => emit_primitive(out, p, indent),
            Node::Group(g) => {
                out.push_str(&"  ".repeat(indent));
                out.push_str("<g");
                common_attrs(out, g.id.as_deref(), g.transform.as_ref());
                out.push_str(">\n");
                emit_group(out, g, indent + 1);
                out.push_str(&"  ".repeat(indent));
                out.push_str("</g>\n");
            }
        }
    }
}

pub(super) fn emit(d: &Drawing) -> String {
    let c = d.canvas;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"{} {} {} {}\" width=\"{}\" height=\"{}\">\n",
        c.min_x, c.min_y, c.width, c.height, c.width, c.height
    );
    emit_group(&mut out, &d.root, 1);
    out.push_str("</svg>\n");
    out
}
