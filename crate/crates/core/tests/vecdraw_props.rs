use proptest::prelude::*;
use vecmorph::assets;
use vecmorph::vecdraw::{Affine, Drawing, Node, Point, Shape};

fn random_delta(d: &Drawing, unit: &[f64]) -> Vec<f64> {
    d.variables
        .iter()
        .zip(unit.iter().cycle())
        .map(|(v, u)| v.lo + (v.hi - v.lo) * u)
        .collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn svg_doc(elems: &[String]) -> String {
    format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 100 100">{}</svg>"#,
        elems.join("")
    )
}

fn element() -> impl Strategy<Value = String> {
    let coord = || -1000.0..1000.0f64;
    prop_oneof![
        (coord(), coord(), coord(), coord(), 0.1..5.0f64).prop_map(|(a, b, c, d, w)| format!(
            r#"<line x1="{a}" y1="{b}" x2="{c}" y2="{d}" stroke-width="{w}"/>"#
        )),
        (coord(), coord(), 0.1..50.0f64, any::<bool>()).prop_map(|(x, y, r, fill)| format!(
            r#"<circle cx="{x}" cy="{y}" r="{r}" fill="{}" stroke-width="1.5"/>"#,
            if fill { "white" } else { "none" }
        )),
        prop::collection::vec((coord(), coord()), 3..7).prop_map(|pts| {
            let p: Vec<String> = pts.iter().map(|(x, y)| format!("{x},{y}")).collect();
            format!(r#"<polygon points="{}"/>"#, p.join(" "))
        }),
        (coord(), coord(), coord(), coord(), 1.0..20.0f64, any::<bool>(), any::<bool>()).prop_map(
            |(a, b, c, d, r, la, sw)| format!(
                r#"<path d="M {a} {b} L {c} {d} A {r} {r} 0 {} {} {a} {d}" fill="none" stroke="white"/>"#,
                la as u8, sw as u8
            )
        ),
    ]
}

fn drawing_text() -> impl Strategy<Value = String> {
    prop::collection::vec(element(), 0..5).prop_flat_map(|els| {
        (Just(els), prop::collection::vec(-3.0..3.0f64, 6)).prop_map(|(els, m)| {
            let grouped = format!(
                r#"<g transform="matrix({} {} {} {} {} {})">{}</g>"#,
                1.0 + m[0].abs(),
                m[1],
                m[2],
                1.0 + m[3].abs(),
                m[4],
                m[5],
                els.join("")
            );
            svg_doc(&[els.join(""), grouped])
        })
    })
}

proptest! {
    #[test]
    fn emit_parse_round_trip(text in drawing_text()) {
        let d = Drawing::parse(&text, "").unwrap();
        let back = Drawing::parse(&d.emit_svg(), "").unwrap();
        prop_assert!(close(&d.flatten_parameters(), &back.flatten_parameters(), 1e-6));
    }

    #[test]
    fn perturbed_round_trip_and_invariants(unit in prop::collection::vec(0.0..1.0f64, 56)) {
        let d = assets::robot().unwrap();
        let delta = random_delta(&d, &unit);
        let p = d.apply_perturbation(&delta).unwrap();
        prop_assert_eq!(&p.keypoints, &d.keypoints);
        prop_assert_eq!(&p.mask, &d.mask);
        let back = Drawing::parse(&p.emit_svg(), assets::ROBOT_BOUNDS).unwrap();
        prop_assert!(close(&p.flatten_parameters(), &back.flatten_parameters(), 1e-6));
        prop_assert!(!close(&p.flatten_parameters(), &d.flatten_parameters(), 1e-9) || delta.iter().all(|&x| x == 0.0));
    }
}

#[test]
fn zero_delta_is_identity() {
    let d = assets::robot().unwrap();
    let p = d.apply_perturbation(&vec![0.0; d.n_vars()]).unwrap();
    assert!(close(&p.flatten_parameters(), &d.flatten_parameters(), 0.0));
    assert_eq!(d.n_vars(), 56);
}

#[test]
fn ordering_is_deterministic() {
    let a = assets::robot().unwrap();
    let b = assets::robot().unwrap();
    assert_eq!(a.variables, b.variables);
}

#[test]
fn group_rotation_about_pivot() {
    let svg =
        r#"<svg viewBox="0 0 10 10"><g id="g"><polygon id="p" points="6,5 4,4 4,6"/></g></svg>"#;
    let bounds =
        r#"{"version":1,"elements":[{"id":"g","pivot":[5,5],"affine":{"rotate_deg":[-30,30]}}]}"#;
    let d = Drawing::parse(svg, bounds).unwrap();
    let deg: f64 = 17.0;
    let p = d.apply_perturbation(&[deg]).unwrap();
    let Node::Group(g) = &p.root.children[0] else {
        panic!()
    };
    let Node::Primitive(prim) = &g.children[0] else {
        panic!()
    };
    let Shape::Polygon { points } = &prim.shape else {
        panic!()
    };
    assert_eq!(points[0], Point::new(6.0, 5.0));
    let t: Affine = g.transform.unwrap();
    let (x, y) = t.apply(6.0, 5.0);

    // translate(-pivot), rotate, translate(pivot) as explicit 3x3 products
    let th = deg.to_radians();
    let to_origin = [[1.0, 0.0, -5.0], [0.0, 1.0, -5.0], [0.0, 0.0, 1.0]];
    let rot = [
        [th.cos(), -th.sin(), 0.0],
        [th.sin(), th.cos(), 0.0],
        [0.0, 0.0, 1.0],
    ];
    let back = [[1.0, 0.0, 5.0], [0.0, 1.0, 5.0], [0.0, 0.0, 1.0]];
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
        let mut c = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        c
    };
    let m = mul(back, mul(rot, to_origin));
    let ex = m[0][0] * 6.0 + m[0][1] * 5.0 + m[0][2];
    let ey = m[1][0] * 6.0 + m[1][1] * 5.0 + m[1][2];
    assert!((x - ex).abs() < 1e-12 && (y - ey).abs() < 1e-12);
    assert!((x - (5.0 + th.cos())).abs() < 1e-12 && (y - (5.0 + th.sin())).abs() < 1e-12);
}

#[test]
fn perturbed_drawing_emits_perturbed_coordinates() {
    let svg = r#"<svg viewBox="0 0 20 20"><line id="l" x1="0" y1="0" x2="10" y2="0" stroke-width="2"/></svg>"#;
    let d = Drawing::parse(
        svg,
        r#"{"version":1,"elements":[{"id":"l","point_radius":2}]}"#,
    )
    .unwrap();
    let text = d
        .apply_perturbation(&[2.0, 0.0, 0.0, 1.5])
        .unwrap()
        .emit_svg();
    assert!(text.contains(r#"x1="2""#), "{text}");
    assert!(text.contains(r#"y2="1.5""#), "{text}");
    assert!(text.contains(r#"stroke="black""#), "{text}");
}
