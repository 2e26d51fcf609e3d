use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vecmorph::assets;
use vecmorph::softraster::{
    hard_rasterize, soft_rasterize, soft_rasterize_values, squash01, RasterConfig, RenderItem,
    SdfShape,
};
use vecmorph::tensor::{Tape, Tensor};
use vecmorph::vecdraw::Drawing;

fn cfg(size: usize, st: f64, layering: bool) -> RasterConfig {
    RasterConfig {
        width: size,
        height: size,
        s: st,
        t: st,
        layering,
    }
}

fn mean_abs(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() as f64)
        .sum::<f64>()
        / a.len() as f64
}

/// Even-odd membership by casting a ray towards +y and counting edge
/// crossings.
fn even_odd_oracle(q: [f64; 2], pts: &[[f64; 2]]) -> bool {
    let mut crossings = 0;
    for i in 0..pts.len() {
        let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
        let (lo, hi) = if a[0] < b[0] { (a, b) } else { (b, a) };
        if q[0] >= lo[0] && q[0] < hi[0] {
            let y = lo[1] + (q[0] - lo[0]) / (hi[0] - lo[0]) * (hi[1] - lo[1]);
            if y > q[1] {
                crossings += 1;
            }
        }
    }
    crossings % 2 == 1
}

#[test]
fn polygon_sign_matches_even_odd() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    while checked < 10_000 {
        let n = rng.gen_range(3..9);
        let points: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0)])
            .collect();
        let item = RenderItem {
            shape: SdfShape::Polygon {
                points: points.clone(),
            },
            sign: 1.0,
        };
        for _ in 0..100 {
            let q = [rng.gen_range(-2.0..22.0), rng.gen_range(-2.0..22.0)];
            let d = item.sdf(q);
            if d.abs() < 1e-9 {
                continue;
            }
            assert_eq!(d > 0.0, even_odd_oracle(q, &points), "{points:?} {q:?}");
            checked += 1;
        }
    }
}

const STACK: &str = r#"<svg viewBox="0 0 32 32">
    <line x1="4" y1="16" x2="28" y2="16" stroke-width="8"/>
    <line x1="16" y1="4" x2="16" y2="28" stroke-width="8"/>
    <circle cx="16" cy="16" r="3" fill="white"/>
</svg>"#;

#[test]
fn black_black_white_overlap() {
    let d = Drawing::parse(STACK, "").unwrap();
    let off = soft_rasterize_values(&d, &[], &cfg(32, 200.0, false)).unwrap();
    let on = soft_rasterize_values(&d, &[], &cfg(32, 200.0, true)).unwrap();
    assert!(off.get(16, 16) > 0.95);
    assert!(on.get(16, 16) < 0.05);
    // single black layer and white background unaffected by the mode
    for img in [&off, &on] {
        assert!(img.get(6, 16) > 0.95);
        assert!(img.get(2, 2) < 0.05);
    }
}

#[test]
fn squash_values_and_gradient() {
    let x = Tensor::from_vec(vec![0.5, 1.0], &[2]).unwrap();
    assert_eq!(squash01(&x, 3.0).data()[0], 0.5);
    assert!(squash01(&x, 1e4).data()[1] > 0.999_999);
    let t = 10.0f32;
    for x0 in [0.0f32, 0.5, 1.0] {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(vec![x0], &[1]).unwrap());
        let g = tape.backward(&squash01(&x, t).sum()).unwrap().wrt(&x)[0] as f64;
        let f = |v: f64| 1.0 / (1.0 + (-(t as f64) * (v - 0.5)).exp());
        let h = 1e-3;
        let fd = (f(x0 as f64 + h) - f(x0 as f64 - h)) / (2.0 * h);
        assert!(
            (g - fd).abs() / fd.abs().max(1.0) < 1e-3,
            "x={x0}: {g} vs {fd}"
        );
    }
}

#[test]
fn hard_raster_examples() {
    let line = r#"<svg viewBox="0 0 16 16"><line x1="0" y1="8.5" x2="16" y2="8.5" stroke-width="1"/></svg>"#;
    let img = hard_rasterize(&Drawing::parse(line, "").unwrap(), &[], 16, 16).unwrap();
    for x in 0..16 {
        assert_eq!(img.get(x, 8), 1.0);
        assert_eq!(img.get(x, 2), 0.0);
        assert_eq!(img.get(x, 14), 0.0);
    }
    let squares = r#"<svg viewBox="0 0 16 16">
        <polygon points="2,2 14,2 14,14 2,14"/>
        <polygon points="5,5 11,5 11,11 5,11" fill="white"/></svg>"#;
    let img = hard_rasterize(&Drawing::parse(squares, "").unwrap(), &[], 16, 16).unwrap();
    assert_eq!(img.get(8, 8), 0.0);
    assert_eq!(img.get(3, 8), 1.0);
    assert_eq!(img.get(0, 0), 0.0);
    assert!(img.data.iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn sharpening_approaches_hard_raster() {
    let d = assets::robot().unwrap();
    let zero = vec![0.0; d.n_vars()];
    let hard = hard_rasterize(&d, &zero, 64, 64).unwrap();
    let mut last = f64::INFINITY;
    for st in [5.0, 20.0, 50.0] {
        let soft = soft_rasterize_values(&d, &zero, &cfg(64, st, true)).unwrap();
        let diff = mean_abs(&soft.data, &hard.data);
        assert!(diff <= last, "s=t={st}: {diff} > {last}");
        last = diff;
    }
    assert!(last < 0.02, "{last}");
}

#[test]
fn integer_translation_shifts_image() {
    let d = assets::robot().unwrap();
    let inner = d.emit_svg();
    let body_start = inner.find('>').unwrap() + 1;
    let body_end = inner.rfind("</svg>").unwrap();
    let shifted = format!(
        r#"<svg viewBox="0 0 64 64"><g transform="matrix(1 0 0 1 3 -2)">{}</g></svg>"#,
        &inner[body_start..body_end]
    );
    let moved = Drawing::parse(&shifted, assets::ROBOT_BOUNDS).unwrap();
    let c = cfg(64, 20.0, true);
    let a = soft_rasterize_values(&d, &vec![0.0; d.n_vars()], &c).unwrap();
    let b = soft_rasterize_values(&moved, &vec![0.0; moved.n_vars()], &c).unwrap();
    for y in 4..58 {
        for x in 4..58 {
            assert!(
                (a.get(x, y) - b.get(x + 3, y - 2)).abs() < 1e-5,
                "({x},{y})"
            );
        }
    }
}

#[test]
fn tape_gradient_matches_finite_differences_at_low_sharpness() {
    let d = assets::robot().unwrap();
    let c = cfg(64, 2.0, true);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let nv = d.n_vars();
    let delta: Vec<f64> = d
        .variables
        .iter()
        .map(|v| rng.gen_range(-0.5..0.5) * v.half_range())
        .collect();
    let w: Vec<f32> = (0..64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::from_vec(delta.iter().map(|&v| v as f32).collect(), &[nv]).unwrap());
    let img = soft_rasterize(&d, &x, &c).unwrap();
    assert_eq!(img.shape(), &[1, 1, 64, 64]);
    let loss = img
        .mul(&Tensor::from_vec(w.clone(), &[1, 1, 64, 64]).unwrap())
        .unwrap()
        .sum();
    let g = tape.backward(&loss).unwrap().wrt(&x);
    let f = |dv: &[f64]| -> f64 {
        let im = soft_rasterize_values(&d, dv, &c).unwrap();
        im.data
            .iter()
            .zip(&w)
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum()
    };
    for j in 0..nv {
        let h = 1e-3 * d.variables[j].half_range().min(1.0);
        let mut p = delta.clone();
        let mut m = delta.clone();
        p[j] += h;
        m[j] -= h;
        let fd = (f(&p) - f(&m)) / (2.0 * h);
        let err = (fd - g[j] as f64).abs() / fd.abs().max(1.0);
        assert!(err < 1e-2, "var {j}: tape {} fd {fd}", g[j]);
    }
}

#[test]
fn batched_rows_match_single_renders() {
    let d = assets::robot().unwrap();
    let nv = d.n_vars();
    let c = cfg(64, 20.0, true);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            d.variables
                .iter()
                .map(|v| rng.gen_range(v.lo..v.hi))
                .collect()
        })
        .collect();
    let flat: Vec<f32> = rows.iter().flatten().map(|&v| v as f32).collect();
    let batch = soft_rasterize(&d, &Tensor::from_vec(flat, &[3, nv]).unwrap(), &c).unwrap();
    assert_eq!(batch.shape(), &[3, 1, 64, 64]);
    for (i, row) in rows.iter().enumerate() {
        let row32: Vec<f64> = row.iter().map(|&v| v as f32 as f64).collect();
        let single = soft_rasterize_values(&d, &row32, &c).unwrap();
        assert_eq!(&batch.data()[i * 4096..(i + 1) * 4096], &single.data[..]);
    }
}

#[test]
fn out_of_bounds_delta_is_rejected() {
    let d = assets::robot().unwrap();
    let mut delta = vec![0.0; d.n_vars()];
    delta[0] = 5.0;
    assert!(hard_rasterize(&d, &delta, 64, 64).is_err());
    assert!(soft_rasterize_values(&d, &delta[1..], &RasterConfig::default()).is_err());
}
