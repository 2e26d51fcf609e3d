use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vecmorph::assets;
use vecmorph::codec::{
    bce_loss, bits_tensor, half_ranges, threshold, BitString, Model, ModelConfig,
};
use vecmorph::softraster::{hard_rasterize, soft_rasterize, soft_rasterize_values, RasterConfig};
use vecmorph::tensor::{Tape, Tensor};

fn robot_model(a_std: f64, seed: u64) -> (vecmorph::vecdraw::Drawing, Model) {
    let d = assets::robot().unwrap();
    let cfg = ModelConfig::for_drawing(&d, 24, RasterConfig::default());
    let m = Model::random(cfg, a_std, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (d, m)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn zero_encoder_leaves_drawing_unchanged() {
    let d = assets::robot().unwrap();
    let cfg = ModelConfig::for_drawing(&d, 24, RasterConfig::default());
    let m = Model::zeros(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let b = BitString::random(24, &mut rng);
        let e = m.encode(&d, &b).unwrap();
        assert_eq!(e.flatten_parameters(), d.flatten_parameters());
        assert_eq!(e.emit_svg(), d.emit_svg());
    }
}

#[test]
fn all_zero_bits_encode_nominal_for_any_encoder() {
    let (d, m) = robot_model(3.0, 5);
    assert!(m
        .encode_delta(&d, &BitString::zeros(24))
        .unwrap()
        .iter()
        .all(|&v| v == 0.0));
}

#[test]
fn perturbations_stay_strictly_inside_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..4 {
        // large encoder weights drive the sigmoid into saturation
        let (d, m) = robot_model([0.5, 3.0, 30.0, 300.0][trial], trial as u64);
        for _ in 0..250 {
            let b = BitString::random(24, &mut rng);
            let delta = m.encode_delta(&d, &b).unwrap();
            for (v, x) in d.variables.iter().zip(&delta) {
                let p = v.nominal + x;
                assert!(p > v.lo && p < v.hi, "{p} outside ({}, {})", v.lo, v.hi);
            }
            d.check_delta(&delta).unwrap();
        }
    }
}

#[test]
fn first_bit_moves_along_first_column() {
    let (d, m) = robot_model(0.5, 42);
    let a = &m.encoder_matrix().data;
    let nb = 24;
    let mut first = vec![0u8; nb];
    first[0] = 1;
    let d0 = m.encode_delta(&d, &BitString::zeros(nb)).unwrap();
    let d1 = m.encode_delta(&d, &BitString::new(first).unwrap()).unwrap();
    for (i, v) in d.variables.iter().enumerate() {
        // lo + σ(A_i0)·(hi − lo), relative to the nominal midpoint
        let expect = v.lo + sigmoid(a[i * nb] as f64) * (v.hi - v.lo) - v.nominal;
        assert!((d1[i] - d0[i] - expect).abs() < 1e-12, "variable {i}");
    }
}

#[test]
fn tape_encoder_matches_f64_encoder() {
    let (d, m) = robot_model(1.0, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let bits: Vec<BitString> = (0..4).map(|_| BitString::random(24, &mut rng)).collect();
    let bound = m.bind(None, |_| false);
    let delta = bound
        .encode_delta(&bits_tensor(&bits, 24).unwrap(), &half_ranges(&d))
        .unwrap();
    assert_eq!(delta.shape(), &[4, d.n_vars()]);
    for (row, b) in delta.data().chunks(d.n_vars()).zip(&bits) {
        let exact = m.encode_delta(&d, b).unwrap();
        for (x, y) in row.iter().zip(&exact) {
            assert!((*x as f64 - y).abs() < 1e-5);
        }
    }
}

#[test]
fn encoder_gradient_matches_finite_differences() {
    let (d, m) = robot_model(0.8, 9);
    let bits = bits_tensor(&[BitString::from_hex("a5c3e1", 24).unwrap()], 24).unwrap();
    let hr = half_ranges(&d);
    let weights: Vec<f32> = (0..d.n_vars())
        .map(|i| ((i * 13 % 7) as f32 - 3.0) * 0.1)
        .collect();
    let w = Tensor::from_vec(weights, &[1, d.n_vars()]).unwrap();
    let tape = Tape::new();
    let bound = m.bind(Some(&tape), |n| n == "encoder.A");
    let loss = bound
        .encode_delta(&bits, &hr)
        .unwrap()
        .mul(&w)
        .unwrap()
        .sum();
    let g = tape.backward(&loss).unwrap().wrt(&bound.tensors[0]);
    let a = m.encoder_matrix().data.as_ref().clone();
    let hr = hr.data();
    let eval = |a: &[f64]| -> f64 {
        (0..d.n_vars())
            .map(|i| {
                let x: f64 = (0..24).map(|j| a[i * 24 + j] * bits.data()[j] as f64).sum();
                w.data()[i] as f64 * hr[i] as f64 * (2.0 * sigmoid(x) - 1.0)
            })
            .sum()
    };
    let a64: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    for k in 0..a64.len() {
        let (mut p, mut q) = (a64.clone(), a64.clone());
        p[k] += 1e-6;
        q[k] -= 1e-6;
        let fd = (eval(&p) - eval(&q)) / 2e-6;
        assert!(
            (fd - g[k] as f64).abs() < 1e-5,
            "entry {k}: {fd} vs {}",
            g[k]
        );
    }
}

#[test]
fn first_conv_gradient_matches_finite_differences() {
    let (d, mut m) = robot_model(0.5, 21);
    // biases keep most units away from the relu kink
    for (i, name) in [
        "decoder.conv1.b",
        "decoder.conv2.b",
        "decoder.conv3.b",
        "decoder.fc1.b",
    ]
    .iter()
    .enumerate()
    {
        let k = m.params().iter().position(|p| p.name == *name).unwrap();
        let n = m.params()[k].numel();
        m.set_param(
            k,
            (0..n).map(|j| 0.1 + 0.05 * ((i + j) % 3) as f32).collect(),
        )
        .unwrap();
    }
    // a smooth input keeps max-pool windows free of exact ties
    let soft = RasterConfig {
        s: 1.0,
        t: 2.0,
        ..Default::default()
    };
    let mut img = soft_rasterize_values(&d, &vec![0.0; d.n_vars()], &soft).unwrap();
    for (i, v) in img.data.iter_mut().enumerate() {
        *v += 0.05 * (i as f32 * 0.618).sin();
    }
    let img = img.to_tensor();
    let bits = bits_tensor(&[BitString::from_hex("5a0ff1", 24).unwrap()], 24).unwrap();
    let loss_of = |m: &Model| -> f64 {
        // naive f64 loss over the logits, finer than the f32 loss value
        let z = m.bind(None, |_| false).decode_logits(&img).unwrap();
        let n = z.numel() as f64;
        z.data()
            .iter()
            .zip(bits.data())
            .map(|(&z, &b)| (z as f64).exp().ln_1p() - b as f64 * z as f64)
            .sum::<f64>()
            / n
    };
    let tape = Tape::new();
    let bound = m.bind(Some(&tape), |n| n == "decoder.conv1.w");
    let loss = bce_loss(&bound.decode_logits(&img).unwrap(), &bits).unwrap();
    let analytic = tape.backward(&loss).unwrap().wrt(&bound.tensors[1]);

    let eps = 1e-3f32;
    let w = m.param("decoder.conv1.w").unwrap().data.as_ref().clone();
    let mut fd = Vec::with_capacity(w.len());
    for k in 0..w.len() {
        let mut plus = m.clone();
        let mut minus = m.clone();
        let mut wp = w.clone();
        wp[k] += eps;
        plus.set_param(1, wp).unwrap();
        let mut wm = w.clone();
        wm[k] -= eps;
        minus.set_param(1, wm).unwrap();
        fd.push((loss_of(&plus) - loss_of(&minus)) / (2.0 * eps as f64));
    }
    let diff: f64 = fd
        .iter()
        .zip(&analytic)
        .map(|(a, &b)| (a - b as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(norm > 0.0);
    assert!(diff / norm < 1e-2, "relative error {}", diff / norm);
}

#[test]
fn threshold_examples() {
    assert_eq!(threshold(&[0.5]).bits(), &[0]);
    assert_eq!(threshold(&[0.2, 0.9, 0.500001]).bits(), &[0, 1, 1]);
    let d = assets::robot().unwrap();
    let m = Model::zeros(ModelConfig::for_drawing(&d, 24, RasterConfig::default())).unwrap();
    let img = hard_rasterize(&d, &vec![0.0; d.n_vars()], 64, 64).unwrap();
    assert_eq!(
        m.decode_image(&img).unwrap().threshold(),
        BitString::zeros(24)
    );
}

#[test]
fn bce_examples_and_naive_oracle() {
    let zero = Tensor::zeros(&[1, 4]);
    let b = Tensor::from_vec(vec![0.0, 1.0, 1.0, 0.0], &[1, 4]).unwrap();
    assert!((bce_loss(&zero, &b).unwrap().item() as f64 - std::f64::consts::LN_2).abs() < 1e-6);
    let l = bce_loss(&Tensor::full(&[1], 20.0), &Tensor::full(&[1], 1.0))
        .unwrap()
        .item();
    assert!((l - 2.06e-9).abs() < 1e-10, "{l}");

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z: Vec<f32> = (0..200).map(|_| rng.gen_range(-5.0..5.0)).collect();
    let bits: Vec<f32> = (0..200).map(|_| rng.gen_range(0..2) as f32).collect();
    let naive: f64 = z
        .iter()
        .zip(&bits)
        .map(|(&z, &b)| {
            let p = sigmoid(z as f64);
            -(b as f64 * p.ln() + (1.0 - b as f64) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / 200.0;
    let got = bce_loss(
        &Tensor::from_vec(z, &[2, 100]).unwrap(),
        &Tensor::from_vec(bits, &[2, 100]).unwrap(),
    )
    .unwrap()
    .item();
    assert!((got as f64 - naive).abs() < 1e-5);
    assert!(bce_loss(&zero, &Tensor::zeros(&[1, 3])).is_err());
}

#[test]
fn decode_output_length_and_determinism() {
    let (d, m) = robot_model(0.5, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let imgs: Vec<f32> = (0..3 * 64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
    let t = Tensor::from_vec(imgs, &[3, 1, 64, 64]).unwrap();
    let p1 = m.decode_probits(&t).unwrap();
    let p2 = m.decode_probits(&t).unwrap();
    assert_eq!(p1, p2);
    assert!(p1
        .iter()
        .all(|p| p.0.len() == 24 && p.0.iter().all(|&v| v > 0.0 && v < 1.0)));
    let b = BitString::random(24, &mut rng);
    assert_eq!(
        m.encode_delta(&d, &b).unwrap(),
        m.encode_delta(&d, &b).unwrap()
    );
    assert!(m.encode_delta(&d, &BitString::zeros(23)).is_err());
}

#[test]
fn checkpoint_file_round_trip() {
    let (d, m) = robot_model(0.5, 13);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.morf");
    m.save_file(&path).unwrap();
    let back = Model::load_file(&path).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(back.config.capture.keypoints.len(), 8);
    let img = hard_rasterize(&d, &vec![0.0; d.n_vars()], 64, 64).unwrap();
    let (a, b) = (
        m.decode_image(&img).unwrap(),
        back.decode_image(&img).unwrap(),
    );
    assert!(a
        .0
        .iter()
        .zip(&b.0)
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn saturated_tape_encoder_renders_within_bounds() {
    let (d, m) = robot_model(300.0, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bits: Vec<BitString> = (0..16).map(|_| BitString::random(24, &mut rng)).collect();
    let bound = m.bind(None, |_| false);
    let delta = bound
        .encode_delta(&bits_tensor(&bits, 24).unwrap(), &half_ranges(&d))
        .unwrap();
    let cfg = RasterConfig {
        width: 32,
        height: 32,
        ..Default::default()
    };
    assert!(soft_rasterize(&d, &delta, &cfg).is_ok());
    for row in delta.data().chunks(d.n_vars()) {
        let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        d.check_delta(&row).unwrap();
    }
}
