//! Central finite-difference checks of every tensor op's backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vecmorph::tensor::{Tape, Tensor};

const EPS: f32 = 1e-3;
const TOL: f64 = 1e-3;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Max relative error between the tape gradient of sum(f(x)) and central
/// differences, over every element of every input.
fn check<F>(inputs: &[(Vec<f32>, Vec<usize>)], f: F) -> f64
where
    F: Fn(&[Tensor]) -> Tensor,
{
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(d, s)| tape.leaf(&Tensor::from_vec(d.clone(), s).unwrap()))
        .collect();
    let loss = f(&leaves).sum();
    let grads = tape.backward(&loss).unwrap();

    let eval = |vals: &[(Vec<f32>, Vec<usize>)]| -> f64 {
        let ts: Vec<Tensor> = vals
            .iter()
            .map(|(d, s)| Tensor::from_vec(d.clone(), s).unwrap())
            .collect();
        f(&ts).data().iter().map(|&v| v as f64).sum()
    };

    let mut worst = 0f64;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(leaf);
        for j in 0..inputs[k].0.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[k].0[j] += EPS;
            minus[k].0[j] -= EPS;
            let h = plus[k].0[j] as f64 - minus[k].0[j] as f64;
            let fd = (eval(&plus) - eval(&minus)) / h;
            worst = worst.max(rel_err(analytic[j] as f64, fd));
        }
    }
    worst
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values kept at least 4·EPS away from 0 so kinks are never crossed.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(0.01f32..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn rand_shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    let caps = [4, 4, 8, 8];
    (0..rank)
        .map(|i| rng.gen_range(1..=caps[4 - rank + i]))
        .collect()
}

fn seeds() -> impl Iterator<Item = ChaCha8Rng> {
    (0..6u64).map(ChaCha8Rng::seed_from_u64)
}

#[test]
fn elementwise_binary_with_broadcast() {
    for mut rng in seeds() {
        let rank = rng.gen_range(1..=4);
        let a_shape = rand_shape(&mut rng, rank);
        let drop = rng.gen_range(0..rank);
        let b_shape: Vec<usize> = a_shape
            .iter()
            .map(|&d| if rng.gen_bool(0.4) { 1 } else { d })
            .skip(drop)
            .collect();
        let na: usize = a_shape.iter().product();
        let nb: usize = b_shape.iter().product();
        let inputs = vec![
            (rand_vec(&mut rng, na, -2.0, 2.0), a_shape.clone()),
            (rand_vec(&mut rng, nb, -2.0, 2.0), b_shape.clone()),
        ];
        assert!(check(&inputs, |x| x[0].add(&x[1]).unwrap()) < TOL);
        assert!(check(&inputs, |x| x[0].sub(&x[1]).unwrap()) < TOL);
        assert!(check(&inputs, |x| x[0].mul(&x[1]).unwrap()) < TOL);
        assert!(check(&inputs, |x| x[1].mul(&x[0]).unwrap()) < TOL);
    }
}

#[test]
fn elementwise_unary() {
    for mut rng in seeds() {
        let rank = rng.gen_range(1..=4);
        let shape = rand_shape(&mut rng, rank);
        let n: usize = shape.iter().product();
        let inputs = vec![(away_from_zero(&mut rng, n), shape)];
        assert!(check(&inputs, |x| x[0].relu()) < TOL);
        assert!(check(&inputs, |x| x[0].sigmoid()) < TOL);
        assert!(check(&inputs, |x| x[0].softplus()) < TOL);
        assert!(check(&inputs, |x| x[0].affine_scalar(-1.7, 0.3)) < TOL);
        // kinks of clamp01 at 0 and 1: shift inputs into (0.01, 0.99) or outside
        let shifted: Vec<(Vec<f32>, Vec<usize>)> = inputs
            .iter()
            .map(|(d, s)| (d.iter().map(|v| v * 0.32 + 0.5).collect(), s.clone()))
            .collect();
        assert!(check(&shifted, |x| x[0].clamp01()) < TOL);
    }
}

#[test]
fn reductions_and_layout() {
    for mut rng in seeds() {
        let shape = rand_shape(&mut rng, 4);
        let n: usize = shape.iter().product();
        let inputs = vec![(rand_vec(&mut rng, n, -1.0, 1.0), shape.clone())];
        let w = Tensor::from_vec(rand_vec(&mut rng, n, -1.0, 1.0), &shape).unwrap();
        assert!(check(&inputs, |x| x[0].mean()) < TOL);
        assert!(check(&inputs, |x| x[0].mul(&w).unwrap().sum()) < TOL);
        let flat = [n];
        assert!(
            check(&inputs, |x| x[0]
                .reshape(&flat)
                .unwrap()
                .mul(&w.reshape(&flat).unwrap())
                .unwrap())
                < TOL
        );
        let axis = rng.gen_range(0..4);
        let len = shape[axis];
        let start = rng.gen_range(0..len);
        let end = rng.gen_range(start + 1..=len);
        assert!(
            check(&inputs, |x| {
                x[0].mul(&w).unwrap().slice(axis, start, end).unwrap()
            }) < TOL
        );
        let other = (rand_vec(&mut rng, n, -1.0, 1.0), shape.clone());
        let pair = vec![inputs[0].clone(), other];
        assert!(
            check(&pair, |x| {
                Tensor::concat(&[x[0].clone(), x[1].mul(&x[1]).unwrap()], axis).unwrap()
            }) < TOL
        );
    }
}

#[test]
fn matmul_and_transpose() {
    for mut rng in seeds() {
        let (m, k, n) = (
            rng.gen_range(1..=8),
            rng.gen_range(1..=8),
            rng.gen_range(1..=8),
        );
        let inputs = vec![
            (rand_vec(&mut rng, m * k, -1.0, 1.0), vec![m, k]),
            (rand_vec(&mut rng, k * n, -1.0, 1.0), vec![k, n]),
        ];
        assert!(check(&inputs, |x| x[0].matmul(&x[1]).unwrap().sigmoid()) < TOL);
        assert!(
            check(&inputs, |x| {
                x[1].transpose()
                    .unwrap()
                    .matmul(&x[0].transpose().unwrap())
                    .unwrap()
            }) < TOL
        );
    }
}

#[test]
fn conv2d_all_inputs() {
    for mut rng in seeds() {
        let shape = rand_shape(&mut rng, 4);
        let (c, o) = (shape[1], rng.gen_range(1..=4));
        let k = if rng.gen_bool(0.7) { 3 } else { 1 };
        let n: usize = shape.iter().product();
        let inputs = vec![
            (rand_vec(&mut rng, n, -1.0, 1.0), shape.clone()),
            (
                rand_vec(&mut rng, o * c * k * k, -1.0, 1.0),
                vec![o, c, k, k],
            ),
            (rand_vec(&mut rng, o, -1.0, 1.0), vec![o]),
        ];
        let err = check(&inputs, |x| {
            x[0].conv2d(&x[1], Some(&x[2])).unwrap().sigmoid()
        });
        assert!(err < TOL, "conv2d rel err {err} for {shape:?}");
    }
}

#[test]
fn max_pool() {
    for mut rng in seeds() {
        let mut shape = rand_shape(&mut rng, 4);
        shape[2] = shape[2].max(2);
        shape[3] = shape[3].max(2);
        let n: usize = shape.iter().product();
        // distinct values spaced well beyond 2·EPS so no window ties flip
        let mut vals: Vec<f32> = (0..n).map(|i| i as f32 * 0.01).collect();
        for i in (1..n).rev() {
            vals.swap(i, rng.gen_range(0..=i));
        }
        let inputs = vec![(vals, shape)];
        assert!(check(&inputs, |x| x[0].max_pool2d().unwrap()) < TOL);
    }
}

#[test]
fn grid_sample_wrt_image() {
    for mut rng in seeds() {
        let shape = rand_shape(&mut rng, 4);
        let n: usize = shape.iter().product();
        let transforms: Vec<[f64; 9]> = (0..shape[0])
            .map(|_| {
                let a: f64 = rng.gen_range(-0.3..0.3);
                let s: f64 = rng.gen_range(0.8..1.2);
                [
                    s * a.cos(),
                    -s * a.sin(),
                    rng.gen_range(-1.0..1.0),
                    s * a.sin(),
                    s * a.cos(),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-0.01..0.01),
                    rng.gen_range(-0.01..0.01),
                    1.0,
                ]
            })
            .collect();
        let inputs = vec![(rand_vec(&mut rng, n, 0.0, 1.0), shape.clone())];
        let (oh, ow) = (shape[2], shape[3]);
        assert!(
            check(&inputs, |x| {
                x[0].affine_grid_sample(&transforms, oh, ow)
                    .unwrap()
                    .mul(&x[0])
                    .unwrap()
            }) < TOL
        );
    }
}

#[test]
fn five_op_compositions() {
    for mut rng in seeds() {
        let (m, k) = (rng.gen_range(1..=4), rng.gen_range(1..=8));
        let inputs = vec![
            (rand_vec(&mut rng, m * k, -1.0, 1.0), vec![m, k]),
            (rand_vec(&mut rng, k * 3, -1.0, 1.0), vec![k, 3]),
            (rand_vec(&mut rng, 3, -1.0, 1.0), vec![3]),
        ];
        let err = check(&inputs, |x| {
            let h = x[0].matmul(&x[1]).unwrap();
            let h = h.add(&x[2]).unwrap();
            let h = h.sigmoid();
            let h = h.mul(&h).unwrap();
            h.softplus()
        });
        assert!(err < TOL, "composition rel err {err}");
    }
}
