//! Randomized finite-difference cases for every tape primitive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check;
use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-6;
const FLOOR: f64 = 1e-4;

type Builder = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;
type Case = fn(&mut ChaCha8Rng, u64) -> (Vec<Tensor<f64>>, Builder);

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// Values in [−1, 1] kept at least `gap` away from zero (kinks of relu etc.).
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Contract the output with a fixed random weight so every output element matters.
fn weighted(seed: u64, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> Builder {
    Box::new(move |tape, vars| {
        let y = f(tape, vars)?;
        let shape = tape.shape(y).to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let w = tape.constant(uniform(&shape, -1.0, 1.0, &mut rng));
        let p = tape.mul(y, w)?;
        tape.sum(p)
    })
}

fn binary(rng: &mut ChaCha8Rng, seed: u64, op: u8) -> (Vec<Tensor<f64>>, Builder) {
    let (r, c) = (dim(rng, 1, 4), dim(rng, 1, 4));
    let a = uniform(&[r, c], -1.0, 1.0, rng);
    // half of the cases broadcast a row vector
    let bshape = if seed % 2 == 0 { vec![r, c] } else { vec![c] };
    let b = if op == 3 { away_from_zero(&bshape, 0.3, rng) } else { uniform(&bshape, -1.0, 1.0, rng) };
    let f = weighted(seed, move |t, v| match op {
        0 => t.add(v[0], v[1]),
        1 => t.sub(v[0], v[1]),
        2 => t.mul(v[0], v[1]),
        _ => t.div(v[0], v[1]),
    });
    (vec![a, b], f)
}

fn unary(rng: &mut ChaCha8Rng, seed: u64, lo: f64, op: fn(&mut Tape<f64>, Var) -> Result<Var>) -> (Vec<Tensor<f64>>, Builder) {
    let a = uniform(&[dim(rng, 1, 4), dim(rng, 1, 4)], lo, 1.0, rng);
    (vec![a], weighted(seed, move |t, v| op(t, v[0])))
}

/// Name and case generator of every primitive.
pub fn primitives() -> Vec<(&'static str, Case)> {
    vec![
        ("add", |rng, seed| binary(rng, seed, 0)),
        ("sub", |rng, seed| binary(rng, seed, 1)),
        ("mul", |rng, seed| binary(rng, seed, 2)),
        ("div", |rng, seed| binary(rng, seed, 3)),
        ("scale", |rng, seed| unary(rng, seed, -1.0, |t, v| t.scale(v, -1.7))),
        ("add_scalar", |rng, seed| unary(rng, seed, -1.0, |t, v| t.add_scalar(v, 0.4))),
        ("neg", |rng, seed| unary(rng, seed, -1.0, |t, v| t.neg(v))),
        ("square", |rng, seed| unary(rng, seed, -1.0, |t, v| t.square(v))),
        ("matmul", |rng, seed| {
            let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            let (a, b) = if seed % 2 == 0 {
                (uniform(&[m, k], -1.0, 1.0, rng), uniform(&[k, n], -1.0, 1.0, rng))
            } else {
                let bt = dim(rng, 1, 3);
                (uniform(&[bt, m, k], -1.0, 1.0, rng), uniform(&[bt, k, n], -1.0, 1.0, rng))
            };
            (vec![a, b], weighted(seed, |t, v| t.matmul(v[0], v[1])))
        }),
        ("transpose", |rng, seed| {
            let a = uniform(&[dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4)], -1.0, 1.0, rng);
            (vec![a], weighted(seed, |t, v| t.transpose(v[0])))
        }),
        ("permute", |rng, seed| {
            let a = uniform(&[dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)], -1.0, 1.0, rng);
            (vec![a], weighted(seed, |t, v| t.permute(v[0], &[1, 2, 0])))
        }),
        ("reshape", |rng, seed| {
            let (r, c) = (dim(rng, 1, 4), dim(rng, 1, 4));
            let a = uniform(&[r, c], -1.0, 1.0, rng);
            (vec![a], weighted(seed, move |t, v| t.reshape(v[0], &[c, r])))
        }),
        ("concat", |rng, seed| {
            let r = dim(rng, 1, 3);
            let a = uniform(&[r, dim(rng, 1, 3)], -1.0, 1.0, rng);
            let b = uniform(&[r, dim(rng, 1, 3)], -1.0, 1.0, rng);
            (vec![a, b], weighted(seed, |t, v| t.concat(&[v[0], v[1]], 1)))
        }),
        ("slice", |rng, seed| {
            let n = dim(rng, 2, 6);
            let a = uniform(&[2, n, 2], -1.0, 1.0, rng);
            let start = rng.random_range(0..n - 1);
            let end = rng.random_range(start + 1..=n);
            (vec![a], weighted(seed, move |t, v| t.slice(v[0], 1, start, end)))
        }),
        ("embedding", |rng, seed| {
            let rows = dim(rng, 2, 5);
            let table = uniform(&[rows, dim(rng, 1, 4)], -1.0, 1.0, rng);
            let idx: Vec<usize> = (0..dim(rng, 1, 6)).map(|_| rng.random_range(0..rows)).collect();
            (vec![table], weighted(seed, move |t, v| t.embedding(v[0], &idx)))
        }),
        ("softmax", |rng, seed| {
            let a = uniform(&[dim(rng, 1, 3), dim(rng, 2, 5)], -1.0, 1.0, rng);
            (vec![a], weighted(seed, |t, v| t.softmax(v[0])))
        }),
        ("layer_norm", |rng, seed| {
            let a = uniform(&[dim(rng, 1, 3), dim(rng, 2, 6)], -1.0, 1.0, rng);
            (vec![a], weighted(seed, |t, v| t.layer_norm(v[0])))
        }),
        ("mean", |rng, seed| {
            let a = uniform(&[dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 3)], -1.0, 1.0, rng);
            let ax = rng.random_range(0..3);
            (vec![a], weighted(seed, move |t, v| if seed % 3 == 0 { t.mean(v[0]) } else { t.mean_axis(v[0], ax) }))
        }),
        ("sum", |rng, seed| {
            let a = uniform(&[dim(rng, 1, 3), dim(rng, 1, 4)], -1.0, 1.0, rng);
            let ax = rng.random_range(0..2);
            (vec![a], weighted(seed, move |t, v| if seed % 3 == 0 { t.sum(v[0]) } else { t.sum_axis(v[0], ax) }))
        }),
        ("variance", |rng, seed| {
            let a = uniform(&[dim(rng, 1, 3), dim(rng, 2, 5)], -1.0, 1.0, rng);
            let ax = rng.random_range(0..2);
            (vec![a], weighted(seed, move |t, v| t.variance(v[0], ax)))
        }),
        ("relu", |rng, seed| {
            let a = away_from_zero(&[dim(rng, 1, 4), dim(rng, 1, 4)], 1e-3, rng);
            (vec![a], weighted(seed, |t, v| t.relu(v[0])))
        }),
        ("gelu", |rng, seed| unary(rng, seed, -1.0, |t, v| t.gelu(v))),
        ("sigmoid", |rng, seed| unary(rng, seed, -1.0, |t, v| t.sigmoid(v))),
        ("tanh", |rng, seed| unary(rng, seed, -1.0, |t, v| t.tanh(v))),
        ("exp", |rng, seed| unary(rng, seed, -1.0, |t, v| t.exp(v))),
        ("log", |rng, seed| unary(rng, seed, 0.1, |t, v| t.log(v))),
        ("power", |rng, seed| {
            let a = uniform(&[dim(rng, 1, 4), dim(rng, 1, 4)], 0.1, 1.0, rng);
            let p = rng.random_range(-2.0..3.0);
            (vec![a], weighted(seed, move |t, v| t.powf(v[0], p)))
        }),
        ("dropout_mask", |rng, seed| {
            let shape = [dim(rng, 1, 4), dim(rng, 1, 4)];
            let a = uniform(&shape, -1.0, 1.0, rng);
            let mask: Vec<f64> = (0..a.numel()).map(|_| if rng.random_bool(0.3) { 0.0 } else { 1.0 / 0.7 }).collect();
            (vec![a], weighted(seed, move |t, v| t.dropout_with_mask(v[0], mask.clone())))
        }),
        ("conv1d", |rng, seed| {
            let (b, ci, co) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            let k = [1, 2, 3][rng.random_range(0..3)];
            let dil = dim(rng, 1, 2);
            let len = dim(rng, dil * (k - 1) + 1, 8);
            let x = uniform(&[b, ci, len], -1.0, 1.0, rng);
            let w = uniform(&[co, ci, k], -1.0, 1.0, rng);
            let (pl, pr) = (rng.random_range(0..3), rng.random_range(0..2));
            let stride = dim(rng, 1, 2);
            (vec![x, w], weighted(seed, move |t, v| t.conv1d(v[0], v[1], pl, pr, dil, stride)))
        }),
        ("conv1d_same", |rng, seed| {
            let (ci, co) = (dim(rng, 1, 3), dim(rng, 1, 3));
            let k = dim(rng, 1, 4);
            let x = uniform(&[dim(rng, 1, 2), ci, dim(rng, 1, 8)], -1.0, 1.0, rng);
            let w = uniform(&[co, ci, k], -1.0, 1.0, rng);
            (vec![x, w], weighted(seed, |t, v| t.conv1d_same(v[0], v[1])))
        }),
        ("conv2d", |rng, seed| {
            let (ci, co) = (dim(rng, 1, 2), dim(rng, 1, 2));
            let k = [1, 3, 5][rng.random_range(0..3)];
            let x = uniform(&[1, ci, dim(rng, 1, 4), dim(rng, 1, 5)], -1.0, 1.0, rng);
            let w = uniform(&[co, ci, k, k], -1.0, 1.0, rng);
            (vec![x, w], weighted(seed, |t, v| t.conv2d(v[0], v[1])))
        }),
        ("avg_pool1d", |rng, seed| {
            let len = dim(rng, 2, 9);
            let k = dim(rng, 1, len);
            let s = dim(rng, 1, 3);
            let x = uniform(&[dim(rng, 1, 2), dim(rng, 1, 3), len], -1.0, 1.0, rng);
            (vec![x], weighted(seed, move |t, v| t.avg_pool1d(v[0], k, s)))
        }),
    ]
}

/// Worst relative error of one primitive over `cases` random inputs.
pub fn worst_error(name: &str, case: Case, cases: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(name.bytes().map(u64::from).sum());
    let mut worst = 0.0f64;
    for i in 0..cases {
        let (inputs, f) = case(&mut rng, i as u64);
        worst = worst.max(check(&inputs, STEP, FLOOR, f)?.max_rel_error);
    }
    Ok(worst)
}

/// `(name, worst relative error)` for every primitive.
pub fn run(cases: usize) -> Result<Vec<(&'static str, f64)>> {
    primitives().into_iter().map(|(name, case)| Ok((name, worst_error(name, case, cases)?))).collect()
}
