#![allow(dead_code)]

use causal_cxr::causal::ScmTable;
use causal_cxr::numcore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Row-major `[m, n]` product by the textbook triple loop.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Random strictly positive table with every domain size in `1..=4`.
pub fn random_scm(rng: &mut ChaCha8Rng) -> ScmTable {
    let (nd, nc, nx, ny) = (
        rng.gen_range(1..=4),
        rng.gen_range(1..=4),
        rng.gen_range(1..=4),
        rng.gen_range(1..=4),
    );
    ScmTable {
        p_d: random_dist(rng, nd),
        p_c_given_d: (0..nd).map(|_| random_dist(rng, nc)).collect(),
        p_x_given_d: (0..nd).map(|_| random_dist(rng, nx)).collect(),
        p_y_given_xc: (0..nx).map(|_| (0..nc).map(|_| random_dist(rng, ny)).collect()).collect(),
    }
}

/// `P(y | do(x))` by summing the truncated factorization
/// `P(d)·P(c|d)·P(y|x,c)` over `d` and `c` with `x` held fixed.
pub fn truncated_factorization(scm: &ScmTable, x: usize) -> Vec<f64> {
    let ny = scm.p_y_given_xc[0][0].len();
    let mut out = vec![0.0; ny];
    for (d, &pd) in scm.p_d.iter().enumerate() {
        for (c, &pc) in scm.p_c_given_d[d].iter().enumerate() {
            for (y, o) in out.iter_mut().enumerate() {
                *o += pd * pc * scm.p_y_given_xc[x][c][y];
            }
        }
    }
    out
}
