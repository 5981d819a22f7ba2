//! Every differentiable graph operation as a scalar function of random
//! parameters, for finite-difference checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tailshare::autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use tailshare::seed::{gauss, rng_for};
use tailshare::Result;

pub const N: usize = usize::MAX;
pub const K: usize = usize::MAX - 1;

pub type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    /// Input shapes; [`N`] and [`K`] stand for the case's random row count
    /// and width.
    pub shapes: &'static [(usize, usize)],
    pub build: Build,
}

/// Random standard-normal inputs for a case, `n` in `2..=6`, `k` in `2..=8`.
pub fn inputs(case: &OpCase, seed: u64) -> (ParamStore, Vec<ParamId>) {
    let mut rng = rng_for(seed, case.name);
    let n = rng.random_range(2..=6);
    let k = rng.random_range(2..=8);
    let mut store = ParamStore::new();
    let ids = case
        .shapes
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| {
            let pick = |d: usize| match d {
                N => n,
                K => k,
                d => d,
            };
            let (r, c) = (pick(r), pick(c));
            let data = (0..r * c).map(|_| value(&mut rng)).collect();
            store.add(format!("{}.{i}", case.name), Tensor::new(r, c, data).expect("shape"))
        })
        .collect();
    (store, ids)
}

fn value(rng: &mut ChaCha8Rng) -> f64 {
    // Keep clear of the relu kink and other non-smooth points.
    loop {
        let v = gauss(rng);
        if v.abs() > 1e-3 {
            return v;
        }
    }
}

/// `sum(out * w)` with fixed pseudo-random weights, so every output
/// coordinate reaches the loss with a distinct coefficient.
pub fn reduce(g: &mut Graph, out: Var) -> Result<Var> {
    let (r, c) = g.value(out).shape();
    let w: Vec<f64> = (0..r * c).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 10.0).collect();
    let w = g.constant(Tensor::new(r, c, w)?);
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

pub fn loss(case: &OpCase, g: &mut Graph, store: &ParamStore, ids: &[ParamId]) -> Result<Var> {
    let vars: Vec<Var> = ids.iter().map(|&p| g.param(store, p)).collect();
    let out = (case.build)(g, &vars)?;
    reduce(g, out)
}

fn positive(g: &mut Graph, x: Var) -> Var {
    let s = g.square(x);
    g.add_const(s, 0.5)
}

pub fn cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "add", shapes: &[(3, 4), (3, 4)], build: |g, v| g.add(v[0], v[1]) },
        OpCase { name: "sub", shapes: &[(3, 4), (3, 4)], build: |g, v| g.sub(v[0], v[1]) },
        OpCase { name: "mul", shapes: &[(3, 4), (3, 4)], build: |g, v| g.mul(v[0], v[1]) },
        OpCase { name: "mul_scalar", shapes: &[(3, 4), (1, 1)], build: |g, v| g.mul_scalar(v[0], v[1]) },
        OpCase { name: "mul_rows", shapes: &[(N, 4), (N, 1)], build: |g, v| g.mul_rows(v[0], v[1]) },
        OpCase { name: "scale", shapes: &[(3, 4)], build: |g, v| Ok(g.scale(v[0], -1.7)) },
        OpCase { name: "add_const", shapes: &[(3, 4)], build: |g, v| Ok(g.add_const(v[0], 0.4)) },
        OpCase { name: "one_minus", shapes: &[(3, 4)], build: |g, v| Ok(g.one_minus(v[0])) },
        OpCase { name: "sigmoid", shapes: &[(3, 4)], build: |g, v| Ok(g.sigmoid(v[0])) },
        OpCase { name: "tanh", shapes: &[(3, 4)], build: |g, v| Ok(g.tanh(v[0])) },
        OpCase { name: "relu", shapes: &[(3, 4)], build: |g, v| Ok(g.relu(v[0])) },
        OpCase { name: "exp", shapes: &[(3, 4)], build: |g, v| Ok(g.exp(v[0])) },
        OpCase {
            name: "ln",
            shapes: &[(3, 4)],
            build: |g, v| {
                let p = positive(g, v[0]);
                Ok(g.ln(p))
            },
        },
        OpCase { name: "square", shapes: &[(3, 4)], build: |g, v| Ok(g.square(v[0])) },
        OpCase { name: "sum", shapes: &[(3, 4)], build: |g, v| Ok(g.sum(v[0])) },
        OpCase { name: "mean", shapes: &[(3, 4)], build: |g, v| Ok(g.mean(v[0])) },
        OpCase { name: "dot", shapes: &[(1, K), (1, K)], build: |g, v| g.dot(v[0], v[1]) },
        OpCase { name: "matvec", shapes: &[(5, K), (1, K)], build: |g, v| g.matvec(v[0], v[1]) },
        OpCase { name: "vecmat", shapes: &[(1, 5), (5, K)], build: |g, v| g.vecmat(v[0], v[1]) },
        OpCase { name: "affine", shapes: &[(1, K), (3, K), (1, 3)], build: |g, v| g.affine(v[0], v[1], v[2]) },
        OpCase {
            name: "linear_rows",
            shapes: &[(4, K), (3, K), (1, 3)],
            build: |g, v| g.linear_rows(v[0], v[1], v[2]),
        },
        OpCase { name: "concat", shapes: &[(1, K), (1, 3)], build: |g, v| g.concat(&[v[0], v[1]]) },
        OpCase { name: "row", shapes: &[(4, K)], build: |g, v| g.row(v[0], 2) },
        OpCase { name: "gather_rows", shapes: &[(4, K)], build: |g, v| g.gather_rows(v[0], &[3, 0, 3, 1]) },
        OpCase { name: "stack_rows", shapes: &[(1, K), (1, K)], build: |g, v| g.stack_rows(&[v[0], v[1], v[0]]) },
        OpCase {
            name: "concat_cols",
            shapes: &[(N, 3), (N, K), (N, 1)],
            build: |g, v| g.concat_cols(&[v[0], v[1], v[2]]),
        },
        OpCase { name: "row_dot", shapes: &[(N, 4), (N, 4)], build: |g, v| g.row_dot(v[0], v[1]) },
        OpCase { name: "softmax", shapes: &[(1, K)], build: |g, v| g.softmax(v[0]) },
        OpCase { name: "log_sum_exp", shapes: &[(1, K)], build: |g, v| g.log_sum_exp(v[0]) },
        OpCase { name: "normalize", shapes: &[(1, K)], build: |g, v| g.normalize(v[0]) },
        OpCase { name: "normalize_rows", shapes: &[(N, 5)], build: |g, v| g.normalize_rows(v[0]) },
        OpCase {
            name: "cosine_similarity",
            shapes: &[(1, K), (1, K)],
            build: |g, v| g.cosine_similarity(v[0], v[1]),
        },
        OpCase {
            name: "bce_with_logits",
            shapes: &[(1, 1), (1, 1)],
            build: |g, v| {
                let a = g.bce_with_logits(v[0], 1.0)?;
                let b = g.bce_with_logits(v[1], 0.0)?;
                g.add(a, b)
            },
        },
    ]
}
