//! Small feed-forward building blocks over [`autograd`](crate::autograd).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::seed::gauss;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

/// Affine layer `W x + b` with `W: out x in`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    /// Glorot-scaled normal weights, zero bias.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| std * gauss(rng))
            .collect();
        Self::from_parts(store, name, Tensor { rows: out_dim, cols: in_dim, data })
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::from_parts(store, name, Tensor::zeros(out_dim, in_dim))
    }

    fn from_parts(store: &mut ParamStore, name: &str, w: Tensor) -> Self {
        let (out_dim, in_dim) = w.shape();
        let w = store.add(format!("{name}.w"), w);
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, out_dim));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.affine(x, w, b)
    }

    pub fn forward_rows(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear_rows(x, w, b)
    }

    pub fn num_scalars(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    /// Plain evaluation without a graph.
    pub fn eval(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = store.value(self.w);
        let b = store.value(self.b);
        (0..self.out_dim)
            .map(|o| b.data[o] + crate::autograd::dot(w.row(o), x))
            .collect()
    }
}

/// Stack of dense layers with one hidden activation and an output activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, hidden, output }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.run(g, store, x, false)
    }

    /// Applies the network independently to every row of `x`.
    pub fn forward_rows(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        self.run(g, store, x, true)
    }

    fn run(&self, g: &mut Graph, store: &ParamStore, mut x: Var, rows: bool) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = if rows {
                layer.forward_rows(g, store, x)?
            } else {
                layer.forward(g, store, x)?
            };
            let act = if i == last { self.output } else { self.hidden };
            x = act.apply(g, x);
        }
        Ok(x)
    }

    pub fn num_scalars(&self) -> usize {
        self.layers.iter().map(Dense::num_scalars).sum()
    }

    pub fn eval(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.eval(store, &h);
            let act = if i == last { self.output } else { self.hidden };
            for v in &mut h {
                *v = match act {
                    Activation::Identity => *v,
                    Activation::Tanh => v.tanh(),
                    Activation::Relu => v.max(0.0),
                    Activation::Sigmoid => crate::autograd::sigmoid(*v),
                };
            }
        }
        h
    }

    pub fn last(&self) -> &Dense {
        self.layers.last().expect("mlp has at least one layer")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn graph_and_plain_eval_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 5, 2], Activation::Tanh, Activation::Sigmoid, &mut rng);
        let x = [0.2, -1.0, 0.7];
        let mut g = Graph::new();
        let xv = g.constant_vec(&x);
        let y = mlp.forward(&mut g, &store, xv).unwrap();
        let plain = mlp.eval(&store, &x);
        for (a, b) in g.data(y).iter().zip(&plain) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(mlp.num_scalars(), store.num_scalars());
    }

    #[test]
    fn row_mode_matches_vector_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[2, 4, 1], Activation::Relu, Activation::Sigmoid, &mut rng);
        let rows = vec![vec![0.1, 0.2], vec![-0.5, 2.0], vec![1.0, -1.0]];
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&rows).unwrap());
        let y = mlp.forward_rows(&mut g, &store, x).unwrap();
        for (r, row) in rows.iter().enumerate() {
            assert!((g.data(y)[r] - mlp.eval(&store, row)[0]).abs() < 1e-15);
        }
    }
}
