//! Dense layers and small perceptrons shared by the model blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, ParamId, ParamKind, ParamStore, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::Identity => x,
        }
    }
}

/// Uniform Glorot initialisation, `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-limit..limit))
}

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, limit: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-limit..limit))
}

/// Affine map applied to every row: `x · W + b`, with `W` stored `in × out`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Dense {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), ParamKind::Weight, glorot(rng, input, output, input, output));
        let bias = bias.then(|| store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(1, output)));
        Self { weight, bias }
    }

    pub fn input_width(&self, store: &ParamStore) -> usize {
        store.get(self.weight).rows()
    }

    pub fn output_width(&self, store: &ParamStore) -> usize {
        store.get(self.weight).cols()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let rows = g.shape(y)[0];
                let bn = g.param(store, b);
                let bb = g.broadcast_rows(bn, rows)?;
                g.add(y, bb)
            }
            None => Ok(y),
        }
    }
}

/// Two-layer perceptron applied along the last dimension:
/// `act(x·W₁ + b₁)·W₂ (+ b₂)`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Dense,
    pub output: Dense,
    pub activation: Activation,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        activation: Activation,
        output_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            hidden: Dense::new(store, &format!("{name}.hidden"), input, hidden, true, rng),
            output: Dense::new(store, &format!("{name}.output"), hidden, output, output_bias, rng),
            activation,
        }
    }

    pub fn input_width(&self, store: &ParamStore) -> usize {
        self.hidden.input_width(store)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let width = self.input_width(store);
        if g.shape(x)[1] != width {
            return Err(Error::ShapeMismatch {
                op: "mlp",
                lhs: g.shape(x),
                rhs: [g.shape(x)[0], width],
            });
        }
        let h = self.hidden.forward(g, store, x)?;
        let h = self.activation.apply(g, h);
        self.output.forward(g, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_applies_rowwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let d = Dense::new(&mut store, "d", 2, 3, true, &mut rng);
        store.set(d.weight, Tensor::from_fn(2, 3, |r, c| (r + c) as f64)).unwrap();
        store.set(d.bias.unwrap(), Tensor::row(vec![1.0, 0.0, -1.0])).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = d.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn mlp_rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let m = Mlp::new(&mut store, "m", 4, 2, 1, Activation::Tanh, true, &mut rng);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(3, 5));
        assert!(m.forward(&mut g, &store, x).is_err());
    }
}
