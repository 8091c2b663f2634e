//! Small layer helpers over [`ParamStore`] handles.

use rand::Rng;

use crate::autodiff::{Graph, Init, ParamId, ParamStore, Tensor, Var};

/// Affine map `x W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = Init::XavierUniform {
            fan_in: in_dim,
            fan_out: out_dim,
        };
        Self::with_init(
            store,
            name,
            in_dim,
            out_dim,
            w,
            bias.then_some(Init::Zeros),
            rng,
        )
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        weight: Init,
        bias: Option<Init>,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            weight.tensor(&[in_dim, out_dim], rng),
        );
        let bias = bias.map(|b| store.add(format!("{name}.bias"), b.tensor(&[out_dim], rng)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

/// Row-wise layer normalization with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        g.layer_norm(
            x,
            Some(g.param(self.gamma)),
            Some(g.param(self.beta)),
            Self::EPS,
        )
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dims[0], dims[1], true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dims[1], dims[2], true, rng),
        }
    }

    /// Variant whose output layer starts at zero, so the block is inert at
    /// initialization.
    pub fn zero_out(
        store: &mut ParamStore,
        name: &str,
        dims: [usize; 3],
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dims[0], dims[1], true, rng),
            fc2: Linear::with_init(
                store,
                &format!("{name}.fc2"),
                dims[1],
                dims[2],
                Init::Zeros,
                Some(Init::Zeros),
                rng,
            ),
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn layers_register_named_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "head", [4, 8, 2], &mut rng);
        let ln = LayerNorm::new(&mut store, "norm", 2);
        assert_eq!(
            store.names(),
            [
                "head.fc1.weight",
                "head.fc1.bias",
                "head.fc2.weight",
                "head.fc2.bias",
                "norm.gamma",
                "norm.beta"
            ]
        );
        let g = Graph::with_params(&store);
        let x = g.constant(Tensor::full(&[3, 4], 0.5));
        let y = ln.forward(&g, mlp.forward(&g, x));
        assert_eq!(g.shape(y), vec![3, 2]);
    }

    #[test]
    fn zero_out_mlp_is_inert() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::zero_out(&mut store, "m", [3, 5, 3], &mut rng);
        let g = Graph::with_params(&store);
        let x = g.constant(Tensor::full(&[2, 3], 1.5));
        assert_eq!(g.value(mlp.forward(&g, x)).max_abs(), 0.0);
    }
}
