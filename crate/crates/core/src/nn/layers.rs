use crate::autodiff::{Graph, NodeId};

use super::{Init, ParamStore};

/// Affine map `x · W + b` on the last axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight_init: Init,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            name: name.into(),
            in_dim,
            out_dim,
            weight_init: Init::KaimingUniform { fan_in: in_dim },
        }
    }

    pub fn zero_init(mut self) -> Self {
        self.weight_init = Init::Zeros;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn register(&self, store: &mut ParamStore) {
        store.register(&self.weight_name(), &[self.in_dim, self.out_dim], self.weight_init);
        store.register(&self.bias_name(), &[self.out_dim], Init::Zeros);
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(&self.weight_name());
        let b = g.param(&self.bias_name());
        linear_forward(g, x, w, b)
    }
}

/// `x · weight + bias` with the bias broadcast over rows.
pub fn linear_forward(g: &mut Graph, x: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
    let xw = g.matmul(x, weight);
    g.add_broadcast(xw, bias)
}

/// Residual MLP block modulated by a condition vector through adaptive
/// layer normalisation:
///
/// `x + W2 · SiLU(W1 · (LN(x) ⊙ (1 + γ) + β) + b1) + b2`, with
/// `(γ, β) = split(cond · Wc + bc)`.
///
/// `W2` and the condition projection start at zero so a fresh block is the
/// identity map.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaLnResBlock {
    pub name: String,
    pub width: usize,
    pub cond_dim: usize,
}

impl AdaLnResBlock {
    pub fn new(name: impl Into<String>, width: usize, cond_dim: usize) -> Self {
        Self {
            name: name.into(),
            width,
            cond_dim,
        }
    }

    pub fn fc1(&self) -> Linear {
        Linear::new(format!("{}.fc1", self.name), self.width, self.width)
    }

    pub fn fc2(&self) -> Linear {
        Linear::new(format!("{}.fc2", self.name), self.width, self.width).zero_init()
    }

    pub fn modulation(&self) -> Linear {
        Linear::new(format!("{}.ada", self.name), self.cond_dim, 2 * self.width).zero_init()
    }

    pub fn register(&self, store: &mut ParamStore) {
        self.fc1().register(store);
        self.fc2().register(store);
        self.modulation().register(store);
    }

    /// `x`: `[n, width]`; `cond`: `[n, cond_dim]` or `[1, cond_dim]` (shared by all rows).
    pub fn forward(&self, g: &mut Graph, x: NodeId, cond: NodeId) -> NodeId {
        let w = self.width;
        let gb = self.modulation().forward(g, cond);
        let gamma = g.slice(gb, 1, 0, w);
        let beta = g.slice(gb, 1, w, 2 * w);
        let normed = g.layer_norm(x);
        let scaled = g.mul_broadcast(normed, gamma);
        let shifted = g.add(normed, scaled);
        let modulated = g.add_broadcast(shifted, beta);
        let h = self.fc1().forward(g, modulated);
        let h = g.silu(h);
        let h = self.fc2().forward(g, h);
        g.add(x, h)
    }
}
