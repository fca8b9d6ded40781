use crate::autodiff::{Graph, NodeId};

use super::{Init, Linear, NnError, ParamStore};

/// Pre-norm bidirectional transformer encoder block (no attention mask).
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

/// Node handles produced by one block application.
#[derive(Debug, Clone, Copy)]
pub struct BlockNodes {
    pub output: NodeId,
    /// `[B·heads, T, T]` attention weights.
    pub attention: NodeId,
}

impl TransformerBlock {
    pub fn new(name: impl Into<String>, dim: usize, heads: usize) -> Result<Self, NnError> {
        if heads == 0 || dim % heads != 0 {
            return Err(NnError::Config(format!(
                "hidden dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            name: name.into(),
            dim,
            heads,
            mlp_ratio: 4,
        })
    }

    fn p(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.name)
    }

    fn qkv_weight(&self) -> String {
        self.p("attn.qkv.weight")
    }

    pub fn attn_out(&self) -> Linear {
        Linear::new(self.p("attn.out"), self.dim, self.dim)
    }

    pub fn fc1(&self) -> Linear {
        Linear::new(self.p("mlp.fc1"), self.dim, self.mlp_ratio * self.dim)
    }

    pub fn fc2(&self) -> Linear {
        Linear::new(self.p("mlp.fc2"), self.mlp_ratio * self.dim, self.dim)
    }

    pub fn register(&self, store: &mut ParamStore) {
        for ln in ["ln1", "ln2"] {
            store.register(&self.p(&format!("{ln}.scale")), &[self.dim], Init::Ones);
            store.register(&self.p(&format!("{ln}.shift")), &[self.dim], Init::Zeros);
        }
        // Keys carry no bias: softmax is invariant to it.
        store.register(&self.qkv_weight(), &[self.dim, 3 * self.dim], Init::KaimingUniform { fan_in: self.dim });
        store.register(&self.p("attn.q.bias"), &[self.dim], Init::Zeros);
        store.register(&self.p("attn.v.bias"), &[self.dim], Init::Zeros);
        self.attn_out().register(store);
        self.fc1().register(store);
        self.fc2().register(store);
    }

    fn affine_norm(&self, g: &mut Graph, x: NodeId, ln: &str) -> NodeId {
        let scale = g.param(&self.p(&format!("{ln}.scale")));
        let shift = g.param(&self.p(&format!("{ln}.shift")));
        let n = g.layer_norm(x);
        let s = g.mul_broadcast(n, scale);
        g.add_broadcast(s, shift)
    }

    /// `x`: `[batch, tokens, dim]`.
    pub fn forward(&self, g: &mut Graph, x: NodeId, batch: usize, tokens: usize) -> BlockNodes {
        let (d, h) = (self.dim, self.heads);
        let dh = d / h;
        let a = self.affine_norm(g, x, "ln1");
        let wqkv = g.param(&self.qkv_weight());
        let qkv = g.matmul(a, wqkv);
        let q_bias = g.param(&self.p("attn.q.bias"));
        let v_bias = g.param(&self.p("attn.v.bias"));
        let split = |g: &mut Graph, k: usize, bias: Option<NodeId>| {
            let mut part = g.slice(qkv, 2, k * d, (k + 1) * d);
            if let Some(b) = bias {
                part = g.add_broadcast(part, b);
            }
            let part = g.reshape(part, &[batch, tokens, h, dh]);
            let part = g.permute(part, &[0, 2, 1, 3]);
            g.reshape(part, &[batch * h, tokens, dh])
        };
        let q = split(g, 0, Some(q_bias));
        let k = split(g, 1, None);
        let v = split(g, 2, Some(v_bias));
        let scores = g.batch_matmul(q, k, true);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attention = g.softmax(scores);
        let mixed = g.batch_matmul(attention, v, false);
        let mixed = g.reshape(mixed, &[batch, h, tokens, dh]);
        let mixed = g.permute(mixed, &[0, 2, 1, 3]);
        let mixed = g.reshape(mixed, &[batch, tokens, d]);
        let attn = self.attn_out().forward(g, mixed);
        let x1 = g.add(x, attn);

        let m = self.affine_norm(g, x1, "ln2");
        let m = self.fc1().forward(g, m);
        let m = g.silu(m);
        let m = self.fc2().forward(g, m);
        let output = g.add(x1, m);
        BlockNodes { output, attention }
    }
}
