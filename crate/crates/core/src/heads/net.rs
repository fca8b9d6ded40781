use crate::autodiff::{Graph, NodeId, Tensor};
use crate::nn::{AdaLnResBlock, Linear, ParamStore};

/// Width of the sinusoidal time features.
pub const TIME_EMBED_DIM: usize = 32;
// Geometric frequencies 1..20; higher ones only add noise at one step.
const MAX_FREQ: f64 = 20.0;

fn frequencies() -> impl Iterator<Item = f64> {
    let half = TIME_EMBED_DIM / 2;
    (0..half).map(move |k| MAX_FREQ.powf(k as f64 / (half - 1) as f64))
}

/// `[sin(f_k t), cos(f_k t)]` features, one row per time.
pub fn time_embedding(ts: &[f64]) -> Tensor {
    let mut data = Vec::with_capacity(ts.len() * TIME_EMBED_DIM);
    for &t in ts {
        data.extend(frequencies().map(|f| (f * t).sin()));
        data.extend(frequencies().map(|f| (f * t).cos()));
    }
    Tensor::from_vec(&[ts.len(), TIME_EMBED_DIM], data)
}

/// Derivative of [`time_embedding`] with respect to `t`.
pub fn time_embedding_derivative(ts: &[f64]) -> Tensor {
    let mut data = Vec::with_capacity(ts.len() * TIME_EMBED_DIM);
    for &t in ts {
        data.extend(frequencies().map(|f| f * (f * t).cos()));
        data.extend(frequencies().map(|f| -f * (f * t).sin()));
    }
    Tensor::from_vec(&[ts.len(), TIME_EMBED_DIM], data)
}

/// Input projection → K AdaLN ResBlocks → output projection.
///
/// The condition vector is `SiLU(Σ_j P_j c_j)` over the condition parts.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadNet {
    pub prefix: String,
    pub main_dim: usize,
    pub cond_dims: Vec<usize>,
    pub width: usize,
    pub depth: usize,
    pub out_dim: usize,
}

impl HeadNet {
    fn input(&self) -> Linear {
        Linear::new(format!("{}.in", self.prefix), self.main_dim, self.width)
    }

    fn cond(&self, j: usize) -> Linear {
        Linear::new(format!("{}.cond{j}", self.prefix), self.cond_dims[j], self.width)
    }

    fn block(&self, k: usize) -> AdaLnResBlock {
        AdaLnResBlock::new(format!("{}.block{k}", self.prefix), self.width, self.width)
    }

    pub fn output(&self) -> Linear {
        Linear::new(format!("{}.out", self.prefix), self.width, self.out_dim).zero_init()
    }

    pub fn register(&self, store: &mut ParamStore) {
        self.input().register(store);
        for j in 0..self.cond_dims.len() {
            self.cond(j).register(store);
        }
        for k in 0..self.depth {
            self.block(k).register(store);
        }
        self.output().register(store);
    }

    /// `conds[0]` fixes the row count; later parts may have a single row and
    /// are broadcast. With `broadcast_main`, a single-row `main` is spread over
    /// the condition rows.
    pub fn forward(&self, g: &mut Graph, main: NodeId, conds: &[NodeId], broadcast_main: bool) -> NodeId {
        assert_eq!(conds.len(), self.cond_dims.len(), "condition part count");
        let mut c = self.cond(0).forward(g, conds[0]);
        for (j, &part) in conds.iter().enumerate().skip(1) {
            let p = self.cond(j).forward(g, part);
            c = g.add_broadcast(c, p);
        }
        let c = g.silu(c);
        let mut x = self.input().forward(g, main);
        if broadcast_main {
            x = g.broadcast(x, c);
        }
        for k in 0..self.depth {
            x = self.block(k).forward(g, x, c);
        }
        let x = g.layer_norm(x);
        self.output().forward(g, x)
    }
}

/// Row sums of an `[n, cols]` node as `[n, 1]`.
pub fn row_sum(g: &mut Graph, x: NodeId, cols: usize) -> NodeId {
    let ones = g.constant(Tensor::full(&[cols, 1], 1.0));
    g.matmul(x, ones)
}

/// Per-row mean squared error `[n, 1]` between `pred` and the constant `target`.
pub fn row_mse(g: &mut Graph, pred: NodeId, target: NodeId, cols: usize) -> NodeId {
    let diff = g.sub(pred, target);
    let sq = g.mul(diff, diff);
    let s = row_sum(g, sq, cols);
    g.scale(s, 1.0 / cols as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_derivative_matches_finite_differences() {
        let ts = [0.0, 0.013, 0.5, 0.97];
        let h = 1e-6;
        let plus: Vec<f64> = ts.iter().map(|t| t + h).collect();
        let minus: Vec<f64> = ts.iter().map(|t| t - h).collect();
        let (p, m) = (time_embedding(&plus), time_embedding(&minus));
        let d = time_embedding_derivative(&ts);
        for i in 0..d.len() {
            let fd = (p.data()[i] - m.data()[i]) / (2.0 * h);
            assert!((fd - d.data()[i]).abs() <= 1e-6 * d.data()[i].abs().max(1.0));
        }
    }
}
