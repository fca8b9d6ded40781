//! Continuous sampling heads: the one-step energy-scoring head and the
//! diffusion, flow-matching, shortcut and mean-flow baselines.
//!
//! Every head maps a context vector `h` (plus noise or a noisy state) to a
//! latent through the same AdaLN ResBlock network; they differ in what the
//! network is asked to predict and how samples are drawn from it.

mod energy;
mod net;
mod schedule;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    evaluate, jvp_partial, AutodiffError, Chain, Graph, NodeId, Tensor, TensorMap,
};
use crate::data::normal_matrix;
use crate::data::rng::Stream;
use crate::nn::{NnError, ParamStore};

pub use energy::{energy_loss_m, energy_loss_pair, energy_loss_rows};
pub use net::{row_mse, row_sum, time_embedding, time_embedding_derivative, HeadNet, TIME_EMBED_DIM};
pub use schedule::CosineSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Energy,
    Diffusion,
    Flow,
    Shortcut,
    Meanflow,
}

impl HeadKind {
    pub const ALL: [HeadKind; 5] = [
        HeadKind::Energy,
        HeadKind::Diffusion,
        HeadKind::Flow,
        HeadKind::Shortcut,
        HeadKind::Meanflow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Energy => "energy",
            HeadKind::Diffusion => "diffusion",
            HeadKind::Flow => "flow",
            HeadKind::Shortcut => "shortcut",
            HeadKind::Meanflow => "meanflow",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How noise and context enter the energy head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wiring {
    /// Noise is the block input, the context drives AdaLN.
    NoiseAsInput,
    /// The context is the block input, noise drives AdaLN.
    NoiseAsCondition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub latent_dim: usize,
    /// Defaults to `latent_dim`.
    pub noise_dim: Option<usize>,
    pub context_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub wiring: Wiring,
    /// Model samples per target in the energy loss.
    pub m: usize,
    pub diffusion_steps: usize,
    /// Clamp for the predicted clean sample during ancestral sampling.
    pub denoised_clip: Option<f64>,
    /// Finest shortcut step is `2^-shortcut_levels`.
    pub shortcut_levels: usize,
    pub shortcut_consistency_fraction: f64,
    /// Probability of `r = t` when drawing mean-flow intervals.
    pub meanflow_equal_prob: f64,
    /// Exponent of the adaptive mean-flow loss weight `1/(‖Δ‖² + c)^p`; 0 disables it.
    pub meanflow_adaptive_p: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            kind: HeadKind::Energy,
            latent_dim: 2,
            noise_dim: None,
            context_dim: 16,
            width: 256,
            depth: 3,
            wiring: Wiring::NoiseAsInput,
            m: 2,
            diffusion_steps: 100,
            denoised_clip: Some(1.0),
            shortcut_levels: 6,
            shortcut_consistency_fraction: 0.25,
            meanflow_equal_prob: 0.75,
            meanflow_adaptive_p: 0.0,
        }
    }
}

impl HeadConfig {
    pub fn noise_dim(&self) -> usize {
        self.noise_dim.unwrap_or(self.latent_dim)
    }

    pub fn validate(&self) -> Result<(), HeadError> {
        let bad = |msg: String| Err(HeadError::Config(msg));
        if self.latent_dim == 0 || self.noise_dim() == 0 || self.context_dim == 0 || self.width == 0 {
            return bad("latent_dim, noise_dim, context_dim and width must be positive".into());
        }
        if self.m < 2 {
            return bad(format!("m must be at least 2, got {}", self.m));
        }
        if self.diffusion_steps == 0 {
            return bad("diffusion_steps must be positive".into());
        }
        if let Some(c) = self.denoised_clip {
            if !(c > 0.0) {
                return bad(format!("denoised_clip must be positive, got {c}"));
            }
        }
        if self.shortcut_levels > 16 {
            return bad(format!("shortcut_levels {} exceeds 16", self.shortcut_levels));
        }
        if !(0.0..1.0).contains(&self.shortcut_consistency_fraction) {
            return bad("shortcut_consistency_fraction must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.meanflow_equal_prob) {
            return bad("meanflow_equal_prob must lie in [0, 1]".into());
        }
        if !(self.meanflow_adaptive_p >= 0.0) {
            return bad("meanflow_adaptive_p must be non-negative".into());
        }
        Ok(())
    }

    fn shortcut_tokens(&self) -> usize {
        self.shortcut_levels + 2
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HeadError {
    #[error("invalid head configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("{kind} head cannot sample with {steps} steps")]
    Steps { kind: HeadKind, steps: usize },
    #[error("energy loss needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("non-finite {kind} loss at step {step}")]
    NonFinite { kind: HeadKind, step: u64 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Context node for a loss: `rows` is 1 (shared by every target) or the
/// number of targets. `value` is needed by heads whose targets are computed
/// from the current network (shortcut, mean-flow).
#[derive(Debug, Clone, Copy)]
pub struct Ctx<'a> {
    pub node: NodeId,
    pub rows: usize,
    pub value: Option<&'a Tensor>,
}

/// Loss nodes added to a caller's graph.
#[derive(Debug, Clone)]
pub struct HeadLoss {
    /// `[n, 1]` loss per target row.
    pub per_row: NodeId,
    /// Values for the leaves the loss introduced.
    pub bindings: TensorMap,
    /// Energy head only: the `m` sample nodes, each `[n, d]`.
    pub samples: Vec<NodeId>,
}

fn rows_of(t: &Tensor, start: usize, end: usize) -> Tensor {
    let c = t.cols();
    Tensor::from_vec(&[end - start, c], t.data()[start * c..end * c].to_vec())
}

fn ctx_rows(ctx: &Tensor, start: usize, end: usize) -> Tensor {
    if ctx.rows() == 1 {
        ctx.clone()
    } else {
        rows_of(ctx, start, end)
    }
}

fn row_vector(values: &[f64]) -> Tensor {
    Tensor::from_vec(&[values.len(), 1], values.to_vec())
}

/// `a + c·b` with a per-row coefficient.
fn axpy_rows(a: &Tensor, coef: &[f64], b: &Tensor) -> Tensor {
    let cols = a.cols();
    let mut out = a.clone();
    for (i, row) in out.data_mut().chunks_exact_mut(cols).enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            *v += coef[i] * b.data()[i * cols + k];
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub cfg: HeadConfig,
    pub prefix: String,
    net: HeadNet,
}

impl Head {
    pub fn new(cfg: HeadConfig, prefix: &str) -> Result<Self, HeadError> {
        cfg.validate()?;
        let d = cfg.latent_dim;
        let ctx = cfg.context_dim;
        let (main_dim, cond_dims) = match cfg.kind {
            HeadKind::Energy => match cfg.wiring {
                Wiring::NoiseAsInput => (cfg.noise_dim(), vec![ctx]),
                Wiring::NoiseAsCondition => (ctx, vec![cfg.noise_dim()]),
            },
            HeadKind::Diffusion | HeadKind::Flow => (d, vec![TIME_EMBED_DIM, ctx]),
            HeadKind::Shortcut => (d, vec![TIME_EMBED_DIM, cfg.shortcut_tokens(), ctx]),
            HeadKind::Meanflow => (d, vec![TIME_EMBED_DIM, TIME_EMBED_DIM, ctx]),
        };
        let net = HeadNet {
            prefix: prefix.to_string(),
            main_dim,
            cond_dims,
            width: cfg.width,
            depth: cfg.depth,
            out_dim: d,
        };
        Ok(Self {
            cfg,
            prefix: prefix.to_string(),
            net,
        })
    }

    pub fn kind(&self) -> HeadKind {
        self.cfg.kind
    }

    pub fn net(&self) -> &HeadNet {
        &self.net
    }

    pub fn register(&self, store: &mut ParamStore) {
        self.net.register(store);
    }

    fn leaf(&self, what: &str) -> String {
        format!("{}:{what}", self.prefix)
    }

    /// Network output for the kind's canonical inputs. `state` is the noise
    /// (energy) or the noisy latent; `extra` holds the time/step features in
    /// condition order.
    pub fn forward(&self, g: &mut Graph, ctx: NodeId, state: NodeId, extra: &[NodeId]) -> NodeId {
        if self.cfg.kind == HeadKind::Energy {
            return match self.cfg.wiring {
                Wiring::NoiseAsInput => self.net.forward(g, state, &[ctx], false),
                Wiring::NoiseAsCondition => self.net.forward(g, ctx, &[state], true),
            };
        }
        let mut conds = extra.to_vec();
        conds.push(ctx);
        self.net.forward(g, state, &conds, false)
    }

    fn check_ctx(&self, rows: usize, cols: usize, n: usize) -> Result<(), HeadError> {
        if cols != self.cfg.context_dim || (rows != 1 && rows != n) {
            return Err(HeadError::Dimension(format!(
                "context is [{rows}, {cols}], expected [1 or {n}, {}]",
                self.cfg.context_dim
            )));
        }
        Ok(())
    }

    /// Adds the training loss for targets `y` (`[n, d]`) to `g`.
    pub fn loss(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        ctx: &Ctx,
        y: &Tensor,
        stream: &mut Stream,
    ) -> Result<HeadLoss, HeadError> {
        let d = self.cfg.latent_dim;
        if y.ndim() != 2 || y.cols() != d {
            return Err(HeadError::Dimension(format!(
                "targets have shape {:?}, expected [n, {d}]",
                y.shape()
            )));
        }
        let n = y.rows();
        if ctx.rows != 1 && ctx.rows != n {
            return Err(HeadError::Dimension(format!(
                "context has {} rows for {n} targets",
                ctx.rows
            )));
        }
        let mut bindings = TensorMap::new();
        let y_in = g.input(&self.leaf("y"));
        bindings.insert(self.leaf("y"), y.clone());
        let mut bind = |g: &mut Graph, name: &str, t: Tensor| {
            let node = g.input(&self.leaf(name));
            bindings.insert(self.leaf(name), t);
            node
        };
        match self.cfg.kind {
            HeadKind::Energy => {
                let m = self.cfg.m;
                let noise = normal_matrix(m * n, self.cfg.noise_dim(), &mut stream.child("noise"));
                let noise_in = bind(g, "noise", noise);
                let c = if ctx.rows == 1 || m == 1 {
                    ctx.node
                } else {
                    g.concat(&vec![ctx.node; m], 0)
                };
                let all = self.forward(g, c, noise_in, &[]);
                let samples: Vec<NodeId> =
                    (0..m).map(|i| g.slice(all, 0, i * n, (i + 1) * n)).collect();
                let per_row = energy_loss_rows(g, &samples, y_in)?;
                Ok(HeadLoss {
                    per_row,
                    bindings,
                    samples,
                })
            }
            HeadKind::Diffusion => {
                let sched = CosineSchedule::new(self.cfg.diffusion_steps);
                let t_max = sched.steps();
                let mut ts = stream.child("t");
                let steps: Vec<usize> = (0..n).map(|_| 1 + ts.below(t_max)).collect();
                let eps = normal_matrix(n, d, &mut stream.child("eps"));
                let mut z = y.clone();
                for (i, row) in z.data_mut().chunks_exact_mut(d).enumerate() {
                    let ab = sched.alpha_bar(steps[i]);
                    for (k, v) in row.iter_mut().enumerate() {
                        *v = ab.sqrt() * *v + (1.0 - ab).sqrt() * eps.data()[i * d + k];
                    }
                }
                let tf: Vec<f64> = steps.iter().map(|&t| t as f64 / t_max as f64).collect();
                let z_in = bind(g, "z", z);
                let temb = bind(g, "temb", time_embedding(&tf));
                let eps_in = bind(g, "eps", eps);
                let pred = self.forward(g, ctx.node, z_in, &[temb]);
                let per_row = row_mse(g, pred, eps_in, d);
                Ok(HeadLoss {
                    per_row,
                    bindings,
                    samples: vec![],
                })
            }
            HeadKind::Flow => {
                let mut ts = stream.child("t");
                let t: Vec<f64> = (0..n).map(|_| ts.uniform()).collect();
                let x0 = normal_matrix(n, d, &mut stream.child("x0"));
                let (xt, target) = linear_path(&x0, y, &t);
                let xt_in = bind(g, "xt", xt);
                let temb = bind(g, "temb", time_embedding(&t));
                let tgt = bind(g, "target", target);
                let pred = self.forward(g, ctx.node, xt_in, &[temb]);
                let per_row = row_mse(g, pred, tgt, d);
                Ok(HeadLoss {
                    per_row,
                    bindings,
                    samples: vec![],
                })
            }
            HeadKind::Shortcut => {
                let ctx_value = ctx.value.ok_or_else(|| {
                    HeadError::Config("shortcut loss needs the context value".into())
                })?;
                let (xt, temb, tokens, target) = self.shortcut_targets(params, ctx_value, y, stream)?;
                let xt_in = bind(g, "xt", xt);
                let temb_in = bind(g, "temb", temb);
                let tok_in = bind(g, "step", tokens);
                let tgt = bind(g, "target", target);
                let pred = self.forward(g, ctx.node, xt_in, &[temb_in, tok_in]);
                let per_row = row_mse(g, pred, tgt, d);
                Ok(HeadLoss {
                    per_row,
                    bindings,
                    samples: vec![],
                })
            }
            HeadKind::Meanflow => {
                let ctx_value = ctx.value.ok_or_else(|| {
                    HeadError::Config("mean-flow loss needs the context value".into())
                })?;
                let mf = self.meanflow_targets(params, ctx_value, y, stream)?;
                let z_in = bind(g, "z", mf.z);
                let t_in = bind(g, "temb_t", mf.temb_t);
                let dt_in = bind(g, "temb_dt", mf.temb_dt);
                let tgt = bind(g, "target", mf.target);
                let pred = self.forward(g, ctx.node, z_in, &[t_in, dt_in]);
                let mut per_row = row_mse(g, pred, tgt, d);
                if let Some(w) = mf.weights {
                    let w_in = bind(g, "weight", w);
                    per_row = g.mul(per_row, w_in);
                }
                Ok(HeadLoss {
                    per_row,
                    bindings,
                    samples: vec![],
                })
            }
        }
    }

    /// Graph of the bare network with leaves `main`, `c0`, `c1`, … and the
    /// context `ctx` last.
    fn standalone(&self) -> (Graph, NodeId) {
        let mut g = Graph::new();
        let ctx = g.input("ctx");
        let main = g.input("main");
        let extra: Vec<NodeId> = (0..self.net.cond_dims.len().saturating_sub(1))
            .map(|j| g.input(&format!("c{j}")))
            .collect();
        let out = self.forward(&mut g, ctx, main, &extra);
        (g, out)
    }

    fn standalone_bindings(ctx: &Tensor, main: Tensor, extra: Vec<Tensor>) -> TensorMap {
        let mut m = TensorMap::new();
        m.insert("ctx".into(), ctx.clone());
        m.insert("main".into(), main);
        for (j, t) in extra.into_iter().enumerate() {
            m.insert(format!("c{j}"), t);
        }
        m
    }

    /// Forward pass of the network outside any training graph.
    pub fn run(
        &self,
        params: &ParamStore,
        ctx: &Tensor,
        state: Tensor,
        extra: Vec<Tensor>,
    ) -> Result<Tensor, HeadError> {
        let (g, out) = self.standalone();
        let local = Self::standalone_bindings(ctx, state, extra);
        let e = evaluate(&g, &Chain(vec![params, &local]))?;
        Ok(e.take(out))
    }

    fn step_token(&self, size_exp: Option<usize>, rows: usize) -> Tensor {
        let k = self.cfg.shortcut_tokens();
        let idx = size_exp.map_or(0, |e| e + 1);
        let mut t = Tensor::zeros(&[rows, k]);
        for r in 0..rows {
            t.data_mut()[r * k + idx] = 1.0;
        }
        t
    }

    fn step_tokens(&self, exps: &[Option<usize>]) -> Tensor {
        let k = self.cfg.shortcut_tokens();
        let mut t = Tensor::zeros(&[exps.len(), k]);
        for (r, e) in exps.iter().enumerate() {
            t.data_mut()[r * k + e.map_or(0, |e| e + 1)] = 1.0;
        }
        t
    }

    /// Flow rows use the zero-step token; the last fraction of rows get
    /// self-consistency targets for a dyadic step `D = 2^-j`.
    fn shortcut_targets(
        &self,
        params: &ParamStore,
        ctx: &Tensor,
        y: &Tensor,
        stream: &mut Stream,
    ) -> Result<(Tensor, Tensor, Tensor, Tensor), HeadError> {
        let n = y.rows();
        let levels = self.cfg.shortcut_levels;
        let n_c = ((n as f64) * self.cfg.shortcut_consistency_fraction).round() as usize;
        let n_f = n - n_c;
        let mut ts = stream.child("t");
        let mut js = stream.child("level");
        let mut exps: Vec<Option<usize>> = vec![None; n];
        let mut t = vec![0.0; n];
        let mut half_exp: Vec<Option<usize>> = Vec::with_capacity(n_c);
        let mut half = Vec::with_capacity(n_c);
        for i in 0..n {
            if i < n_f {
                t[i] = ts.uniform();
            } else {
                let j = js.below(levels + 1);
                let big = 0.5f64.powi(j as i32);
                let cells = 1usize << j;
                t[i] = ts.below(cells) as f64 * big;
                exps[i] = Some(j);
                half_exp.push(if j < levels { Some(j + 1) } else { None });
                half.push(big / 2.0);
            }
        }
        let x0 = normal_matrix(n, self.cfg.latent_dim, &mut stream.child("x0"));
        let (xt, flow_target) = linear_path(&x0, y, &t);
        let mut target = flow_target;
        if n_c > 0 {
            let xs = rows_of(&xt, n_f, n);
            let ctx_c = ctx_rows(ctx, n_f, n);
            let tc = &t[n_f..];
            let tok = self.step_tokens(&half_exp);
            let s1 = self.run(params, &ctx_c, xs.clone(), vec![time_embedding(tc), tok.clone()])?;
            let x_mid = axpy_rows(&xs, &half, &s1);
            let t_mid: Vec<f64> = tc.iter().zip(&half).map(|(a, b)| a + b).collect();
            let s2 = self.run(params, &ctx_c, x_mid, vec![time_embedding(&t_mid), tok])?;
            let avg = s1.zip_map(&s2, |a, b| 0.5 * (a + b));
            let d = self.cfg.latent_dim;
            target.data_mut()[n_f * d..].copy_from_slice(avg.data());
        }
        Ok((xt, time_embedding(&t), self.step_tokens(&exps), target))
    }

    fn meanflow_targets(
        &self,
        params: &ParamStore,
        ctx: &Tensor,
        y: &Tensor,
        stream: &mut Stream,
    ) -> Result<MeanflowBatch, HeadError> {
        let n = y.rows();
        let d = self.cfg.latent_dim;
        let mut ts = stream.child("t");
        let mut t = Vec::with_capacity(n);
        let mut r = Vec::with_capacity(n);
        for _ in 0..n {
            let ti = ts.uniform();
            let ri = if ts.bernoulli(self.cfg.meanflow_equal_prob) {
                ti
            } else {
                ti * ts.uniform()
            };
            t.push(ti);
            r.push(ri);
        }
        let eps = normal_matrix(n, d, &mut stream.child("eps"));
        // z_t = (1−t)·y + t·ε, v = ε − y.
        let mut z = y.clone();
        let mut v = y.clone();
        for i in 0..n {
            for k in 0..d {
                let (yi, ei) = (y.data()[i * d + k], eps.data()[i * d + k]);
                z.data_mut()[i * d + k] = (1.0 - t[i]) * yi + t[i] * ei;
                v.data_mut()[i * d + k] = ei - yi;
            }
        }
        let dt: Vec<f64> = t.iter().zip(&r).map(|(a, b)| a - b).collect();
        let temb_t = time_embedding(&t);
        let temb_dt = time_embedding(&dt);

        let (g, out) = self.standalone();
        let local = Self::standalone_bindings(ctx, z.clone(), vec![temb_t.clone(), temb_dt.clone()]);
        let eval = evaluate(&g, &Chain(vec![params, &local]))?;
        // Tangent (v, 0, 1) on (z, r, t): both embeddings move with unit speed.
        let mut tangents = TensorMap::new();
        tangents.insert("main".into(), v.clone());
        tangents.insert("c0".into(), time_embedding_derivative(&t));
        tangents.insert("c1".into(), time_embedding_derivative(&dt));
        let total = jvp_partial(&g, &eval, out, &tangents)?;
        let u = eval.value(out);
        let mut target = v;
        for i in 0..n {
            for k in 0..d {
                target.data_mut()[i * d + k] -= dt[i] * total.data()[i * d + k];
            }
        }
        let weights = if self.cfg.meanflow_adaptive_p > 0.0 {
            let p = self.cfg.meanflow_adaptive_p;
            let w: Vec<f64> = (0..n)
                .map(|i| {
                    let e: f64 = (0..d)
                        .map(|k| (u.data()[i * d + k] - target.data()[i * d + k]).powi(2))
                        .sum();
                    1.0 / (e + 1e-3).powf(p)
                })
                .collect();
            Some(row_vector(&w))
        } else {
            None
        };
        Ok(MeanflowBatch {
            z,
            temb_t,
            temb_dt,
            target,
            weights,
        })
    }

    /// Draws `n` latents for context `ctx` (`[1 or n, context_dim]`).
    pub fn sample(
        &self,
        params: &ParamStore,
        ctx: &Tensor,
        n: usize,
        steps: usize,
        stream: &mut Stream,
    ) -> Result<Tensor, HeadError> {
        self.check_ctx(ctx.rows(), ctx.cols(), n)?;
        let d = self.cfg.latent_dim;
        let kind = self.cfg.kind;
        if steps == 0 {
            return Err(HeadError::Steps { kind, steps });
        }
        match kind {
            HeadKind::Energy => {
                if steps != 1 {
                    return Err(HeadError::Steps { kind, steps });
                }
                let noise = normal_matrix(n, self.cfg.noise_dim(), &mut stream.child("noise"));
                self.run(params, ctx, noise, vec![])
            }
            HeadKind::Diffusion => self.sample_diffusion(params, ctx, n, steps, stream),
            HeadKind::Flow => {
                let mut x = normal_matrix(n, d, &mut stream.child("x0"));
                let h = 1.0 / steps as f64;
                for i in 0..steps {
                    let t = vec![i as f64 * h; n];
                    let v = self.run(params, ctx, x.clone(), vec![time_embedding(&t)])?;
                    x = axpy_rows(&x, &vec![h; n], &v);
                }
                Ok(x)
            }
            HeadKind::Shortcut => {
                let exp = if steps.is_power_of_two() && steps.trailing_zeros() as usize <= self.cfg.shortcut_levels {
                    steps.trailing_zeros() as usize
                } else {
                    return Err(HeadError::Steps { kind, steps });
                };
                let tok = self.step_token(Some(exp), n);
                let mut x = normal_matrix(n, d, &mut stream.child("x0"));
                let h = 1.0 / steps as f64;
                for i in 0..steps {
                    let t = vec![i as f64 * h; n];
                    let s = self.run(params, ctx, x.clone(), vec![time_embedding(&t), tok.clone()])?;
                    x = axpy_rows(&x, &vec![h; n], &s);
                }
                Ok(x)
            }
            HeadKind::Meanflow => {
                let mut z = normal_matrix(n, d, &mut stream.child("x0"));
                for i in 0..steps {
                    let t = 1.0 - i as f64 / steps as f64;
                    let r = 1.0 - (i + 1) as f64 / steps as f64;
                    let u = self.run(
                        params,
                        ctx,
                        z.clone(),
                        vec![time_embedding(&vec![t; n]), time_embedding(&vec![t - r; n])],
                    )?;
                    z = axpy_rows(&z, &vec![-(t - r); n], &u);
                }
                Ok(z)
            }
        }
    }

    fn sample_diffusion(
        &self,
        params: &ParamStore,
        ctx: &Tensor,
        n: usize,
        steps: usize,
        stream: &mut Stream,
    ) -> Result<Tensor, HeadError> {
        let sched = CosineSchedule::new(self.cfg.diffusion_steps);
        let t_max = sched.steps();
        if steps > t_max {
            return Err(HeadError::Steps {
                kind: HeadKind::Diffusion,
                steps,
            });
        }
        let d = self.cfg.latent_dim;
        let ts = sched.respaced(steps);
        let mut x = normal_matrix(n, d, &mut stream.child("xT"));
        for i in (0..ts.len()).rev() {
            let t = ts[i];
            let t_prev = if i == 0 { 0 } else { ts[i - 1] };
            let ab = sched.alpha_bar(t);
            let ab_prev = sched.alpha_bar(t_prev);
            let tf = vec![t as f64 / t_max as f64; n];
            let eps = self.run(params, ctx, x.clone(), vec![time_embedding(&tf)])?;
            let mut x0 = x.zip_map(&eps, |xv, e| (xv - (1.0 - ab).sqrt() * e) / ab.sqrt());
            if let Some(c) = self.cfg.denoised_clip {
                x0 = x0.map(|v| v.clamp(-c, c));
            }
            if t_prev == 0 {
                x = x0;
                break;
            }
            let beta = 1.0 - ab / ab_prev;
            let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
            let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
            let z = normal_matrix(n, d, &mut stream.child_index("step", t as u64));
            let mut next = x0.zip_map(&x, |a, b| c0 * a + ct * b);
            next.add_assign(&z.map(|v| sigma * v));
            x = next;
        }
        Ok(x)
    }
}

struct MeanflowBatch {
    z: Tensor,
    temb_t: Tensor,
    temb_dt: Tensor,
    target: Tensor,
    weights: Option<Tensor>,
}

/// `x_t = (1−t)·x₀ + t·x₁` and the velocity `x₁ − x₀`, per row.
fn linear_path(x0: &Tensor, x1: &Tensor, t: &[f64]) -> (Tensor, Tensor) {
    let d = x0.cols();
    let mut xt = x0.clone();
    for (i, row) in xt.data_mut().chunks_exact_mut(d).enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = (1.0 - t[i]) * *v + t[i] * x1.data()[i * d + k];
        }
    }
    (xt, x1.zip_map(x0, |a, b| a - b))
}

#[cfg(test)]
mod tests;
