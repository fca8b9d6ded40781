//! Unconditional toy training: the context is a learned constant vector.

use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, evaluate, Chain, Graph, NodeId, Tensor};
use crate::data::rng::Stream;
use crate::nn::{warmup_lr, Adam, Init, ParamStore};

use super::{Ctx, Head, HeadConfig, HeadError, HeadLoss};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    pub adam: Adam,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch: 256,
            lr: 1e-3,
            warmup: 100,
            adam: Adam::default(),
        }
    }
}

/// A head whose context is the learned parameter `<prefix>.ctx`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyHead {
    pub head: Head,
}

impl ToyHead {
    pub fn new(cfg: HeadConfig) -> Result<Self, HeadError> {
        Ok(Self {
            head: Head::new(cfg, "head")?,
        })
    }

    pub fn ctx_name(&self) -> String {
        format!("{}.ctx", self.head.prefix)
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new(seed);
        store.register(
            &self.ctx_name(),
            &[1, self.head.cfg.context_dim],
            Init::Normal { std: 1.0 },
        );
        self.head.register(&mut store);
        store
    }

    /// Builds the mean training loss over targets `y`.
    pub fn loss_graph(
        &self,
        params: &ParamStore,
        y: &Tensor,
        stream: &mut Stream,
    ) -> Result<(Graph, NodeId, HeadLoss), HeadError> {
        let mut g = Graph::new();
        let c = g.param(&self.ctx_name());
        let ctx = Ctx {
            node: c,
            rows: 1,
            value: params.get(&self.ctx_name()),
        };
        let loss = self.head.loss(&mut g, params, &ctx, y, stream)?;
        let mean = g.mean(loss.per_row);
        Ok((g, mean, loss))
    }

    /// One optimizer step; returns the loss before the update.
    pub fn train_step(
        &self,
        params: &mut ParamStore,
        opt: &Adam,
        y: &Tensor,
        lr: f64,
        t: u64,
        stream: &mut Stream,
    ) -> Result<f64, HeadError> {
        let (g, out, loss) = self.loss_graph(params, y, stream)?;
        let eval = evaluate(&g, &Chain(vec![&*params, &loss.bindings]))?;
        let value = eval.value(out).item();
        if !value.is_finite() {
            return Err(HeadError::NonFinite {
                kind: self.head.kind(),
                step: t,
            });
        }
        let grads = backward(&g, &eval, out)?;
        opt.step(params, &grads, lr, t)?;
        Ok(value)
    }

    pub fn sample(
        &self,
        params: &ParamStore,
        n: usize,
        steps: usize,
        stream: &mut Stream,
    ) -> Result<Tensor, HeadError> {
        let ctx = params
            .get(&self.ctx_name())
            .ok_or_else(|| HeadError::Config(format!("missing parameter {}", self.ctx_name())))?;
        self.head.sample(params, ctx, n, steps, stream)
    }

    /// Trains from the initialisation for `seed`; `data(step)` yields the
    /// minibatch for each 1-based step. Returns parameters and per-step losses.
    pub fn train(
        &self,
        schedule: &TrainSchedule,
        seed: u64,
        mut data: impl FnMut(u64) -> Tensor,
    ) -> Result<(ParamStore, Vec<f64>), HeadError> {
        let mut params = self.init(seed);
        let root = Stream::new(seed, &format!("train/{}", self.head.kind()));
        let mut losses = Vec::with_capacity(schedule.steps as usize);
        for t in 1..=schedule.steps {
            let y = data(t);
            let lr = warmup_lr(schedule.lr, schedule.warmup, t);
            let mut s = root.child_index("step", t);
            losses.push(self.train_step(&mut params, &schedule.adam, &y, lr, t, &mut s)?);
        }
        Ok((params, losses))
    }
}
