//! Masked autoregressive sequence generation: a transformer backbone
//! produces per-position representations that condition a sampling head.
//!
//! Training masks a random subset of positions and scores the head only at
//! masked positions, optionally pulling the backbone's representations
//! towards a frozen teacher's. Decoding starts fully masked and fills
//! positions over a few iterations, with guidance applied to the backbone
//! output rather than to the head.

mod decode;
#[cfg(test)]
mod tests;

use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, evaluate, AutodiffError, Chain, Graph, NodeId, Tensor, TensorMap};
use crate::data::rng::Stream;
use crate::data::{ConditionalSequenceSample, Conditioning, DataError, NUM_CLASSES};
use crate::heads::{Ctx, Head, HeadConfig, HeadError, HeadKind};
use crate::nn::{warmup_lr, Adam, Init, Linear, NnError, ParamStore, TransformerBlock};

pub use decode::{
    cfg_combine, unmask_counts, ContextualRepresentation, DecodeConfig, DecodeOutput, Origin,
    UnmaskSchedule,
};

/// Conditioning tokens prepended to every sequence.
pub const PREFIX_TOKENS: usize = 2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MarError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown class id {0} (expected 0..{NUM_CLASSES})")]
    UnknownClass(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("representations come from different networks")]
    OriginMismatch,
    #[error("{iterations} decoding iterations exceed sequence length {len}")]
    Iterations { iterations: usize, len: usize },
    #[error("non-finite loss at step {0}")]
    NonFinite(u64),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarConfig {
    pub seq_len: usize,
    pub num_classes: usize,
    pub hidden: usize,
    pub attention_heads: usize,
    pub blocks: usize,
    /// `[lo, hi)`; values above 1 are read as percentages.
    pub mask_rate: [f64; 2],
    /// Probability of replacing the class by the null label in training.
    pub cond_drop: f64,
    /// `context_dim` is overridden by `hidden`.
    pub head: HeadConfig,
}

impl Default for MarConfig {
    fn default() -> Self {
        Self {
            seq_len: 16,
            num_classes: NUM_CLASSES,
            hidden: 32,
            attention_heads: 4,
            blocks: 2,
            mask_rate: [0.7, 1.0],
            cond_drop: 0.1,
            head: HeadConfig {
                width: 64,
                ..HeadConfig::default()
            },
        }
    }
}

impl MarConfig {
    /// Mask-rate range as fractions.
    pub fn rate_range(&self) -> (f64, f64) {
        let [lo, hi] = self.mask_rate;
        if hi > 1.0 {
            (lo / 100.0, hi / 100.0)
        } else {
            (lo, hi)
        }
    }

    pub fn validate(&self) -> Result<(), MarError> {
        let (lo, hi) = self.rate_range();
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(MarError::Config(format!("mask rate range {:?} is not within (0, 1]", self.mask_rate)));
        }
        if self.seq_len == 0 || self.num_classes == 0 || self.blocks == 0 {
            return Err(MarError::Config("sequence length, classes and blocks must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_drop) {
            return Err(MarError::Config(format!("cond_drop {} is not a probability", self.cond_drop)));
        }
        if matches!(self.head.kind, HeadKind::Shortcut | HeadKind::Meanflow) {
            return Err(MarError::Config(format!(
                "{} heads are not supported in the sequence model",
                self.head.kind
            )));
        }
        Ok(())
    }
}

/// Boolean mask over positions (`true` = masked) and the drawn rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPattern {
    pub masked: Vec<bool>,
    pub rate: f64,
}

impl MaskPattern {
    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

/// Masks `ceil(rate·L)` positions chosen uniformly without replacement,
/// with `rate ~ U[lo, hi)`. Masked rows of the returned tokens are zeroed;
/// the backbone substitutes its learned mask token for them.
pub fn apply_mask(y: &Tensor, lo: f64, hi: f64, stream: &mut Stream) -> (Tensor, MaskPattern) {
    let len = y.rows();
    let rate = stream.uniform_range(lo, hi);
    let count = ((rate * len as f64).ceil() as usize).clamp(1, len);
    let mut masked = vec![false; len];
    for &p in &stream.permutation(len)[..count] {
        masked[p] = true;
    }
    let mut tokens = y.clone();
    let d = y.cols();
    for (r, &m) in masked.iter().enumerate() {
        if m {
            tokens.data_mut()[r * d..(r + 1) * d].fill(0.0);
        }
    }
    (tokens, MaskPattern { masked, rate })
}

/// Mean over positions of the squared Euclidean row distance: rows are
/// positions, columns hidden units.
pub fn distillation_loss(h_s: &Tensor, h_t: &Tensor) -> Result<f64, MarError> {
    if h_s.shape() != h_t.shape() || h_s.ndim() != 2 {
        return Err(MarError::Shape(format!("{:?} vs {:?}", h_s.shape(), h_t.shape())));
    }
    let total: f64 = h_s.data().iter().zip(h_t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(total / h_s.rows() as f64)
}

/// Backbone input for a batch of `B` sequences, flattened to `B·L` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneInput {
    pub tokens: Tensor,
    /// `[B·L, 1]`, 1 where the position is masked.
    pub mask: Tensor,
    pub conditioning: Vec<Conditioning>,
}

impl BackboneInput {
    pub fn batch(&self) -> usize {
        self.conditioning.len()
    }

    /// Same tokens, every sequence conditioned on the null label.
    pub fn unconditional(&self) -> Self {
        Self {
            conditioning: vec![Conditioning::Null; self.batch()],
            ..self.clone()
        }
    }
}

/// Loss components of one training step; `total = energy + lambda·distill`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub energy: f64,
    pub distill: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Training batch with masks already drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub input: BackboneInput,
    /// The clean latents, `[B·L, d]`.
    pub targets: Tensor,
    pub patterns: Vec<MaskPattern>,
}

/// Graph nodes of a training loss.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub graph: Graph,
    pub energy: NodeId,
    pub distill: Option<NodeId>,
    pub total: NodeId,
    pub representation: NodeId,
    pub bindings: TensorMap,
}

/// Fixed, already-trained network whose representations are the
/// distillation target.
#[derive(Debug, Clone, Copy)]
pub struct Teacher<'a> {
    pub model: &'a MarModel,
    pub params: &'a ParamStore,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarModel {
    pub cfg: MarConfig,
    pub head: Head,
    blocks: Vec<TransformerBlock>,
}

const TOKENS: &str = "mar:tokens";
const MASK: &str = "mar:mask";
const CLASS: &str = "mar:class";
const TEACHER_H: &str = "mar:teacher_h";
const ENERGY_WEIGHT: &str = "mar:energy_weight";

impl MarModel {
    pub fn new(mut cfg: MarConfig) -> Result<Self, MarError> {
        cfg.validate()?;
        cfg.head.context_dim = cfg.hidden;
        let head = Head::new(cfg.head.clone(), "head")?;
        let blocks = (0..cfg.blocks)
            .map(|k| TransformerBlock::new(format!("mar.block{k}"), cfg.hidden, cfg.attention_heads))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { cfg, head, blocks })
    }

    fn input_proj(&self) -> Linear {
        Linear::new("mar.in", self.cfg.head.latent_dim, self.cfg.hidden)
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new(seed);
        let (l, dm) = (self.cfg.seq_len, self.cfg.hidden);
        self.input_proj().register(&mut store);
        store.register("mar.mask_token", &[1, dm], Init::Normal { std: 1.0 });
        store.register("mar.pos", &[PREFIX_TOKENS + l, dm], Init::Normal { std: 0.1 });
        // One extra row for the null label.
        store.register(
            "mar.class",
            &[self.cfg.num_classes + 1, PREFIX_TOKENS * dm],
            Init::Normal { std: 1.0 },
        );
        for b in &self.blocks {
            b.register(&mut store);
        }
        self.head.register(&mut store);
        store
    }

    fn class_index(&self, c: Conditioning) -> Result<usize, MarError> {
        match c {
            Conditioning::Null => Ok(self.cfg.num_classes),
            Conditioning::Class(k) if k < self.cfg.num_classes => Ok(k),
            Conditioning::Class(k) => Err(MarError::UnknownClass(k)),
        }
    }

    fn input_bindings(&self, input: &BackboneInput) -> Result<TensorMap, MarError> {
        let (b, l, d) = (input.batch(), self.cfg.seq_len, self.cfg.head.latent_dim);
        if input.tokens.shape() != [b * l, d] || input.mask.shape() != [b * l, 1] {
            return Err(MarError::Shape(format!(
                "tokens {:?} and mask {:?} for {b} sequences of length {l}",
                input.tokens.shape(),
                input.mask.shape()
            )));
        }
        let classes = self.cfg.num_classes + 1;
        let mut onehot = Tensor::zeros(&[b, classes]);
        for (i, &c) in input.conditioning.iter().enumerate() {
            onehot.data_mut()[i * classes + self.class_index(c)?] = 1.0;
        }
        let mut m = TensorMap::new();
        m.insert(TOKENS.into(), input.tokens.clone());
        m.insert(MASK.into(), input.mask.clone());
        m.insert(CLASS.into(), onehot);
        Ok(m)
    }

    /// Adds the backbone for `batch` sequences; returns `[B·L, hidden]`
    /// final-block outputs at the latent positions.
    pub fn backbone(&self, g: &mut Graph, batch: usize) -> NodeId {
        let (l, dm) = (self.cfg.seq_len, self.cfg.hidden);
        let t = PREFIX_TOKENS + l;
        let tokens = g.input(TOKENS);
        let mask = g.input(MASK);
        let class = g.input(CLASS);

        let x = self.input_proj().forward(g, tokens);
        let keep = g.scale(mask, -1.0);
        let one = g.constant(Tensor::scalar(1.0));
        let keep = g.add_broadcast(keep, one);
        let x = g.mul_broadcast(x, keep);
        let mask_tok = g.param("mar.mask_token");
        let mask_full = g.broadcast(mask, x);
        let fill = g.mul_broadcast(mask_full, mask_tok);
        let x = g.add(x, fill);
        let x = g.reshape(x, &[batch, l, dm]);

        let table = g.param("mar.class");
        let prefix = g.matmul(class, table);
        let prefix = g.reshape(prefix, &[batch, PREFIX_TOKENS, dm]);
        let mut h = g.concat(&[prefix, x], 1);
        let pos = g.param("mar.pos");
        h = g.add_broadcast(h, pos);
        for b in &self.blocks {
            h = b.forward(g, h, batch, t).output;
        }
        let h = g.slice(h, 1, PREFIX_TOKENS, t);
        g.reshape(h, &[batch * l, dm])
    }

    /// Backbone output as a plain tensor.
    pub fn representation(&self, params: &ParamStore, input: &BackboneInput) -> Result<Tensor, MarError> {
        let mut g = Graph::new();
        let h = self.backbone(&mut g, input.batch());
        let local = self.input_bindings(input)?;
        Ok(evaluate(&g, &Chain(vec![params, &local]))?.take(h))
    }

    /// Draws class dropout and masks for each sequence from its own child
    /// stream.
    pub fn prepare_batch(
        &self,
        samples: &[&ConditionalSequenceSample],
        stream: &Stream,
    ) -> Result<TrainBatch, MarError> {
        let (l, d) = (self.cfg.seq_len, self.cfg.head.latent_dim);
        let (lo, hi) = self.cfg.rate_range();
        let mut tokens = Vec::with_capacity(samples.len() * l * d);
        let mut targets = Vec::with_capacity(samples.len() * l * d);
        let mut mask = Vec::with_capacity(samples.len() * l);
        let mut conditioning = Vec::with_capacity(samples.len());
        let mut patterns = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if s.latents.shape() != [l, d] {
                return Err(MarError::Shape(format!("sequence {:?}, expected [{l}, {d}]", s.latents.shape())));
            }
            let mut rs = stream.child_index("seq", i as u64);
            let drop = rs.bernoulli(self.cfg.cond_drop);
            conditioning.push(if drop { Conditioning::Null } else { s.conditioning });
            let (tok, pat) = apply_mask(&s.latents, lo, hi, &mut rs);
            tokens.extend_from_slice(tok.data());
            targets.extend_from_slice(s.latents.data());
            mask.extend(pat.masked.iter().map(|&m| if m { 1.0 } else { 0.0 }));
            patterns.push(pat);
        }
        let n = samples.len() * l;
        Ok(TrainBatch {
            input: BackboneInput {
                tokens: Tensor::from_vec(&[n, d], tokens),
                mask: Tensor::from_vec(&[n, 1], mask),
                conditioning,
            },
            targets: Tensor::from_vec(&[n, d], targets),
            patterns,
        })
    }

    /// Head loss averaged over masked positions, plus `lambda` times the
    /// distillation term when a teacher is given.
    pub fn loss_graph(
        &self,
        params: &ParamStore,
        batch: &TrainBatch,
        teacher: Option<Teacher>,
        lambda: f64,
        stream: &mut Stream,
    ) -> Result<LossGraph, MarError> {
        let b = batch.input.batch();
        let rows = b * self.cfg.seq_len;
        let mut g = Graph::new();
        let h = self.backbone(&mut g, b);
        let mut bindings = self.input_bindings(&batch.input)?;
        let ctx = Ctx {
            node: h,
            rows,
            value: None,
        };
        let loss = self.head.loss(&mut g, params, &ctx, &batch.targets, stream)?;
        bindings.extend(loss.bindings);

        let masked = batch.input.mask.sum();
        let weights = batch.input.mask.map(|m| m / masked);
        bindings.insert(ENERGY_WEIGHT.into(), weights);
        let w = g.input(ENERGY_WEIGHT);
        let weighted = g.mul(loss.per_row, w);
        let energy = g.sum(weighted);

        let (distill, total) = match teacher {
            Some(t) => {
                if t.model.cfg.hidden != self.cfg.hidden || t.model.cfg.seq_len != self.cfg.seq_len {
                    return Err(MarError::Shape("teacher and student backbones differ".into()));
                }
                let ht = t.model.representation(t.params, &batch.input)?;
                bindings.insert(TEACHER_H.into(), ht);
                let ht = g.input(TEACHER_H);
                let diff = g.sub(h, ht);
                let ss = g.sum_squares(diff);
                let distill = g.scale(ss, 1.0 / rows as f64);
                let weighted = g.scale(distill, lambda);
                (Some(distill), g.add(energy, weighted))
            }
            None => (None, energy),
        };
        Ok(LossGraph {
            graph: g,
            energy,
            distill,
            total,
            representation: h,
            bindings,
        })
    }

    /// One optimizer step on the student; returns the loss before the update.
    #[allow(clippy::too_many_arguments)]
    pub fn train_step(
        &self,
        params: &mut ParamStore,
        opt: &Adam,
        batch: &TrainBatch,
        teacher: Option<Teacher>,
        lambda: f64,
        lr: f64,
        t: u64,
        stream: &mut Stream,
    ) -> Result<LossBreakdown, MarError> {
        let lg = self.loss_graph(params, batch, teacher, lambda, stream)?;
        let eval = evaluate(&lg.graph, &Chain(vec![&*params, &lg.bindings]))?;
        let energy = eval.value(lg.energy).item();
        let distill = lg.distill.map_or(0.0, |d| eval.value(d).item());
        let total = eval.value(lg.total).item();
        if !total.is_finite() {
            return Err(MarError::NonFinite(t));
        }
        let grads = backward(&lg.graph, &eval, lg.total)?;
        opt.step(params, &grads, lr, t)?;
        Ok(LossBreakdown {
            energy,
            distill,
            total,
            lambda: if teacher.is_some() { lambda } else { 0.0 },
        })
    }
}

/// How the student's parameters start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    #[default]
    Scratch,
    /// Backbone copied from the teacher; the head starts fresh.
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarSchedule {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    pub adam: Adam,
    pub lambda: f64,
    pub init: StudentInit,
}

impl Default for MarSchedule {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 64,
            lr: 1e-3,
            warmup: 100,
            adam: Adam::default(),
            lambda: 0.0,
            init: StudentInit::Scratch,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub seed: u64,
}

pub const LOG_HEADER: &str = "step,energy,distill,total,lambda,lr,seed";

impl LogRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.loss.energy, self.loss.distill, self.loss.total, self.loss.lambda, self.lr, self.seed
        )
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Trains from the initialisation for `seed` on minibatches drawn uniformly
/// (with replacement) from `data`.
pub fn train_mar(
    model: &MarModel,
    schedule: &MarSchedule,
    seed: u64,
    data: &[ConditionalSequenceSample],
    teacher: Option<Teacher>,
) -> Result<(ParamStore, Vec<LogRow>), MarError> {
    if data.is_empty() || schedule.batch == 0 {
        return Err(MarError::Config("empty training set or batch".into()));
    }
    let mut params = model.init(seed);
    if schedule.init == StudentInit::Teacher {
        let t = teacher.ok_or_else(|| MarError::Config("teacher initialisation needs a teacher".into()))?;
        params.copy_prefix_from(t.params, "mar.")?;
    }
    let root = Stream::new(seed, &format!("train-mar/{}", model.head.kind()));
    let mut log = Vec::with_capacity(schedule.steps as usize);
    for t in 1..=schedule.steps {
        let step = root.child_index("step", t);
        let mut pick = step.child("batch");
        let samples: Vec<&ConditionalSequenceSample> =
            (0..schedule.batch).map(|_| &data[pick.below(data.len())]).collect();
        let batch = model.prepare_batch(&samples, &step.child("mask"))?;
        let lr = warmup_lr(schedule.lr, schedule.warmup, t);
        let loss = model.train_step(
            &mut params,
            &schedule.adam,
            &batch,
            teacher,
            schedule.lambda,
            lr,
            t,
            &mut step.child("head"),
        )?;
        log.push(LogRow { step: t, loss, lr, seed });
    }
    Ok((params, log))
}

/// Held-out traces per class, each flattened to one `L·d` row.
pub fn heldout_sets(model: &MarModel, per_class: usize, jitter: f64, seed: u64) -> Result<Vec<Tensor>, MarError> {
    (0..model.cfg.num_classes)
        .map(|c| {
            let seqs = crate::data::conditional_sequences(c, per_class, model.cfg.seq_len, jitter, seed)?;
            let rows: Vec<Tensor> = seqs.into_iter().map(|s| s.latents).collect();
            Ok(crate::data::flatten_sequences(&rows))
        })
        .collect()
}

/// Quality of class-conditional decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    /// V-mode energy statistic per class between decoded and held-out traces.
    pub per_class: Vec<f64>,
    pub mean: f64,
}

/// Decodes `per_class` sequences for every class and scores each class
/// against its held-out set.
pub fn score_classes(
    model: &MarModel,
    params: &ParamStore,
    dcfg: &DecodeConfig,
    per_class: usize,
    heldout: &[Tensor],
) -> Result<ClassScores, MarError> {
    let c = model.cfg.num_classes;
    if heldout.len() != c {
        return Err(MarError::Shape(format!("{} held-out sets for {c} classes", heldout.len())));
    }
    let requests: Vec<(Conditioning, u64)> = (0..c)
        .flat_map(|k| (0..per_class).map(move |j| (Conditioning::Class(k), (k * per_class + j) as u64)))
        .collect();
    let out = model.decode(params, &requests, dcfg)?;
    let mut scores = Vec::with_capacity(c);
    for (k, reference) in heldout.iter().enumerate() {
        let gen = crate::data::flatten_sequences(&out.sequences[k * per_class..(k + 1) * per_class]);
        let e = crate::stats::energy_statistic(&gen, reference, crate::stats::EnergyEstimatorConfig::V)
            .map_err(|e| MarError::Shape(e.to_string()))?;
        scores.push(e);
    }
    let mean = scores.iter().sum::<f64>() / c as f64;
    Ok(ClassScores { per_class: scores, mean })
}
