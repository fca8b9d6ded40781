//! Run directories and the experiments behind each command: toy head
//! training and sampling, metric evaluation, the five-way swiss-roll
//! comparison, sequence-model training, decoding and sweeps.

pub mod config;
pub mod svg;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Value};

use crate::autodiff::Tensor;
use crate::data::{parse_points_csv, write_points_csv, CsvError};
use crate::data::rng::Stream;
use crate::data::{balanced_sequences, swiss_roll, Conditioning};
use crate::heads::train::ToyHead;
use crate::heads::{HeadError, HeadKind, Wiring};
use crate::mar::{
    heldout_sets, log_csv, score_classes, train_mar, ClassScores, DecodeConfig, DecodeOutput, LogRow,
    MarError, MarModel, StudentInit, Teacher,
};
use crate::nn::{Checkpoint, CheckpointError, ParamStore};
use crate::stats::{MetricsReport, StatsError, METRICS_HEADER};

pub use config::{ConfigError, RunConfig};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: {source}")]
    Csv { path: String, source: CsvError },
    #[error("{path}: {source}")]
    Checkpoint { path: String, source: CheckpointError },
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Mar(#[from] MarError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("{0}")]
    Numeric(String),
}

impl ExperimentError {
    /// 1 for usage and configuration problems, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Usage(_) => 1,
            Self::Head(HeadError::Config(_) | HeadError::Steps { .. }) => 1,
            Self::Mar(MarError::Config(_) | MarError::Iterations { .. } | MarError::UnknownClass(_)) => 1,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path, e: std::io::Error) -> ExperimentError {
    ExperimentError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

pub const CONFIG_FILE: &str = "config.json";
pub const DIGEST_FILE: &str = "config.sha256";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Fails if `dir` already holds a finished run.
fn ensure_fresh(dir: &Path) -> Result<()> {
    if dir.join(CONFIG_FILE).exists() {
        return Err(ExperimentError::Usage(format!(
            "{} already holds a completed run; choose another --out",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Writes the resolved config and digest; this marks the run as complete.
fn finish(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write(&dir.join(DIGEST_FILE), format!("{}\n", cfg.digest()))?;
    write(&dir.join(CONFIG_FILE), cfg.to_pretty_json())
}

fn save_checkpoint(path: &Path, params: ParamStore, manifest: Value, cfg: &RunConfig, step: u64) -> Result<()> {
    write(path, Checkpoint::new(params, manifest, cfg.digest(), step).encode())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Checkpoint::decode(&bytes).map_err(|source| ExperimentError::Checkpoint {
        path: path.display().to_string(),
        source,
    })
}

fn checkpoint_path(run: &Path) -> PathBuf {
    if run.is_dir() {
        run.join(CHECKPOINT_FILE)
    } else {
        run.to_path_buf()
    }
}

/// The run config and a field stored in a checkpoint manifest.
fn manifest_parts(ck: &Checkpoint, path: &Path) -> Result<(RunConfig, Value)> {
    let bad = |m: &str| ExperimentError::Checkpoint {
        path: path.display().to_string(),
        source: CheckpointError::Manifest(m.to_string()),
    };
    let cfg = ck.manifest.config.get("config").ok_or_else(|| bad("no run config"))?;
    let cfg: RunConfig = serde_json::from_value(cfg.clone()).map_err(|e| bad(&e.to_string()))?;
    let role = ck.manifest.config.get("role").cloned().unwrap_or(Value::Null);
    Ok((cfg, role))
}

/// Size of the rayon pool: `ESCORE_THREADS` if set, else the machine's
/// available parallelism. Results never depend on it.
pub fn configure_threads() -> Result<usize> {
    let n = match std::env::var("ESCORE_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| ExperimentError::Usage(format!("ESCORE_THREADS must be a positive integer, got '{v}'")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    // A second call (e.g. from tests) keeps the existing pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(n)
}

// ---------------------------------------------------------------- toy heads

/// Independent swiss-roll evaluation set for `seed`.
pub fn swiss_reference(cfg: &RunConfig, seed: u64) -> Tensor {
    swiss_roll(cfg.metrics.samples, cfg.data.swiss_sigma, Stream::new(seed, "reference").key()).points
}

/// Trains `cfg.head` on fresh swiss-roll minibatches.
pub fn train_toy_head(cfg: &RunConfig, seed: u64) -> Result<(ToyHead, ParamStore, Vec<f64>)> {
    let toy = ToyHead::new(cfg.head.clone())?;
    let data = Stream::new(seed, "swiss-train");
    let (batch, sigma) = (cfg.train.batch, cfg.data.swiss_sigma);
    let (params, losses) = toy.train(&cfg.train, seed, |t| {
        swiss_roll(batch, sigma, data.child_index("batch", t).key()).points
    })?;
    Ok((toy, params, losses))
}

fn loss_log(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", i + 1));
    }
    s
}

/// `train-head`: checkpoint plus per-step loss log.
pub fn cmd_train_head(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_fresh(out)?;
    let (_, params, losses) = train_toy_head(cfg, cfg.seed)?;
    write(&out.join("loss.csv"), loss_log(&losses))?;
    let manifest = json!({"command": "train-head", "kind": cfg.head.kind.name(), "config": cfg.to_json_value()});
    save_checkpoint(&out.join(CHECKPOINT_FILE), params, manifest, cfg, cfg.train.steps)?;
    finish(out, cfg)
}

/// `sample`: `n` points from a trained head, optionally with a scatter plot
/// against fresh swiss-roll data.
pub fn cmd_sample(run: &Path, steps: usize, n: usize, seed: u64, output: &Path, svg: Option<&Path>) -> Result<Tensor> {
    let path = checkpoint_path(run);
    let ck = load_checkpoint(&path)?;
    let (cfg, _) = manifest_parts(&ck, &path)?;
    let toy = ToyHead::new(cfg.head.clone())?;
    let x = toy.sample(&ck.params, n, steps, &mut Stream::new(seed, "sample"))?;
    write(output, write_points_csv(&x, &[]))?;
    if let Some(svg_path) = svg {
        let data = swiss_roll(n, cfg.data.swiss_sigma, Stream::new(seed, "reference").key()).points;
        let title = format!("{} ({steps} step{})", cfg.head.kind, if steps == 1 { "" } else { "s" });
        let plot = svg::scatter_grid(&[svg::Panel {
            title: &title,
            data: &data,
            samples: Some(&x),
        }]);
        write(svg_path, plot)?;
    }
    Ok(x)
}

fn read_points(path: &Path) -> Result<Tensor> {
    let text = read_text(path)?;
    parse_points_csv(&text)
        .map(|t| t.points)
        .map_err(|source| ExperimentError::Csv {
            path: path.display().to_string(),
            source,
        })
}

/// Appends `row` to a CSV with `header`, creating it if needed.
fn append_row(path: &Path, header: &str, row: &str) -> Result<()> {
    let mut text = if path.exists() { read_text(path)? } else { String::new() };
    if text.is_empty() {
        text.push_str(header);
        text.push('\n');
    } else if text.lines().next() != Some(header) {
        return Err(ExperimentError::Usage(format!("{} has a different header", path.display())));
    }
    text.push_str(row);
    text.push('\n');
    write(path, text)
}

/// `eval`: one metrics row for a generated set against a reference set.
pub fn cmd_eval(
    generated: &Path,
    reference: &Path,
    method: &str,
    steps: usize,
    seed: u64,
    metrics_out: &Path,
) -> Result<MetricsReport> {
    let g = read_points(generated)?;
    let r = read_points(reference)?;
    let report = MetricsReport::compute(method, steps, seed, &g, &r)?;
    append_row(metrics_out, METRICS_HEADER, &report.csv_row())?;
    Ok(report)
}

/// Sampler step counts evaluated for each kind in the comparison.
pub fn comparison_steps(kind: HeadKind) -> &'static [usize] {
    match kind {
        HeadKind::Energy => &[1],
        HeadKind::Diffusion | HeadKind::Flow => &[1, 4, 100],
        HeadKind::Shortcut | HeadKind::Meanflow => &[1, 4],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareCell {
    pub seed: u64,
    pub kind: HeadKind,
    pub rows: Vec<MetricsReport>,
    pub one_step: Tensor,
    pub losses: Vec<f64>,
}

fn compare_cell(cfg: &RunConfig, seed: u64, kind: HeadKind) -> Result<CompareCell> {
    let mut c = cfg.clone();
    c.head.kind = kind;
    let (toy, params, losses) = train_toy_head(&c, seed)?;
    let reference = swiss_reference(cfg, seed);
    let mut rows = Vec::new();
    let mut one_step = None;
    for &steps in comparison_steps(kind) {
        let x = toy.sample(&params, cfg.metrics.samples, steps, &mut Stream::new(seed, "sample"))?;
        rows.push(MetricsReport::compute(kind.name(), steps, seed, &x, &reference)?);
        if steps == 1 {
            one_step = Some(x);
        }
    }
    Ok(CompareCell {
        seed,
        kind,
        rows,
        one_step: one_step.expect("every kind samples in one step"),
        losses,
    })
}

/// Trains every head kind for every seed in `cfg.metrics.seeds`; cells run
/// in parallel and are returned seed-major in kind order.
pub fn compare_swissroll(cfg: &RunConfig) -> Result<Vec<CompareCell>> {
    let cells: Vec<(u64, HeadKind)> = cfg
        .metrics
        .seeds
        .iter()
        .flat_map(|&s| HeadKind::ALL.into_iter().map(move |k| (s, k)))
        .collect();
    cells.par_iter().map(|&(s, k)| compare_cell(cfg, s, k)).collect()
}

/// `compare-swissroll`: metrics CSV, loss logs and one figure per seed.
pub fn cmd_compare_swissroll(cfg: &RunConfig, out: &Path) -> Result<Vec<CompareCell>> {
    ensure_fresh(out)?;
    let cells = compare_swissroll(cfg)?;
    let mut csv = format!("{METRICS_HEADER}\n");
    for c in &cells {
        for r in &c.rows {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        write(&out.join(format!("logs/{}-seed{}.csv", c.kind, c.seed)), loss_log(&c.losses))?;
    }
    write(&out.join("metrics.csv"), csv)?;
    for &seed in &cfg.metrics.seeds {
        let data = swiss_reference(cfg, seed);
        let titles: Vec<String> = cells
            .iter()
            .filter(|c| c.seed == seed)
            .map(|c| {
                let r = &c.rows[0];
                format!("{} 1-step: MMD {:.6}, WSD {:.6}", c.kind, r.mmd, r.wsd)
            })
            .collect();
        let panels: Vec<svg::Panel> = cells
            .iter()
            .filter(|c| c.seed == seed)
            .zip(&titles)
            .map(|(c, t)| svg::Panel {
                title: t,
                data: &data,
                samples: Some(&c.one_step),
            })
            .collect();
        write(&out.join(format!("figure-seed{seed}.svg")), svg::scatter_grid(&panels))?;
    }
    finish(out, cfg)?;
    Ok(cells)
}

// ------------------------------------------------------------ sequence model

/// Which network `train-mar` trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        }
    }
}

/// A trained sequence model with its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedMar {
    pub model: MarModel,
    pub params: ParamStore,
    pub log: Vec<LogRow>,
}

impl TrainedMar {
    pub fn as_teacher(&self) -> Teacher<'_> {
        Teacher {
            model: &self.model,
            params: &self.params,
        }
    }
}

pub fn training_sequences(cfg: &RunConfig) -> Vec<crate::data::ConditionalSequenceSample> {
    balanced_sequences(
        cfg.data.train_per_class,
        cfg.mar.model.seq_len,
        cfg.data.jitter,
        cfg.data.data_seed,
    )
}

pub fn train_teacher(cfg: &RunConfig) -> Result<TrainedMar> {
    let model = MarModel::new(cfg.mar.teacher_config())?;
    let data = training_sequences(cfg);
    let (params, log) = train_mar(&model, &cfg.mar.teacher, cfg.mar.teacher_seed, &data, None)?;
    Ok(TrainedMar { model, params, log })
}

/// Trains a student with `cfg.mar.student` (and `cfg.mar.model`) for `seed`.
pub fn train_student(cfg: &RunConfig, seed: u64, teacher: Option<&TrainedMar>) -> Result<TrainedMar> {
    let needs_teacher = cfg.mar.student.lambda != 0.0 || cfg.mar.student.init == StudentInit::Teacher;
    if needs_teacher && teacher.is_none() {
        return Err(ExperimentError::Usage(
            "a student with lambda > 0 or teacher initialisation needs --teacher".into(),
        ));
    }
    let model = MarModel::new(cfg.mar.model.clone())?;
    let data = training_sequences(cfg);
    let t = if needs_teacher { teacher.map(TrainedMar::as_teacher) } else { None };
    let (params, log) = train_mar(&model, &cfg.mar.student, seed, &data, t)?;
    Ok(TrainedMar { model, params, log })
}

pub fn load_mar(path: &Path) -> Result<(RunConfig, Role, TrainedMar)> {
    let path = checkpoint_path(path);
    let ck = load_checkpoint(&path)?;
    let (cfg, role) = manifest_parts(&ck, &path)?;
    let role = match role.as_str() {
        Some("teacher") => Role::Teacher,
        Some("student") => Role::Student,
        _ => {
            return Err(ExperimentError::Usage(format!(
                "{} is not a sequence-model checkpoint",
                path.display()
            )))
        }
    };
    let model_cfg = match role {
        Role::Teacher => cfg.mar.teacher_config(),
        Role::Student => cfg.mar.model.clone(),
    };
    let model = MarModel::new(model_cfg)?;
    Ok((
        cfg,
        role,
        TrainedMar {
            model,
            params: ck.params,
            log: Vec::new(),
        },
    ))
}

fn mar_manifest(role: Role, model: &MarModel, cfg: &RunConfig) -> Value {
    json!({
        "command": "train-mar",
        "role": role.name(),
        "kind": model.head.kind().name(),
        "config": cfg.to_json_value(),
    })
}

/// `train-mar`: trains the teacher or a student; writes checkpoint and log.
pub fn cmd_train_mar(cfg: &RunConfig, role: Role, teacher: Option<&Path>, out: &Path) -> Result<TrainedMar> {
    if role == Role::Teacher && teacher.is_some() {
        return Err(ExperimentError::Usage("--teacher only applies to student training".into()));
    }
    ensure_fresh(out)?;
    let loaded = teacher.map(load_mar).transpose()?;
    if let Some((_, r, _)) = &loaded {
        if *r != Role::Teacher {
            return Err(ExperimentError::Usage("--teacher must point at a teacher checkpoint".into()));
        }
    }
    let trained = match role {
        Role::Teacher => train_teacher(cfg)?,
        Role::Student => train_student(cfg, cfg.seed, loaded.as_ref().map(|(_, _, t)| t))?,
    };
    write(&out.join("log.csv"), log_csv(&trained.log))?;
    let manifest = mar_manifest(role, &trained.model, cfg);
    let steps = trained.log.len() as u64;
    save_checkpoint(&out.join(CHECKPOINT_FILE), trained.params.clone(), manifest, cfg, steps)?;
    finish(out, cfg)?;
    Ok(trained)
}

/// Decoding requests: `per_class` sequences for each class, indexed
/// class-major.
pub fn class_requests(num_classes: usize, per_class: usize) -> Vec<(Conditioning, u64)> {
    (0..num_classes)
        .flat_map(|k| (0..per_class).map(move |j| (Conditioning::Class(k), (k * per_class + j) as u64)))
        .collect()
}

/// Decoded sequences as a point table with `sequence`, `class` and
/// `position` columns.
pub fn decoded_csv(requests: &[(Conditioning, u64)], out: &DecodeOutput) -> String {
    let l = out.sequences.first().map_or(0, |s| s.rows());
    let d = out.sequences.first().map_or(0, |s| s.cols());
    let mut data = Vec::with_capacity(out.sequences.len() * l * d);
    let (mut seq, mut class, mut pos) = (Vec::new(), Vec::new(), Vec::new());
    for ((c, idx), s) in requests.iter().zip(&out.sequences) {
        data.extend_from_slice(s.data());
        for p in 0..l {
            seq.push(*idx as f64);
            class.push(match c {
                Conditioning::Class(k) => *k as f64,
                Conditioning::Null => -1.0,
            });
            pos.push(p as f64);
        }
    }
    let points = Tensor::from_vec(&[out.sequences.len() * l, d], data);
    write_points_csv(&points, &[("sequence", &seq), ("class", &class), ("position", &pos)])
}

/// `decode`: sequences for every class from a trained checkpoint.
pub fn cmd_decode(run: &Path, dcfg: &DecodeConfig, per_class: usize, output: &Path) -> Result<DecodeOutput> {
    let (_, _, trained) = load_mar(run)?;
    let requests = class_requests(trained.model.cfg.num_classes, per_class);
    let out = trained.model.decode(&trained.params, &requests, dcfg)?;
    write(output, decoded_csv(&requests, &out))?;
    Ok(out)
}

/// Decode settings used for evaluation: the teacher uses its own multi-step
/// sampler and no representation guidance.
pub fn eval_decode(cfg: &RunConfig, role: Role, seed: u64) -> DecodeConfig {
    match role {
        Role::Student => DecodeConfig { seed, ..cfg.decode },
        Role::Teacher => DecodeConfig {
            seed,
            cfg_scale: 1.0,
            guidance: false,
            head_steps: cfg.mar.teacher_head_steps,
            ..cfg.decode
        },
    }
}

pub fn heldout(cfg: &RunConfig, model: &MarModel) -> Result<Vec<Tensor>> {
    Ok(heldout_sets(model, cfg.data.heldout_per_class, cfg.data.jitter, cfg.data.heldout_seed)?)
}

pub fn score(cfg: &RunConfig, trained: &TrainedMar, dcfg: &DecodeConfig) -> Result<ClassScores> {
    let reference = heldout(cfg, &trained.model)?;
    Ok(score_classes(
        &trained.model,
        &trained.params,
        dcfg,
        cfg.metrics.eval_per_class,
        &reference,
    )?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Lambda,
    Cfg,
    M,
    Wiring,
}

impl SweepParam {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lambda" => Some(Self::Lambda),
            "cfg" => Some(Self::Cfg),
            "m" => Some(Self::M),
            "wiring" => Some(Self::Wiring),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Lambda => "lambda",
            Self::Cfg => "cfg",
            Self::M => "m",
            Self::Wiring => "wiring",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: String,
    pub seed: u64,
    pub scores: ClassScores,
}

pub fn sweep_header(num_classes: usize) -> String {
    let mut h = String::from("param,value,seed,energy_v");
    for k in 0..num_classes {
        h.push_str(&format!(",energy_class{k}"));
    }
    h
}

impl SweepRow {
    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{},{},{}", self.param.name(), self.value, self.seed, self.scores.mean);
        for v in &self.scores.per_class {
            s.push_str(&format!(",{v}"));
        }
        s
    }
}

/// Run config for one sweep cell, or a usage error naming the bad value.
fn cell_config(base: &RunConfig, param: SweepParam, value: &str) -> Result<RunConfig> {
    let bad = || ExperimentError::Usage(format!("invalid {} value '{value}'", param.name()));
    let mut cfg = base.clone();
    match param {
        SweepParam::Lambda => cfg.mar.student.lambda = value.parse().map_err(|_| bad())?,
        SweepParam::Cfg => cfg.decode.cfg_scale = value.parse().map_err(|_| bad())?,
        SweepParam::M => cfg.mar.model.head.m = value.parse().map_err(|_| bad())?,
        SweepParam::Wiring => {
            cfg.mar.model.head.wiring = match value {
                "noise_as_input" => Wiring::NoiseAsInput,
                "noise_as_condition" => Wiring::NoiseAsCondition,
                _ => return Err(bad()),
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Trained students for every `(value, seed)` cell (all seeds share one
/// student for a `cfg` sweep, which varies decoding only).
pub fn sweep_students(
    cfg: &RunConfig,
    param: SweepParam,
    values: &[String],
    teacher: Option<&TrainedMar>,
) -> Result<Vec<(String, u64, TrainedMar)>> {
    let train_values: Vec<String> = if param == SweepParam::Cfg {
        vec![cfg.decode.cfg_scale.to_string()]
    } else {
        values.to_vec()
    };
    let cells: Vec<(String, u64)> = train_values
        .iter()
        .flat_map(|v| cfg.metrics.seeds.iter().map(move |&s| (v.clone(), s)))
        .collect();
    cells
        .par_iter()
        .map(|(v, s)| {
            let c = cell_config(cfg, param, v)?;
            Ok((v.clone(), *s, train_student(&c, *s, teacher)?))
        })
        .collect()
}

/// Scores every cell of a sweep given its trained students.
pub fn sweep_scores(
    cfg: &RunConfig,
    param: SweepParam,
    values: &[String],
    students: &[(String, u64, TrainedMar)],
) -> Result<Vec<SweepRow>> {
    let cells: Vec<(String, u64)> = values
        .iter()
        .flat_map(|v| cfg.metrics.seeds.iter().map(move |&s| (v.clone(), s)))
        .collect();
    cells
        .par_iter()
        .map(|(v, seed)| {
            let c = cell_config(cfg, param, v)?;
            let trained = students
                .iter()
                .find(|(sv, ss, _)| *ss == *seed && (param == SweepParam::Cfg || sv == v))
                .map(|(_, _, t)| t)
                .ok_or_else(|| ExperimentError::Usage(format!("no student for {v}, seed {seed}")))?;
            let scores = score(&c, trained, &eval_decode(&c, Role::Student, *seed))?;
            Ok(SweepRow {
                param,
                value: v.clone(),
                seed: *seed,
                scores,
            })
        })
        .collect()
}

/// Whether a sweep needs a distillation teacher.
pub fn sweep_needs_teacher(cfg: &RunConfig, param: SweepParam, values: &[String]) -> bool {
    let distills = match param {
        SweepParam::Lambda => values.iter().any(|v| v.parse::<f64>().map_or(true, |l| l != 0.0)),
        _ => cfg.mar.student.lambda != 0.0,
    };
    distills || cfg.mar.student.init == StudentInit::Teacher
}

/// `sweep`: one CSV row per `(value, seed)` cell, in value then seed order.
pub fn cmd_sweep(
    cfg: &RunConfig,
    param: SweepParam,
    values: &[String],
    teacher: Option<&Path>,
    out: &Path,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(ExperimentError::Usage("--values needs at least one value".into()));
    }
    for v in values {
        cell_config(cfg, param, v)?;
    }
    ensure_fresh(out)?;
    let teacher = if sweep_needs_teacher(cfg, param, values) {
        Some(match teacher {
            Some(p) => load_mar(p)?.2,
            None => {
                let t = train_teacher(cfg)?;
                write(&out.join("teacher/log.csv"), log_csv(&t.log))?;
                let manifest = mar_manifest(Role::Teacher, &t.model, cfg);
                save_checkpoint(
                    &out.join("teacher").join(CHECKPOINT_FILE),
                    t.params.clone(),
                    manifest,
                    cfg,
                    t.log.len() as u64,
                )?;
                t
            }
        })
    } else {
        None
    };
    let students = sweep_students(cfg, param, values, teacher.as_ref())?;
    for (v, s, t) in &students {
        let (dir, cell) = if param == SweepParam::Cfg {
            (out.join(format!("cells/student-seed{s}")), cfg.clone())
        } else {
            (out.join(format!("cells/{}={v}-seed{s}", param.name())), cell_config(cfg, param, v)?)
        };
        write(&dir.join("log.csv"), log_csv(&t.log))?;
        let manifest = mar_manifest(Role::Student, &t.model, &cell);
        save_checkpoint(&dir.join(CHECKPOINT_FILE), t.params.clone(), manifest, &cell, t.log.len() as u64)?;
    }
    let rows = sweep_scores(cfg, param, values, &students)?;
    let mut csv = sweep_header(cfg.mar.model.num_classes);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write(&out.join("sweep.csv"), csv)?;
    finish(out, cfg)?;
    Ok(rows)
}
