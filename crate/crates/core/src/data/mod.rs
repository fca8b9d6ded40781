//! Toy distributions: the Swiss roll, Gaussian noise sources, and a
//! class-conditional sequence dataset.

mod csv_io;
pub mod rng;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
pub use csv_io::{format_fixed17, parse_points_csv, write_points_csv, CsvError, PointTable};
use rng::Stream;

/// Origin of a batch of points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Data,
    Model,
    Noise,
}

/// `n` points in `R^d` drawn from one distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub points: Tensor,
    pub source: Source,
    pub seed: u64,
}

impl SampleBatch {
    pub fn new(points: Tensor, source: Source, seed: u64) -> Self {
        assert_eq!(points.ndim(), 2, "a batch is an n × d matrix");
        Self {
            points,
            source,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.shape()[1]
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.points.row(i)
    }
}

/// Parameter range of the roll and the global scale that maps it into `[-1, 1]²`.
pub const SWISS_T_MIN: f64 = 1.5 * PI;
pub const SWISS_T_MAX: f64 = 4.5 * PI;
pub const SWISS_SCALE: f64 = 4.5 * PI;
pub const SWISS_DEFAULT_SIGMA: f64 = 0.03;

/// Two-turn Swiss roll: `(t cos t, t sin t) / s + N(0, σ²I)`, `t ~ U[1.5π, 4.5π]`.
pub fn swiss_roll(n: usize, noise_sigma: f64, seed: u64) -> SampleBatch {
    assert!(n >= 1 && noise_sigma >= 0.0);
    let mut param = Stream::new(seed, "swissroll.t");
    let mut jitter = Stream::new(seed, "swissroll.noise");
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let t = param.uniform_range(SWISS_T_MIN, SWISS_T_MAX);
        let (s, c) = t.sin_cos();
        data.push(t * c / SWISS_SCALE + noise_sigma * jitter.normal());
        data.push(t * s / SWISS_SCALE + noise_sigma * jitter.normal());
    }
    SampleBatch::new(Tensor::from_vec(&[n, 2], data), Source::Data, seed)
}

/// I.i.d. standard normal `n × d` batch on the stream `(seed, "gaussian")`.
pub fn gaussian_source(n: usize, d: usize, seed: u64) -> SampleBatch {
    gaussian_source_labeled(n, d, seed, "gaussian")
}

pub fn gaussian_source_labeled(n: usize, d: usize, seed: u64, label: &str) -> SampleBatch {
    assert!(n >= 1 && d >= 1);
    let mut s = Stream::new(seed, label);
    SampleBatch::new(
        Tensor::from_vec(&[n, d], s.normals(n * d)),
        Source::Noise,
        seed,
    )
}

/// Standard normal matrix drawn from an existing stream.
pub fn normal_matrix(rows: usize, cols: usize, stream: &mut Stream) -> Tensor {
    Tensor::from_vec(&[rows, cols], stream.normals(rows * cols))
}

/// Class label or the reserved null label used for unconditional passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Conditioning {
    Class(usize),
    Null,
}

/// Trajectory families of the sequence dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceClass {
    Spiral = 0,
    Circle = 1,
    TwoMoons = 2,
}

pub const NUM_CLASSES: usize = 3;
pub const CIRCLE_RADIUS: f64 = 0.8;
pub const DEFAULT_JITTER: f64 = 0.02;

impl SequenceClass {
    pub fn from_id(id: usize) -> Option<Self> {
        match id {
            0 => Some(Self::Spiral),
            1 => Some(Self::Circle),
            2 => Some(Self::TwoMoons),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalSequenceSample {
    /// `L × d` ordered trace.
    pub latents: Tensor,
    pub conditioning: Conditioning,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("unknown class id {0} (expected 0..{NUM_CLASSES})")]
    UnknownClass(usize),
    #[error("sequence length must be at least 2, got {0}")]
    ShortSequence(usize),
}

/// `count` traces of class `class_id`, each with `len` points in `R²`.
///
/// Each trace draws its own phase (and, for two-moons, which moon), then adds
/// `jitter`-scaled Gaussian noise per coordinate.
pub fn conditional_sequences(
    class_id: usize,
    count: usize,
    len: usize,
    jitter: f64,
    seed: u64,
) -> Result<Vec<ConditionalSequenceSample>, DataError> {
    let class = SequenceClass::from_id(class_id).ok_or(DataError::UnknownClass(class_id))?;
    if len < 2 {
        return Err(DataError::ShortSequence(len));
    }
    let root = Stream::new(seed, "sequences").child_index("class", class_id as u64);
    let mut out = Vec::with_capacity(count);
    for j in 0..count {
        let mut shape_rng = root.child_index("shape", j as u64);
        let mut noise = root.child_index("jitter", j as u64);
        let phase = shape_rng.uniform_range(0.0, 2.0 * PI);
        let upper = shape_rng.bernoulli(0.5);
        let mut data = Vec::with_capacity(2 * len);
        for k in 0..len {
            let s = k as f64 / (len - 1) as f64;
            let (x, y) = match class {
                SequenceClass::Spiral => {
                    let r = 0.2 + 0.7 * s;
                    let a = phase + 1.5 * PI * s;
                    (r * a.cos(), r * a.sin())
                }
                SequenceClass::Circle => {
                    let a = phase + 2.0 * PI * k as f64 / len as f64;
                    (CIRCLE_RADIUS * a.cos(), CIRCLE_RADIUS * a.sin())
                }
                SequenceClass::TwoMoons => {
                    let a = phase / 8.0 + 0.75 * PI * s;
                    let (mx, my) = if upper {
                        (a.cos(), a.sin())
                    } else {
                        (1.0 - a.cos(), 0.5 - a.sin())
                    };
                    (0.6 * (mx - 0.5), 0.6 * (my - 0.25))
                }
            };
            data.push(x + jitter * noise.normal());
            data.push(y + jitter * noise.normal());
        }
        out.push(ConditionalSequenceSample {
            latents: Tensor::from_vec(&[len, 2], data),
            conditioning: Conditioning::Class(class_id),
        });
    }
    Ok(out)
}

/// Balanced dataset across all classes, interleaved class by class.
pub fn balanced_sequences(
    per_class: usize,
    len: usize,
    jitter: f64,
    seed: u64,
) -> Vec<ConditionalSequenceSample> {
    let per: Vec<Vec<_>> = (0..NUM_CLASSES)
        .map(|c| conditional_sequences(c, per_class, len, jitter, seed).expect("valid class"))
        .collect();
    let mut out = Vec::with_capacity(per_class * NUM_CLASSES);
    for j in 0..per_class {
        for class in &per {
            out.push(class[j].clone());
        }
    }
    out
}

/// Flattens each sequence into one row, giving an `n × (L·d)` batch.
pub fn flatten_sequences(seqs: &[Tensor]) -> Tensor {
    let width = seqs.first().map_or(0, |s| s.len());
    let mut data = Vec::with_capacity(seqs.len() * width);
    for s in seqs {
        assert_eq!(s.len(), width);
        data.extend_from_slice(s.data());
    }
    Tensor::from_vec(&[seqs.len(), width], data)
}
