use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::rng::Stream;
use crate::data::Conditioning;
use crate::nn::ParamStore;

use super::{BackboneInput, MarError, MarModel};

/// Which network produced a representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Teacher,
    Student,
}

/// Backbone output at latent positions (`[rows, hidden]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ContextualRepresentation {
    pub h: Tensor,
    pub origin: Origin,
}

/// `scale·cond + (1 − scale)·uncond`. Scales 1 and 0 return the respective
/// input unchanged.
pub fn cfg_combine(
    cond: &ContextualRepresentation,
    uncond: &ContextualRepresentation,
    scale: f64,
) -> Result<ContextualRepresentation, MarError> {
    if cond.h.shape() != uncond.h.shape() {
        return Err(MarError::Shape(format!(
            "{:?} vs {:?}",
            cond.h.shape(),
            uncond.h.shape()
        )));
    }
    if cond.origin != uncond.origin {
        return Err(MarError::OriginMismatch);
    }
    let h = if scale == 1.0 {
        cond.h.clone()
    } else if scale == 0.0 {
        uncond.h.clone()
    } else {
        cond.h.zip_map(&uncond.h, |c, u| scale * c + (1.0 - scale) * u)
    };
    Ok(ContextualRepresentation {
        h,
        origin: cond.origin,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnmaskSchedule {
    /// Fraction still masked after iteration `k` is `cos(π/2 · k/T)`.
    #[default]
    Cosine,
    /// Fraction still masked after iteration `k` is `1 − k/T`.
    Uniform,
}

/// Number of positions generated at each of `iterations` steps. The counts
/// are at least 1 and sum to `len`.
pub fn unmask_counts(len: usize, iterations: usize, schedule: UnmaskSchedule) -> Result<Vec<usize>, MarError> {
    if iterations == 0 || iterations > len {
        return Err(MarError::Iterations { iterations, len });
    }
    let mut remaining = len;
    let mut counts = Vec::with_capacity(iterations);
    for k in 1..=iterations {
        let frac = k as f64 / iterations as f64;
        let target = match schedule {
            UnmaskSchedule::Cosine => (std::f64::consts::FRAC_PI_2 * frac).cos(),
            UnmaskSchedule::Uniform => 1.0 - frac,
        };
        let left = iterations - k;
        // Leave one position for each later iteration, generate at least one now.
        let next = ((len as f64 * target).floor() as usize).clamp(left, remaining - 1);
        counts.push(remaining - next);
        remaining = next;
    }
    debug_assert_eq!(remaining, 0);
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub iterations: usize,
    pub cfg_scale: f64,
    /// When false the null-conditioned pass is skipped entirely.
    pub guidance: bool,
    pub schedule: UnmaskSchedule,
    /// Sampler steps per head call (1 for energy heads).
    pub head_steps: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            iterations: 8,
            cfg_scale: 4.0,
            guidance: true,
            schedule: UnmaskSchedule::Cosine,
            head_steps: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    /// One `[L, d]` sequence per request.
    pub sequences: Vec<Tensor>,
    /// `generated[i][p]` for sequence `i`, position `p`.
    pub generated: Vec<Vec<bool>>,
    /// Positions filled at each iteration, per sequence.
    pub order: Vec<Vec<Vec<usize>>>,
    pub backbone_forwards: usize,
    pub head_rows: usize,
}

impl MarModel {
    /// Decodes one sequence per `(conditioning, index)`; `index` selects the
    /// sequence's random stream, so any batching of the same requests gives
    /// the same sequences.
    pub fn decode(
        &self,
        params: &ParamStore,
        requests: &[(Conditioning, u64)],
        dcfg: &DecodeConfig,
    ) -> Result<DecodeOutput, MarError> {
        let (l, d) = (self.cfg.seq_len, self.cfg.head.latent_dim);
        let counts = unmask_counts(l, dcfg.iterations, dcfg.schedule)?;
        let b = requests.len();
        let root = Stream::new(dcfg.seed, "decode");
        let streams: Vec<Stream> = requests.iter().map(|&(_, i)| root.child_index("seq", i)).collect();
        let orders: Vec<Vec<usize>> = streams.iter().map(|s| s.child("order").permutation(l)).collect();
        let conditioning: Vec<Conditioning> = requests.iter().map(|&(c, _)| c).collect();

        let mut tokens = Tensor::zeros(&[b * l, d]);
        let mut mask = Tensor::full(&[b * l, 1], 1.0);
        let mut generated = vec![vec![false; l]; b];
        let mut order = vec![Vec::with_capacity(dcfg.iterations); b];
        let mut backbone_forwards = 0;
        let mut head_rows = 0;
        let mut start = 0;
        for (k, &count) in counts.iter().enumerate() {
            let input = BackboneInput {
                tokens: tokens.clone(),
                mask: mask.clone(),
                conditioning: conditioning.clone(),
            };
            let cond = ContextualRepresentation {
                h: self.representation(params, &input)?,
                origin: Origin::Student,
            };
            backbone_forwards += 1;
            let h = if dcfg.guidance {
                let uncond = ContextualRepresentation {
                    h: self.representation(params, &input.unconditional())?,
                    origin: Origin::Student,
                };
                backbone_forwards += 1;
                cfg_combine(&cond, &uncond, dcfg.cfg_scale)?.h
            } else {
                cond.h
            };
            let hidden = h.cols();
            for i in 0..b {
                let picked = &orders[i][start..start + count];
                let mut ctx = Vec::with_capacity(count * hidden);
                for &p in picked {
                    ctx.extend_from_slice(h.row(i * l + p));
                }
                let ctx = Tensor::from_vec(&[count, hidden], ctx);
                let mut s = streams[i].child_index("iter", k as u64);
                let out = self.head.sample(params, &ctx, count, dcfg.head_steps, &mut s)?;
                head_rows += count;
                for (j, &p) in picked.iter().enumerate() {
                    let r = i * l + p;
                    tokens.data_mut()[r * d..(r + 1) * d].copy_from_slice(out.row(j));
                    mask.data_mut()[r] = 0.0;
                    generated[i][p] = true;
                }
                order[i].push(picked.to_vec());
            }
            start += count;
        }
        let sequences = (0..b)
            .map(|i| Tensor::from_vec(&[l, d], tokens.data()[i * l * d..(i + 1) * l * d].to_vec()))
            .collect();
        Ok(DecodeOutput {
            sequences,
            generated,
            order,
            backbone_forwards,
            head_rows,
        })
    }
}
