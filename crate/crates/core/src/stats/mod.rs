//! Two-sample distances: energy statistic, Gaussian-kernel MMD and exact
//! assignment Wasserstein distance, plus closed-form oracles.

mod assignment;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

pub use assignment::{assignment, brute_force_assignment};

/// Largest set size accepted by [`wasserstein_assignment`].
pub const WASSERSTEIN_CAP: usize = 2048;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("empty sample set")]
    Empty,
    #[error("U-statistic needs at least 2 points per set, got {0}")]
    TooFew(usize),
    #[error("all pooled points coincide; the median bandwidth is zero")]
    DegenerateBandwidth,
    #[error("bandwidth must be positive and finite, got {0}")]
    BadBandwidth(f64),
    #[error("assignment needs equal set sizes, got {0} and {1}")]
    UnequalSizes(usize, usize),
    #[error("assignment size {0} exceeds the cap of {WASSERSTEIN_CAP}")]
    TooLarge(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyMode {
    /// Within-set sums over `i ≠ j`, normalised by `m(m−1)`.
    U,
    /// Within-set sums including the diagonal, normalised by `m²`.
    V,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyEstimatorConfig {
    pub mode: EnergyMode,
    /// Whether the within-`Y` term is subtracted.
    pub include_constant: bool,
}

impl EnergyEstimatorConfig {
    pub const U: Self = Self {
        mode: EnergyMode::U,
        include_constant: true,
    };
    pub const V: Self = Self {
        mode: EnergyMode::V,
        include_constant: true,
    };
}

fn check_pair(x: &Tensor, y: &Tensor) -> Result<(usize, usize, usize), StatsError> {
    let (n, m) = (x.rows(), y.rows());
    if n == 0 || m == 0 {
        return Err(StatsError::Empty);
    }
    if x.cols() != y.cols() {
        return Err(StatsError::Dimension(x.cols(), y.cols()));
    }
    Ok((n, m, x.cols()))
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

fn sq_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

fn cross_sum(x: &Tensor, y: &Tensor) -> f64 {
    let mut s = 0.0;
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            s += distance(x.row(i), y.row(j));
        }
    }
    s
}

/// `Σ_{i≠j} ‖xᵢ − xⱼ‖` (each unordered pair counted twice).
fn within_sum(x: &Tensor) -> f64 {
    let mut s = 0.0;
    for i in 0..x.rows() {
        for j in i + 1..x.rows() {
            s += distance(x.row(i), x.row(j));
        }
    }
    2.0 * s
}

/// 1-D sums via sorting: `Σ_{i<j} |xᵢ − xⱼ|` from prefix sums.
fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn within_sum_1d(sorted: &[f64]) -> f64 {
    let mut prefix = 0.0;
    let mut s = 0.0;
    for (k, &v) in sorted.iter().enumerate() {
        s += k as f64 * v - prefix;
        prefix += v;
    }
    2.0 * s
}

fn cross_sum_1d(xs: &[f64], ys: &[f64]) -> f64 {
    // For each x, Σ_j |x − y_j| = x·(2k − m) − 2·prefix(k) + total, with k = #{y_j < x}.
    let total: f64 = ys.iter().sum();
    let m = ys.len() as f64;
    let mut s = 0.0;
    let mut k = 0usize;
    let mut prefix = 0.0;
    for &x in xs {
        while k < ys.len() && ys[k] < x {
            prefix += ys[k];
            k += 1;
        }
        s += x * (2.0 * k as f64 - m) - 2.0 * prefix + total;
    }
    s
}

/// Energy statistic `2/(nm)ΣΣ‖xᵢ−yⱼ‖ − within(X) − within(Y)` with exact norms.
///
/// One-dimensional inputs use an `O(n log n)` sorted evaluation.
pub fn energy_statistic(x: &Tensor, y: &Tensor, cfg: EnergyEstimatorConfig) -> Result<f64, StatsError> {
    let (n, m, d) = check_pair(x, y)?;
    if cfg.mode == EnergyMode::U {
        let smallest = if cfg.include_constant { n.min(m) } else { n };
        if smallest < 2 {
            return Err(StatsError::TooFew(smallest));
        }
    }
    let (cross, wx, wy) = if d == 1 {
        let (xs, ys) = (sorted(x.data()), sorted(y.data()));
        (cross_sum_1d(&xs, &ys), within_sum_1d(&xs), within_sum_1d(&ys))
    } else {
        (cross_sum(x, y), within_sum(x), if cfg.include_constant { within_sum(y) } else { 0.0 })
    };
    let norm = |k: usize| match cfg.mode {
        EnergyMode::U => (k * (k - 1)) as f64,
        EnergyMode::V => (k * k) as f64,
    };
    let mut value = 2.0 * cross / (n * m) as f64 - wx / norm(n);
    if cfg.include_constant {
        value -= wy / norm(m);
    }
    Ok(value)
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

/// `E|N(μ, s²)|` (folded-normal mean).
pub fn folded_normal_mean(mu: f64, s: f64) -> f64 {
    s * (2.0 / std::f64::consts::PI).sqrt() * (-mu * mu / (2.0 * s * s)).exp()
        + mu * (1.0 - 2.0 * std_normal_cdf(-mu / s))
}

/// Energy distance between `N(0, 1)` and `N(μ, 1)` in one dimension.
pub fn gaussian_energy_oracle(mu: f64) -> f64 {
    let s = std::f64::consts::SQRT_2;
    2.0 * folded_normal_mean(mu, s) - 2.0 * folded_normal_mean(0.0, s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance of the pooled set.
    Median,
}

/// Median of all pairwise distances among the rows of `x` and `y` together.
pub fn median_pairwise_distance(x: &Tensor, y: &Tensor) -> Result<f64, StatsError> {
    let (n, m, _) = check_pair(x, y)?;
    let rows: Vec<&[f64]> = (0..n).map(|i| x.row(i)).chain((0..m).map(|j| y.row(j))).collect();
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            dists.push(distance(rows[i], rows[j]));
        }
    }
    if dists.is_empty() {
        return Err(StatsError::DegenerateBandwidth);
    }
    let mid = dists.len() / 2;
    let (_, &mut upper, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    let median = if dists.len() % 2 == 1 {
        upper
    } else {
        let lower = dists[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    };
    if median <= 0.0 {
        return Err(StatsError::DegenerateBandwidth);
    }
    Ok(median)
}

fn kernel_mean(a: &Tensor, b: &Tensor, gamma: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            s += (-gamma * sq_distance(a.row(i), b.row(j))).exp();
        }
    }
    s / (a.rows() * b.rows()) as f64
}

fn canonical_order(a: &Tensor, b: &Tensor) -> bool {
    let key = |t: &Tensor| (t.rows(), t.data().len());
    match key(a).cmp(&key(b)) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => a
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .is_none_or(|o| o.is_lt()),
    }
}

/// Biased (V-statistic) squared MMD with kernel `exp(−‖a−b‖²/(2σ²))`.
/// Returns the value and the bandwidth used.
pub fn mmd_gaussian(x: &Tensor, y: &Tensor, bandwidth: Bandwidth) -> Result<(f64, f64), StatsError> {
    check_pair(x, y)?;
    let sigma = match bandwidth {
        Bandwidth::Fixed(s) => {
            if !(s > 0.0 && s.is_finite()) {
                return Err(StatsError::BadBandwidth(s));
            }
            s
        }
        Bandwidth::Median => median_pairwise_distance(x, y)?,
    };
    let gamma = 1.0 / (2.0 * sigma * sigma);
    // Fixed argument order makes the rounding, and so the value, symmetric.
    let (x, y) = if canonical_order(x, y) { (x, y) } else { (y, x) };
    let value = kernel_mean(x, x, gamma) + kernel_mean(y, y, gamma) - 2.0 * kernel_mean(x, y, gamma);
    Ok((value, sigma))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WassersteinOrder {
    W1,
    W2,
}

/// Exact Wasserstein distance between equal-size empirical sets via optimal
/// assignment: mean matched distance (W1) or root mean squared distance (W2).
pub fn wasserstein_assignment(x: &Tensor, y: &Tensor, order: WassersteinOrder) -> Result<f64, StatsError> {
    let (n, m, _) = check_pair(x, y)?;
    if n != m {
        return Err(StatsError::UnequalSizes(n, m));
    }
    if n > WASSERSTEIN_CAP {
        return Err(StatsError::TooLarge(n));
    }
    let cost = |i: usize, j: usize| match order {
        WassersteinOrder::W1 => distance(x.row(i), y.row(j)),
        WassersteinOrder::W2 => sq_distance(x.row(i), y.row(j)),
    };
    let mut matrix = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            matrix.push(cost(i, j));
        }
    }
    let perm = assignment(&matrix, n);
    let total: f64 = perm.iter().enumerate().map(|(i, &j)| matrix[i * n + j]).sum();
    let mean = total / n as f64;
    Ok(match order {
        WassersteinOrder::W1 => mean,
        WassersteinOrder::W2 => mean.sqrt(),
    })
}

pub const METRICS_HEADER: &str = "method,steps,seed,n,mmd,wsd,energy_u,energy_v,bandwidth";

/// One evaluation of a generated batch against reference data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub steps: usize,
    pub seed: u64,
    pub n: usize,
    pub mmd: f64,
    pub wsd: f64,
    pub energy_u: f64,
    pub energy_v: f64,
    pub bandwidth: f64,
}

impl MetricsReport {
    /// Computes every metric; both sets must have the same size.
    pub fn compute(
        method: &str,
        steps: usize,
        seed: u64,
        generated: &Tensor,
        reference: &Tensor,
    ) -> Result<Self, StatsError> {
        let (mmd, bandwidth) = mmd_gaussian(generated, reference, Bandwidth::Median)?;
        Ok(Self {
            method: method.to_string(),
            steps,
            seed,
            n: generated.rows(),
            mmd,
            wsd: wasserstein_assignment(generated, reference, WassersteinOrder::W1)?,
            energy_u: energy_statistic(generated, reference, EnergyEstimatorConfig::U)?,
            energy_v: energy_statistic(generated, reference, EnergyEstimatorConfig::V)?,
            bandwidth,
        })
    }

    /// CSV row matching [`METRICS_HEADER`]; floats in shortest round-trip form.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.method,
            self.steps,
            self.seed,
            self.n,
            self.mmd,
            self.wsd,
            self.energy_u,
            self.energy_v,
            self.bandwidth
        )
    }
}
