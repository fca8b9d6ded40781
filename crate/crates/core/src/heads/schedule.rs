use std::f64::consts::FRAC_PI_2;

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Cosine ᾱ schedule. `alpha_bar[t]` for `t ∈ 0..=T` with `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineSchedule {
    alpha_bar: Vec<f64>,
}

impl CosineSchedule {
    pub fn new(steps: usize) -> Self {
        assert!(steps >= 1, "diffusion needs at least one step");
        let f = |t: usize| {
            let u = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (u * FRAC_PI_2).cos().powi(2)
        };
        let mut alpha_bar = vec![1.0];
        let mut acc = 1.0;
        for t in 1..=steps {
            let beta = (1.0 - f(t) / f(t - 1)).clamp(0.0, MAX_BETA);
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Self { alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Evenly re-spaced subset of `1..=T` with `count` entries, always ending at `T`.
    pub fn respaced(&self, count: usize) -> Vec<usize> {
        let t_max = self.steps();
        let count = count.clamp(1, t_max);
        if count == 1 {
            return vec![t_max];
        }
        let mut ts: Vec<usize> = (0..count)
            .map(|i| 1 + ((t_max - 1) as f64 * i as f64 / (count - 1) as f64).round() as usize)
            .collect();
        ts.dedup();
        ts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_monotone_and_bounded() {
        let s = CosineSchedule::new(100);
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=100 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0);
        }
        assert!(s.alpha_bar(100) < 1e-5);
    }

    #[test]
    fn respacing() {
        let s = CosineSchedule::new(100);
        assert_eq!(s.respaced(1), vec![100]);
        assert_eq!(s.respaced(4), vec![1, 34, 67, 100]);
        assert_eq!(s.respaced(100), (1..=100).collect::<Vec<_>>());
        assert_eq!(s.respaced(500).len(), 100);
    }
}
