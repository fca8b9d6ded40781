use crate::autodiff::{Graph, NodeId, NORM_EPS};

use super::HeadError;

fn smoothed_distance(a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
    (s + NORM_EPS * NORM_EPS).sqrt()
}

/// `‖x₁−y‖ + ‖x₂−y‖ − ‖x₁−x₂‖` with ε-smoothed norms.
pub fn energy_loss_pair(x1: &[f64], x2: &[f64], y: &[f64]) -> f64 {
    smoothed_distance(x1, y) + smoothed_distance(x2, y) - smoothed_distance(x1, x2)
}

/// `(2/m)Σᵢ‖xᵢ−y‖ − (1/(m(m−1)))Σ_{i≠j}‖xᵢ−xⱼ‖` for `m ≥ 2` samples.
pub fn energy_loss_m(samples: &[&[f64]], y: &[f64]) -> Result<f64, HeadError> {
    let m = samples.len();
    if m < 2 {
        return Err(HeadError::TooFewSamples(m));
    }
    let attract: f64 = samples.iter().map(|x| smoothed_distance(x, y)).sum();
    let mut repel = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                repel += smoothed_distance(samples[i], samples[j]);
            }
        }
    }
    let mf = m as f64;
    Ok(2.0 / mf * attract - 1.0 / (mf * (mf - 1.0)) * repel)
}

/// Graph form of [`energy_loss_m`] over rows: `xs[i]` and `y` are `[n, d]`,
/// the result is the `[n, 1]` per-row loss.
pub fn energy_loss_rows(g: &mut Graph, xs: &[NodeId], y: NodeId) -> Result<NodeId, HeadError> {
    let m = xs.len();
    if m < 2 {
        return Err(HeadError::TooFewSamples(m));
    }
    let mf = m as f64;
    let mut attract: Option<NodeId> = None;
    for &x in xs {
        let d = g.sub(x, y);
        let n = g.row_norm(d);
        attract = Some(match attract {
            Some(a) => g.add(a, n),
            None => n,
        });
    }
    let mut repel: Option<NodeId> = None;
    for i in 0..m {
        for j in i + 1..m {
            let d = g.sub(xs[i], xs[j]);
            let n = g.row_norm(d);
            repel = Some(match repel {
                Some(r) => g.add(r, n),
                None => n,
            });
        }
    }
    let a = g.scale(attract.unwrap(), 2.0 / mf);
    // Each unordered pair appears twice in the i ≠ j sum.
    let r = g.scale(repel.unwrap(), 2.0 / (mf * (mf - 1.0)));
    Ok(g.sub(a, r))
}
