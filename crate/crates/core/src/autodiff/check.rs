use std::collections::HashMap;

use super::exec::{backward, evaluate, jvp};
use super::graph::{Graph, NodeId};
use super::{AutodiffError, Tensor, TensorMap};

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Maximum relative error between backward gradients of the scalar `output`
/// and fourth-order central finite differences, over every component of every
/// trainable leaf.
pub fn grad_check(
    graph: &Graph,
    output: NodeId,
    point: &TensorMap,
    step: f64,
) -> Result<f64, AutodiffError> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let eval = evaluate(graph, point)?;
    let grads = backward(graph, &eval, output)?;
    let mut work: TensorMap = point.clone();
    let mut worst = 0.0f64;
    for (name, analytic) in grads.iter() {
        for k in 0..analytic.len() {
            let orig = point[name.as_str()].data()[k];
            let mut at = |offset: f64| -> Result<f64, AutodiffError> {
                work.get_mut(name.as_str()).unwrap().data_mut()[k] = orig + offset;
                let v = evaluate(graph, &work)?.value(output).item();
                work.get_mut(name.as_str()).unwrap().data_mut()[k] = orig;
                Ok(v)
            };
            let numeric = (8.0 * (at(step)? - at(-step)?) - (at(2.0 * step)? - at(-2.0 * step)?))
                / (12.0 * step);
            worst = worst.max(rel_err(analytic.data()[k], numeric));
        }
    }
    Ok(worst)
}

/// Like [`grad_check`], but each component's numeric derivative is taken at
/// whichever of `steps` (largest first) agrees best with the next larger
/// step. Covers both strongly curved and nearly flat directions, where a
/// single step is either truncation- or roundoff-limited.
pub fn grad_check_adaptive(
    graph: &Graph,
    output: NodeId,
    point: &TensorMap,
    steps: &[f64],
) -> Result<f64, AutodiffError> {
    assert!(steps.len() >= 2, "need at least two finite-difference steps");
    let eval = evaluate(graph, point)?;
    let grads = backward(graph, &eval, output)?;
    let mut work: TensorMap = point.clone();
    let mut worst = 0.0f64;
    for (name, analytic) in grads.iter() {
        for k in 0..analytic.len() {
            let orig = point[name.as_str()].data()[k];
            let mut at = |offset: f64| -> Result<f64, AutodiffError> {
                work.get_mut(name.as_str()).unwrap().data_mut()[k] = orig + offset;
                let v = evaluate(graph, &work)?.value(output).item();
                work.get_mut(name.as_str()).unwrap().data_mut()[k] = orig;
                Ok(v)
            };
            let mut estimates = Vec::with_capacity(steps.len());
            for &h in steps {
                estimates.push((8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h));
            }
            let numeric = estimates
                .windows(2)
                .min_by(|a, b| (a[0] - a[1]).abs().total_cmp(&(b[0] - b[1]).abs()))
                .map(|w| w[1])
                .expect("at least two steps");
            worst = worst.max(rel_err(analytic.data()[k], numeric));
        }
    }
    Ok(worst)
}

/// Relative gap between `⟨∇output, tangent⟩` from backward and the jvp of
/// `output`, with tangents on every leaf (zeros for non-trainable ones unless given).
pub fn jvp_consistency(
    graph: &Graph,
    output: NodeId,
    point: &TensorMap,
    tangents: &TensorMap,
) -> Result<f64, AutodiffError> {
    let eval = evaluate(graph, point)?;
    let grads = backward(graph, &eval, output)?;
    let mut full: HashMap<String, Tensor> = HashMap::new();
    for (name, _) in graph.leaf_names() {
        let t = tangents
            .get(&name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(point[name.as_str()].shape()));
        full.insert(name, t);
    }
    let forward = jvp(graph, &eval, output, &full)?.item();
    let mut reverse = 0.0;
    for (name, g) in grads.iter() {
        reverse += g.dot(&full[name.as_str()]);
    }
    Ok((forward - reverse).abs() / forward.abs().max(reverse.abs()).max(1e-12))
}
