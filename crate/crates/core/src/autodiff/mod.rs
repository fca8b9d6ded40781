//! Minimal differentiable tensor engine.
//!
//! A [`Graph`] is built once by appending primitive nodes; it never changes
//! afterwards and can be shared across threads. [`evaluate`] binds named
//! leaves and caches every intermediate value in an [`Evaluation`] private to
//! the caller, which then feeds [`backward`] (reverse mode) or [`jvp`]
//! (forward mode). Everything is `f64` and evaluated in a fixed order, so
//! identical inputs give bit-identical results.

mod check;
mod exec;
mod graph;
mod kernels;
mod tensor;

use std::collections::HashMap;

pub use check::{grad_check, grad_check_adaptive, jvp_consistency};
pub use exec::{backward, evaluate, jvp, jvp_partial};
pub use graph::{Bindings, Chain, Evaluation, Gradients, Graph, NodeId, Op};
pub use tensor::Tensor;


/// ε of the smoothed Euclidean norm `sqrt(Σv² + ε²)`.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: String,
        detail: String,
    },
    #[error("no binding for leaf '{0}'")]
    MissingBinding(String),
    #[error("non-finite value in input '{0}'")]
    NonFiniteInput(String),
    #[error("backward/jvp called without a forward evaluation of this graph")]
    NotEvaluated,
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("missing tangent for leaf '{0}'")]
    MissingTangent(String),
    #[error("data of length {len} does not fill shape {shape:?}")]
    BadData { shape: Vec<usize>, len: usize },
}

/// Convenience map type for leaf bindings and tangents.
pub type TensorMap = HashMap<String, Tensor>;

/// Evaluates then returns the directional derivative of `output`.
pub fn jvp_at(
    graph: &Graph,
    bindings: &dyn Bindings,
    output: NodeId,
    tangents: &TensorMap,
) -> Result<Tensor, AutodiffError> {
    let eval = evaluate(graph, bindings)?;
    jvp(graph, &eval, output, tangents)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Tensor)]) -> TensorMap {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let mut g = Graph::new();
        let i = g.input("i");
        let a = g.input("a");
        let out = g.matmul(i, a);
        let av = Tensor::matrix(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.5]]);
        let b = bind(&[("i", Tensor::eye(3)), ("a", av.clone())]);
        let e = evaluate(&g, &b).unwrap();
        assert_eq!(e.value(out), &av);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.input("x");
        let s = g.softmax(x);
        let e = evaluate(&g, &bind(&[("x", Tensor::matrix(&[&[0.0, 0.0, 0.0]]))])).unwrap();
        for v in e.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_of_squares_hand_value() {
        let mut g = Graph::new();
        let x = g.input("x");
        let s = g.sum_squares(x);
        let e = evaluate(&g, &bind(&[("x", Tensor::vector(&[3.0, 4.0]))])).unwrap();
        assert_eq!(e.value(s).item(), 25.0);
    }

    #[test]
    fn backward_sum_of_self_product() {
        let mut g = Graph::new();
        let x = g.param("x");
        let sq = g.mul(x, x);
        let out = g.sum(sq);
        let e = evaluate(&g, &bind(&[("x", Tensor::vector(&[1.0, 2.0, 3.0]))])).unwrap();
        let grads = backward(&g, &e, out).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_row_norm_is_unit_direction() {
        let mut g = Graph::new();
        let x = g.param("x");
        let n = g.row_norm(x);
        let out = g.sum(n);
        let e = evaluate(&g, &bind(&[("x", Tensor::matrix(&[&[3.0, 4.0]]))])).unwrap();
        let grads = backward(&g, &e, out).unwrap();
        let d = grads.get("x").unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn stop_gradient_blocks_upstream() {
        let mut g = Graph::new();
        let x = g.param("x");
        let s = g.stop_gradient(x);
        let sq = g.sum_squares(s);
        let e = evaluate(&g, &bind(&[("x", Tensor::vector(&[1.0, -2.0]))])).unwrap();
        assert_eq!(e.value(s).data(), &[1.0, -2.0]);
        let grads = backward(&g, &e, sq).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn jvp_examples() {
        // x² at 3 along 1.
        let mut g = Graph::new();
        let x = g.input("x");
        let sq = g.mul(x, x);
        let t = jvp_at(
            &g,
            &bind(&[("x", Tensor::scalar(3.0))]),
            sq,
            &bind(&[("x", Tensor::scalar(1.0))]),
        )
        .unwrap();
        assert_eq!(t.item(), 6.0);

        // Linear map A·v.
        let mut g = Graph::new();
        let a = g.input("a");
        let v = g.input("v");
        let av = g.matmul(v, a);
        let am = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let dir = Tensor::matrix(&[&[0.5, -1.0]]);
        let t = jvp_at(
            &g,
            &bind(&[("a", am.clone()), ("v", Tensor::matrix(&[&[1.0, 1.0]]))]),
            av,
            &bind(&[("a", Tensor::zeros(&[2, 2])), ("v", dir)]),
        )
        .unwrap();
        assert_eq!(t.data(), &[0.5 - 3.0, 1.0 - 4.0]);

        // ‖x‖ at (3,4) along (1,0).
        let mut g = Graph::new();
        let x = g.input("x");
        let n = g.row_norm(x);
        let t = jvp_at(
            &g,
            &bind(&[("x", Tensor::matrix(&[&[3.0, 4.0]]))]),
            n,
            &bind(&[("x", Tensor::matrix(&[&[1.0, 0.0]]))]),
        )
        .unwrap();
        assert!((t.item() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn errors_are_reported() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let c = g.add(a, b);
        let err = evaluate(
            &g,
            &bind(&[("a", Tensor::zeros(&[2])), ("b", Tensor::zeros(&[3]))]),
        )
        .unwrap_err();
        assert!(matches!(err, AutodiffError::ShapeMismatch { node: 2, .. }));

        let err = evaluate(&g, &bind(&[("a", Tensor::vector(&[f64::NAN, 0.0]))])).unwrap_err();
        assert_eq!(err, AutodiffError::NonFiniteInput("a".into()));

        let ok = bind(&[("a", Tensor::zeros(&[2])), ("b", Tensor::zeros(&[2]))]);
        let e = evaluate(&g, &ok).unwrap();
        assert!(matches!(
            backward(&g, &e, c).unwrap_err(),
            AutodiffError::NonScalarOutput(_)
        ));
        let other = Graph::new();
        assert_eq!(
            backward(&other, &e, c).unwrap_err(),
            AutodiffError::NotEvaluated
        );
        let err = jvp(&g, &e, c, &bind(&[("a", Tensor::zeros(&[2]))])).unwrap_err();
        assert_eq!(err, AutodiffError::MissingTangent("b".into()));
    }

    #[test]
    fn gradients_are_reported_for_unused_params() {
        let mut g = Graph::new();
        let x = g.param("x");
        let _unused = g.param("u");
        let s = g.sum(x);
        let e = evaluate(
            &g,
            &bind(&[("x", Tensor::vector(&[1.0])), ("u", Tensor::vector(&[5.0, 6.0]))]),
        )
        .unwrap();
        let grads = backward(&g, &e, s).unwrap();
        assert_eq!(grads.get("u").unwrap().data(), &[0.0, 0.0]);
    }
}
