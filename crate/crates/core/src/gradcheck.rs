//! Gradient verification at random points for every graph primitive and the
//! composite losses built on them.

use crate::autodiff::{evaluate, grad_check_adaptive, jvp_consistency, Graph, NodeId, Tensor, TensorMap};
use crate::data::rng::Stream;
use crate::heads::train::ToyHead;
use crate::heads::{energy_loss_rows, HeadConfig, HeadKind};
use crate::nn::{AdaLnResBlock, ParamStore, TransformerBlock};

pub const GRAD_TOL: f64 = 1e-5;
pub const JVP_TOL: f64 = 1e-8;
/// Finite-difference steps tried per component, largest first.
pub const FD_STEPS: [f64; 3] = [1e-2, 1e-3, 1e-4];

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub name: String,
    pub points: usize,
    pub max_grad_err: f64,
    pub max_jvp_err: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_grad_err <= GRAD_TOL && self.max_jvp_err <= JVP_TOL
    }
}

type Built = (Graph, NodeId, TensorMap);

fn normal(s: &mut Stream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, s.normals(n))
}

/// Reduces `y` to a scalar through a random weighting so that every output
/// component carries gradient.
fn weighted(mut g: Graph, y: NodeId, mut m: TensorMap, s: &mut Stream) -> Built {
    let shape = evaluate(&g, &m).expect("case evaluates").value(y).shape().to_vec();
    let w = g.input("w");
    m.insert("w".into(), normal(s, &shape));
    let wy = g.mul(y, w);
    let out = g.sum(wy);
    (g, out, m)
}

/// Leaves `a` (and `b`), trainable, with the given shapes.
fn unary(s: &mut Stream, shape: &[usize], f: impl Fn(&mut Graph, NodeId) -> NodeId) -> Built {
    let mut g = Graph::new();
    let a = g.param("a");
    let y = f(&mut g, a);
    let m: TensorMap = [("a".to_string(), normal(s, shape))].into_iter().collect();
    weighted(g, y, m, s)
}

fn binary(
    s: &mut Stream,
    sa: &[usize],
    sb: &[usize],
    f: impl Fn(&mut Graph, NodeId, NodeId) -> NodeId,
) -> Built {
    let mut g = Graph::new();
    let a = g.param("a");
    let b = g.param("b");
    let y = f(&mut g, a, b);
    let m: TensorMap = [("a".to_string(), normal(s, sa)), ("b".to_string(), normal(s, sb))]
        .into_iter()
        .collect();
    weighted(g, y, m, s)
}

fn randomized(store: &mut ParamStore, s: &mut Stream, scale: f64) -> TensorMap {
    for p in store.iter_mut() {
        let v = s.normals(p.tensor.len()).into_iter().map(|x| scale * x).collect();
        p.tensor = Tensor::from_vec(p.tensor.shape(), v);
    }
    store.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect()
}

fn energy_case(s: &mut Stream, m: usize) -> Built {
    let mut g = Graph::new();
    let xs: Vec<NodeId> = (0..m).map(|i| g.param(&format!("x{i}"))).collect();
    let y = g.input("y");
    let per_row = energy_loss_rows(&mut g, &xs, y).expect("m >= 2");
    let out = g.mean(per_row);
    let mut b: TensorMap = (0..m).map(|i| (format!("x{i}"), normal(s, &[4, 2]))).collect();
    b.insert("y".into(), normal(s, &[4, 2]));
    (g, out, b)
}

fn adaln_case(s: &mut Stream) -> Built {
    let block = AdaLnResBlock::new("blk", 3, 2);
    let mut store = ParamStore::new(0);
    block.register(&mut store);
    let mut m = randomized(&mut store, s, 1.0);
    let mut g = Graph::new();
    let x = g.param("x");
    let c = g.param("c");
    let y = block.forward(&mut g, x, c);
    m.insert("x".into(), normal(s, &[2, 3]));
    m.insert("c".into(), normal(s, &[2, 2]));
    weighted(g, y, m, s)
}

fn transformer_case(s: &mut Stream) -> Built {
    let block = TransformerBlock::new("tb", 4, 2).expect("4 divides into 2 heads");
    let mut store = ParamStore::new(0);
    block.register(&mut store);
    let mut m = randomized(&mut store, s, 0.5);
    let mut g = Graph::new();
    let x = g.param("x");
    let y = block.forward(&mut g, x, 2, 3).output;
    m.insert("x".into(), normal(s, &[2, 3, 4]));
    weighted(g, y, m, s)
}

fn head_case(s: &mut Stream, kind: HeadKind) -> Built {
    let toy = ToyHead::new(HeadConfig {
        kind,
        context_dim: 3,
        width: 4,
        depth: 1,
        shortcut_consistency_fraction: 0.5,
        meanflow_adaptive_p: 1.0,
        ..HeadConfig::default()
    })
    .expect("valid head config");
    let mut store = toy.init(0);
    let mut m = randomized(&mut store, s, 0.4);
    let y = normal(s, &[4, 2]);
    let (g, mean, loss) = toy.loss_graph(&store, &y, s).expect("loss builds");
    m.extend(loss.bindings.iter().map(|(k, v)| (k.clone(), v.clone())));
    (g, mean, m)
}

/// Names of every case, in report order.
pub fn case_names() -> Vec<String> {
    let mut names: Vec<String> = [
        "matmul",
        "matmul-leading-dims",
        "batch-matmul",
        "batch-matmul-transposed",
        "add",
        "subtract",
        "multiply",
        "scale",
        "silu",
        "layer-norm",
        "softmax",
        "mean",
        "sum",
        "sum-of-squares",
        "row-norm",
        "row-norm-eps",
        "concat-rows",
        "concat-cols",
        "slice",
        "broadcast",
        "reshape",
        "permute",
        "stop-gradient",
        "energy-loss-pair",
        "energy-loss-m3",
        "adaln-block",
        "transformer-block",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    names.extend(HeadKind::ALL.iter().map(|k| format!("{k}-head-loss")));
    names
}

fn build(name: &str, s: &mut Stream) -> Built {
    match name {
        "matmul" => binary(s, &[3, 4], &[4, 2], |g, a, b| g.matmul(a, b)),
        "matmul-leading-dims" => binary(s, &[2, 3, 4], &[4, 2], |g, a, b| g.matmul(a, b)),
        "batch-matmul" => binary(s, &[2, 3, 4], &[2, 4, 5], |g, a, b| g.batch_matmul(a, b, false)),
        "batch-matmul-transposed" => binary(s, &[2, 3, 4], &[2, 5, 4], |g, a, b| g.batch_matmul(a, b, true)),
        "add" => binary(s, &[3, 4], &[3, 4], |g, a, b| g.add(a, b)),
        "subtract" => binary(s, &[3, 4], &[3, 4], |g, a, b| g.sub(a, b)),
        "multiply" => binary(s, &[3, 4], &[3, 4], |g, a, b| g.mul(a, b)),
        "scale" => unary(s, &[3, 4], |g, a| g.scale(a, -1.7)),
        "silu" => unary(s, &[3, 4], |g, a| g.silu(a)),
        "layer-norm" => unary(s, &[3, 5], |g, a| g.layer_norm(a)),
        "softmax" => unary(s, &[3, 5], |g, a| g.softmax(a)),
        "mean" => unary(s, &[3, 4], |g, a| g.mean(a)),
        "sum" => unary(s, &[3, 4], |g, a| g.sum(a)),
        "sum-of-squares" => unary(s, &[3, 4], |g, a| g.sum_squares(a)),
        "row-norm" => unary(s, &[4, 3], |g, a| g.row_norm(a)),
        "row-norm-eps" => unary(s, &[4, 3], |g, a| g.row_norm_eps(a, 0.5)),
        "concat-rows" => binary(s, &[2, 3], &[4, 3], |g, a, b| g.concat(&[a, b], 0)),
        "concat-cols" => binary(s, &[3, 2], &[3, 4], |g, a, b| g.concat(&[a, b, a], 1)),
        "slice" => unary(s, &[3, 6], |g, a| g.slice(a, 1, 1, 4)),
        "broadcast" => binary(s, &[2, 3, 4], &[1, 4], |g, a, b| g.mul_broadcast(a, b)),
        "reshape" => unary(s, &[3, 4], |g, a| g.reshape(a, &[2, 6])),
        "permute" => unary(s, &[2, 3, 4], |g, a| g.permute(a, &[2, 0, 1])),
        "stop-gradient" => {
            // Finite differences see through a stopped trainable leaf, so the
            // stopped operand here is a plain input.
            let mut g = Graph::new();
            let a = g.param("a");
            let c = g.input("c");
            let sc = g.stop_gradient(c);
            let y = g.mul(a, sc);
            let m: TensorMap = [("a".to_string(), normal(s, &[3, 4])), ("c".to_string(), normal(s, &[3, 4]))]
                .into_iter()
                .collect();
            weighted(g, y, m, s)
        }
        "energy-loss-pair" => energy_case(s, 2),
        "energy-loss-m3" => energy_case(s, 3),
        "adaln-block" => adaln_case(s),
        "transformer-block" => transformer_case(s),
        other => {
            let kind = other
                .strip_suffix("-head-loss")
                .and_then(HeadKind::parse)
                .unwrap_or_else(|| panic!("unknown gradcheck case {other}"));
            head_case(s, kind)
        }
    }
}

/// Checks one case at `points` random points drawn from `seed`.
pub fn check_case(name: &str, points: usize, seed: u64) -> CaseReport {
    let root = Stream::new(seed, &format!("gradcheck/{name}"));
    let mut report = CaseReport {
        name: name.to_string(),
        points,
        max_grad_err: 0.0,
        max_jvp_err: 0.0,
    };
    for i in 0..points {
        let mut s = root.child_index("point", i as u64);
        let (g, out, point) = build(name, &mut s);
        let grad = grad_check_adaptive(&g, out, &point, &FD_STEPS).unwrap_or(f64::INFINITY);
        let tangents: TensorMap = g
            .leaf_names()
            .into_iter()
            .filter(|(_, trainable)| *trainable)
            .map(|(n, _)| {
                let t = normal(&mut s, point[&n].shape());
                (n, t)
            })
            .collect();
        let jvp = jvp_consistency(&g, out, &point, &tangents).unwrap_or(f64::INFINITY);
        report.max_grad_err = report.max_grad_err.max(grad);
        report.max_jvp_err = report.max_jvp_err.max(jvp);
    }
    report
}

/// Every case, each at `points` random points.
pub fn run_suite(points: usize, seed: u64) -> Vec<CaseReport> {
    use rayon::prelude::*;
    case_names().par_iter().map(|n| check_case(n, points, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_at_a_few_points() {
        for r in run_suite(5, 11) {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    #[ignore]
    fn full_suite_report() {
        let t = std::time::Instant::now();
        for r in run_suite(100, 1) {
            println!("{:28} grad {:.2e} jvp {:.2e} {}", r.name, r.max_grad_err, r.max_jvp_err, r.passed());
        }
        println!("{:?}", t.elapsed());
    }
}

