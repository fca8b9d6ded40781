use std::collections::HashMap;

use super::graph::{shape_err, Bindings, Evaluation, Gradients, Graph, NodeId, Op};
use super::kernels::{self, gemm};
use super::{AutodiffError, Tensor};

fn split_rows(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let rows = if shape.is_empty() {
        1
    } else {
        shape[..shape.len() - 1].iter().product()
    };
    (rows, cols)
}

fn broadcast_ok(input: &[usize], target: &[usize]) -> bool {
    if input.len() > target.len() {
        return false;
    }
    let off = target.len() - input.len();
    input
        .iter()
        .enumerate()
        .all(|(i, &d)| d == 1 || d == target[off + i])
}

/// Outer count, axis extent and inner count for axis-wise ops.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn concat_values(parts: &[&Tensor], axis: usize) -> Tensor {
    let mut shape = parts[0].shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let (outer, _, inner) = axis_split(&shape, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::from_vec(&shape, data)
}

fn slice_values(t: &Tensor, axis: usize, start: usize, end: usize) -> Tensor {
    let (outer, extent, inner) = axis_split(t.shape(), axis);
    let mut shape = t.shape().to_vec();
    shape[axis] = end - start;
    let mut data = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        let base = o * extent * inner;
        data.extend_from_slice(&t.data()[base + start * inner..base + end * inner]);
    }
    Tensor::from_vec(&shape, data)
}

/// Scatter `g` (shape of the slice) into zeros of `full_shape`.
fn unslice(g: &Tensor, full_shape: &[usize], axis: usize, start: usize) -> Tensor {
    let (outer, extent, inner) = axis_split(full_shape, axis);
    let width = g.shape()[axis];
    let mut out = vec![0.0; full_shape.iter().product()];
    for o in 0..outer {
        let dst = o * extent * inner + start * inner;
        let src = o * width * inner;
        out[dst..dst + width * inner].copy_from_slice(&g.data()[src..src + width * inner]);
    }
    Tensor::from_vec(full_shape, out)
}

fn broadcast_values(t: &Tensor, target: &[usize]) -> Tensor {
    let total: usize = target.iter().product();
    if t.shape() == target {
        return t.clone();
    }
    let n = t.len();
    // Trailing-contiguous repeat (bias rows).
    let off = target.len() - t.ndim();
    if n > 0 && total % n == 0 && t.shape().iter().zip(&target[off..]).all(|(a, b)| a == b) {
        let mut data = Vec::with_capacity(total);
        for _ in 0..total / n {
            data.extend_from_slice(t.data());
        }
        return Tensor::from_vec(target, data);
    }
    let map = kernels::broadcast_index_map(t.shape(), target);
    Tensor::from_vec(target, map.iter().map(|&i| t.data()[i]).collect())
}

fn unbroadcast(g: &Tensor, in_shape: &[usize]) -> Tensor {
    if g.shape() == in_shape {
        return g.clone();
    }
    let mut out = vec![0.0; in_shape.iter().product()];
    let n = out.len();
    let off = g.ndim() - in_shape.len();
    if n > 0 && g.len() % n == 0 && in_shape.iter().zip(&g.shape()[off..]).all(|(a, b)| a == b) {
        for chunk in g.data().chunks_exact(n) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        return Tensor::from_vec(in_shape, out);
    }
    let map = kernels::broadcast_index_map(in_shape, g.shape());
    for (&src, v) in map.iter().zip(g.data()) {
        out[src] += v;
    }
    Tensor::from_vec(in_shape, out)
}

fn permute_values(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
    let map = kernels::permute_index_map(t.shape(), perm);
    Tensor::from_vec(&shape, map.iter().map(|&i| t.data()[i]).collect())
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn matmul_values(a: &Tensor, b: &Tensor) -> Tensor {
    let (rows, k) = split_rows(a.shape());
    let m = b.shape()[1];
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = m;
    Tensor::from_vec(&shape, kernels::matmul(rows, k, m, a.data(), b.data()))
}

/// Batched product; `b` is `[B, k, m]`, or `[B, m, k]` when `transpose_b`.
fn bmm_values(a: &Tensor, b: &Tensor, transpose_b: bool) -> Tensor {
    let (batch, n, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let m = if transpose_b { b.shape()[1] } else { b.shape()[2] };
    let mut out = vec![0.0; batch * n * m];
    for i in 0..batch {
        let ad = &a.data()[i * n * k..(i + 1) * n * k];
        let bd = &b.data()[i * k * m..(i + 1) * k * m];
        let (rs, cs) = if transpose_b { (1, k) } else { (m, 1) };
        gemm(n, k, m, ad, k, 1, bd, rs, cs, 0.0, &mut out[i * n * m..(i + 1) * n * m]);
    }
    Tensor::from_vec(&[batch, n, m], out)
}

fn check_same(graph: &Graph, id: NodeId, a: &Tensor, b: &Tensor) -> Result<(), AutodiffError> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            graph,
            id,
            format!("operands {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn forward_node(graph: &Graph, id: NodeId, vals: &[Tensor]) -> Result<Tensor, AutodiffError> {
    let v = |n: &NodeId| &vals[n.0];
    let out = match graph.op(id) {
        Op::Input { .. } => unreachable!("leaves are bound before evaluation"),
        Op::Constant(t) => t.clone(),
        Op::MatMul(a, b) => {
            let (a, b) = (v(a), v(b));
            if b.ndim() != 2 || a.ndim() == 0 || a.cols() != b.shape()[0] {
                return Err(shape_err(
                    graph,
                    id,
                    format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
                ));
            }
            matmul_values(a, b)
        }
        Op::BatchMatMul { a, b, transpose_b } => {
            let (a, b) = (v(a), v(b));
            let ok = a.ndim() == 3
                && b.ndim() == 3
                && a.shape()[0] == b.shape()[0]
                && if *transpose_b {
                    a.shape()[2] == b.shape()[2]
                } else {
                    a.shape()[2] == b.shape()[1]
                };
            if !ok {
                return Err(shape_err(
                    graph,
                    id,
                    format!(
                        "cannot batch-multiply {:?} by {:?} (transpose_b = {})",
                        a.shape(),
                        b.shape(),
                        transpose_b
                    ),
                ));
            }
            bmm_values(a, b, *transpose_b)
        }
        Op::Add(a, b) => {
            check_same(graph, id, v(a), v(b))?;
            v(a).zip_map(v(b), |x, y| x + y)
        }
        Op::Sub(a, b) => {
            check_same(graph, id, v(a), v(b))?;
            v(a).zip_map(v(b), |x, y| x - y)
        }
        Op::Mul(a, b) => {
            check_same(graph, id, v(a), v(b))?;
            v(a).zip_map(v(b), |x, y| x * y)
        }
        Op::Scale(a, c) => {
            let c = *c;
            v(a).map(|x| x * c)
        }
        Op::Silu(a) => v(a).map(kernels::silu),
        Op::LayerNorm(a) => {
            let a = v(a);
            Tensor::from_vec(a.shape(), kernels::layer_norm(a.data(), a.cols()))
        }
        Op::Softmax(a) => {
            let a = v(a);
            Tensor::from_vec(a.shape(), kernels::softmax(a.data(), a.cols()))
        }
        Op::Mean(a) => {
            let a = v(a);
            if a.is_empty() {
                return Err(shape_err(graph, id, "mean of an empty tensor".into()));
            }
            Tensor::scalar(a.sum() / a.len() as f64)
        }
        Op::Sum(a) => Tensor::scalar(v(a).sum()),
        Op::SumSquares(a) => Tensor::scalar(v(a).data().iter().map(|x| x * x).sum()),
        Op::RowNorm(a, eps) => {
            let a = v(a);
            let eps2 = eps * eps;
            let mut shape = a.shape().to_vec();
            if shape.is_empty() {
                shape.push(1);
            } else {
                *shape.last_mut().unwrap() = 1;
            }
            let data = a
                .data()
                .chunks_exact(a.cols().max(1))
                .map(|r| (r.iter().map(|x| x * x).sum::<f64>() + eps2).sqrt())
                .collect();
            Tensor::from_vec(&shape, data)
        }
        Op::Concat { inputs, axis } => {
            let parts: Vec<&Tensor> = inputs.iter().map(v).collect();
            if parts.is_empty() {
                return Err(shape_err(graph, id, "concat of zero inputs".into()));
            }
            let first = parts[0].shape();
            let ok = *axis < first.len()
                && parts.iter().all(|p| {
                    p.ndim() == first.len()
                        && p
                            .shape()
                            .iter()
                            .zip(first)
                            .enumerate()
                            .all(|(i, (a, b))| i == *axis || a == b)
                });
            if !ok {
                let shapes: Vec<_> = parts.iter().map(|p| p.shape().to_vec()).collect();
                return Err(shape_err(
                    graph,
                    id,
                    format!("cannot concat {shapes:?} on axis {axis}"),
                ));
            }
            concat_values(&parts, *axis)
        }
        Op::Slice {
            input,
            axis,
            start,
            end,
        } => {
            let t = v(input);
            if *axis >= t.ndim() || start > end || *end > t.shape()[*axis] {
                return Err(shape_err(
                    graph,
                    id,
                    format!("slice {start}..{end} on axis {axis} of {:?}", t.shape()),
                ));
            }
            slice_values(t, *axis, *start, *end)
        }
        Op::Broadcast { input, like } => {
            let (t, target) = (v(input), v(like).shape());
            if !broadcast_ok(t.shape(), target) {
                return Err(shape_err(
                    graph,
                    id,
                    format!("cannot broadcast {:?} to {:?}", t.shape(), target),
                ));
            }
            broadcast_values(t, target)
        }
        Op::Reshape { input, shape } => {
            let t = v(input);
            let n: usize = shape.iter().product();
            if n != t.len() {
                return Err(shape_err(
                    graph,
                    id,
                    format!("cannot reshape {:?} to {:?}", t.shape(), shape),
                ));
            }
            Tensor::from_vec(shape, t.data().to_vec())
        }
        Op::Permute { input, perm } => {
            let t = v(input);
            let mut sorted = perm.clone();
            sorted.sort_unstable();
            if perm.len() != t.ndim() || sorted.iter().enumerate().any(|(i, &p)| i != p) {
                return Err(shape_err(
                    graph,
                    id,
                    format!("permutation {perm:?} invalid for {:?}", t.shape()),
                ));
            }
            permute_values(t, perm)
        }
        Op::StopGradient(a) => v(a).clone(),
    };
    Ok(out)
}

/// Evaluates every node of `graph`, caching all intermediate values.
pub fn evaluate(graph: &Graph, bindings: &dyn Bindings) -> Result<Evaluation, AutodiffError> {
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.len());
    for (i, op) in graph.nodes().iter().enumerate() {
        let id = NodeId(i);
        let t = match op {
            Op::Input { name, .. } => {
                let t = bindings
                    .lookup(name)
                    .ok_or_else(|| AutodiffError::MissingBinding(name.clone()))?;
                if !t.is_finite() {
                    return Err(AutodiffError::NonFiniteInput(name.clone()));
                }
                t.clone()
            }
            _ => forward_node(graph, id, &values)?,
        };
        values.push(t);
    }
    Ok(Evaluation {
        graph_id: graph.id(),
        values,
    })
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Reverse-mode gradients of the scalar `output` with respect to every trainable leaf.
pub fn backward(
    graph: &Graph,
    eval: &Evaluation,
    output: NodeId,
) -> Result<Gradients, AutodiffError> {
    if eval.graph_id != graph.id() || eval.values.len() != graph.len() {
        return Err(AutodiffError::NotEvaluated);
    }
    let out_val = &eval.values[output.0];
    if out_val.len() != 1 {
        return Err(AutodiffError::NonScalarOutput(out_val.shape().to_vec()));
    }
    let need = graph.needs_grad();
    let vals = &eval.values;
    let mut grads: Vec<Option<Tensor>> = vec![None; graph.len()];
    grads[output.0] = Some(Tensor::from_vec(out_val.shape(), vec![1.0]));

    for i in (0..=output.0).rev() {
        if !need[i] {
            continue;
        }
        let Some(g) = grads[i].take() else { continue };
        let op = graph.op(NodeId(i));
        if let Op::Input { .. } = op {
            grads[i] = Some(g);
            continue;
        }
        let want = |n: &NodeId| need[n.0];
        match op {
            Op::Input { .. } | Op::Constant(_) | Op::StopGradient(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&vals[a.0], &vals[b.0]);
                let (rows, k) = split_rows(av.shape());
                let m = bv.shape()[1];
                if want(a) {
                    // g · bᵀ
                    let mut da = vec![0.0; rows * k];
                    gemm(rows, m, k, g.data(), m, 1, bv.data(), 1, m, 0.0, &mut da);
                    accumulate(&mut grads[a.0], Tensor::from_vec(av.shape(), da));
                }
                if want(b) {
                    // aᵀ · g
                    let mut db = vec![0.0; k * m];
                    gemm(k, rows, m, av.data(), 1, k, g.data(), m, 1, 0.0, &mut db);
                    accumulate(&mut grads[b.0], Tensor::from_vec(bv.shape(), db));
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (av, bv) = (&vals[a.0], &vals[b.0]);
                let (batch, n, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let m = if *transpose_b { bv.shape()[1] } else { bv.shape()[2] };
                if want(a) {
                    let mut da = vec![0.0; batch * n * k];
                    for i in 0..batch {
                        let gd = &g.data()[i * n * m..(i + 1) * n * m];
                        let bd = &bv.data()[i * k * m..(i + 1) * k * m];
                        // da = g · B̃ᵀ where B̃ is the effective [k, m] operand.
                        let (rs, cs) = if *transpose_b { (k, 1) } else { (1, m) };
                        gemm(n, m, k, gd, m, 1, bd, rs, cs, 0.0, &mut da[i * n * k..(i + 1) * n * k]);
                    }
                    accumulate(&mut grads[a.0], Tensor::from_vec(av.shape(), da));
                }
                if want(b) {
                    let mut db = vec![0.0; batch * k * m];
                    for i in 0..batch {
                        let gd = &g.data()[i * n * m..(i + 1) * n * m];
                        let ad = &av.data()[i * n * k..(i + 1) * n * k];
                        let dst = &mut db[i * k * m..(i + 1) * k * m];
                        if *transpose_b {
                            // d(bᵀ)ᵀ = gᵀ · a : [m, k]
                            gemm(m, n, k, gd, 1, m, ad, k, 1, 0.0, dst);
                        } else {
                            gemm(k, n, m, ad, 1, k, gd, m, 1, 0.0, dst);
                        }
                    }
                    accumulate(&mut grads[b.0], Tensor::from_vec(bv.shape(), db));
                }
            }
            Op::Add(a, b) => {
                if want(a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if want(b) {
                    accumulate(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if want(b) {
                    accumulate(&mut grads[b.0], g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    accumulate(&mut grads[a.0], g.zip_map(&vals[b.0], |x, y| x * y));
                }
                if want(b) {
                    accumulate(&mut grads[b.0], g.zip_map(&vals[a.0], |x, y| x * y));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(&mut grads[a.0], g.map(|x| x * c));
            }
            Op::Silu(a) => {
                let d = g.zip_map(&vals[a.0], |gv, x| gv * kernels::silu_grad(x));
                accumulate(&mut grads[a.0], d);
            }
            Op::LayerNorm(a) => {
                let x = &vals[a.0];
                let d = kernels::layer_norm_linearized(x.data(), g.data(), x.cols());
                accumulate(&mut grads[a.0], Tensor::from_vec(x.shape(), d));
            }
            Op::Softmax(a) => {
                let y = &vals[i];
                let d = kernels::softmax_linearized(y.data(), g.data(), y.cols());
                accumulate(&mut grads[a.0], Tensor::from_vec(y.shape(), d));
            }
            Op::Mean(a) => {
                let x = &vals[a.0];
                let s = g.item() / x.len() as f64;
                accumulate(&mut grads[a.0], Tensor::full(x.shape(), s));
            }
            Op::Sum(a) => {
                let x = &vals[a.0];
                accumulate(&mut grads[a.0], Tensor::full(x.shape(), g.item()));
            }
            Op::SumSquares(a) => {
                let s = 2.0 * g.item();
                accumulate(&mut grads[a.0], vals[a.0].map(|x| s * x));
            }
            Op::RowNorm(a, _) => {
                let x = &vals[a.0];
                let norms = &vals[i];
                let cols = x.cols().max(1);
                let mut d = Vec::with_capacity(x.len());
                for ((row, n), gv) in x.data().chunks_exact(cols).zip(norms.data()).zip(g.data()) {
                    d.extend(row.iter().map(|v| gv * v / n));
                }
                accumulate(&mut grads[a.0], Tensor::from_vec(x.shape(), d));
            }
            Op::Concat { inputs, axis } => {
                let mut start = 0;
                for inp in inputs {
                    let width = vals[inp.0].shape()[*axis];
                    if want(inp) {
                        accumulate(&mut grads[inp.0], slice_values(&g, *axis, start, start + width));
                    }
                    start += width;
                }
            }
            Op::Slice {
                input, axis, start, ..
            } => {
                let full = vals[input.0].shape();
                accumulate(&mut grads[input.0], unslice(&g, full, *axis, *start));
            }
            Op::Broadcast { input, .. } => {
                accumulate(&mut grads[input.0], unbroadcast(&g, vals[input.0].shape()));
            }
            Op::Reshape { input, .. } => {
                let shape = vals[input.0].shape();
                accumulate(&mut grads[input.0], Tensor::from_vec(shape, g.into_data()));
            }
            Op::Permute { input, perm } => {
                accumulate(&mut grads[input.0], permute_values(&g, &inverse_perm(perm)));
            }
        }
    }

    let mut map = indexmap::IndexMap::new();
    for (i, op) in graph.nodes().iter().enumerate() {
        if let Op::Input {
            name,
            trainable: true,
        } = op
        {
            let g = grads[i]
                .take()
                .unwrap_or_else(|| Tensor::zeros(vals[i].shape()));
            map.insert(name.clone(), g);
        }
    }
    Ok(Gradients::from_map(map))
}

/// Forward-mode directional derivative of `output` along the given leaf tangents.
///
/// Every leaf that `output` depends on needs a tangent (pass zeros for
/// directions that are held fixed).
pub fn jvp(
    graph: &Graph,
    eval: &Evaluation,
    output: NodeId,
    tangents: &HashMap<String, Tensor>,
) -> Result<Tensor, AutodiffError> {
    directional(graph, eval, output, tangents, false)
}

/// Like [`jvp`], but leaves without a tangent are held fixed (zero tangent).
pub fn jvp_partial(
    graph: &Graph,
    eval: &Evaluation,
    output: NodeId,
    tangents: &HashMap<String, Tensor>,
) -> Result<Tensor, AutodiffError> {
    directional(graph, eval, output, tangents, true)
}

fn directional(
    graph: &Graph,
    eval: &Evaluation,
    output: NodeId,
    tangents: &HashMap<String, Tensor>,
    missing_is_zero: bool,
) -> Result<Tensor, AutodiffError> {
    if eval.graph_id != graph.id() || eval.values.len() != graph.len() {
        return Err(AutodiffError::NotEvaluated);
    }
    let vals = &eval.values;
    let live = graph.ancestors(output);
    let mut tan: Vec<Option<Tensor>> = vec![None; graph.len()];

    for i in 0..=output.0 {
        if !live[i] {
            continue;
        }
        let op = graph.op(NodeId(i));
        let t = |n: &NodeId| tan[n.0].as_ref();
        let out: Option<Tensor> = match op {
            Op::Input { name, .. } => {
                let Some(t) = tangents.get(name) else {
                    if missing_is_zero {
                        tan[i] = None;
                        continue;
                    }
                    return Err(AutodiffError::MissingTangent(name.clone()));
                };
                if t.shape() != vals[i].shape() {
                    return Err(shape_err(
                        graph,
                        NodeId(i),
                        format!("tangent {:?} for leaf {:?}", t.shape(), vals[i].shape()),
                    ));
                }
                Some(t.clone())
            }
            Op::Constant(_) | Op::StopGradient(_) => None,
            Op::MatMul(a, b) => {
                let mut acc: Option<Tensor> = None;
                if let Some(ta) = t(a) {
                    acc = Some(matmul_values(ta, &vals[b.0]));
                }
                if let Some(tb) = t(b) {
                    let term = matmul_values(&vals[a.0], tb);
                    accumulate(&mut acc, term);
                }
                acc
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let mut acc: Option<Tensor> = None;
                if let Some(ta) = t(a) {
                    acc = Some(bmm_values(ta, &vals[b.0], *transpose_b));
                }
                if let Some(tb) = t(b) {
                    let term = bmm_values(&vals[a.0], tb, *transpose_b);
                    accumulate(&mut acc, term);
                }
                acc
            }
            Op::Add(a, b) => match (t(a), t(b)) {
                (None, None) => None,
                (Some(x), None) | (None, Some(x)) => Some(x.clone()),
                (Some(x), Some(y)) => Some(x.zip_map(y, |p, q| p + q)),
            },
            Op::Sub(a, b) => match (t(a), t(b)) {
                (None, None) => None,
                (Some(x), None) => Some(x.clone()),
                (None, Some(y)) => Some(y.map(|q| -q)),
                (Some(x), Some(y)) => Some(x.zip_map(y, |p, q| p - q)),
            },
            Op::Mul(a, b) => {
                let mut acc = t(a).map(|ta| ta.zip_map(&vals[b.0], |p, q| p * q));
                if let Some(tb) = t(b) {
                    accumulate(&mut acc, tb.zip_map(&vals[a.0], |p, q| p * q));
                }
                acc
            }
            Op::Scale(a, c) => {
                let c = *c;
                t(a).map(|x| x.map(|v| v * c))
            }
            Op::Silu(a) => t(a).map(|ta| ta.zip_map(&vals[a.0], |d, x| d * kernels::silu_grad(x))),
            Op::LayerNorm(a) => t(a).map(|ta| {
                let x = &vals[a.0];
                Tensor::from_vec(
                    x.shape(),
                    kernels::layer_norm_linearized(x.data(), ta.data(), x.cols()),
                )
            }),
            Op::Softmax(a) => t(a).map(|ta| {
                let y = &vals[i];
                Tensor::from_vec(
                    y.shape(),
                    kernels::softmax_linearized(y.data(), ta.data(), y.cols()),
                )
            }),
            Op::Mean(a) => t(a).map(|ta| Tensor::scalar(ta.sum() / ta.len() as f64)),
            Op::Sum(a) => t(a).map(|ta| Tensor::scalar(ta.sum())),
            Op::SumSquares(a) => t(a).map(|ta| Tensor::scalar(2.0 * vals[a.0].dot(ta))),
            Op::RowNorm(a, _) => t(a).map(|ta| {
                let x = &vals[a.0];
                let cols = x.cols().max(1);
                let data = x
                    .data()
                    .chunks_exact(cols)
                    .zip(ta.data().chunks_exact(cols))
                    .zip(vals[i].data())
                    .map(|((r, tr), n)| r.iter().zip(tr).map(|(p, q)| p * q).sum::<f64>() / n)
                    .collect();
                Tensor::from_vec(vals[i].shape(), data)
            }),
            Op::Concat { inputs, axis } => {
                if inputs.iter().all(|n| t(n).is_none()) {
                    None
                } else {
                    let owned: Vec<Tensor> = inputs
                        .iter()
                        .map(|n| {
                            t(n).cloned()
                                .unwrap_or_else(|| Tensor::zeros(vals[n.0].shape()))
                        })
                        .collect();
                    let refs: Vec<&Tensor> = owned.iter().collect();
                    Some(concat_values(&refs, *axis))
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                end,
            } => t(input).map(|x| slice_values(x, *axis, *start, *end)),
            Op::Broadcast { input, like } => {
                t(input).map(|x| broadcast_values(x, vals[like.0].shape()))
            }
            Op::Reshape { shape, input } => {
                t(input).map(|x| Tensor::from_vec(shape, x.data().to_vec()))
            }
            Op::Permute { input, perm } => t(input).map(|x| permute_values(x, perm)),
        };
        tan[i] = out;
    }
    Ok(tan[output.0]
        .take()
        .unwrap_or_else(|| Tensor::zeros(vals[output.0].shape())))
}
