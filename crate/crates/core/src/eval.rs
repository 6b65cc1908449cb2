//! Reference evaluator: materializes every intermediate, node by node in
//! topological order, with f64 accumulation. This is the ground-truth oracle
//! every fused execution is checked against.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ir::{Combiner, OnlineRole, OpKind, TensorGraph};
use crate::tensor::{DType, TensorData};

pub type Bindings = BTreeMap<String, TensorData>;
pub type Outputs = BTreeMap<String, TensorData>;

/// Evaluate the graph and return the Output-node tensors keyed by name.
pub fn eval_naive(graph: &TensorGraph, bindings: &Bindings) -> Result<Outputs> {
    let values = eval_all(graph, bindings)?;
    let mut out = BTreeMap::new();
    for &id in &graph.outputs {
        out.insert(graph.nodes[id].name.clone(), values[id].clone());
    }
    Ok(out)
}

/// Evaluate every node, returning per-node tensors (indexed by node id).
pub fn eval_all(graph: &TensorGraph, bindings: &Bindings) -> Result<Vec<TensorData>> {
    let order = graph.topo_order()?;
    let mut values: Vec<Option<TensorData>> = vec![None; graph.nodes.len()];
    for id in order {
        let node = &graph.nodes[id];
        let mut t = match &node.kind {
            OpKind::Input => {
                let t = bindings
                    .get(&node.name)
                    .ok_or_else(|| Error::MissingBinding(node.name.clone()))?;
                let want = graph.extents_of(&node.dims);
                if t.extents != want {
                    return Err(Error::Shape(format!(
                        "input {}: extents {:?} do not match declared {:?}",
                        node.name, t.extents, want
                    )));
                }
                let mut t = t.clone();
                t.dims = node.dims.clone();
                t
            }
            OpKind::Pointwise(expr) => {
                let args: Vec<&[f64]> = node
                    .inputs
                    .iter()
                    .map(|&i| values[i].as_ref().unwrap().data.as_slice())
                    .collect();
                let len = graph.element_count(id);
                let data = expr
                    .eval_vec(&args, len)
                    .map_err(|e| match e {
                        Error::DivByZero(_) => Error::DivByZero(node.name.clone()),
                        e => e,
                    })?;
                TensorData::new(node.dims.clone(), graph.extents_of(&node.dims), data)
            }
            OpKind::Reduce { combiner, dims } => {
                let input = values[node.inputs[0]].as_ref().unwrap();
                reduce(input, dims, *combiner)?
            }
            OpKind::Contract { reduced } => {
                let a = values[node.inputs[0]].as_ref().unwrap();
                let b = values[node.inputs[1]].as_ref().unwrap();
                contract(a, b, reduced, &node.dims)?
            }
            OpKind::Broadcast => {
                let input = values[node.inputs[0]].as_ref().unwrap();
                broadcast(input, &node.dims, &graph.extents_of(&node.dims))
            }
            OpKind::Online { role, dims, .. } => {
                // reference semantics of the rewritten pair: final max and
                // the shifted exponential sum over the reduced dims
                let input = values[node.inputs[0]].as_ref().unwrap();
                let m = reduce(input, dims, Combiner::Max)?;
                match role {
                    OnlineRole::Stat => m,
                    OnlineRole::Acc => {
                        let mb = broadcast(&m, &input.dims, &input.extents);
                        let mut shifted = input.clone();
                        for (x, mm) in shifted.data.iter_mut().zip(&mb.data) {
                            *x = crate::expr::sub_guarded(*x, *mm).exp();
                        }
                        reduce(&shifted, dims, Combiner::Sum)?
                    }
                }
            }
            OpKind::Output => values[node.inputs[0]].as_ref().unwrap().clone(),
        };
        if node.dtype == DType::F32 && !matches!(node.kind, OpKind::Output) {
            t.round_to(DType::F32);
        }
        values[id] = Some(t);
    }
    Ok(values.into_iter().map(|v| v.unwrap()).collect())
}

/// Reduce `input` over the named dims with a fixed, deterministic order.
pub fn reduce(input: &TensorData, dims: &[String], combiner: Combiner) -> Result<TensorData> {
    for d in dims {
        if !input.dims.contains(d) {
            return Err(Error::Shape(format!("reduce dim {d} absent from input")));
        }
    }
    let out_dims: Vec<String> =
        input.dims.iter().filter(|d| !dims.contains(d)).cloned().collect();
    // move reduced dims innermost, then fold contiguous chunks
    let mut order = out_dims.clone();
    order.extend(dims.iter().cloned());
    let moved = input.permuted(&order)?;
    let red_len: usize = dims
        .iter()
        .map(|d| input.extent_of(d).unwrap())
        .product();
    if red_len == 0 {
        return Err(Error::EmptyReduction);
    }
    let out_len = moved.data.len() / red_len;
    let mut out = Vec::with_capacity(out_len);
    for chunk in moved.data.chunks_exact(red_len) {
        let mut acc = combiner.init();
        match combiner {
            Combiner::Sum => {
                for &v in chunk {
                    acc += v;
                }
            }
            Combiner::Max => {
                for &v in chunk {
                    acc = acc.max(v);
                }
            }
        }
        out.push(acc);
    }
    let out_extents: Vec<usize> =
        out_dims.iter().map(|d| input.extent_of(d).unwrap()).collect();
    Ok(TensorData::new(out_dims, out_extents, out))
}

/// Replicate `input` up to `target_dims` (a superset, any order).
pub fn broadcast(input: &TensorData, target_dims: &[String], target_extents: &[usize]) -> TensorData {
    if input.dims == target_dims {
        return input.clone();
    }
    let in_strides = input.strides();
    // per-target-dim source stride; 0 for broadcast dims
    let strides: Vec<usize> = target_dims
        .iter()
        .map(|d| {
            input
                .dims
                .iter()
                .position(|x| x == d)
                .map(|i| in_strides[i])
                .unwrap_or(0)
        })
        .collect();
    let len: usize = target_extents.iter().product();
    let mut out = vec![0.0; len];
    let rank = target_dims.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = input.data[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < target_extents[d] {
                break;
            }
            src -= strides[d] * target_extents[d];
            idx[d] = 0;
        }
    }
    TensorData::new(target_dims.to_vec(), target_extents.to_vec(), out)
}

/// Generalized contraction lowered to a batched GEMM: dims shared by both
/// operands and not reduced are batch dims, remaining A-only dims form the
/// GEMM rows, B-only dims the columns.
pub fn contract(
    a: &TensorData,
    b: &TensorData,
    reduced: &[String],
    out_dims: &[String],
) -> Result<TensorData> {
    for d in reduced {
        if !a.dims.contains(d) || !b.dims.contains(d) {
            return Err(Error::ContractionDim(d.clone()));
        }
        if a.extent_of(d) != b.extent_of(d) {
            return Err(Error::Shape(format!("contracted dim {d} extent mismatch")));
        }
    }
    let batch: Vec<String> = a
        .dims
        .iter()
        .filter(|d| b.dims.contains(d) && !reduced.contains(d))
        .cloned()
        .collect();
    let m_dims: Vec<String> = a
        .dims
        .iter()
        .filter(|d| !batch.contains(d) && !reduced.contains(d))
        .cloned()
        .collect();
    let n_dims: Vec<String> = b
        .dims
        .iter()
        .filter(|d| !batch.contains(d) && !reduced.contains(d))
        .cloned()
        .collect();
    for d in &batch {
        if a.extent_of(d) != b.extent_of(d) {
            return Err(Error::Shape(format!("batch dim {d} extent mismatch")));
        }
    }

    let mut a_order = batch.clone();
    a_order.extend(m_dims.iter().cloned());
    a_order.extend(reduced.iter().cloned());
    let mut b_order = batch.clone();
    b_order.extend(reduced.iter().cloned());
    let b_only = n_dims.clone();
    let mut b_order2 = b_order;
    b_order2.extend(b_only.iter().cloned());

    let am = a.permuted(&a_order)?;
    let bm = b.permuted(&b_order2)?;

    let nb: usize = batch.iter().map(|d| a.extent_of(d).unwrap()).product();
    let m: usize = m_dims.iter().map(|d| a.extent_of(d).unwrap()).product();
    let r: usize = reduced.iter().map(|d| a.extent_of(d).unwrap()).product();
    let n: usize = n_dims.iter().map(|d| b.extent_of(d).unwrap()).product();

    let mut c = vec![0.0f64; nb * m * n];
    for bi in 0..nb {
        let a_base = bi * m * r;
        let b_base = bi * r * n;
        let c_base = bi * m * n;
        for i in 0..m {
            let a_row = &am.data[a_base + i * r..a_base + (i + 1) * r];
            let c_row = &mut c[c_base + i * n..c_base + (i + 1) * n];
            for (k, &av) in a_row.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let b_row = &bm.data[b_base + k * n..b_base + (k + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += av * bv;
                }
            }
        }
    }

    let mut c_dims = batch;
    c_dims.extend(m_dims);
    c_dims.extend(n_dims);
    let c_extents: Vec<usize> = c_dims
        .iter()
        .map(|d| a.extent_of(d).or_else(|| b.extent_of(d)).unwrap())
        .collect();
    let ct = TensorData::new(c_dims, c_extents, c);
    ct.permuted(out_dims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{self, PointwiseExpr as E};
    use crate::ir::GraphBuilder;

    fn t(dims: &[(&str, usize)], data: Vec<f64>) -> TensorData {
        TensorData::new(
            dims.iter().map(|(d, _)| d.to_string()).collect(),
            dims.iter().map(|(_, e)| *e).collect(),
            data,
        )
    }

    #[test]
    fn dot_product_of_ones() {
        let a = t(&[("k", 4)], vec![1.0; 4]);
        let b = t(&[("k", 4)], vec![1.0; 4]);
        let c = contract(&a, &b, &["k".into()], &[]).unwrap();
        assert_eq!(c.data, vec![4.0]);
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[("m", 2), ("k", 2)], vec![1.0, 2.0, 3.0, 4.0]);
        let i = t(&[("k", 2), ("n", 2)], vec![1.0, 0.0, 0.0, 1.0]);
        let c = contract(&a, &i, &["k".into()], &["m".into(), "n".into()]).unwrap();
        assert_eq!(c.data, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_of_uniform_row() {
        // softmax decomposition per the stable formulation
        let mut gb = GraphBuilder::new();
        let x = gb
            .input("x", &[("n".into(), 4)], DType::F64)
            .unwrap();
        let m = gb.reduce("m", Combiner::Max, &["n"], x).unwrap();
        let mb = gb.broadcast("mb", m, &["n".into()]).unwrap();
        let p = gb
            .pointwise("p", expr::exp(expr::sub(E::arg(0), E::arg(1))), &[x, mb])
            .unwrap();
        let d = gb.reduce("d", Combiner::Sum, &["n"], p).unwrap();
        let db = gb.broadcast("db", d, &["n".into()]).unwrap();
        let y = gb
            .pointwise("y", expr::div(E::arg(0), E::arg(1)), &[p, db])
            .unwrap();
        gb.output("out", y).unwrap();
        let g = gb.finish();
        assert!(g.validate().is_empty());

        let mut bindings = Bindings::new();
        bindings.insert("x".into(), t(&[("n", 4)], vec![0.0; 4]));
        let out = eval_naive(&g, &bindings).unwrap();
        assert_eq!(out["out"].data, vec![0.25; 4]);
    }

    #[test]
    fn broadcast_then_sum_multiplies_by_extent() {
        let x = t(&[("m", 3)], vec![1.0, 2.0, 3.0]);
        let b = broadcast(&x, &["m".into(), "n".into()], &[3, 5]);
        let s = reduce(&b, &["n".into()], Combiner::Sum).unwrap();
        assert_eq!(s.data, vec![5.0, 10.0, 15.0]);
    }

    #[test]
    fn missing_binding_is_an_error() {
        let mut gb = GraphBuilder::new();
        let x = gb.input("x", &[("n".into(), 2)], DType::F64).unwrap();
        gb.output("out", x).unwrap();
        let g = gb.finish();
        let err = eval_naive(&g, &Bindings::new()).unwrap_err();
        assert!(matches!(err, Error::MissingBinding(_)));
    }

    #[test]
    fn extent_mismatch_is_an_error() {
        let mut gb = GraphBuilder::new();
        let x = gb.input("x", &[("n".into(), 2)], DType::F64).unwrap();
        gb.output("out", x).unwrap();
        let g = gb.finish();
        let mut b = Bindings::new();
        b.insert("x".into(), t(&[("n", 3)], vec![0.0; 3]));
        assert!(eval_naive(&g, &b).is_err());
    }

    #[test]
    fn deterministic_outputs() {
        let mut gb = GraphBuilder::new();
        let x = gb
            .input("x", &[("m".into(), 8), ("n".into(), 8)], DType::F64)
            .unwrap();
        let s = gb.reduce("s", Combiner::Sum, &["n"], x).unwrap();
        gb.output("out", s).unwrap();
        let g = gb.finish();
        let mut b = Bindings::new();
        let data: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        b.insert("x".into(), t(&[("m", 8), ("n", 8)], data));
        let o1 = eval_naive(&g, &b).unwrap();
        let o2 = eval_naive(&g, &b).unwrap();
        assert!(o1["out"].data.iter().zip(&o2["out"].data).all(|(a, c)| a.to_bits() == c.to_bits()));
    }
}
