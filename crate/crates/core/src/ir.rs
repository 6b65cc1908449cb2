//! Loop-level tensor IR: named dimensions classified per-operation as
//! parallel (p) or reduction (r), a minimal operation set, and the DAG
//! container every pass rewrites.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{self, PointwiseExpr};
use crate::tensor::DType;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DimKind {
    Parallel,
    Reduction,
}

/// A dimension's role within one operation. The same named axis may be
/// Parallel in a producer and Reduction in a consumer; dimension demotion
/// depends on exactly that.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dim {
    pub name: String,
    pub extent: usize,
    pub kind: DimKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Combiner {
    Sum,
    Max,
}

impl Combiner {
    pub fn init(self) -> f64 {
        match self {
            Combiner::Sum => 0.0,
            Combiner::Max => f64::NEG_INFINITY,
        }
    }

    #[inline]
    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Combiner::Sum => a + b,
            Combiner::Max => a.max(b),
        }
    }
}

/// Role within a fused online-reduction pair produced by the semantic
/// rewrite. `Stat` carries the running max, `Acc` the rescaled running sum;
/// both consume the same pre-exponential input and share a group id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OnlineRole {
    Stat,
    Acc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OpKind {
    Input,
    Pointwise(PointwiseExpr),
    Reduce { combiner: Combiner, dims: Vec<String> },
    /// GEMM-style contraction, modeled as a generalized sum-reduction:
    /// output dims = (A.dims ∪ B.dims) \ reduced.
    Contract { reduced: Vec<String> },
    /// Explicit broadcast; output dims are the node's `dims`, a superset of
    /// the input's. No implicit alignment exists anywhere else.
    Broadcast,
    /// Single-pass (max, rescaled-sum) reduction pair; see `OnlineRole`.
    Online { role: OnlineRole, group: usize, dims: Vec<String> },
    Output,
}

impl OpKind {
    pub fn short_name(&self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Pointwise(_) => "pointwise",
            OpKind::Reduce { .. } => "reduce",
            OpKind::Contract { .. } => "contract",
            OpKind::Broadcast => "broadcast",
            OpKind::Online { role: OnlineRole::Stat, .. } => "online_stat",
            OpKind::Online { role: OnlineRole::Acc, .. } => "online_acc",
            OpKind::Output => "output",
        }
    }

    /// Reduction dims consumed by this op, if any.
    pub fn reduce_dims(&self) -> Option<&[String]> {
        match self {
            OpKind::Reduce { dims, .. } => Some(dims),
            OpKind::Contract { reduced } => Some(reduced),
            OpKind::Online { dims, .. } => Some(dims),
            _ => None,
        }
    }

    pub fn is_compute(&self) -> bool {
        !matches!(self, OpKind::Input | OpKind::Output)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpNode {
    pub id: NodeId,
    pub name: String,
    pub kind: OpKind,
    pub inputs: Vec<NodeId>,
    /// Ordered output dimension names; extents live in the graph table.
    pub dims: Vec<String>,
    pub dtype: DType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorGraph {
    pub nodes: Vec<OpNode>,
    pub extents: BTreeMap<String, usize>,
    pub outputs: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub node: Option<NodeId>,
    pub message: String,
}

impl TensorGraph {
    pub fn node(&self, id: NodeId) -> &OpNode {
        &self.nodes[id]
    }

    pub fn extent(&self, dim: &str) -> usize {
        self.extents[dim]
    }

    pub fn extents_of(&self, dims: &[String]) -> Vec<usize> {
        dims.iter().map(|d| self.extents[d]).collect()
    }

    pub fn element_count(&self, id: NodeId) -> usize {
        self.nodes[id].dims.iter().map(|d| self.extents[d]).product()
    }

    pub fn node_by_name(&self, name: &str) -> Option<&OpNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    /// Map from node id to the ids of nodes consuming it.
    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for n in &self.nodes {
            for &i in &n.inputs {
                if i < out.len() {
                    out[i].push(n.id);
                }
            }
        }
        out
    }

    /// Topological order; errors with "cycle" if the graph is not a DAG.
    pub fn topo_order(&self) -> Result<Vec<NodeId>> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        for node in &self.nodes {
            for &i in &node.inputs {
                if i >= n {
                    return Err(Error::Graph(format!(
                        "node {} references missing input {i}",
                        node.name
                    )));
                }
                indeg[node.id] += 1;
                let _ = i;
            }
        }
        let mut ready: Vec<NodeId> = (0..n).filter(|&i| indeg[i] == 0).collect();
        ready.sort_unstable();
        let consumers = self.consumers();
        let mut order = Vec::with_capacity(n);
        let mut queue = std::collections::BinaryHeap::new();
        for r in ready.drain(..) {
            queue.push(std::cmp::Reverse(r));
        }
        while let Some(std::cmp::Reverse(id)) = queue.pop() {
            order.push(id);
            for &c in &consumers[id] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    queue.push(std::cmp::Reverse(c));
                }
            }
        }
        if order.len() != n {
            return Err(Error::Graph("cycle".into()));
        }
        Ok(order)
    }

    /// Drop the given nodes and compact ids. Errors if a surviving node
    /// still references a dropped one.
    pub fn without_nodes(&self, dead: &BTreeSet<NodeId>) -> Result<TensorGraph> {
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut nodes = Vec::with_capacity(self.nodes.len() - dead.len());
        for n in &self.nodes {
            if dead.contains(&n.id) {
                continue;
            }
            remap[n.id] = nodes.len();
            let mut n = n.clone();
            n.id = remap[n.id];
            nodes.push(n);
        }
        for n in &mut nodes {
            for i in n.inputs.iter_mut() {
                if remap[*i] == usize::MAX {
                    return Err(Error::Graph(format!(
                        "node {} references removed node {i}",
                        n.name
                    )));
                }
                *i = remap[*i];
            }
        }
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for &o in &self.outputs {
            if remap[o] == usize::MAX {
                return Err(Error::Graph("output node removed".into()));
            }
            outputs.push(remap[o]);
        }
        Ok(TensorGraph { nodes, extents: self.extents.clone(), outputs })
    }

    /// Remove compute nodes that cannot reach any output. Inputs are kept
    /// even when unused, since their bindings may still be supplied.
    pub fn sweep_dead(&self) -> TensorGraph {
        let mut live = vec![false; self.nodes.len()];
        let mut stack: Vec<NodeId> = self.outputs.clone();
        for &o in &self.outputs {
            live[o] = true;
        }
        while let Some(id) = stack.pop() {
            for &i in &self.nodes[id].inputs {
                if !live[i] {
                    live[i] = true;
                    stack.push(i);
                }
            }
        }
        let dead: BTreeSet<NodeId> = (0..self.nodes.len())
            .filter(|&i| !live[i] && !matches!(self.nodes[i].kind, OpKind::Input))
            .collect();
        if dead.is_empty() {
            return self.clone();
        }
        self.without_nodes(&dead).expect("dead sweep cannot orphan live nodes")
    }

    /// Structural well-formedness check. Returns one diagnostic per
    /// violation; an empty list means the graph satisfies all invariants.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut diags = Vec::new();
        let mut push = |node: Option<NodeId>, message: String| {
            diags.push(Diagnostic { node, message });
        };

        if self.topo_order().is_err() {
            push(None, "cycle".into());
        }

        let mut names = BTreeSet::new();
        for node in &self.nodes {
            if !names.insert(node.name.clone()) {
                push(Some(node.id), format!("duplicate node name {}", node.name));
            }
            let mut seen = BTreeSet::new();
            for d in &node.dims {
                if !self.extents.contains_key(d) {
                    push(Some(node.id), format!("unknown dim {d}"));
                } else if self.extents[d] == 0 {
                    push(Some(node.id), format!("dim {d} has extent 0"));
                }
                if !seen.insert(d.clone()) {
                    push(Some(node.id), format!("duplicate dim {d} in output"));
                }
            }
            for &i in &node.inputs {
                if i >= self.nodes.len() {
                    push(Some(node.id), format!("missing input node {i}"));
                }
            }
            let input_ok = node.inputs.iter().all(|&i| i < self.nodes.len());
            if !input_ok {
                continue;
            }
            match &node.kind {
                OpKind::Input => {
                    if !node.inputs.is_empty() {
                        push(Some(node.id), "input node must have no inputs".into());
                    }
                }
                OpKind::Pointwise(e) => {
                    if e.arity() != node.inputs.len() {
                        push(
                            Some(node.id),
                            format!(
                                "pointwise arity {} does not match {} inputs",
                                e.arity(),
                                node.inputs.len()
                            ),
                        );
                    }
                    // all inputs must share the output's ordered dims
                    for &i in &node.inputs {
                        let idims = &self.nodes[i].dims;
                        if idims != &node.dims {
                            push(
                                Some(node.id),
                                format!(
                                    "pointwise input {} dims {:?} differ from output dims {:?} \
                                     (broadcast must be explicit)",
                                    self.nodes[i].name, idims, node.dims
                                ),
                            );
                        }
                    }
                }
                OpKind::Reduce { dims, .. } | OpKind::Online { dims, .. } => {
                    if node.inputs.len() != 1 {
                        push(Some(node.id), "reduce takes exactly one input".into());
                        continue;
                    }
                    let idims = &self.nodes[node.inputs[0]].dims;
                    for d in dims {
                        if !idims.contains(d) {
                            push(
                                Some(node.id),
                                format!("reduce dim {d} absent from input"),
                            );
                        }
                        if node.dims.contains(d) {
                            push(
                                Some(node.id),
                                format!("reduce dim {d} still present in output"),
                            );
                        }
                    }
                    let expect: Vec<String> =
                        idims.iter().filter(|d| !dims.contains(d)).cloned().collect();
                    if node.dims != expect {
                        push(
                            Some(node.id),
                            format!("reduce output dims {:?} expected {:?}", node.dims, expect),
                        );
                    }
                }
                OpKind::Contract { reduced } => {
                    if node.inputs.len() != 2 {
                        push(Some(node.id), "contract takes exactly two inputs".into());
                        continue;
                    }
                    let a = &self.nodes[node.inputs[0]].dims;
                    let b = &self.nodes[node.inputs[1]].dims;
                    for d in reduced {
                        if !a.contains(d) || !b.contains(d) {
                            push(
                                Some(node.id),
                                format!("contraction dim not shared: {d}"),
                            );
                        }
                    }
                    let expect = contract_output_dims(a, b, reduced);
                    if node.dims != expect {
                        push(
                            Some(node.id),
                            format!(
                                "contract output dims {:?} expected {:?}",
                                node.dims, expect
                            ),
                        );
                    }
                }
                OpKind::Broadcast => {
                    if node.inputs.len() != 1 {
                        push(Some(node.id), "broadcast takes exactly one input".into());
                        continue;
                    }
                    let idims = &self.nodes[node.inputs[0]].dims;
                    for d in idims {
                        if !node.dims.contains(d) {
                            push(
                                Some(node.id),
                                format!("broadcast drops input dim {d}"),
                            );
                        }
                    }
                }
                OpKind::Output => {
                    if node.inputs.len() != 1 {
                        push(Some(node.id), "output takes exactly one input".into());
                    } else if self.nodes[node.inputs[0]].dims != node.dims {
                        push(Some(node.id), "output dims must match its input".into());
                    }
                }
            }
        }
        diags
    }
}

/// Output dim order for a contraction: A's dims (minus reduced) followed by
/// B-only dims (minus reduced).
pub fn contract_output_dims(a: &[String], b: &[String], reduced: &[String]) -> Vec<String> {
    let mut out: Vec<String> = a.iter().filter(|d| !reduced.contains(d)).cloned().collect();
    for d in b {
        if !reduced.contains(d) && !out.contains(d) {
            out.push(d.clone());
        }
    }
    out
}

/// Rewrite one Contract node into an equivalent broadcast/multiply/sum-reduce
/// subgraph, so it conforms to the plain p-/r-dimension primitives.
pub fn lower_contract(graph: &TensorGraph, id: NodeId) -> Result<TensorGraph> {
    let node = &graph.nodes[id];
    let OpKind::Contract { reduced } = node.kind.clone() else {
        return Err(Error::Graph(format!("node {} is not a contract", node.name)));
    };
    let a_id = node.inputs[0];
    let b_id = node.inputs[1];
    let a_dims = graph.nodes[a_id].dims.clone();
    let b_dims = graph.nodes[b_id].dims.clone();
    for d in &reduced {
        if !a_dims.contains(d) || !b_dims.contains(d) {
            return Err(Error::ContractionDim(d.clone()));
        }
    }
    // full product space: output dims ++ reduced dims
    let mut full: Vec<String> = node.dims.clone();
    full.extend(reduced.iter().cloned());

    let mut g = graph.clone();
    let base = node.name.clone();
    let prod_id = {
        let mut b = GraphBuilder::from_graph(&mut g);
        let a_full = if a_dims == full {
            a_id
        } else {
            b.broadcast(&format!("{base}__lhs_b"), a_id, &full)?
        };
        let b_full = if b_dims == full {
            b_id
        } else {
            b.broadcast(&format!("{base}__rhs_b"), b_id, &full)?
        };
        b.pointwise(
            &format!("{base}__mul"),
            expr::mul(PointwiseExpr::arg(0), PointwiseExpr::arg(1)),
            &[a_full, b_full],
        )?
    };
    // mutate the contract node in place into the reduce, keeping its id/name
    g.nodes[id].kind = OpKind::Reduce { combiner: Combiner::Sum, dims: reduced };
    g.nodes[id].inputs = vec![prod_id];
    Ok(g)
}

/// Incremental construction helper. Appends nodes, so graphs it builds are
/// acyclic by construction; `validate` still covers hand-assembled graphs.
pub struct GraphBuilder<'a> {
    graph: OwnedOrMut<'a>,
}

enum OwnedOrMut<'a> {
    Owned(TensorGraph),
    Borrowed(&'a mut TensorGraph),
}

impl Default for GraphBuilder<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl GraphBuilder<'static> {
    pub fn new() -> Self {
        GraphBuilder {
            graph: OwnedOrMut::Owned(TensorGraph {
                nodes: Vec::new(),
                extents: BTreeMap::new(),
                outputs: Vec::new(),
            }),
        }
    }

    pub fn finish(self) -> TensorGraph {
        match self.graph {
            OwnedOrMut::Owned(g) => g,
            OwnedOrMut::Borrowed(_) => unreachable!(),
        }
    }
}

impl<'a> GraphBuilder<'a> {
    pub fn from_graph(graph: &'a mut TensorGraph) -> Self {
        GraphBuilder { graph: OwnedOrMut::Borrowed(graph) }
    }

    fn graph(&mut self) -> &mut TensorGraph {
        match &mut self.graph {
            OwnedOrMut::Owned(g) => g,
            OwnedOrMut::Borrowed(g) => g,
        }
    }

    pub fn graph_ref(&self) -> &TensorGraph {
        match &self.graph {
            OwnedOrMut::Owned(g) => g,
            OwnedOrMut::Borrowed(g) => g,
        }
    }

    fn register_dims(&mut self, dims: &[(String, usize)]) -> Result<Vec<String>> {
        let mut names = Vec::with_capacity(dims.len());
        for (name, extent) in dims {
            if *extent == 0 {
                return Err(Error::Shape(format!("dim {name} has extent 0")));
            }
            match self.graph().extents.get(name) {
                Some(&e) if e != *extent => {
                    return Err(Error::Shape(format!(
                        "dim {name} redeclared with extent {extent}, previously {e}"
                    )));
                }
                _ => {
                    self.graph().extents.insert(name.clone(), *extent);
                }
            }
            names.push(name.clone());
        }
        Ok(names)
    }

    fn push(&mut self, name: &str, kind: OpKind, inputs: Vec<NodeId>, dims: Vec<String>, dtype: DType) -> NodeId {
        let id = self.graph().nodes.len();
        self.graph().nodes.push(OpNode { id, name: name.to_string(), kind, inputs, dims, dtype });
        id
    }

    pub fn input(&mut self, name: &str, dims: &[(String, usize)], dtype: DType) -> Result<NodeId> {
        let names = self.register_dims(dims)?;
        Ok(self.push(name, OpKind::Input, vec![], names, dtype))
    }

    pub fn pointwise(&mut self, name: &str, expr: PointwiseExpr, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Graph("pointwise needs at least one input".into()));
        }
        let dims = self.graph().nodes[inputs[0]].dims.clone();
        for &i in inputs {
            if self.graph().nodes[i].dims != dims {
                return Err(Error::Shape(format!(
                    "pointwise {name}: input {} dims differ (broadcast must be explicit)",
                    self.graph().nodes[i].name
                )));
            }
        }
        let dtype = self.graph().nodes[inputs[0]].dtype;
        Ok(self.push(name, OpKind::Pointwise(expr), inputs.to_vec(), dims, dtype))
    }

    pub fn reduce(&mut self, name: &str, combiner: Combiner, dims: &[&str], input: NodeId) -> Result<NodeId> {
        let idims = self.graph().nodes[input].dims.clone();
        for d in dims {
            if !idims.iter().any(|x| x == d) {
                return Err(Error::Shape(format!("reduce {name}: dim {d} absent from input")));
            }
        }
        let out: Vec<String> = idims.into_iter().filter(|d| !dims.contains(&d.as_str())).collect();
        let rdims: Vec<String> = dims.iter().map(|s| s.to_string()).collect();
        let dtype = self.graph().nodes[input].dtype;
        Ok(self.push(name, OpKind::Reduce { combiner, dims: rdims }, vec![input], out, dtype))
    }

    pub fn contract(&mut self, name: &str, a: NodeId, b: NodeId, reduced: &[&str]) -> Result<NodeId> {
        let ad = self.graph().nodes[a].dims.clone();
        let bd = self.graph().nodes[b].dims.clone();
        for d in reduced {
            if !ad.iter().any(|x| x == d) || !bd.iter().any(|x| x == d) {
                return Err(Error::ContractionDim(d.to_string()));
            }
        }
        let red: Vec<String> = reduced.iter().map(|s| s.to_string()).collect();
        let out = contract_output_dims(&ad, &bd, &red);
        let dtype = self.graph().nodes[a].dtype;
        Ok(self.push(name, OpKind::Contract { reduced: red }, vec![a, b], out, dtype))
    }

    /// Broadcast `input` up to `target_dims` (ordered; must be a superset of
    /// the input dims, with every extent already known to the graph unless
    /// provided via `new_extents`).
    pub fn broadcast_with(
        &mut self,
        name: &str,
        input: NodeId,
        target_dims: &[String],
        new_extents: &[(String, usize)],
    ) -> Result<NodeId> {
        self.register_dims(new_extents)?;
        let idims = self.graph().nodes[input].dims.clone();
        for d in &idims {
            if !target_dims.contains(d) {
                return Err(Error::Shape(format!("broadcast {name}: drops input dim {d}")));
            }
        }
        for d in target_dims {
            if !self.graph().extents.contains_key(d) {
                return Err(Error::Shape(format!("broadcast {name}: unknown dim {d}")));
            }
        }
        let dtype = self.graph().nodes[input].dtype;
        Ok(self.push(name, OpKind::Broadcast, vec![input], target_dims.to_vec(), dtype))
    }

    pub fn broadcast(&mut self, name: &str, input: NodeId, target_dims: &[String]) -> Result<NodeId> {
        self.broadcast_with(name, input, target_dims, &[])
    }

    pub fn output(&mut self, name: &str, input: NodeId) -> Result<NodeId> {
        let dims = self.graph().nodes[input].dims.clone();
        let dtype = self.graph().nodes[input].dtype;
        let id = self.push(name, OpKind::Output, vec![input], dims, dtype);
        self.graph().outputs.push(id);
        Ok(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::PointwiseExpr as E;

    fn small_matmul() -> (TensorGraph, NodeId) {
        let mut b = GraphBuilder::new();
        let a = b
            .input("a", &[("m".into(), 2), ("k".into(), 2)], DType::F64)
            .unwrap();
        let w = b
            .input("w", &[("k".into(), 2), ("n".into(), 2)], DType::F64)
            .unwrap();
        let c = b.contract("c", a, w, &["k"]).unwrap();
        b.output("out", c).unwrap();
        (b.finish(), c)
    }

    #[test]
    fn well_formed_graph_validates_clean() {
        let (g, _) = small_matmul();
        assert!(g.validate().is_empty(), "{:?}", g.validate());
    }

    #[test]
    fn reduce_over_absent_dim_is_diagnosed() {
        let (mut g, _) = small_matmul();
        // hand-corrupt: reduce over a dim the input does not carry
        let id = g.nodes.len();
        g.nodes.push(OpNode {
            id,
            name: "bad".into(),
            kind: OpKind::Reduce { combiner: Combiner::Sum, dims: vec!["q".into()] },
            inputs: vec![0],
            dims: vec!["m".into(), "k".into()],
            dtype: DType::F64,
        });
        g.extents.insert("q".into(), 3);
        let diags = g.validate();
        assert_eq!(diags.len(), 1);
        assert!(diags[0].message.contains('q'));
    }

    #[test]
    fn cycle_is_diagnosed() {
        let (mut g, c) = small_matmul();
        // a feeds c feeds a
        g.nodes[0].inputs = vec![c];
        let diags = g.validate();
        assert!(diags.iter().any(|d| d.message == "cycle"));
    }

    #[test]
    fn contract_requires_shared_dim() {
        let mut b = GraphBuilder::new();
        let a = b
            .input("a", &[("m".into(), 2), ("k".into(), 2)], DType::F64)
            .unwrap();
        let w = b
            .input("w", &[("j".into(), 2), ("n".into(), 2)], DType::F64)
            .unwrap();
        let err = b.contract("c", a, w, &["k"]).unwrap_err();
        assert!(err.to_string().contains("contraction dim not shared"));
    }

    #[test]
    fn contract_output_dim_order() {
        let a: Vec<String> = vec!["b".into(), "h".into(), "m".into(), "k".into()];
        let bb: Vec<String> = vec!["b".into(), "h".into(), "n".into(), "k".into()];
        let out = contract_output_dims(&a, &bb, &["k".into()]);
        assert_eq!(out, vec!["b", "h", "m", "n"]);
    }

    #[test]
    fn pointwise_requires_matching_dims() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[("m".into(), 2)], DType::F64).unwrap();
        let y = b.input("y", &[("n".into(), 2)], DType::F64).unwrap();
        let err = b
            .pointwise("z", crate::expr::add(E::arg(0), E::arg(1)), &[x, y])
            .unwrap_err();
        assert!(err.to_string().contains("explicit"));
    }
}
