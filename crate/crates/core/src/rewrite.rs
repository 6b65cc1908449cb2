//! The semantic fusion rewrite: detect the two-pass (max, shifted-sum)
//! reduction pattern and replace it with a single-pass online pair.
//!
//! The matcher is deliberately conservative: it recognizes exactly the
//! max-reduce → exp(x − broadcast(max)) → sum-reduce shape over the closed
//! pointwise operator set, and declines anything else.

use std::collections::BTreeSet;

use crate::algebra::{check_algebra, ReductionAlgebra};
use crate::error::{Error, Result};
use crate::expr::PointwiseExpr;
use crate::ir::{Combiner, NodeId, OnlineRole, OpKind, TensorGraph};

/// A structural match of the two-pass stable reduction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TwoPassMatch {
    /// max-Reduce producing the final statistic
    pub stat: NodeId,
    /// sum-Reduce over the shifted exponentials
    pub acc: NodeId,
    /// the exp(x − m) pointwise feeding `acc`
    pub exp: NodeId,
    /// broadcast aligning the statistic back to x's space
    pub bcast: NodeId,
    /// the shared pre-reduction input x
    pub source: NodeId,
    /// reduced dims (identical for both passes)
    pub dims: Vec<String>,
}

/// Sample points used to confirm the pattern's exp is the algebra's E.
const HOM_PROBES: [f64; 5] = [-3.0, -0.5, 0.0, 1.0, 4.0];

fn is_exp_of_sub(expr: &PointwiseExpr) -> Option<(usize, usize)> {
    // exactly exp(arg_a - arg_b); scale factors and anything else decline
    if let PointwiseExpr::Exp(inner) = expr {
        if let PointwiseExpr::Sub(a, b) = inner.as_ref() {
            if let (PointwiseExpr::Arg(i), PointwiseExpr::Arg(j)) = (a.as_ref(), b.as_ref()) {
                return Some((*i, *j));
            }
        }
    }
    None
}

/// Scan for two-pass reduction patterns. Returns the matches plus
/// diagnostics for near-misses that were declined.
pub fn find_two_pass_patterns(graph: &TensorGraph) -> (Vec<TwoPassMatch>, Vec<String>) {
    let consumers = graph.consumers();
    let mut matches = Vec::new();
    let mut diags = Vec::new();

    for node in &graph.nodes {
        let OpKind::Reduce { combiner: Combiner::Sum, dims } = &node.kind else {
            continue;
        };
        let pw_id = node.inputs[0];
        let OpKind::Pointwise(expr) = &graph.nodes[pw_id].kind else {
            continue;
        };
        // the pointwise must feed only this reduction, or fusing it away
        // would duplicate work for its other consumers
        if consumers[pw_id].len() != 1 {
            continue;
        }
        // find a broadcast-of-max among the pointwise inputs
        let mut found: Option<(usize, NodeId, NodeId)> = None; // (arg slot, bcast, stat)
        for (slot, &inp) in graph.nodes[pw_id].inputs.iter().enumerate() {
            if !matches!(graph.nodes[inp].kind, OpKind::Broadcast) {
                continue;
            }
            let m_id = graph.nodes[inp].inputs[0];
            if let OpKind::Reduce { combiner: Combiner::Max, dims: mdims } =
                &graph.nodes[m_id].kind
            {
                if mdims == dims {
                    found = Some((slot, inp, m_id));
                    break;
                }
            }
        }
        let Some((m_slot, bcast_id, stat_id)) = found else {
            continue;
        };
        let source = graph.nodes[stat_id].inputs[0];
        // structural candidate found; now the body must be E(x ⊕ ⊖m)
        match is_exp_of_sub(expr) {
            Some((xi, mi)) if mi == m_slot => {
                let x_arg = graph.nodes[pw_id].inputs[xi];
                if x_arg != source {
                    diags.push(format!(
                        "skipped {}: subtraction operand {} is not the max's input {}",
                        node.name, graph.nodes[x_arg].name, graph.nodes[source].name
                    ));
                    continue;
                }
                matches.push(TwoPassMatch {
                    stat: stat_id,
                    acc: node.id,
                    exp: pw_id,
                    bcast: bcast_id,
                    source,
                    dims: dims.clone(),
                });
            }
            _ => {
                diags.push(format!(
                    "skipped {}: non-homomorphic dependency (body is not E(x \u{2295} \u{2296}m))",
                    node.name
                ));
            }
        }
    }
    (matches, diags)
}

/// Replace one matched two-pass pattern with an Online (Stat, Acc) pair
/// reading the source directly; the intermediate exp node is dropped.
pub fn rewrite_two_pass_to_online(
    graph: &TensorGraph,
    m: &TwoPassMatch,
    alg: &ReductionAlgebra,
    group: usize,
) -> Result<TensorGraph> {
    // the rewrite is only sound when the pattern's exp is the algebra's E
    for &p in &HOM_PROBES {
        if ((alg.hom)(p) - p.exp()).abs() > 1e-12 * p.exp().max(1.0) {
            return Err(Error::Graph(format!(
                "non-homomorphic dependency: algebra {} does not register exp as E",
                alg.name
            )));
        }
    }
    let mut g = graph.clone();
    g.nodes[m.stat].kind =
        OpKind::Online { role: OnlineRole::Stat, group, dims: m.dims.clone() };
    g.nodes[m.acc].kind =
        OpKind::Online { role: OnlineRole::Acc, group, dims: m.dims.clone() };
    g.nodes[m.acc].inputs = vec![m.source];
    let mut dead = BTreeSet::new();
    dead.insert(m.exp);
    let g = g.without_nodes(&dead)?;
    Ok(g.sweep_dead())
}

/// Outcome of the whole-graph semantic pass.
#[derive(Debug)]
pub struct SemanticOutcome {
    pub graph: TensorGraph,
    pub rewrites: usize,
    pub diagnostics: Vec<String>,
}

/// Apply the online rewrite to every match in the graph. The algebra's
/// axioms are re-checked first; a failing algebra disables the pass.
pub fn try_fuse_semantic(graph: &TensorGraph, alg: &ReductionAlgebra) -> SemanticOutcome {
    let samples = [-5.0, -1.0, 0.0, 0.5, 2.0, 7.0];
    match check_algebra(alg, &samples, 1e-10) {
        Ok(report) if report.passed => {}
        Ok(report) => {
            let failing: Vec<&str> = report
                .axioms
                .iter()
                .filter(|a| !a.passed)
                .map(|a| a.axiom.as_str())
                .collect();
            return SemanticOutcome {
                graph: graph.clone(),
                rewrites: 0,
                diagnostics: vec![format!(
                    "semantic pass disabled: algebra {} fails axioms: {}",
                    alg.name,
                    failing.join(", ")
                )],
            };
        }
        Err(e) => {
            return SemanticOutcome {
                graph: graph.clone(),
                rewrites: 0,
                diagnostics: vec![format!("semantic pass disabled: {e}")],
            };
        }
    }

    let mut g = graph.clone();
    let mut diagnostics = Vec::new();
    let mut rewrites = 0;
    let mut group = 0;
    loop {
        let (matches, diags) = find_two_pass_patterns(&g);
        if rewrites == 0 {
            diagnostics.extend(diags);
        }
        // ids shift after each rewrite, so apply one match per scan
        let Some(m) = matches.first() else { break };
        match rewrite_two_pass_to_online(&g, m, alg, group) {
            Ok(ng) => {
                debug_assert!(ng.nodes.len() < g.nodes.len());
                g = ng;
                rewrites += 1;
                group += 1;
            }
            Err(e) => {
                diagnostics.push(e.to_string());
                break;
            }
        }
    }
    SemanticOutcome { graph: g, rewrites, diagnostics }
}
