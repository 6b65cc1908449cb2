//! Kernel formation: greedy fixpoint fusion over computation sketches, plus
//! per-kernel body planning.
//!
//! Body planning is the semantic gate on fusion. A sketch-level merge is
//! only accepted if the merged kernel admits a loop plan in which every
//! member is a per-block prologue value, a streamed loop value, a
//! block-level accumulator, or an epilogue over finalized accumulators.
//! Reading the *final* value of a reduction inside its own loop is exactly
//! what a plan cannot express — unless the reduction pair was rewritten to
//! its online form, in which case loop values may read the *running*
//! statistic and dependent accumulators are rescaled on every update.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::algebra::ReductionAlgebra;
use crate::error::{Error, Result};
use crate::expr::PointwiseExpr;
use crate::grid::TileConfig;
use crate::ir::{Combiner, NodeId, OnlineRole, OpKind, TensorGraph};
use crate::rewrite::try_fuse_semantic;
use crate::sketch::{
    extract_sketch, fuse_sketches, fuse_sketches_tiled, ComputationSketch, FusionKind, FusionPlan,
};

/// Execution phase of a kernel member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// p-space value independent of accumulators; computed once per block
    Prologue,
    /// streamed value recomputed per reduction tile
    Loop,
    /// block-level accumulator carried across reduction tiles
    BlockAcc,
    /// p-space value over finalized accumulators, computed after the loop
    Epilogue,
    /// division by a running denominator, hoisted out of a linear
    /// accumulator; the loop uses the numerator, the epilogue divides
    HoistDiv,
    /// broadcast of an accumulator that only feeds hoisted divisions
    SkippedBroadcast,
}

/// Rescale registration: multiply `acc` by c^degree whenever the running
/// statistic of `group` advances (c = E(m_old ⊖ m_new)).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rescale {
    pub acc: NodeId,
    pub group: usize,
    pub degree: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelBody {
    /// r-dims iterated tile-by-tile at block level, outermost first
    pub streamed: Vec<String>,
    pub phase: BTreeMap<NodeId, Phase>,
    pub rescales: Vec<Rescale>,
    /// (accumulator, denominator accumulator) pairs applied after the loop
    pub epilogue_div: Vec<(NodeId, NodeId)>,
    /// hoisted div node → its numerator input
    pub hoist_num: BTreeMap<NodeId, NodeId>,
    /// online group → stat member
    pub stat_of_group: BTreeMap<usize, NodeId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Kernel {
    pub name: String,
    /// member compute nodes in graph topological order
    pub members: Vec<NodeId>,
    pub sketch: ComputationSketch,
    /// members materialized to global memory
    pub outputs: Vec<NodeId>,
    pub body: KernelBody,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelSchedule {
    pub graph: TensorGraph,
    pub kernels: Vec<Kernel>,
    pub plans: Vec<FusionPlan>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SchedulerOptions {
    pub semantic: bool,
    pub structural: bool,
    pub tiled: bool,
    pub tile_cfg: TileConfig,
}

impl Default for SchedulerOptions {
    fn default() -> Self {
        SchedulerOptions {
            semantic: true,
            structural: true,
            tiled: true,
            tile_cfg: TileConfig::empty(),
        }
    }
}

impl KernelSchedule {
    pub fn kernel_count(&self) -> usize {
        self.kernels.len()
    }

    /// Members written to global memory that are not graph outputs.
    pub fn materialized_intermediates(&self) -> Vec<NodeId> {
        let final_producers: BTreeSet<NodeId> = self
            .graph
            .outputs
            .iter()
            .map(|&o| self.graph.nodes[o].inputs[0])
            .collect();
        self.kernels
            .iter()
            .flat_map(|k| k.outputs.iter())
            .copied()
            .filter(|id| !final_producers.contains(id))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// body planning

/// Dependence of a loop value on running statistics: a per-group degree of
/// multiplicative homogeneity in E(⊖m). Degree 1 means rescaling the
/// statistic by c multiplies the value by c; only such values may feed
/// linear accumulators that get rescaled on statistic updates.
#[derive(Debug, Clone, PartialEq)]
enum Info {
    /// the broadcast running statistic of an online group
    Stat(usize),
    /// a value of the form (something ⊖ m); must be consumed by E directly
    Shifted(usize, BTreeMap<usize, i64>),
    /// ordinary value with per-group homogeneity degrees
    Val(BTreeMap<usize, i64>),
}

fn val0() -> Info {
    Info::Val(BTreeMap::new())
}

fn norm(mut d: BTreeMap<usize, i64>) -> BTreeMap<usize, i64> {
    d.retain(|_, v| *v != 0);
    d
}

fn deg_add(a: &BTreeMap<usize, i64>, b: &BTreeMap<usize, i64>, sign: i64) -> BTreeMap<usize, i64> {
    let mut out = a.clone();
    for (k, v) in b {
        *out.entry(*k).or_insert(0) += sign * v;
    }
    norm(out)
}

fn expr_info(e: &PointwiseExpr, args: &[Info]) -> Result<Info> {
    use PointwiseExpr as E;
    let err = |m: &str| Err(Error::Graph(format!("body plan: {m}")));
    let val = |i: Info| -> Result<BTreeMap<usize, i64>> {
        match i {
            Info::Val(d) => Ok(d),
            _ => Err(Error::Graph(
                "body plan: running statistic used outside E(x \u{2296} m)".into(),
            )),
        }
    };
    Ok(match e {
        E::Arg(i) => args[*i].clone(),
        E::Const(_) => val0(),
        E::Sub(a, b) => {
            let ia = expr_info(a, args)?;
            let ib = expr_info(b, args)?;
            match (ia, ib) {
                (Info::Val(d), Info::Stat(g)) => {
                    if d.contains_key(&g) {
                        return err("statistic subtracted from a value already scaled by it");
                    }
                    Info::Shifted(g, d)
                }
                (Info::Val(a), Info::Val(b)) => {
                    if a != b {
                        return err("subtraction of values with different statistic degrees");
                    }
                    Info::Val(a)
                }
                _ => return err("unsupported use of a running statistic"),
            }
        }
        E::Exp(a) => match expr_info(a, args)? {
            Info::Shifted(g, d) => {
                let mut d = d;
                *d.entry(g).or_insert(0) += 1;
                Info::Val(norm(d))
            }
            Info::Val(d) if d.is_empty() => val0(),
            _ => return err("exp of a statistic-dependent value"),
        },
        E::Add(a, b) | E::Max2(a, b) | E::Min2(a, b) => {
            let da = val(expr_info(a, args)?)?;
            let db = val(expr_info(b, args)?)?;
            if da != db {
                return err("combining values with different statistic degrees");
            }
            Info::Val(da)
        }
        E::Mul(a, b) => {
            let da = val(expr_info(a, args)?)?;
            let db = val(expr_info(b, args)?)?;
            Info::Val(deg_add(&da, &db, 1))
        }
        E::Div(a, b) => {
            let da = val(expr_info(a, args)?)?;
            let db = val(expr_info(b, args)?)?;
            Info::Val(deg_add(&da, &db, -1))
        }
        E::Neg(a) | E::Scale(_, a) => Info::Val(val(expr_info(a, args)?)?),
        E::Where(c, a, b) => {
            let dc = val(expr_info(c, args)?)?;
            if !dc.is_empty() {
                return err("statistic-dependent predicate");
            }
            let da = val(expr_info(a, args)?)?;
            let db = val(expr_info(b, args)?)?;
            if da != db {
                return err("where-branches with different statistic degrees");
            }
            Info::Val(da)
        }
    })
}

fn is_sum_like(kind: &OpKind) -> bool {
    matches!(
        kind,
        OpKind::Reduce { combiner: Combiner::Sum, .. }
            | OpKind::Contract { .. }
            | OpKind::Online { role: OnlineRole::Acc, .. }
    )
}

/// Plan the loop structure of one kernel, or explain why none exists.
pub fn plan_body(
    graph: &TensorGraph,
    members: &[NodeId],
    sketch: &ComputationSketch,
    outputs: &BTreeSet<NodeId>,
) -> Result<KernelBody> {
    let member_set: BTreeSet<NodeId> = members.iter().copied().collect();
    let rset: BTreeSet<&str> = sketch.r_dims.iter().map(|(n, _)| n.as_str()).collect();
    let pset: BTreeSet<&str> = sketch.p_dims.iter().map(|(n, _)| n.as_str()).collect();
    let consumers = graph.consumers();

    // sanity: members live entirely inside the kernel's dim space
    for &id in members {
        let node = &graph.nodes[id];
        for d in node.dims.iter().chain(node.kind.reduce_dims().unwrap_or(&[]).iter()) {
            if !rset.contains(d.as_str()) && !pset.contains(d.as_str()) {
                return Err(Error::Graph(format!(
                    "body plan: member {} uses dim {d} outside the kernel space",
                    node.name
                )));
            }
        }
    }

    let mut phase: BTreeMap<NodeId, Phase> = BTreeMap::new();
    let mut stat_of_group: BTreeMap<usize, NodeId> = BTreeMap::new();
    let mut touches_acc: BTreeSet<NodeId> = BTreeSet::new();

    // pass 1: accumulators and streamed dims
    let mut streamed: BTreeSet<String> = BTreeSet::new();
    for &id in members {
        let node = &graph.nodes[id];
        if let Some(rd) = node.kind.reduce_dims() {
            let out_touches_r = node.dims.iter().any(|d| rset.contains(d.as_str()));
            if !out_touches_r {
                phase.insert(id, Phase::BlockAcc);
                for d in rd {
                    streamed.insert(d.clone());
                }
                if let OpKind::Online { role: OnlineRole::Stat, group, .. } = &node.kind {
                    stat_of_group.insert(*group, id);
                }
            }
        }
    }
    let streamed: Vec<String> = sketch
        .r_dims
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| streamed.contains(n))
        .collect();

    // pass 2: remaining phases (members are in topo order)
    for &id in members {
        if phase.contains_key(&id) {
            continue;
        }
        let node = &graph.nodes[id];
        let deps_acc = node.inputs.iter().any(|i| {
            member_set.contains(i)
                && (phase.get(i) == Some(&Phase::BlockAcc) || touches_acc.contains(i))
        });
        if deps_acc {
            touches_acc.insert(id);
        }
        let in_loop = node.dims.iter().any(|d| rset.contains(d.as_str()))
            || node.kind.reduce_dims().is_some();
        if in_loop {
            phase.insert(id, Phase::Loop);
        } else if deps_acc {
            phase.insert(id, Phase::Epilogue);
        } else {
            phase.insert(id, Phase::Prologue);
        }
    }

    // pass 3: hoist divisions by running denominators
    let mut hoist_num: BTreeMap<NodeId, NodeId> = BTreeMap::new();
    let mut epilogue_div: Vec<(NodeId, NodeId)> = Vec::new();
    for &id in members {
        if phase[&id] != Phase::Loop {
            continue;
        }
        let node = &graph.nodes[id];
        let OpKind::Pointwise(PointwiseExpr::Div(a, b)) = &node.kind else { continue };
        let (PointwiseExpr::Arg(ai), PointwiseExpr::Arg(bi)) = (a.as_ref(), b.as_ref()) else {
            continue;
        };
        let denom_in = node.inputs[*bi];
        // denominator must be a broadcast of an in-kernel sum-like accumulator
        if !member_set.contains(&denom_in)
            || !matches!(graph.nodes[denom_in].kind, OpKind::Broadcast)
        {
            continue;
        }
        let acc = graph.nodes[denom_in].inputs[0];
        if !member_set.contains(&acc)
            || phase.get(&acc) != Some(&Phase::BlockAcc)
            || !is_sum_like(&graph.nodes[acc].kind)
        {
            continue;
        }
        // the hoisted value must sink entirely into in-kernel linear
        // accumulators, and must not escape to global memory
        if outputs.contains(&id) {
            return Err(Error::Graph(format!(
                "body plan: hoisted division {} is a kernel output",
                node.name
            )));
        }
        for &c in &consumers[id] {
            let ok = member_set.contains(&c)
                && phase.get(&c) == Some(&Phase::BlockAcc)
                && is_sum_like(&graph.nodes[c].kind);
            if !ok {
                return Err(Error::Graph(format!(
                    "body plan: division {} by a running denominator feeds non-linear consumer {}",
                    node.name, graph.nodes[c].name
                )));
            }
            epilogue_div.push((c, acc));
        }
        phase.insert(id, Phase::HoistDiv);
        hoist_num.insert(id, node.inputs[*ai]);
        // the broadcast is skipped in the loop; it may serve other hoisted
        // divs, but nothing else
        phase.insert(denom_in, Phase::SkippedBroadcast);
    }
    epilogue_div.sort_unstable();
    epilogue_div.dedup();

    // pass 4: barrier check — loop values may read a block accumulator only
    // as the running statistic of an online group (via broadcast), or
    // through a hoisted division
    for &id in members {
        let ph = phase[&id];
        if !matches!(ph, Phase::Loop | Phase::HoistDiv | Phase::SkippedBroadcast) {
            continue;
        }
        let node = &graph.nodes[id];
        for (slot, &i) in node.inputs.iter().enumerate() {
            if !member_set.contains(&i) {
                continue;
            }
            match phase[&i] {
                Phase::BlockAcc => {
                    let is_stat_bcast = matches!(node.kind, OpKind::Broadcast)
                        && matches!(
                            graph.nodes[i].kind,
                            OpKind::Online { role: OnlineRole::Stat, .. }
                        );
                    let is_skipped_bcast = ph == Phase::SkippedBroadcast;
                    if !is_stat_bcast && !is_skipped_bcast {
                        return Err(Error::Graph(format!(
                            "body plan: loop value {} reads the final reduction {} inside its own loop",
                            node.name, graph.nodes[i].name
                        )));
                    }
                }
                Phase::Epilogue => {
                    return Err(Error::Graph(format!(
                        "body plan: loop value {} reads epilogue value {}",
                        node.name, graph.nodes[i].name
                    )));
                }
                Phase::SkippedBroadcast if ph != Phase::HoistDiv || slot == 0 => {
                    return Err(Error::Graph(format!(
                        "body plan: running denominator broadcast {} has a non-hoisted consumer {}",
                        graph.nodes[i].name, node.name
                    )));
                }
                _ => {}
            }
        }
    }

    // pass 5: homogeneity analysis and rescale registration
    let mut infos: BTreeMap<NodeId, Info> = BTreeMap::new();
    let get_info = |infos: &BTreeMap<NodeId, Info>, i: NodeId| -> Info {
        infos.get(&i).cloned().unwrap_or_else(val0)
    };
    for &id in members {
        let node = &graph.nodes[id];
        let info = match phase[&id] {
            Phase::Prologue | Phase::BlockAcc | Phase::Epilogue => continue,
            Phase::SkippedBroadcast => continue,
            Phase::HoistDiv => get_info(&infos, hoist_num[&id]),
            Phase::Loop => match &node.kind {
                OpKind::Broadcast => {
                    let i = node.inputs[0];
                    if let (true, OpKind::Online { role: OnlineRole::Stat, group, .. }) =
                        (member_set.contains(&i), &graph.nodes[i].kind)
                    {
                        Info::Stat(*group)
                    } else {
                        get_info(&infos, i)
                    }
                }
                OpKind::Pointwise(e) => {
                    let args: Vec<Info> =
                        node.inputs.iter().map(|&i| get_info(&infos, i)).collect();
                    expr_info(e, &args)?
                }
                OpKind::Reduce { .. } => match get_info(&infos, node.inputs[0]) {
                    Info::Val(d) => Info::Val(d),
                    _ => {
                        return Err(Error::Graph(format!(
                            "body plan: reduction {} over a raw statistic",
                            node.name
                        )))
                    }
                },
                OpKind::Contract { .. } => {
                    let (a, b) =
                        (get_info(&infos, node.inputs[0]), get_info(&infos, node.inputs[1]));
                    match (a, b) {
                        (Info::Val(da), Info::Val(db)) => Info::Val(deg_add(&da, &db, 1)),
                        _ => {
                            return Err(Error::Graph(format!(
                                "body plan: contraction {} over a raw statistic",
                                node.name
                            )))
                        }
                    }
                }
                OpKind::Online { .. } | OpKind::Input | OpKind::Output => {
                    return Err(Error::Graph(format!(
                        "body plan: unexpected loop member {}",
                        node.name
                    )))
                }
            },
        };
        if matches!(info, Info::Shifted(..)) {
            return Err(Error::Graph(format!(
                "body plan: shifted statistic escapes node {}",
                node.name
            )));
        }
        infos.insert(id, info);
    }

    let mut rescales = Vec::new();
    for &id in members {
        if phase[&id] != Phase::BlockAcc {
            continue;
        }
        let node = &graph.nodes[id];
        let mut degrees: BTreeMap<usize, i64> = BTreeMap::new();
        for &i in &node.inputs {
            match get_info(&infos, i) {
                Info::Val(d) => degrees = deg_add(&degrees, &d, 1),
                _ => {
                    return Err(Error::Graph(format!(
                        "body plan: accumulator {} folds a raw statistic",
                        node.name
                    )))
                }
            }
        }
        match &node.kind {
            OpKind::Online { .. } => {
                if !degrees.is_empty() {
                    return Err(Error::Graph(format!(
                        "body plan: online pair {} over a statistic-scaled input",
                        node.name
                    )));
                }
            }
            _ => {
                for (group, degree) in degrees {
                    if !stat_of_group.contains_key(&group) {
                        return Err(Error::Graph(format!(
                            "body plan: accumulator {} depends on a statistic outside the kernel",
                            node.name
                        )));
                    }
                    rescales.push(Rescale { acc: id, group, degree });
                }
            }
        }
    }

    // pass 6: a loop value written to global memory must not depend on any
    // accumulator — its mid-loop values would not be final
    for &id in outputs {
        if matches!(phase[&id], Phase::Loop)
            && (touches_acc.contains(&id) || !matches!(get_info(&infos, id), Info::Val(ref d) if d.is_empty()))
        {
            return Err(Error::Graph(format!(
                "body plan: materialized loop value {} depends on an accumulator",
                graph.nodes[id].name
            )));
        }
    }

    Ok(KernelBody { streamed, phase, rescales, epilogue_div, hoist_num, stat_of_group })
}

// ---------------------------------------------------------------------------
// the scheduler

#[derive(Debug, Clone)]
struct Seed {
    members: Vec<NodeId>,
    sketch: ComputationSketch,
}

fn kernel_outputs(graph: &TensorGraph, members: &[NodeId]) -> BTreeSet<NodeId> {
    let mset: BTreeSet<NodeId> = members.iter().copied().collect();
    let mut out = BTreeSet::new();
    for n in &graph.nodes {
        for &i in &n.inputs {
            if mset.contains(&i) && (!mset.contains(&n.id) || matches!(n.kind, OpKind::Output)) {
                // Output nodes are not kernel members; a member feeding one
                // is a global write by definition
                if !mset.contains(&n.id) || matches!(n.kind, OpKind::Output) {
                    out.insert(i);
                }
            }
        }
    }
    out
}

/// Count of cross-kernel intermediate values (for the monotonicity check).
fn cross_kernel_values(graph: &TensorGraph, seeds: &[Option<Seed>]) -> usize {
    let mut owner: BTreeMap<NodeId, usize> = BTreeMap::new();
    for (k, s) in seeds.iter().enumerate() {
        if let Some(s) = s {
            for &m in &s.members {
                owner.insert(m, k);
            }
        }
    }
    let mut count = 0;
    for s in seeds.iter().flatten() {
        for &m in &s.members {
            let external = graph.consumers()[m]
                .iter()
                .any(|&c| graph.nodes[c].kind.is_compute() && owner.get(&c) != owner.get(&m));
            if external {
                count += 1;
            }
        }
    }
    count
}

/// Build the fused kernel schedule for a validated graph.
pub fn schedule(
    graph: &TensorGraph,
    alg: &ReductionAlgebra,
    opts: &SchedulerOptions,
) -> Result<KernelSchedule> {
    let diags = graph.validate();
    if !diags.is_empty() {
        return Err(Error::Graph(format!(
            "invalid graph: {}",
            diags.iter().map(|d| d.message.clone()).collect::<Vec<_>>().join("; ")
        )));
    }

    let mut diagnostics = Vec::new();
    let g = if opts.semantic {
        let out = try_fuse_semantic(graph, alg);
        diagnostics.extend(out.diagnostics);
        out.graph
    } else {
        graph.clone()
    };

    let topo = g.topo_order()?;
    let topo_pos: BTreeMap<NodeId, usize> =
        topo.iter().enumerate().map(|(i, &n)| (n, i)).collect();

    let mut seeds: Vec<Option<Seed>> = Vec::new();
    for &id in &topo {
        if g.nodes[id].kind.is_compute() {
            seeds.push(Some(Seed { members: vec![id], sketch: extract_sketch(&g, id) }));
        }
    }

    let mut plans: Vec<FusionPlan> = Vec::new();
    let consumers = g.consumers();

    loop {
        // owner map and kernel-level edges
        let mut owner: BTreeMap<NodeId, usize> = BTreeMap::new();
        for (k, s) in seeds.iter().enumerate() {
            if let Some(s) = s {
                for &m in &s.members {
                    owner.insert(m, k);
                }
            }
        }
        let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();
        for (&m, &k) in &owner {
            for &c in &consumers[m] {
                if let Some(&ck) = owner.get(&c) {
                    if ck != k {
                        edges.insert((k, ck));
                    }
                }
            }
        }
        // candidate order: ascending (min producer member id, min consumer member id)
        let mut candidates: Vec<(usize, usize, usize, usize)> = edges
            .iter()
            .map(|&(p, c)| {
                let pm = *seeds[p].as_ref().unwrap().members.iter().min().unwrap();
                let cm = *seeds[c].as_ref().unwrap().members.iter().min().unwrap();
                (pm, cm, p, c)
            })
            .collect();
        candidates.sort_unstable();

        let mut merged_any = false;
        'cand: for &(_, _, p, c) in &candidates {
            let prod = seeds[p].as_ref().unwrap();
            let cons = seeds[c].as_ref().unwrap();
            let attempt: Option<(ComputationSketch, Vec<String>, Vec<String>, FusionKind)> =
                if opts.structural {
                    fuse_sketches(&prod.sketch, &cons.sketch)
                        .map(|(f, d)| (f, d, vec![], FusionKind::Structural))
                } else {
                    None
                }
                .or_else(|| {
                    // the tiled rewrite is elimination followed by the
                    // structural rule in tile space, so it needs both passes
                    if opts.tiled
                        && opts.structural
                        && fuse_sketches(&prod.sketch, &cons.sketch).is_none()
                    {
                        fuse_sketches_tiled(&prod.sketch, &cons.sketch, &opts.tile_cfg)
                            .map(|(f, d, e)| (f, d, e, FusionKind::TilingAware))
                    } else {
                        None
                    }
                });
            let Some((fused, demoted, eliminated, kind)) = attempt else { continue };

            // convexity: merging must not create a kernel-level cycle via a
            // third kernel on some p → … → c path
            let mut reach: BTreeSet<usize> = BTreeSet::new();
            let mut stack: Vec<usize> = edges
                .iter()
                .filter(|&&(a, b)| a == p && b != c)
                .map(|&(_, b)| b)
                .collect();
            while let Some(k) = stack.pop() {
                if !reach.insert(k) {
                    continue;
                }
                for &(a, b) in &edges {
                    if a == k {
                        stack.push(b);
                    }
                }
            }
            if reach.contains(&c) {
                continue;
            }

            // merged member list, topo order
            let mut members: Vec<NodeId> =
                prod.members.iter().chain(cons.members.iter()).copied().collect();
            members.sort_unstable_by_key(|m| topo_pos[m]);
            let outs = kernel_outputs(&g, &members);
            if plan_body(&g, &members, &fused, &outs).is_err() {
                continue 'cand;
            }

            // monotonicity guard: materialized intermediates never increase
            let before = cross_kernel_values(&g, &seeds);
            let mut trial = seeds.clone();
            trial[c] = Some(Seed { members: members.clone(), sketch: fused.clone() });
            trial[p] = None;
            let after = cross_kernel_values(&g, &trial);
            debug_assert!(after <= before);

            seeds = trial;
            plans.push(FusionPlan { kind, demoted, eliminated, fused });
            merged_any = true;
            break;
        }
        if !merged_any {
            break;
        }
    }

    // finalize: dependency-order kernels deterministically
    let live: Vec<Seed> = seeds.into_iter().flatten().collect();
    let mut owner: BTreeMap<NodeId, usize> = BTreeMap::new();
    for (k, s) in live.iter().enumerate() {
        for &m in &s.members {
            owner.insert(m, k);
        }
    }
    let mut indeg = vec![0usize; live.len()];
    let mut succ: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); live.len()];
    for (&m, &k) in &owner {
        for &c in &consumers[m] {
            if let Some(&ck) = owner.get(&c) {
                if ck != k && succ[k].insert(ck) {
                    indeg[ck] += 1;
                }
            }
        }
    }
    let mut heap = std::collections::BinaryHeap::new();
    for (k, s) in live.iter().enumerate() {
        if indeg[k] == 0 {
            heap.push(std::cmp::Reverse((*s.members.iter().min().unwrap(), k)));
        }
    }
    let mut order = Vec::with_capacity(live.len());
    while let Some(std::cmp::Reverse((_, k))) = heap.pop() {
        order.push(k);
        for &ck in &succ[k] {
            indeg[ck] -= 1;
            if indeg[ck] == 0 {
                heap.push(std::cmp::Reverse((
                    *live[ck].members.iter().min().unwrap(),
                    ck,
                )));
            }
        }
    }
    if order.len() != live.len() {
        return Err(Error::Graph("kernel schedule is cyclic".into()));
    }

    let mut kernels = Vec::with_capacity(order.len());
    for (i, &k) in order.iter().enumerate() {
        let s = &live[k];
        let outs = kernel_outputs(&g, &s.members);
        let body = plan_body(&g, &s.members, &s.sketch, &outs)?;
        kernels.push(Kernel {
            name: format!("k{i}"),
            members: s.members.clone(),
            sketch: s.sketch.clone(),
            outputs: outs.into_iter().collect(),
            body,
        });
    }

    Ok(KernelSchedule { graph: g, kernels, plans, diagnostics })
}
