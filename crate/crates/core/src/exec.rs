//! Tiled execution of a kernel schedule over a simulated memory hierarchy.
//!
//! Each kernel iterates a logical grid of p-tiles (blocks). A block loads
//! input tiles into a bounded scratchpad, streams the kernel's reduction
//! tiles while carrying block-level accumulators (with online rescaling),
//! and writes only the kernel's outputs back to global memory. Global
//! traffic is reported as unique elements touched per kernel; per-touch tile
//! loads are reported separately, since repeated tile loads are a cache
//! question the model deliberately does not answer.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, Bindings, Outputs};
use crate::expr::sub_guarded;
use crate::grid::{GridLimits, LogicalGrid, TileConfig};
use crate::ir::{Combiner, NodeId, OnlineRole, OpKind, TensorGraph};
use crate::schedule::{Kernel, KernelSchedule, Phase};
use crate::tensor::{DType, TensorData};

pub const DEFAULT_SCRATCHPAD_BYTES: usize = 256 * 1024;

#[derive(Debug, Clone)]
pub struct ExecOptions {
    pub tile_cfg: TileConfig,
    pub limits: GridLimits,
    pub scratchpad_bytes: usize,
    pub parallel: bool,
    pub trace: bool,
    /// test hook: drop the online rescale factor, to prove verification
    /// catches an unsound fusion
    pub inject_rescale_bug: bool,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions {
            tile_cfg: TileConfig::empty(),
            limits: GridLimits::default(),
            scratchpad_bytes: DEFAULT_SCRATCHPAD_BYTES,
            parallel: false,
            trace: false,
            inject_rescale_bug: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelTraffic {
    pub kernel: String,
    pub blocks: usize,
    /// unique global elements read / written by this kernel
    pub global_reads: usize,
    pub global_writes: usize,
    /// tile-granular touches, counting repeats across blocks and steps
    pub tile_loads: usize,
    pub tile_stores: usize,
    pub scratchpad_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub kernel_count: usize,
    pub global_reads: usize,
    pub global_writes: usize,
    /// unique elements of non-output values written to global memory
    pub intermediate_elements: usize,
    pub intermediate_bytes_materialized: usize,
    pub per_kernel: Vec<KernelTraffic>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockTrace {
    pub kernel: String,
    pub block: usize,
    pub coords: Vec<usize>,
    /// (tensor name, elements written) per write region
    pub writes: Vec<(String, usize)>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub blocks: Vec<BlockTrace>,
}

type Ranges = BTreeMap<String, (usize, usize)>;

fn slice(t: &TensorData, ranges: &Ranges) -> TensorData {
    let rank = t.dims.len();
    let mut starts = Vec::with_capacity(rank);
    let mut lens = Vec::with_capacity(rank);
    for (d, &e) in t.dims.iter().zip(&t.extents) {
        let (s, l) = ranges.get(d).copied().unwrap_or((0, e));
        starts.push(s);
        lens.push(l.min(e - s));
    }
    let strides = t.strides();
    let len: usize = lens.iter().product();
    let mut out = Vec::with_capacity(len);
    let mut idx = vec![0usize; rank];
    let mut src: usize = starts.iter().zip(&strides).map(|(s, st)| s * st).sum();
    for _ in 0..len {
        out.push(t.data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < lens[d] {
                break;
            }
            src -= strides[d] * lens[d];
            idx[d] = 0;
        }
    }
    TensorData::new(t.dims.clone(), lens, out)
}

/// Visit the flat indices of a rectangular region of `extents`.
fn region_indices(
    dims: &[String],
    extents: &[usize],
    ranges: &Ranges,
    mut f: impl FnMut(usize),
) {
    let rank = dims.len();
    let mut starts = Vec::with_capacity(rank);
    let mut lens = Vec::with_capacity(rank);
    for (d, &e) in dims.iter().zip(extents) {
        let (s, l) = ranges.get(d).copied().unwrap_or((0, e));
        starts.push(s);
        lens.push(l.min(e - s));
    }
    let strides = crate::tensor::strides_of(extents);
    let len: usize = lens.iter().product();
    let mut idx = vec![0usize; rank];
    let mut at: usize = starts.iter().zip(&strides).map(|(s, st)| s * st).sum();
    for _ in 0..len {
        f(at);
        for d in (0..rank).rev() {
            idx[d] += 1;
            at += strides[d];
            if idx[d] < lens[d] {
                break;
            }
            at -= strides[d] * lens[d];
            idx[d] = 0;
        }
    }
}

fn bitmap_set(bits: &mut Vec<u64>, i: usize) -> bool {
    if bits.len() <= i / 64 {
        bits.resize(i / 64 + 1, 0);
    }
    let w = &mut bits[i / 64];
    let m = 1u64 << (i % 64);
    let fresh = *w & m == 0;
    *w |= m;
    fresh
}

fn popcount(bits: &[u64]) -> usize {
    bits.iter().map(|w| w.count_ones() as usize).sum()
}

struct BlockResult {
    block: usize,
    coords: Vec<usize>,
    writes: Vec<(NodeId, TensorData, Ranges)>,
    reads: Vec<(NodeId, Ranges)>,
    tile_loads: usize,
    tile_stores: usize,
}

/// Per-dim effective tile size inside one kernel.
fn kernel_tiles(
    graph: &TensorGraph,
    kernel: &Kernel,
    cfg: &TileConfig,
) -> BTreeMap<String, (usize, usize)> {
    let mut out = BTreeMap::new();
    for (n, e) in kernel.sketch.p_dims.iter().chain(kernel.sketch.r_dims.iter()) {
        out.insert(n.clone(), (*e, cfg.tile_of(n, *e)));
    }
    let _ = graph;
    out
}

fn buffer_bytes(dims: &[String], tiles: &BTreeMap<String, (usize, usize)>, dtype: DType) -> usize {
    dims.iter()
        .map(|d| tiles.get(d).map(|&(e, t)| t.min(e)).unwrap_or(1))
        .product::<usize>()
        * dtype.size_bytes()
}

/// Scratchpad estimate: one tile buffer per member value plus one per
/// distinct global input tile. Values that never occupy scratchpad are
/// excluded: skipped broadcasts, the hoisted division (it aliases its
/// numerator), broadcasts of a running statistic (register expansion), and
/// pointwise ops that can run in place on a sole-consumed operand buffer.
/// Accumulators are carried in F64 regardless of tensor dtype.
fn scratchpad_estimate(
    graph: &TensorGraph,
    kernel: &Kernel,
    tiles: &BTreeMap<String, (usize, usize)>,
) -> usize {
    let member_set: std::collections::BTreeSet<NodeId> =
        kernel.members.iter().copied().collect();
    let consumers = graph.consumers();
    let phase = &kernel.body.phase;
    let owns_buffer = |i: NodeId| {
        member_set.contains(&i)
            && !matches!(phase[&i], Phase::SkippedBroadcast | Phase::HoistDiv)
    };
    let mut bytes = 0;
    let mut seen_inputs = std::collections::BTreeSet::new();
    for &m in &kernel.members {
        let node = &graph.nodes[m];
        for &i in &node.inputs {
            if !member_set.contains(&i) && seen_inputs.insert(i) {
                let inp = &graph.nodes[i];
                bytes += buffer_bytes(&inp.dims, tiles, inp.dtype);
            }
        }
        match phase[&m] {
            Phase::SkippedBroadcast | Phase::HoistDiv => continue,
            Phase::Loop
                if matches!(node.kind, OpKind::Broadcast)
                    && member_set.contains(&node.inputs[0])
                    && matches!(
                        graph.nodes[node.inputs[0]].kind,
                        OpKind::Online { role: OnlineRole::Stat, .. }
                    ) =>
            {
                continue
            }
            Phase::BlockAcc => {
                bytes += buffer_bytes(&node.dims, tiles, DType::F64);
                if matches!(node.kind, OpKind::Online { role: OnlineRole::Acc, .. }) {
                    // internal running max lives beside the accumulator
                    bytes += buffer_bytes(&node.dims, tiles, DType::F64);
                }
            }
            _ => {
                let in_place = matches!(node.kind, OpKind::Pointwise(_))
                    && node.inputs.iter().any(|&i| {
                        owns_buffer(i)
                            && graph.nodes[i].dims == node.dims
                            && consumers[i].len() == 1
                    });
                if !in_place {
                    bytes += buffer_bytes(&node.dims, tiles, node.dtype);
                }
            }
        }
    }
    bytes
}

fn run_block(
    graph: &TensorGraph,
    kernel: &Kernel,
    globals: &BTreeMap<NodeId, TensorData>,
    tiles: &BTreeMap<String, (usize, usize)>,
    block_grid: &LogicalGrid,
    block: usize,
    inject_bug: bool,
) -> Result<BlockResult> {
    let coords = block_grid.delinearize(block)?;
    let member_set: std::collections::BTreeSet<NodeId> =
        kernel.members.iter().copied().collect();
    let body = &kernel.body;

    // p-space ranges for this block
    let mut base: Ranges = Ranges::new();
    for (name, (extent, tile)) in tiles {
        base.insert(name.clone(), (0, *extent));
        let _ = tile;
    }
    for ((name, _), &c) in block_grid.axes.iter().zip(&coords) {
        let (extent, tile) = tiles[name];
        base.insert(name.clone(), (c * tile, tile.min(extent - c * tile)));
    }

    let mut reads: Vec<(NodeId, Ranges)> = Vec::new();
    let mut tile_loads = 0usize;
    let mut writes: Vec<(NodeId, TensorData, Ranges)> = Vec::new();
    let mut tile_stores = 0usize;

    let out_set: std::collections::BTreeSet<NodeId> = kernel.outputs.iter().copied().collect();

    // values that persist across the whole block
    let mut persist: BTreeMap<NodeId, TensorData> = BTreeMap::new();
    let mut accs: BTreeMap<NodeId, TensorData> = BTreeMap::new();
    let mut acc_stats: BTreeMap<NodeId, TensorData> = BTreeMap::new();

    let extents_for = |node: NodeId, ranges: &Ranges| -> Vec<usize> {
        graph.nodes[node]
            .dims
            .iter()
            .map(|d| ranges.get(d).map(|r| r.1).unwrap_or(graph.extent(d)))
            .collect()
    };

    // evaluate one non-accumulator member over a tile region
    fn eval_member(
        graph: &TensorGraph,
        id: NodeId,
        ranges: &Ranges,
        get: &mut dyn FnMut(NodeId, &Ranges) -> Result<TensorData>,
    ) -> Result<TensorData> {
        let node = &graph.nodes[id];
        match &node.kind {
            OpKind::Broadcast => {
                let t = get(node.inputs[0], ranges)?;
                let extents: Vec<usize> = node
                    .dims
                    .iter()
                    .map(|d| ranges.get(d).map(|r| r.1).unwrap_or(graph.extent(d)))
                    .collect();
                Ok(eval::broadcast(&t, &node.dims, &extents))
            }
            OpKind::Pointwise(e) => {
                let args: Vec<TensorData> = node
                    .inputs
                    .iter()
                    .map(|&i| get(i, ranges))
                    .collect::<Result<_>>()?;
                let refs: Vec<&[f64]> = args.iter().map(|t| t.data.as_slice()).collect();
                let len = args[0].data.len();
                let data = e.eval_vec(&refs, len).map_err(|err| match err {
                    Error::DivByZero(_) => Error::DivByZero(node.name.clone()),
                    err => err,
                })?;
                Ok(TensorData::new(node.dims.clone(), args[0].extents.clone(), data))
            }
            OpKind::Reduce { combiner, dims } => {
                let t = get(node.inputs[0], ranges)?;
                eval::reduce(&t, dims, *combiner)
            }
            OpKind::Contract { reduced } => {
                let a = get(node.inputs[0], ranges)?;
                let b = get(node.inputs[1], ranges)?;
                eval::contract(&a, &b, reduced, &node.dims)
            }
            _ => Err(Error::Graph(format!("cannot evaluate member {}", node.name))),
        }
    }

    // prologue
    for &m in &kernel.members {
        if body.phase[&m] != Phase::Prologue {
            continue;
        }
        let mut get = |i: NodeId, r: &Ranges| -> Result<TensorData> {
            if member_set.contains(&i) {
                Ok(persist[&i].clone())
            } else {
                reads.push((i, r.clone()));
                tile_loads += 1;
                Ok(slice(&globals[&i], r))
            }
        };
        let v = eval_member(graph, m, &base, &mut get)?;
        persist.insert(m, v);
    }

    // accumulator init
    for &m in &kernel.members {
        if body.phase[&m] != Phase::BlockAcc {
            continue;
        }
        let node = &graph.nodes[m];
        let extents = extents_for(m, &base);
        let init = match &node.kind {
            OpKind::Reduce { combiner, .. } => combiner.init(),
            OpKind::Contract { .. } => 0.0,
            OpKind::Online { role: OnlineRole::Stat, .. } => f64::NEG_INFINITY,
            OpKind::Online { role: OnlineRole::Acc, .. } => 0.0,
            _ => unreachable!("block accumulators are reductions"),
        };
        accs.insert(m, TensorData::filled(node.dims.clone(), extents.clone(), init));
        if matches!(node.kind, OpKind::Online { role: OnlineRole::Acc, .. }) {
            acc_stats.insert(
                m,
                TensorData::filled(node.dims.clone(), extents, f64::NEG_INFINITY),
            );
        }
    }

    // streamed reduction loop
    let steps: Vec<(String, usize, usize)> = body
        .streamed
        .iter()
        .map(|d| {
            let (e, t) = tiles[d];
            (d.clone(), e, t)
        })
        .collect();
    let trip: usize = steps.iter().map(|(_, e, t)| e.div_ceil(*t)).product();

    for step in 0..trip {
        // mixed-radix step coordinates, innermost last
        let mut ranges = base.clone();
        let mut rest = step;
        for &(ref d, e, t) in steps.iter().rev() {
            let n = e.div_ceil(t);
            let c = rest % n;
            rest /= n;
            ranges.insert(d.clone(), (c * t, t.min(e - c * t)));
        }

        let mut vals: BTreeMap<NodeId, TensorData> = BTreeMap::new();
        for &m in &kernel.members {
            match body.phase[&m] {
                Phase::Prologue | Phase::Epilogue | Phase::SkippedBroadcast => continue,
                Phase::HoistDiv => {
                    let num = body.hoist_num[&m];
                    let v = vals[&num].clone();
                    vals.insert(m, v);
                }
                Phase::Loop => {
                    let node = &graph.nodes[m];
                    // broadcast of the running statistic reads the live
                    // accumulator, not global memory
                    if matches!(node.kind, OpKind::Broadcast)
                        && member_set.contains(&node.inputs[0])
                        && matches!(
                            graph.nodes[node.inputs[0]].kind,
                            OpKind::Online { role: OnlineRole::Stat, .. }
                        )
                    {
                        let stat = &accs[&node.inputs[0]];
                        let extents = extents_for(m, &ranges);
                        vals.insert(m, eval::broadcast(stat, &node.dims, &extents));
                        continue;
                    }
                    let mut get = |i: NodeId, r: &Ranges| -> Result<TensorData> {
                        if let Some(v) = vals.get(&i).or_else(|| persist.get(&i)) {
                            return Ok(v.clone());
                        }
                        reads.push((i, r.clone()));
                        tile_loads += 1;
                        Ok(slice(&globals[&i], r))
                    };
                    let v = eval_member(graph, m, &ranges, &mut get)?;
                    if out_set.contains(&m) {
                        let mut w = v.clone();
                        w.round_to(graph.nodes[m].dtype);
                        tile_stores += 1;
                        writes.push((m, w, ranges.clone()));
                    }
                    vals.insert(m, v);
                }
                Phase::BlockAcc => {
                    let node = &graph.nodes[m];
                    let mut get = |i: NodeId, r: &Ranges| -> Result<TensorData> {
                        if let Some(v) = vals.get(&i).or_else(|| persist.get(&i)) {
                            return Ok(v.clone());
                        }
                        reads.push((i, r.clone()));
                        tile_loads += 1;
                        Ok(slice(&globals[&i], r))
                    };
                    match &node.kind {
                        OpKind::Reduce { combiner, dims } => {
                            let t = get(node.inputs[0], &ranges)?;
                            let part = eval::reduce(&t, dims, *combiner)?;
                            let acc = accs.get_mut(&m).unwrap();
                            for (a, &p) in acc.data.iter_mut().zip(&part.data) {
                                *a = combiner.apply(*a, p);
                            }
                        }
                        OpKind::Contract { reduced } => {
                            let a = get(node.inputs[0], &ranges)?;
                            let b = get(node.inputs[1], &ranges)?;
                            let part = eval::contract(&a, &b, reduced, &node.dims)?;
                            let acc = accs.get_mut(&m).unwrap();
                            for (x, &p) in acc.data.iter_mut().zip(&part.data) {
                                *x += p;
                            }
                        }
                        OpKind::Online { role: OnlineRole::Stat, group, dims } => {
                            let x = get(node.inputs[0], &ranges)?;
                            let part = eval::reduce(&x, dims, Combiner::Max)?;
                            let m_old = accs[&m].clone();
                            let acc = accs.get_mut(&m).unwrap();
                            for (a, &p) in acc.data.iter_mut().zip(&part.data) {
                                *a = a.max(p);
                            }
                            let m_new = accs[&m].clone();
                            // rescale dependent accumulators by c^degree
                            let mut c = m_old.clone();
                            for (cv, (&o, &nv)) in
                                c.data.iter_mut().zip(m_old.data.iter().zip(&m_new.data))
                            {
                                *cv = if inject_bug { 1.0 } else { sub_guarded(o, nv).exp() };
                            }
                            for r in &body.rescales {
                                if r.group != *group {
                                    continue;
                                }
                                let target = accs.get_mut(&r.acc).unwrap();
                                let cb = eval::broadcast(&c, &target.dims, &target.extents);
                                for (t, &f) in target.data.iter_mut().zip(&cb.data) {
                                    *t *= f.powi(r.degree as i32);
                                }
                            }
                        }
                        OpKind::Online { role: OnlineRole::Acc, dims, .. } => {
                            let x = get(node.inputs[0], &ranges)?;
                            let part = eval::reduce(&x, dims, Combiner::Max)?;
                            let ms = acc_stats.get_mut(&m).unwrap();
                            let mut m_new = ms.clone();
                            for (a, &p) in m_new.data.iter_mut().zip(&part.data) {
                                *a = a.max(p);
                            }
                            let acc = accs.get_mut(&m).unwrap();
                            for (a, (&o, &nv)) in
                                acc.data.iter_mut().zip(ms.data.iter().zip(&m_new.data))
                            {
                                if !inject_bug {
                                    *a *= sub_guarded(o, nv).exp();
                                }
                            }
                            let mb = eval::broadcast(&m_new, &x.dims, &x.extents);
                            let mut shifted = x.clone();
                            for (v, &mm) in shifted.data.iter_mut().zip(&mb.data) {
                                *v = sub_guarded(*v, mm).exp();
                            }
                            let part = eval::reduce(&shifted, dims, Combiner::Sum)?;
                            for (a, &p) in acc.data.iter_mut().zip(&part.data) {
                                *a += p;
                            }
                            *ms = m_new;
                        }
                        _ => unreachable!(),
                    }
                }
            }
        }
    }

    // epilogue: divide hoisted accumulators, then evaluate p-space members
    let denoms: BTreeMap<NodeId, TensorData> = body
        .epilogue_div
        .iter()
        .map(|&(_, d)| (d, accs[&d].clone()))
        .collect();
    for &(acc_id, denom_id) in &body.epilogue_div {
        let denom = &denoms[&denom_id];
        let acc = accs.get_mut(&acc_id).unwrap();
        let db = eval::broadcast(denom, &acc.dims, &acc.extents);
        for (a, &d) in acc.data.iter_mut().zip(&db.data) {
            if d == 0.0 {
                return Err(Error::DivByZero(graph.nodes[denom_id].name.clone()));
            }
            *a /= d;
        }
    }

    let mut epi: BTreeMap<NodeId, TensorData> = BTreeMap::new();
    for &m in &kernel.members {
        if body.phase[&m] != Phase::Epilogue {
            continue;
        }
        let mut get = |i: NodeId, r: &Ranges| -> Result<TensorData> {
            if let Some(v) = accs.get(&i).or_else(|| epi.get(&i)).or_else(|| persist.get(&i)) {
                return Ok(v.clone());
            }
            reads.push((i, r.clone()));
            tile_loads += 1;
            Ok(slice(&globals[&i], r))
        };
        let v = eval_member(graph, m, &base, &mut get)?;
        epi.insert(m, v);
    }

    // block-level writes
    for &o in &kernel.outputs {
        let v = match body.phase[&o] {
            Phase::Loop => continue, // written per step above
            Phase::BlockAcc => accs[&o].clone(),
            Phase::Epilogue => epi[&o].clone(),
            Phase::Prologue => persist[&o].clone(),
            Phase::HoistDiv | Phase::SkippedBroadcast => {
                return Err(Error::Graph(format!(
                    "kernel output {} has no materializable value",
                    graph.nodes[o].name
                )))
            }
        };
        let mut w = v;
        w.round_to(graph.nodes[o].dtype);
        tile_stores += 1;
        writes.push((o, w, base.clone()));
    }

    Ok(BlockResult { block, coords, writes, reads, tile_loads, tile_stores })
}

/// Execute a schedule. Returns outputs keyed by Output-node name, the
/// traffic report, and (optionally) the per-block trace.
pub fn execute(
    sched: &KernelSchedule,
    bindings: &Bindings,
    opts: &ExecOptions,
) -> Result<(Outputs, TrafficReport, Option<ExecutionTrace>)> {
    let graph = &sched.graph;
    let mut globals: BTreeMap<NodeId, TensorData> = BTreeMap::new();
    for node in &graph.nodes {
        if !matches!(node.kind, OpKind::Input) {
            continue;
        }
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
        t.round_to(node.dtype);
        globals.insert(node.id, t);
    }

    let final_producers: std::collections::BTreeSet<NodeId> =
        graph.outputs.iter().map(|&o| graph.nodes[o].inputs[0]).collect();

    let mut per_kernel = Vec::with_capacity(sched.kernels.len());
    let mut trace = opts.trace.then(ExecutionTrace::default);
    let mut intermediate_elements = 0usize;
    let mut intermediate_bytes = 0usize;

    for kernel in &sched.kernels {
        let tiles = kernel_tiles(graph, kernel, &opts.tile_cfg);
        let scratch = scratchpad_estimate(graph, kernel, &tiles);
        if scratch > opts.scratchpad_bytes {
            return Err(Error::ScratchpadExceeded {
                kernel: kernel.name.clone(),
                needed: scratch,
                cap: opts.scratchpad_bytes,
            });
        }
        let axes: Vec<(String, usize)> = kernel
            .sketch
            .p_dims
            .iter()
            .filter_map(|(n, e)| {
                let trips = e.div_ceil(tiles[n].1);
                (trips > 1).then(|| (n.clone(), trips))
            })
            .collect();
        let block_grid = LogicalGrid::new(axes, opts.limits)?;
        let nblocks = block_grid.total();

        // allocate kernel outputs
        for &o in &kernel.outputs {
            let node = &graph.nodes[o];
            globals
                .entry(o)
                .or_insert_with(|| TensorData::zeros(node.dims.clone(), graph.extents_of(&node.dims)));
        }

        let run = |b: usize| run_block(graph, kernel, &globals, &tiles, &block_grid, b, opts.inject_rescale_bug);
        let results: Vec<BlockResult> = if opts.parallel {
            (0..nblocks).into_par_iter().map(run).collect::<Result<_>>()?
        } else {
            (0..nblocks).map(run).collect::<Result<_>>()?
        };

        // merge block results in block order (identical for both modes)
        let mut read_bits: BTreeMap<NodeId, Vec<u64>> = BTreeMap::new();
        let mut write_bits: BTreeMap<NodeId, Vec<u64>> = BTreeMap::new();
        let mut tile_loads = 0;
        let mut tile_stores = 0;
        let mut staged: Vec<(NodeId, TensorData, Ranges)> = Vec::new();
        for r in results {
            tile_loads += r.tile_loads;
            tile_stores += r.tile_stores;
            for (id, ranges) in &r.reads {
                let t = &globals[id];
                let bits = read_bits.entry(*id).or_default();
                region_indices(&t.dims, &t.extents, ranges, |i| {
                    bitmap_set(bits, i);
                });
            }
            let mut tr = opts.trace.then(|| BlockTrace {
                kernel: kernel.name.clone(),
                block: r.block,
                coords: r.coords.clone(),
                writes: Vec::new(),
            });
            for (id, tile, ranges) in r.writes {
                let node = &graph.nodes[id];
                let dims = globals[&id].dims.clone();
                let extents = globals[&id].extents.clone();
                let bits = write_bits.entry(id).or_default();
                let mut overlap = false;
                let mut elems = 0usize;
                region_indices(&dims, &extents, &ranges, |i| {
                    if !bitmap_set(bits, i) {
                        overlap = true;
                    }
                    elems += 1;
                });
                if overlap {
                    return Err(Error::WriteOverlap(format!(
                        "{} (tensor {})",
                        kernel.name, node.name
                    )));
                }
                if let Some(tr) = tr.as_mut() {
                    tr.writes.push((node.name.clone(), elems));
                }
                staged.push((id, tile, ranges));
            }
            if let (Some(trace), Some(tr)) = (trace.as_mut(), tr) {
                trace.blocks.push(tr);
            }
        }
        for (id, tile, ranges) in staged {
            let dst = globals.get_mut(&id).unwrap();
            let strides = dst.strides();
            let rank = dst.dims.len();
            let mut starts = Vec::with_capacity(rank);
            let mut lens = Vec::with_capacity(rank);
            for (d, &e) in dst.dims.clone().iter().zip(&dst.extents.clone()) {
                let (s, l) = ranges.get(d).copied().unwrap_or((0, e));
                starts.push(s);
                lens.push(l.min(e - s));
            }
            let mut idx = vec![0usize; rank];
            let mut at: usize = starts.iter().zip(&strides).map(|(s, st)| s * st).sum();
            for &v in &tile.data {
                dst.data[at] = v;
                for d in (0..rank).rev() {
                    idx[d] += 1;
                    at += strides[d];
                    if idx[d] < lens[d] {
                        break;
                    }
                    at -= strides[d] * lens[d];
                    idx[d] = 0;
                }
            }
        }

        let global_reads: usize = read_bits.values().map(|b| popcount(b)).sum();
        let global_writes: usize = write_bits.values().map(|b| popcount(b)).sum();
        for (&id, bits) in &write_bits {
            if !final_producers.contains(&id) {
                let n = popcount(bits);
                intermediate_elements += n;
                intermediate_bytes += n * graph.nodes[id].dtype.size_bytes();
            }
        }
        per_kernel.push(KernelTraffic {
            kernel: kernel.name.clone(),
            blocks: nblocks,
            global_reads,
            global_writes,
            tile_loads,
            tile_stores,
            scratchpad_bytes: scratch,
        });
    }

    let mut outputs = Outputs::new();
    for &o in &graph.outputs {
        let node = &graph.nodes[o];
        outputs.insert(node.name.clone(), globals[&node.inputs[0]].clone());
    }
    let report = TrafficReport {
        kernel_count: sched.kernels.len(),
        global_reads: per_kernel.iter().map(|k| k.global_reads).sum(),
        global_writes: per_kernel.iter().map(|k| k.global_writes).sum(),
        intermediate_elements,
        intermediate_bytes_materialized: intermediate_bytes,
        per_kernel,
    };
    Ok((outputs, report, trace))
}

/// One-kernel-per-node baseline: every node reads its inputs and writes its
/// result in full. Values come from the reference evaluator; only the
/// traffic arithmetic differs from `eval_naive`.
pub fn execute_unfused(
    graph: &TensorGraph,
    bindings: &Bindings,
) -> Result<(Outputs, TrafficReport)> {
    let values = eval::eval_all(graph, bindings)?;
    let feeds_output: std::collections::BTreeSet<NodeId> =
        graph.outputs.iter().map(|&o| graph.nodes[o].inputs[0]).collect();
    let mut per_kernel = Vec::new();
    let mut intermediate_elements = 0;
    let mut intermediate_bytes = 0;
    for node in &graph.nodes {
        if matches!(node.kind, OpKind::Input) {
            continue;
        }
        let reads: usize = node.inputs.iter().map(|&i| values[i].len()).sum();
        let writes = values[node.id].len();
        if node.kind.is_compute() && !feeds_output.contains(&node.id) {
            intermediate_elements += writes;
            intermediate_bytes += writes * node.dtype.size_bytes();
        }
        per_kernel.push(KernelTraffic {
            kernel: node.name.clone(),
            blocks: 1,
            global_reads: reads,
            global_writes: writes,
            tile_loads: node.inputs.len(),
            tile_stores: 1,
            scratchpad_bytes: 0,
        });
    }
    let mut outputs = Outputs::new();
    for &o in &graph.outputs {
        outputs.insert(graph.nodes[o].name.clone(), values[graph.nodes[o].inputs[0]].clone());
    }
    let report = TrafficReport {
        kernel_count: per_kernel.len(),
        global_reads: per_kernel.iter().map(|k| k.global_reads).sum(),
        global_writes: per_kernel.iter().map(|k| k.global_writes).sum(),
        intermediate_elements,
        intermediate_bytes_materialized: intermediate_bytes,
        per_kernel,
    };
    Ok((outputs, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::softmax_algebra;
    use crate::eval::eval_naive;
    use crate::expr::{self, PointwiseExpr as E};
    use crate::ir::GraphBuilder;
    use crate::schedule::{schedule, SchedulerOptions};
    use crate::tensor::compare;
    use rand::{Rng, SeedableRng};

    fn attention(n: usize, d: usize) -> TensorGraph {
        crate::schedule::tests::attention_graph(n, d)
    }

    /// heads are grid-parallel: tiling them at 1 keeps per-block scratchpad
    /// within the default cap
    fn attn_opts() -> ExecOptions {
        let mut o = ExecOptions::default();
        o.tile_cfg.set("h", 1).unwrap();
        o
    }

    fn attention_bindings(g: &TensorGraph, seed: u64) -> Bindings {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut b = Bindings::new();
        for node in &g.nodes {
            if matches!(node.kind, OpKind::Input) {
                let extents = g.extents_of(&node.dims);
                let len: usize = extents.iter().product();
                let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
                b.insert(node.name.clone(), TensorData::new(node.dims.clone(), extents, data));
            }
        }
        b
    }

    #[test]
    fn elementwise_add_traffic() {
        let mut gb = GraphBuilder::new();
        let x = gb.input("x", &[("m".into(), 128), ("n".into(), 128)], DType::F64).unwrap();
        let y = gb.input("y", &[("m".into(), 128), ("n".into(), 128)], DType::F64).unwrap();
        let z = gb.pointwise("z", expr::add(E::arg(0), E::arg(1)), &[x, y]).unwrap();
        gb.output("out", z).unwrap();
        let g = gb.finish();
        let sched = schedule(&g, &softmax_algebra(), &SchedulerOptions::default()).unwrap();
        let b = attention_bindings(&g, 7);
        let mut opts = ExecOptions::default();
        opts.tile_cfg.set("m", 64).unwrap();
        let (out, rep, _) = execute(&sched, &b, &opts).unwrap();
        assert_eq!(rep.global_reads, 32768);
        assert_eq!(rep.global_writes, 16384);
        assert_eq!(rep.intermediate_elements, 0);
        let naive = eval_naive(&g, &b).unwrap();
        assert_eq!(out["out"].data, naive["out"].data);
    }

    #[test]
    fn fused_attention_matches_oracle_with_zero_intermediates() {
        let g = attention(256, 64);
        let sched = schedule(&g, &softmax_algebra(), &SchedulerOptions::default()).unwrap();
        assert_eq!(sched.kernel_count(), 1);
        let b = attention_bindings(&g, 42);
        let (out, rep, _) = execute(&sched, &b, &attn_opts()).unwrap();
        assert_eq!(rep.intermediate_elements, 0);
        // fused traffic is linear in n: q + k + v reads, one output write
        assert_eq!(rep.global_reads, 3 * 2 * 256 * 64);
        assert_eq!(rep.global_writes, 2 * 256 * 64);
        let naive = eval_naive(&g, &b).unwrap();
        let m = compare(&out["out"], &naive["out"]).unwrap();
        assert!(m.max_rel < 1e-10, "{m:?}");
    }

    #[test]
    fn unfused_attention_materializes_quadratically() {
        let g = attention(256, 64);
        let b = attention_bindings(&g, 1);
        let (out, rep) = execute_unfused(&g, &b).unwrap();
        assert!(rep.intermediate_elements >= 256 * 256);
        let naive = eval_naive(&g, &b).unwrap();
        assert_eq!(out["out"].data, naive["out"].data);
    }

    #[test]
    fn serial_and_parallel_are_bit_identical() {
        let g = attention(256, 64);
        let sched = schedule(&g, &softmax_algebra(), &SchedulerOptions::default()).unwrap();
        let b = attention_bindings(&g, 3);
        let (o1, r1, _) = execute(&sched, &b, &attn_opts()).unwrap();
        let opts = ExecOptions { parallel: true, ..attn_opts() };
        let (o2, r2, _) = execute(&sched, &b, &opts).unwrap();
        assert_eq!(r1, r2);
        for (k, t) in &o1 {
            assert!(t.data.iter().zip(&o2[k].data).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn rescale_bug_is_caught_by_the_oracle() {
        let g = attention(256, 64);
        let sched = schedule(&g, &softmax_algebra(), &SchedulerOptions::default()).unwrap();
        let b = attention_bindings(&g, 5);
        let opts = ExecOptions { inject_rescale_bug: true, ..attn_opts() };
        let (out, _, _) = execute(&sched, &b, &opts).unwrap();
        let naive = eval_naive(&g, &b).unwrap();
        let m = compare(&out["out"], &naive["out"]).unwrap();
        assert!(m.max_rel > 1e-6, "bug went unnoticed: {m:?}");
    }

    #[test]
    fn trace_reports_disjoint_writes() {
        let g = attention(256, 64);
        let sched = schedule(&g, &softmax_algebra(), &SchedulerOptions::default()).unwrap();
        let b = attention_bindings(&g, 9);
        let opts = ExecOptions { trace: true, ..attn_opts() };
        let (_, _, trace) = execute(&sched, &b, &opts).unwrap();
        let trace = trace.unwrap();
        assert_eq!(trace.blocks.len(), 8); // 2 heads x 256/64 query tiles
        let total: usize = trace.blocks.iter().flat_map(|b| b.writes.iter().map(|w| w.1)).sum();
        assert_eq!(total, 2 * 256 * 64);
    }

    #[test]
    fn oversized_tiles_exceed_the_scratchpad() {
        let g = attention(512, 64);
        let mut opts = SchedulerOptions::default();
        opts.tile_cfg.set("m", 512).unwrap();
        opts.tile_cfg.set("n", 512).unwrap();
        let sched = schedule(&g, &softmax_algebra(), &opts).unwrap();
        let b = attention_bindings(&g, 2);
        let mut eopts = ExecOptions::default();
        eopts.tile_cfg = opts.tile_cfg.clone();
        let err = execute(&sched, &b, &eopts).unwrap_err();
        assert!(matches!(err, Error::ScratchpadExceeded { .. }), "{err}");
    }

    #[test]
    fn masked_rows_produce_uniform_attention() {
        // all scores -inf on one row via a mask input; softmax row → 1/N
        let mut gb = GraphBuilder::new();
        let x = gb.input("x", &[("m".into(), 2), ("n".into(), 4)], DType::F64).unwrap();
        let mask = gb.input("mask", &[("m".into(), 2), ("n".into(), 4)], DType::F64).unwrap();
        let masked = gb
            .pointwise(
                "masked",
                expr::where_(E::arg(1), E::arg(0), expr::constant(f64::NEG_INFINITY)),
                &[x, mask],
            )
            .unwrap();
        let v = gb.input("v", &[("n".into(), 4), ("dv".into(), 2)], DType::F64).unwrap();
        let full = vec!["m".to_string(), "n".to_string()];
        let mx = gb.reduce("mx", Combiner::Max, &["n"], masked).unwrap();
        let mb = gb.broadcast("mb", mx, &full).unwrap();
        let p_num = gb
            .pointwise("p_num", expr::exp(expr::sub(E::arg(0), E::arg(1))), &[masked, mb])
            .unwrap();
        let p_den = gb
            .pointwise("p_den", expr::exp(expr::sub(E::arg(0), E::arg(1))), &[masked, mb])
            .unwrap();
        let d = gb.reduce("d", Combiner::Sum, &["n"], p_den).unwrap();
        let db = gb.broadcast("db", d, &full).unwrap();
        let y = gb.pointwise("y", expr::div(E::arg(0), E::arg(1)), &[p_num, db]).unwrap();
        let o = gb.contract("o", y, v, &["n"]).unwrap();
        gb.output("out", o).unwrap();
        let g = gb.finish();

        let mut b = Bindings::new();
        b.insert(
            "x".into(),
            TensorData::new(vec!["m".into(), "n".into()], vec![2, 4], vec![1.0; 8]),
        );
        // row 0 fully masked, row 1 fully visible
        b.insert(
            "mask".into(),
            TensorData::new(
                vec!["m".into(), "n".into()],
                vec![2, 4],
                vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0],
            ),
        );
        b.insert(
            "v".into(),
            TensorData::new(
                vec!["n".into(), "dv".into()],
                vec![4, 2],
                (0..8).map(|i| i as f64).collect(),
            ),
        );
        let sched = schedule(&g, &softmax_algebra(), &SchedulerOptions::default()).unwrap();
        let (out, _, _) = execute(&sched, &b, &ExecOptions::default()).unwrap();
        let naive = eval_naive(&g, &b).unwrap();
        let m = compare(&out["out"], &naive["out"]).unwrap();
        assert!(m.max_rel < 1e-12, "{m:?}");
        // both rows average V uniformly (weights 1/4 each)
        assert_eq!(out["out"].data, vec![3.0, 4.0, 3.0, 4.0]);
    }

    #[test]
    fn tile_configs_agree_on_attention() {
        let g = attention(256, 64);
        let b = attention_bindings(&g, 11);
        let mut outs = Vec::new();
        for (tm, tn) in [(64, 64), (128, 64), (32, 128)] {
            let mut opts = SchedulerOptions::default();
            opts.tile_cfg.set("m", tm).unwrap();
            opts.tile_cfg.set("n", tn).unwrap();
            opts.tile_cfg.set("h", 1).unwrap();
            let sched = schedule(&g, &softmax_algebra(), &opts).unwrap();
            let mut eopts = ExecOptions::default();
            eopts.tile_cfg = opts.tile_cfg.clone();
            // F64 tiles double the footprint; the default cap targets F32
            eopts.scratchpad_bytes = 2 * DEFAULT_SCRATCHPAD_BYTES;
            let (out, _, _) = execute(&sched, &b, &eopts).unwrap();
            outs.push(out["out"].clone());
        }
        for pair in outs.windows(2) {
            let m = compare(&pair[0], &pair[1]).unwrap();
            assert!(m.max_rel < 1e-10, "{m:?}");
        }
    }
}
