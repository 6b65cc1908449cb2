//! Computation sketches and the fusion rules over them.
//!
//! A sketch [(P…), (R…)] abstracts an operation as its loop nest: parallel
//! dims any iteration order, reduction dims sequential. Fusion legality is
//! decided entirely at this level: a producer fuses into a consumer when the
//! producer's extra parallel dims can be demoted into the consumer's
//! reduction loop, either directly or after tiling has eliminated
//! single-trip dims from the picture.

use serde::{Deserialize, Serialize};

use crate::grid::TileConfig;
use crate::ir::{NodeId, OpKind, TensorGraph};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputationSketch {
    pub p_dims: Vec<(String, usize)>,
    pub r_dims: Vec<(String, usize)>,
}

impl ComputationSketch {
    pub fn p_names(&self) -> Vec<&str> {
        self.p_dims.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn r_names(&self) -> Vec<&str> {
        self.r_dims.iter().map(|(n, _)| n.as_str()).collect()
    }
}

impl std::fmt::Display for ComputationSketch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let p: Vec<&str> = self.p_names();
        let r: Vec<&str> = self.r_names();
        write!(f, "[({}), ({})]", p.join(","), r.join(","))
    }
}

/// Sketch of a single validated node: output dims are parallel, reduced
/// dims (Reduce, Contract, Online) are reduction.
pub fn extract_sketch(graph: &TensorGraph, id: NodeId) -> ComputationSketch {
    let node = &graph.nodes[id];
    let p_dims = node
        .dims
        .iter()
        .map(|d| (d.clone(), graph.extent(d)))
        .collect();
    let r_dims = match node.kind.reduce_dims() {
        Some(dims) => dims.iter().map(|d| (d.clone(), graph.extent(d))).collect(),
        None => Vec::new(),
    };
    ComputationSketch { p_dims, r_dims }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TiledDim {
    pub name: String,
    pub extent: usize,
    pub tile: usize,
    pub trip_count: usize,
}

/// Tile-level view of a sketch: dims whose whole extent fits one tile are
/// eliminated (trip count 1) and tracked separately.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TiledSketch {
    pub p_tiles: Vec<TiledDim>,
    pub r_tiles: Vec<TiledDim>,
    pub eliminated: Vec<TiledDim>,
}

fn tile_dim(name: &str, extent: usize, cfg: &TileConfig) -> TiledDim {
    let tile = cfg.tile_of(name, extent);
    TiledDim { name: name.to_string(), extent, tile, trip_count: extent.div_ceil(tile) }
}

pub fn tile_sketch(sk: &ComputationSketch, cfg: &TileConfig) -> TiledSketch {
    let mut p_tiles = Vec::new();
    let mut r_tiles = Vec::new();
    let mut eliminated = Vec::new();
    for (n, e) in &sk.p_dims {
        let d = tile_dim(n, *e, cfg);
        if d.trip_count == 1 { eliminated.push(d) } else { p_tiles.push(d) }
    }
    for (n, e) in &sk.r_dims {
        let d = tile_dim(n, *e, cfg);
        if d.trip_count == 1 { eliminated.push(d) } else { r_tiles.push(d) }
    }
    TiledSketch { p_tiles, r_tiles, eliminated }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionKind {
    Structural,
    Semantic,
    TilingAware,
}

/// An accepted producer→consumer fusion, at kernel granularity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionPlan {
    pub kind: FusionKind,
    /// producer p-dims serialized into the fused reduction loop
    pub demoted: Vec<String>,
    /// dims absent from the tile-level sketches (trip count 1)
    pub eliminated: Vec<String>,
    pub fused: ComputationSketch,
}

/// The structural rule. Producer [(P_common, P_extra), (R_p)] fuses into
/// consumer [(P_common), (R_c)] iff P_extra ⊆ R_c; the extra dims are
/// demoted and producer r-dims are appended innermost.
pub fn fuse_sketches(
    prod: &ComputationSketch,
    cons: &ComputationSketch,
) -> Option<(ComputationSketch, Vec<String>)> {
    let pp: Vec<&str> = prod.p_names();
    let cp: Vec<&str> = cons.p_names();
    let cr: Vec<&str> = cons.r_names();
    if !cp.iter().all(|d| pp.contains(d)) {
        return None;
    }
    let extra: Vec<String> = prod
        .p_dims
        .iter()
        .filter(|(n, _)| !cp.contains(&n.as_str()))
        .map(|(n, _)| n.clone())
        .collect();
    if !extra.iter().all(|d| cr.contains(&d.as_str())) {
        return None;
    }
    let mut r_dims = cons.r_dims.clone();
    for (n, e) in &prod.r_dims {
        if !r_dims.iter().any(|(x, _)| x == n) {
            r_dims.push((n.clone(), *e));
        }
    }
    Some((ComputationSketch { p_dims: cons.p_dims.clone(), r_dims }, extra))
}

/// The tiling-aware rule: eliminate trip-count-1 dims from both sketches,
/// apply the structural rule in tile space, then rebuild the fused sketch
/// over real dims (eliminated dims survive with their single tile).
pub fn fuse_sketches_tiled(
    prod: &ComputationSketch,
    cons: &ComputationSketch,
    cfg: &TileConfig,
) -> Option<(ComputationSketch, Vec<String>, Vec<String>)> {
    let pt = tile_sketch(prod, cfg);
    let ct = tile_sketch(cons, cfg);
    let pp: Vec<&str> = pt.p_tiles.iter().map(|d| d.name.as_str()).collect();
    let cp: Vec<&str> = ct.p_tiles.iter().map(|d| d.name.as_str()).collect();
    let cr: Vec<&str> = ct.r_tiles.iter().map(|d| d.name.as_str()).collect();
    if !cp.iter().all(|d| pp.contains(d)) {
        return None;
    }
    let demoted: Vec<String> = pp
        .iter()
        .filter(|d| !cp.contains(d))
        .map(|d| d.to_string())
        .collect();
    if !demoted.iter().all(|d| cr.contains(&d.as_str())) {
        return None;
    }
    let eliminated: Vec<String> = pt
        .eliminated
        .iter()
        .chain(&ct.eliminated)
        .map(|d| d.name.clone())
        .collect();

    // real fused sketch: consumer p-dims, plus producer p-dims that only
    // survive because their tile covers the whole extent
    let mut p_dims = cons.p_dims.clone();
    for (n, e) in &prod.p_dims {
        let in_cons =
            cons.p_dims.iter().any(|(x, _)| x == n) || cons.r_dims.iter().any(|(x, _)| x == n);
        if !in_cons && !p_dims.iter().any(|(x, _)| x == n) {
            p_dims.push((n.clone(), *e));
        }
    }
    let mut r_dims = cons.r_dims.clone();
    for (n, e) in &prod.r_dims {
        if !r_dims.iter().any(|(x, _)| x == n) {
            r_dims.push((n.clone(), *e));
        }
    }
    Some((ComputationSketch { p_dims, r_dims }, demoted, eliminated))
}

/// Kernel-level summary used by plan dumps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SketchSummary {
    pub p: Vec<String>,
    pub r: Vec<String>,
}

impl From<&ComputationSketch> for SketchSummary {
    fn from(s: &ComputationSketch) -> Self {
        SketchSummary {
            p: s.p_dims.iter().map(|(n, _)| n.clone()).collect(),
            r: s.r_dims.iter().map(|(n, _)| n.clone()).collect(),
        }
    }
}

/// Whether a node is compute (belongs to a kernel) as opposed to graph I/O.
pub fn is_kernel_member(kind: &OpKind) -> bool {
    kind.is_compute()
}
