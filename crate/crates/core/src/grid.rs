//! Logical tile grids and their linearization onto a single physical axis.
//!
//! Hardware grids are asymmetric (one wide axis, two narrow ones), so the
//! planner never maps logical axes to physical axes directly: it flattens
//! the whole logical grid into one linear block id with an exact inverse.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Physical limits that motivate the flattening; the planner only checks
/// against `x_max` because every grid is mapped to the single wide axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLimits {
    pub x_max: u64,
    pub yz_max: u64,
}

impl Default for GridLimits {
    fn default() -> Self {
        GridLimits { x_max: (1 << 31) - 1, yz_max: 65535 }
    }
}

/// Ordered logical tile grid: one axis per surviving p-dim, outermost first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogicalGrid {
    pub axes: Vec<(String, usize)>,
}

impl LogicalGrid {
    pub fn new(axes: Vec<(String, usize)>, limits: GridLimits) -> Result<Self> {
        let mut total: u64 = 1;
        for (name, n) in &axes {
            if *n == 0 {
                return Err(Error::Grid(format!("axis {name} has trip count 0")));
            }
            total = total
                .checked_mul(*n as u64)
                .ok_or_else(|| Error::Grid("grid total overflows".into()))?;
        }
        if total > limits.x_max {
            return Err(Error::Grid(format!(
                "grid total {total} exceeds the linear axis limit {}",
                limits.x_max
            )));
        }
        Ok(LogicalGrid { axes })
    }

    pub fn total(&self) -> usize {
        self.axes.iter().map(|(_, n)| n).product()
    }

    /// Row-major mixed-radix encoding of per-axis tile coordinates.
    pub fn linearize(&self, coords: &[usize]) -> Result<usize> {
        if coords.len() != self.axes.len() {
            return Err(Error::Grid(format!(
                "expected {} coordinates, got {}",
                self.axes.len(),
                coords.len()
            )));
        }
        let mut id = 0usize;
        for (&c, (name, n)) in coords.iter().zip(&self.axes) {
            if c >= *n {
                return Err(Error::Grid(format!("coordinate {c} out of range for axis {name} ({n})")));
            }
            id = id * n + c;
        }
        Ok(id)
    }

    /// Exact inverse of `linearize`.
    pub fn delinearize(&self, id: usize) -> Result<Vec<usize>> {
        if id >= self.total() {
            return Err(Error::Grid(format!("block id {id} out of range ({})", self.total())));
        }
        let mut coords = vec![0usize; self.axes.len()];
        let mut rest = id;
        for (i, (_, n)) in self.axes.iter().enumerate().rev() {
            coords[i] = rest % n;
            rest /= n;
        }
        Ok(coords)
    }
}

/// Per-dimension tile sizes. Policy: dims small enough to fit a single tile
/// collapse outright; everything else gets a fixed power-of-two tile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileConfig {
    pub tiles: BTreeMap<String, usize>,
}

/// Extent at or below which a dimension is given a single full-extent tile.
pub const COLLAPSE_THRESHOLD: usize = 128;
/// Tile size for dimensions too large to collapse.
pub const DEFAULT_TILE: usize = 64;

impl TileConfig {
    pub fn empty() -> Self {
        TileConfig { tiles: BTreeMap::new() }
    }

    /// Default policy over a set of dims: extent ≤ 128 → tile = extent
    /// (trip count 1, dimension eliminated); larger → tile 64.
    pub fn defaults_for(dims: &[(String, usize)]) -> Self {
        let mut tiles = BTreeMap::new();
        for (name, extent) in dims {
            let t = if *extent <= COLLAPSE_THRESHOLD { *extent } else { DEFAULT_TILE };
            tiles.insert(name.clone(), t);
        }
        TileConfig { tiles }
    }

    /// Explicit hint; overrides the default for that dim.
    pub fn set(&mut self, dim: &str, tile: usize) -> Result<()> {
        if tile == 0 {
            return Err(Error::Grid(format!("tile size for {dim} must be positive")));
        }
        self.tiles.insert(dim.to_string(), tile);
        Ok(())
    }

    /// Tile size for a dim, falling back to the default policy.
    pub fn tile_of(&self, dim: &str, extent: usize) -> usize {
        match self.tiles.get(dim) {
            Some(&t) => t.min(extent.max(1)),
            None if extent <= COLLAPSE_THRESHOLD => extent,
            None => DEFAULT_TILE,
        }
    }

    pub fn trip_count(&self, dim: &str, extent: usize) -> usize {
        extent.div_ceil(self.tile_of(dim, extent))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(ns: &[usize]) -> LogicalGrid {
        LogicalGrid::new(
            ns.iter().enumerate().map(|(i, &n)| (format!("d{i}"), n)).collect(),
            GridLimits::default(),
        )
        .unwrap()
    }

    #[test]
    fn linearize_corners() {
        let g = grid(&[3, 4]);
        assert_eq!(g.linearize(&[0, 0]).unwrap(), 0);
        assert_eq!(g.linearize(&[2, 3]).unwrap(), 11);
        assert_eq!(g.delinearize(11).unwrap(), vec![2, 3]);
    }

    #[test]
    fn mixed_radix_hand_value() {
        // (2,3,5) at (1,2,4): 1*15 + 2*5 + 4 = 29
        let g = grid(&[2, 3, 5]);
        assert_eq!(g.linearize(&[1, 2, 4]).unwrap(), 29);
    }

    #[test]
    fn exhaustive_roundtrip() {
        let g = grid(&[7, 9]);
        for id in 0..g.total() {
            let c = g.delinearize(id).unwrap();
            assert_eq!(g.linearize(&c).unwrap(), id);
        }
    }

    #[test]
    fn wide_axis_beyond_yz_limit_is_fine() {
        // exceeds the narrow-axis limit; the whole point of flattening
        let g = grid(&[70000]);
        assert_eq!(g.total(), 70000);
        assert_eq!(g.delinearize(69999).unwrap(), vec![69999]);
        assert!(70000 > GridLimits::default().yz_max as usize);
    }

    #[test]
    fn over_limit_total_is_an_error() {
        let r = LogicalGrid::new(
            vec![("a".into(), 1 << 16), ("b".into(), 1 << 16)],
            GridLimits::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn out_of_range_errors() {
        let g = grid(&[3, 4]);
        assert!(g.linearize(&[3, 0]).is_err());
        assert!(g.linearize(&[0]).is_err());
        assert!(g.delinearize(12).is_err());
    }

    #[test]
    fn default_tile_policy() {
        let cfg = TileConfig::defaults_for(&[
            ("head".into(), 64),
            ("seq".into(), 4096),
            ("unit".into(), 1),
        ]);
        assert_eq!(cfg.tile_of("head", 64), 64);
        assert_eq!(cfg.trip_count("head", 64), 1);
        assert_eq!(cfg.tile_of("seq", 4096), 64);
        assert_eq!(cfg.trip_count("seq", 4096), 64);
        assert_eq!(cfg.trip_count("unit", 1), 1);
    }

    #[test]
    fn hints_override_defaults() {
        let mut cfg = TileConfig::empty();
        cfg.set("seq", 128).unwrap();
        assert_eq!(cfg.tile_of("seq", 4096), 128);
        assert_eq!(cfg.trip_count("seq", 4096), 32);
        assert!(cfg.set("seq", 0).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_random_grids(ns in proptest::collection::vec(1usize..14, 1..5), pick in any::<u64>()) {
            let g = grid(&ns);
            let id = (pick as usize) % g.total();
            let c = g.delinearize(id).unwrap();
            prop_assert_eq!(g.linearize(&c).unwrap(), id);
        }
    }
}
