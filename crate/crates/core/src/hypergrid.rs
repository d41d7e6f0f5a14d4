//! The hypergrid environment: a `D`-dimensional grid of side `H` where every
//! cell can either increment one coordinate or exit to its terminating copy.

use serde::{Deserialize, Serialize};

use crate::dag::{PointedDag, StateId};
use crate::env::RewardTable;
use crate::error::{Error, Result};

/// Largest number of grid cells we are willing to materialize.
const MAX_CELLS: usize = 1 << 24;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypergridSpec {
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "R0")]
    pub r0: f64,
}

impl HypergridSpec {
    pub fn new(h: usize, d: usize, r0: f64) -> Result<Self> {
        let spec = Self { h, d, r0 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.h < 2 {
            return Err(Error::InvalidSpec(format!(
                "H must be >= 2, got {}",
                self.h
            )));
        }
        if self.d < 1 {
            return Err(Error::InvalidSpec("D must be >= 1".into()));
        }
        if !(self.r0 > 0.0) || !self.r0.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "R0 must be positive, got {}",
                self.r0
            )));
        }
        match self.h.checked_pow(self.d as u32) {
            Some(n) if n <= MAX_CELLS => Ok(()),
            _ => Err(Error::InvalidSpec(format!(
                "{}^{} cells is too many",
                self.h, self.d
            ))),
        }
    }

    pub fn num_cells(&self) -> usize {
        self.h.pow(self.d as u32)
    }

    /// Row-major stride of coordinate `dim` (coordinate 0 is most significant).
    pub fn stride(&self, dim: usize) -> usize {
        self.h.pow((self.d - 1 - dim) as u32)
    }

    pub fn coords(&self, cell: usize) -> Vec<usize> {
        (0..self.d)
            .map(|dim| (cell / self.stride(dim)) % self.h)
            .collect()
    }

    pub fn cell(&self, coords: &[usize]) -> usize {
        coords
            .iter()
            .enumerate()
            .map(|(dim, &c)| c * self.stride(dim))
            .sum()
    }

    /// Id of the terminating copy of a cell.
    pub fn terminal_of(&self, cell: usize) -> StateId {
        self.num_cells() + cell
    }
}

/// `R0 + 0.5 * prod 1[|s/(H-1) - 0.5| in (0.25, 0.5]] + 2 * prod 1[|s/(H-1) - 0.5| in (0.3, 0.4)]`.
pub fn hypergrid_reward(coords: &[usize], spec: &HypergridSpec) -> Result<f64> {
    if coords.len() != spec.d {
        return Err(Error::DimensionMismatch {
            expected: spec.d,
            got: coords.len(),
        });
    }
    let mut outer = true;
    let mut inner = true;
    for &c in coords {
        if c >= spec.h {
            return Err(Error::CoordinateOutOfRange {
                coord: c,
                side: spec.h,
            });
        }
        // a = |c / (H - 1) - 1/2| = n / (2 (H - 1)), compared exactly.
        let n = (2 * c).abs_diff(spec.h - 1);
        let m = spec.h - 1;
        outer &= 2 * n > m;
        inner &= 5 * n > 3 * m && 5 * n < 4 * m;
    }
    let mut r = spec.r0;
    if outer {
        r += 0.5;
    }
    if inner {
        r += 2.0;
    }
    Ok(r)
}

/// Cells whose reward exceeds `R0`, grouped by the corner they sit in.
/// Corner `k` has bit `dim` set when that coordinate is in the upper half.
pub fn mode_regions(spec: &HypergridSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let mut regions = vec![Vec::new(); 1 << spec.d];
    for cell in 0..spec.num_cells() {
        let coords = spec.coords(cell);
        if hypergrid_reward(&coords, spec)? > spec.r0 {
            let corner = coords
                .iter()
                .enumerate()
                .filter(|(_, &c)| 2 * c > spec.h - 1)
                .fold(0, |k, (dim, _)| k | (1 << dim));
            regions[corner].push(cell);
        }
    }
    regions.retain(|r| !r.is_empty());
    Ok(regions)
}

/// Grid cells `0..H^D` are non-terminating (row-major), `H^D..2H^D` their
/// terminating copies. Each cell lists its increment children by dimension,
/// then its exit child. The result is not graded.
pub fn build_hypergrid(spec: &HypergridSpec) -> Result<(PointedDag, RewardTable)> {
    spec.validate()?;
    let n = spec.num_cells();
    let mut edges = Vec::with_capacity(n * (spec.d + 1));
    for cell in 0..n {
        let coords = spec.coords(cell);
        for (dim, &c) in coords.iter().enumerate() {
            if c + 1 < spec.h {
                edges.push((cell, cell + spec.stride(dim)));
            }
        }
        edges.push((cell, spec.terminal_of(cell)));
    }
    let terminating: Vec<StateId> = (n..2 * n).collect();
    let dag = PointedDag::new(2 * n, &edges, 0, &terminating)?;
    let mut rewards = Vec::with_capacity(n);
    for cell in 0..n {
        rewards.push((
            spec.terminal_of(cell),
            hypergrid_reward(&spec.coords(cell), spec)?,
        ));
    }
    let table = RewardTable::new(&dag, &rewards)?;
    Ok((dag, table))
}
