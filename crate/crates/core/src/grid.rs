//! Lattice grids of configuration classes.
//!
//! A node is a multiset of `n` points of `(1/r)ℤ / ℤ`. Its canonical
//! representative is the sorted list of lattice values, which is exactly the
//! canonical representative of the class, so nodes are pairwise distinct
//! classes by construction.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::torus::{dist_s_points, frac, ConfigurationClass};

/// Particle count and lattice resolution of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: usize,
    /// Lattice points per unit length, shared by the base and gap coordinates.
    pub resolution: usize,
}

impl GridSpec {
    pub fn new(n: usize, resolution: usize) -> Result<Self> {
        if !(1..=3).contains(&n) {
            return Err(Error::Validation(format!(
                "grid value iteration supports 1 to 3 particles, got {n}"
            )));
        }
        if resolution < 2 {
            return Err(Error::Validation(format!(
                "grid resolution must be at least 2, got {resolution}"
            )));
        }
        Ok(Self { n, resolution })
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.resolution as f64
    }

    /// Number of multisets of size `n` from `r` lattice values.
    pub fn node_count(&self) -> usize {
        let (n, r) = (self.n, self.resolution);
        (0..n).fold(1usize, |acc, i| acc * (r + i) / (i + 1))
    }

    pub fn refined(&self) -> Self {
        Self {
            n: self.n,
            resolution: 2 * self.resolution,
        }
    }

    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("grid:{}:{}", self.n, self.resolution).as_bytes());
        hex::encode(h.finalize())
    }
}

/// The node list of a grid with nearest-node lookup.
#[derive(Debug, Clone)]
pub struct Grid {
    spec: GridSpec,
    codes: Vec<Vec<u32>>,
    nodes: Vec<ConfigurationClass>,
    index: HashMap<Vec<u32>, usize>,
}

impl Grid {
    pub fn new(spec: GridSpec) -> Self {
        let r = spec.resolution as u32;
        let mut codes = vec![];
        let mut cur = Vec::with_capacity(spec.n);
        fn rec(n: usize, r: u32, lo: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
            if cur.len() == n {
                out.push(cur.clone());
                return;
            }
            for a in lo..r {
                cur.push(a);
                rec(n, r, a, cur, out);
                cur.pop();
            }
        }
        rec(spec.n, r, 0, &mut cur, &mut codes);
        let nodes = codes
            .iter()
            .map(|c| {
                let pts: Vec<f64> = c.iter().map(|&a| a as f64 / r as f64).collect();
                ConfigurationClass::of_points(&pts)
            })
            .collect();
        let index = codes.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        Self {
            spec,
            codes,
            nodes,
            index,
        }
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, i: usize) -> &ConfigurationClass {
        &self.nodes[i]
    }

    pub fn nodes(&self) -> &[ConfigurationClass] {
        &self.nodes
    }

    pub fn code(&self, i: usize) -> &[u32] {
        &self.codes[i]
    }

    /// Node whose lattice code is obtained by rounding every point.
    pub fn nearest(&self, points: &[f64]) -> usize {
        let r = self.spec.resolution;
        let mut code: Vec<u32> = points
            .iter()
            .map(|&x| ((frac(x) * r as f64).round() as usize % r) as u32)
            .collect();
        code.sort_unstable();
        self.index[&code]
    }

    /// Node reached by adding `h[i]` lattice steps to point `i`.
    pub fn offset(&self, i: usize, h: &[i64]) -> usize {
        let r = self.spec.resolution as i64;
        let mut code: Vec<u32> = self.codes[i]
            .iter()
            .zip(h)
            .map(|(&a, &d)| (a as i64 + d).rem_euclid(r) as u32)
            .collect();
        code.sort_unstable();
        self.index[&code]
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        dist_s_points(self.nodes[i].points(), self.nodes[j].points())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::Configuration;

    #[test]
    fn node_counts() {
        for (n, r) in [(1, 8), (2, 8), (2, 16), (3, 6)] {
            let spec = GridSpec::new(n, r).unwrap();
            assert_eq!(Grid::new(spec).len(), spec.node_count());
        }
        assert_eq!(GridSpec::new(2, 16).unwrap().node_count(), 136);
        assert!(GridSpec::new(4, 8).is_err());
        assert!(GridSpec::new(1, 1).is_err());
    }

    #[test]
    fn nodes_are_distinct_canonical_classes() {
        let grid = Grid::new(GridSpec::new(2, 8).unwrap());
        for i in 0..grid.len() {
            let c = grid.node(i);
            assert_eq!(&c.canonical().canonicalize(), c);
            for j in 0..i {
                assert_ne!(grid.node(j), c);
            }
        }
    }

    #[test]
    fn nearest_node_is_class_invariant() {
        let grid = Grid::new(GridSpec::new(2, 16).unwrap());
        let m = Configuration::new(vec![0.26, 0.74]).unwrap();
        let i = grid.nearest(m.points());
        assert_eq!(grid.nearest(m.relabeled(1).points()), i);
        assert_eq!(grid.nearest(m.shifted(3.0).points()), i);
        assert_eq!(grid.node(i).points(), &[0.25, 0.75]);
        // rounding up to 1 wraps to 0
        assert_eq!(grid.node(grid.nearest(&[0.99, 1.5])).points(), &[0.0, 0.5]);
    }

    #[test]
    fn offsets_move_by_lattice_steps() {
        let grid = Grid::new(GridSpec::new(1, 8).unwrap());
        assert_eq!(grid.offset(0, &[-1]), 7);
        assert_eq!(grid.offset(3, &[2]), 5);
        assert!((grid.dist(0, 7) - 0.125).abs() < 1e-15);
    }
}
