//! Unit-time kernel matrices `h₁(A, B)` over a grid.
//!
//! A matrix is built for a list of `c` values at once: the fixed-endpoint
//! minimizers do not depend on `c`, so each target lift is solved once and
//! only the branch-and-bound selection is repeated per `c`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action::{shift_window, targets_for, BvpOptions, BvpResult, Lag, MeanField, PairSolver};
use crate::error::{Error, Result};
use crate::grid::{Grid, GridSpec};
use crate::model::ModelParams;

/// `h₁` between every ordered pair of grid nodes at one `c`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelMatrix {
    pub spec: GridSpec,
    pub c: f64,
    /// Integer-shift window used for the target enumeration.
    pub window: i64,
    /// Row-major, `values[a * len + b] = h₁(a, b)`.
    pub values: Vec<f64>,
    /// Index of the minimizing target lift for each pair.
    pub choice: Vec<u32>,
    /// Pairs whose chosen minimizer did not reach the gradient tolerance.
    pub unconverged: usize,
    pub worst_grad: f64,
}

impl KernelMatrix {
    pub fn len(&self) -> usize {
        self.spec.node_count()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.len() + b]
    }

    pub fn converged(&self) -> bool {
        self.unconverged == 0
    }

    /// Re-solves the minimizer of a pair. The solve is deterministic, so the
    /// action equals the stored entry bit for bit.
    pub fn path(
        &self,
        grid: &Grid,
        params: &ModelParams,
        opts: &BvpOptions,
        a: usize,
        b: usize,
    ) -> BvpResult {
        let field = MeanField {
            potential: &params.potential,
            n: params.n,
        };
        let lag = Lag::mean_field(&field, self.c);
        let targets = targets_for(grid.node(b).points(), params.n, self.window);
        let mut solver = PairSolver::new(
            grid.node(a).points(),
            targets,
            0.0,
            1.0,
            lag,
            params.potential.mean_potential_sup(),
            opts,
        );
        solver.result(self.choice[a * self.len() + b] as usize, self.c)
    }
}

/// Kernels for several values of `c` on one grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelSet {
    pub model_hash: String,
    pub kernels: Vec<KernelMatrix>,
}

impl KernelSet {
    pub fn kernel(&self, c: f64) -> Result<&KernelMatrix> {
        self.kernels
            .iter()
            .find(|k| (k.c - c).abs() <= 1e-12)
            .ok_or(Error::KernelNotBuilt(c))
    }
}

/// Content hash of the model without `c`.
pub fn model_hash(params: &ModelParams) -> String {
    let mut h = Sha256::new();
    h.update(format!("n:{}", params.n).as_bytes());
    h.update(serde_json::to_vec(&params.potential).expect("potential serializes"));
    hex::encode(h.finalize())
}

/// Content hash of everything a kernel depends on.
pub fn kernel_hash(params: &ModelParams, spec: &GridSpec, c: f64, opts: &BvpOptions) -> String {
    let mut h = Sha256::new();
    h.update(model_hash(params).as_bytes());
    h.update(spec.hash_hex().as_bytes());
    h.update(c.to_bits().to_le_bytes());
    h.update(serde_json::to_vec(opts).expect("options serialize"));
    hex::encode(h.finalize())
}

/// Builds `h₁` over the grid for every `c` in `cs`. Rows are computed in
/// parallel and assembled in row order.
pub fn build_kernels(
    grid: &Grid,
    params: &ModelParams,
    cs: &[f64],
    opts: &BvpOptions,
) -> Result<KernelSet> {
    if grid.spec().n != params.n {
        return Err(Error::Dimension {
            expected: params.n,
            got: grid.spec().n,
        });
    }
    let cmax = cs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let window = shift_window(&params.with_c(cmax), 1.0);
    let field = MeanField {
        potential: &params.potential,
        n: params.n,
    };
    let lag = Lag::mean_field(&field, 0.0);
    let psup = params.potential.mean_potential_sup();
    let len = grid.len();
    let rows: Vec<Vec<Vec<(f64, u32, f64)>>> = (0..len)
        .into_par_iter()
        .map(|a| {
            (0..len)
                .map(|b| {
                    let targets = targets_for(grid.node(b).points(), params.n, window);
                    let mut solver =
                        PairSolver::new(grid.node(a).points(), targets, 0.0, 1.0, lag, psup, opts);
                    cs.iter()
                        .map(|&c| {
                            let (i, v) = solver.best(c);
                            (v, i as u32, solver.fine(i).grad_norm)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let kernels = cs
        .iter()
        .enumerate()
        .map(|(ci, &c)| {
            let mut values = Vec::with_capacity(len * len);
            let mut choice = Vec::with_capacity(len * len);
            let mut unconverged = 0;
            let mut worst_grad: f64 = 0.0;
            for row in &rows {
                for cell in row {
                    let (v, i, g) = cell[ci];
                    values.push(v);
                    choice.push(i);
                    if !(g < opts.grad_tol) {
                        unconverged += 1;
                    }
                    worst_grad = worst_grad.max(g);
                }
            }
            KernelMatrix {
                spec: grid.spec(),
                c,
                window,
                values,
                choice,
                unconverged,
                worst_grad,
            }
        })
        .collect();
    Ok(KernelSet {
        model_hash: model_hash(params),
        kernels,
    })
}
