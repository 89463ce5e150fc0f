//! Peierls barriers, Aubry-set membership and the velocity graph over it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::BvpOptions;
use crate::dynamics::{integrate, PhasePoint};
use crate::error::{Error, Result};
use crate::grid::{Grid, GridSpec};
use crate::kernel::KernelMatrix;
use crate::model::ModelParams;
use crate::torus::{best_relabel, dist_s_points, weighted_norm};
use crate::weakkam::{calibrated_curve, calibrated_velocity, forward_calibrated_curve, ValueTable};

/// `h_n(A, B)` normalized by `+nα`, for `n = 1..=depth`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BarrierTable {
    pub spec: GridSpec,
    pub c: f64,
    pub alpha: f64,
    /// `stack[n − 1]` is `h_n`, row-major.
    pub stack: Vec<Vec<f64>>,
    /// Minimum of `h_n` over `n ∈ [depth/2, depth]`.
    pub h_inf: Vec<f64>,
    /// Max minus min of `h_n` over the same window.
    pub oscillation: Vec<f64>,
    pub flagged: usize,
}

impl BarrierTable {
    pub fn len(&self) -> usize {
        self.spec.node_count()
    }

    pub fn is_empty(&self) -> bool {
        self.h_inf.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.stack.len()
    }

    pub fn h(&self, n: usize, a: usize, b: usize) -> f64 {
        self.stack[n - 1][a * self.len() + b]
    }

    pub fn h_inf(&self, a: usize, b: usize) -> f64 {
        self.h_inf[a * self.len() + b]
    }

    /// Largest violation of `h_{n+1} = min_C (h_n(·, C) + h₁(C, ·) + α)`.
    pub fn bellman_defect(&self, kernel: &KernelMatrix) -> f64 {
        let len = self.len();
        let mut worst: f64 = 0.0;
        for n in 1..self.depth() {
            let next = min_plus(&self.stack[n - 1], &kernel.values, self.alpha, len);
            for (a, b) in next.iter().zip(&self.stack[n]) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }

    /// Largest `U⁻(B) − U⁺(A) − h_∞(A, B)` over all pairs; positive values
    /// violate the lower bound.
    pub fn lower_bound_violation(&self, u_minus: &ValueTable, u_plus: &ValueTable) -> f64 {
        let len = self.len();
        let mut worst = f64::NEG_INFINITY;
        for a in 0..len {
            for b in 0..len {
                worst = worst.max(u_minus.values[b] - u_plus.values[a] - self.h_inf(a, b));
            }
        }
        worst
    }
}

fn min_plus(h: &[f64], k: &[f64], alpha: f64, len: usize) -> Vec<f64> {
    (0..len)
        .into_par_iter()
        .flat_map_iter(|a| {
            let row = &h[a * len..(a + 1) * len];
            (0..len).map(move |b| {
                let mut best = f64::INFINITY;
                for (cc, hv) in row.iter().enumerate() {
                    best = best.min(hv + k[cc * len + b]);
                }
                best + alpha
            })
        })
        .collect()
}

/// Bellman recursion to `depth`; entries whose window oscillation exceeds
/// `osc_tol` are counted as flagged.
pub fn peierls(kernel: &KernelMatrix, alpha: f64, depth: usize, osc_tol: f64) -> Result<BarrierTable> {
    if depth < 2 {
        return Err(Error::Validation("barrier depth must be at least 2".into()));
    }
    let len = kernel.len();
    let mut stack = vec![kernel.values.iter().map(|v| v + alpha).collect::<Vec<f64>>()];
    for _ in 1..depth {
        let next = min_plus(stack.last().unwrap(), &kernel.values, alpha, len);
        stack.push(next);
    }
    let lo = depth / 2;
    let mut h_inf = vec![f64::INFINITY; len * len];
    let mut hi = vec![f64::NEG_INFINITY; len * len];
    for h in &stack[lo - 1..] {
        for i in 0..len * len {
            h_inf[i] = h_inf[i].min(h[i]);
            hi[i] = hi[i].max(h[i]);
        }
    }
    let oscillation: Vec<f64> = hi.iter().zip(&h_inf).map(|(a, b)| a - b).collect();
    let flagged = oscillation.iter().filter(|&&o| o > osc_tol).count();
    Ok(BarrierTable {
        spec: kernel.spec,
        c: kernel.c,
        alpha,
        stack,
        h_inf,
        oscillation,
        flagged,
    })
}

/// Membership tolerances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MembershipTol {
    pub barrier: f64,
    pub conjugate: f64,
}

impl Default for MembershipTol {
    fn default() -> Self {
        Self {
            barrier: 1e-4,
            conjugate: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AubryReport {
    pub c: f64,
    /// Nodes with `|h_∞(M, M)| < tol`.
    pub by_barrier: Vec<usize>,
    /// Nodes with `U⁻(M) − U⁺(M) < tol`.
    pub by_conjugate: Vec<usize>,
    /// Nodes selected by exactly one criterion.
    pub disagreement: Vec<usize>,
    /// Members under both criteria with their calibrated velocities.
    pub members: Vec<usize>,
    pub velocities: Vec<Vec<f64>>,
    pub lipschitz: f64,
    /// Largest distance from the time-one image of a member to the nearest
    /// member.
    pub invariance: f64,
}

impl AubryReport {
    pub fn agree(&self) -> bool {
        self.disagreement.is_empty()
    }
}

/// Membership by both criteria, then velocities and the graph diagnostic
/// on the common members.
#[allow(clippy::too_many_arguments)]
pub fn aubry_membership(
    grid: &Grid,
    kernel: &KernelMatrix,
    barriers: &BarrierTable,
    u_minus: &ValueTable,
    u_plus: &ValueTable,
    params: &ModelParams,
    opts: &BvpOptions,
    tol: MembershipTol,
) -> Result<AubryReport> {
    let len = grid.len();
    if barriers.len() != len || u_minus.values.len() != len || u_plus.values.len() != len {
        return Err(Error::Dimension {
            expected: len,
            got: barriers.len(),
        });
    }
    let by_barrier: Vec<usize> = (0..len).filter(|&m| barriers.h_inf(m, m).abs() < tol.barrier).collect();
    let by_conjugate: Vec<usize> = (0..len)
        .filter(|&m| u_minus.values[m] - u_plus.values[m] < tol.conjugate)
        .collect();
    let disagreement: Vec<usize> = (0..len)
        .filter(|m| by_barrier.contains(m) != by_conjugate.contains(m))
        .collect();
    let members: Vec<usize> = by_barrier.iter().cloned().filter(|m| by_conjugate.contains(m)).collect();
    let params = params.with_c(kernel.c);
    let velocities = members
        .iter()
        .map(|&m| calibrated_velocity(grid, kernel, u_minus, &params, opts, m))
        .collect::<Result<Vec<_>>>()?;
    let (lipschitz, invariance) = graph_diagnostic(grid, &params, &members, &velocities)?;
    Ok(AubryReport {
        c: kernel.c,
        by_barrier,
        by_conjugate,
        disagreement,
        members,
        velocities,
        lipschitz,
        invariance,
    })
}

/// Largest `‖v(M) − v(M′)‖ / dist_S(M, M′)` over member pairs, velocities
/// compared under the matching that attains `dist_S`.
pub fn velocity_lipschitz(points: &[&[f64]], velocities: &[Vec<f64>]) -> f64 {
    let mut l: f64 = 0.0;
    for i in 0..points.len() {
        for j in 0..i {
            let (d, r) = best_relabel(points[i], points[j]);
            if d <= 1e-12 {
                continue;
            }
            let n = velocities[i].len();
            let diff: Vec<f64> = (0..n).map(|k| velocities[i][k] - velocities[j][(k + r) % n]).collect();
            l = l.max(weighted_norm(&diff) / d);
        }
    }
    l
}

/// Fitted Lipschitz constant of the velocity graph and the time-one
/// invariance gap of the member set.
pub fn graph_diagnostic(
    grid: &Grid,
    params: &ModelParams,
    members: &[usize],
    velocities: &[Vec<f64>],
) -> Result<(f64, f64)> {
    let points: Vec<&[f64]> = members.iter().map(|&m| grid.node(m).points()).collect();
    let lipschitz = velocity_lipschitz(&points, velocities);
    let mut invariance: f64 = 0.0;
    for (&m, v) in members.iter().zip(velocities) {
        let start = PhasePoint::new(0.0, grid.node(m).points().to_vec(), v.clone())?;
        let orbit = integrate(&params.potential, &start, 1.0, 1.0 / 256.0);
        let end = &orbit.last().expect("orbit is non-empty").q;
        let mut sorted: Vec<f64> = end.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let gap = points
            .iter()
            .map(|p| dist_s_points(p, &sorted))
            .fold(f64::INFINITY, f64::min);
        invariance = invariance.max(gap);
    }
    Ok((lipschitz, invariance))
}

/// Calibration defects of the stitched curve through `member` over
/// `[−horizon, horizon]`, measured against both tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StitchedCalibration {
    pub minus: f64,
    pub plus: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn stitched_calibration(
    grid: &Grid,
    kernel: &KernelMatrix,
    u_minus: &ValueTable,
    u_plus: &ValueTable,
    params: &ModelParams,
    opts: &BvpOptions,
    member: usize,
    horizon: usize,
) -> Result<StitchedCalibration> {
    let params = params.with_c(kernel.c);
    let back = calibrated_curve(grid, kernel, u_minus, &params, opts, member, horizon)?;
    let fwd = forward_calibrated_curve(grid, kernel, u_plus, &params, opts, member, horizon)?;
    let mut nodes = back.nodes.clone();
    nodes.extend_from_slice(&fwd.nodes[1..]);
    let actions: Vec<f64> = back.step_actions.iter().chain(&fwd.step_actions).cloned().collect();
    let defect = |u: &[f64]| {
        actions
            .iter()
            .enumerate()
            .map(|(k, s)| (u[nodes[k + 1]] - u[nodes[k]] - (s + u_minus.alpha)).abs())
            .sum::<f64>()
    };
    Ok(StitchedCalibration {
        minus: defect(&u_minus.values),
        plus: defect(&u_plus.values),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::build_kernels;
    use crate::model::PotentialSpec;
    use crate::weakkam::{solve_alpha, solve_conjugate, IterOptions};

    struct Case {
        grid: Grid,
        params: ModelParams,
        k: KernelMatrix,
        um: ValueTable,
        up: ValueTable,
    }

    fn case(n: usize, r: usize, pot: PotentialSpec, c: f64) -> Case {
        let grid = Grid::new(GridSpec::new(n, r).unwrap());
        let params = ModelParams::new(n, c, pot).unwrap();
        let set = build_kernels(&grid, &params, &[c], &BvpOptions::default()).unwrap();
        let k = set.kernels.into_iter().next().unwrap();
        let io = IterOptions::default();
        let um = solve_alpha(&k, &io).unwrap();
        let up = solve_conjugate(&k, &um, &io).unwrap();
        Case { grid, params, k, um, up }
    }

    #[test]
    fn free_barriers_vanish_on_the_diagonal() {
        let s = case(1, 8, PotentialSpec::free(), 0.0);
        let b = peierls(&s.k, s.um.alpha, 8, 1e-6).unwrap();
        assert!(b.bellman_defect(&s.k) < 1e-10);
        for m in 0..s.grid.len() {
            assert!(b.h_inf(m, m).abs() < 1e-12);
        }
        let rep = aubry_membership(&s.grid, &s.k, &b, &s.um, &s.up, &s.params, &BvpOptions::default(), MembershipTol::default()).unwrap();
        assert_eq!(rep.members.len(), 8);
        assert!(rep.agree());
        assert!(rep.lipschitz < 1e-9);
    }

    #[test]
    fn free_rotation_is_invariant() {
        let s = case(1, 8, PotentialSpec::free(), 0.5);
        let b = peierls(&s.k, s.um.alpha, 8, 1e-6).unwrap();
        let rep = aubry_membership(&s.grid, &s.k, &b, &s.um, &s.up, &s.params, &BvpOptions::default(), MembershipTol::default()).unwrap();
        assert_eq!(rep.members.len(), 8);
        for v in &rep.velocities {
            assert!((v[0] - 0.5).abs() < 1e-9);
        }
        assert!(rep.invariance < 1e-9);
    }

    #[test]
    fn pendulum_aubry_set_is_the_top() {
        let s = case(1, 16, PotentialSpec::pendulum(0.3), 0.0);
        let b = peierls(&s.k, s.um.alpha, 16, 1e-4).unwrap();
        assert!(b.bellman_defect(&s.k) < 1e-10);
        assert!(b.h_inf(0, 0).abs() < 1e-4);
        for m in 1..s.grid.len() {
            assert!(b.h_inf(m, m) > 0.01, "{m} {}", b.h_inf(m, m));
        }
        // h₂ ≤ h₁(A, A) + h₁(A, B) + 2α
        for a in 0..s.grid.len() {
            for bb in 0..s.grid.len() {
                assert!(b.h(2, a, bb) <= b.h(1, a, a) + b.h(1, a, bb) + 1e-12);
            }
        }
        assert!(b.lower_bound_violation(&s.um, &s.up) < 1e-6);
        let rep = aubry_membership(&s.grid, &s.k, &b, &s.um, &s.up, &s.params, &BvpOptions::default(), MembershipTol::default()).unwrap();
        assert_eq!(rep.members, vec![0]);
        assert!(rep.agree());
        assert_eq!(rep.lipschitz, 0.0);
        assert!(rep.invariance < 1e-12);
        let st = stitched_calibration(&s.grid, &s.k, &s.um, &s.up, &s.params, &BvpOptions::default(), 0, 4).unwrap();
        assert!(st.minus < 8e-6 && st.plus < 8e-6);
    }

    #[test]
    fn lipschitz_of_a_linear_graph() {
        let pts: Vec<Vec<f64>> = vec![vec![0.0], vec![0.25], vec![0.5]];
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let vel = vec![vec![0.0], vec![0.5], vec![1.0]];
        assert!((velocity_lipschitz(&refs, &vel) - 2.0).abs() < 1e-12);
    }
}
