//! The Euler–Lagrange flow of the `n`-particle Lagrangian and the a priori
//! bounds on minimizers.

use serde::{Deserialize, Serialize};

use crate::action::DiscretePath;
use crate::error::{Error, Result};
use crate::model::{eval_mean_potentials, force_into, ModelParams, PotentialSpec};
use crate::torus::{weighted_norm, Configuration};

/// A point `(t, q, v)` of phase space. Positions are raw lifts; the flow may
/// carry them slightly out of order through discretization error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub t: f64,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
}

impl PhasePoint {
    pub fn new(t: f64, q: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if q.len() != v.len() {
            return Err(Error::Dimension {
                expected: q.len(),
                got: v.len(),
            });
        }
        Ok(Self { t, q, v })
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn configuration(&self) -> Result<Configuration> {
        Configuration::new_mon3(self.q.clone())
    }
}

/// Velocity-Verlet trajectory of `(ODE)_Lag`, including the start point.
///
/// The number of steps is `round(|duration| / step)`; the step is then
/// adjusted so the trajectory ends exactly at `start.t + duration`. A negative
/// duration integrates backward.
pub fn integrate(
    pot: &PotentialSpec,
    start: &PhasePoint,
    duration: f64,
    step: f64,
) -> Vec<PhasePoint> {
    assert!(step > 0.0, "step must be positive");
    let steps = (duration.abs() / step).round().max(1.0) as usize;
    let h = duration / steps as f64;
    let n = start.n();
    let mut out = Vec::with_capacity(steps + 1);
    out.push(start.clone());

    let mut q = start.q.clone();
    let mut v = start.v.clone();
    let mut a = vec![0.0; n];
    let mut a_next = vec![0.0; n];
    force_into(pot, start.t, &q, &mut a);
    for k in 0..steps {
        let t_next = start.t + (k + 1) as f64 * h;
        for i in 0..n {
            q[i] += h * v[i] + 0.5 * h * h * a[i];
        }
        force_into(pot, t_next, &q, &mut a_next);
        for i in 0..n {
            v[i] += 0.5 * h * (a[i] + a_next[i]);
        }
        std::mem::swap(&mut a, &mut a_next);
        out.push(PhasePoint {
            t: t_next,
            q: q.clone(),
            v: v.clone(),
        });
    }
    out
}

/// Energy `½‖v‖² + V̄ + W̄`, conserved by the flow of an autonomous model.
pub fn energy(pot: &PotentialSpec, p: &PhasePoint) -> Result<f64> {
    if pot.is_time_dependent() {
        return Err(Error::Unsupported(
            "energy is only conserved when V does not depend on time".into(),
        ));
    }
    let (vb, wb) = eval_mean_potentials(pot, p.t, &p.q);
    Ok(0.5 * weighted_norm(&p.v).powi(2) + vb + wb)
}

/// Largest weighted speed and largest particle acceleration along a discrete
/// path, from first and second differences of its nodes. A path stitched
/// from minimizers of `segment` steps each is differenced within segments
/// only.
pub fn path_extremes(path: &DiscretePath, segment: usize) -> (f64, f64) {
    let dt = path.dt();
    let mut speed: f64 = 0.0;
    let mut accel: f64 = 0.0;
    for w in path.nodes.windows(2) {
        let v: Vec<f64> = w[1].iter().zip(&w[0]).map(|(b, a)| (b - a) / dt).collect();
        speed = speed.max(weighted_norm(&v));
    }
    for (k, w) in path.nodes.windows(3).enumerate() {
        if (k + 1) % segment.max(1) == 0 {
            continue;
        }
        for i in 0..w[0].len() {
            accel = accel.max(((w[2][i] - 2.0 * w[1][i] + w[0][i]) / (dt * dt)).abs());
        }
    }
    (speed, accel)
}

/// Constants bounding the speed and acceleration of `c`-minimal curves over
/// unit time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AprioriBounds {
    /// `‖V‖_∞ + ‖W‖_∞`.
    pub c1: f64,
    /// Action bound of the comparison segment: `2 + 2|c| + C₁`.
    pub c2: f64,
    /// Bound on `∫₀¹ ‖σ̇‖`: `2 √(C₂ + C₁ + c²)`.
    pub c4: f64,
    /// Acceleration bound `‖V′‖_∞ + ‖W′‖_∞`.
    pub accel: f64,
    /// Speed bound `C₄ + accel`.
    pub r_c: f64,
}

pub fn apriori_bounds(params: &ModelParams) -> AprioriBounds {
    let pot = &params.potential;
    let c = params.c;
    let c1 = pot.v_sup(0) + pot.w_sup(0);
    let c2 = 2.0 + 2.0 * c.abs() + c1;
    let c4 = 2.0 * (c2 + c1 + c * c).sqrt();
    let accel = pot.v_sup(1) + pot.w_sup(1);
    AprioriBounds {
        c1,
        c2,
        c4,
        accel,
        r_c: c4 + accel,
    }
}
