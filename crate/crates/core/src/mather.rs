//! Minimal measures as time averages along orbits, rotation numbers, the
//! action `I_c(μ)`, and the Legendre pair `(α, β)`.

use serde::{Deserialize, Serialize};

use crate::action::{BvpOptions, DiscretePath, Lag, MeanField};
use crate::dynamics::PhasePoint;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::kernel::KernelMatrix;
use crate::weakkam::{forward_calibrated_curve, ValueTable};
use crate::model::{lagrangian, ModelParams};
use crate::torus::{circle_dist, cyclic_relabel, dist_s_points, frac, weighted_norm};

/// One phase-space sample with positions in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureSample {
    /// Time modulo one.
    pub t: f64,
    /// Canonical representative of the configuration class.
    pub q: Vec<f64>,
    /// Velocities in the order of `q`.
    pub v: Vec<f64>,
}

impl MeasureSample {
    pub fn from_phase(p: &PhasePoint) -> Self {
        let mut idx: Vec<usize> = (0..p.n()).collect();
        let f: Vec<f64> = p.q.iter().map(|&x| frac(x)).collect();
        idx.sort_by(|&a, &b| f[a].partial_cmp(&f[b]).unwrap().then(a.cmp(&b)));
        Self {
            t: frac(p.t),
            q: idx.iter().map(|&i| f[i]).collect(),
            v: idx.iter().map(|&i| p.v[i]).collect(),
        }
    }
}

/// Distance between phase samples: positions matched by the best cyclic
/// relabeling and integer shift, velocities compared under that matching,
/// plus the circle distance of the time phases.
pub fn phase_dist(a: &MeasureSample, b: &MeasureSample) -> f64 {
    state_dist(a, b) + circle_dist(a.t, b.t)
}

/// [`phase_dist`] without the time phase.
pub fn state_dist(a: &MeasureSample, b: &MeasureSample) -> f64 {
    let n = a.q.len();
    let mut best = f64::INFINITY;
    for r in 0..n {
        let bq = cyclic_relabel(&b.q, r);
        let mean: f64 = bq.iter().zip(&a.q).map(|(y, x)| y - x).sum::<f64>() / n as f64;
        for z in [(-mean).floor(), (-mean).ceil()] {
            let mut pos = 0.0;
            let mut vel = 0.0;
            for i in 0..n {
                pos += (bq[i] + z - a.q[i]).powi(2);
                vel += (b.v[(i + r) % n] - a.v[i]).powi(2);
            }
            let d = ((pos + vel) / n as f64).sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Uniformly weighted samples of an orbit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    pub samples: Vec<MeasureSample>,
    /// Length of the source orbit.
    pub horizon: f64,
    /// Upper bound on the transport distance between the measure and its
    /// time-one push-forward.
    pub invariance_defect: f64,
}

impl EmpiricalMeasure {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.samples.len() as f64
    }

    /// Largest weighted speed over the samples.
    pub fn max_speed(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| weighted_norm(&s.v))
            .fold(0.0, f64::max)
    }

    /// Diameter of the projection of the support to phase space, estimated on
    /// at most 256 evenly spaced samples.
    pub fn support_diameter(&self) -> f64 {
        let step = (self.samples.len() / 256).max(1);
        let sub: Vec<&MeasureSample> = self.samples.iter().step_by(step).collect();
        let mut d: f64 = 0.0;
        for i in 0..sub.len() {
            for j in 0..i {
                d = d.max(state_dist(sub[i], sub[j]));
            }
        }
        d
    }
}

/// Phase points along a discrete path, velocities from the path.
pub fn orbit_from_path(path: &DiscretePath, params: &ModelParams) -> Vec<PhasePoint> {
    let field = MeanField {
        potential: &params.potential,
        n: params.n,
    };
    let lag = Lag::mean_field(&field, params.c);
    path.velocities(&lag)
        .into_iter()
        .enumerate()
        .map(|(k, v)| PhasePoint {
            t: path.time(k),
            q: path.nodes[k].clone(),
            v,
        })
        .collect()
}

fn uniform_step(orbit: &[PhasePoint]) -> Result<f64> {
    if orbit.len() < 3 {
        return Err(Error::Validation("orbit is too short".into()));
    }
    let dt = (orbit[orbit.len() - 1].t - orbit[0].t) / (orbit.len() - 1) as f64;
    if !(dt > 0.0) {
        return Err(Error::Validation("orbit times must increase".into()));
    }
    Ok(dt)
}

/// Time average over the trailing half of the orbit, sampled every `stride`
/// points. The last unit of time is held back to form the push-forward.
pub fn krylov_bogolyubov(orbit: &[PhasePoint], stride: usize) -> Result<EmpiricalMeasure> {
    let dt = uniform_step(orbit)?;
    let per_unit = (1.0 / dt).round() as usize;
    if stride == 0 || per_unit % stride != 0 || ((per_unit as f64) * dt - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "the sample stride must divide the {per_unit} steps of one time unit"
        )));
    }
    let last = orbit.len() - 1;
    let start = last / 2;
    if last < start + per_unit + stride {
        return Err(Error::Validation("orbit is shorter than two time units".into()));
    }
    let idx: Vec<usize> = (start..=last - per_unit).step_by(stride).collect();
    let samples: Vec<MeasureSample> = idx.iter().map(|&i| MeasureSample::from_phase(&orbit[i])).collect();
    // the push-forward drops the first unit of samples and adds one after
    // the end; the rest is shared, so pair the differing samples by time phase
    let lag = per_unit / stride;
    if idx.len() < lag {
        return Err(Error::Validation("orbit is shorter than two time units".into()));
    }
    let shared = idx.len() - lag;
    let mut cost = 0.0;
    for j in 0..lag {
        let k = (j + lag - shared % lag) % lag;
        let added = MeasureSample::from_phase(&orbit[idx[shared + k] + per_unit]);
        cost += phase_dist(&samples[j], &added);
    }
    Ok(EmpiricalMeasure {
        invariance_defect: cost / samples.len() as f64,
        samples,
        horizon: orbit[last].t - orbit[0].t,
    })
}

/// A measure built along a forward calibrated chain of `U⁺`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainMeasure {
    pub seed: usize,
    pub measure: EmpiricalMeasure,
    pub orbit_rotation: RotationEstimate,
    /// Grid nodes visited over the trailing half of the chain.
    pub tail_nodes: Vec<usize>,
    pub calibration_defect: f64,
    /// The stitched chain itself.
    pub path: DiscretePath,
}

/// Follows the `U⁺` chain from `seed` for `horizon` unit steps and averages
/// over its trailing half. Chains settle on the Mather set, where a long
/// flow from a grid seed would drift off hyperbolic orbits.
#[allow(clippy::too_many_arguments)]
pub fn chain_measure(
    grid: &Grid,
    kernel: &KernelMatrix,
    u_plus: &ValueTable,
    params: &ModelParams,
    opts: &BvpOptions,
    seed: usize,
    horizon: usize,
    stride: usize,
) -> Result<ChainMeasure> {
    let params = params.with_c(kernel.c);
    let curve = forward_calibrated_curve(grid, kernel, u_plus, &params, opts, seed, horizon)?;
    let orbit = orbit_from_path(&curve.path, &params);
    let measure = krylov_bogolyubov(&orbit, stride)?;
    let mut tail_nodes = curve.nodes[horizon / 2..].to_vec();
    tail_nodes.sort_unstable();
    tail_nodes.dedup();
    Ok(ChainMeasure {
        seed,
        orbit_rotation: rotation_number_orbit(&orbit, 1e-6)?,
        measure,
        tail_nodes,
        calibration_defect: curve.step_defects.iter().fold(0.0, |m: f64, d| m.max(*d)),
        path: curve.path,
    })
}

/// `∫ ⟨1, v⟩ dμ` with the particle-averaged velocity.
pub fn rotation_number(measure: &EmpiricalMeasure) -> f64 {
    let w = measure.weight();
    measure
        .samples
        .iter()
        .map(|s| s.v.iter().sum::<f64>() / s.v.len() as f64 * w)
        .sum()
}

/// Per-particle mean speeds over the trailing half of an orbit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationEstimate {
    pub mean: f64,
    pub per_particle: Vec<f64>,
    /// Largest minus smallest per-particle value.
    pub spread: f64,
    pub flagged: bool,
}

/// `(x_i(T) − x_i(T/2)) / (T/2)` for each particle.
pub fn rotation_number_orbit(orbit: &[PhasePoint], spread_tol: f64) -> Result<RotationEstimate> {
    uniform_step(orbit)?;
    let last = orbit.len() - 1;
    let mid = last / 2;
    let span = orbit[last].t - orbit[mid].t;
    let per_particle: Vec<f64> = orbit[last]
        .q
        .iter()
        .zip(&orbit[mid].q)
        .map(|(b, a)| (b - a) / span)
        .collect();
    let mean = per_particle.iter().sum::<f64>() / per_particle.len() as f64;
    let (mx, mn) = per_particle
        .iter()
        .fold((f64::NEG_INFINITY, f64::INFINITY), |(a, b), &x| (a.max(x), b.min(x)));
    Ok(RotationEstimate {
        mean,
        spread: mx - mn,
        flagged: mx - mn > spread_tol,
        per_particle,
    })
}

/// `I_c(μ) = ∫ ℒ_c dμ`.
pub fn action_of_measure(measure: &EmpiricalMeasure, params: &ModelParams) -> Result<f64> {
    let w = measure.weight();
    let mut total = 0.0;
    for s in &measure.samples {
        total += lagrangian(s.t, &s.q, &s.v, params)? * w;
    }
    Ok(total)
}

/// Grid nodes within one grid spacing of some sample of the measures.
pub fn mather_nodes(grid: &Grid, measures: &[EmpiricalMeasure]) -> Vec<usize> {
    let h = grid.spec().spacing();
    let samples: Vec<&MeasureSample> = measures.iter().flat_map(|m| m.samples.iter()).collect();
    let mut out: Vec<usize> = samples.iter().map(|s| grid.nearest(&s.q)).collect();
    out.sort_unstable();
    out.dedup();
    out.retain(|&i| {
        samples
            .iter()
            .any(|s| dist_s_points(grid.node(i).points(), &s.q) <= h + 1e-12)
    });
    out
}

/// `α` on a `c` grid and `β` obtained from it by duality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualityTable {
    pub cs: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_lo: Vec<f64>,
    pub alpha_hi: Vec<f64>,
    pub rhos: Vec<f64>,
    pub beta: Vec<f64>,
    /// Maximizing `c` for each `ρ`, an element of `∂β(ρ)`.
    pub subgradient: Vec<f64>,
}

/// `β(ρ)` and the maximizing `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaValue {
    pub beta: f64,
    pub c: f64,
}

impl DualityTable {
    /// `cs` must be strictly increasing; brackets are `[lo, hi]` per entry.
    pub fn new(cs: Vec<f64>, alpha: Vec<f64>, brackets: Vec<[f64; 2]>) -> Result<Self> {
        if cs.len() != alpha.len() || cs.len() != brackets.len() {
            return Err(Error::Dimension {
                expected: cs.len(),
                got: alpha.len().min(brackets.len()),
            });
        }
        if cs.len() < 3 || cs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Validation(
                "the c grid needs at least three increasing values".into(),
            ));
        }
        Ok(Self {
            alpha_lo: brackets.iter().map(|b| b[0]).collect(),
            alpha_hi: brackets.iter().map(|b| b[1]).collect(),
            cs,
            alpha,
            rhos: vec![],
            beta: vec![],
            subgradient: vec![],
        })
    }

    /// `max_c (cρ − α(c))`; a maximizer at either end of the grid means the
    /// grid does not bracket `∂β(ρ)`.
    pub fn beta(&self, rho: f64) -> Result<BetaValue> {
        let mut best = 0;
        for i in 1..self.cs.len() {
            if self.cs[i] * rho - self.alpha[i] > self.cs[best] * rho - self.alpha[best] {
                best = i;
            }
        }
        if best == 0 || best == self.cs.len() - 1 {
            return Err(Error::GridTooSmall(format!(
                "β({rho}) is attained at the grid end c = {}",
                self.cs[best]
            )));
        }
        Ok(BetaValue {
            beta: self.cs[best] * rho - self.alpha[best],
            c: self.cs[best],
        })
    }

    /// Evaluates `β` on a list of rotation numbers and stores the rows.
    pub fn fill_beta(&mut self, rhos: &[f64]) -> Result<()> {
        let vals = rhos.iter().map(|&r| self.beta(r)).collect::<Result<Vec<_>>>()?;
        self.rhos = rhos.to_vec();
        self.beta = vals.iter().map(|v| v.beta).collect();
        self.subgradient = vals.iter().map(|v| v.c).collect();
        Ok(())
    }

    /// Smallest `β(ρ) + α(c) − cρ` over all stored `ρ` and all grid `c`.
    pub fn fenchel_young_gap(&self) -> f64 {
        let mut gap = f64::INFINITY;
        for (r, b) in self.rhos.iter().zip(&self.beta) {
            for (c, a) in self.cs.iter().zip(&self.alpha) {
                gap = gap.min(b + a - c * r);
            }
        }
        gap
    }

    /// Largest `|β(ρ) + α(c*) − c*ρ|` at the reported subgradients.
    pub fn fenchel_equality_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for ((r, b), c) in self.rhos.iter().zip(&self.beta).zip(&self.subgradient) {
            let i = self.cs.iter().position(|x| x == c).expect("subgradient is a grid value");
            worst = worst.max((b + self.alpha[i] - c * r).abs());
        }
        worst
    }

    /// Most negative three-point convexity defect of `α` on its grid.
    pub fn alpha_convexity_defect(&self) -> f64 {
        convexity_defect(&self.cs, &self.alpha)
    }

    /// Most negative three-point convexity defect of `β` on its grid.
    pub fn beta_convexity_defect(&self) -> f64 {
        let mut pairs: Vec<(f64, f64)> = self.rhos.iter().cloned().zip(self.beta.iter().cloned()).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        pairs.dedup_by(|a, b| a.0 == b.0);
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        convexity_defect(&x, &y)
    }

    /// One-sided difference quotients of `α` at grid index `i`.
    pub fn subdifferential(&self, i: usize) -> (f64, f64) {
        let q = |j: usize| (self.alpha[j + 1] - self.alpha[j]) / (self.cs[j + 1] - self.cs[j]);
        let left = if i == 0 { f64::NEG_INFINITY } else { q(i - 1) };
        let right = if i + 1 == self.cs.len() { f64::INFINITY } else { q(i) };
        (left, right)
    }
}

/// Minimum over interior points of `y_i − (linear interpolation of the
/// neighbors at x_i)` negated: zero or negative means convex.
fn convexity_defect(x: &[f64], y: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for i in 1..x.len().saturating_sub(1) {
        let s = (x[i] - x[i - 1]) / (x[i + 1] - x[i - 1]);
        let chord = (1.0 - s) * y[i - 1] + s * y[i + 1];
        worst = worst.max(y[i] - chord);
    }
    worst
}
