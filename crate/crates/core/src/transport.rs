//! Transfer measures between equal-weight boundary measures on the line,
//! the damped self-consistent iteration `δ ← (1 − θ)δ + θΦ(δ)`, and the
//! comparison of its value with the action of a minimal parametrization.
//!
//! A transfer measure is represented by `n` one-particle paths over
//! `[−1, 1]`. Values are integrals over `[−1, 1]` with Lebesgue time weight,
//! so the value of the measure induced by `σ` is the `ℒ_c` action of `σ`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::{
    discrete_action, minimize_bvp, solve_path, BvpOptions, DiscretePath, Lag, PathPotential,
};
use crate::dynamics::{integrate, PhasePoint};
use crate::error::{Error, Result};
use crate::model::{ModelParams, PotentialSpec};

/// Sorted lifts of the two boundary measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPair {
    pub minus: Vec<f64>,
    pub plus: Vec<f64>,
}

impl BoundaryPair {
    pub fn new(mut minus: Vec<f64>, mut plus: Vec<f64>) -> Result<Self> {
        if minus.len() != plus.len() {
            return Err(Error::Dimension {
                expected: minus.len(),
                got: plus.len(),
            });
        }
        if minus.is_empty() {
            return Err(Error::Validation("boundary measures need at least one point".into()));
        }
        for side in [&mut minus, &mut plus] {
            if side.iter().any(|x| !x.is_finite()) {
                return Err(Error::Validation("boundary points must be finite".into()));
            }
            side.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if side[side.len() - 1] - side[0] > 1.0 + 1e-12 {
                return Err(Error::Validation(
                    "boundary support must fit in an interval of length 1".into(),
                ));
            }
        }
        Ok(Self { minus, plus })
    }

    pub fn n(&self) -> usize {
        self.minus.len()
    }

    /// Smallest `R` with both supports in `[−R, R]`.
    pub fn support_radius(&self) -> f64 {
        self.minus
            .iter()
            .chain(&self.plus)
            .fold(0.0, |m: f64, x| m.max(x.abs()))
    }

    pub fn shifted(&self, k: f64) -> Self {
        Self {
            minus: self.minus.iter().map(|x| x + k).collect(),
            plus: self.plus.iter().map(|x| x + k).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    pub pairs: Vec<(f64, f64)>,
    /// `(1/n) Σ (y_i − x_i)²`.
    pub cost: f64,
}

/// The order-preserving pairing of the sorted lifts.
pub fn monotone_matching(b: &BoundaryPair) -> Matching {
    let pairs: Vec<(f64, f64)> = b.minus.iter().cloned().zip(b.plus.iter().cloned()).collect();
    let cost = pairs.iter().map(|(x, y)| (y - x) * (y - x)).sum::<f64>() / pairs.len() as f64;
    Matching { pairs, cost }
}

/// Speed bound for solutions of the mean-field equation over `[−1, 1]`
/// joining the boundary supports: the mean speed is at most `A`, and the
/// force moves the speed by at most `2 sup|force|` over the window.
pub fn speed_bound(b: &BoundaryPair, potential: &PotentialSpec) -> f64 {
    b.support_radius() + 2.0 * (potential.v_sup(1) + potential.w_sup(1))
}

/// Radius of the window containing every such path.
pub fn window_radius(b: &BoundaryPair, potential: &PotentialSpec) -> f64 {
    b.support_radius() + 2.0 * speed_bound(b, potential)
}

/// `n` one-particle paths on a common time grid over `[−1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMeasure {
    pub boundary: BoundaryPair,
    pub paths: Vec<DiscretePath>,
}

impl TransferMeasure {
    /// Straight segments along the monotone matching.
    pub fn straight(b: &BoundaryPair, m: usize) -> Self {
        let paths = b
            .minus
            .iter()
            .zip(&b.plus)
            .map(|(x, y)| DiscretePath::straight(&[*x], &[*y], -1.0, 1.0, m))
            .collect();
        Self {
            boundary: b.clone(),
            paths,
        }
    }

    /// Splits an `n`-particle path into its particle paths.
    pub fn from_bundle(b: &BoundaryPair, bundle: &DiscretePath) -> Self {
        let paths = (0..bundle.n())
            .map(|i| DiscretePath {
                t0: bundle.t0,
                t1: bundle.t1,
                nodes: bundle.nodes.iter().map(|q| vec![q[i]]).collect(),
            })
            .collect();
        Self {
            boundary: b.clone(),
            paths,
        }
    }

    pub fn m(&self) -> usize {
        self.paths[0].m()
    }

    /// The particle paths as one `n`-particle path.
    pub fn bundle(&self) -> DiscretePath {
        let p0 = &self.paths[0];
        DiscretePath {
            t0: p0.t0,
            t1: p0.t1,
            nodes: (0..=p0.m())
                .map(|k| self.paths.iter().map(|p| p.nodes[k][0]).collect())
                .collect(),
        }
    }

    /// Largest distance between path endpoints and the matched boundary points.
    pub fn marginal_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (i, p) in self.paths.iter().enumerate() {
            worst = worst.max((p.start()[0] - self.boundary.minus[i]).abs());
            worst = worst.max((p.end()[0] - self.boundary.plus[i]).abs());
        }
        worst
    }

    pub fn max_position(&self) -> f64 {
        self.paths
            .iter()
            .flat_map(|p| p.nodes.iter())
            .fold(0.0, |m: f64, q| m.max(q[0].abs()))
    }

    /// Largest segment speed.
    pub fn max_speed(&self) -> f64 {
        let dt = self.paths[0].dt();
        self.paths
            .iter()
            .flat_map(|p| p.nodes.windows(2))
            .fold(0.0, |m: f64, w| m.max(((w[1][0] - w[0][0]) / dt).abs()))
    }

    /// Sup distance between two measures on the same grid.
    pub fn distance(&self, other: &Self) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, b) in self.paths.iter().zip(&other.paths) {
            for (x, y) in a.nodes.iter().zip(&b.nodes) {
                worst = worst.max((x[0] - y[0]).abs());
            }
        }
        worst
    }

    fn blend(&self, other: &Self, theta: f64) -> Self {
        let mut out = self.clone();
        for (p, q) in out.paths.iter_mut().zip(&other.paths) {
            for (x, y) in p.nodes.iter_mut().zip(&q.nodes) {
                x[0] = (1.0 - theta) * x[0] + theta * y[0];
            }
        }
        out
    }

    /// `∫ (∂_t φ + v ∂_x φ) dμ − ½ (∫ φ(1, ·) dμ̃₁ − ∫ φ(−1, ·) dμ̃₋₁)` for the
    /// probability normalization `μ = ½ dt ⊗ μ_t`. `phi` returns
    /// `(φ, ∂_t φ, ∂_x φ)`.
    pub fn closedness_defect(&self, phi: &dyn Fn(f64, f64) -> (f64, f64, f64)) -> f64 {
        let n = self.paths.len() as f64;
        let mut lhs = 0.0;
        for p in &self.paths {
            let dt = p.dt();
            for k in 0..p.m() {
                let (a, b) = (p.nodes[k][0], p.nodes[k + 1][0]);
                let t = p.time(k) + 0.5 * dt;
                let (_, ft, fx) = phi(t, 0.5 * (a + b));
                lhs += dt * (ft + fx * (b - a) / dt);
            }
        }
        lhs *= 0.5 / n;
        let rhs: f64 = self
            .boundary
            .minus
            .iter()
            .zip(&self.boundary.plus)
            .map(|(x, y)| phi(1.0, *y).0 - phi(-1.0, *x).0)
            .sum::<f64>()
            * 0.5
            / n;
        (lhs - rhs).abs()
    }
}

/// One-particle potential `V(t, x) + W_δ(t, x)` with `δ` frozen at the
/// segment midpoints of its time grid.
struct Frozen<'a> {
    potential: &'a PotentialSpec,
    t0: f64,
    dt: f64,
    /// Positions of the frozen particles at each segment midpoint.
    mids: Vec<Vec<f64>>,
}

impl<'a> Frozen<'a> {
    fn new(potential: &'a PotentialSpec, delta: &TransferMeasure) -> Self {
        let p0 = &delta.paths[0];
        let mids = (0..p0.m())
            .map(|k| {
                delta
                    .paths
                    .iter()
                    .map(|p| 0.5 * (p.nodes[k][0] + p.nodes[k + 1][0]))
                    .collect()
            })
            .collect();
        Self {
            potential,
            t0: p0.t0,
            dt: p0.dt(),
            mids,
        }
    }

    fn segment(&self, t: f64) -> &[f64] {
        let k = ((t - self.t0) / self.dt - 0.5).round().max(0.0) as usize;
        &self.mids[k.min(self.mids.len() - 1)]
    }

    fn interaction(&self, k: u8, t: f64, x: f64) -> f64 {
        let ys = self.segment(t);
        ys.iter().map(|y| self.potential.w_deriv(k, x - y)).sum::<f64>() / ys.len() as f64
    }
}

impl PathPotential for Frozen<'_> {
    fn dim(&self) -> usize {
        1
    }

    fn value(&self, t: f64, q: &[f64]) -> f64 {
        self.potential.v(t, q[0]) + self.interaction(0, t, q[0])
    }

    fn gradient(&self, t: f64, q: &[f64], out: &mut [f64]) {
        out[0] = self.potential.v_deriv(1, t, q[0]) + self.interaction(1, t, q[0]);
    }

    fn hessian(&self, t: f64, q: &[f64], out: &mut [f64]) {
        out[0] = self.potential.v_deriv(2, t, q[0]) + self.interaction(2, t, q[0]);
    }
}

/// `Φ(δ)`: each particle path minimizes `½ q̇² − c q̇ − V − W_δ` with its
/// endpoints fixed, warm-started from `δ`. Returns the measure and the count
/// of unconverged paths.
pub fn minimal_transfer(
    delta: &TransferMeasure,
    params: &ModelParams,
    opts: &BvpOptions,
) -> (TransferMeasure, usize) {
    let frozen = Frozen::new(&params.potential, delta);
    let lag = Lag {
        weight: 1.0,
        c: params.c,
        potential: &frozen,
    };
    let solved: Vec<_> = delta
        .paths
        .par_iter()
        .map(|p| solve_path(p.clone(), lag, opts))
        .collect();
    let unconverged = solved.iter().filter(|s| !s.converged).count();
    (
        TransferMeasure {
            boundary: delta.boundary.clone(),
            paths: solved.into_iter().map(|s| s.path).collect(),
        },
        unconverged,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Seed {
    Straight,
    ForwardFlow,
    BackwardFlow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Time steps over `[−1, 1]`.
    pub steps: usize,
}

impl Default for TransportOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-9,
            max_iter: 200,
            steps: 128,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixedPoint {
    pub seed: Seed,
    pub measure: TransferMeasure,
    /// `∫_{−1}^{1} ℒ_c` of the induced parametrization.
    pub a: f64,
    pub residuals: Vec<f64>,
    pub converged: bool,
    /// Residuals decrease from the third iteration on.
    pub monotone: bool,
    pub unconverged_paths: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelfConsistent {
    pub fixed_points: Vec<FixedPoint>,
    /// Index of the least value among converged fixed points.
    pub best: Option<usize>,
}

impl SelfConsistent {
    pub fn a(&self) -> Option<f64> {
        self.best.map(|i| self.fixed_points[i].a)
    }

    pub fn best(&self) -> Option<&FixedPoint> {
        self.best.map(|i| &self.fixed_points[i])
    }
}

/// Initial measure for a seed. Flow seeds start from one boundary with the
/// matched mean velocity and are bent linearly onto the other boundary.
pub fn seed_measure(b: &BoundaryPair, params: &ModelParams, seed: Seed, m: usize) -> Result<TransferMeasure> {
    let v: Vec<f64> = b.minus.iter().zip(&b.plus).map(|(x, y)| 0.5 * (y - x)).collect();
    let h = 2.0 / m as f64;
    let orbit = match seed {
        Seed::Straight => return Ok(TransferMeasure::straight(b, m)),
        Seed::ForwardFlow => {
            let start = PhasePoint::new(-1.0, b.minus.clone(), v)?;
            integrate(&params.potential, &start, 2.0, h)
        }
        Seed::BackwardFlow => {
            let start = PhasePoint::new(1.0, b.plus.clone(), v)?;
            let mut o = integrate(&params.potential, &start, -2.0, h);
            o.reverse();
            o
        }
    };
    let first = orbit[0].q.clone();
    let last = orbit[m].q.clone();
    let nodes = orbit
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let s = k as f64 / m as f64;
            (0..b.n())
                .map(|i| p.q[i] + (1.0 - s) * (b.minus[i] - first[i]) + s * (b.plus[i] - last[i]))
                .collect()
        })
        .collect();
    let bundle = DiscretePath {
        t0: -1.0,
        t1: 1.0,
        nodes,
    };
    Ok(TransferMeasure::from_bundle(b, &bundle))
}

fn iterate(
    start: TransferMeasure,
    seed: Seed,
    params: &ModelParams,
    topts: &TransportOptions,
    opts: &BvpOptions,
) -> FixedPoint {
    let mut delta = start;
    let mut residuals = vec![];
    let mut converged = false;
    let mut unconverged_paths = 0;
    for _ in 0..topts.max_iter {
        let (phi, bad) = minimal_transfer(&delta, params, opts);
        unconverged_paths = bad;
        let r = phi.distance(&delta);
        residuals.push(r);
        if r < topts.tol {
            delta = phi;
            converged = bad == 0;
            break;
        }
        delta = delta.blend(&phi, topts.damping);
    }
    let monotone = residuals.iter().skip(2).collect::<Vec<_>>().windows(2).all(|w| w[1] <= w[0]);
    let a = discrete_action(&delta.bundle(), params);
    FixedPoint {
        seed,
        measure: delta,
        a,
        residuals,
        converged,
        monotone,
        unconverged_paths,
    }
}

/// Damped fixed-point iteration from the three seeds.
pub fn self_consistent(
    b: &BoundaryPair,
    params: &ModelParams,
    topts: &TransportOptions,
    opts: &BvpOptions,
) -> Result<SelfConsistent> {
    if b.n() != params.n {
        return Err(Error::Dimension {
            expected: params.n,
            got: b.n(),
        });
    }
    if !(topts.damping > 0.0 && topts.damping <= 1.0) {
        return Err(Error::Validation(format!(
            "damping must lie in (0, 1], got {}",
            topts.damping
        )));
    }
    let mut fixed_points = vec![];
    for seed in [Seed::Straight, Seed::ForwardFlow, Seed::BackwardFlow] {
        let start = seed_measure(b, params, seed, topts.steps)?;
        fixed_points.push(iterate(start, seed, params, topts, opts));
    }
    let best = fixed_points
        .iter()
        .enumerate()
        .filter(|(_, f)| f.converged)
        .min_by(|x, y| x.1.a.partial_cmp(&y.1.a).unwrap())
        .map(|(i, _)| i);
    Ok(SelfConsistent { fixed_points, best })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActionGap {
    pub a: f64,
    pub b: f64,
    pub gap: f64,
    pub converged: bool,
}

/// Compares the action of `sigma` with the self-consistent value of its
/// boundary pair.
pub fn action_gap(
    sigma: &DiscretePath,
    params: &ModelParams,
    topts: &TransportOptions,
    opts: &BvpOptions,
) -> Result<ActionGap> {
    let boundary = BoundaryPair::new(sigma.start().to_vec(), sigma.end().to_vec())?;
    let b = discrete_action(sigma, params);
    let sc = self_consistent(&boundary, params, topts, opts)?;
    let (a, converged) = match sc.a() {
        Some(a) => (a, true),
        None => (
            sc.fixed_points.iter().map(|f| f.a).fold(f64::INFINITY, f64::min),
            false,
        ),
    };
    Ok(ActionGap {
        a,
        b,
        gap: (a - b).abs(),
        converged,
    })
}

/// Fixed-endpoint minimizer of `ℒ_c` over `[−1, 1]` between the boundary
/// lifts.
pub fn minimal_parametrization(
    b: &BoundaryPair,
    params: &ModelParams,
    opts: &BvpOptions,
) -> Result<DiscretePath> {
    Ok(minimize_bvp(&b.minus, &b.plus, (-1.0, 1.0), params, false, opts)?.path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn free(n: usize) -> ModelParams {
        ModelParams::new(n, 0.0, PotentialSpec::free()).unwrap()
    }

    #[test]
    fn matching_examples() {
        let b = BoundaryPair::new(vec![0.6, 0.1], vec![0.2, 0.7]).unwrap();
        let m = monotone_matching(&b);
        assert_eq!(m.pairs, vec![(0.1, 0.2), (0.6, 0.7)]);
        assert_abs_diff_eq!(m.cost, 0.01, epsilon = 1e-15);
        let same = BoundaryPair::new(vec![0.3, 0.4], vec![0.3, 0.4]).unwrap();
        assert_eq!(monotone_matching(&same).cost, 0.0);
        assert!(BoundaryPair::new(vec![0.0], vec![0.0, 0.5]).is_err());
        assert!(BoundaryPair::new(vec![0.0, 1.5], vec![0.0, 0.5]).is_err());
    }

    #[test]
    fn free_transfer_is_straight() {
        let b = BoundaryPair::new(vec![0.1, 0.6], vec![0.2, 0.7]).unwrap();
        let params = free(2);
        let sc = self_consistent(&b, &params, &TransportOptions::default(), &BvpOptions::default()).unwrap();
        let best = sc.best().unwrap();
        assert_eq!(best.residuals.len(), 1);
        assert_abs_diff_eq!(best.a, 0.0025, epsilon = 1e-12);
        assert_abs_diff_eq!(best.a, monotone_matching(&b).cost / 4.0, epsilon = 1e-12);
        assert!(best.measure.marginal_defect() == 0.0);
    }

    #[test]
    fn interacting_fixed_point_matches_the_minimizer() {
        let pot = PotentialSpec {
            v: PotentialSpec::pendulum(0.05).v,
            w: PotentialSpec::attractive_cosine(0.05).w,
            epsilon: 1.0,
        };
        let params = ModelParams::new(3, 0.2, pot).unwrap();
        let b = BoundaryPair::new(vec![0.05, 0.4, 0.8], vec![0.3, 0.75, 1.0]).unwrap();
        let opts = BvpOptions::default();
        let topts = TransportOptions::default();
        let sc = self_consistent(&b, &params, &topts, &opts).unwrap();
        let best = sc.best().unwrap();
        assert!(best.converged);
        assert!(best.residuals.len() < 50, "{}", best.residuals.len());
        assert!(*best.residuals.last().unwrap() < 1e-8);
        assert!(best.monotone);
        let sigma = minimal_parametrization(&b, &params, &opts).unwrap();
        let check = action_gap(&sigma, &params, &topts, &opts).unwrap();
        assert!(check.gap < 1e-4, "{check:?}");
        let shifted = DiscretePath {
            nodes: sigma.nodes.iter().map(|q| q.iter().map(|x| x + 2.0).collect()).collect(),
            ..sigma.clone()
        };
        let again = action_gap(&shifted, &params, &topts, &opts).unwrap();
        assert!((again.gap - check.gap).abs() < 1e-9);
        let r = window_radius(&b, &params.potential);
        assert!(best.measure.max_position() <= r);
        assert!(best.measure.max_speed() <= speed_bound(&b, &params.potential));
    }

    #[test]
    fn transfer_measures_are_closed() {
        let b = BoundaryPair::new(vec![0.0, 0.5], vec![0.4, 1.2]).unwrap();
        let params = ModelParams::new(2, 0.0, PotentialSpec::pendulum(0.2)).unwrap();
        let mu = seed_measure(&b, &params, Seed::ForwardFlow, 128).unwrap();
        assert!(mu.marginal_defect() < 1e-12);
        for (a, k, s) in [(1.0, 2.0, 0.3), (2.5, -1.0, 1.1), (0.5, 3.0, -0.7)] {
            let phi = move |t: f64, x: f64| {
                let arg = a * t + k * x + s;
                (arg.sin(), a * arg.cos(), k * arg.cos())
            };
            assert!(mu.closedness_defect(&phi) < 1e-3);
        }
    }
}
