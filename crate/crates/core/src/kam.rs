//! Periodic minimizers of prescribed rotation number, diophantine margins,
//! hull-function fits and velocity-graph Lipschitz estimates.
//!
//! An irrational rotation number is approached through its continued
//! fraction convergents `p/q`. A periodic minimizer carries `q` particles on
//! `[0, 1]` with `σ₁ x_i = σ₀ x_{i+p}` (plus one when the index wraps), so the
//! end configuration is the same class as the start and the mean
//! displacement is exactly `p/q`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::action::{path_action, DiscretePath, Lag, MeanField, Problem};
use crate::error::{Error, Result};
use crate::linalg::solve_spd;
use crate::model::{ModelParams, PotentialSpec};
use crate::torus::{circle_dist, frac};

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// Target rotation number, its approximant, and diophantine parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationSpec {
    pub omega: f64,
    pub p: i64,
    pub q: i64,
    pub gamma: f64,
    pub tau: f64,
}

impl RotationSpec {
    pub fn new(omega: f64, p: i64, q: i64, gamma: f64, tau: f64) -> Result<Self> {
        if q < 1 || gcd(p, q) != 1 {
            return Err(Error::Validation(format!("{p}/{q} is not in lowest terms")));
        }
        let qf = q as f64;
        if (omega - p as f64 / qf).abs() > 1.0 / (qf * qf) + 1e-15 {
            return Err(Error::Validation(format!(
                "{p}/{q} is not within 1/q² of {omega}"
            )));
        }
        Ok(Self {
            omega,
            p,
            q,
            gamma,
            tau,
        })
    }

    /// The first convergent of `omega` with denominator at least `min_q`.
    pub fn from_convergent(omega: f64, min_q: i64, gamma: f64, tau: f64) -> Result<Self> {
        let (p, q) = convergents(omega, 64)
            .into_iter()
            .find(|&(_, q)| q >= min_q)
            .ok_or_else(|| Error::Validation(format!("no convergent of {omega} reaches q = {min_q}")))?;
        Self::new(omega, p, q, gamma, tau)
    }

    pub fn golden(min_q: i64) -> Result<Self> {
        Self::from_convergent((5f64.sqrt() - 1.0) / 2.0, min_q, 0.2, 1.0)
    }

    pub fn ratio(&self) -> f64 {
        self.p as f64 / self.q as f64
    }
}

/// Convergents `p/q` of the continued fraction of `omega`, at most `count`.
pub fn convergents(omega: f64, count: usize) -> Vec<(i64, i64)> {
    let mut out = vec![];
    let (mut p0, mut q0, mut p1, mut q1) = (1i64, 0i64, omega.floor() as i64, 1i64);
    out.push((p1, q1));
    let mut x = omega - omega.floor();
    while out.len() < count && x > 1e-12 {
        x = 1.0 / x;
        let a = x.floor() as i64;
        x -= a as f64;
        let (p2, q2) = (a * p1 + p0, a * q1 + q0);
        if q2 > 1 << 40 {
            break;
        }
        out.push((p2, q2));
        (p0, q0, p1, q1) = (p1, q1, p2, q2);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiophantineReport {
    pub pass: bool,
    /// `min_q |ωq − p| q^τ / γ` with `p` the nearest integer.
    pub worst_margin: f64,
    pub worst_q: i64,
}

pub fn diophantine_check(spec: &RotationSpec, q_max: i64) -> DiophantineReport {
    let mut worst = (f64::INFINITY, 1);
    for q in 1..=q_max.max(1) {
        let x = spec.omega * q as f64;
        let margin = (x - x.round()).abs() * (q as f64).powf(spec.tau) / spec.gamma;
        if margin < worst.0 {
            worst = (margin, q);
        }
    }
    DiophantineReport {
        pass: worst.0 >= 1.0,
        worst_margin: worst.0,
        worst_q: worst.1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KamOptions {
    pub steps: usize,
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for KamOptions {
    fn default() -> Self {
        Self {
            steps: 64,
            grad_tol: 1e-10,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeriodicOrbitResult {
    pub spec: RotationSpec,
    pub path: DiscretePath,
    pub action: f64,
    /// Mean displacement over the period.
    pub rotation: f64,
    pub grad_norm: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl PeriodicOrbitResult {
    /// Largest violation of the end-class and mean-displacement constraints.
    pub fn constraint_defect(&self) -> f64 {
        let mut a: Vec<f64> = self.path.start().iter().map(|&x| frac(x)).collect();
        let mut b: Vec<f64> = self.path.end().iter().map(|&x| frac(x)).collect();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let class = a
            .iter()
            .zip(&b)
            .fold(0.0f64, |m, (x, y)| m.max(circle_dist(*x, *y)));
        class.max((self.rotation - self.spec.ratio()).abs())
    }
}

/// End configuration `σ₁` for a start `x` under the shift constraint.
fn shifted_end(x: &[f64], p: usize) -> Vec<f64> {
    let q = x.len();
    (0..q)
        .map(|i| {
            let j = i + p;
            x[j % q] + (j / q) as f64
        })
        .collect()
}

/// Minimizes the discrete `ℒ` action over paths on `[0, 1]` whose end is
/// tied to the start by the shift constraint.
pub fn periodic_minimizer(
    spec: &RotationSpec,
    potential: &PotentialSpec,
    opts: &KamOptions,
) -> Result<PeriodicOrbitResult> {
    if spec.q < 1 || opts.steps < 2 {
        return Err(Error::Validation("need q ≥ 1 and at least two time steps".into()));
    }
    let q = spec.q as usize;
    let p = spec.p.rem_euclid(spec.q) as usize;
    let wraps = spec.p.div_euclid(spec.q) as f64;
    let m = opts.steps;
    let params = ModelParams::new(q, 0.0, potential.clone())?;
    let field = MeanField {
        potential: &params.potential,
        n: q,
    };
    let lag = Lag::mean_field(&field, 0.0);
    let omega = spec.ratio();
    let start: Vec<f64> = (0..q).map(|i| i as f64 / q as f64).collect();
    let mut x: Vec<f64> = (0..m)
        .flat_map(|k| {
            let t = k as f64 / m as f64;
            start.iter().map(move |s| s + omega * t).collect::<Vec<_>>()
        })
        .collect();
    let gauge = potential.v.iter().all(|t| t.amplitude == 0.0) || potential.epsilon == 0.0;
    let sys = Periodic {
        lag,
        q,
        p,
        wraps,
        m,
        gauge,
    };
    let mut s = sys.action(&x);
    let mut g = sys.gradient(&x);
    let mut gn = max_abs(&g);
    let mut iterations = 0;
    let scale = lag.weight * m as f64;
    while iterations < opts.max_iter && gn > opts.grad_tol * 1e-2 {
        iterations += 1;
        let mut shift = 0.0;
        let mut accepted = false;
        for _ in 0..24 {
            let Some(dir) = sys.newton_step(&x, &g, shift) else {
                shift = if shift == 0.0 { 1e-6 * scale } else { shift * 10.0 };
                continue;
            };
            let slope: f64 = dir.iter().zip(&g).map(|(a, b)| a * b).sum();
            if slope >= 0.0 {
                shift = if shift == 0.0 { 1e-6 * scale } else { shift * 10.0 };
                continue;
            }
            let mut step = 1.0;
            while step > 1e-10 {
                let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
                let st = sys.action(&trial);
                if st <= s + 1e-4 * step * slope + 1e-13 * (1.0 + s.abs()) {
                    let gt = sys.gradient(&trial);
                    let gtn = max_abs(&gt);
                    if st <= s || gtn < gn {
                        x = trial;
                        s = st;
                        g = gt;
                        gn = gtn;
                        accepted = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if accepted || gn < opts.grad_tol {
                break;
            }
            shift = if shift == 0.0 { 1e-6 * scale } else { shift * 10.0 };
        }
        if !accepted {
            break;
        }
    }
    let path = sys.path(&x);
    let rotation = path.mean_displacement();
    Ok(PeriodicOrbitResult {
        spec: *spec,
        action: path_action(&path, &lag),
        path,
        rotation,
        grad_norm: gn,
        converged: gn < opts.grad_tol,
        iterations,
    })
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// The reduced problem in the nodes `0..m`; node `m` is `shifted_end(node 0)`.
struct Periodic<'a> {
    lag: Lag<'a>,
    q: usize,
    p: usize,
    wraps: f64,
    m: usize,
    /// Pin the first coordinate when the action is translation invariant.
    gauge: bool,
}

impl Periodic<'_> {
    fn full(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        let end: Vec<f64> = shifted_end(&x[..self.q], self.p).iter().map(|v| v + self.wraps).collect();
        out.extend(end);
        out
    }

    fn path(&self, x: &[f64]) -> DiscretePath {
        DiscretePath {
            t0: 0.0,
            t1: 1.0,
            nodes: self.full(x).chunks(self.q).map(|c| c.to_vec()).collect(),
        }
    }

    fn problem(&self) -> Problem<'_> {
        Problem::new(&self.path(&vec![0.0; self.m * self.q]), self.lag)
    }

    fn action(&self, x: &[f64]) -> f64 {
        self.problem().action(&self.full(x))
    }

    /// Index of node `m`'s coordinate `i` in node 0.
    fn source(&self, i: usize) -> usize {
        (i + self.p) % self.q
    }

    fn end_terms(&self, y: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let (q, m) = (self.q, self.m);
        let dt = 1.0 / m as f64;
        let mid = |k: usize| -> Vec<f64> { (0..q).map(|i| 0.5 * (y[k * q + i] + y[(k + 1) * q + i])).collect() };
        let (m0, m1) = (mid(0), mid(m - 1));
        let mut g0 = vec![0.0; q];
        let mut g1 = vec![0.0; q];
        self.lag.potential.gradient(0.5 * dt, &m0, &mut g0);
        self.lag.potential.gradient(1.0 - 0.5 * dt, &m1, &mut g1);
        let mut h0 = vec![0.0; q * q];
        let mut h1 = vec![0.0; q * q];
        self.lag.potential.hessian(0.5 * dt, &m0, &mut h0);
        self.lag.potential.hessian(1.0 - 0.5 * dt, &m1, &mut h1);
        (g0, g1, h0, h1)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let (q, m) = (self.q, self.m);
        let dt = 1.0 / m as f64;
        let w = self.lag.weight;
        let y = self.full(x);
        let interior = self.problem().gradient(&y);
        let (pg0, pg1, _, _) = self.end_terms(&y);
        let mut g = vec![0.0; m * q];
        g[q..].copy_from_slice(&interior);
        for i in 0..q {
            // node 0 and node m, whose coordinate i feeds node 0 at source(i)
            g[i] += w * (y[i] - y[q + i]) / dt - 0.5 * dt * pg0[i];
            let gm = w * (y[m * q + i] - y[(m - 1) * q + i]) / dt - 0.5 * dt * pg1[i];
            g[self.source(i)] += gm;
        }
        if self.gauge {
            g[0] = 0.0;
        }
        g
    }

    /// Newton direction for `H + shift·I` by a Schur complement on node 0.
    fn newton_step(&self, x: &[f64], g: &[f64], shift: f64) -> Option<Vec<f64>> {
        let (q, m) = (self.q, self.m);
        let dt = 1.0 / m as f64;
        let w = self.lag.weight;
        let y = self.full(x);
        let prob = self.problem();
        let t = prob.hessian(&y);
        let f = t.factor(shift)?;
        let (_, _, h0, h1) = self.end_terms(&y);
        // A = H₀₀ + Pᵀ H_mm P
        let mut a = vec![0.0; q * q];
        for r in 0..q {
            for c in 0..q {
                a[r * q + c] -= 0.25 * dt * h0[r * q + c];
                a[self.source(r) * q + self.source(c)] -= 0.25 * dt * h1[r * q + c];
            }
            a[r * q + r] += w / dt;
            a[self.source(r) * q + self.source(r)] += w / dt;
        }
        for r in 0..q {
            a[r * q + r] += shift;
        }
        // B: block row 1 is H₁₀, block row m − 1 is H_{m−1,m} P
        let len = (m - 1) * q;
        let bcol = |c: usize| -> Vec<f64> {
            let mut col = vec![0.0; len];
            for r in 0..q {
                col[r] = -0.25 * dt * h0[r * q + c] - if r == c { w / dt } else { 0.0 };
            }
            // column c of H_{m−1,m} P is column j of H_{m−1,m} with source(j) = c
            let j = (0..q).find(|&j| self.source(j) == c).expect("permutation");
            for r in 0..q {
                col[(m - 2) * q + r] += -0.25 * dt * h1[r * q + j] - if r == j { w / dt } else { 0.0 };
            }
            col
        };
        let cols: Vec<Vec<f64>> = (0..q).map(bcol).collect();
        let ys: Vec<Vec<f64>> = cols.iter().map(|c| f.solve(c)).collect();
        let z = f.solve(&g[q..]);
        let mut s = a;
        let mut rhs: Vec<f64> = g[..q].iter().map(|v| -v).collect();
        for r in 0..q {
            for c in 0..q {
                let dot: f64 = cols[r].iter().zip(&ys[c]).map(|(u, v)| u * v).sum();
                s[r * q + c] -= dot;
            }
            rhs[r] += cols[r].iter().zip(&z).map(|(u, v)| u * v).sum::<f64>();
        }
        if self.gauge {
            for k in 0..q {
                s[k] = 0.0;
                s[k * q] = 0.0;
            }
            s[0] = 1.0;
            rhs[0] = 0.0;
        }
        let d0 = solve_spd(&s, q, &rhs)?;
        let mut dir = d0.clone();
        for k in 0..len {
            let yd: f64 = (0..q).map(|c| ys[c][k] * d0[c]).sum();
            dir.push(-z[k] - yd);
        }
        Some(dir)
    }
}

/// Fourier fit of a hull function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HullFit {
    pub modes: usize,
    /// `a₀, a₁, b₁, …, a_K, b_K` of `φ(θ) = θ + a₀ + Σ a_k cos 2πkθ + b_k sin 2πkθ`.
    pub coefficients: Vec<f64>,
    /// Sup of `|σ_t x_i − φ(θ_i + ωt)|` over the samples.
    pub residual: f64,
    /// `φ′ > 0` at every sample phase.
    pub monotone: bool,
}

/// Default mode count `2⌈q/4⌉`.
pub fn default_modes(q: i64) -> usize {
    2 * ((q as usize + 3) / 4)
}

/// Least-squares fit of `σ_t x_i ≈ φ(i/q + (p/q) t)` over all nodes.
pub fn hull_residual(result: &PeriodicOrbitResult, modes: usize) -> HullFit {
    let path = &result.path;
    let q = path.n();
    let omega = result.spec.ratio();
    let mut rows = vec![];
    let mut vals = vec![];
    for (k, node) in path.nodes.iter().enumerate() {
        let t = path.time(k);
        for (i, &x) in node.iter().enumerate() {
            let th = i as f64 / q as f64 + omega * t;
            rows.push(th);
            vals.push(x - th);
        }
    }
    let cols = 1 + 2 * modes;
    let tau = std::f64::consts::TAU;
    let basis = |th: f64, j: usize| -> f64 {
        if j == 0 {
            1.0
        } else {
            let k = j.div_ceil(2) as f64;
            if j % 2 == 1 {
                (tau * k * th).cos()
            } else {
                (tau * k * th).sin()
            }
        }
    };
    let a = DMatrix::from_fn(rows.len(), cols, |r, c| basis(rows[r], c));
    let b = DVector::from_vec(vals.clone());
    let coef = a
        .clone()
        .svd(true, true)
        .solve(&b, 1e-12)
        .expect("SVD with both factors");
    let fitted = &a * &coef;
    let residual = fitted
        .iter()
        .zip(&vals)
        .fold(0.0f64, |m, (f, v)| m.max((f - v).abs()));
    let monotone = rows.iter().all(|&th| {
        let d: f64 = (1..=modes)
            .map(|k| {
                let kk = k as f64;
                tau * kk * (-coef[2 * k - 1] * (tau * kk * th).sin() + coef[2 * k] * (tau * kk * th).cos())
            })
            .sum();
        1.0 + d > 0.0
    });
    HullFit {
        modes,
        coefficients: coef.iter().cloned().collect(),
        residual,
        monotone,
    }
}

/// One point `(t, σ_t x, σ̇_t x)` of a velocity graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphSample {
    pub t: f64,
    pub x: f64,
    pub v: f64,
}

/// Samples of every particle at every node, velocities from the path.
pub fn graph_samples(path: &DiscretePath, params: &ModelParams) -> Vec<GraphSample> {
    let field = MeanField {
        potential: &params.potential,
        n: params.n,
    };
    let lag = Lag::mean_field(&field, params.c);
    let vels = path.velocities(&lag);
    let mut out = vec![];
    for (k, (node, vel)) in path.nodes.iter().zip(&vels).enumerate() {
        for (x, v) in node.iter().zip(vel) {
            out.push(GraphSample {
                t: path.time(k),
                x: *x,
                v: *v,
            });
        }
    }
    out
}

/// Largest `|Δv| / (|Δt| + circle distance)` over sample pairs whose base
/// distance falls in each band `[lo, hi]`.
pub fn velocity_graph_lipschitz(samples: &[GraphSample], bands: &[(f64, f64)]) -> Vec<f64> {
    let mut out = vec![0.0f64; bands.len()];
    for i in 0..samples.len() {
        for j in 0..i {
            let (a, b) = (&samples[i], &samples[j]);
            let d = (a.t - b.t).abs() + circle_dist(a.x, b.x);
            let dv = (a.v - b.v).abs();
            for (slot, (lo, hi)) in out.iter_mut().zip(bands) {
                if d >= *lo && d <= *hi {
                    *slot = slot.max(dv / d);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn kam_potential(eps: f64) -> PotentialSpec {
        PotentialSpec {
            v: PotentialSpec::pendulum(1.0).v,
            w: PotentialSpec::attractive_cosine(0.5).w,
            epsilon: eps,
        }
    }

    #[test]
    fn golden_convergents() {
        let c = convergents((5f64.sqrt() - 1.0) / 2.0, 9);
        assert_eq!(c, vec![(0, 1), (1, 1), (1, 2), (2, 3), (3, 5), (5, 8), (8, 13), (13, 21), (21, 34)]);
        let s = RotationSpec::golden(20).unwrap();
        assert_eq!((s.p, s.q), (13, 21));
        assert!(RotationSpec::new(0.5, 2, 4, 0.1, 1.0).is_err());
        assert!(RotationSpec::new(0.618, 1, 3, 0.1, 1.0).is_err());
    }

    #[test]
    fn diophantine_examples() {
        let half = RotationSpec::new(0.5, 1, 2, 0.1, 1.0).unwrap();
        let r = diophantine_check(&half, 10);
        assert!(!r.pass);
        assert_eq!(r.worst_q, 2);
        let g = RotationSpec::golden(1).unwrap();
        assert!(diophantine_check(&g, 10_000).pass);
        let third = RotationSpec::new(1.0 / 3.0, 1, 3, 0.01, 2.0).unwrap();
        let r = diophantine_check(&third, 50);
        assert!(!r.pass && r.worst_q == 3);
    }

    #[test]
    fn free_minimizer_is_the_rigid_rotation() {
        for (p, q) in [(1, 2), (2, 5), (13, 21)] {
            let spec = RotationSpec::new(p as f64 / q as f64, p, q, 0.1, 1.0).unwrap();
            let r = periodic_minimizer(&spec, &kam_potential(0.0), &KamOptions::default()).unwrap();
            assert!(r.converged);
            let w = p as f64 / q as f64;
            assert_abs_diff_eq!(r.action, 0.5 * w * w, epsilon = 1e-12);
            assert!(r.constraint_defect() < 1e-12);
            assert!(hull_residual(&r, default_modes(q)).residual < 1e-12);
        }
    }

    #[test]
    fn perturbed_minimizers() {
        let spec = RotationSpec::golden(8).unwrap();
        let opts = KamOptions::default();
        let r0 = periodic_minimizer(&spec, &kam_potential(0.0), &opts).unwrap();
        let mut last = 0.0;
        for eps in [1e-3, 1e-2] {
            let pot = kam_potential(eps);
            let r = periodic_minimizer(&spec, &pot, &opts).unwrap();
            assert!(r.converged, "{eps} {}", r.grad_norm);
            assert!(r.constraint_defect() < 1e-12);
            assert!(r.path.min_gap() > 0.0);
            let bound = 2.0 * (pot.v_sup(0) + pot.w_sup(0));
            assert!((r.action - r0.action).abs() <= bound);
            let fit = hull_residual(&r, default_modes(spec.q));
            assert!(fit.monotone);
            assert!(fit.residual > last);
            last = fit.residual;
        }
    }

    #[test]
    fn hull_residual_ignores_labels() {
        let spec = RotationSpec::golden(5).unwrap();
        let r = periodic_minimizer(&spec, &kam_potential(0.05), &KamOptions::default()).unwrap();
        let fit = hull_residual(&r, 2);
        let mut moved = r.clone();
        moved.path = r.path.relabeled(&[1, 2, 3, 4, 0], &[0.0, 0.0, 0.0, 0.0, 1.0]);
        let again = hull_residual(&moved, 2);
        assert!((fit.residual - again.residual).abs() < 1e-10);
    }

    #[test]
    fn rigid_rotation_graph_is_flat() {
        let path = DiscretePath::straight(&[0.0, 0.5], &[0.3, 0.8], 0.0, 1.0, 16);
        let params = ModelParams::new(2, 0.0, PotentialSpec::free()).unwrap();
        let s = graph_samples(&path, &params);
        let l = velocity_graph_lipschitz(&s, &[(0.01, 0.1), (0.1, 1.0)]);
        assert!(l.iter().all(|x| *x < 1e-9));
    }
}
