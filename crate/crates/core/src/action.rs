//! Discrete action functionals, their exact gradients, and fixed-endpoint
//! minimization.
//!
//! Paths live on a uniform time grid. The action uses the midpoint rule:
//! each segment contributes `Δt · L(t_{k+½}, (q_k + q_{k+1})/2, (q_{k+1} − q_k)/Δt)`.
//! Under this rule the `−c⟨1, v⟩` term telescopes to `−c` times the mean
//! displacement, and it is evaluated that way so the identity is exact.
//!
//! Minimization runs a damped Newton iteration on the interior nodes. The
//! Hessian of a midpoint action is block tridiagonal, so every step is a block
//! Cholesky solve. Indefinite Hessians get a Levenberg shift; critical points
//! that are not local minima are detected after convergence and escaped by
//! perturbing along the lowest bump mode.

use serde::{Deserialize, Serialize};

use crate::dynamics::apriori_bounds;
use crate::error::{Error, Result};
use crate::linalg::BlockTridiag;
use crate::model::{force_into, mean_potential_hessian_into, ModelParams, PotentialSpec};
use crate::torus::{cyclic_relabel, ConfigurationClass, TOL};

/// A potential term `P(t, q)` entering a Lagrangian `w (½|v|² − c Σv) − P`.
pub trait PathPotential: Sync {
    fn dim(&self) -> usize;
    fn value(&self, t: f64, q: &[f64]) -> f64;
    fn gradient(&self, t: f64, q: &[f64], out: &mut [f64]);
    /// Row-major `dim × dim` Hessian.
    fn hessian(&self, t: f64, q: &[f64], out: &mut [f64]);
}

/// `V̄ + W̄` for `n` particles.
pub struct MeanField<'a> {
    pub potential: &'a PotentialSpec,
    pub n: usize,
}

impl PathPotential for MeanField<'_> {
    fn dim(&self) -> usize {
        self.n
    }

    fn value(&self, t: f64, q: &[f64]) -> f64 {
        let (v, w) = crate::model::eval_mean_potentials(self.potential, t, q);
        v + w
    }

    fn gradient(&self, t: f64, q: &[f64], out: &mut [f64]) {
        force_into(self.potential, t, q, out);
        let n = self.n as f64;
        out.iter_mut().for_each(|x| *x = -*x / n);
    }

    fn hessian(&self, t: f64, q: &[f64], out: &mut [f64]) {
        mean_potential_hessian_into(self.potential, t, q, out);
    }
}

/// Lagrangian `weight · Σ_i (½ v_i² − c v_i) − P(t, q)`.
#[derive(Clone, Copy)]
pub struct Lag<'a> {
    pub weight: f64,
    pub c: f64,
    pub potential: &'a dyn PathPotential,
}

impl<'a> Lag<'a> {
    pub fn mean_field(field: &'a MeanField<'a>, c: f64) -> Self {
        Self {
            weight: 1.0 / field.n as f64,
            c,
            potential: field,
        }
    }

    pub fn with_c(self, c: f64) -> Self {
        Self { c, ..self }
    }

    fn velocity_correction(&self, t: f64, q: &[f64], dt: f64, sign: f64, out: &mut [f64]) {
        self.potential.gradient(t, q, out);
        let s = sign * dt / (2.0 * self.weight);
        out.iter_mut().for_each(|x| *x *= s);
    }
}

/// A uniform time grid with one lifted configuration per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePath {
    pub t0: f64,
    pub t1: f64,
    pub nodes: Vec<Vec<f64>>,
}

impl DiscretePath {
    pub fn new(t0: f64, t1: f64, nodes: Vec<Vec<f64>>) -> Result<Self> {
        if !(t1 > t0) {
            return Err(Error::Validation(format!("empty time span [{t0}, {t1}]")));
        }
        if nodes.len() < 2 {
            return Err(Error::Validation("a path needs at least two nodes".into()));
        }
        let n = nodes[0].len();
        if let Some(bad) = nodes.iter().find(|q| q.len() != n) {
            return Err(Error::Dimension {
                expected: n,
                got: bad.len(),
            });
        }
        for end in [&nodes[0], &nodes[nodes.len() - 1]] {
            crate::torus::Configuration::new_mon3(end.clone())?;
        }
        Ok(Self { t0, t1, nodes })
    }

    /// Straight segment from `a` to `b` with `m` steps.
    pub fn straight(a: &[f64], b: &[f64], t0: f64, t1: f64, m: usize) -> Self {
        let m = m.max(1);
        let mut nodes: Vec<Vec<f64>> = (0..m)
            .map(|k| {
                let s = k as f64 / m as f64;
                a.iter().zip(b).map(|(x, y)| x + s * (y - x)).collect()
            })
            .collect();
        nodes.push(b.to_vec());
        Self { t0, t1, nodes }
    }

    pub fn m(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn n(&self) -> usize {
        self.nodes[0].len()
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.m() as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt()
    }

    pub fn start(&self) -> &[f64] {
        &self.nodes[0]
    }

    pub fn end(&self) -> &[f64] {
        &self.nodes[self.m()]
    }

    /// Mean displacement `(1/n) Σ (q_m − q_0)`.
    pub fn mean_displacement(&self) -> f64 {
        self.end()
            .iter()
            .zip(self.start())
            .map(|(b, a)| b - a)
            .sum::<f64>()
            / self.n() as f64
    }

    /// Doubles the time resolution by linear interpolation.
    pub fn refined(&self) -> Self {
        let mut nodes = Vec::with_capacity(2 * self.m() + 1);
        for k in 0..self.m() {
            let a = &self.nodes[k];
            let b = &self.nodes[k + 1];
            nodes.push(a.clone());
            nodes.push(a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect());
        }
        nodes.push(self.end().to_vec());
        Self {
            t0: self.t0,
            t1: self.t1,
            nodes,
        }
    }

    /// Applies `q ↦ q[perm[i]] + shift[i]` to every node, keeping time.
    pub fn relabeled(&self, perm: &[usize], shift: &[f64]) -> Self {
        let nodes = self
            .nodes
            .iter()
            .map(|q| perm.iter().zip(shift).map(|(&j, s)| q[j] + s).collect())
            .collect();
        Self {
            t0: self.t0,
            t1: self.t1,
            nodes,
        }
    }

    /// Shifts the time axis.
    pub fn retimed(&self, t0: f64) -> Self {
        Self {
            t0,
            t1: t0 + (self.t1 - self.t0),
            nodes: self.nodes.clone(),
        }
    }

    /// Velocity at the first node from the discrete Legendre transform.
    pub fn start_velocity(&self, lag: &Lag) -> Vec<f64> {
        let dt = self.dt();
        let n = self.n();
        let mid = midpoint(&self.nodes[0], &self.nodes[1]);
        let mut corr = vec![0.0; n];
        lag.velocity_correction(self.t0 + 0.5 * dt, &mid, dt, 1.0, &mut corr);
        (0..n)
            .map(|i| (self.nodes[1][i] - self.nodes[0][i]) / dt + corr[i])
            .collect()
    }

    /// Velocity at the last node from the discrete Legendre transform.
    pub fn end_velocity(&self, lag: &Lag) -> Vec<f64> {
        let dt = self.dt();
        let m = self.m();
        let n = self.n();
        let mid = midpoint(&self.nodes[m - 1], &self.nodes[m]);
        let mut corr = vec![0.0; n];
        lag.velocity_correction(self.t1 - 0.5 * dt, &mid, dt, -1.0, &mut corr);
        (0..n)
            .map(|i| (self.nodes[m][i] - self.nodes[m - 1][i]) / dt + corr[i])
            .collect()
    }

    /// Velocities at every node: Legendre transform at the ends, central
    /// differences inside.
    pub fn velocities(&self, lag: &Lag) -> Vec<Vec<f64>> {
        let m = self.m();
        let dt = self.dt();
        let mut out = Vec::with_capacity(m + 1);
        out.push(self.start_velocity(lag));
        for k in 1..m {
            out.push(
                self.nodes[k + 1]
                    .iter()
                    .zip(&self.nodes[k - 1])
                    .map(|(b, a)| (b - a) / (2.0 * dt))
                    .collect(),
            );
        }
        out.push(self.end_velocity(lag));
        out
    }

    /// Smallest consecutive gap over all nodes (negative when particles cross).
    pub fn min_gap(&self) -> f64 {
        self.nodes
            .iter()
            .flat_map(|q| q.windows(2).map(|w| w[1] - w[0]))
            .fold(f64::INFINITY, f64::min)
    }
}

fn midpoint(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()
}

/// Midpoint-rule action of a path under a general Lagrangian.
pub fn path_action(path: &DiscretePath, lag: &Lag) -> f64 {
    let dt = path.dt();
    let mut s = 0.0;
    let mut mid = vec![0.0; path.n()];
    for k in 0..path.m() {
        let a = &path.nodes[k];
        let b = &path.nodes[k + 1];
        let mut kin = 0.0;
        for i in 0..a.len() {
            let v = (b[i] - a[i]) / dt;
            kin += v * v;
            mid[i] = 0.5 * (a[i] + b[i]);
        }
        let t = path.t0 + (k as f64 + 0.5) * dt;
        s += dt * (0.5 * lag.weight * kin - lag.potential.value(t, &mid));
    }
    let disp: f64 = path.end().iter().zip(path.start()).map(|(b, a)| b - a).sum();
    s - lag.c * lag.weight * disp
}

/// The discrete `ℒ_c` action of an `n`-particle path.
pub fn discrete_action(path: &DiscretePath, params: &ModelParams) -> f64 {
    let field = MeanField {
        potential: &params.potential,
        n: params.n,
    };
    path_action(path, &Lag::mean_field(&field, params.c))
}

/// Gradient of the discrete action with respect to the interior nodes.
pub fn action_gradient(path: &DiscretePath, params: &ModelParams) -> Vec<Vec<f64>> {
    let field = MeanField {
        potential: &params.potential,
        n: params.n,
    };
    let lag = Lag::mean_field(&field, params.c);
    let flat = Problem::new(path, lag).gradient(&flatten(path));
    flat.chunks(path.n()).map(|c| c.to_vec()).collect()
}

/// Max-norm residual of `q̈ = force` measured by second differences at the
/// interior nodes, with the force averaged over the adjacent midpoints.
pub fn el_residual(path: &DiscretePath, potential: &PotentialSpec) -> f64 {
    let dt = path.dt();
    let n = path.n();
    let mut worst: f64 = 0.0;
    let mut fa = vec![0.0; n];
    let mut fb = vec![0.0; n];
    for k in 1..path.m() {
        let (p, q, r) = (&path.nodes[k - 1], &path.nodes[k], &path.nodes[k + 1]);
        force_into(potential, path.t0 + (k as f64 - 0.5) * dt, &midpoint(p, q), &mut fa);
        force_into(potential, path.t0 + (k as f64 + 0.5) * dt, &midpoint(q, r), &mut fb);
        for i in 0..n {
            let acc = (r[i] - 2.0 * q[i] + p[i]) / (dt * dt);
            worst = worst.max((acc - 0.5 * (fa[i] + fb[i])).abs());
        }
    }
    worst
}

fn flatten(path: &DiscretePath) -> Vec<f64> {
    path.nodes.iter().flatten().copied().collect()
}

/// Flat-storage view of a fixed-endpoint problem.
pub(crate) struct Problem<'a> {
    lag: Lag<'a>,
    t0: f64,
    dt: f64,
    m: usize,
    d: usize,
}

impl<'a> Problem<'a> {
    pub(crate) fn new(path: &DiscretePath, lag: Lag<'a>) -> Self {
        Self {
            lag,
            t0: path.t0,
            dt: path.dt(),
            m: path.m(),
            d: path.n(),
        }
    }

    fn node<'b>(&self, x: &'b [f64], k: usize) -> &'b [f64] {
        &x[k * self.d..(k + 1) * self.d]
    }

    pub(crate) fn action(&self, x: &[f64]) -> f64 {
        let (d, dt) = (self.d, self.dt);
        let mut s = 0.0;
        let mut mid = vec![0.0; d];
        for k in 0..self.m {
            let a = self.node(x, k);
            let b = self.node(x, k + 1);
            let mut kin = 0.0;
            for i in 0..d {
                let v = (b[i] - a[i]) / dt;
                kin += v * v;
                mid[i] = 0.5 * (a[i] + b[i]);
            }
            s += dt
                * (0.5 * self.lag.weight * kin
                    - self.lag.potential.value(self.t0 + (k as f64 + 0.5) * dt, &mid));
        }
        let disp: f64 = (0..d).map(|i| x[self.m * d + i] - x[i]).sum();
        s - self.lag.c * self.lag.weight * disp
    }

    fn midpoint_gradients(&self, x: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut out = vec![0.0; self.m * d];
        let mut mid = vec![0.0; d];
        for k in 0..self.m {
            let a = self.node(x, k);
            let b = self.node(x, k + 1);
            for i in 0..d {
                mid[i] = 0.5 * (a[i] + b[i]);
            }
            let t = self.t0 + (k as f64 + 0.5) * self.dt;
            self.lag
                .potential
                .gradient(t, &mid, &mut out[k * d..(k + 1) * d]);
        }
        out
    }

    /// Gradient over the interior nodes `1..m`, stacked.
    pub(crate) fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let (d, dt, w) = (self.d, self.dt, self.lag.weight);
        let pg = self.midpoint_gradients(x);
        let mut g = vec![0.0; (self.m - 1) * d];
        for k in 1..self.m {
            let (p, q, r) = (self.node(x, k - 1), self.node(x, k), self.node(x, k + 1));
            for i in 0..d {
                g[(k - 1) * d + i] = w * (2.0 * q[i] - p[i] - r[i]) / dt
                    - 0.5 * dt * (pg[(k - 1) * d + i] + pg[k * d + i]);
            }
        }
        g
    }

    pub(crate) fn hessian(&self, x: &[f64]) -> BlockTridiag {
        let (d, dt, w) = (self.d, self.dt, self.lag.weight);
        let mut hs = vec![0.0; self.m * d * d];
        let mut mid = vec![0.0; d];
        for k in 0..self.m {
            let a = self.node(x, k);
            let b = self.node(x, k + 1);
            for i in 0..d {
                mid[i] = 0.5 * (a[i] + b[i]);
            }
            let t = self.t0 + (k as f64 + 0.5) * dt;
            self.lag
                .potential
                .hessian(t, &mid, &mut hs[k * d * d..(k + 1) * d * d]);
        }
        let blocks = self.m - 1;
        let mut h = BlockTridiag::new(d, blocks);
        for j in 0..blocks {
            // interior node k = j + 1 touches midpoints k − 1 and k
            let (ha, hb) = (&hs[j * d * d..(j + 1) * d * d], &hs[(j + 1) * d * d..(j + 2) * d * d]);
            let dg = h.diag_mut(j);
            for r in 0..d {
                for c in 0..d {
                    dg[r * d + c] = -0.25 * dt * (ha[r * d + c] + hb[r * d + c]);
                }
                dg[r * d + r] += 2.0 * w / dt;
            }
            if j + 1 < blocks {
                let up = h.upper_mut(j);
                for r in 0..d {
                    for c in 0..d {
                        up[r * d + c] = -0.25 * dt * hb[r * d + c];
                    }
                    up[r * d + r] -= w / dt;
                }
            }
        }
        h
    }

    pub(crate) fn kinetic_scale(&self) -> f64 {
        self.lag.weight / self.dt
    }
}

/// Tolerances and resolution of the boundary-value solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BvpOptions {
    /// Time steps per unit time at each refinement level.
    pub levels: Vec<usize>,
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Candidates whose coarse action is within this margin of the best are
    /// carried to the finer levels.
    pub refine_margin: f64,
}

impl Default for BvpOptions {
    fn default() -> Self {
        Self {
            levels: vec![16, 32, 64],
            grad_tol: 1e-8,
            max_iter: 500,
            refine_margin: 5e-3,
        }
    }
}

impl BvpOptions {
    /// Finest step count for a span.
    pub fn steps_for(&self, span: f64, level: usize) -> usize {
        ((self.levels[level] as f64 * span).round() as usize).max(1)
    }

    pub fn finest_dt(&self) -> f64 {
        1.0 / *self.levels.last().expect("at least one level") as f64
    }

    fn degenerate(&self, span: f64) -> bool {
        span < 4.0 * self.finest_dt()
    }
}

/// Outcome of a Newton solve on one time grid.
#[derive(Debug, Clone)]
pub(crate) struct Solved {
    pub path: DiscretePath,
    pub action: f64,
    pub grad_norm: f64,
    pub converged: bool,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

/// Damped Newton iteration on the interior nodes.
fn newton(path: DiscretePath, lag: Lag, opts: &BvpOptions) -> (Solved, bool) {
    if path.m() < 2 {
        let action = path_action(&path, &lag);
        return (
            Solved {
                path,
                action,
                grad_norm: 0.0,
                converged: true,
            },
            true,
        );
    }
    let prob = Problem::new(&path, lag);
    let d = prob.d;
    let mut x = flatten(&path);
    let mut s = prob.action(&x);
    let mut g = prob.gradient(&x);
    let mut gn = max_abs(&g);
    let stop = opts.grad_tol * 1e-2;
    let scale = prob.kinetic_scale();
    let mut iterations = 0;
    while iterations < opts.max_iter && gn > stop {
        iterations += 1;
        let h = prob.hessian(&x);
        let mut shift = 0.0;
        let mut accepted = false;
        for _ in 0..24 {
            let Some(f) = h.factor(shift) else {
                shift = if shift == 0.0 { 1e-6 * scale } else { shift * 10.0 };
                continue;
            };
            let dir: Vec<f64> = f.solve(&g).into_iter().map(|v| -v).collect();
            let slope: f64 = dir.iter().zip(&g).map(|(a, b)| a * b).sum();
            if slope >= 0.0 {
                shift = if shift == 0.0 { 1e-6 * scale } else { shift * 10.0 };
                continue;
            }
            let mut alpha = 1.0;
            while alpha > 1e-10 {
                let mut trial = x.clone();
                for (i, di) in dir.iter().enumerate() {
                    trial[d + i] += alpha * di;
                }
                let st = prob.action(&trial);
                let slack = 1e-13 * (1.0 + s.abs());
                if st <= s + 1e-4 * alpha * slope + slack {
                    let gt = prob.gradient(&trial);
                    let gtn = max_abs(&gt);
                    // reject round-off level increases once the action stalls
                    if st <= s || gtn < gn {
                        x = trial;
                        s = st;
                        g = gt;
                        gn = gtn;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
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
    let pd = prob.hessian(&x).factor(0.0).is_some();
    let nodes = x.chunks(d).map(|c| c.to_vec()).collect();
    let path = DiscretePath {
        t0: path.t0,
        t1: path.t1,
        nodes,
    };
    (
        Solved {
            path,
            action: s,
            grad_norm: gn,
            converged: gn < opts.grad_tol,
        },
        pd,
    )
}

/// Newton solve that escapes saddle points through bump perturbations.
pub(crate) fn solve_path(path: DiscretePath, lag: Lag, opts: &BvpOptions) -> Solved {
    let (mut best, pd) = newton(path, lag, opts);
    if pd || best.path.m() < 2 {
        return best;
    }
    let n = best.path.n();
    let m = best.path.m();
    let mut dirs: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    if n > 1 {
        dirs.push(vec![1.0; n]);
    }
    for _round in 0..3 {
        let base = best.path.clone();
        let mut improved = false;
        for dir in &dirs {
            for sign in [1.0, -1.0] {
                let mut p = base.clone();
                for k in 1..m {
                    let bump = 0.1 * sign * (std::f64::consts::PI * k as f64 / m as f64).sin();
                    for i in 0..n {
                        p.nodes[k][i] += bump * dir[i];
                    }
                }
                let (cand, _) = newton(p, lag, opts);
                if cand.converged && cand.action < best.action - 1e-12 {
                    best = cand;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
        let prob = Problem::new(&best.path, lag);
        if prob.hessian(&flatten(&best.path)).factor(0.0).is_some() {
            break;
        }
    }
    best
}

/// Solves on the coarsest level, starting from the straight segment.
pub(crate) fn solve_coarse(a: &[f64], b: &[f64], t0: f64, t1: f64, lag: Lag, opts: &BvpOptions) -> Solved {
    let span = t1 - t0;
    if opts.degenerate(span) {
        return newton(DiscretePath::straight(a, b, t0, t1, 1), lag, opts).0;
    }
    let m = opts.steps_for(span, 0);
    solve_path(DiscretePath::straight(a, b, t0, t1, m), lag, opts)
}

/// Carries a coarse solution through the remaining refinement levels.
pub(crate) fn solve_refine(coarse: &Solved, lag: Lag, opts: &BvpOptions) -> Solved {
    let span = coarse.path.t1 - coarse.path.t0;
    if opts.degenerate(span) {
        return coarse.clone();
    }
    let mut cur = coarse.clone();
    for level in 1..opts.levels.len() {
        let target = opts.steps_for(span, level);
        let mut p = cur.path.clone();
        while p.m() * 2 <= target {
            p = p.refined();
        }
        if p.m() != target {
            p = DiscretePath::straight(p.start(), p.end(), p.t0, p.t1, target);
        }
        cur = solve_path(p, lag, opts);
    }
    cur
}

/// Result of a fixed-endpoint minimization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BvpResult {
    pub path: DiscretePath,
    pub action: f64,
    /// Integer shift added to the target lift.
    pub shift: Vec<i64>,
    /// Cyclic relabeling applied to the target before shifting.
    pub relabel: usize,
    pub converged: bool,
    pub grad_norm: f64,
}

/// A target lift for the endpoint search.
#[derive(Debug, Clone)]
pub(crate) struct Target {
    pub lift: Vec<f64>,
    pub relabel: usize,
    pub shift: Vec<i64>,
}

/// Integer vectors `k` with `|k_i| ≤ window` keeping `b + k` sorted with
/// spread at most three.
pub(crate) fn shift_vectors(b: &[f64], window: i64) -> Vec<Vec<i64>> {
    fn rec(b: &[f64], window: i64, cur: &mut Vec<i64>, out: &mut Vec<Vec<i64>>) {
        let i = cur.len();
        if i == b.len() {
            out.push(cur.clone());
            return;
        }
        for k in -window..=window {
            let y = b[i] + k as f64;
            if i > 0 {
                let prev = b[i - 1] + cur[i - 1] as f64;
                if y < prev - TOL {
                    continue;
                }
                let first = b[0] + cur[0] as f64;
                if y - first > 3.0 + TOL {
                    continue;
                }
            }
            cur.push(k);
            rec(b, window, cur, out);
            cur.pop();
        }
    }
    let mut out = vec![];
    rec(b, window, &mut Vec::with_capacity(b.len()), &mut out);
    out
}

/// Width of the integer-shift window for a span.
pub fn shift_window(params: &ModelParams, span: f64) -> i64 {
    (apriori_bounds(params).r_c * span).ceil() as i64 + 1
}

pub(crate) fn targets_for(b: &[f64], relabels: usize, window: i64) -> Vec<Target> {
    let mut out = vec![];
    for r in 0..relabels {
        let base = cyclic_relabel(b, r);
        for k in shift_vectors(&base, window) {
            let lift = base.iter().zip(&k).map(|(x, z)| x + *z as f64).collect();
            out.push(Target {
                lift,
                relabel: r,
                shift: k,
            });
        }
    }
    out
}

fn tie_key(t: &Target) -> (Vec<i64>, usize) {
    (t.shift.iter().map(|k| k.abs()).collect(), t.relabel)
}

/// Lower bound on the discrete action of any path from `a` to `b` over
/// `span`: exact kinetic minimum, exact drift term, potential at its sup.
pub(crate) fn action_lower_bound(a: &[f64], b: &[f64], span: f64, weight: f64, c: f64, psup: f64) -> f64 {
    let mut kin = 0.0;
    let mut disp = 0.0;
    for (x, y) in a.iter().zip(b) {
        kin += (y - x) * (y - x);
        disp += y - x;
    }
    0.5 * weight * kin / span - c * weight * disp - span * psup
}

/// Branch-and-bound over the target lifts of one endpoint pair.
///
/// Fixed-endpoint minimizers do not depend on `c`, so every solve runs at
/// `c = 0` and is memoized; the `c` term is added per query.
pub(crate) struct PairSolver<'a> {
    a: &'a [f64],
    targets: Vec<Target>,
    t0: f64,
    t1: f64,
    lag0: Lag<'a>,
    opts: &'a BvpOptions,
    lb0: Vec<f64>,
    disp: Vec<f64>,
    coarse: Vec<Option<Solved>>,
    fine: Vec<Option<Solved>>,
}

impl<'a> PairSolver<'a> {
    pub(crate) fn new(
        a: &'a [f64],
        targets: Vec<Target>,
        t0: f64,
        t1: f64,
        lag: Lag<'a>,
        psup: f64,
        opts: &'a BvpOptions,
    ) -> Self {
        let span = t1 - t0;
        let lb0 = targets
            .iter()
            .map(|t| action_lower_bound(a, &t.lift, span, lag.weight, 0.0, psup))
            .collect();
        let disp = targets
            .iter()
            .map(|t| t.lift.iter().zip(a).map(|(b, a)| b - a).sum())
            .collect();
        let k = targets.len();
        Self {
            a,
            targets,
            t0,
            t1,
            lag0: lag.with_c(0.0),
            opts,
            lb0,
            disp,
            coarse: vec![None; k],
            fine: vec![None; k],
        }
    }

    fn with_c(&self, s0: f64, i: usize, c: f64) -> f64 {
        s0 - c * self.lag0.weight * self.disp[i]
    }

    fn coarse(&mut self, i: usize) -> f64 {
        if self.coarse[i].is_none() {
            let s = solve_coarse(self.a, &self.targets[i].lift, self.t0, self.t1, self.lag0, self.opts);
            self.coarse[i] = Some(s);
        }
        self.coarse[i].as_ref().unwrap().action
    }

    pub(crate) fn fine(&mut self, i: usize) -> &Solved {
        if self.fine[i].is_none() {
            self.coarse(i);
            let s = solve_refine(self.coarse[i].as_ref().unwrap(), self.lag0, self.opts);
            self.fine[i] = Some(s);
        }
        self.fine[i].as_ref().unwrap()
    }

    /// Index of the minimizing target at `c` and its action.
    pub(crate) fn best(&mut self, c: f64) -> (usize, f64) {
        let mut order: Vec<(f64, usize)> = (0..self.targets.len())
            .map(|i| (self.with_c(self.lb0[i], i, c), i))
            .collect();
        order.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
        let margin = self.opts.refine_margin;
        let mut best = f64::INFINITY;
        let mut candidates = vec![];
        for &(lb, i) in &order {
            if lb > best + margin {
                break;
            }
            let s0 = self.coarse(i);
            let s = self.with_c(s0, i, c);
            best = best.min(s);
            candidates.push((i, s));
        }
        let mut winner: Option<(usize, f64)> = None;
        for (i, s) in candidates {
            if s > best + margin {
                continue;
            }
            let f0 = self.fine(i).action;
            let f = self.with_c(f0, i, c);
            let better = match winner {
                None => true,
                Some((j, w)) => {
                    if (f - w).abs() <= 1e-12 {
                        tie_key(&self.targets[i]) < tie_key(&self.targets[j])
                    } else {
                        f < w
                    }
                }
            };
            if better {
                winner = Some((i, f));
            }
        }
        winner.expect("at least one candidate is solved")
    }

    pub(crate) fn result(&mut self, i: usize, c: f64) -> BvpResult {
        let s = self.fine(i).clone();
        let action = self.with_c(s.action, i, c);
        BvpResult {
            path: s.path,
            action,
            shift: self.targets[i].shift.clone(),
            relabel: self.targets[i].relabel,
            converged: s.converged,
            grad_norm: s.grad_norm,
        }
    }
}

pub(crate) fn search_targets(
    a: &[f64],
    targets: Vec<Target>,
    t0: f64,
    t1: f64,
    lag: Lag,
    psup: f64,
    opts: &BvpOptions,
) -> BvpResult {
    let c = lag.c;
    let mut solver = PairSolver::new(a, targets, t0, t1, lag, psup, opts);
    let (i, _) = solver.best(c);
    solver.result(i, c)
}

/// Minimizes the `ℒ_c` action between `ma` and `mb` (or `mb + k` for
/// integer `k` inside the a priori window when shifts are allowed).
pub fn minimize_bvp(
    ma: &[f64],
    mb: &[f64],
    t_span: (f64, f64),
    params: &ModelParams,
    allow_integer_shifts: bool,
    opts: &BvpOptions,
) -> Result<BvpResult> {
    for e in [ma, mb] {
        if e.len() != params.n {
            return Err(Error::Dimension {
                expected: params.n,
                got: e.len(),
            });
        }
        crate::torus::Configuration::new_mon3(e.to_vec())?;
    }
    let (t0, t1) = t_span;
    if !(t1 > t0) {
        return Err(Error::Validation(format!("empty time span [{t0}, {t1}]")));
    }
    let field = MeanField {
        potential: &params.potential,
        n: params.n,
    };
    let lag = Lag::mean_field(&field, params.c);
    let targets = if allow_integer_shifts {
        targets_for(mb, 1, shift_window(params, t1 - t0))
    } else {
        vec![Target {
            lift: mb.to_vec(),
            relabel: 0,
            shift: vec![0; mb.len()],
        }]
    };
    Ok(search_targets(
        ma,
        targets,
        t0,
        t1,
        lag,
        params.potential.mean_potential_sup(),
        opts,
    ))
}

/// Unit-time kernel between classes: the canonical representative of `a` is
/// fixed, `b` ranges over cyclic relabelings and integer shifts.
pub fn h1_kernel(
    a: &ConfigurationClass,
    b: &ConfigurationClass,
    params: &ModelParams,
    opts: &BvpOptions,
) -> Result<BvpResult> {
    if a.n() != params.n || b.n() != params.n {
        return Err(Error::Dimension {
            expected: params.n,
            got: a.n().min(b.n()),
        });
    }
    let field = MeanField {
        potential: &params.potential,
        n: params.n,
    };
    let lag = Lag::mean_field(&field, params.c);
    let targets = targets_for(b.points(), params.n, shift_window(params, 1.0));
    Ok(search_targets(
        a.points(),
        targets,
        0.0,
        1.0,
        lag,
        params.potential.mean_potential_sup(),
        opts,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{integrate, PhasePoint};
    use crate::torus::{circle_dist, Configuration};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn free(n: usize, c: f64) -> ModelParams {
        ModelParams::new(n, c, PotentialSpec::free()).unwrap()
    }

    #[test]
    fn action_examples() {
        let p = DiscretePath::straight(&[0.0], &[1.0], 0.0, 1.0, 16);
        assert_abs_diff_eq!(discrete_action(&p, &free(1, 0.0)), 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(discrete_action(&p, &free(1, 1.0)), -0.5, epsilon = 1e-14);
    }

    #[test]
    fn pendulum_action_converges_at_second_order() {
        let params = ModelParams::new(1, 0.0, PotentialSpec::pendulum(0.3)).unwrap();
        // a smooth, non-trivial path: a flow segment sampled on a fine grid
        let start = PhasePoint::new(0.0, vec![0.1], vec![0.4]).unwrap();
        let traj = integrate(&params.potential, &start, 1.0, 1.0 / 4096.0);
        let sample = |m: usize| {
            let stride = 4096 / m;
            let nodes = (0..=m).map(|k| traj[k * stride].q.clone()).collect();
            discrete_action(&DiscretePath::new(0.0, 1.0, nodes).unwrap(), &params)
        };
        let reference = sample(256);
        let e1 = (sample(16) - reference).abs();
        let e2 = (sample(32) - reference).abs();
        let ratio = e1 / e2;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn c_shift_identity_is_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pot = PotentialSpec {
            w: PotentialSpec::attractive_cosine(0.2).w,
            ..PotentialSpec::pendulum(0.3)
        };
        for _ in 0..20 {
            let nodes: Vec<Vec<f64>> = (0..=8)
                .map(|k| vec![k as f64 * 0.1 + rng.gen::<f64>() * 0.05, 0.9 + k as f64 * 0.1 + rng.gen::<f64>() * 0.05])
                .collect();
            let path = DiscretePath::new(0.0, 1.0, nodes).unwrap();
            let c = rng.gen_range(-2.0..2.0);
            let p0 = ModelParams::new(2, 0.0, pot.clone()).unwrap();
            let s0 = discrete_action(&path, &p0);
            let sc = discrete_action(&path, &p0.with_c(c));
            let disp: f64 = path.end().iter().zip(path.start()).map(|(b, a)| b - a).sum();
            assert_eq!(sc, s0 - c * 0.5 * disp);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let pot = PotentialSpec {
            w: vec![crate::model::WTerm { freq: 2, amplitude: 0.15 }],
            ..PotentialSpec::pendulum(0.3)
        };
        let params = ModelParams::new(2, 0.4, pot).unwrap();
        let nodes: Vec<Vec<f64>> = (0..=10)
            .map(|_| vec![rng.gen::<f64>() * 0.4, 0.5 + rng.gen::<f64>() * 0.4])
            .collect();
        let path = DiscretePath::new(0.0, 1.0, nodes).unwrap();
        let g = action_gradient(&path, &params);
        let h = 1e-6;
        for k in 1..path.m() {
            for i in 0..2 {
                let mut a = path.clone();
                let mut b = path.clone();
                a.nodes[k][i] += h;
                b.nodes[k][i] -= h;
                let fd = (discrete_action(&a, &params) - discrete_action(&b, &params)) / (2.0 * h);
                let an = g[k - 1][i];
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn gradient_vanishes_on_free_lines_and_ignores_integer_shifts() {
        let p = DiscretePath::straight(&[0.1, 0.2], &[0.7, 1.4], 0.0, 1.0, 12);
        for g in action_gradient(&p, &free(2, 0.3)) {
            assert!(g.iter().all(|x| x.abs() < 1e-12));
        }
        let params = ModelParams::new(2, 0.3, PotentialSpec::pendulum(0.3)).unwrap();
        let mut q = p.clone();
        q.nodes[3][0] += 0.05;
        let shifted = q.relabeled(&[0, 1], &[2.0, 2.0]);
        let (ga, gb) = (action_gradient(&q, &params), action_gradient(&shifted, &params));
        for (a, b) in ga.iter().flatten().zip(gb.iter().flatten()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn bvp_free_examples() {
        let opts = BvpOptions::default();
        let r = minimize_bvp(&[0.0], &[0.0], (0.0, 1.0), &free(1, 0.0), true, &opts).unwrap();
        assert_eq!(r.shift, vec![0]);
        assert_abs_diff_eq!(r.action, 0.0, epsilon = 1e-14);
        let r = minimize_bvp(&[0.0], &[0.4], (0.0, 1.0), &free(1, 0.0), false, &opts).unwrap();
        assert_abs_diff_eq!(r.action, 0.08, epsilon = 1e-12);
        assert!(r.converged);
        assert_eq!(r.path.m(), 64);
    }

    /// Shooting oracle: bisection on the initial velocity with RK4-accurate
    /// Verlet at a tiny step, then the action by composite Simpson.
    fn shooting_action(pot: &PotentialSpec, a: f64, b: f64) -> f64 {
        let end = |v0: f64| {
            let start = PhasePoint::new(0.0, vec![a], vec![v0]).unwrap();
            integrate(pot, &start, 1.0, 1e-4).last().unwrap().q[0]
        };
        let (mut lo, mut hi) = (b - a - 1.0, b - a + 1.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if end(mid) < b {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let start = PhasePoint::new(0.0, vec![a], vec![0.5 * (lo + hi)]).unwrap();
        let traj = integrate(pot, &start, 1.0, 1e-4);
        let f: Vec<f64> = traj.iter().map(|p| 0.5 * p.v[0] * p.v[0] - pot.v(p.t, p.q[0])).collect();
        let h = 1e-4;
        let mut s = f[0] + f[f.len() - 1];
        for (i, x) in f.iter().enumerate().take(f.len() - 1).skip(1) {
            s += if i % 2 == 1 { 4.0 * x } else { 2.0 * x };
        }
        s * h / 3.0
    }

    #[test]
    fn bvp_matches_shooting_oracle() {
        let pot = PotentialSpec::pendulum(0.1);
        let params = ModelParams::new(1, 0.0, pot.clone()).unwrap();
        let reference = shooting_action(&pot, 0.0, 0.5);
        // midpoint discretization error is O(Δt²); extrapolate two levels
        let fine = BvpOptions {
            levels: vec![16, 32, 64, 128],
            ..BvpOptions::default()
        };
        let a = minimize_bvp(&[0.0], &[0.5], (0.0, 1.0), &params, false, &BvpOptions::default()).unwrap();
        let b = minimize_bvp(&[0.0], &[0.5], (0.0, 1.0), &params, false, &fine).unwrap();
        let extrapolated = (4.0 * b.action - a.action) / 3.0;
        assert!((extrapolated - reference).abs() < 1e-6, "{extrapolated} vs {reference}");
        assert!((a.action - reference).abs() < 1e-4);
    }

    #[test]
    fn h1_free_one_particle() {
        let params = free(1, 0.0);
        let opts = BvpOptions::default();
        for x in [0.0, 0.1, 0.37, 0.5, 0.8] {
            let a = Configuration::new(vec![0.0]).unwrap().canonicalize();
            let b = Configuration::new(vec![x]).unwrap().canonicalize();
            let r = h1_kernel(&a, &b, &params, &opts).unwrap();
            let d = circle_dist(0.0, x);
            assert_abs_diff_eq!(r.action, 0.5 * d * d, epsilon = 1e-12);
        }
        let a = Configuration::new(vec![0.2, 0.6]).unwrap().canonicalize();
        let r = h1_kernel(&a, &a, &free(2, 0.0), &opts).unwrap();
        assert_abs_diff_eq!(r.action, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn h1_is_symmetric_for_reversible_models() {
        let params = ModelParams::new(2, 0.0, PotentialSpec::attractive_cosine(0.2)).unwrap();
        let opts = BvpOptions::default();
        let a = Configuration::new(vec![0.1, 0.4]).unwrap().canonicalize();
        let b = Configuration::new(vec![0.3, 0.9]).unwrap().canonicalize();
        let ab = h1_kernel(&a, &b, &params, &opts).unwrap();
        let ba = h1_kernel(&b, &a, &params, &opts).unwrap();
        assert!(ab.converged && ba.converged);
        assert_abs_diff_eq!(ab.action, ba.action, epsilon = 1e-9);
    }

    #[test]
    fn minimizers_are_monotone_and_satisfy_el() {
        let pot = PotentialSpec {
            w: PotentialSpec::attractive_cosine(0.2).w,
            ..PotentialSpec::pendulum(0.3)
        };
        let params = ModelParams::new(2, 0.3, pot).unwrap();
        let opts = BvpOptions::default();
        let r = minimize_bvp(&[0.05, 0.3], &[0.4, 0.95], (0.0, 1.0), &params, true, &opts).unwrap();
        assert!(r.converged);
        assert!(r.grad_norm < 1e-8);
        assert!(r.path.min_gap() >= -1e-8);
        let coarse = BvpOptions {
            levels: vec![16, 32],
            ..opts.clone()
        };
        let rc = minimize_bvp(&[0.05, 0.3], &[0.4, 0.95], (0.0, 1.0), &params, true, &coarse).unwrap();
        // the EL residual of the continuous equation shrinks like Δt²
        let (e64, e32) = (el_residual(&r.path, &params.potential), el_residual(&rc.path, &params.potential));
        assert!(e64 < e32 / 3.0, "{e64} vs {e32}");
    }

    #[test]
    fn saddle_points_are_escaped() {
        // a constant path at the bottom of a deep well is critical but not
        // minimal over unit time once the well is deep enough
        let params = ModelParams::new(1, 0.0, PotentialSpec::pendulum(0.6)).unwrap();
        let opts = BvpOptions::default();
        let r = minimize_bvp(&[0.5], &[0.5], (0.0, 1.0), &params, false, &opts).unwrap();
        let constant = DiscretePath::straight(&[0.5], &[0.5], 0.0, 1.0, 64);
        assert!(r.converged);
        assert!(r.action < discrete_action(&constant, &params) - 1e-3);
    }

    #[test]
    fn degenerate_spans_use_one_segment() {
        let params = ModelParams::new(1, 0.0, PotentialSpec::pendulum(0.3)).unwrap();
        let r = minimize_bvp(&[0.0], &[0.01], (0.0, 0.05), &params, false, &BvpOptions::default()).unwrap();
        assert_eq!(r.path.m(), 1);
    }

    #[test]
    fn legendre_velocities_are_second_order() {
        let params = ModelParams::new(1, 0.0, PotentialSpec::pendulum(0.3)).unwrap();
        let start = PhasePoint::new(0.0, vec![0.1], vec![0.4]).unwrap();
        let traj = integrate(&params.potential, &start, 1.0, 1.0 / 1024.0);
        let field = MeanField { potential: &params.potential, n: 1 };
        let lag = Lag::mean_field(&field, 0.0);
        let err = |m: usize| {
            let stride = 1024 / m;
            let nodes = (0..=m).map(|k| traj[k * stride].q.clone()).collect();
            let p = DiscretePath::new(0.0, 1.0, nodes).unwrap();
            (p.end_velocity(&lag)[0] - traj[1024].v[0]).abs()
        };
        assert!(err(32) < err(16) / 3.0);
    }

    #[test]
    fn shift_vectors_respect_monotonicity() {
        let ks = shift_vectors(&[0.2, 0.6], 2);
        assert!(ks.contains(&vec![0, 0]));
        assert!(ks.contains(&vec![0, 1]));
        assert!(!ks.contains(&vec![1, 0]));
        for k in ks {
            let y0 = 0.2 + k[0] as f64;
            let y1 = 0.6 + k[1] as f64;
            assert!(y1 >= y0 && y1 - y0 <= 3.0 + TOL);
        }
    }
}
