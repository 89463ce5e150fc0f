//! Lax–Oleinik operators on grid value tables, the effective Hamiltonian
//! `α(c)`, conjugate pairs `(U⁻, U⁺)`, calibrated curves, and regularity
//! diagnostics.
//!
//! Sweeps are synchronous: every update reads only the previous table.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::{
    discrete_action, minimize_bvp, search_targets, targets_for, BvpOptions, DiscretePath, Lag, MeanField,
    Target,
};
use crate::dynamics::energy;
use crate::dynamics::PhasePoint;
use crate::error::{Error, Result};
use crate::grid::{Grid, GridSpec};
use crate::kernel::KernelMatrix;
use crate::model::ModelParams;
use crate::torus::{weighted_norm, Configuration};

/// Stopping rules of the fixed-point iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterOptions {
    /// Target width of the increment spread.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Averaging weight of the Krasnoselskii–Mann step.
    pub damping: f64,
}

impl Default for IterOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_sweeps: 10_000,
            damping: 0.5,
        }
    }
}

/// Values of a weak KAM function on the nodes of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub spec: GridSpec,
    pub c: f64,
    pub values: Vec<f64>,
    pub alpha: f64,
    /// `[lo, hi]` enclosing `α(c)` on the grid.
    pub alpha_bracket: [f64; 2],
    pub sweeps: usize,
    pub converged: bool,
    /// `‖T U ± α − U‖_∞` for the operator the table is a fixed point of.
    pub residual: f64,
}

impl ValueTable {
    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }
}

/// One application of a Lax–Oleinik operator.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub values: Vec<f64>,
    /// New value minus old value, per node.
    pub increments: Vec<f64>,
}

fn check(kernel: &KernelMatrix, values: &[f64]) -> Result<()> {
    if values.len() != kernel.len() {
        return Err(Error::Dimension {
            expected: kernel.len(),
            got: values.len(),
        });
    }
    Ok(())
}

fn spread(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::NEG_INFINITY, f64::INFINITY), |(mx, mn), &x| (mx.max(x), mn.min(x)))
}

/// `U′(B) = min_A [U(A) + h₁(A, B)]`.
pub fn lax_oleinik_backward(kernel: &KernelMatrix, values: &[f64]) -> Result<Sweep> {
    check(kernel, values)?;
    let n = values.len();
    let mut out = vec![f64::INFINITY; n];
    for (a, &ua) in values.iter().enumerate() {
        let row = &kernel.values[a * n..(a + 1) * n];
        for (o, k) in out.iter_mut().zip(row) {
            let v = ua + k;
            if v < *o {
                *o = v;
            }
        }
    }
    let increments = out.iter().zip(values).map(|(a, b)| a - b).collect();
    Ok(Sweep {
        values: out,
        increments,
    })
}

/// `U′(A) = max_B [U(B) − h₁(A, B)]`.
pub fn lax_oleinik_forward(kernel: &KernelMatrix, values: &[f64]) -> Result<Sweep> {
    check(kernel, values)?;
    let n = values.len();
    let out: Vec<f64> = (0..n)
        .map(|a| {
            let row = &kernel.values[a * n..(a + 1) * n];
            values
                .iter()
                .zip(row)
                .fold(f64::NEG_INFINITY, |m, (u, k)| m.max(u - k))
        })
        .collect();
    let increments = out.iter().zip(values).map(|(a, b)| a - b).collect();
    Ok(Sweep {
        values: out,
        increments,
    })
}

/// Backward fixed point `U⁻ = T⁻U⁻ + α` from `U ≡ 0`.
pub fn solve_alpha(kernel: &KernelMatrix, opts: &IterOptions) -> Result<ValueTable> {
    solve_alpha_from(kernel, vec![0.0; kernel.len()], opts)
}

/// Backward fixed point from a given initial table.
///
/// The iteration is `U ← (1 − θ) U + θ (T⁻U − max inc)`. For any table,
/// `[−max inc, −min inc]` encloses `α`, so the bracket tightens monotonically.
pub fn solve_alpha_from(
    kernel: &KernelMatrix,
    init: Vec<f64>,
    opts: &IterOptions,
) -> Result<ValueTable> {
    check(kernel, &init)?;
    let theta = opts.damping;
    let mut u = init;
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let s = lax_oleinik_backward(kernel, &u)?;
        let (mx, mn) = spread(&s.increments);
        lo = lo.max(-mx);
        hi = hi.min(-mn);
        if mx - mn < opts.tol {
            converged = true;
            break;
        }
        for (x, t) in u.iter_mut().zip(&s.values) {
            *x = (1.0 - theta) * *x + theta * (t - mx);
        }
    }
    let shift = u.iter().cloned().fold(f64::INFINITY, f64::min);
    u.iter_mut().for_each(|x| *x -= shift);
    let alpha = match predecessor_cycle_alpha(kernel, &u) {
        Some(a) if a >= lo - opts.tol && a <= hi + opts.tol => a,
        _ => 0.5 * (lo + hi),
    };
    let s = lax_oleinik_backward(kernel, &u)?;
    let residual = s
        .values
        .iter()
        .zip(&u)
        .fold(0.0f64, |m, (t, x)| m.max((t + alpha - x).abs()));
    Ok(ValueTable {
        spec: kernel.spec,
        c: kernel.c,
        values: u,
        alpha,
        alpha_bracket: [lo, hi],
        sweeps,
        converged,
        residual,
    })
}

/// Minus the smallest exact cycle mean among the cycles of the argmin
/// predecessor graph of `u`. Near a fixed point these cycles are critical,
/// and reading `α` off one of them removes the drift a rounded `α` would
/// cause in the conjugate iteration.
fn predecessor_cycle_alpha(kernel: &KernelMatrix, u: &[f64]) -> Option<f64> {
    let n = u.len();
    let pred: Vec<usize> = (0..n).map(|b| backward_argmins(kernel, u, b, 0.0)[0]).collect();
    let mut state = vec![0u8; n];
    let mut best: Option<f64> = None;
    for s in 0..n {
        if state[s] != 0 {
            continue;
        }
        let mut trail = vec![];
        let mut v = s;
        while state[v] == 0 {
            state[v] = 1;
            trail.push(v);
            v = pred[v];
        }
        if state[v] == 1 {
            // v closes a new cycle: v ← pred(v) ← …
            let mut total = 0.0;
            let mut len = 0usize;
            let mut w = v;
            loop {
                total += kernel.get(pred[w], w);
                len += 1;
                w = pred[w];
                if w == v {
                    break;
                }
            }
            let mean = total / len as f64;
            best = Some(best.map_or(mean, |b: f64| b.min(mean)));
        }
        for t in trail {
            state[t] = 2;
        }
    }
    best.map(|m| -m)
}

/// `α` on the grid as minus the minimum cycle mean of the kernel (Karp).
pub fn alpha_exact(kernel: &KernelMatrix) -> f64 {
    let n = kernel.len();
    let mut d = vec![vec![0.0f64; n]; n + 1];
    for k in 1..=n {
        let (prev, cur) = d.split_at_mut(k);
        let prev = &prev[k - 1];
        let cur = &mut cur[0];
        cur.fill(f64::INFINITY);
        for (a, &pa) in prev.iter().enumerate() {
            let row = &kernel.values[a * n..(a + 1) * n];
            for (c, w) in cur.iter_mut().zip(row) {
                let v = pa + w;
                if v < *c {
                    *c = v;
                }
            }
        }
    }
    let mut best = f64::INFINITY;
    for v in 0..n {
        let mut worst = f64::NEG_INFINITY;
        for k in 0..n {
            worst = worst.max((d[n][v] - d[k][v]) / (n - k) as f64);
        }
        best = best.min(worst);
    }
    -best
}

/// Forward fixed point `U⁺ = T⁺U⁺ − α` reached from `U⁻`.
///
/// The iterates decrease monotonically, so `U⁺ ≤ U⁻` holds throughout.
pub fn solve_conjugate(
    kernel: &KernelMatrix,
    u_minus: &ValueTable,
    opts: &IterOptions,
) -> Result<ValueTable> {
    check(kernel, &u_minus.values)?;
    let alpha = u_minus.alpha;
    let mut u = u_minus.values.clone();
    let mut sweeps = 0;
    let mut converged = false;
    let mut residual = f64::INFINITY;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let s = lax_oleinik_forward(kernel, &u)?;
        let next: Vec<f64> = s.values.iter().map(|x| x - alpha).collect();
        residual = next
            .iter()
            .zip(&u)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        u = next;
        if residual < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(ValueTable {
        spec: kernel.spec,
        c: kernel.c,
        values: u,
        alpha,
        alpha_bracket: u_minus.alpha_bracket,
        sweeps,
        converged,
        residual,
    })
}

/// Nodes where `U⁻ − U⁺ < tol`.
pub fn equality_set(u_minus: &ValueTable, u_plus: &ValueTable, tol: f64) -> Vec<usize> {
    u_minus
        .values
        .iter()
        .zip(&u_plus.values)
        .enumerate()
        .filter(|(_, (a, b))| *a - *b < tol)
        .map(|(i, _)| i)
        .collect()
}

/// Largest `|U(A) − U(B)| / dist_S(A, B)` over node pairs.
pub fn lipschitz_constant(grid: &Grid, values: &[f64]) -> f64 {
    let mut l: f64 = 0.0;
    for a in 0..grid.len() {
        for b in 0..a {
            let d = grid.dist(a, b);
            if d > 0.0 {
                l = l.max((values[a] - values[b]).abs() / d);
            }
        }
    }
    l
}

/// Nodes `A` attaining `min_A [U(A) + h₁(A, B)]` within `tie`, best first.
pub fn backward_argmins(kernel: &KernelMatrix, values: &[f64], b: usize, tie: f64) -> Vec<usize> {
    let n = values.len();
    let scores: Vec<f64> = (0..n).map(|a| values[a] + kernel.values[a * n + b]).collect();
    let best = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut out: Vec<usize> = (0..n).filter(|&a| scores[a] <= best + tie).collect();
    out.sort_by(|x, y| scores[*x].partial_cmp(&scores[*y]).unwrap().then(x.cmp(y)));
    out
}

/// `(perm, shift)` acting as `q ↦ (q[perm[j]] + shift[j])_j`.
#[derive(Debug, Clone)]
struct Frame {
    perm: Vec<usize>,
    shift: Vec<f64>,
}

impl Frame {
    fn identity(n: usize) -> Self {
        Self {
            perm: (0..n).collect(),
            shift: vec![0.0; n],
        }
    }

    /// Frame mapping a kernel minimizer's end lift back onto the canonical
    /// representative of its end class.
    fn undo_target(n: usize, relabel: usize, k: &[i64]) -> Self {
        let mut perm = vec![0; n];
        let mut shift = vec![0.0; n];
        for i in 0..n {
            let j = (i + relabel) % n;
            perm[j] = i;
            shift[j] = -((i + relabel >= n) as i64 as f64 + k[i] as f64);
        }
        Self { perm, shift }
    }

    /// Frame placing the canonical end class at the target lift; the
    /// inverse of `undo_target`.
    fn apply_target(n: usize, relabel: usize, k: &[i64]) -> Self {
        let perm = (0..n).map(|i| (i + relabel) % n).collect();
        let shift = (0..n)
            .map(|i| (i + relabel >= n) as i64 as f64 + k[i] as f64)
            .collect();
        Self { perm, shift }
    }

    /// `self ∘ inner`.
    fn compose(&self, inner: &Frame) -> Self {
        let n = self.perm.len();
        Self {
            perm: (0..n).map(|j| inner.perm[self.perm[j]]).collect(),
            shift: (0..n)
                .map(|j| inner.shift[self.perm[j]] + self.shift[j])
                .collect(),
        }
    }

    fn apply(&self, q: &[f64]) -> Vec<f64> {
        self.perm.iter().zip(&self.shift).map(|(&i, z)| q[i] + z).collect()
    }
}

/// A backward calibrated chain ending at a grid node.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibratedCurve {
    /// Stitched path over `[−K, 0]`.
    pub path: DiscretePath,
    /// Grid nodes visited at times `−K, …, 0`.
    pub nodes: Vec<usize>,
    /// Action of each unit segment, earliest first.
    pub step_actions: Vec<f64>,
    /// `|U(γ_{k+1}) − U(γ_k) − (action_k + α)|` per segment.
    pub step_defects: Vec<f64>,
    /// `|U(γ_0) − U(γ_{−K}) − Σ (action_k + α)|`.
    pub defect: f64,
    pub converged: bool,
}

/// Backward chain of argmin predecessors from `start`, stitched into one
/// lifted path whose final node is the canonical representative of `start`.
pub fn calibrated_curve(
    grid: &Grid,
    kernel: &KernelMatrix,
    table: &ValueTable,
    params: &ModelParams,
    opts: &BvpOptions,
    start: usize,
    horizon: usize,
) -> Result<CalibratedCurve> {
    check(kernel, &table.values)?;
    let n = params.n;
    let u = &table.values;
    let mut frame = Frame::identity(n);
    let mut segments: Vec<DiscretePath> = vec![];
    let mut nodes = vec![start];
    let mut actions = vec![];
    let mut defects = vec![];
    let mut converged = true;
    let mut cur = start;
    for step in 0..horizon {
        let a = backward_argmins(kernel, u, cur, 0.0)[0];
        let r = kernel.path(grid, params, opts, a, cur);
        converged &= r.converged;
        let own = Frame::undo_target(n, r.relabel, &r.shift);
        let full = frame.compose(&own);
        let t0 = -((step + 1) as f64);
        let nodes_mapped: Vec<Vec<f64>> = r.path.nodes.iter().map(|q| full.apply(q)).collect();
        let seg = DiscretePath {
            t0,
            t1: t0 + 1.0,
            nodes: nodes_mapped,
        };
        let s = discrete_action(&seg, &params.with_c(kernel.c));
        actions.push(s);
        defects.push((u[cur] - u[a] - (s + table.alpha)).abs());
        segments.push(seg);
        frame = full;
        nodes.push(a);
        cur = a;
    }
    segments.reverse();
    nodes.reverse();
    actions.reverse();
    defects.reverse();
    let path = if segments.is_empty() {
        let q = grid.node(start).points().to_vec();
        DiscretePath::straight(&q, &q, -1e-9, 0.0, 1)
    } else {
        let mut all: Vec<Vec<f64>> = vec![];
        for seg in &segments {
            if !all.is_empty() {
                all.pop();
            }
            all.extend(seg.nodes.iter().cloned());
        }
        DiscretePath {
            t0: -(horizon as f64),
            t1: 0.0,
            nodes: all,
        }
    };
    let total: f64 = actions.iter().map(|s| s + table.alpha).sum();
    let defect = (u[start] - u[nodes[0]] - total).abs();
    Ok(CalibratedCurve {
        path,
        nodes,
        step_actions: actions,
        step_defects: defects,
        defect,
        converged,
    })
}

/// Forward chain of argmax successors for `U⁺` from `start`, stitched into
/// one lifted path over `[0, K]` whose first node is the canonical
/// representative of `start`.
pub fn forward_calibrated_curve(
    grid: &Grid,
    kernel: &KernelMatrix,
    u_plus: &ValueTable,
    params: &ModelParams,
    opts: &BvpOptions,
    start: usize,
    horizon: usize,
) -> Result<CalibratedCurve> {
    check(kernel, &u_plus.values)?;
    let n = params.n;
    let u = &u_plus.values;
    let len = u.len();
    let mut frame = Frame::identity(n);
    let mut all: Vec<Vec<f64>> = vec![grid.node(start).points().to_vec()];
    let mut nodes = vec![start];
    let mut actions = vec![];
    let mut defects = vec![];
    let mut converged = true;
    let mut cur = start;
    for step in 0..horizon {
        let row = &kernel.values[cur * len..(cur + 1) * len];
        let mut next = 0;
        let mut best = f64::NEG_INFINITY;
        for b in 0..len {
            let v = u[b] - row[b];
            if v > best {
                best = v;
                next = b;
            }
        }
        let r = kernel.path(grid, params, opts, cur, next);
        converged &= r.converged;
        let seg = DiscretePath {
            t0: step as f64,
            t1: step as f64 + 1.0,
            nodes: r.path.nodes.iter().map(|q| frame.apply(q)).collect(),
        };
        let s = discrete_action(&seg, &params.with_c(kernel.c));
        actions.push(s);
        defects.push((u[next] - u[cur] - (s + u_plus.alpha)).abs());
        all.pop();
        all.extend(seg.nodes.into_iter());
        frame = frame.compose(&Frame::apply_target(n, r.relabel, &r.shift));
        nodes.push(next);
        cur = next;
    }
    let path = if horizon == 0 {
        let q = grid.node(start).points().to_vec();
        DiscretePath::straight(&q, &q, 0.0, 1e-9, 1)
    } else {
        DiscretePath {
            t0: 0.0,
            t1: horizon as f64,
            nodes: all,
        }
    };
    let total: f64 = actions.iter().map(|s| s + u_plus.alpha).sum();
    let defect = (u[cur] - u[start] - total).abs();
    Ok(CalibratedCurve {
        path,
        nodes,
        step_actions: actions,
        step_defects: defects,
        defect,
        converged,
    })
}

/// Per-sample Hamilton–Jacobi residual.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HjSample {
    pub node: usize,
    /// Final velocity of the calibrating segment.
    pub velocity: Vec<f64>,
    /// `ℋ_0(M, σ̇₀)`, the energy at the node.
    pub energy: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HjReport {
    pub max: f64,
    pub samples: Vec<HjSample>,
    /// Nodes with near-tied predecessors whose final velocities differ.
    pub excluded: Vec<usize>,
}

/// Value gap under which two predecessors count as tied.
pub const TIE_TOL: f64 = 1e-7;
/// Velocity gap (weighted norm) separating distinct tied minimizers.
pub const VELOCITY_TOL: f64 = 1e-4;

/// Final velocity of the kernel minimizer from `a` to `b`, ordered as the
/// canonical representative of `b`.
fn arrival_velocity(
    grid: &Grid,
    kernel: &KernelMatrix,
    params: &ModelParams,
    opts: &BvpOptions,
    lag: &Lag,
    a: usize,
    b: usize,
) -> Vec<f64> {
    let r = kernel.path(grid, params, opts, a, b);
    let own = Frame::undo_target(params.n, r.relabel, &r.shift);
    let v = r.path.end_velocity(lag);
    own.perm.iter().map(|&i| v[i]).collect()
}

/// `γ̇₀` of a backward calibrated curve of `table` ending at `b`, ordered as
/// the canonical representative of `b`.
pub fn calibrated_velocity(
    grid: &Grid,
    kernel: &KernelMatrix,
    table: &ValueTable,
    params: &ModelParams,
    opts: &BvpOptions,
    b: usize,
) -> Result<Vec<f64>> {
    check(kernel, &table.values)?;
    let field = MeanField {
        potential: &params.potential,
        n: params.n,
    };
    let lag = Lag::mean_field(&field, kernel.c);
    let a = backward_argmins(kernel, &table.values, b, 0.0)[0];
    Ok(arrival_velocity(grid, kernel, params, opts, &lag, a, b))
}

/// Residual `|∂_t U + ℋ_0(M, c + ∂_M U) − α|` with `∂_M U = σ̇₀ − c`. For a
/// model independent of time `∂_t U = 0`, so the residual is `|energy − α|`.
///
/// With `horizon = 1` the velocity is read off the calibrating unit segment.
/// A longer horizon follows the calibrated chain back `horizon` steps and
/// re-solves it as one minimizer with the same endpoints, which spreads the
/// grid snapping of the intermediate nodes over the whole interval.
/// Nodes whose calibrating segments disagree in arrival velocity are
/// excluded either way.
pub fn hj_residual(
    grid: &Grid,
    kernel: &KernelMatrix,
    table: &ValueTable,
    params: &ModelParams,
    opts: &BvpOptions,
    samples: &[usize],
    horizon: usize,
) -> Result<HjReport> {
    if horizon == 0 {
        return Err(Error::Validation("the HJ horizon must be at least 1".into()));
    }
    if params.potential.is_time_dependent() {
        return Err(Error::Unsupported(
            "the HJ residual needs a potential independent of time".into(),
        ));
    }
    check(kernel, &table.values)?;
    let field = MeanField {
        potential: &params.potential,
        n: params.n,
    };
    let lag = Lag::mean_field(&field, kernel.c);
    let mut out = vec![];
    let mut excluded = vec![];
    let mut max: f64 = 0.0;
    for &b in samples {
        let cands = backward_argmins(kernel, &table.values, b, TIE_TOL);
        let vels: Vec<Vec<f64>> = cands
            .iter()
            .map(|&a| arrival_velocity(grid, kernel, params, opts, &lag, a, b))
            .collect();
        let split = vels.iter().any(|v| {
            let d: Vec<f64> = v.iter().zip(&vels[0]).map(|(x, y)| x - y).collect();
            weighted_norm(&d) > VELOCITY_TOL
        });
        if split {
            excluded.push(b);
            continue;
        }
        let v = if horizon == 1 {
            vels[0].clone()
        } else {
            let curve = calibrated_curve(grid, kernel, table, params, opts, b, horizon)?;
            let end = curve.path.end().to_vec();
            let target = Target {
                shift: vec![0; end.len()],
                lift: end,
                relabel: 0,
            };
            let r = search_targets(
                curve.path.start(),
                vec![target],
                -(horizon as f64),
                0.0,
                Lag::mean_field(&field, kernel.c),
                params.potential.mean_potential_sup(),
                opts,
            );
            if r.converged {
                r.path.end_velocity(&lag)
            } else {
                vels[0].clone()
            }
        };
        let p = PhasePoint::new(0.0, grid.node(b).points().to_vec(), v.clone())?;
        let e = energy(&params.potential, &p)?;
        let residual = (e - table.alpha).abs();
        max = max.max(residual);
        out.push(HjSample {
            node: b,
            velocity: v,
            energy: e,
            residual,
        });
    }
    Ok(HjReport {
        max,
        samples: out,
        excluded,
    })
}

/// Semiconcavity constant `K = 1 + 3 max(‖V″‖_∞, ‖W″‖_∞)`.
pub fn semiconcavity_constant(params: &ModelParams) -> f64 {
    let p = &params.potential;
    1.0 + 3.0 * p.v_sup(2).max(p.w_sup(2))
}

/// Largest `w(x+h) + w(x−h) − 2w(x) − (K/n)|h|²` over nodes and lattice
/// probes with `|h_i| ≤ max_step`, where `w = T⁻U`.
pub fn semiconcavity_check(
    grid: &Grid,
    kernel: &KernelMatrix,
    values: &[f64],
    params: &ModelParams,
    max_step: i64,
) -> Result<f64> {
    let w = lax_oleinik_backward(kernel, values)?.values;
    let n = params.n;
    let k = semiconcavity_constant(params);
    let r = grid.spec().resolution as f64;
    let mut probes: Vec<Vec<i64>> = vec![vec![]];
    for _ in 0..n {
        probes = probes
            .into_iter()
            .flat_map(|p| {
                (-max_step..=max_step).map(move |s| {
                    let mut q = p.clone();
                    q.push(s);
                    q
                })
            })
            .collect();
    }
    probes.retain(|h| h.iter().any(|&s| s != 0));
    let mut worst = f64::NEG_INFINITY;
    for x in 0..grid.len() {
        for h in &probes {
            let neg: Vec<i64> = h.iter().map(|s| -s).collect();
            let (p, m) = (grid.offset(x, h), grid.offset(x, &neg));
            let h2: f64 = h.iter().map(|&s| (s as f64 / r).powi(2)).sum();
            worst = worst.max(w[p] + w[m] - 2.0 * w[x] - k / n as f64 * h2);
        }
    }
    Ok(worst)
}

/// Largest `U(B) − U(A) − ∫(ℒ_c + α)` over random piecewise-smooth test
/// paths of one to three unit steps through grid nodes. Nonpositive for a
/// dominated function.
pub fn domination_check(
    grid: &Grid,
    kernel: &KernelMatrix,
    table: &ValueTable,
    params: &ModelParams,
    count: usize,
    seed: u64,
) -> Result<f64> {
    check(kernel, &table.values)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.n;
    let p = params.with_c(kernel.c);
    let m = 64;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..count {
        let steps = rng.gen_range(1..=3usize);
        let mut cur = rng.gen_range(0..grid.len());
        let first = cur;
        let mut total = 0.0;
        for _ in 0..steps {
            let next = rng.gen_range(0..grid.len());
            let targets = targets_for(grid.node(next).points(), n, 1);
            let t = &targets[rng.gen_range(0..targets.len())];
            let a = grid.node(cur).points();
            let mut path = DiscretePath::straight(a, &t.lift, 0.0, 1.0, m);
            let amp: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.2..0.2)).collect();
            let freq = rng.gen_range(1..=3) as f64;
            for k in 1..m {
                let s = (std::f64::consts::PI * freq * k as f64 / m as f64).sin();
                for i in 0..n {
                    path.nodes[k][i] += amp[i] * s;
                }
            }
            total += discrete_action(&path, &p) + table.alpha;
            cur = next;
        }
        worst = worst.max(table.values[cur] - table.values[first] - total);
    }
    Ok(worst)
}

/// `α` from one long closed minimizer: `−S_T(M, M + k)/T` minimized over
/// integer shifts `k`. Intended for particle counts beyond grid reach.
pub fn alpha_orbitwise(
    params: &ModelParams,
    start: &Configuration,
    horizon: f64,
    opts: &BvpOptions,
) -> Result<f64> {
    let r = minimize_bvp(start.points(), start.points(), (0.0, horizon), params, true, opts)?;
    Ok(-r.action / horizon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::build_kernels;
    use crate::model::PotentialSpec;
    use proptest::prelude::*;

    fn kernel(n: usize, r: usize, pot: PotentialSpec, c: f64) -> (Grid, ModelParams, KernelMatrix) {
        let grid = Grid::new(GridSpec::new(n, r).unwrap());
        let params = ModelParams::new(n, c, pot).unwrap();
        let set = build_kernels(&grid, &params, &[c], &BvpOptions::default()).unwrap();
        let k = set.kernels.into_iter().next().unwrap();
        (grid, params, k)
    }

    #[test]
    fn zero_table_is_fixed_in_the_free_case() {
        let (_, _, k) = kernel(1, 8, PotentialSpec::free(), 0.0);
        let s = lax_oleinik_backward(&k, &[0.0; 8]).unwrap();
        assert!(s.values.iter().all(|v| v.abs() < 1e-14));
        let s = lax_oleinik_forward(&k, &[0.0; 8]).unwrap();
        assert!(s.values.iter().all(|v| v.abs() < 1e-14));
        assert!(matches!(
            lax_oleinik_backward(&k, &[0.0; 3]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn free_alpha_is_half_c_squared() {
        for c in [-1.0, 0.0, 0.5, 1.0] {
            let (_, _, k) = kernel(1, 8, PotentialSpec::free(), c);
            let t = solve_alpha(&k, &IterOptions::default()).unwrap();
            assert!(t.converged);
            assert!((t.alpha - 0.5 * c * c).abs() < 1e-3, "c={c} α={}", t.alpha);
            assert!(t.alpha_bracket[1] - t.alpha_bracket[0] < 2e-8);
            assert!((alpha_exact(&k) - t.alpha).abs() < 1e-8);
        }
    }

    #[test]
    fn pendulum_alpha_and_conjugate_pair() {
        let (grid, _, k) = kernel(1, 16, PotentialSpec::pendulum(0.3), 0.0);
        let opts = IterOptions::default();
        let um = solve_alpha(&k, &opts).unwrap();
        assert!(um.converged);
        assert!((um.alpha - 0.3).abs() < 2e-3, "{}", um.alpha);
        assert!(um.residual < 1e-8);
        let up = solve_conjugate(&k, &um, &opts).unwrap();
        assert!(up.converged);
        for i in 0..grid.len() {
            assert!(up.values[i] <= um.values[i] + 1e-12, "{} {}", up.values[i], um.values[i]);
        }
        assert_eq!(equality_set(&um, &up, 1e-6), vec![0]);
        // the forward table is a fixed point
        let s = lax_oleinik_forward(&k, &up.values).unwrap();
        for (a, b) in s.values.iter().zip(&up.values) {
            assert!((a - um.alpha - b).abs() < 1e-8);
        }
    }

    #[test]
    fn calibrated_curves_in_the_free_case() {
        let (grid, params, k) = kernel(1, 8, PotentialSpec::free(), 1.0);
        let t = solve_alpha(&k, &IterOptions::default()).unwrap();
        let cur = calibrated_curve(&grid, &k, &t, &params, &BvpOptions::default(), 3, 4).unwrap();
        assert!(cur.converged);
        assert!(cur.defect < 1e-6);
        let p = &cur.path;
        assert_eq!(p.m(), 4 * 64);
        assert!((p.end()[0] - p.start()[0] - 4.0).abs() < 1e-12);
        assert_eq!(p.end(), grid.node(3).points());
    }

    #[test]
    fn forward_curves_reach_the_maximum_of_v() {
        let (grid, params, k) = kernel(1, 16, PotentialSpec::pendulum(0.3), 0.0);
        let io = IterOptions::default();
        let um = solve_alpha(&k, &io).unwrap();
        let up = solve_conjugate(&k, &um, &io).unwrap();
        let cur = forward_calibrated_curve(&grid, &k, &up, &params, &BvpOptions::default(), 5, 6).unwrap();
        assert!(cur.converged);
        assert!(cur.step_defects.iter().all(|d| *d < 1e-6));
        assert_eq!(*cur.nodes.last().unwrap(), 0);
        assert_eq!(cur.path.start(), grid.node(5).points());
        let x = cur.path.end()[0];
        assert!((x - x.round()).abs() < 1e-12);
        let back = calibrated_curve(&grid, &k, &um, &params, &BvpOptions::default(), 5, 6).unwrap();
        assert_eq!(back.nodes[0], 0);
        assert!(back.step_defects.iter().all(|d| *d < 1e-6));
    }

    #[test]
    fn semiconcavity_in_the_free_case() {
        let (grid, params, k) = kernel(1, 16, PotentialSpec::free(), 0.0);
        let u: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin()).collect();
        assert!(semiconcavity_check(&grid, &k, &u, &params, 2).unwrap() <= 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn operators_are_monotone_and_commute_with_constants(
            u in proptest::collection::vec(-1.0f64..1.0, 8),
            d in proptest::collection::vec(0.0f64..1.0, 8),
            a in -5.0f64..5.0,
        ) {
            let (_, _, k) = kernel(1, 8, PotentialSpec::pendulum(0.3), 0.0);
            let v: Vec<f64> = u.iter().zip(&d).map(|(x, y)| x + y).collect();
            let (tu, tv) = (lax_oleinik_backward(&k, &u).unwrap(), lax_oleinik_backward(&k, &v).unwrap());
            for (x, y) in tu.values.iter().zip(&tv.values) {
                prop_assert!(x <= y);
            }
            let ua: Vec<f64> = u.iter().map(|x| x + a).collect();
            let tua = lax_oleinik_backward(&k, &ua).unwrap();
            for (x, y) in tu.values.iter().zip(&tua.values) {
                prop_assert!((x + a - y).abs() < 1e-12);
            }
            let fu = lax_oleinik_forward(&k, &u).unwrap();
            let fua = lax_oleinik_forward(&k, &ua).unwrap();
            for (x, y) in fu.values.iter().zip(&fua.values) {
                prop_assert!((x + a - y).abs() < 1e-12);
            }
        }
    }
}
