//! The batch commands behind the command-line tool.
//!
//! Each command turns a scenario into named artifacts, a map of residuals
//! and a list of solver flags. `verify` runs the other commands and judges
//! their residuals against fixed tolerances.

use std::collections::BTreeMap;
use std::fmt;
use std::rc::Rc;

use serde::Serialize;

use crate::action::{discrete_action, BvpOptions};
use crate::aubry::{aubry_membership, peierls, stitched_calibration};
use crate::dynamics::{apriori_bounds, energy, integrate, path_extremes};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::io::{coords, num, Artifact, KernelCache, Table};
use crate::kam::{
    default_modes, diophantine_check, graph_samples, hull_residual, periodic_minimizer, velocity_graph_lipschitz,
};
use crate::kernel::KernelMatrix;
use crate::mather::{action_of_measure, chain_measure, mather_nodes, orbit_from_path, rotation_number, DualityTable};
use crate::model::ModelParams;
use crate::scenario::Scenario;
use crate::transport::{minimal_parametrization, self_consistent, speed_bound, BoundaryPair};
use crate::weakkam::{
    alpha_exact, calibrated_curve, domination_check, equality_set, hj_residual, lipschitz_constant,
    semiconcavity_check, semiconcavity_constant, solve_alpha, solve_conjugate, IterOptions, ValueTable,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Command {
    Alpha,
    Beta,
    Orbit,
    Value,
    Aubry,
    Transport,
    Kam,
    Verify,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::Alpha,
        Command::Beta,
        Command::Orbit,
        Command::Value,
        Command::Aubry,
        Command::Transport,
        Command::Kam,
        Command::Verify,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Alpha => "alpha",
            Command::Beta => "beta",
            Command::Orbit => "orbit",
            Command::Value => "value",
            Command::Aubry => "aubry",
            Command::Transport => "transport",
            Command::Kam => "kam",
            Command::Verify => "verify",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "skip",
        })
    }
}

/// One invariant judged by `verify`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub status: Status,
}

/// Everything a command produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub command: Command,
    pub artifacts: Vec<Artifact>,
    pub residuals: BTreeMap<String, f64>,
    pub flags: Vec<String>,
    pub checks: Vec<Check>,
}

impl Outcome {
    fn new(command: Command) -> Self {
        Self {
            command,
            artifacts: vec![],
            residuals: BTreeMap::new(),
            flags: vec![],
            checks: vec![],
        }
    }

    fn residual(&mut self, key: &str, value: f64) {
        self.residuals.insert(key.to_string(), value);
    }

    fn absorb(&mut self, other: Outcome) {
        self.artifacts.extend(other.artifacts);
        self.residuals.extend(other.residuals);
        self.flags.extend(other.flags);
    }

    /// True when no solver flag was raised and no check failed.
    pub fn clean(&self) -> bool {
        self.flags.is_empty() && self.checks.iter().all(|c| c.status != Status::Fail)
    }
}

struct Pair {
    kernel: KernelMatrix,
    um: ValueTable,
    up: ValueTable,
}

/// A scenario bound to its grid, model and kernel cache.
pub struct Session<'a> {
    scenario: &'a Scenario,
    cache: &'a mut KernelCache,
    grid: Grid,
    params: ModelParams,
    opts: BvpOptions,
    iopts: IterOptions,
    pair: Option<Rc<Pair>>,
}

fn kernel_flags(k: &KernelMatrix, out: &mut Outcome) {
    if !k.converged() {
        out.flags.push(format!(
            "kernel at c = {}: {} pairs above the gradient tolerance (worst {:e})",
            k.c, k.unconverged, k.worst_grad
        ));
    }
}

fn table_flags(label: &str, t: &ValueTable, out: &mut Outcome) {
    if !t.converged {
        out.flags.push(format!(
            "{label} at c = {}: no convergence after {} sweeps (residual {:e})",
            t.c, t.sweeps, t.residual
        ));
    }
}

fn max_of(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// At most `count` evenly spaced indices below `len`.
fn spread_indices(len: usize, count: usize) -> Vec<usize> {
    let step = len.div_ceil(count.max(1)).max(1);
    (0..len).step_by(step).collect()
}

impl<'a> Session<'a> {
    pub fn new(scenario: &'a Scenario, cache: &'a mut KernelCache) -> Result<Self> {
        Ok(Self {
            grid: Grid::new(scenario.grid_spec()?),
            params: scenario.params()?,
            opts: scenario.bvp_options(),
            iopts: scenario.iter_options(),
            scenario,
            cache,
            pair: None,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn run(&mut self, command: Command) -> Result<Outcome> {
        match command {
            Command::Alpha => self.alpha(),
            Command::Beta => self.beta(),
            Command::Orbit => self.orbit(),
            Command::Value => self.value(),
            Command::Aubry => self.aubry(),
            Command::Transport => self.transport(),
            Command::Kam => self.kam(),
            Command::Verify => self.verify(),
        }
    }

    fn pair(&mut self, out: &mut Outcome) -> Result<Rc<Pair>> {
        if self.pair.is_none() {
            let kernel = self.cache.kernel(&self.grid, &self.params, self.params.c, &self.opts)?;
            let um = solve_alpha(&kernel, &self.iopts)?;
            let up = solve_conjugate(&kernel, &um, &self.iopts)?;
            self.pair = Some(Rc::new(Pair { kernel, um, up }));
        }
        let p = self.pair.clone().expect("pair was just computed");
        kernel_flags(&p.kernel, out);
        table_flags("U-", &p.um, out);
        table_flags("U+", &p.up, out);
        Ok(p)
    }

    fn alpha(&mut self) -> Result<Outcome> {
        let mut out = Outcome::new(Command::Alpha);
        let set = self.cache.kernels(&self.grid, &self.params, &self.scenario.alpha.cs, &self.opts)?;
        let mut t = Table::new(&[
            "c",
            "alpha",
            "alpha_lo",
            "alpha_hi",
            "alpha_cycle",
            "sweeps",
            "converged",
            "residual",
            "unconverged_pairs",
        ]);
        let (mut worst_res, mut worst_gap, mut bad) = (0.0f64, 0.0f64, 0usize);
        for k in &set.kernels {
            let v = solve_alpha(k, &self.iopts)?;
            let cycle = alpha_exact(k);
            kernel_flags(k, &mut out);
            table_flags("U-", &v, &mut out);
            worst_res = worst_res.max(v.residual);
            worst_gap = worst_gap.max((v.alpha - cycle).abs());
            bad += k.unconverged;
            t.push(vec![
                num(k.c),
                num(v.alpha),
                num(v.alpha_bracket[0]),
                num(v.alpha_bracket[1]),
                num(cycle),
                v.sweeps.to_string(),
                v.converged.to_string(),
                num(v.residual),
                k.unconverged.to_string(),
            ]);
        }
        out.residual("alpha.max_residual", worst_res);
        out.residual("alpha.max_cycle_gap", worst_gap);
        out.residual("kernel.unconverged", bad as f64);
        out.artifacts.push(Artifact::csv("alpha.csv", &t));
        Ok(out)
    }

    fn beta(&mut self) -> Result<Outcome> {
        let mut out = Outcome::new(Command::Beta);
        let cs = self.scenario.beta.cs.clone();
        let set = self.cache.kernels(&self.grid, &self.params, &cs, &self.opts)?;
        let mut alpha = vec![];
        let mut brackets = vec![];
        for k in &set.kernels {
            let v = solve_alpha(k, &self.iopts)?;
            kernel_flags(k, &mut out);
            table_flags("U-", &v, &mut out);
            alpha.push(v.alpha);
            brackets.push(v.alpha_bracket);
        }
        let mut table = DualityTable::new(cs, alpha, brackets)?;
        let mut rhos = vec![];
        for &rho in &self.scenario.beta.rhos {
            match table.beta(rho) {
                Ok(_) => rhos.push(rho),
                Err(e) => out.flags.push(format!("beta: {e}")),
            }
        }
        table.fill_beta(&rhos)?;

        let mut d = Table::new(&["c", "alpha", "alpha_lo", "alpha_hi", "slope_left", "slope_right"]);
        for i in 0..table.cs.len() {
            let (l, r) = table.subdifferential(i);
            d.push(vec![
                num(table.cs[i]),
                num(table.alpha[i]),
                num(table.alpha_lo[i]),
                num(table.alpha_hi[i]),
                num(l),
                num(r),
            ]);
        }
        let mut b = Table::new(&["rho", "beta", "c"]);
        for i in 0..table.rhos.len() {
            b.push(vec![num(table.rhos[i]), num(table.beta[i]), num(table.subgradient[i])]);
        }
        if !table.rhos.is_empty() {
            out.residual("duality.fenchel_young_violation", (-table.fenchel_young_gap()).max(0.0));
            out.residual("duality.equality_defect", table.fenchel_equality_defect());
            out.residual("duality.beta_convexity", table.beta_convexity_defect());
        }
        out.residual("duality.alpha_convexity", table.alpha_convexity_defect());
        out.artifacts.push(Artifact::csv("duality.csv", &d));
        out.artifacts.push(Artifact::csv("beta.csv", &b));
        Ok(out)
    }

    fn orbit(&mut self) -> Result<Outcome> {
        let mut out = Outcome::new(Command::Orbit);
        let p = self.pair(&mut out)?;
        let sc = &self.scenario.orbit;
        let params = self.params.with_c(p.kernel.c);
        let bounds = apriori_bounds(&params);
        let mut rows = Table::new(&[
            "seed",
            "rho_measure",
            "rho_orbit",
            "rho_spread",
            "action",
            "minus_alpha",
            "calibration_defect",
            "invariance_defect",
            "support_diameter",
            "max_speed",
            "max_accel",
            "flow_rotation",
            "energy_drift",
        ]);
        let mut samples = Table::new(&["seed", "t", "q", "v"]);
        let mut measures = vec![];
        let mut min_action = f64::INFINITY;
        let (mut rot, mut speed, mut accel, mut inv, mut cal, mut drift) =
            (0.0f64, f64::NEG_INFINITY, f64::NEG_INFINITY, 0.0f64, 0.0f64, 0.0f64);
        for &seed in &sc.seeds {
            let ch = chain_measure(&self.grid, &p.kernel, &p.up, &params, &self.opts, seed, sc.horizon, sc.stride)?;
            let action = action_of_measure(&ch.measure, &params)?;
            let rho = rotation_number(&ch.measure);
            let (s, a) = path_extremes(&ch.path, *self.opts.levels.last().expect("validated"));
            let orbit = orbit_from_path(&ch.path, &params);
            let start = orbit.last().expect("chain orbit is non-empty").clone();
            let flow = integrate(&params.potential, &start, sc.flow_duration, sc.flow_step);
            let end = flow.last().expect("flow is non-empty");
            let flow_rotation =
                end.q.iter().zip(&start.q).map(|(b, a)| b - a).sum::<f64>() / (params.n as f64 * sc.flow_duration);
            let e_drift = if params.potential.is_time_dependent() {
                f64::NAN
            } else {
                let e0 = energy(&params.potential, &start)?;
                let mut d: f64 = 0.0;
                for q in &flow {
                    d = d.max((energy(&params.potential, q)? - e0).abs());
                }
                d
            };
            if ch.orbit_rotation.flagged {
                out.flags.push(format!(
                    "orbit from node {seed}: particle rotation numbers spread by {:e}",
                    ch.orbit_rotation.spread
                ));
            }
            min_action = min_action.min(action);
            rot = rot.max((rho - ch.orbit_rotation.mean).abs() - 1.0 / sc.horizon as f64);
            speed = speed.max(s - bounds.r_c);
            accel = accel.max(a - bounds.accel);
            inv = inv.max(ch.measure.invariance_defect);
            cal = cal.max(ch.calibration_defect);
            if e_drift.is_finite() {
                drift = drift.max(e_drift);
            }
            rows.push(vec![
                seed.to_string(),
                num(rho),
                num(ch.orbit_rotation.mean),
                num(ch.orbit_rotation.spread),
                num(action),
                num(-p.um.alpha),
                num(ch.calibration_defect),
                num(ch.measure.invariance_defect),
                num(ch.measure.support_diameter()),
                num(s),
                num(a),
                num(flow_rotation),
                num(e_drift),
            ]);
            for smp in &ch.measure.samples {
                samples.push(vec![seed.to_string(), num(smp.t), coords(&smp.q), coords(&smp.v)]);
            }
            measures.push(ch.measure);
        }
        let nodes = mather_nodes(&self.grid, &measures);
        out.residual("orbit.min_action_gap", (min_action + p.um.alpha).abs());
        out.residual("orbit.rotation_excess", rot);
        out.residual("orbit.speed_excess", speed);
        out.residual("orbit.accel_excess", accel);
        out.residual("orbit.invariance", inv);
        out.residual("orbit.chain_calibration", cal);
        out.residual("orbit.mather_nodes", nodes.len() as f64);
        if !params.potential.is_time_dependent() {
            out.residual("orbit.energy_drift", drift);
        }
        out.artifacts.push(Artifact::csv("orbit.csv", &rows));
        out.artifacts.push(Artifact::csv("measure.csv", &samples));
        Ok(out)
    }

    fn value(&mut self) -> Result<Outcome> {
        #[derive(Serialize)]
        struct Hj {
            max: f64,
            sampled: usize,
            excluded: Vec<usize>,
        }
        #[derive(Serialize)]
        struct Diagnostics {
            c: f64,
            alpha: f64,
            alpha_bracket: [f64; 2],
            alpha_cycle: f64,
            sweeps: [usize; 2],
            residual: [f64; 2],
            converged: [bool; 2],
            lipschitz: [f64; 2],
            equality_set: Vec<usize>,
            order_violation: f64,
            hj: Option<Hj>,
            semiconcavity_constant: f64,
            semiconcavity_excess: f64,
            domination_paths: usize,
            domination_defect: f64,
            calibration_nodes: Vec<usize>,
            calibration_defect: f64,
        }

        let mut out = Outcome::new(Command::Value);
        let p = self.pair(&mut out)?;
        let sv = &self.scenario.value;
        let params = self.params.with_c(p.kernel.c);
        let len = self.grid.len();
        let mut t = Table::new(&["node", "points", "u_minus", "u_plus", "gap"]);
        for i in 0..len {
            t.push(vec![
                i.to_string(),
                coords(self.grid.node(i).points()),
                num(p.um.values[i]),
                num(p.up.values[i]),
                num(p.um.values[i] - p.up.values[i]),
            ]);
        }
        let order = max_of((0..len).map(|i| p.up.values[i] - p.um.values[i])).max(0.0);
        let nodes: Vec<usize> = (0..len).collect();
        let hj = if params.potential.is_time_dependent() {
            None
        } else {
            let r = hj_residual(&self.grid, &p.kernel, &p.um, &params, &self.opts, &nodes, self.scenario.value.curve_horizon)?;
            Some(Hj {
                max: r.max,
                sampled: r.samples.len(),
                excluded: r.excluded,
            })
        };
        let semi = semiconcavity_check(&self.grid, &p.kernel, &p.um.values, &params, sv.semiconcavity_step)?;
        let dom = domination_check(&self.grid, &p.kernel, &p.um, &params, sv.domination_paths, self.scenario.seed)?;
        let cal_nodes = spread_indices(len, 32);
        let mut cal: f64 = 0.0;
        for &b in &cal_nodes {
            let cur = calibrated_curve(&self.grid, &p.kernel, &p.um, &params, &self.opts, b, sv.curve_horizon)?;
            cal = cal.max(max_of(cur.step_defects.iter().cloned()));
        }
        let d = Diagnostics {
            c: p.kernel.c,
            alpha: p.um.alpha,
            alpha_bracket: p.um.alpha_bracket,
            alpha_cycle: alpha_exact(&p.kernel),
            sweeps: [p.um.sweeps, p.up.sweeps],
            residual: [p.um.residual, p.up.residual],
            converged: [p.um.converged, p.up.converged],
            lipschitz: [
                lipschitz_constant(&self.grid, &p.um.values),
                lipschitz_constant(&self.grid, &p.up.values),
            ],
            equality_set: equality_set(&p.um, &p.up, self.scenario.aubry.conjugate_tol),
            order_violation: order,
            semiconcavity_constant: semiconcavity_constant(&params) / params.n as f64,
            semiconcavity_excess: semi,
            domination_paths: sv.domination_paths,
            domination_defect: dom,
            calibration_nodes: cal_nodes,
            calibration_defect: cal,
            hj,
        };
        out.residual("value.order", order);
        out.residual("value.residual", p.um.residual.max(p.up.residual));
        out.residual("value.semiconcavity", semi.max(0.0));
        out.residual("value.domination", dom.max(0.0));
        out.residual("value.calibration", cal);
        if let Some(h) = &d.hj {
            out.residual("value.hj_residual", h.max);
        }
        out.artifacts.push(Artifact::csv("value.csv", &t));
        out.artifacts.push(Artifact::json("diagnostics.json", &d)?);
        Ok(out)
    }

    fn aubry(&mut self) -> Result<Outcome> {
        #[derive(Serialize)]
        struct Report<'r> {
            c: f64,
            alpha: f64,
            depth: usize,
            by_barrier: &'r [usize],
            by_conjugate: &'r [usize],
            disagreement: &'r [usize],
            members: &'r [usize],
            velocities: &'r [Vec<f64>],
            lipschitz: f64,
            invariance: f64,
            bellman_defect: f64,
            lower_bound_violation: f64,
            oscillating_pairs: usize,
            stitched_calibration: f64,
        }

        let mut out = Outcome::new(Command::Aubry);
        let p = self.pair(&mut out)?;
        let sa = &self.scenario.aubry;
        let params = self.params.with_c(p.kernel.c);
        let barriers = peierls(&p.kernel, p.um.alpha, sa.depth, sa.osc_tol)?;
        let rep = aubry_membership(
            &self.grid,
            &p.kernel,
            &barriers,
            &p.um,
            &p.up,
            &params,
            &self.opts,
            self.scenario.membership_tol(),
        )?;
        let mut stitched: f64 = 0.0;
        for &m in &rep.members {
            let s = stitched_calibration(
                &self.grid,
                &p.kernel,
                &p.um,
                &p.up,
                &params,
                &self.opts,
                m,
                self.scenario.value.curve_horizon,
            )?;
            stitched = stitched.max(s.minus).max(s.plus);
        }
        let bellman = barriers.bellman_defect(&p.kernel);
        let lower = barriers.lower_bound_violation(&p.um, &p.up).max(0.0);
        let mut t = Table::new(&[
            "node",
            "points",
            "h_inf",
            "oscillation",
            "conjugate_gap",
            "by_barrier",
            "by_conjugate",
        ]);
        for i in 0..self.grid.len() {
            let k = i * self.grid.len() + i;
            t.push(vec![
                i.to_string(),
                coords(self.grid.node(i).points()),
                num(barriers.h_inf[k]),
                num(barriers.oscillation[k]),
                num(p.um.values[i] - p.up.values[i]),
                rep.by_barrier.contains(&i).to_string(),
                rep.by_conjugate.contains(&i).to_string(),
            ]);
        }
        if rep.members.is_empty() {
            out.flags.push("aubry: no node passes both membership criteria".into());
        }
        out.residual("aubry.disagreement", rep.disagreement.len() as f64);
        out.residual("aubry.members", rep.members.len() as f64);
        out.residual("aubry.bellman", bellman);
        out.residual("aubry.lower_bound", lower);
        out.residual("aubry.lipschitz", rep.lipschitz);
        out.residual("aubry.invariance", rep.invariance);
        out.residual("aubry.stitched_calibration", stitched);
        out.residual("aubry.oscillating_pairs", barriers.flagged as f64);
        out.artifacts.push(Artifact::csv("barrier.csv", &t));
        out.artifacts.push(Artifact::json(
            "aubry.json",
            &Report {
                c: rep.c,
                alpha: p.um.alpha,
                depth: sa.depth,
                by_barrier: &rep.by_barrier,
                by_conjugate: &rep.by_conjugate,
                disagreement: &rep.disagreement,
                members: &rep.members,
                velocities: &rep.velocities,
                lipschitz: rep.lipschitz,
                invariance: rep.invariance,
                bellman_defect: bellman,
                lower_bound_violation: lower,
                oscillating_pairs: barriers.flagged,
                stitched_calibration: stitched,
            },
        )?);
        Ok(out)
    }

    fn transport(&mut self) -> Result<Outcome> {
        #[derive(Serialize)]
        struct Run {
            seed: crate::transport::Seed,
            a: f64,
            converged: bool,
            monotone: bool,
            iterations: usize,
            residual: f64,
            unconverged_paths: usize,
            marginal_defect: f64,
            max_speed: f64,
        }
        #[derive(Serialize)]
        struct Report {
            minus: Vec<f64>,
            plus: Vec<f64>,
            speed_bound: f64,
            runs: Vec<Run>,
            best: Option<usize>,
            a: Option<f64>,
            b: f64,
            gap: Option<f64>,
            graph_lipschitz: Option<f64>,
        }

        let mut out = Outcome::new(Command::Transport);
        let st = self
            .scenario
            .transport
            .as_ref()
            .ok_or_else(|| Error::Config("the scenario has no [transport] section".into()))?;
        let topts = self.scenario.transport_options().expect("section present");
        let boundary = BoundaryPair::new(st.minus.clone(), st.plus.clone())?;
        let sc = self_consistent(&boundary, &self.params, &topts, &self.opts)?;
        let sigma = minimal_parametrization(&boundary, &self.params, &self.opts)?;
        let b = discrete_action(&sigma, &self.params);
        let runs: Vec<Run> = sc
            .fixed_points
            .iter()
            .map(|f| Run {
                seed: f.seed,
                a: f.a,
                converged: f.converged,
                monotone: f.monotone,
                iterations: f.residuals.len(),
                residual: f.residuals.last().copied().unwrap_or(f64::NAN),
                unconverged_paths: f.unconverged_paths,
                marginal_defect: f.measure.marginal_defect(),
                max_speed: f.measure.max_speed(),
            })
            .collect();
        for r in runs.iter().filter(|r| !r.converged) {
            out.flags.push(format!(
                "transport: the {:?} seed stopped after {} iterations at residual {:e}",
                r.seed, r.iterations, r.residual
            ));
        }
        let shown = sc.best().unwrap_or(&sc.fixed_points[0]);
        let bundle = shown.measure.bundle();
        let lipschitz = if sc.best.is_some() {
            let s = graph_samples(&bundle, &self.params);
            Some(velocity_graph_lipschitz(&s, &[(0.05, 0.5)])[0])
        } else {
            None
        };
        let mut paths = Table::new(&["path", "t", "x"]);
        for (k, node) in bundle.nodes.iter().enumerate() {
            for (i, x) in node.iter().enumerate() {
                paths.push(vec![i.to_string(), num(bundle.time(k)), num(*x)]);
            }
        }
        if let Some(best) = sc.best() {
            out.residual("transport.residual", *best.residuals.last().expect("a converged run iterated"));
            out.residual("transport.gap", (best.a - b).abs());
            out.residual("transport.marginals", best.measure.marginal_defect());
            out.residual("transport.lipschitz", lipschitz.expect("best exists"));
        }
        let report = Report {
            minus: boundary.minus.clone(),
            plus: boundary.plus.clone(),
            speed_bound: speed_bound(&boundary, &self.params.potential),
            best: sc.best,
            a: sc.a(),
            b,
            gap: sc.a().map(|a| (a - b).abs()),
            graph_lipschitz: lipschitz,
            runs,
        };
        out.artifacts.push(Artifact::json("transport.json", &report)?);
        out.artifacts.push(Artifact::csv("paths.csv", &paths));
        Ok(out)
    }

    fn kam(&mut self) -> Result<Outcome> {
        let mut out = Outcome::new(Command::Kam);
        let sk = self
            .scenario
            .kam
            .as_ref()
            .ok_or_else(|| Error::Config("the scenario has no [kam] section".into()))?;
        let spec = sk.rotation()?;
        let dio = diophantine_check(&spec, sk.q_max);
        if !dio.pass {
            out.flags.push(format!(
                "kam: omega = {} fails the diophantine bound at q = {} (margin {})",
                spec.omega, dio.worst_q, dio.worst_margin
            ));
        }
        let modes = sk.modes.unwrap_or_else(|| default_modes(spec.q));
        let opts = sk.options();
        let mut t = Table::new(&[
            "epsilon",
            "p",
            "q",
            "action",
            "rotation",
            "grad_norm",
            "iterations",
            "converged",
            "constraint_defect",
            "hull_residual",
            "hull_monotone",
            "lipschitz_fit",
        ]);
        let mut defect: f64 = 0.0;
        let mut hulls = vec![];
        let base = self.scenario.potential();
        for &eps in &sk.epsilons {
            let pot = base.clone().with_epsilon(eps);
            let r = periodic_minimizer(&spec, &pot, &opts)?;
            let fit = hull_residual(&r, modes);
            let params = ModelParams::new(spec.q as usize, 0.0, pot)?;
            let lip = velocity_graph_lipschitz(&graph_samples(&r.path, &params), &[(0.05, 0.5)])[0];
            if !r.converged {
                out.flags.push(format!(
                    "kam at epsilon = {eps}: gradient {:e} after {} iterations",
                    r.grad_norm, r.iterations
                ));
            }
            if !fit.monotone {
                out.flags.push(format!("kam at epsilon = {eps}: fitted hull is not monotone"));
            }
            defect = defect.max(r.constraint_defect());
            if eps == 0.0 {
                let w = spec.ratio();
                out.residual("kam.rigid_action", (r.action - 0.5 * w * w).abs());
                out.residual("kam.rigid_hull", fit.residual);
            }
            hulls.push((eps, fit.residual));
            t.push(vec![
                num(eps),
                spec.p.to_string(),
                spec.q.to_string(),
                num(r.action),
                num(r.rotation),
                num(r.grad_norm),
                r.iterations.to_string(),
                r.converged.to_string(),
                num(r.constraint_defect()),
                num(fit.residual),
                fit.monotone.to_string(),
                num(lip),
            ]);
        }
        let at = |e: f64| hulls.iter().find(|h| h.0 == e).map(|h| h.1);
        if let (Some(small), Some(large)) = (at(1e-3), at(1e-2)) {
            out.residual("kam.hull_order", small - large);
        }
        out.residual("kam.constraint_defect", defect);
        out.residual("kam.diophantine_margin", dio.worst_margin);
        out.artifacts.push(Artifact::csv("kam.csv", &t));
        Ok(out)
    }

    fn verify(&mut self) -> Result<Outcome> {
        let mut out = Outcome::new(Command::Verify);
        let mut commands = vec![Command::Alpha, Command::Beta, Command::Value, Command::Orbit, Command::Aubry];
        if self.scenario.transport.is_some() {
            commands.push(Command::Transport);
        }
        if self.scenario.kam.is_some() {
            commands.push(Command::Kam);
        }
        for c in commands {
            let o = self.run(c)?;
            out.absorb(o);
        }
        out.flags.sort();
        out.flags.dedup();
        let free = self.params.potential.is_free();
        out.checks = limits(free)
            .into_iter()
            .map(|(name, limit, rule)| {
                let value = out.residuals.get(name).copied();
                let status = match (value, rule) {
                    (None, _) => Status::Skip,
                    (Some(v), Rule::AtMost) if v <= limit => Status::Pass,
                    (Some(v), Rule::Below) if v < limit => Status::Pass,
                    (Some(v), Rule::Finite) if v.is_finite() => Status::Pass,
                    _ => Status::Fail,
                };
                Check {
                    name: name.to_string(),
                    value: value.unwrap_or(f64::NAN),
                    limit,
                    status,
                }
            })
            .collect();
        let mut t = Table::new(&["check", "value", "limit", "status"]);
        for c in &out.checks {
            t.push(vec![c.name.clone(), num(c.value), num(c.limit), c.status.to_string()]);
        }
        out.artifacts.push(Artifact::csv("verify.csv", &t));
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
enum Rule {
    AtMost,
    Below,
    Finite,
}

/// Residual keys judged by `verify`, with their limits.
fn limits(free: bool) -> Vec<(&'static str, f64, Rule)> {
    use Rule::*;
    vec![
        ("kernel.unconverged", 0.0, AtMost),
        ("alpha.max_residual", 1e-6, AtMost),
        ("alpha.max_cycle_gap", 1e-6, AtMost),
        ("duality.fenchel_young_violation", 1e-9, AtMost),
        ("duality.equality_defect", 1e-3, AtMost),
        ("duality.alpha_convexity", 1e-9, AtMost),
        ("duality.beta_convexity", 1e-9, AtMost),
        ("value.order", 1e-9, AtMost),
        ("value.domination", 1e-6, AtMost),
        ("value.calibration", 1e-6, AtMost),
        ("value.hj_residual", 5e-3, AtMost),
        ("value.semiconcavity", 1e-4, AtMost),
        ("orbit.min_action_gap", 5e-3, AtMost),
        ("orbit.rotation_excess", 1e-6, AtMost),
        ("orbit.speed_excess", 0.0, AtMost),
        ("orbit.accel_excess", 1e-8, AtMost),
        ("orbit.chain_calibration", 1e-6, AtMost),
        ("aubry.disagreement", 0.0, AtMost),
        ("aubry.lower_bound", 1e-8, AtMost),
        ("aubry.bellman", 1e-9, AtMost),
        ("aubry.lipschitz", f64::INFINITY, Finite),
        ("transport.residual", 1e-8, Below),
        ("transport.gap", if free { 1e-10 } else { 1e-4 }, AtMost),
        ("transport.marginals", 1e-12, AtMost),
        ("transport.lipschitz", f64::INFINITY, Finite),
        ("kam.constraint_defect", 1e-12, AtMost),
        ("kam.rigid_action", 1e-12, AtMost),
        ("kam.rigid_hull", 1e-12, AtMost),
        ("kam.hull_order", 0.0, Below),
    ]
}
