//! Scenario files: one TOML document per run.
//!
//! Every section is optional and falls back to the defaults of the module it
//! configures. Errors carry the line and column of the offending key.
//!
//! ```
//! use mfkam::scenario::Scenario;
//!
//! let s = Scenario::parse(
//!     r#"
//! name = "pendulum"
//! [model]
//! n = 1
//! v = [{ freq_x = 1, kind = "cos", amplitude = 0.3 }]
//! [grid]
//! resolution = 32
//! "#,
//!     "pendulum.toml",
//! )
//! .unwrap();
//! assert_eq!(s.grid.resolution, 32);
//! assert_eq!(s.solver.levels, vec![16, 32, 64]);
//!
//! let err = Scenario::parse("name = \"bad\"\n[grid]\nresolution = 1\n", "bad.toml").unwrap_err();
//! assert!(err.to_string().starts_with("bad.toml:3:1:"));
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action::BvpOptions;
use crate::aubry::MembershipTol;
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::kam::{KamOptions, RotationSpec};
use crate::model::{ModelParams, PotentialSpec, VTerm, WTerm};
use crate::transport::{BoundaryPair, TransportOptions};
use crate::weakkam::IterOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Output directory, relative to the working directory.
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub value: ValueSection,
    #[serde(default)]
    pub alpha: AlphaSection,
    #[serde(default)]
    pub beta: BetaSection,
    #[serde(default)]
    pub orbit: OrbitSection,
    #[serde(default)]
    pub aubry: AubrySection,
    #[serde(default)]
    pub transport: Option<TransportSection>,
    #[serde(default)]
    pub kam: Option<KamSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n: usize,
    pub c: f64,
    pub epsilon: f64,
    pub v: Vec<VTerm>,
    pub w: Vec<WTerm>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            n: 1,
            c: 0.0,
            epsilon: 1.0,
            v: vec![],
            w: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub resolution: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { resolution: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub levels: Vec<usize>,
    pub grad_tol: f64,
    pub max_iter: usize,
    pub refine_margin: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let b = BvpOptions::default();
        Self {
            levels: b.levels,
            grad_tol: b.grad_tol,
            max_iter: b.max_iter,
            refine_margin: b.refine_margin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValueSection {
    pub tol: f64,
    pub max_sweeps: usize,
    pub damping: f64,
    /// Random test paths of the domination check.
    pub domination_paths: usize,
    /// Largest lattice offset probed by the semiconcavity check.
    pub semiconcavity_step: i64,
    /// Unit steps of the calibrated curves.
    pub curve_horizon: usize,
}

impl Default for ValueSection {
    fn default() -> Self {
        let i = IterOptions::default();
        Self {
            tol: i.tol,
            max_sweeps: i.max_sweeps,
            damping: i.damping,
            domination_paths: 200,
            semiconcavity_step: 2,
            curve_horizon: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlphaSection {
    pub cs: Vec<f64>,
}

impl Default for AlphaSection {
    fn default() -> Self {
        Self {
            cs: vec![-1.0, -0.5, 0.0, 0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BetaSection {
    /// Increasing `c` grid on which `α` is tabulated.
    pub cs: Vec<f64>,
    pub rhos: Vec<f64>,
}

impl Default for BetaSection {
    fn default() -> Self {
        Self {
            cs: (0..=16).map(|i| -2.0 + 0.25 * i as f64).collect(),
            rhos: vec![0.0, 0.3, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrbitSection {
    /// Grid nodes from which calibrated chains start.
    pub seeds: Vec<usize>,
    /// Unit steps of each chain.
    pub horizon: usize,
    /// Sample every `stride`-th node of the finest time grid.
    pub stride: usize,
    pub spread_tol: f64,
    /// Length of the free flow continued from the end of each chain.
    pub flow_duration: f64,
    pub flow_step: f64,
}

impl Default for OrbitSection {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            horizon: 16,
            stride: 4,
            spread_tol: 1e-6,
            flow_duration: 8.0,
            flow_step: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AubrySection {
    /// Largest step count of the barrier table.
    pub depth: usize,
    pub osc_tol: f64,
    pub barrier_tol: f64,
    pub conjugate_tol: f64,
}

impl Default for AubrySection {
    fn default() -> Self {
        let m = MembershipTol::default();
        Self {
            depth: 64,
            osc_tol: 1e-6,
            barrier_tol: m.barrier,
            conjugate_tol: m.conjugate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportSection {
    /// Lifted particle positions at `t = −1`.
    pub minus: Vec<f64>,
    /// Lifted particle positions at `t = 1`.
    pub plus: Vec<f64>,
    #[serde(default = "default_transport_damping")]
    pub damping: f64,
    #[serde(default = "default_transport_tol")]
    pub tol: f64,
    #[serde(default = "default_transport_iter")]
    pub max_iter: usize,
    #[serde(default = "default_transport_steps")]
    pub steps: usize,
}

fn default_transport_damping() -> f64 {
    TransportOptions::default().damping
}
fn default_transport_tol() -> f64 {
    TransportOptions::default().tol
}
fn default_transport_iter() -> usize {
    TransportOptions::default().max_iter
}
fn default_transport_steps() -> usize {
    TransportOptions::default().steps
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KamSection {
    pub omega: f64,
    /// Smallest denominator of the convergent used.
    pub min_q: i64,
    pub gamma: f64,
    pub tau: f64,
    pub epsilons: Vec<f64>,
    pub steps: usize,
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Fourier modes of the hull fit; `2⌈q/4⌉` when absent.
    pub modes: Option<usize>,
    /// Largest denominator probed by the diophantine check.
    pub q_max: i64,
}

impl Default for KamSection {
    fn default() -> Self {
        let k = KamOptions::default();
        Self {
            omega: (5f64.sqrt() - 1.0) / 2.0,
            min_q: 21,
            gamma: 0.2,
            tau: 1.0,
            epsilons: vec![0.0, 1e-3, 1e-2],
            steps: k.steps,
            grad_tol: k.grad_tol,
            max_iter: k.max_iter,
            modes: None,
            q_max: 1000,
        }
    }
}

impl KamSection {
    pub fn rotation(&self) -> Result<RotationSpec> {
        RotationSpec::from_convergent(self.omega, self.min_q, self.gamma, self.tau)
    }

    pub fn options(&self) -> KamOptions {
        KamOptions {
            steps: self.steps,
            grad_tol: self.grad_tol,
            max_iter: self.max_iter,
        }
    }
}

/// Line and column (both 1-based) of a byte offset.
fn line_col(source: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(source.len());
    let before = &source[..offset];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(offset, |i| offset - i - 1) + 1;
    (line, col)
}

/// Position of `key` inside `[section]`, or of the section header, or the
/// start of the file.
fn locate(source: &str, section: &str, key: &str) -> (usize, usize) {
    let mut current = String::new();
    let mut header = None;
    for (i, raw) in source.lines().enumerate() {
        let line = raw.trim_start();
        let indent = raw.len() - line.len();
        if let Some(rest) = line.strip_prefix('[') {
            current = rest.trim_start_matches('[').split(']').next().unwrap_or("").trim().to_string();
            if current == section && header.is_none() {
                header = Some((i + 1, indent + 1));
            }
            continue;
        }
        if current != section || key.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix(key) {
            if rest.trim_start().starts_with('=') {
                return (i + 1, indent + 1);
            }
        }
    }
    header.unwrap_or((1, 1))
}

struct Checker<'a> {
    source: &'a str,
    origin: &'a str,
}

impl Checker<'_> {
    fn fail(&self, section: &str, key: &str, msg: impl std::fmt::Display) -> Error {
        let (line, col) = locate(self.source, section, key);
        Error::Config(format!("{}:{line}:{col}: {msg}", self.origin))
    }

    fn require(&self, ok: bool, section: &str, key: &str, msg: impl std::fmt::Display) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(self.fail(section, key, msg))
        }
    }
}

impl Scenario {
    /// Reads and validates a scenario file.
    pub fn load(path: &Path) -> Result<Self> {
        let source = std::fs::read_to_string(path)?;
        Self::parse(&source, &path.display().to_string())
    }

    /// Parses and validates a scenario; `origin` names it in error messages.
    pub fn parse(source: &str, origin: &str) -> Result<Self> {
        let scenario: Scenario = toml::from_str(source).map_err(|e| {
            let (line, col) = e.span().map_or((1, 1), |s| line_col(source, s.start));
            Error::Config(format!("{origin}:{line}:{col}: {}", e.message().trim()))
        })?;
        scenario.validate(&Checker { source, origin })?;
        Ok(scenario)
    }

    fn validate(&self, ck: &Checker) -> Result<()> {
        let m = &self.model;
        ck.require(!self.name.trim().is_empty(), "", "name", "name must not be empty")?;
        ck.require(m.c.is_finite(), "model", "c", "c must be finite")?;
        self.potential()
            .validate()
            .map_err(|e| ck.fail("model", "", e))?;
        GridSpec::new(m.n, self.grid.resolution).map_err(|e| {
            let key = if (1..=3).contains(&m.n) { "resolution" } else { "n" };
            let section = if key == "n" { "model" } else { "grid" };
            ck.fail(section, key, e)
        })?;

        let s = &self.solver;
        ck.require(
            !s.levels.is_empty() && s.levels.windows(2).all(|w| w[0] < w[1]) && s.levels[0] > 0,
            "solver",
            "levels",
            "levels must be a non-empty increasing list of positive step counts",
        )?;
        ck.require(s.grad_tol > 0.0, "solver", "grad_tol", "grad_tol must be positive")?;
        ck.require(s.max_iter > 0, "solver", "max_iter", "max_iter must be positive")?;
        ck.require(s.refine_margin >= 0.0, "solver", "refine_margin", "refine_margin must be non-negative")?;

        let v = &self.value;
        ck.require(v.tol > 0.0, "value", "tol", "tol must be positive")?;
        ck.require(v.max_sweeps > 0, "value", "max_sweeps", "max_sweeps must be positive")?;
        ck.require(
            v.damping > 0.0 && v.damping <= 1.0,
            "value",
            "damping",
            "damping must lie in (0, 1]",
        )?;
        ck.require(v.semiconcavity_step >= 1, "value", "semiconcavity_step", "semiconcavity_step must be at least 1")?;
        ck.require(v.curve_horizon >= 1, "value", "curve_horizon", "curve_horizon must be at least 1")?;

        ck.require(
            !self.alpha.cs.is_empty() && self.alpha.cs.iter().all(|c| c.is_finite()),
            "alpha",
            "cs",
            "cs must be a non-empty list of finite numbers",
        )?;
        let b = &self.beta;
        ck.require(
            b.cs.len() >= 3 && b.cs.windows(2).all(|w| w[0] < w[1]),
            "beta",
            "cs",
            "cs must be strictly increasing with at least three entries",
        )?;
        ck.require(b.rhos.iter().all(|r| r.is_finite()), "beta", "rhos", "rhos must be finite")?;

        let o = &self.orbit;
        let nodes = GridSpec::new(m.n, self.grid.resolution)?.node_count();
        ck.require(!o.seeds.is_empty(), "orbit", "seeds", "seeds must not be empty")?;
        if let Some(bad) = o.seeds.iter().find(|&&i| i >= nodes) {
            return Err(ck.fail("orbit", "seeds", format!("seed node {bad} is outside the grid of {nodes} nodes")));
        }
        ck.require(o.horizon >= 2, "orbit", "horizon", "horizon must be at least 2")?;
        let finest = *s.levels.last().unwrap();
        ck.require(
            o.stride >= 1 && finest % o.stride == 0,
            "orbit",
            "stride",
            format!("stride must divide the finest level {finest}"),
        )?;
        ck.require(o.spread_tol > 0.0, "orbit", "spread_tol", "spread_tol must be positive")?;
        ck.require(o.flow_duration > 0.0, "orbit", "flow_duration", "flow_duration must be positive")?;
        ck.require(o.flow_step > 0.0, "orbit", "flow_step", "flow_step must be positive")?;

        let a = &self.aubry;
        ck.require(a.depth >= 2, "aubry", "depth", "depth must be at least 2")?;
        for (key, val) in [("osc_tol", a.osc_tol), ("barrier_tol", a.barrier_tol), ("conjugate_tol", a.conjugate_tol)] {
            ck.require(val > 0.0, "aubry", key, format!("{key} must be positive"))?;
        }

        if let Some(t) = &self.transport {
            ck.require(t.minus.len() == m.n, "transport", "minus", format!("minus needs {} positions", m.n))?;
            ck.require(t.plus.len() == m.n, "transport", "plus", format!("plus needs {} positions", m.n))?;
            BoundaryPair::new(t.minus.clone(), t.plus.clone()).map_err(|e| ck.fail("transport", "minus", e))?;
            ck.require(
                t.damping > 0.0 && t.damping <= 1.0,
                "transport",
                "damping",
                "damping must lie in (0, 1]",
            )?;
            ck.require(t.tol > 0.0, "transport", "tol", "tol must be positive")?;
            ck.require(t.steps >= 2 && t.steps % 2 == 0, "transport", "steps", "steps must be even and at least 2")?;
        }

        if let Some(k) = &self.kam {
            k.rotation().map_err(|e| ck.fail("kam", "min_q", e))?;
            ck.require(k.epsilons.iter().all(|e| e.is_finite()), "kam", "epsilons", "epsilons must be finite")?;
            ck.require(k.steps >= 2, "kam", "steps", "steps must be at least 2")?;
            ck.require(k.q_max >= 1, "kam", "q_max", "q_max must be positive")?;
        }
        Ok(())
    }

    pub fn potential(&self) -> PotentialSpec {
        PotentialSpec {
            v: self.model.v.clone(),
            w: self.model.w.clone(),
            epsilon: self.model.epsilon,
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        ModelParams::new(self.model.n, self.model.c, self.potential())
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.model.n, self.grid.resolution)
    }

    pub fn bvp_options(&self) -> BvpOptions {
        BvpOptions {
            levels: self.solver.levels.clone(),
            grad_tol: self.solver.grad_tol,
            max_iter: self.solver.max_iter,
            refine_margin: self.solver.refine_margin,
        }
    }

    pub fn iter_options(&self) -> IterOptions {
        IterOptions {
            tol: self.value.tol,
            max_sweeps: self.value.max_sweeps,
            damping: self.value.damping,
        }
    }

    pub fn membership_tol(&self) -> MembershipTol {
        MembershipTol {
            barrier: self.aubry.barrier_tol,
            conjugate: self.aubry.conjugate_tol,
        }
    }

    pub fn transport_options(&self) -> Option<TransportOptions> {
        self.transport.as_ref().map(|t| TransportOptions {
            damping: t.damping,
            tol: t.tol,
            max_iter: t.max_iter,
            steps: t.steps,
        })
    }

    /// SHA-256 of the parsed scenario without its output directory, so that
    /// equivalent files hash alike wherever they write.
    pub fn hash_hex(&self) -> String {
        let mut copy = self.clone();
        copy.output = None;
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&copy).expect("scenario serializes"));
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_sections() {
        let s = Scenario::parse("name = \"free\"\n", "free.toml").unwrap();
        assert_eq!(s.model.n, 1);
        assert!(s.potential().is_free());
        assert_eq!(s.bvp_options(), BvpOptions::default());
        assert_eq!(s.iter_options(), IterOptions::default());
        assert!(s.transport.is_none());
        assert!(s.kam.is_none());
    }

    #[test]
    fn syntax_errors_point_at_the_line() {
        let src = "name = \"x\"\n[model]\nn = 2\nc = oops\n";
        let e = Scenario::parse(src, "s.toml").unwrap_err().to_string();
        assert!(e.starts_with("s.toml:4:"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let src = "name = \"x\"\n[grid]\nresolution = 8\nresolutoin = 9\n";
        let e = Scenario::parse(src, "s.toml").unwrap_err().to_string();
        assert!(e.starts_with("s.toml:4:"), "{e}");
        assert!(e.contains("resolutoin"), "{e}");
    }

    #[test]
    fn semantic_errors_point_at_the_key() {
        let src = "name = \"x\"\n[model]\nn = 1\n\n[orbit]\nhorizon = 8\n  stride = 7\n";
        let e = Scenario::parse(src, "s.toml").unwrap_err().to_string();
        assert!(e.starts_with("s.toml:7:3:"), "{e}");

        let src = "name = \"x\"\n[model]\nn = 2\n[transport]\nminus = [0.0]\nplus = [0.1, 0.2]\n";
        let e = Scenario::parse(src, "s.toml").unwrap_err().to_string();
        assert!(e.starts_with("s.toml:5:1:"), "{e}");

        let src = "name = \"x\"\n[model]\nn = 7\n";
        let e = Scenario::parse(src, "s.toml").unwrap_err().to_string();
        assert!(e.starts_with("s.toml:3:1:"), "{e}");
    }

    #[test]
    fn hash_ignores_output_only() {
        let a = Scenario::parse("name = \"x\"\noutput = \"a\"\n", "a").unwrap();
        let b = Scenario::parse("name = \"x\"\noutput = \"b\"\n", "b").unwrap();
        let c = Scenario::parse("name = \"x\"\nseed = 3\n", "c").unwrap();
        assert_eq!(a.hash_hex(), b.hash_hex());
        assert_ne!(a.hash_hex(), c.hash_hex());
    }
}
