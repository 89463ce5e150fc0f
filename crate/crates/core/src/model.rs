//! External potential `V`, pair interaction `W`, and the `n`-particle
//! mean-field Lagrangian and Hamiltonian built from them.
//!
//! Both potentials are finite Fourier series, so they are exactly periodic
//! and every derivative is available in closed form. `W` is a cosine series
//! shifted so that `W(0) = 0`; it is even by construction.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::torus::weighted_dot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Cos,
    Sin,
}

/// One term `amplitude · cos|sin(2π (freq_t t + freq_x x))` of `V`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VTerm {
    #[serde(default)]
    pub freq_t: i32,
    pub freq_x: i32,
    pub kind: Phase,
    pub amplitude: f64,
}

/// One term `amplitude · (cos(2π freq x) − 1)` of `W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WTerm {
    pub freq: u32,
    pub amplitude: f64,
}

fn default_epsilon() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    #[serde(default)]
    pub v: Vec<VTerm>,
    #[serde(default)]
    pub w: Vec<WTerm>,
    /// Common amplitude applied to both potentials.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl Default for PotentialSpec {
    fn default() -> Self {
        Self::free()
    }
}

impl PotentialSpec {
    pub fn free() -> Self {
        Self {
            v: vec![],
            w: vec![],
            epsilon: 1.0,
        }
    }

    /// `V(x) = amplitude · cos 2πx`, no interaction.
    pub fn pendulum(amplitude: f64) -> Self {
        Self {
            v: vec![VTerm {
                freq_t: 0,
                freq_x: 1,
                kind: Phase::Cos,
                amplitude,
            }],
            w: vec![],
            epsilon: 1.0,
        }
    }

    /// `W(θ) = kappa · (1 − cos 2πθ)`, no external potential.
    pub fn attractive_cosine(kappa: f64) -> Self {
        Self {
            v: vec![],
            w: vec![WTerm {
                freq: 1,
                amplitude: -kappa,
            }],
            epsilon: 1.0,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() {
            return Err(Error::Validation("epsilon must be finite".into()));
        }
        for t in &self.v {
            if !t.amplitude.is_finite() {
                return Err(Error::Validation("V amplitudes must be finite".into()));
            }
        }
        for t in &self.w {
            if !t.amplitude.is_finite() {
                return Err(Error::Validation("W amplitudes must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn is_time_dependent(&self) -> bool {
        self.v.iter().any(|t| t.freq_t != 0 && t.amplitude != 0.0)
    }

    pub fn is_free(&self) -> bool {
        self.epsilon == 0.0
            || (self.v.iter().all(|t| t.amplitude == 0.0)
                && self.w.iter().all(|t| t.amplitude == 0.0))
    }

    /// `∂_x^k V(t, x)` for `k ∈ {0, 1, 2}`.
    pub fn v_deriv(&self, k: u8, t: f64, x: f64) -> f64 {
        let mut s = 0.0;
        for term in &self.v {
            let w = TAU * term.freq_x as f64;
            let arg = TAU * term.freq_t as f64 * t + w * x;
            let (sn, cs) = arg.sin_cos();
            s += term.amplitude
                * match (term.kind, k) {
                    (Phase::Cos, 0) => cs,
                    (Phase::Cos, 1) => -w * sn,
                    (Phase::Cos, _) => -w * w * cs,
                    (Phase::Sin, 0) => sn,
                    (Phase::Sin, 1) => w * cs,
                    (Phase::Sin, _) => -w * w * sn,
                };
        }
        self.epsilon * s
    }

    pub fn v(&self, t: f64, x: f64) -> f64 {
        self.v_deriv(0, t, x)
    }

    /// `∂_x^k W(x)` for `k ∈ {0, 1, 2}`.
    pub fn w_deriv(&self, k: u8, x: f64) -> f64 {
        let mut s = 0.0;
        for term in &self.w {
            let w = TAU * term.freq as f64;
            let (sn, cs) = (w * x).sin_cos();
            s += term.amplitude
                * match k {
                    0 => cs - 1.0,
                    1 => -w * sn,
                    _ => -w * w * cs,
                };
        }
        self.epsilon * s
    }

    pub fn w(&self, x: f64) -> f64 {
        self.w_deriv(0, x)
    }

    /// Upper bound on `sup |∂^k V|` from the coefficients.
    pub fn v_sup(&self, k: i32) -> f64 {
        self.epsilon.abs()
            * self
                .v
                .iter()
                .map(|t| t.amplitude.abs() * (TAU * t.freq_x.abs() as f64).powi(k))
                .sum::<f64>()
    }

    /// Upper bound on `sup |∂^k W|`; the constant shift doubles the `k = 0`
    /// bound.
    pub fn w_sup(&self, k: i32) -> f64 {
        let s: f64 = self
            .w
            .iter()
            .map(|t| t.amplitude.abs() * (TAU * t.freq as f64).powi(k))
            .sum();
        let s = if k == 0 { 2.0 * s } else { s };
        self.epsilon.abs() * s
    }

    /// Upper bound on `sup (V̄ + W̄)` and on `sup |V̄ + W̄|`.
    pub fn mean_potential_sup(&self) -> f64 {
        self.v_sup(0) + 0.5 * self.w_sup(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub n: usize,
    pub c: f64,
    pub potential: PotentialSpec,
}

impl ModelParams {
    pub fn new(n: usize, c: f64, potential: PotentialSpec) -> Result<Self> {
        if n == 0 {
            return Err(Error::Validation("particle count n must be at least 1".into()));
        }
        if !c.is_finite() {
            return Err(Error::Validation("c must be finite".into()));
        }
        potential.validate()?;
        Ok(Self { n, c, potential })
    }

    pub fn with_c(&self, c: f64) -> Self {
        Self { c, ..self.clone() }
    }

    fn check(&self, len: usize) -> Result<()> {
        if len != self.n {
            return Err(Error::Dimension {
                expected: self.n,
                got: len,
            });
        }
        Ok(())
    }
}

/// `V̄ = (1/n) Σ V(t, q_i)` and `W̄ = (1/(2n²)) Σ_{i,j} W(q_i − q_j)`.
pub fn eval_mean_potentials(pot: &PotentialSpec, t: f64, q: &[f64]) -> (f64, f64) {
    let n = q.len() as f64;
    let vbar = q.iter().map(|&x| pot.v(t, x)).sum::<f64>() / n;
    let mut wsum = 0.0;
    if !pot.w.is_empty() {
        for (i, &a) in q.iter().enumerate() {
            for &b in &q[i + 1..] {
                wsum += pot.w(a - b);
            }
        }
    }
    // off-diagonal pairs appear twice, the diagonal vanishes
    (vbar, 2.0 * wsum / (2.0 * n * n))
}

/// `ℒ_c = (1/n) Σ (½ v_i² − c v_i) − V̄ − W̄`.
pub fn lagrangian(t: f64, q: &[f64], v: &[f64], params: &ModelParams) -> Result<f64> {
    params.check(q.len())?;
    params.check(v.len())?;
    let n = q.len() as f64;
    let kin = v.iter().map(|x| 0.5 * x * x - params.c * x).sum::<f64>() / n;
    let (vb, wb) = eval_mean_potentials(&params.potential, t, q);
    Ok(kin - vb - wb)
}

/// `ℋ_c = ½ ‖c + p‖² + V̄ + W̄` with the weighted norm.
pub fn hamiltonian(t: f64, q: &[f64], p: &[f64], params: &ModelParams) -> Result<f64> {
    params.check(q.len())?;
    params.check(p.len())?;
    let n = q.len() as f64;
    let kin = p.iter().map(|x| 0.5 * (params.c + x).powi(2)).sum::<f64>() / n;
    let (vb, wb) = eval_mean_potentials(&params.potential, t, q);
    Ok(kin + vb + wb)
}

/// Mean-field force: `−V′(t, q_i) − (1/n) Σ_j W′(q_i − q_j)`.
pub fn force(pot: &PotentialSpec, t: f64, q: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; q.len()];
    force_into(pot, t, q, &mut out);
    out
}

pub(crate) fn force_into(pot: &PotentialSpec, t: f64, q: &[f64], out: &mut [f64]) {
    let n = q.len() as f64;
    for (o, &x) in out.iter_mut().zip(q) {
        *o = -pot.v_deriv(1, t, x);
    }
    if !pot.w.is_empty() {
        for i in 0..q.len() {
            for j in i + 1..q.len() {
                let f = pot.w_deriv(1, q[i] - q[j]) / n;
                out[i] -= f;
                out[j] += f;
            }
        }
    }
}

/// Hessian of `V̄ + W̄` with respect to the positions, row-major `n × n`.
pub(crate) fn mean_potential_hessian_into(pot: &PotentialSpec, t: f64, q: &[f64], out: &mut [f64]) {
    let k = q.len();
    let n = k as f64;
    out.iter_mut().for_each(|x| *x = 0.0);
    for i in 0..k {
        out[i * k + i] = pot.v_deriv(2, t, q[i]) / n;
    }
    if !pot.w.is_empty() {
        for i in 0..k {
            for j in i + 1..k {
                let h = pot.w_deriv(2, q[i] - q[j]) / (n * n);
                out[i * k + i] += h;
                out[j * k + j] += h;
                out[i * k + j] -= h;
                out[j * k + i] -= h;
            }
        }
    }
}

/// `⟨a, b⟩` with uniform weights, re-exported for the Fenchel identity.
pub fn pairing(a: &[f64], b: &[f64]) -> f64 {
    weighted_dot(a, b)
}
