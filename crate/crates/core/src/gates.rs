//! Binary concrete, stretched concrete and hard concrete gate distributions.
//!
//! A gate sample is produced by drawing `u ~ U(0, 1)`, forming the binary
//! concrete `s = sigmoid((logit(u) + log_alpha) / beta)`, stretching it to
//! `s_bar = s * (zeta - gamma) + gamma` and rectifying with the hard sigmoid
//! `z = min(1, max(0, s_bar))`. The rectification folds the stretched mass
//! below 0 and above 1 into point masses at exactly 0 and 1.
//!
//! Uniform draws are clamped to `[1e-12, 1 - 1e-12]` before the logit so the
//! sampler never produces infinities.

use crate::autodiff::{hard_sigmoid, sigmoid, AutodiffError, Graph, Var};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GateError {
    #[error("invalid gate parameters: {0}")]
    InvalidParams(String),
    #[error("{what} = {value} is outside the support {support}")]
    Domain {
        what: &'static str,
        value: f64,
        support: String,
    },
    #[error("truncation interval ({lo}, {hi}) carries no probability mass")]
    ZeroMass { lo: f64, hi: f64 },
}

type Result<T> = std::result::Result<T, GateError>;

pub const DEFAULT_BETA: f64 = 2.0 / 3.0;
pub const DEFAULT_GAMMA: f64 = -0.1;
pub const DEFAULT_ZETA: f64 = 1.1;

/// Hyperparameters shared by every gate of a network: temperature and stretch interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardConcrete {
    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,
}

impl Default for HardConcrete {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
            zeta: DEFAULT_ZETA,
        }
    }
}

impl HardConcrete {
    pub fn new(beta: f64, gamma: f64, zeta: f64) -> Result<Self> {
        let d = Self { beta, gamma, zeta };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(GateError::InvalidParams(format!(
                "temperature must lie in (0, 1], got {}",
                self.beta
            )));
        }
        if !(self.gamma < 0.0 && self.gamma.is_finite()) {
            return Err(GateError::InvalidParams(format!(
                "stretch lower bound must be negative, got {}",
                self.gamma
            )));
        }
        if !(self.zeta > 1.0 && self.zeta.is_finite()) {
            return Err(GateError::InvalidParams(format!(
                "stretch upper bound must exceed 1, got {}",
                self.zeta
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.zeta - self.gamma
    }

    /// `beta * log(-gamma / zeta)`, the location shift in the closed-form active probability.
    pub fn active_shift(&self) -> f64 {
        self.beta * (-self.gamma / self.zeta).ln()
    }

    pub fn params(&self, log_alpha: f64) -> GateParams {
        GateParams {
            log_alpha,
            dist: *self,
        }
    }
}

/// One gate: its location `log_alpha` plus the shared shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateParams {
    pub log_alpha: f64,
    pub dist: HardConcrete,
}

/// A single draw of the gate and its pre-rectification value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateDraw {
    pub s: f64,
    pub s_bar: f64,
    pub z: f64,
}

fn logit(p: f64) -> f64 {
    p.ln() - (1.0 - p).ln()
}

impl GateParams {
    pub fn new(log_alpha: f64, beta: f64, gamma: f64, zeta: f64) -> Result<Self> {
        let p = Self {
            log_alpha,
            dist: HardConcrete { beta, gamma, zeta },
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.dist.validate()?;
        if !self.log_alpha.is_finite() {
            return Err(GateError::InvalidParams(format!(
                "location must be finite, got {}",
                self.log_alpha
            )));
        }
        Ok(())
    }

    fn support(&self) -> String {
        format!("[{}, {}]", self.dist.gamma, self.dist.zeta)
    }

    /// Maps a uniform draw to a gate value; `u` is clamped away from 0 and 1.
    pub fn draw(&self, u: f64) -> GateDraw {
        let u = u.clamp(crate::rng::UNIFORM_CLAMP, 1.0 - crate::rng::UNIFORM_CLAMP);
        let HardConcrete { beta, gamma, zeta } = self.dist;
        let s = sigmoid((logit(u) + self.log_alpha) / beta);
        let s_bar = s * (zeta - gamma) + gamma;
        GateDraw {
            s,
            s_bar,
            z: hard_sigmoid(s_bar),
        }
    }

    /// CDF of the binary concrete on (0, 1).
    pub fn cdf_concrete(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        if s >= 1.0 {
            return 1.0;
        }
        sigmoid(self.dist.beta * logit(s) - self.log_alpha)
    }

    /// CDF of the stretched concrete on `[gamma, zeta]`.
    pub fn cdf_stretched(&self, x: f64) -> Result<f64> {
        let HardConcrete { gamma, zeta, .. } = self.dist;
        if !(gamma..=zeta).contains(&x) {
            return Err(GateError::Domain {
                what: "x",
                value: x,
                support: self.support(),
            });
        }
        Ok(self.cdf_concrete((x - gamma) / (zeta - gamma)))
    }

    /// Log density of the binary concrete at `s` in (0, 1).
    pub fn log_pdf_concrete(&self, s: f64) -> f64 {
        let beta = self.dist.beta;
        let (ls, l1s) = (s.ln(), (1.0 - s).ln());
        // log(alpha * s^-beta + (1 - s)^-beta) via log-sum-exp
        let (a, b) = (self.log_alpha - beta * ls, -beta * l1s);
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        beta.ln() + self.log_alpha + (-beta - 1.0) * (ls + l1s) - 2.0 * lse
    }

    /// Log density of the stretched concrete at `x` in (gamma, zeta).
    pub fn log_pdf_stretched(&self, x: f64) -> Result<f64> {
        let HardConcrete { gamma, zeta, .. } = self.dist;
        if !(x > gamma && x < zeta) {
            return Err(GateError::Domain {
                what: "x",
                value: x,
                support: format!("({gamma}, {zeta})"),
            });
        }
        let w = zeta - gamma;
        let t = (x - gamma) / w;
        if t <= 0.0 || t >= 1.0 {
            return Err(GateError::Domain {
                what: "x",
                value: x,
                support: format!("({gamma}, {zeta})"),
            });
        }
        Ok(self.log_pdf_concrete(t) - w.ln())
    }

    pub fn pdf_stretched(&self, x: f64) -> Result<f64> {
        self.log_pdf_stretched(x).map(f64::exp)
    }

    /// Inverse of [`Self::cdf_stretched`], in closed form.
    pub fn quantile_stretched(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(GateError::Domain {
                what: "u",
                value: u,
                support: "(0, 1)".into(),
            });
        }
        let HardConcrete { beta, gamma, zeta } = self.dist;
        let s = sigmoid((logit(u) + self.log_alpha) / beta);
        Ok(gamma + (zeta - gamma) * s)
    }

    /// Probability that the gate is non-zero, `sigmoid(log_alpha - beta * log(-gamma / zeta))`.
    pub fn prob_active(&self) -> f64 {
        sigmoid(self.log_alpha - self.dist.active_shift())
    }

    /// `(P(z = 0), P(z = 1))`.
    pub fn point_masses(&self) -> (f64, f64) {
        let p_zero = self.cdf_concrete(-self.dist.gamma / self.dist.width());
        let p_one = 1.0 - self.cdf_concrete((1.0 - self.dist.gamma) / self.dist.width());
        (p_zero, p_one)
    }

    /// Noise-free test-time gate `min(1, max(0, sigmoid(log_alpha) (zeta - gamma) + gamma))`.
    pub fn deterministic_gate(&self) -> f64 {
        hard_sigmoid(sigmoid(self.log_alpha) * self.dist.width() + self.dist.gamma)
    }

    /// Inverse-transform draw from the stretched concrete truncated to `(lo, hi)`.
    pub fn sample_truncated(&self, lo: f64, hi: f64, rng: &mut RngStream) -> Result<f64> {
        let (c_lo, mass) = self.truncation(lo, hi)?;
        Ok(self.truncated_from_uniform(lo, hi, c_lo, mass, rng.uniform_open()))
    }

    /// `(cdf(lo), cdf(hi) - cdf(lo))`, validating the interval.
    pub(crate) fn truncation(&self, lo: f64, hi: f64) -> Result<(f64, f64)> {
        if !(lo < hi) {
            return Err(GateError::ZeroMass { lo, hi });
        }
        let c_lo = self.cdf_stretched(lo)?;
        let c_hi = self.cdf_stretched(hi)?;
        let mass = c_hi - c_lo;
        if !(mass > 1e-12) {
            return Err(GateError::ZeroMass { lo, hi });
        }
        Ok((c_lo, mass))
    }

    pub(crate) fn truncated_from_uniform(&self, lo: f64, hi: f64, c_lo: f64, mass: f64, u: f64) -> f64 {
        let v = (c_lo + u * mass).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
        let x = self
            .quantile_stretched(v)
            .expect("v lies strictly inside (0, 1)");
        // keep rounding from landing on the (open) interval ends
        if x <= lo {
            lo.next_up()
        } else if x >= hi {
            hi.next_down()
        } else {
            x
        }
    }
}

/// Draws `n` hard concrete samples, returning `(z, s_bar)`.
pub fn sample_hard_concrete(params: &GateParams, rng: &mut RngStream, n: usize) -> Result<(Tensor, Tensor)> {
    params.validate()?;
    if n == 0 {
        return Err(GateError::InvalidParams("sample count must be at least 1".into()));
    }
    let (mut z, mut s_bar) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let d = params.draw(rng.uniform_open());
        z.push(d.z);
        s_bar.push(d.s_bar);
    }
    Ok((Tensor::vector(z), Tensor::vector(s_bar)))
}

/// Logistic noise `logit(u)` for a vector of gates, the parameter-free part of a draw.
pub fn logistic_noise(rng: &mut RngStream, n: usize) -> Tensor {
    Tensor::vector((0..n).map(|_| logit(rng.uniform_open())).collect())
}

/// Nodes of one differentiable gate draw.
#[derive(Debug, Clone, Copy)]
pub struct GateNodes {
    pub s_bar: Var,
    pub z: Var,
}

/// Reparameterized hard concrete draw inside a graph: `z` is differentiable in `log_alpha`.
pub fn hard_concrete_node(
    g: &mut Graph,
    log_alpha: Var,
    dist: &HardConcrete,
    noise: &Tensor,
) -> std::result::Result<GateNodes, AutodiffError> {
    let eps = g.constant(noise.clone());
    let shifted = g.add(log_alpha, eps)?;
    let scaled = g.scale(shifted, 1.0 / dist.beta)?;
    let s = g.sigmoid(scaled)?;
    let stretched = g.scale(s, dist.width())?;
    let s_bar = g.add_scalar(stretched, dist.gamma)?;
    let z = g.hard_sigmoid(s_bar)?;
    Ok(GateNodes { s_bar, z })
}

/// `1 - Q(s_bar <= 0)` for every entry of `log_alpha`, as a graph node.
pub fn prob_active_node(g: &mut Graph, log_alpha: Var, dist: &HardConcrete) -> std::result::Result<Var, AutodiffError> {
    let shifted = g.add_scalar(log_alpha, -dist.active_shift())?;
    g.sigmoid(shifted)
}
