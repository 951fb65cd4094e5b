//! Spike-and-slab diagnostics.
//!
//! With a Bernoulli(pi) prior on each gate, a point mass at zero for a
//! closed gate and a slab for an open one, the variational free energy
//! reduces (for point-estimated weights and a fixed coding cost `lambda`
//! per open gate) to the data term plus `sum_j KL(q(z_j) || p(z_j)) +
//! lambda sum_j q(z_j = 1)`. Dropping the non-negative gate KL leaves the
//! expected-L0 penalty `lambda sum_j pi_j`; [`spike_slab_equivalence_check`]
//! evaluates both forms of that penalty.
//!
//! For hard concrete gates the gate KL splits, by the chain rule of
//! relative entropy, into exact point-mass terms at 0 and 1 plus the
//! (0, 1) part, estimated by Monte Carlo over inverse-transform draws
//! of the truncated posterior ([`hard_concrete_kl`], [`gate_kl_penalty`]).

pub use crate::objective::{
    gate_kl_penalty, hard_concrete_kl, kl_discrete_part, spike_slab_equivalence_check, KlEstimate, SpikeSlabReport,
};

use crate::gates::GateParams;
use crate::objective::ObjectiveError;
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikeSlabConfig {
    /// Prior probability that a gate is open.
    pub prior_pi: f64,
    /// Nats paid for every open gate.
    pub lambda_code_cost: f64,
}

impl SpikeSlabConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(0.0..=1.0).contains(&self.prior_pi) || !(self.lambda_code_cost >= 0.0) {
            return Err(ObjectiveError::InvalidConfig(format!(
                "prior_pi {} must lie in [0, 1] and the code cost {} must be non-negative",
                self.prior_pi, self.lambda_code_cost
            )));
        }
        Ok(())
    }

    /// `sum_j KL(Bern(q_j) || Bern(prior_pi)) + lambda sum_j q_j` for Bernoulli gates.
    pub fn gate_penalty(&self, open_probs: &[f64]) -> Result<f64, ObjectiveError> {
        self.validate()?;
        let mut total = 0.0;
        for &q in open_probs {
            total += bernoulli_kl(q, self.prior_pi)? + self.lambda_code_cost * q;
        }
        Ok(total)
    }
}

/// `KL(Bern(q) || Bern(p))`.
pub fn bernoulli_kl(q: f64, p: f64) -> Result<f64, ObjectiveError> {
    if !(0.0..=1.0).contains(&q) || !(0.0..=1.0).contains(&p) {
        return Err(ObjectiveError::InvalidConfig(format!("probabilities {q}, {p}")));
    }
    let term = |a: f64, b: f64, at: &'static str| {
        if a == 0.0 {
            Ok(0.0)
        } else if b == 0.0 {
            Err(ObjectiveError::Divergence { at, mass: a })
        } else {
            Ok(a * (a / b).ln())
        }
    };
    Ok(term(q, p, "z = 1")? + term(1.0 - q, 1.0 - p, "z = 0")?)
}

/// Monte Carlo `KL(q(s_bar) || p(s_bar))` between the stretched variables
/// before rectification, returned as `(estimate, standard error)`.
pub fn stretched_kl(q: &GateParams, p: &GateParams, mc_samples: usize, rng: &mut RngStream) -> Result<(f64, f64), ObjectiveError> {
    q.validate()?;
    p.validate()?;
    if q.dist.gamma < p.dist.gamma || q.dist.zeta > p.dist.zeta {
        return Err(ObjectiveError::Divergence {
            at: "stretched support",
            mass: 1.0,
        });
    }
    if mc_samples < 2 {
        return Err(ObjectiveError::InvalidConfig("need at least two samples".into()));
    }
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..mc_samples {
        let x = q.draw(rng.uniform_open()).s_bar;
        let d = q.log_pdf_stretched(x)? - p.log_pdf_stretched(x)?;
        sum += d;
        sum_sq += d * d;
    }
    let m = mc_samples as f64;
    let mean = sum / m;
    let var = ((sum_sq - m * mean * mean) / (m - 1.0)).max(0.0);
    Ok((mean, (var / m).sqrt()))
}
