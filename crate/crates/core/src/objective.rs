//! The regularized training objective: error loss plus expected-L0
//! complexity, gate-aware L2 and an optional gate KL term.

use crate::autodiff::{sigmoid, AutodiffError, Graph, Var};
use crate::gates::{GateError, GateParams, HardConcrete};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error("no lambda configured for gate group `{0}`")]
    MissingLambda(String),
    #[error("invalid penalty configuration: {0}")]
    InvalidConfig(String),
    #[error("prior puts no mass on {at} where the posterior has mass {mass}")]
    Divergence { at: &'static str, mass: f64 },
}

type Result<T> = std::result::Result<T, ObjectiveError>;

/// A set of gates sharing one group size: every entry of `log_alpha`
/// switches `group_size` parameters on or off together.
#[derive(Debug, Clone)]
pub struct GateGroup {
    pub name: String,
    pub log_alpha: Var,
    pub group_size: usize,
    pub dist: HardConcrete,
}

/// Prior for the optional gate KL term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateKlConfig {
    pub prior_log_alpha: f64,
    pub prior: HardConcrete,
    pub weight: f64,
    pub mc_samples: usize,
}

impl GateKlConfig {
    pub const DEFAULT_MC_SAMPLES: usize = 64;

    pub fn prior_params(&self) -> GateParams {
        self.prior.params(self.prior_log_alpha)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PenaltyConfig {
    /// Coefficient of the complexity loss per gate group name.
    pub lambda: BTreeMap<String, f64>,
    pub l2_coeff: f64,
    pub gate_kl: Option<GateKlConfig>,
}

impl PenaltyConfig {
    /// One `lambda` shared by the given group names.
    pub fn uniform<S: Into<String>>(names: impl IntoIterator<Item = S>, lambda: f64) -> Self {
        Self {
            lambda: names.into_iter().map(|n| (n.into(), lambda)).collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, &l) in &self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(ObjectiveError::InvalidConfig(format!("lambda for `{name}` is {l}")));
            }
        }
        if !(self.l2_coeff >= 0.0 && self.l2_coeff.is_finite()) {
            return Err(ObjectiveError::InvalidConfig(format!("l2 coefficient is {}", self.l2_coeff)));
        }
        if let Some(kl) = &self.gate_kl {
            kl.prior_params().validate()?;
            if kl.mc_samples == 0 || !(kl.weight >= 0.0) {
                return Err(ObjectiveError::InvalidConfig(
                    "gate KL needs mc_samples >= 1 and a non-negative weight".into(),
                ));
            }
        }
        Ok(())
    }

    /// Converts coefficients given in units of `1/N` into absolute ones.
    pub fn per_example(&self, n: usize) -> Self {
        let n = n.max(1) as f64;
        Self {
            lambda: self.lambda.iter().map(|(k, v)| (k.clone(), v / n)).collect(),
            ..self.clone()
        }
    }

    /// Multiplies every lambda by `c`.
    pub fn scale_lambda(&self, c: f64) -> Self {
        Self {
            lambda: self.lambda.iter().map(|(k, v)| (k.clone(), v * c)).collect(),
            ..self.clone()
        }
    }
}

/// Expected number of non-zero parameters, `sum_g |g| (1 - Q(s_g <= 0))`.
pub fn l0_complexity(g: &mut Graph, groups: &[GateGroup]) -> Result<Var> {
    weighted_complexity(g, groups, |_| Ok(1.0))
}

fn weighted_complexity(
    g: &mut Graph,
    groups: &[GateGroup],
    weight: impl Fn(&GateGroup) -> Result<f64>,
) -> Result<Var> {
    if groups.is_empty() {
        return Err(ObjectiveError::InvalidConfig("no gate groups".into()));
    }
    let mut total: Option<Var> = None;
    for group in groups {
        let pa = crate::gates::prob_active_node(g, group.log_alpha, &group.dist)?;
        let s = g.sum(pa)?;
        let term = g.scale(s, group.group_size as f64 * weight(group)?)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("groups is non-empty"))
}

/// Gate-aware squared L2, `sum_g (1 - Q(s_g <= 0)) sum_j theta_gj^2`.
///
/// `weights[k]` holds the parameters of `groups[k]`, one row per gate.
pub fn l2_reparam_penalty(g: &mut Graph, groups: &[GateGroup], weights: &[Var]) -> Result<Var> {
    if groups.len() != weights.len() || groups.is_empty() {
        return Err(ObjectiveError::InvalidConfig(format!(
            "{} gate groups but {} weight tensors",
            groups.len(),
            weights.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (group, &w) in groups.iter().zip(weights) {
        let sq = g.mul(w, w)?;
        let per_gate = g.sum_cols(sq)?;
        let pa = crate::gates::prob_active_node(g, group.log_alpha, &group.dist)?;
        let weighted = g.mul(per_gate, pa)?;
        let term = g.sum(weighted)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("groups is non-empty"))
}

/// Nodes making up a regularized objective.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub total: Var,
    pub error: Var,
    /// `sum_g lambda_g |g| P(active)`.
    pub complexity: Var,
    pub l2: Option<Var>,
    pub gate_kl: Option<Var>,
}

/// `L_E + sum_g lambda_g L_C,g + l2_coeff * L2 + kl_weight * KL`.
pub fn regularized_loss(
    g: &mut Graph,
    error_loss: Var,
    groups: &[GateGroup],
    weights: &[Var],
    cfg: &PenaltyConfig,
    rng: &mut RngStream,
) -> Result<Objective> {
    if !g.value(error_loss).is_scalar() {
        return Err(AutodiffError::NonScalarLoss(g.value(error_loss).shape().to_vec()).into());
    }
    let complexity = weighted_complexity(g, groups, |group| {
        cfg.lambda
            .get(&group.name)
            .copied()
            .ok_or_else(|| ObjectiveError::MissingLambda(group.name.clone()))
    })?;
    let mut total = g.add(error_loss, complexity)?;
    let l2 = if cfg.l2_coeff > 0.0 {
        let l2 = l2_reparam_penalty(g, groups, weights)?;
        let scaled = g.scale(l2, cfg.l2_coeff)?;
        total = g.add(total, scaled)?;
        Some(l2)
    } else {
        None
    };
    let gate_kl = match &cfg.gate_kl {
        Some(kl) if kl.weight > 0.0 => {
            let term = gate_kl_penalty(g, groups, &kl.prior_params(), kl.mc_samples, rng)?;
            let scaled = g.scale(term, kl.weight)?;
            total = g.add(total, scaled)?;
            Some(term)
        }
        _ => None,
    };
    Ok(Objective {
        total,
        error: error_loss,
        complexity,
        l2,
        gate_kl,
    })
}

/// Constants of the point masses of a gate: `logit` of the stretched positions of 0 and 1.
fn rectification_points(dist: &HardConcrete) -> (f64, f64) {
    let lg = |p: f64| p.ln() - (1.0 - p).ln();
    (
        lg(-dist.gamma / dist.width()),
        lg((1.0 - dist.gamma) / dist.width()),
    )
}

fn check_prior_support(q: (f64, f64), p: (f64, f64)) -> Result<()> {
    if p.0 <= 0.0 && q.0 > 0.0 {
        return Err(ObjectiveError::Divergence { at: "z = 0", mass: q.0 });
    }
    if p.1 <= 0.0 && q.1 > 0.0 {
        return Err(ObjectiveError::Divergence { at: "z = 1", mass: q.1 });
    }
    Ok(())
}

/// Log density of the stretched concrete at `z`, as a graph node.
///
/// Uses `q_s(t) = beta sigmoid(y) sigmoid(-y) / (t (1 - t))` with
/// `y = beta logit(t) - log_alpha`, the derivative of the CDF.
fn log_density_node(g: &mut Graph, z: Var, log_alpha: Var, dist: &HardConcrete) -> Result<Var> {
    let shifted = g.add_scalar(z, -dist.gamma)?;
    let t = g.scale(shifted, 1.0 / dist.width())?;
    let lt = g.log(t)?;
    let one_minus_t = g.one_minus(t)?;
    let l1t = g.log(one_minus_t)?;
    let logit_t = g.sub(lt, l1t)?;
    let bl = g.scale(logit_t, dist.beta)?;
    let y = g.sub(bl, log_alpha)?;
    let a = g.log_sigmoid(y)?;
    let neg_y = g.neg(y)?;
    let b = g.log_sigmoid(neg_y)?;
    let ab = g.add(a, b)?;
    let denom = g.add(lt, l1t)?;
    let core = g.sub(ab, denom)?;
    Ok(g.add_scalar(core, dist.beta.ln() - dist.width().ln())?)
}

/// `sum_j KL(q(z_j) || p(z_j))` over every gate of every group.
///
/// The point-mass terms are exact; the continuous part is a Monte Carlo
/// average over `mc_samples` inverse-transform draws from each posterior
/// truncated to (0, 1). Draws are reparameterized, so the node is
/// differentiable in every `log_alpha`.
pub fn gate_kl_penalty(
    g: &mut Graph,
    groups: &[GateGroup],
    prior: &GateParams,
    mc_samples: usize,
    rng: &mut RngStream,
) -> Result<Var> {
    prior.validate()?;
    if mc_samples == 0 {
        return Err(ObjectiveError::InvalidConfig("mc_samples must be at least 1".into()));
    }
    let (p0, p1) = prior.point_masses();
    let mut total: Option<Var> = None;
    for group in groups {
        let la = group.log_alpha;
        let n = g.value(la).len();
        let q_masses: Vec<_> = g
            .value(la)
            .data()
            .iter()
            .map(|&l| group.dist.params(l).point_masses())
            .collect();
        for &qm in &q_masses {
            check_prior_support(qm, (p0, p1))?;
        }
        let (c0, c1) = rectification_points(&group.dist);
        // Q0 = sigmoid(beta c0 - la), 1 - Q1 = sigmoid(la - beta c1)
        let neg_la = g.neg(la)?;
        let y0 = g.add_scalar(neg_la, group.dist.beta * c0)?;
        let y1 = g.add_scalar(la, -group.dist.beta * c1)?;
        let q0 = g.sigmoid(y0)?;
        let q1c = g.sigmoid(y1)?;
        let lq0 = g.log_sigmoid(y0)?;
        let lq1c = g.log_sigmoid(y1)?;
        let d0 = g.add_scalar(lq0, -p0.ln())?;
        let d1 = g.add_scalar(lq1c, -p1.ln())?;
        let t0 = g.mul(q0, d0)?;
        let t1 = g.mul(q1c, d1)?;
        let discrete = g.add(t0, t1)?;

        // inverse-transform draws on (0, 1): v = Q0 + u (Q1 - Q0)
        let q1 = g.one_minus(q1c)?;
        let mass = g.sub(q1, q0)?;
        let prior_la = g.constant(Tensor::full(&[n], prior.log_alpha));
        let mut acc: Option<Var> = None;
        for _ in 0..mc_samples {
            let u = g.constant(Tensor::vector((0..n).map(|_| rng.uniform_open()).collect()));
            let um = g.mul(mass, u)?;
            let v = g.add(q0, um)?;
            let lv = g.log(v)?;
            let one_minus_v = g.one_minus(v)?;
            let l1v = g.log(one_minus_v)?;
            let logit_v = g.sub(lv, l1v)?;
            let shifted = g.add(logit_v, la)?;
            let scaled = g.scale(shifted, 1.0 / group.dist.beta)?;
            let s = g.sigmoid(scaled)?;
            let stretched = g.scale(s, group.dist.width())?;
            let z = g.add_scalar(stretched, group.dist.gamma)?;
            let lq = log_density_node(g, z, la, &group.dist)?;
            let lp = log_density_node(g, z, prior_la, &prior.dist)?;
            let diff = g.sub(lq, lp)?;
            acc = Some(match acc {
                Some(a) => g.add(a, diff)?,
                None => diff,
            });
        }
        let mean_diff = g.scale(acc.expect("mc_samples >= 1"), 1.0 / mc_samples as f64)?;
        let continuous = g.mul(mass, mean_diff)?;
        let per_gate = g.add(discrete, continuous)?;
        let term = g.sum(per_gate)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| ObjectiveError::InvalidConfig("no gate groups".into()))
}

/// Monte Carlo estimate of `KL(q(z) || p(z))` for a single pair of hard concrete gates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlEstimate {
    /// Exact point-mass terms at 0 and 1.
    pub discrete: f64,
    /// Estimate of the contribution of the (0, 1) part.
    pub continuous: f64,
    /// Standard error of `continuous`.
    pub std_err: f64,
}

impl KlEstimate {
    pub fn total(&self) -> f64 {
        self.discrete + self.continuous
    }
}

/// Two point-mass terms of the chain-rule decomposition.
pub fn kl_discrete_part(q: &GateParams, p: &GateParams) -> Result<f64> {
    let (q0, q1) = q.point_masses();
    let (p0, p1) = p.point_masses();
    check_prior_support((q0, q1), (p0, p1))?;
    let term = |a: f64, b: f64| if a > 0.0 { a * (a / b).ln() } else { 0.0 };
    Ok(term(q0, p0) + term(q1, p1))
}

/// Scalar twin of [`gate_kl_penalty`] for one gate; consumes the same random draws.
pub fn hard_concrete_kl(q: &GateParams, p: &GateParams, mc_samples: usize, rng: &mut RngStream) -> Result<KlEstimate> {
    q.validate()?;
    p.validate()?;
    if mc_samples == 0 {
        return Err(ObjectiveError::InvalidConfig("mc_samples must be at least 1".into()));
    }
    let discrete = kl_discrete_part(q, p)?;
    let (c_lo, mass) = q.truncation(0.0, 1.0)?;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..mc_samples {
        let z = q.truncated_from_uniform(0.0, 1.0, c_lo, mass, rng.uniform_open());
        let d = q.log_pdf_stretched(z)? - p.log_pdf_stretched(z)?;
        sum += d;
        sum_sq += d * d;
    }
    let m = mc_samples as f64;
    let mean = sum / m;
    let var = if mc_samples > 1 {
        ((sum_sq - m * mean * mean) / (m - 1.0)).max(0.0)
    } else {
        0.0
    };
    Ok(KlEstimate {
        discrete,
        continuous: mass * mean,
        std_err: mass * (var / m).sqrt(),
    })
}

/// Both sides of the spike-and-slab penalty identity for Bernoulli gate probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpikeSlabReport {
    /// `E_q[lambda ||theta||_0]` summed gate by gate over the two Bernoulli outcomes.
    pub expected_l0_penalty: f64,
    /// `lambda * sum_j q(z_j = 1)`, the coding-cost term of the variational bound.
    pub bound_penalty: f64,
    pub difference: f64,
}

pub fn spike_slab_equivalence_check(pi: &[f64], lambda: f64) -> Result<SpikeSlabReport> {
    if let Some(&bad) = pi.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(ObjectiveError::InvalidConfig(format!("gate probability {bad} outside [0, 1]")));
    }
    let expected_l0_penalty: f64 = pi
        .iter()
        .map(|&p| p * (lambda * 1.0) + (1.0 - p) * (lambda * 0.0))
        .sum();
    let bound_penalty = lambda * pi.iter().sum::<f64>();
    Ok(SpikeSlabReport {
        expected_l0_penalty,
        bound_penalty,
        difference: expected_l0_penalty - bound_penalty,
    })
}

/// `1 - Q(s_bar <= 0)` evaluated outside a graph, for reporting.
pub fn prob_active_values(log_alpha: &[f64], dist: &HardConcrete) -> Vec<f64> {
    let shift = dist.active_shift();
    log_alpha.iter().map(|&l| sigmoid(l - shift)).collect()
}
