//! Training loop: minibatch Adam on weights and gate locations, temporal
//! averaging of the parameters, periodic deterministic evaluation.

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::data::Dataset;
use crate::net::{architecture_string, NetError, SparseMLP, Targets};
use crate::objective::{regularized_loss, ObjectiveError, PenaltyConfig};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::sync::mpsc::Sender;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("non-finite loss at step {step}; largest gradient last seen in layer {layer} (max |grad| = {max_grad:e})")]
    NonFinite { step: usize, layer: usize, max_grad: f64 },
    #[error("invalid training setup: {0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected first and second moment estimates for a list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[&Tensor]) -> Self {
        let z: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: z.clone(),
            v: z,
            t: 0,
        }
    }
}

/// One Adam update. `lrs[i]` is the learning rate of `params[i]`.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], lrs: &[f64], state: &mut AdamState, hyper: &AdamConfig) {
    assert!(params.len() == grads.len() && grads.len() == lrs.len() && lrs.len() == state.m.len());
    state.t += 1;
    let c1 = 1.0 - hyper.beta1.powi(state.t as i32);
    let c2 = 1.0 - hyper.beta2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        debug_assert_eq!(p.shape(), g.shape());
        let lr = lrs[i];
        for (((pj, mj), vj), &gj) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mj = hyper.beta1 * *mj + (1.0 - hyper.beta1) * gj;
            *vj = hyper.beta2 * *vj + (1.0 - hyper.beta2) * gj * gj;
            let mhat = *mj / c1;
            let vhat = *vj / c2;
            *pj -= lr * mhat / (vhat.sqrt() + hyper.eps);
        }
    }
}

/// Exponential moving average of parameters with warm-up:
/// the decay used at update `t` is `min(decay, (1 + t) / (10 + t))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalAverage {
    pub decay: f64,
    pub shadow: Vec<Tensor>,
    pub updates: u64,
}

impl TemporalAverage {
    pub fn new(decay: f64, params: &[&Tensor]) -> Self {
        Self {
            decay,
            shadow: params.iter().map(|&p| p.clone()).collect(),
            updates: 0,
        }
    }

    pub fn update(&mut self, params: &[&Tensor]) {
        let t = self.updates as f64;
        let d = self.decay.min((1.0 + t) / (10.0 + t));
        for (s, p) in self.shadow.iter_mut().zip(params) {
            for (sj, &pj) in s.data_mut().iter_mut().zip(p.data()) {
                *sj = d * *sj + (1.0 - d) * pj;
            }
        }
        self.updates += 1;
    }

    /// Copy of `net` carrying the averaged parameters.
    pub fn apply_to(&self, net: &SparseMLP) -> SparseMLP {
        let mut out = net.clone();
        for (p, s) in out.params_mut().into_iter().zip(&self.shadow) {
            *p = s.clone();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Learning rate for gate locations; defaults to `adam.lr`.
    pub gate_lr: Option<f64>,
    /// Temporal-averaging decay; `None` evaluates the live parameters.
    pub ema_decay: Option<f64>,
    pub seed: u64,
    pub num_gate_samples: usize,
    /// Evaluate and log every this many steps (and after the last step).
    pub eval_every: usize,
    /// Clip the global gradient norm to this value.
    pub grad_clip: Option<f64>,
    /// Write elapsed wall time into metrics rows; off keeps metrics byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 100,
            adam: AdamConfig::default(),
            gate_lr: None,
            ema_decay: Some(0.999),
            seed: 0,
            num_gate_samples: 1,
            eval_every: 100,
            grad_clip: None,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Invalid(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.adam.lr > 0.0) || self.gate_lr.is_some_and(|l| !(l > 0.0)) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) || !(self.adam.eps > 0.0) {
            return bad("adam moments must lie in [0, 1) and eps must be positive".into());
        }
        if self.ema_decay.is_some_and(|d| !(0.0..1.0).contains(&d)) {
            return bad(format!("ema_decay {:?} must lie in [0, 1)", self.ema_decay));
        }
        if self.num_gate_samples == 0 || self.eval_every == 0 {
            return bad("num_gate_samples and eval_every must be at least 1".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }
}

/// One logged evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    /// Full objective of the minibatch at this step.
    pub train_loss: f64,
    pub error_loss: f64,
    /// `sum_g lambda_g |g| P(active)`.
    pub complexity_term: f64,
    /// `l2_coeff` times the gate-aware L2 penalty.
    pub l2_term: f64,
    /// Weighted gate KL term.
    pub kl_term: f64,
    /// Expected number of active parameters of the live network.
    pub l0_term: f64,
    pub test_error_pct: Option<f64>,
    pub test_loss: f64,
    pub expected_flops: f64,
    pub pruned_arch: String,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "step,epoch,train_loss,error_loss,complexity_term,l2_term,kl_term,l0_term,test_error_pct,test_loss,expected_flops,pruned_arch,wall_ms";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{},{:.17e},{:.17e},{},{}",
            self.step,
            self.epoch,
            self.train_loss,
            self.error_loss,
            self.complexity_term,
            self.l2_term,
            self.kl_term,
            self.l0_term,
            self.test_error_pct.map(|e| format!("{e:.6}")).unwrap_or_default(),
            self.test_loss,
            self.expected_flops,
            self.pruned_arch,
            self.wall_ms
        )
    }

    /// Sum of the logged loss components.
    pub fn recomposed_loss(&self) -> f64 {
        self.error_loss + self.complexity_term + self.l2_term + self.kl_term
    }
}

/// Destination for metrics rows as they are produced.
pub trait MetricsSink {
    fn record(&mut self, row: &MetricsRow);
}

impl MetricsSink for Vec<MetricsRow> {
    fn record(&mut self, row: &MetricsRow) {
        self.push(row.clone());
    }
}

impl MetricsSink for Sender<MetricsRow> {
    fn record(&mut self, row: &MetricsRow) {
        // a closed receiver only loses logging
        let _ = self.send(row.clone());
    }
}

/// Discards rows.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _row: &MetricsRow) {}
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Percentage of argmax mismatches; `None` for regression targets.
    pub error_pct: Option<f64>,
    /// Mean cross-entropy or mean squared error.
    pub mean_loss: f64,
}

/// Deterministic evaluation with the test-time gates.
pub fn evaluate(net: &SparseMLP, data: &Dataset) -> Result<Evaluation> {
    const CHUNK: usize = 2048;
    let n = data.len();
    let mut loss_sum = 0.0;
    let mut wrong = 0usize;
    for start in (0..n).step_by(CHUNK) {
        let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
        let chunk = data.subset(&idx);
        let out = net.forward_eval(&chunk.inputs)?;
        match &chunk.targets {
            Targets::Labels { labels, .. } => {
                if out.cols() <= labels.iter().copied().max().unwrap_or(0) {
                    return Err(TrainError::Invalid(format!(
                        "network has {} outputs but labels reach {}",
                        out.cols(),
                        labels.iter().max().unwrap_or(&0)
                    )));
                }
                for (i, &label) in labels.iter().enumerate() {
                    let row = out.row(i);
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
                    loss_sum += lse - row[label];
                }
                wrong += out
                    .argmax_rows()
                    .iter()
                    .zip(labels)
                    .filter(|(p, l)| p != l)
                    .count();
            }
            Targets::Values(t) => {
                if t.shape() != out.shape() {
                    return Err(TrainError::Invalid(format!(
                        "targets {:?} vs outputs {:?}",
                        t.shape(),
                        out.shape()
                    )));
                }
                let cols = out.cols() as f64;
                loss_sum += out
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / cols;
            }
        }
    }
    let error_pct = match &data.targets {
        Targets::Labels { .. } => Some(100.0 * wrong as f64 / n as f64),
        Targets::Values(_) => None,
    };
    Ok(Evaluation {
        error_pct,
        mean_loss: loss_sum / n as f64,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters as left by the optimizer.
    pub live: SparseMLP,
    /// Temporally averaged parameters (equal to `live` when averaging is off).
    pub averaged: SparseMLP,
    pub metrics: Vec<MetricsRow>,
}

fn is_non_finite(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::Net(NetError::Autodiff(AutodiffError::NonFinite { .. }))
            | TrainError::Objective(ObjectiveError::Autodiff(AutodiffError::NonFinite { .. }))
    )
}

/// Minimizes error loss plus the configured penalties.
///
/// `penalty` lambdas are in units of `1/N` and are divided by the size of
/// the training set here. Every step draws fresh gates, builds the graph,
/// back-propagates and applies one Adam update to weights, biases and gate
/// locations. Rows go to `sink` every `eval_every` steps and after the
/// last step; evaluation uses the averaged parameters and deterministic gates.
pub fn train(
    net: SparseMLP,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    penalty: &PenaltyConfig,
    cfg: &TrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    penalty.validate()?;
    net.validate()?;
    if train_set.dim() != net.input_dim() {
        return Err(NetError::InputWidth {
            expected: net.input_dim(),
            got: train_set.dim(),
        }
        .into());
    }
    let penalty = penalty.per_example(train_set.len());
    let eval_set = eval_set.unwrap_or(train_set);

    let root = RngStream::new(cfg.seed);
    let mut shuffle_rng = root.substream(0);
    let mut gate_rng = root.substream(1);
    let mut kl_rng = root.substream(2);

    let mut live = net;
    let mut adam = AdamState::zeros_like(&live.params());
    let mut ema = cfg.ema_decay.map(|d| TemporalAverage::new(d, &live.params()));
    let lrs: Vec<f64> = (0..live.layers.len())
        .flat_map(|_| [cfg.adam.lr, cfg.adam.lr, cfg.gate_lr.unwrap_or(cfg.adam.lr)])
        .collect();
    let mut metrics = Vec::new();
    let mut layer_grad_max = vec![0.0f64; live.layers.len()];
    let started = Instant::now();
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let order = shuffle_rng.permutation(train_set.len());
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let xb = train_set.inputs.select_rows(batch);
            let yb = train_set.targets.select(batch);
            let non_finite = |layer_grad_max: &[f64]| {
                let (layer, max_grad) = layer_grad_max
                    .iter()
                    .copied()
                    .enumerate()
                    .fold((0, 0.0), |best, (k, m)| if m > best.1 { (k, m) } else { best });
                TrainError::NonFinite { step, layer, max_grad }
            };

            let l0_term = live.l0_value();
            let mut g = Graph::new();
            let built = (|| -> Result<_> {
                let vars = live.bind(&mut g);
                let fwd = live.forward_train(&mut g, &vars, &xb, &mut gate_rng, cfg.num_gate_samples)?;
                let err = live.error_loss(&mut g, &fwd, &yb)?;
                let groups = live.gate_groups(&vars);
                let weights: Vec<Var> = vars.iter().map(|v| v.weight).collect();
                let obj = regularized_loss(&mut g, err, &groups, &weights, &penalty, &mut kl_rng)?;
                Ok((vars, obj))
            })();
            let (vars, obj) = match built {
                Ok(v) => v,
                Err(e) if is_non_finite(&e) => return Err(non_finite(&layer_grad_max)),
                Err(e) => return Err(e),
            };
            g.backward(obj.total).map_err(|e| TrainError::Net(e.into()))?;

            let mut grads = Vec::with_capacity(vars.len() * 3);
            for (k, v) in vars.iter().enumerate() {
                let mut m = 0.0f64;
                for var in [v.weight, v.bias, v.log_alpha] {
                    let gr = g.grad(var).cloned().unwrap_or_else(|| Tensor::zeros(g.value(var).shape()));
                    m = m.max(gr.max_abs());
                    grads.push(gr);
                }
                layer_grad_max[k] = m;
            }
            if grads.iter().any(|t| !t.all_finite()) {
                return Err(non_finite(&layer_grad_max));
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = grads.iter().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt();
                if norm > clip {
                    for t in &mut grads {
                        for x in t.data_mut() {
                            *x *= clip / norm;
                        }
                    }
                }
            }
            adam_step(&mut live.params_mut(), &grads, &lrs, &mut adam, &cfg.adam);
            if let Some(ema) = &mut ema {
                ema.update(&live.params());
            }

            if step.is_multiple_of(cfg.eval_every) || step == total_steps {
                let averaged = ema.as_ref().map_or_else(|| live.clone(), |e| e.apply_to(&live));
                let ev = evaluate(&averaged, eval_set)?;
                let scalar = |v: Option<Var>, c: f64| v.map_or(0.0, |v| c * g.value(v).item());
                let row = MetricsRow {
                    step,
                    epoch,
                    train_loss: g.value(obj.total).item(),
                    error_loss: g.value(obj.error).item(),
                    complexity_term: g.value(obj.complexity).item(),
                    l2_term: scalar(obj.l2, penalty.l2_coeff),
                    kl_term: scalar(obj.gate_kl, penalty.gate_kl.map_or(0.0, |k| k.weight)),
                    l0_term,
                    test_error_pct: ev.error_pct,
                    test_loss: ev.mean_loss,
                    expected_flops: averaged.expected_flops().total,
                    pruned_arch: architecture_string(&averaged.pruned_architecture(0.0)),
                    wall_ms: if cfg.record_wall_time {
                        started.elapsed().as_millis() as u64
                    } else {
                        0
                    },
                };
                sink.record(&row);
                metrics.push(row);
            }
        }
    }
    let averaged = ema.as_ref().map_or_else(|| live.clone(), |e| e.apply_to(&live));
    Ok(TrainOutcome { live, averaged, metrics })
}
