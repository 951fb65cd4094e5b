//! Gated dense networks with one hard concrete gate per input neuron.
//!
//! A gate multiplies a whole input column of a layer, so a closed gate
//! removes every outgoing weight of that neuron. The first layer's gates
//! therefore prune input features. Biases are never gated.

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::gates::{hard_concrete_node, logistic_noise, GateError, GateNodes, HardConcrete};
use crate::objective::{prob_active_values, GateGroup};
use crate::rng::RngStream;
use crate::tensor::{gemm, Tensor};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error("input has {got} columns, network expects {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("invalid network: {0}")]
    Invalid(String),
    #[error("model document: {0}")]
    Schema(String),
    #[error("model io: {0}")]
    Io(#[from] std::io::Error),
    #[error("model json: {0}")]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxCrossEntropy,
    SquaredError,
}

/// Training targets matching a [`LossKind`].
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels { labels: Vec<usize>, classes: usize },
    Values(Tensor),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels { labels, .. } => labels.len(),
            Targets::Values(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        match self {
            Targets::Labels { labels, classes } => Targets::Labels {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
            Targets::Values(t) => Targets::Values(t.select_rows(idx)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatedDenseLayer {
    /// `[in_dim x out_dim]`; row `i` holds every outgoing weight of input neuron `i`.
    pub weight: Tensor,
    pub bias: Tensor,
    /// One gate location per input neuron.
    pub log_alpha: Tensor,
    pub activation: Activation,
}

impl GatedDenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Test-time gate value of every input neuron.
    pub fn deterministic_gates(&self, dist: &HardConcrete) -> Vec<f64> {
        self.log_alpha
            .data()
            .iter()
            .map(|&l| dist.params(l).deterministic_gate())
            .collect()
    }

    pub fn prob_active(&self, dist: &HardConcrete) -> Vec<f64> {
        prob_active_values(self.log_alpha.data(), dist)
    }
}

/// Initialisation choices for a fresh network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    /// Dropout-equivalent rate `r`; gate locations start around `log(r / (1 - r))`.
    pub dropout_rate: f64,
    pub log_alpha_std: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            dropout_rate: 0.5,
            log_alpha_std: 0.01,
        }
    }
}

impl InitConfig {
    pub fn log_alpha_mean(&self) -> f64 {
        (self.dropout_rate / (1.0 - self.dropout_rate)).ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMLP {
    pub layers: Vec<GatedDenseLayer>,
    pub gate: HardConcrete,
    pub loss: LossKind,
}

/// Graph handles for the parameters of one layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
    pub log_alpha: Var,
}

/// Output of a stochastic forward pass: one prediction per gate sample.
#[derive(Debug, Clone)]
pub struct TrainForward {
    pub predictions: Vec<Var>,
    /// `gates[l][k]` is the draw of layer `k` for sample `l`.
    pub gates: Vec<Vec<GateNodes>>,
}

/// Expected floating point operations, one multiply and one add per weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub per_layer: Vec<f64>,
    pub per_layer_baseline: Vec<f64>,
    pub total: f64,
    pub baseline_total: f64,
}

impl FlopsReport {
    pub fn ratio(&self) -> f64 {
        if self.baseline_total > 0.0 {
            self.total / self.baseline_total
        } else {
            0.0
        }
    }
}

/// FLOPs of a dense layer whose input neuron `i` is active with probability `p[i]`.
pub fn dense_layer_flops(prob_active: &[f64], out_dim: usize) -> f64 {
    let active: f64 = prob_active.iter().sum();
    active * 2.0 * out_dim as f64 + out_dim as f64
}

impl SparseMLP {
    /// Builds a network with relu hidden layers and an identity output layer.
    ///
    /// Weights are He-uniform in the fan-in, biases zero, gate locations
    /// normal around the value implied by the dropout-equivalent rate.
    pub fn new(sizes: &[usize], loss: LossKind, gate: HardConcrete, init: InitConfig, rng: &mut RngStream) -> Result<Self> {
        gate.validate()?;
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(NetError::Invalid(format!("layer sizes {sizes:?}")));
        }
        if !(init.dropout_rate > 0.0 && init.dropout_rate < 1.0) || !(init.log_alpha_std >= 0.0) {
            return Err(NetError::Invalid(format!(
                "dropout rate {} must lie in (0, 1)",
                init.dropout_rate
            )));
        }
        let mean = init.log_alpha_mean();
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let weight = (0..fan_in * fan_out)
                    .map(|_| (2.0 * rng.uniform() - 1.0) * bound)
                    .collect();
                let log_alpha = (0..fan_in)
                    .map(|_| mean + init.log_alpha_std * rng.normal())
                    .collect();
                GatedDenseLayer {
                    weight: Tensor::matrix(fan_in, fan_out, weight),
                    bias: Tensor::zeros(&[fan_out]),
                    log_alpha: Tensor::vector(log_alpha),
                    activation: if k == last {
                        Activation::Identity
                    } else {
                        Activation::Relu
                    },
                }
            })
            .collect();
        Ok(Self { layers, gate, loss })
    }

    pub fn validate(&self) -> Result<()> {
        self.gate.validate()?;
        if self.layers.is_empty() {
            return Err(NetError::Invalid("network has no layers".into()));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.weight.shape().len() != 2 || l.bias.shape() != [l.out_dim()] || l.log_alpha.shape() != [l.in_dim()] {
                return Err(NetError::Invalid(format!(
                    "layer {k}: weight {:?}, bias {:?}, gates {:?}",
                    l.weight.shape(),
                    l.bias.shape(),
                    l.log_alpha.shape()
                )));
            }
            if let Some(next) = self.layers.get(k + 1) {
                if next.in_dim() != l.out_dim() {
                    return Err(NetError::Invalid(format!(
                        "layer {k} outputs {} but layer {} takes {}",
                        l.out_dim(),
                        k + 1,
                        next.in_dim()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").out_dim()
    }

    /// Layer widths including the output, e.g. `[784, 300, 100, 10]`.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.layers.iter().map(GatedDenseLayer::in_dim).collect();
        s.push(self.output_dim());
        s
    }

    pub fn gate_count(&self) -> usize {
        self.layers.iter().map(GatedDenseLayer::in_dim).sum()
    }

    pub fn layer_name(k: usize) -> String {
        format!("layer{k}")
    }

    /// Every trainable tensor, in a fixed order: weight, bias, gates per layer.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias, &l.log_alpha])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias, &mut l.log_alpha])
            .collect()
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<LayerVars> {
        self.layers
            .iter()
            .map(|l| LayerVars {
                weight: g.param(l.weight.clone()),
                bias: g.param(l.bias.clone()),
                log_alpha: g.param(l.log_alpha.clone()),
            })
            .collect()
    }

    /// One gate group per layer, named `layer{k}`, each gate owning `out_dim` weights.
    pub fn gate_groups(&self, vars: &[LayerVars]) -> Vec<GateGroup> {
        self.layers
            .iter()
            .zip(vars)
            .enumerate()
            .map(|(k, (l, v))| GateGroup {
                name: Self::layer_name(k),
                log_alpha: v.log_alpha,
                group_size: l.out_dim(),
                dist: self.gate,
            })
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(NetError::InputWidth {
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        if x.rows() == 0 {
            return Err(NetError::Invalid("empty input batch".into()));
        }
        Ok(())
    }

    /// Forward pass with fixed per-neuron gate values (`None` leaves layer inputs ungated).
    pub fn forward_with_gates(&self, g: &mut Graph, vars: &[LayerVars], x: Var, gates: &[Option<Var>]) -> Result<Var> {
        let mut h = x;
        for ((layer, v), gate) in self.layers.iter().zip(vars).zip(gates) {
            let gated = match gate {
                Some(z) => g.mul(h, *z)?,
                None => h,
            };
            let pre = g.matmul(gated, v.weight)?;
            let out = g.add(pre, v.bias)?;
            h = match layer.activation {
                Activation::Relu => g.relu(out)?,
                Activation::Identity => out,
            };
        }
        Ok(h)
    }

    /// Stochastic forward pass: for each of `num_samples` passes, one hard
    /// concrete draw per input neuron, shared across the whole minibatch.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        vars: &[LayerVars],
        x: &Tensor,
        rng: &mut RngStream,
        num_samples: usize,
    ) -> Result<TrainForward> {
        self.check_input(x)?;
        if num_samples == 0 {
            return Err(NetError::Invalid("need at least one gate sample".into()));
        }
        let xv = g.constant(x.clone());
        let mut predictions = Vec::with_capacity(num_samples);
        let mut gates = Vec::with_capacity(num_samples);
        for _ in 0..num_samples {
            let draws = self
                .layers
                .iter()
                .zip(vars)
                .map(|(l, v)| {
                    let noise = logistic_noise(rng, l.in_dim());
                    hard_concrete_node(g, v.log_alpha, &self.gate, &noise)
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let zs: Vec<Option<Var>> = draws.iter().map(|d| Some(d.z)).collect();
            predictions.push(self.forward_with_gates(g, vars, xv, &zs)?);
            gates.push(draws);
        }
        Ok(TrainForward { predictions, gates })
    }

    /// Loss of one prediction node against the targets.
    pub fn loss_node(&self, g: &mut Graph, pred: Var, targets: &Targets) -> Result<Var> {
        match (self.loss, targets) {
            (LossKind::SoftmaxCrossEntropy, Targets::Labels { labels, .. }) => Ok(g.softmax_cross_entropy(pred, labels)?),
            (LossKind::SquaredError, Targets::Values(t)) => {
                let tv = g.constant(t.clone());
                Ok(g.squared_error(pred, tv)?)
            }
            _ => Err(NetError::Invalid("targets do not match the loss kind".into())),
        }
    }

    /// Error loss averaged over the gate samples of a stochastic forward pass.
    pub fn error_loss(&self, g: &mut Graph, fwd: &TrainForward, targets: &Targets) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &p in &fwd.predictions {
            let l = self.loss_node(g, p, targets)?;
            acc = Some(match acc {
                Some(a) => g.add(a, l)?,
                None => l,
            });
        }
        let sum = acc.ok_or_else(|| NetError::Invalid("no predictions".into()))?;
        Ok(g.scale(sum, 1.0 / fwd.predictions.len() as f64)?)
    }

    /// Deterministic test-time forward pass using the noise-free gate estimator.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            let zhat = layer.deterministic_gates(&self.gate);
            let (m, k, n) = (h.rows(), layer.in_dim(), layer.out_dim());
            let gated: Vec<f64> = h
                .data()
                .iter()
                .enumerate()
                .map(|(i, &v)| v * zhat[i % k])
                .collect();
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, &gated, (k as isize, 1), layer.weight.data(), (n as isize, 1), &mut out);
            for (i, o) in out.iter_mut().enumerate() {
                *o += layer.bias.data()[i % n];
                if layer.activation == Activation::Relu {
                    *o = o.max(0.0);
                }
            }
            h = Tensor::matrix(m, n, out);
        }
        if !h.all_finite() {
            return Err(AutodiffError::NonFinite { op: "forward_eval" }.into());
        }
        Ok(h)
    }

    /// Input neurons per layer whose test-time gate exceeds `threshold`.
    pub fn pruned_architecture(&self, threshold: f64) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| {
                l.deterministic_gates(&self.gate)
                    .into_iter()
                    .filter(|&z| z > threshold)
                    .count()
            })
            .collect()
    }

    pub fn expected_flops(&self) -> FlopsReport {
        let per_layer: Vec<f64> = self
            .layers
            .iter()
            .map(|l| dense_layer_flops(&l.prob_active(&self.gate), l.out_dim()))
            .collect();
        let per_layer_baseline: Vec<f64> = self
            .layers
            .iter()
            .map(|l| dense_layer_flops(&vec![1.0; l.in_dim()], l.out_dim()))
            .collect();
        FlopsReport {
            total: per_layer.iter().sum(),
            baseline_total: per_layer_baseline.iter().sum(),
            per_layer,
            per_layer_baseline,
        }
    }

    /// Unweighted expected L0 of the network, `sum_k out_dim_k * sum_i P(active)`.
    pub fn l0_value(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.out_dim() as f64 * l.prob_active(&self.gate).iter().sum::<f64>())
            .sum()
    }

    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            layers: self
                .layers
                .iter()
                .map(|l| LayerDocument {
                    input: l.in_dim(),
                    output: l.out_dim(),
                    activation: l.activation,
                    weights: l.weight.data().to_vec(),
                    bias: l.bias.data().to_vec(),
                    log_alpha: l.log_alpha.data().to_vec(),
                })
                .collect(),
            beta: self.gate.beta,
            gamma: self.gate.gamma,
            zeta: self.gate.zeta,
            loss: self.loss,
        }
    }

    pub fn from_document(doc: ModelDocument) -> Result<Self> {
        let gate = HardConcrete::new(doc.beta, doc.gamma, doc.zeta)?;
        let mut layers = Vec::with_capacity(doc.layers.len());
        for (k, l) in doc.layers.into_iter().enumerate() {
            let bad = |what: &str, got: usize, want: usize| {
                NetError::Schema(format!("layer {k}: {what} has {got} entries, expected {want}"))
            };
            if l.weights.len() != l.input * l.output {
                return Err(bad("weights", l.weights.len(), l.input * l.output));
            }
            if l.bias.len() != l.output {
                return Err(bad("bias", l.bias.len(), l.output));
            }
            if l.log_alpha.len() != l.input {
                return Err(bad("log_alpha", l.log_alpha.len(), l.input));
            }
            layers.push(GatedDenseLayer {
                weight: Tensor::matrix(l.input, l.output, l.weights),
                bias: Tensor::vector(l.bias),
                log_alpha: Tensor::vector(l.log_alpha),
                activation: l.activation,
            });
        }
        let net = Self { layers, gate, loss: doc.loss };
        net.validate().map_err(|e| NetError::Schema(e.to_string()))?;
        Ok(net)
    }

    /// JSON text with every float written to 17 significant digits.
    pub fn to_json(&self) -> Result<String> {
        let mut buf = Vec::new();
        let mut ser = serde_json::Serializer::with_formatter(&mut buf, FullPrecision);
        self.to_document().serialize(&mut ser)?;
        buf.push(b'\n');
        Ok(String::from_utf8(buf).expect("serde_json writes utf-8"))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text).map_err(|e| NetError::Schema(e.to_string()))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_json()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Architecture string such as `"219-214-100"`.
pub fn architecture_string(counts: &[usize]) -> String {
    counts.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

/// On-disk model layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub layers: Vec<LayerDocument>,
    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,
    pub loss: LossKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDocument {
    #[serde(rename = "in")]
    pub input: usize,
    #[serde(rename = "out")]
    pub output: usize,
    pub activation: Activation,
    /// Row-major `[in x out]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub log_alpha: Vec<f64>,
}

/// Compact JSON formatter printing floats as `d.dddddddddddddddde±x`.
struct FullPrecision;

impl serde_json::ser::Formatter for FullPrecision {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}
