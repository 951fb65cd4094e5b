//! Run configuration: one flat TOML document per run.

use l0sparse::data::{load_idx, synth_sparse_regression, synth_xor, DataError, Dataset};
use l0sparse::gates::{HardConcrete, DEFAULT_BETA, DEFAULT_GAMMA, DEFAULT_ZETA};
use l0sparse::net::{InitConfig, LossKind, SparseMLP};
use l0sparse::objective::{GateKlConfig, PenaltyConfig};
use l0sparse::train::{AdamConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Idx,
    SyntheticRegression,
    Xor,
}

/// Every key a run accepts. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub seed: u64,

    pub dataset: DatasetKind,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Keep only the first this many training examples.
    pub train_subset: Option<usize>,
    pub n_train: usize,
    pub n_test: usize,
    pub dim: usize,
    pub k_active: usize,
    pub noise_std: f64,
    pub xor_spread: f64,

    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub dropout_rate: f64,
    pub log_alpha_init_std: f64,
    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,

    /// Complexity coefficient in units of 1/N, so 0.1 means 0.1/N.
    pub lambda_times_n: f64,
    /// Per-layer override of `lambda_times_n`, one entry per layer.
    pub lambda_per_layer: Option<Vec<f64>>,
    pub l2_coeff: f64,
    pub kl_weight: f64,
    pub kl_prior_log_alpha: f64,
    pub kl_mc_samples: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub gate_lr: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Temporal averaging decay; 0 turns averaging off.
    pub ema_decay: f64,
    pub num_gate_samples: usize,
    pub eval_every: usize,
    pub grad_clip: Option<f64>,
    pub record_wall_time: bool,
    pub prune_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            out_dir: PathBuf::from("runs/latest"),
            seed: 0,
            dataset: DatasetKind::SyntheticRegression,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_subset: None,
            n_train: 2000,
            n_test: 500,
            dim: 50,
            k_active: 5,
            noise_std: 0.1,
            xor_spread: 0.1,
            hidden: Vec::new(),
            dropout_rate: 0.5,
            log_alpha_init_std: 0.01,
            beta: DEFAULT_BETA,
            gamma: DEFAULT_GAMMA,
            zeta: DEFAULT_ZETA,
            lambda_times_n: 0.1,
            lambda_per_layer: None,
            l2_coeff: 0.0,
            kl_weight: 0.0,
            kl_prior_log_alpha: 0.0,
            kl_mc_samples: GateKlConfig::DEFAULT_MC_SAMPLES,
            epochs: 10,
            batch_size: 100,
            lr: adam.lr,
            gate_lr: None,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            ema_decay: 0.999,
            num_gate_samples: 1,
            eval_every: 100,
            grad_clip: None,
            record_wall_time: false,
            prune_threshold: 0.0,
        }
    }
}

/// Training and evaluation splits plus what the network needs to know about them.
pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
    pub loss: LossKind,
    pub outputs: usize,
    /// Indices of the true non-zero coefficients, for synthetic regression.
    pub support: Option<Vec<usize>>,
    pub description: String,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Self = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        HardConcrete::new(self.beta, self.gamma, self.zeta).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.hidden.contains(&0) {
            return bad(format!("hidden widths {:?} must be positive", self.hidden));
        }
        if !(self.dropout_rate > 0.0 && self.dropout_rate < 1.0) {
            return bad(format!("dropout_rate {} must lie in (0, 1)", self.dropout_rate));
        }
        if !(self.lambda_times_n >= 0.0 && self.lambda_times_n.is_finite()) {
            return bad(format!("lambda_times_n {} must be non-negative", self.lambda_times_n));
        }
        if let Some(per) = &self.lambda_per_layer {
            if per.len() != self.hidden.len() + 1 {
                return bad(format!(
                    "lambda_per_layer has {} entries for {} layers",
                    per.len(),
                    self.hidden.len() + 1
                ));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay {} must lie in [0, 1)", self.ema_decay));
        }
        match self.dataset {
            DatasetKind::Idx => {
                if self.train_images.is_none() || self.train_labels.is_none() {
                    return bad("idx datasets need train_images and train_labels".into());
                }
                if self.test_images.is_some() != self.test_labels.is_some() {
                    return bad("give both test_images and test_labels or neither".into());
                }
            }
            DatasetKind::SyntheticRegression => {
                if self.n_train == 0 || self.n_test == 0 || self.k_active == 0 || self.k_active > self.dim {
                    return bad(format!(
                        "synthetic regression needs n_train, n_test > 0 and 1 <= k_active <= dim (got {}, {}, {}, {})",
                        self.n_train, self.n_test, self.k_active, self.dim
                    ));
                }
            }
            DatasetKind::Xor => {
                if self.n_train == 0 || self.n_test == 0 {
                    return bad("xor needs n_train and n_test > 0".into());
                }
            }
        }
        self.train_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.penalty().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn gate(&self) -> HardConcrete {
        HardConcrete {
            beta: self.beta,
            gamma: self.gamma,
            zeta: self.zeta,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            gate_lr: self.gate_lr,
            ema_decay: (self.ema_decay > 0.0).then_some(self.ema_decay),
            seed: self.seed,
            num_gate_samples: self.num_gate_samples,
            eval_every: self.eval_every,
            grad_clip: self.grad_clip,
            record_wall_time: self.record_wall_time,
        }
    }

    /// Penalties in units of `1/N`; training divides by the training-set size.
    pub fn penalty(&self) -> PenaltyConfig {
        let layers = self.hidden.len() + 1;
        let mut p = PenaltyConfig {
            lambda: (0..layers)
                .map(|k| {
                    let l = self.lambda_per_layer.as_ref().map_or(self.lambda_times_n, |v| v[k]);
                    (SparseMLP::layer_name(k), l)
                })
                .collect(),
            l2_coeff: self.l2_coeff,
            gate_kl: None,
        };
        if self.kl_weight > 0.0 {
            p.gate_kl = Some(GateKlConfig {
                prior_log_alpha: self.kl_prior_log_alpha,
                prior: self.gate(),
                weight: self.kl_weight,
                mc_samples: self.kl_mc_samples,
            });
        }
        p
    }

    pub fn init(&self) -> InitConfig {
        InitConfig {
            dropout_rate: self.dropout_rate,
            log_alpha_std: self.log_alpha_init_std,
        }
    }

    pub fn load_data(&self) -> Result<Data, ConfigError> {
        match self.dataset {
            DatasetKind::Idx => {
                let (img, lab) = (self.train_images.as_ref().expect("validated"), self.train_labels.as_ref().expect("validated"));
                let mut train = load_idx(img, lab)?;
                if let Some(n) = self.train_subset {
                    train = train.head(n);
                }
                let (test, note) = match (&self.test_images, &self.test_labels) {
                    (Some(i), Some(l)) => (load_idx(i, l)?, ""),
                    _ => (train.clone(), " (no test files; the training set is evaluated)"),
                };
                let outputs = class_count(&train).max(class_count(&test));
                Ok(Data {
                    description: format!(
                        "idx: {} train / {} test examples, pixels scaled by 1/255{note}",
                        train.len(),
                        test.len()
                    ),
                    train,
                    test,
                    loss: LossKind::SoftmaxCrossEntropy,
                    outputs,
                    support: None,
                })
            }
            DatasetKind::SyntheticRegression => {
                let (all, support) =
                    synth_sparse_regression(self.n_train + self.n_test, self.dim, self.k_active, self.noise_std, self.seed)?;
                let train = all.subset(&(0..self.n_train).collect::<Vec<_>>());
                let test = all.subset(&(self.n_train..all.len()).collect::<Vec<_>>());
                Ok(Data {
                    description: format!(
                        "synthetic regression: d={}, k_active={}, noise_std={}",
                        self.dim, self.k_active, self.noise_std
                    ),
                    train,
                    test,
                    loss: LossKind::SquaredError,
                    outputs: 1,
                    support: Some(support),
                })
            }
            DatasetKind::Xor => Ok(Data {
                description: format!("xor: spread={}", self.xor_spread),
                train: synth_xor(self.n_train, self.xor_spread, self.seed)?,
                test: synth_xor(self.n_test, self.xor_spread, self.seed.wrapping_add(1))?,
                loss: LossKind::SoftmaxCrossEntropy,
                outputs: 2,
                support: None,
            }),
        }
    }

    /// Full layer sizes for the given data.
    pub fn sizes(&self, data: &Data) -> Vec<usize> {
        let mut s = vec![data.train.dim()];
        s.extend(&self.hidden);
        s.push(data.outputs);
        s
    }
}

fn class_count(ds: &Dataset) -> usize {
    match &ds.targets {
        l0sparse::net::Targets::Labels { classes, .. } => *classes,
        l0sparse::net::Targets::Values(t) => t.cols(),
    }
}
