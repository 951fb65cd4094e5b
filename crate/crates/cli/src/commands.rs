use crate::config::{ConfigError, Data, RunConfig};
use l0sparse::net::{architecture_string, NetError, SparseMLP};
use l0sparse::train::{evaluate, train, MetricsRow, TrainError};
use l0sparse::RngStream;
use log::{info, warn};
use serde::Serialize;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use thiserror::Error;

/// Stream id of the initialisation substream; training uses 0 to 2.
const INIT_STREAM: u64 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Model {
        path: PathBuf,
        #[source]
        source: NetError,
    },
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Train(TrainError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Model { .. } | CliError::Mismatch(_) => 2,
            CliError::Train(TrainError::NonFinite { .. }) => 3,
            CliError::Train(_) | CliError::Io { .. } => 1,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Train(e)
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn load_model(path: &Path) -> Result<SparseMLP, CliError> {
    SparseMLP::load(path).map_err(|source| CliError::Model {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

#[derive(Debug, Serialize)]
pub struct LayerReport {
    pub name: String,
    #[serde(rename = "in")]
    pub input: usize,
    #[serde(rename = "out")]
    pub output: usize,
    /// Input neurons whose test-time gate exceeds the threshold.
    pub active: usize,
    pub expected_active: f64,
    pub expected_flops: f64,
    pub baseline_flops: f64,
}

/// Test-time gates in ten equal bins over [0, 1]; the last bin is closed.
#[derive(Debug, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub exactly_zero: usize,
    pub exactly_one: usize,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub architecture: String,
    pub threshold: f64,
    pub layers: Vec<LayerReport>,
    pub gate_count: usize,
    pub zhat_histogram: Histogram,
    /// Expected number of active weights.
    pub l0: f64,
    pub expected_flops: f64,
    pub baseline_flops: f64,
    pub flops_ratio: f64,
}

pub fn report(net: &SparseMLP, threshold: f64) -> Report {
    let flops = net.expected_flops();
    let active = net.pruned_architecture(threshold);
    let layers = net
        .layers
        .iter()
        .enumerate()
        .map(|(k, l)| LayerReport {
            name: SparseMLP::layer_name(k),
            input: l.in_dim(),
            output: l.out_dim(),
            active: active[k],
            expected_active: l.prob_active(&net.gate).iter().sum(),
            expected_flops: flops.per_layer[k],
            baseline_flops: flops.per_layer_baseline[k],
        })
        .collect();
    let mut hist = Histogram {
        edges: (0..=10).map(|i| f64::from(i) / 10.0).collect(),
        counts: vec![0; 10],
        exactly_zero: 0,
        exactly_one: 0,
    };
    for l in &net.layers {
        for z in l.deterministic_gates(&net.gate) {
            hist.counts[((z * 10.0) as usize).min(9)] += 1;
            hist.exactly_zero += usize::from(z == 0.0);
            hist.exactly_one += usize::from(z == 1.0);
        }
    }
    Report {
        architecture: architecture_string(&active),
        threshold,
        layers,
        gate_count: net.gate_count(),
        zhat_histogram: hist,
        l0: net.l0_value(),
        expected_flops: flops.total,
        baseline_flops: flops.baseline_total,
        flops_ratio: flops.ratio(),
    }
}

#[derive(Debug, Serialize)]
struct SupportReport {
    true_support: Vec<usize>,
    selected: Vec<usize>,
    f1: f64,
}

#[derive(Debug, Serialize)]
struct RunSummary {
    data: String,
    train_examples: usize,
    test_examples: usize,
    sizes: Vec<usize>,
    steps: usize,
    test_error_pct: Option<f64>,
    test_loss: f64,
    initial_expected_flops: f64,
    final_expected_flops: f64,
    architecture: String,
    support: Option<SupportReport>,
}

/// F1 score of a selected index set against the true one.
pub fn support_f1(selected: &[usize], truth: &[usize]) -> f64 {
    let tp = selected.iter().filter(|i| truth.contains(i)).count() as f64;
    if selected.is_empty() && truth.is_empty() {
        return 1.0;
    }
    2.0 * tp / (selected.len() + truth.len()) as f64
}

/// Input features whose first-layer gate is open at test time.
pub fn selected_features(net: &SparseMLP, threshold: f64) -> Vec<usize> {
    net.layers[0]
        .deterministic_gates(&net.gate)
        .iter()
        .enumerate()
        .filter(|(_, &z)| z > threshold)
        .map(|(i, _)| i)
        .collect()
}

fn build_net(cfg: &RunConfig, data: &Data) -> Result<SparseMLP, CliError> {
    let mut rng = RngStream::new(cfg.seed).substream(INIT_STREAM);
    SparseMLP::new(&cfg.sizes(data), data.loss, cfg.gate(), cfg.init(), &mut rng)
        .map_err(|e| ConfigError::Invalid(e.to_string()).into())
}

/// Trains from a config file and writes `metrics.csv`, `model.json`,
/// `prune_report.json`, `summary.json` and the effective `config.toml`.
pub fn cmd_train(config: &Path, out_dir: Option<PathBuf>, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = out_dir {
        cfg.out_dir = d;
    }
    let data = cfg.load_data()?;
    info!("{}", data.description);
    let net = build_net(&cfg, &data)?;
    let initial_flops = net.expected_flops().total;
    info!("network {} with {} gates", architecture_string(&net.sizes()), net.gate_count());

    std::fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let effective = toml::to_string(&cfg).expect("config serializes");
    let cfg_path = cfg.out_dir.join("config.toml");
    std::fs::write(&cfg_path, effective).map_err(io_err(&cfg_path))?;

    let metrics_path = cfg.out_dir.join("metrics.csv");
    let file = std::fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?;
    let (tx, rx) = mpsc::channel::<MetricsRow>();
    let drain = std::thread::spawn(move || -> std::io::Result<()> {
        let mut w = BufWriter::new(file);
        writeln!(w, "{}", MetricsRow::CSV_HEADER)?;
        for row in rx {
            info!(
                "step {} epoch {} loss {:.5} test {:.5} error {} arch {}",
                row.step,
                row.epoch,
                row.train_loss,
                row.test_loss,
                row.test_error_pct.map_or("-".to_string(), |e| format!("{e:.2}%")),
                row.pruned_arch
            );
            writeln!(w, "{}", row.to_csv())?;
        }
        w.flush()
    });
    let mut sink = tx;
    let result = train(net, &data.train, Some(&data.test), &cfg.penalty(), &cfg.train_config(), &mut sink);
    drop(sink);
    let drained = drain.join().expect("metrics thread panicked");
    let outcome = result?;
    drained.map_err(io_err(&metrics_path))?;

    let model = &outcome.averaged;
    let model_path = cfg.out_dir.join("model.json");
    model.save(&model_path).map_err(|source| CliError::Model {
        path: model_path.clone(),
        source,
    })?;
    let rep = report(model, cfg.prune_threshold);
    write_json(&cfg.out_dir.join("prune_report.json"), &rep)?;

    let ev = evaluate(model, &data.test)?;
    let support = data.support.as_ref().map(|truth| {
        let selected = selected_features(model, cfg.prune_threshold);
        SupportReport {
            f1: support_f1(&selected, truth),
            true_support: truth.clone(),
            selected,
        }
    });
    let summary = RunSummary {
        data: data.description.clone(),
        train_examples: data.train.len(),
        test_examples: data.test.len(),
        sizes: model.sizes(),
        steps: outcome.metrics.last().map_or(0, |r| r.step),
        test_error_pct: ev.error_pct,
        test_loss: ev.mean_loss,
        initial_expected_flops: initial_flops,
        final_expected_flops: rep.expected_flops,
        architecture: rep.architecture.clone(),
        support,
    };
    write_json(&cfg.out_dir.join("summary.json"), &summary)?;
    if rep.layers.iter().all(|l| l.active == 0) {
        warn!("every gate is closed; the model predicts from biases alone");
    }
    println!("architecture: {}", rep.architecture);
    if let Some(e) = ev.error_pct {
        println!("test_error_pct: {e}");
    }
    println!("test_loss: {}", ev.mean_loss);
    println!("expected_flops: {} of {}", rep.expected_flops, rep.baseline_flops);
    println!("outputs: {}", cfg.out_dir.display());
    Ok(())
}

/// Evaluates a saved model on the test split described by a config file.
pub fn cmd_eval(model: &Path, config: &Path) -> Result<(), CliError> {
    let net = load_model(model)?;
    let cfg = RunConfig::load(config)?;
    let data = cfg.load_data()?;
    if data.test.dim() != net.input_dim() {
        return Err(CliError::Mismatch(format!(
            "model takes {} inputs but the data has {}",
            net.input_dim(),
            data.test.dim()
        )));
    }
    if data.loss != net.loss {
        return Err(CliError::Mismatch("model loss does not match the dataset targets".into()));
    }
    let ev = evaluate(&net, &data.test)?;
    let flops = net.expected_flops();
    match ev.error_pct {
        Some(e) => println!("error_pct: {e}"),
        None => println!("error_pct: n/a"),
    }
    println!("mean_loss: {}", ev.mean_loss);
    println!("architecture: {}", architecture_string(&net.pruned_architecture(cfg.prune_threshold)));
    println!("expected_flops: {}", flops.total);
    println!("baseline_flops: {}", flops.baseline_total);
    Ok(())
}

/// Prints the pruning report of a saved model as JSON.
pub fn cmd_report(model: &Path, threshold: f64) -> Result<(), CliError> {
    let net = load_model(model)?;
    println!("{}", serde_json::to_string_pretty(&report(&net, threshold)).expect("report serializes"));
    Ok(())
}
