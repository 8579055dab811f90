//! `proact` command-line pipeline: baseline training, profiling, hardening,
//! fault-injection campaigns and reporting.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use proact::data::{load_cifar10_dir, load_mnist, mnist_paths, split_validation};
use proact::faultinject::{plan_faults, run_campaign, CampaignConfig, FaultSpace, DEFAULT_BERS};
use proact::hardening::{
    harden_ranger, hybrid_init, neuronwise_init, profile_max_with, search_ftclipact,
    train_fitact_logged, train_proact_logged, FtClipActConfig, Granularity, TrainConfig,
    TrainLogRow,
};
use proact::metrics::{
    dump_activation_histogram, l2_activation_distance, memory_overhead, top1_accuracy,
};
use proact::model::{load_model, save_model, train_baseline, BaselineConfig, BaselineOptimizer};
use proact::optim::AdamConfig;
use proact::{Dataset, Error, Network, ThresholdSet};

const METHODS: [&str; 5] = ["ranger-lw", "ranger-nw", "ft-clipact", "fitact", "proact"];

#[derive(Parser)]
#[command(
    name = "proact",
    version,
    about = "Fault-tolerant activation clipping toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with default values for any flag (keys use underscores).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the unprotected baseline (teacher) network.
    TrainBaseline(TrainBaselineArgs),
    /// Profile activation maxima of a model.
    Profile(ProfileArgs),
    /// Compute clipping thresholds with one of the hardening methods.
    Harden(HardenArgs),
    /// Run a bit-flip fault-injection campaign.
    Inject(InjectArgs),
    /// Join campaign summaries into a comparison table.
    Report(ReportArgs),
    /// Dump per-layer activation histograms.
    DumpHist(DumpHistArgs),
}

#[derive(Args)]
struct TrainBaselineArgs {
    #[command(flatten)]
    common: Common,
    /// lenet5 or minialex.
    #[arg(long)]
    arch: Option<String>,
    /// Dataset directory (MNIST IDX files or CIFAR-10 binary batches).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// sgd or adam.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Use only the first N training samples.
    #[arg(long)]
    train_limit: Option<usize>,
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Training samples used for profiling.
    #[arg(long)]
    samples: Option<usize>,
    /// Record per-neuron maxima for every layer, not only the last hidden one.
    #[arg(long)]
    all_neurons: Option<bool>,
}

#[derive(Args)]
struct HardenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// ranger-lw, ranger-nw, ft-clipact, fitact or proact.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    profile_samples: Option<usize>,
    /// Training samples used for threshold training and the FT-ClipAct search.
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    epochs_last: Option<usize>,
    #[arg(long)]
    epochs_other: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_halving_every: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    slope: Option<f64>,
    #[arg(long)]
    grid_size: Option<usize>,
    #[arg(long)]
    fi_budget: Option<usize>,
    #[arg(long)]
    fi_ber: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct InjectArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Threshold JSON; without it the plain ReLU network is injected.
    #[arg(long)]
    thresholds: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated bit error rates.
    #[arg(long, value_delimiter = ',')]
    ber: Option<Vec<f64>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Evaluate on the first N test samples.
    #[arg(long)]
    eval_limit: Option<usize>,
    /// Label recorded in the campaign metadata.
    #[arg(long)]
    method: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
    /// Campaign output directories.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Also compute the L2 activation distance at this BER on the given data.
    #[arg(long)]
    l2_ber: Option<f64>,
    #[arg(long)]
    l2_plans: Option<usize>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    eval_limit: Option<usize>,
    /// Also dump activation histograms per method (fault-free and at the L2 BER).
    #[arg(long)]
    hist: Option<bool>,
    #[arg(long)]
    bins: Option<usize>,
}

#[derive(Args)]
struct DumpHistArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    thresholds: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Inject one plan at this BER before collecting (0 = fault-free).
    #[arg(long)]
    ber: Option<f64>,
    #[arg(long)]
    bins: Option<usize>,
    /// Boundary between the low and high histogram ranges.
    #[arg(long)]
    split: Option<f64>,
    #[arg(long)]
    eval_limit: Option<usize>,
}

/// A failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn io(message: impl Into<String>) -> Self {
        Self {
            code: 4,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Divergence { .. } => 3,
            Error::Io(_)
            | Error::Json(_)
            | Error::Format(_)
            | Error::Truncated { .. }
            | Error::UnsupportedLayer(_) => 4,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Flag values layered over the config file; every value read is recorded
/// and echoed into the output directory.
struct Settings {
    file: toml::Table,
    raw: Option<String>,
    effective: toml::Table,
}

impl Settings {
    fn load(common: &Common, command: &str) -> Outcome<Self> {
        let (file, raw) = match &common.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Failure::usage(format!("--config {}: {e}", path.display())))?;
                let table: toml::Table = text
                    .parse()
                    .map_err(|e| Failure::usage(format!("--config {}: {e}", path.display())))?;
                (table, Some(text))
            }
            None => (toml::Table::new(), None),
        };
        let mut effective = toml::Table::new();
        effective.insert("command".into(), command.into());
        Ok(Self {
            file,
            raw,
            effective,
        })
    }

    fn value<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Outcome<T>
    where
        T: Serialize + DeserializeOwned,
    {
        let v = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(raw) => raw
                    .clone()
                    .try_into()
                    .map_err(|e| Failure::usage(format!("config key `{key}`: {e}")))?,
                None => default,
            },
        };
        self.record(key, &v)?;
        Ok(v)
    }

    fn optional<T>(&mut self, key: &str, flag: Option<T>) -> Outcome<Option<T>>
    where
        T: Serialize + DeserializeOwned,
    {
        let v = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(raw) => Some(
                    raw.clone()
                        .try_into()
                        .map_err(|e| Failure::usage(format!("config key `{key}`: {e}")))?,
                ),
                None => None,
            },
        };
        if let Some(v) = &v {
            self.record(key, v)?;
        }
        Ok(v)
    }

    /// A path that must be supplied and must exist.
    fn path(&mut self, key: &str, flag: Option<PathBuf>) -> Outcome<PathBuf> {
        let flag_name = format!("--{}", key.replace('_', "-"));
        let path = self
            .optional::<PathBuf>(key, flag)?
            .ok_or_else(|| Failure::usage(format!("missing required {flag_name}")))?;
        if !path.exists() {
            return Err(Failure::usage(format!(
                "{flag_name}: {} does not exist",
                path.display()
            )));
        }
        Ok(path)
    }

    fn record<T: Serialize>(&mut self, key: &str, v: &T) -> Outcome<()> {
        let value = toml::Value::try_from(v).map_err(|e| Failure::usage(format!("{key}: {e}")))?;
        self.effective.insert(key.into(), value);
        Ok(())
    }

    fn write(&self, out: &Path) -> Outcome<()> {
        fs::create_dir_all(out)?;
        let text = toml::to_string(&self.effective).map_err(|e| Failure::io(e.to_string()))?;
        fs::write(out.join("effective_config.toml"), text)?;
        if let Some(raw) = &self.raw {
            fs::write(out.join("input_config.toml"), raw)?;
        }
        Ok(())
    }
}

fn load_dataset(dir: &Path, train: bool) -> Outcome<Dataset> {
    let (mnist_images, _) = mnist_paths(dir, train);
    let data = if mnist_images.exists() {
        load_mnist(dir, train)?
    } else {
        load_cifar10_dir(dir, train)?
    };
    Ok(data)
}

fn limit(data: Dataset, n: Option<usize>) -> Dataset {
    match n {
        Some(n) if n < data.len() => data.take(n),
        _ => data,
    }
}

fn load_thresholds(path: &Path) -> Outcome<ThresholdSet> {
    let text =
        fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    let doc: serde_json::Value = serde_json::from_str(&text).map_err(Error::from)?;
    Ok(ThresholdSet::from_json(&doc)?)
}

fn write_thresholds(path: &Path, set: &ThresholdSet) -> Outcome<()> {
    let text = serde_json::to_string_pretty(&set.to_json()).map_err(Error::from)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn cmd_train_baseline(a: TrainBaselineArgs) -> Outcome<()> {
    let mut s = Settings::load(&a.common, "train-baseline")?;
    let out = a.common.out.clone();
    let arch = s.value("arch", a.arch, "lenet5".to_string())?;
    let data_dir = s.path("data", a.data)?;
    let seed = s.value("seed", a.common.seed, 0u64)?;
    let defaults = BaselineConfig::default();
    let optimizer = s.value("optimizer", a.optimizer, "sgd".to_string())?;
    let momentum = s.value("momentum", a.momentum, 0.9)?;
    let cfg = BaselineConfig {
        epochs: s.value("epochs", a.epochs, defaults.epochs)?,
        batch_size: s.value("batch_size", a.batch_size, defaults.batch_size)?,
        learning_rate: s.value("lr", a.lr, defaults.learning_rate)?,
        optimizer: match optimizer.as_str() {
            "sgd" => BaselineOptimizer::Sgd { momentum },
            "adam" => BaselineOptimizer::Adam(AdamConfig::default()),
            other => {
                return Err(Failure::usage(format!(
                    "--optimizer: unknown optimizer `{other}` (sgd, adam)"
                )))
            }
        },
        seed,
        ..defaults
    };
    let train_limit = s.optional("train_limit", a.train_limit)?;
    s.write(&out)?;

    let net =
        Network::from_builder(&arch, seed).map_err(|e| Failure::usage(format!("--arch: {e}")))?;
    let train = limit(load_dataset(&data_dir, true)?, train_limit);
    let test = load_dataset(&data_dir, false)?;
    let (trained, log) = train_baseline(&net, &train, &cfg)?;
    save_model(&trained, out.join("model.rrtm"))?;
    let mut csv = String::from("epoch,learning_rate,mean_loss,train_accuracy\n");
    for e in &log {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch, e.learning_rate, e.mean_loss, e.train_accuracy
        ));
    }
    fs::write(out.join("train_log.csv"), csv)?;
    let top1 = top1_accuracy(&trained, None, &test)?;
    fs::write(
        out.join("metrics.csv"),
        format!("metric,value\ntest_top1,{top1}\n"),
    )?;
    println!("test_top1 {top1}");
    Ok(())
}

fn cmd_profile(a: ProfileArgs) -> Outcome<()> {
    let mut s = Settings::load(&a.common, "profile")?;
    let out = a.common.out.clone();
    let model = s.path("model", a.model)?;
    let data_dir = s.path("data", a.data)?;
    let samples = s.value("samples", a.samples, 3000usize)?;
    let all_neurons = s.value("all_neurons", a.all_neurons, false)?;
    let seed = s.value("seed", a.common.seed, 0u64)?;
    s.write(&out)?;
    let net = load_model(&model)?;
    let train = load_dataset(&data_dir, true)?;
    let (profile_set, _) = split_validation(&train, samples.min(train.len()), seed)?;
    let report = profile_max_with(&net, &profile_set, all_neurons)?;
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    fs::write(out.join("profile.json"), text + "\n")?;
    for (layer, max) in &report.layer_max {
        println!("layer {layer} max {max}");
    }
    Ok(())
}

fn cmd_harden(a: HardenArgs) -> Outcome<()> {
    let mut s = Settings::load(&a.common, "harden")?;
    let out = a.common.out.clone();
    let method = s.value("method", a.method, "proact".to_string())?;
    if !METHODS.contains(&method.as_str()) {
        return Err(Failure::usage(format!(
            "--method: unknown method `{method}` (expected one of {})",
            METHODS.join(", ")
        )));
    }
    let model = s.path("model", a.model)?;
    let data_dir = s.path("data", a.data)?;
    let seed = s.value("seed", a.common.seed, 0u64)?;
    let profile_samples = s.value("profile_samples", a.profile_samples, 3000usize)?;
    let train_limit = s.value("train_limit", a.train_limit, 10_000usize)?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        epochs_last_layer: s.value("epochs_last", a.epochs_last, d.epochs_last_layer)?,
        epochs_other_layers: s.value("epochs_other", a.epochs_other, d.epochs_other_layers)?,
        learning_rate: s.value("lr", a.lr, d.learning_rate)?,
        lr_halving_every: s.value("lr_halving_every", a.lr_halving_every, d.lr_halving_every)?,
        batch_size: s.value("batch_size", a.batch_size, d.batch_size)?,
        temperature: s.value("temperature", a.temperature, d.temperature)?,
        gamma: s.value("gamma", a.gamma, d.gamma)?,
        slope: s.value("slope", a.slope, d.slope)?,
        adam: d.adam,
        seed,
    };
    cfg.validate()?;
    let fd = FtClipActConfig::default();
    let workers = s.value("workers", a.workers, 1usize)?;
    let ft = FtClipActConfig {
        grid_size: s.value("grid_size", a.grid_size, fd.grid_size)?,
        ber: s.value("fi_ber", a.fi_ber, fd.ber)?,
        fi_budget: s.value("fi_budget", a.fi_budget, fd.fi_budget)?,
        tolerance: s.value("tolerance", a.tolerance, fd.tolerance)?,
        seed,
        workers,
    };
    s.write(&out)?;

    let net = load_model(&model)?;
    let train = load_dataset(&data_dir, true)?;
    let test = load_dataset(&data_dir, false)?;
    let (profile_set, rest) = split_validation(&train, profile_samples.min(train.len()), seed)?;
    let train_set = limit(rest, Some(train_limit));
    let neuronwise = matches!(method.as_str(), "ranger-nw" | "fitact");
    let report = profile_max_with(&net, &profile_set, neuronwise)?;

    let mut log: Vec<TrainLogRow> = Vec::new();
    let log_path = out.join("harden_log.csv");
    let write_log = |log: &[TrainLogRow]| -> Outcome<()> {
        let mut csv = format!("{}\n", TrainLogRow::CSV_HEADER);
        for r in log {
            csv.push_str(&r.csv_line());
            csv.push('\n');
        }
        fs::write(&log_path, csv)?;
        Ok(())
    };
    let trained = match method.as_str() {
        "ranger-lw" => harden_ranger(&net, &report, Granularity::Layer),
        "ranger-nw" => harden_ranger(&net, &report, Granularity::Neuron),
        "ft-clipact" => search_ftclipact(&net, &train_set, &report, &ft).map(|(set, rows)| {
            let mut csv = format!("{}\n", proact::hardening::CandidateRow::CSV_HEADER);
            for r in rows {
                csv.push_str(&r.csv_line());
                csv.push('\n');
            }
            let _ = fs::write(out.join("ftclipact_search.csv"), csv);
            set
        }),
        "fitact" => neuronwise_init(&net, &report, cfg.slope)
            .and_then(|init| train_fitact_logged(&net, &net, &train_set, &init, &cfg, &mut log))
            .map(|t| t.thresholds),
        _ => hybrid_init(&net, &report, cfg.slope)
            .and_then(|init| train_proact_logged(&net, &net, &train_set, &init, &cfg, &mut log))
            .map(|t| t.thresholds),
    };
    write_log(&log)?;
    let thresholds = match trained {
        Ok(t) => t,
        Err(e @ Error::Divergence { .. }) => {
            return Err(Failure {
                code: 3,
                message: format!("{e}; partial training log in {}", log_path.display()),
            })
        }
        Err(e) => return Err(e.into()),
    };
    write_thresholds(&out.join("thresholds.json"), &thresholds)?;
    let before = top1_accuracy(&net, None, &test)?;
    let after = top1_accuracy(&net, Some(&thresholds), &test)?;
    let overhead = memory_overhead(&net, &thresholds)?;
    fs::write(
        out.join("harden_summary.csv"),
        format!(
            "method,top1_before,top1_after,memory_overhead,thresholds\n{method},{before},{after},{overhead},{}\n",
            thresholds.count()
        ),
    )?;
    println!("method {method}");
    println!("top1_before {before}");
    println!("top1_after {after}");
    println!("memory_overhead {overhead}");
    Ok(())
}

fn cmd_inject(a: InjectArgs) -> Outcome<()> {
    let mut s = Settings::load(&a.common, "inject")?;
    let out = a.common.out.clone();
    let model = s.path("model", a.model)?;
    let thresholds_path = match s.optional::<PathBuf>("thresholds", a.thresholds)? {
        Some(p) if !p.exists() => {
            return Err(Failure::usage(format!(
                "--thresholds: {} does not exist",
                p.display()
            )))
        }
        other => other,
    };
    let data_dir = s.path("data", a.data)?;
    let d = CampaignConfig::default();
    let cfg = CampaignConfig {
        bers: s.value("ber", a.ber, DEFAULT_BERS.to_vec())?,
        trials: s.value("trials", a.trials, d.trials)?,
        seed: s.value("seed", a.common.seed, d.seed)?,
        workers: s.value("workers", a.workers, d.workers)?,
        cache_bytes: d.cache_bytes,
    };
    cfg.validate()?;
    let eval_limit = s.optional("eval_limit", a.eval_limit)?;
    let default_method = if thresholds_path.is_some() {
        "hardened"
    } else {
        "unprotected"
    };
    let method = s.value("method", a.method, default_method.to_string())?;
    s.write(&out)?;

    let net = load_model(&model)?;
    let thresholds = thresholds_path
        .as_deref()
        .map(load_thresholds)
        .transpose()?;
    let test = limit(load_dataset(&data_dir, false)?, eval_limit);
    let result = run_campaign(&net, thresholds.as_ref(), &cfg, &test)?;
    fs::write(out.join("campaign_trials.csv"), result.trials_csv())?;
    fs::write(out.join("campaign_summary.csv"), result.summary_csv())?;
    let failed: usize = result.summaries.iter().map(|s| s.failed).sum();
    let meta = json!({
        "method": method,
        "model": fs::canonicalize(&model)?,
        "thresholds": thresholds_path.as_deref().map(fs::canonicalize).transpose()?,
        "baseline_top1": result.fault_free_top1,
        "eval_samples": test.len(),
        "seed": cfg.seed,
        "failed_trials": failed,
    });
    let text = serde_json::to_string_pretty(&meta).map_err(Error::from)?;
    fs::write(out.join("campaign_meta.json"), text + "\n")?;
    for s in &result.summaries {
        println!(
            "ber {} mean {} std {} trials {}",
            s.ber, s.mean, s.std, s.trials
        );
    }
    if failed > 0 {
        eprintln!("warning: {failed} trials failed; see campaign_trials.csv");
    }
    Ok(())
}

struct CampaignInput {
    method: String,
    baseline: f64,
    model: Option<PathBuf>,
    thresholds: Option<PathBuf>,
    rows: Vec<(f64, f64)>,
}

fn read_campaign(dir: &Path) -> Outcome<CampaignInput> {
    if !dir.is_dir() {
        return Err(Failure::usage(format!(
            "--inputs: {} is not a directory",
            dir.display()
        )));
    }
    let summary_path = dir.join("campaign_summary.csv");
    let summary = fs::read_to_string(&summary_path).map_err(|_| {
        Failure::usage(format!(
            "--inputs: no campaign_summary.csv in {}",
            dir.display()
        ))
    })?;
    let meta: serde_json::Value = match fs::read_to_string(dir.join("campaign_meta.json")) {
        Ok(text) => serde_json::from_str(&text).map_err(Error::from)?,
        Err(_) => json!({}),
    };
    let mut rows = Vec::new();
    for line in summary.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split(',').collect();
        let parse = |i: usize| -> Outcome<f64> {
            cols.get(i).and_then(|c| c.parse().ok()).ok_or_else(|| {
                Failure::io(format!(
                    "{}: malformed row `{line}`",
                    summary_path.display()
                ))
            })
        };
        rows.push((parse(0)?, parse(1)?));
    }
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let method = meta["method"].as_str().map(str::to_owned).unwrap_or(name);
    // without metadata the fault-free accuracy is unknown; drops are then relative to the first row
    let baseline = meta["baseline_top1"]
        .as_f64()
        .unwrap_or_else(|| rows.first().map_or(0.0, |r| r.1));
    Ok(CampaignInput {
        method,
        baseline,
        model: meta["model"].as_str().map(PathBuf::from),
        thresholds: meta["thresholds"].as_str().map(PathBuf::from),
        rows,
    })
}

fn cmd_report(a: ReportArgs) -> Outcome<()> {
    let mut s = Settings::load(&a.common, "report")?;
    let out = a.common.out.clone();
    let inputs: Vec<String> = a.inputs.iter().map(|p| p.display().to_string()).collect();
    s.record("inputs", &inputs)?;
    let l2_ber = s.optional("l2_ber", a.l2_ber)?;
    let l2_plans = s.value("l2_plans", a.l2_plans, 50usize)?;
    let hist = s.value("hist", a.hist, false)?;
    let bins = s.value("bins", a.bins, 20usize)?;
    let seed = s.value("seed", a.common.seed, 0u64)?;
    let eval_limit = s.optional("eval_limit", a.eval_limit)?;
    let data_dir = if l2_ber.is_some() || hist {
        Some(s.path("data", a.data)?)
    } else {
        None
    };
    let campaigns = a
        .inputs
        .iter()
        .map(|d| read_campaign(d))
        .collect::<Outcome<Vec<_>>>()?;
    if campaigns.iter().all(|c| c.rows.is_empty()) {
        return Err(Failure::usage("--inputs: no campaign summaries found"));
    }
    s.write(&out)?;

    let mut csv = String::from("method,ber,mean,drop\n");
    for c in &campaigns {
        for &(ber, mean) in &c.rows {
            csv.push_str(&format!(
                "{},{ber},{mean},{}\n",
                c.method,
                c.baseline - mean
            ));
        }
    }
    fs::write(out.join("report.csv"), csv)?;

    if let Some(dir) = data_dir {
        let test = limit(load_dataset(&dir, false)?, eval_limit);
        let models = campaigns
            .iter()
            .map(|c| {
                let model = c.model.as_ref().ok_or_else(|| {
                    Failure::usage(format!("campaign `{}` records no model path", c.method))
                })?;
                let net = load_model(model)?;
                let th = c.thresholds.as_deref().map(load_thresholds).transpose()?;
                Ok((c.method.clone(), net, th))
            })
            .collect::<Outcome<Vec<_>>>()?;
        if let Some(ber) = l2_ber {
            // plans are drawn over the largest space and restricted per method,
            // so every method sees the same parameter flips
            let largest = models
                .iter()
                .map(|(_, n, t)| FaultSpace::new(n, t.as_ref()))
                .max_by_key(FaultSpace::words)
                .expect("at least one campaign");
            let mut l2 = String::from("method,ber,plans,mean_l2\n");
            for (method, net, th) in &models {
                let space = FaultSpace::new(net, th.as_ref());
                let mut total = 0.0;
                for p in 0..l2_plans {
                    let plan = plan_faults(&largest, ber, seed.wrapping_add(p as u64))?
                        .restrict_to(&space);
                    total += l2_activation_distance(net, th.as_ref(), &plan, &test)?;
                }
                l2.push_str(&format!(
                    "{method},{ber},{l2_plans},{}\n",
                    total / l2_plans.max(1) as f64
                ));
            }
            fs::write(out.join("l2_report.csv"), l2)?;
        }
        if hist {
            for (method, net, th) in &models {
                let dir = out.join("hist").join(method);
                dump_activation_histogram(
                    net,
                    th.as_ref(),
                    None,
                    &test,
                    bins,
                    1.0,
                    dir.join("fault_free"),
                )?;
                if let Some(ber) = l2_ber {
                    let plan = plan_faults(&FaultSpace::new(net, th.as_ref()), ber, seed)?;
                    dump_activation_histogram(
                        net,
                        th.as_ref(),
                        Some(&plan),
                        &test,
                        bins,
                        1.0,
                        dir.join("faulty"),
                    )?;
                }
            }
        }
    }
    println!("{}", fs::read_to_string(out.join("report.csv"))?.trim_end());
    Ok(())
}

fn cmd_dump_hist(a: DumpHistArgs) -> Outcome<()> {
    let mut s = Settings::load(&a.common, "dump-hist")?;
    let out = a.common.out.clone();
    let model = s.path("model", a.model)?;
    let thresholds_path = s.optional::<PathBuf>("thresholds", a.thresholds)?;
    let data_dir = s.path("data", a.data)?;
    let ber = s.value("ber", a.ber, 0.0)?;
    let bins = s.value("bins", a.bins, 20usize)?;
    let split = s.value("split", a.split, 1.0)?;
    let seed = s.value("seed", a.common.seed, 0u64)?;
    let eval_limit = s.value("eval_limit", a.eval_limit, 1000usize)?;
    s.write(&out)?;
    let net = load_model(&model)?;
    let th = thresholds_path
        .as_deref()
        .map(load_thresholds)
        .transpose()?;
    let test = limit(load_dataset(&data_dir, false)?, Some(eval_limit));
    let plan = (ber > 0.0)
        .then(|| plan_faults(&FaultSpace::new(&net, th.as_ref()), ber, seed))
        .transpose()?;
    let paths =
        dump_activation_histogram(&net, th.as_ref(), plan.as_ref(), &test, bins, split, &out)?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainBaseline(a) => cmd_train_baseline(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Harden(a) => cmd_harden(a),
        Command::Inject(a) => cmd_inject(a),
        Command::Report(a) => cmd_report(a),
        Command::DumpHist(a) => cmd_dump_hist(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
