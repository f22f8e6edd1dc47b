//! Command-line surface for the variational contrastive toolkit.
//!
//! Nine subcommands tie the library together: `synth` generates a
//! Gaussian-mixture dataset as CSV, `train` fits an encoder, `probe`
//! scores a checkpoint with a linear classifier, `spectrum` reports the
//! embedding covariance eigenvalues and effective rank, `mi` estimates the
//! embedding/label mutual information, `uncertainty` regresses posterior
//! spread on soft-label entropy, `prop1` sweeps the contrastive bound
//! tightness on a discrete alphabet, `gap` measures the KL generalization
//! trend across training sizes, and `ood` compares posterior dispersion
//! between two datasets.
//!
//! Configuration is a flat `key = value` text file (`#` starts a comment);
//! command-line flags override file values, which override built-in
//! defaults. All randomness flows from `--seed`, so identical invocations
//! produce byte-identical outputs.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use vcl::data::{
    gen_gaussian_mixture, load_csv_dataset, load_soft_labels, AugmentOp, AugmentPolicy, Dataset,
    MixtureSpec,
};
use vcl::diagnostics::{
    covariance_spectrum, gap_trend, linear_probe, mixed_ksg_mi, ood_dispersion_report,
    uncertainty_regression,
};
use vcl::encoder::{Activation, EncoderConfig, MlpEncoder};
use vcl::optimal_critic::{convergence_check, DiscreteJoint};
use vcl::train::{write_metrics_jsonl, Method, OptimizerKind, TrainConfig, Trainer};
use vcl::{Error, Prng, Result};

// ── Argument surface ────────────────────────────────────────────────────

#[derive(Parser, Debug)]
#[command(
    name = "vcl",
    version,
    about = "Variational contrastive representation learning toolkit"
)]
struct Cli {
    /// Flat `key = value` config file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master random seed (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Input dataset (CSV; label in `--label-column`, features elsewhere).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Encoder checkpoint: written by `train`, read by the evaluators.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output path (reports default to standard output without it).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

/// Training tunables exposed as flags; every one mirrors a config-file key
/// and overrides it when given.
#[derive(Args, Debug, Clone, Default)]
struct TrainFlags {
    /// simclr, vsimclr, vsimclr_asym, supcon, vsupcon, or distnce.
    #[arg(long)]
    method: Option<String>,
    /// Softmax temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// KL regularizer weight.
    #[arg(long)]
    beta: Option<f64>,
    /// Posterior samples per view.
    #[arg(long = "m-samples")]
    m_samples: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    /// sgd or adam.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    /// Momentum for sgd.
    #[arg(long)]
    momentum: Option<f64>,
    /// Cosine learning-rate decay (true/false).
    #[arg(long = "cosine-decay")]
    cosine_decay: Option<bool>,
    /// Replace sampled embeddings by normalized means (true/false).
    #[arg(long = "sigma-zero-limit")]
    sigma_zero_limit: Option<bool>,
    /// Augmentation pipeline, e.g. "noise:0.5,dropout:0.2,rotation:0.8:4".
    #[arg(long)]
    augment: Option<String>,
    /// Comma-separated hidden layer widths, e.g. "64,32".
    #[arg(long = "hidden-dims")]
    hidden_dims: Option<String>,
    #[arg(long = "latent-dim")]
    latent_dim: Option<usize>,
    /// tanh or relu.
    #[arg(long)]
    activation: Option<String>,
    /// Which CSV column holds the label (default 0).
    #[arg(long = "label-column")]
    label_column: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a Gaussian-mixture dataset and write it as CSV to --out.
    Synth {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long = "per-class", default_value_t = 256)]
        per_class: usize,
        /// Feature dimension.
        #[arg(long, default_value_t = 8)]
        dim: usize,
        /// Distance of each class center from the origin.
        #[arg(long, default_value_t = 4.0)]
        separation: f64,
        /// Within-class standard deviation.
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        /// Additionally hold out this many samples per class into
        /// --test-out. Both files then share the same class centers, which
        /// two differently seeded synth runs would not.
        #[arg(long = "test-per-class", requires = "test_out")]
        test_per_class: Option<usize>,
        /// Where to write the held-out test split (requires
        /// --test-per-class).
        #[arg(long = "test-out", requires = "test_per_class")]
        test_out: Option<PathBuf>,
    },
    /// Fit an encoder on --data; save it to --checkpoint and the per-epoch
    /// metrics (JSON lines) to --out.
    Train {
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Train a linear classifier on frozen embeddings of --data and score
    /// it on --test-data (JSON report).
    Probe {
        #[arg(long = "test-data")]
        test_data: PathBuf,
        /// Full-batch gradient steps.
        #[arg(long, default_value_t = 300)]
        epochs: usize,
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
        #[arg(long = "label-column", default_value_t = 0)]
        label_column: usize,
    },
    /// Covariance eigenvalue spectrum and effective rank of the embeddings
    /// of --data (raw features when no --checkpoint is given).
    Spectrum {
        /// Also write the eigenvalues as CSV, one per row.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long = "label-column", default_value_t = 0)]
        label_column: usize,
    },
    /// k-nearest-neighbor mutual information between embeddings and labels.
    Mi {
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long = "label-column", default_value_t = 0)]
        label_column: usize,
    },
    /// Regress posterior spread (log-determinant and trace) on the entropy
    /// of per-sample soft labels (headerless CSV, one probability column
    /// per class).
    Uncertainty {
        #[arg(long = "soft-labels")]
        soft_labels: PathBuf,
        #[arg(long = "label-column", default_value_t = 0)]
        label_column: usize,
    },
    /// Sweep the contrastive bound tightness on the benchmark alphabet:
    /// Monte-Carlo `-I_NCE + log N` against the enumerated limit, one CSV
    /// row per batch size on standard output (JSON copy to --out).
    Prop1 {
        #[arg(long, default_value_t = 2)]
        alphabet: usize,
        /// Comma-separated batch sizes, strictly increasing.
        #[arg(long, default_value = "4,64,1024")]
        ns: String,
        #[arg(long, default_value_t = 10000)]
        trials: usize,
    },
    /// KL generalization gap across training sizes: trains one encoder per
    /// (size, seed) on subsets of --data and compares train and held-out
    /// mean KL (JSON report).
    Gap {
        /// Held-out dataset; needs at least 10x the largest size and no
        /// rows in common with --data.
        #[arg(long)]
        heldout: PathBuf,
        /// Comma-separated training sizes, strictly increasing, >= 4 values.
        #[arg(long, default_value = "64,256,1024,4096")]
        ns: String,
        /// Number of seeds per size (seed, seed+1, ...).
        #[arg(long = "seed-count", default_value_t = 10)]
        seed_count: usize,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Posterior-dispersion comparison between --data (in-distribution)
    /// and --ood-data; infinite ratios serialize as JSON null.
    Ood {
        #[arg(long = "ood-data")]
        ood_data: PathBuf,
        #[arg(long = "label-column", default_value_t = 0)]
        label_column: usize,
    },
}

// ── Failure: usage vs runtime ───────────────────────────────────────────

enum Failure {
    /// Invalid or incomplete command line (exit 1).
    Usage(String),
    /// The command itself failed (exit 2).
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Failure {
        Failure::Runtime(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn need<T>(opt: Option<T>, flag: &str) -> std::result::Result<T, Failure> {
    opt.ok_or_else(|| Failure::Usage(format!("missing required flag {flag}")))
}

// ── Settings: defaults < config file < flags ────────────────────────────

#[derive(Debug, Clone, PartialEq)]
struct Settings {
    method: Method,
    tau: f64,
    beta: f64,
    m_samples: usize,
    epochs: usize,
    batch_size: usize,
    optimizer: String,
    lr: f64,
    momentum: f64,
    cosine_decay: bool,
    sigma_zero_limit: bool,
    augment: AugmentPolicy,
    hidden_dims: Vec<usize>,
    latent_dim: usize,
    activation: Activation,
    spectral_bounds: Option<Vec<f64>>,
    seed: u64,
    label_column: usize,
}

impl Default for Settings {
    fn default() -> Settings {
        Settings {
            method: Method::VSimClr,
            tau: 0.5,
            beta: 0.25,
            m_samples: 1,
            epochs: 30,
            batch_size: 64,
            optimizer: "sgd".to_string(),
            lr: 0.05,
            momentum: 0.9,
            cosine_decay: true,
            sigma_zero_limit: false,
            augment: AugmentPolicy {
                ops: vec![AugmentOp::VectorNoise { std: 0.5 }],
            },
            hidden_dims: vec![32],
            latent_dim: 8,
            activation: Activation::Tanh,
            spectral_bounds: None,
            seed: 0,
            label_column: 0,
        }
    }
}

impl Settings {
    /// Loads the config file (when given), then lays the flag overrides on
    /// top, then the global `--seed`.
    fn resolve(
        config: &Option<PathBuf>,
        flags: &TrainFlags,
        seed: Option<u64>,
    ) -> Result<Settings> {
        let mut s = Settings::default();
        if let Some(path) = config {
            s.apply_entries(&parse_config_text(&fs::read_to_string(path)?, path)?, path)?;
        }
        s.apply_flags(flags)?;
        if let Some(seed) = seed {
            s.seed = seed;
        }
        Ok(s)
    }

    fn apply_entries(&mut self, entries: &BTreeMap<String, String>, path: &Path) -> Result<()> {
        for (key, value) in entries {
            self.apply_one(key, value).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: 0,
                detail: format!("key {key:?}: {e}"),
            })?;
        }
        Ok(())
    }

    fn apply_one(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "method" => self.method = value.parse()?,
            "tau" => self.tau = parse_num(value)?,
            "beta" => self.beta = parse_num(value)?,
            "m_samples" => self.m_samples = parse_count(value)?,
            "epochs" => self.epochs = parse_count(value)?,
            "batch_size" => self.batch_size = parse_count(value)?,
            "optimizer" => self.optimizer = parse_optimizer_name(value)?,
            "lr" => self.lr = parse_num(value)?,
            "momentum" => self.momentum = parse_num(value)?,
            "cosine_decay" => self.cosine_decay = parse_bool(value)?,
            "sigma_zero_limit" => self.sigma_zero_limit = parse_bool(value)?,
            "augment" => self.augment = parse_augment(value)?,
            "hidden_dims" => self.hidden_dims = parse_count_list(value)?,
            "latent_dim" => self.latent_dim = parse_count(value)?,
            "activation" => self.activation = value.parse()?,
            "spectral_bounds" => {
                self.spectral_bounds = Some(parse_num_list(value)?);
            }
            "seed" => self.seed = parse_count(value)? as u64,
            "label_column" => self.label_column = parse_count(value)?,
            other => {
                return Err(Error::InvalidArg {
                    what: format!("unknown config key {other:?}"),
                })
            }
        }
        Ok(())
    }

    fn apply_flags(&mut self, flags: &TrainFlags) -> Result<()> {
        if let Some(v) = &flags.method {
            self.method = v.parse()?;
        }
        if let Some(v) = flags.tau {
            self.tau = v;
        }
        if let Some(v) = flags.beta {
            self.beta = v;
        }
        if let Some(v) = flags.m_samples {
            self.m_samples = v;
        }
        if let Some(v) = flags.epochs {
            self.epochs = v;
        }
        if let Some(v) = flags.batch_size {
            self.batch_size = v;
        }
        if let Some(v) = &flags.optimizer {
            self.optimizer = parse_optimizer_name(v)?;
        }
        if let Some(v) = flags.lr {
            self.lr = v;
        }
        if let Some(v) = flags.momentum {
            self.momentum = v;
        }
        if let Some(v) = flags.cosine_decay {
            self.cosine_decay = v;
        }
        if let Some(v) = flags.sigma_zero_limit {
            self.sigma_zero_limit = v;
        }
        if let Some(v) = &flags.augment {
            self.augment = parse_augment(v)?;
        }
        if let Some(v) = &flags.hidden_dims {
            self.hidden_dims = parse_count_list(v)?;
        }
        if let Some(v) = flags.latent_dim {
            self.latent_dim = v;
        }
        if let Some(v) = &flags.activation {
            self.activation = v.parse()?;
        }
        if let Some(v) = flags.label_column {
            self.label_column = v;
        }
        Ok(())
    }

    fn train_config(&self) -> TrainConfig {
        let optimizer = if self.optimizer == "adam" {
            OptimizerKind::adam(self.lr)
        } else {
            OptimizerKind::SgdMomentum {
                lr: self.lr,
                momentum: self.momentum,
            }
        };
        TrainConfig {
            method: self.method,
            tau: self.tau,
            beta: self.beta,
            m_samples: self.m_samples,
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer,
            cosine_decay: self.cosine_decay,
            augment: self.augment.clone(),
            seed: self.seed,
            sigma_zero_limit: self.sigma_zero_limit,
        }
    }

    fn encoder_config(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            latent_dim: self.latent_dim,
            activation: self.activation,
            spectral_bounds: self.spectral_bounds.clone(),
        }
    }
}

// ── Small parsers ───────────────────────────────────────────────────────

fn parse_num(s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::InvalidArg {
        what: format!("expected a number, got {s:?}"),
    })
}

fn parse_count(s: &str) -> Result<usize> {
    s.trim().parse().map_err(|_| Error::InvalidArg {
        what: format!("expected a nonnegative integer, got {s:?}"),
    })
}

fn parse_bool(s: &str) -> Result<bool> {
    match s.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::InvalidArg {
            what: format!("expected true or false, got {other:?}"),
        }),
    }
}

fn parse_count_list(s: &str) -> Result<Vec<usize>> {
    s.split(',').map(parse_count).collect()
}

fn parse_num_list(s: &str) -> Result<Vec<f64>> {
    s.split(',').map(parse_num).collect()
}

fn parse_optimizer_name(s: &str) -> Result<String> {
    match s.trim() {
        "sgd" | "adam" => Ok(s.trim().to_string()),
        other => Err(Error::InvalidArg {
            what: format!("unknown optimizer {other:?} (expected sgd or adam)"),
        }),
    }
}

/// Parses a comma-separated augmentation pipeline. Each op is a name with
/// colon-separated arguments: `noise:STD`, `dropout:RATE`,
/// `rotation:MAX_ANGLE:COUNT`, `flip`, `crop:PADDING`, `imgnoise:STD`;
/// `none` is the empty pipeline.
fn parse_augment(s: &str) -> Result<AugmentPolicy> {
    let s = s.trim();
    if s == "none" || s.is_empty() {
        return Ok(AugmentPolicy { ops: Vec::new() });
    }
    let mut ops = Vec::new();
    for token in s.split(',') {
        let mut parts = token.trim().split(':');
        let name = parts.next().unwrap_or("");
        let args: Vec<&str> = parts.collect();
        let bad_arity = |n: usize| -> bool { args.len() != n };
        let op = match name {
            "noise" if !bad_arity(1) => AugmentOp::VectorNoise {
                std: parse_num(args[0])?,
            },
            "dropout" if !bad_arity(1) => AugmentOp::VectorDropout {
                rate: parse_num(args[0])?,
            },
            "rotation" if !bad_arity(2) => AugmentOp::VectorRotation {
                max_angle: parse_num(args[0])?,
                count: parse_count(args[1])?,
            },
            "flip" if !bad_arity(0) => AugmentOp::ImageFlip,
            "crop" if !bad_arity(1) => AugmentOp::ImageCrop {
                padding: parse_count(args[0])?,
            },
            "imgnoise" if !bad_arity(1) => AugmentOp::ImageNoise {
                std: parse_num(args[0])?,
            },
            _ => {
                return Err(Error::InvalidArg {
                    what: format!("unknown augmentation op {token:?}"),
                })
            }
        };
        ops.push(op);
    }
    Ok(AugmentPolicy { ops })
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are
/// skipped. Later duplicates win.
fn parse_config_text(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                detail: format!("expected `key = value`, got {raw:?}"),
            });
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

// ── Output helpers ──────────────────────────────────────────────────────

/// Pretty JSON plus trailing newline, to `--out` or standard output.
fn emit_json<T: serde::Serialize>(out: &Option<PathBuf>, report: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::InvalidArg {
        what: format!("report serialization failed: {e}"),
    })? + "\n";
    match out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let d = data.features.cols();
    let mut text = String::from("label");
    for j in 0..d {
        text.push_str(&format!(",f{j}"));
    }
    text.push('\n');
    for i in 0..data.rows() {
        text.push_str(&data.labels[i].to_string());
        for &v in data.features.row_slice(i) {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn load_embeddings(
    data: &Dataset,
    checkpoint: &Option<PathBuf>,
) -> Result<vcl::Tensor> {
    match checkpoint {
        Some(path) => MlpEncoder::load(path)?.embed(&data.features),
        None => Ok(data.features.clone()),
    }
}

// ── Command implementations ─────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    cli: &Cli,
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    noise: f64,
    test_per_class: Option<usize>,
    test_out: Option<&Path>,
) -> CmdResult {
    let out = need(cli.out.as_ref(), "--out")?;
    let held = test_per_class.unwrap_or(0);
    let spec = MixtureSpec {
        n_per_class: per_class + held,
        input_dim: dim,
        n_classes: classes,
        separation,
        noise_std: noise,
    };
    let seed = cli.seed.unwrap_or(0);
    let data = gen_gaussian_mixture(&spec, &mut Prng::new(seed))?;
    if let (Some(held), Some(test_path)) = (test_per_class, test_out) {
        // Rows are class-major: split each class block so both files carry
        // every class and share the mixture's centers.
        let block = per_class + held;
        let mut train_idx = Vec::with_capacity(classes * per_class);
        let mut test_idx = Vec::with_capacity(classes * held);
        for c in 0..classes {
            for i in 0..block {
                if i < per_class {
                    train_idx.push(c * block + i);
                } else {
                    test_idx.push(c * block + i);
                }
            }
        }
        let train = data.subset(&train_idx)?;
        let test = data.subset(&test_idx)?;
        write_dataset_csv(out, &train)?;
        write_dataset_csv(test_path, &test)?;
        println!(
            "wrote {} train + {} test samples ({} classes x {} features) to {} and {}",
            train.rows(),
            test.rows(),
            classes,
            dim,
            out.display(),
            test_path.display()
        );
    } else {
        write_dataset_csv(out, &data)?;
        println!(
            "wrote {} samples ({} classes x {} features) to {}",
            data.rows(),
            classes,
            dim,
            out.display()
        );
    }
    Ok(())
}

fn cmd_train(cli: &Cli, flags: &TrainFlags) -> CmdResult {
    let data_path = need(cli.data.as_ref(), "--data")?;
    let settings = Settings::resolve(&cli.config, flags, cli.seed)?;
    let data = load_csv_dataset(data_path, settings.label_column)?;
    let mut trainer = Trainer::new(
        settings.train_config(),
        settings.encoder_config(data.features.cols()),
    )?;
    let outcome = trainer.fit(&data, None)?;
    if let Some(out) = &cli.out {
        write_metrics_jsonl(out, &outcome.records)?;
    }
    if let Some(ck) = &cli.checkpoint {
        trainer.encoder().save(ck)?;
    }
    match outcome.records.last() {
        Some(last) => println!(
            "trained {} epochs; final loss {:.6} (contrastive {:.6}, kl {:.6})",
            outcome.records.len(),
            last.loss,
            last.contrastive,
            last.kl
        ),
        None => println!("trained 0 epochs; encoder left at initialization"),
    }
    Ok(())
}

fn cmd_probe(cli: &Cli, test_data: &Path, epochs: usize, lr: f64, label_column: usize) -> CmdResult {
    let encoder = MlpEncoder::load(need(cli.checkpoint.as_ref(), "--checkpoint")?)?;
    let train = load_csv_dataset(need(cli.data.as_ref(), "--data")?, label_column)?;
    let test = load_csv_dataset(test_data, label_column)?;
    let train_embs = encoder.embed(&train.features)?;
    let test_embs = encoder.embed(&test.features)?;
    let report = linear_probe(
        &train_embs,
        &train.labels,
        &test_embs,
        &test.labels,
        epochs,
        lr,
    )?;
    emit_json(&cli.out, &report)?;
    Ok(())
}

fn cmd_spectrum(cli: &Cli, csv: &Option<PathBuf>, label_column: usize) -> CmdResult {
    let data = load_csv_dataset(need(cli.data.as_ref(), "--data")?, label_column)?;
    let embeddings = load_embeddings(&data, &cli.checkpoint)?;
    let report = covariance_spectrum(&embeddings)?;
    if let Some(path) = csv {
        let mut text = String::from("eigenvalue\n");
        for v in &report.eigenvalues {
            text.push_str(&format!("{v}\n"));
        }
        fs::write(path, text).map_err(Error::from)?;
    }
    emit_json(&cli.out, &report)?;
    Ok(())
}

fn cmd_mi(cli: &Cli, k: usize, label_column: usize) -> CmdResult {
    let data = load_csv_dataset(need(cli.data.as_ref(), "--data")?, label_column)?;
    let embeddings = load_embeddings(&data, &cli.checkpoint)?;
    let mi = mixed_ksg_mi(&embeddings, &data.labels, k)?;
    let report = serde_json::json!({
        "k": k,
        "samples": data.rows(),
        "mi_nats": mi,
    });
    emit_json(&cli.out, &report)?;
    Ok(())
}

fn cmd_uncertainty(cli: &Cli, soft_labels: &Path, label_column: usize) -> CmdResult {
    let encoder = MlpEncoder::load(need(cli.checkpoint.as_ref(), "--checkpoint")?)?;
    let data = load_csv_dataset(need(cli.data.as_ref(), "--data")?, label_column)?;
    let soft = load_soft_labels(soft_labels)?;
    let params = encoder.encode(&data.features)?;
    let report = uncertainty_regression(&params, &soft)?;
    emit_json(&cli.out, &report)?;
    Ok(())
}

fn cmd_prop1(cli: &Cli, alphabet: usize, ns: &str, trials: usize) -> CmdResult {
    let joint = DiscreteJoint::benchmark(alphabet)?;
    let sizes = parse_count_list(ns)?;
    let seed = cli.seed.unwrap_or(0);
    let trace = convergence_check(&joint, &sizes, trials, &Prng::new(seed))?;
    let mut csv = String::from("n,estimate,std_error,exact,abs_gap\n");
    for row in &trace.rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.n, row.estimate, row.std_error, row.exact, row.abs_gap
        ));
    }
    print!("{csv}");
    if cli.out.is_some() {
        emit_json(&cli.out, &trace)?;
    }
    Ok(())
}

fn cmd_gap(cli: &Cli, heldout: &Path, ns: &str, seed_count: usize, flags: &TrainFlags) -> CmdResult {
    let settings = Settings::resolve(&cli.config, flags, cli.seed)?;
    let pool = load_csv_dataset(need(cli.data.as_ref(), "--data")?, settings.label_column)?;
    let held = load_csv_dataset(heldout, settings.label_column)?;
    let sizes = parse_count_list(ns)?;
    let seeds: Vec<u64> = (0..seed_count as u64).map(|i| settings.seed + i).collect();
    let base_config = settings.train_config();
    let encoder_config = settings.encoder_config(pool.features.cols());
    let trend = gap_trend(&pool, &held, &sizes, &seeds, |subset, seed| {
        let mut config = base_config.clone();
        config.seed = seed;
        let mut trainer = Trainer::new(config, encoder_config.clone())?;
        trainer.fit(subset, None)?;
        Ok(trainer.encoder().clone())
    })?;
    emit_json(&cli.out, &trend)?;
    Ok(())
}

fn cmd_ood(cli: &Cli, ood_data: &Path, label_column: usize) -> CmdResult {
    let encoder = MlpEncoder::load(need(cli.checkpoint.as_ref(), "--checkpoint")?)?;
    let in_data = load_csv_dataset(need(cli.data.as_ref(), "--data")?, label_column)?;
    let out_data = load_csv_dataset(ood_data, label_column)?;
    let params_in = encoder.encode(&in_data.features)?;
    let params_out = encoder.encode(&out_data.features)?;
    let report = ood_dispersion_report(&params_in, &params_out)?;
    emit_json(&cli.out, &report)?;
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Synth {
            classes,
            per_class,
            dim,
            separation,
            noise,
            test_per_class,
            test_out,
        } => cmd_synth(
            cli,
            *classes,
            *per_class,
            *dim,
            *separation,
            *noise,
            *test_per_class,
            test_out.as_deref(),
        ),
        Command::Train { flags } => cmd_train(cli, flags),
        Command::Probe {
            test_data,
            epochs,
            lr,
            label_column,
        } => cmd_probe(cli, test_data, *epochs, *lr, *label_column),
        Command::Spectrum { csv, label_column } => cmd_spectrum(cli, csv, *label_column),
        Command::Mi { k, label_column } => cmd_mi(cli, *k, *label_column),
        Command::Uncertainty {
            soft_labels,
            label_column,
        } => cmd_uncertainty(cli, soft_labels, *label_column),
        Command::Prop1 {
            alphabet,
            ns,
            trials,
        } => cmd_prop1(cli, *alphabet, ns, *trials),
        Command::Gap {
            heldout,
            ns,
            seed_count,
            flags,
        } => cmd_gap(cli, heldout, ns, *seed_count, flags),
        Command::Ood {
            ood_data,
            label_column,
        } => cmd_ood(cli, ood_data, *label_column),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successful displays; everything
            // else is a usage error.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    match run(&cli) {
        Ok(()) => {}
        Err(Failure::Usage(message)) => {
            eprintln!("usage error: {message}");
            std::process::exit(1);
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}
