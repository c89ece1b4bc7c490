//! Command-line entry point: pretraining, training, inference, baselines,
//! evaluation, and the password sweep as subcommands. Every subcommand writes
//! only inside its `--out` directory; original images and passwords are never
//! persisted (run echoes redact them).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, BaselineKind, BaselineTrainConfig};
use crate::config;
use crate::dataset;
use crate::error::{Error, Result};
use crate::imageio;
use crate::metrics;
use crate::networks::{checkpoint, recognizer_pretrain, PretrainConfig, RecognizerConfig};
use crate::password::Password;
use crate::pipeline::{self, PassthroughDetector};
use crate::trainer::{self, TrainConfig};

#[derive(Parser)]
#[command(
    name = "facepass",
    version,
    about = "Password-conditioned face anonymization and deanonymization toolkit",
    long_about = "Trains and runs a face identity transformer conditioned on an N-bit password: \
                  anonymize with any password, recover the original with the inverse password, and \
                  get a photo-realistic decoy under every wrong password."
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Pretrain the face classifier F plus an independently seeded held-out
    /// verifier on the train split.
    PretrainClassifier {
        /// Dataset root: <root>/<identity>/<image>.png with split manifests.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for recognizer.ckpt, verifier.ckpt, and the report.
        #[arg(long)]
        out: PathBuf,
        /// Optional TOML config for the pretraining settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dotted-key overrides, e.g. --set epochs=40.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Seed override (wins over the config file).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the face identity transformer on the train split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pretrained classifier checkpoint from pretrain-classifier.
        #[arg(long)]
        recognizer: Option<PathBuf>,
        /// Resume from an earlier bundle checkpoint instead.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Anonymize face images under a password.
    Anonymize {
        /// Trained bundle checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Input PNG file or directory of PNGs.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Hex password (N/4 digits) or the word "random".
        #[arg(long)]
        password: String,
        /// Seed for --password random; required there, ignored otherwise.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Apply a (de)anonymization password to face images; with the inverse
    /// password this recovers originals, with any other it fabricates decoys.
    Deanonymize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        password: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Apply a classical anonymization baseline to images.
    Baseline {
        /// superpixel | edge | blur | noise | masked
        #[arg(long)]
        kind: String,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seed for the stochastic baselines.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a learned deanonymizer that inverts one baseline.
    TrainBaselineDeanon {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a trained model: verification rates, reconstruction
    /// distances, multimodality.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// Held-out verifier checkpoint (never adversarially updated).
        #[arg(long)]
        verifier: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Passwords per image for the multimodality score.
        #[arg(long, default_value_t = 4)]
        passwords: usize,
    },
    /// Render every password's anonymization of one image (N <= 8).
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Verifier checkpoint for the embedding statistics.
        #[arg(long)]
        verifier: PathBuf,
        /// Dataset root whose test split calibrates the change threshold.
        #[arg(long)]
        calibrate_data: Option<PathBuf>,
        /// Second input image for the modification-consistency report.
        #[arg(long)]
        second_image: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Parses argv and runs; returns a process exit code (0 success, 2 usage,
/// 3 data, 4 numeric failure).
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap renders its own help/usage text
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.exit_code());
            e.exit_code()
        }
    }
}

pub fn main() -> ExitCode {
    ExitCode::from(dispatch(std::env::args()) as u8)
}

/// Full long help for the tool and each subcommand, used by the golden test.
pub fn long_help() -> String {
    let mut cmd = Cli::command();
    let mut out = cmd.render_long_help().to_string();
    for sub in cmd.get_subcommands_mut() {
        out.push_str("\n============================================================\n");
        out.push_str(&sub.render_long_help().to_string());
    }
    out
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::PretrainClassifier {
            data,
            out,
            config,
            set,
            seed,
        } => run_pretrain(&data, &out, config.as_deref(), &set, seed),
        Cmd::Train {
            data,
            out,
            recognizer,
            resume,
            config,
            set,
            seed,
        } => run_train(&data, &out, recognizer.as_deref(), resume.as_deref(), config.as_deref(), &set, seed),
        Cmd::Anonymize {
            model,
            input,
            out,
            password,
            seed,
        } => run_transform("anonymize", &model, &input, &out, &password, seed),
        Cmd::Deanonymize {
            model,
            input,
            out,
            password,
            seed,
        } => run_transform("deanonymize", &model, &input, &out, &password, seed),
        Cmd::Baseline {
            kind,
            input,
            out,
            seed,
        } => run_baseline(&kind, &input, &out, seed),
        Cmd::TrainBaselineDeanon {
            kind,
            data,
            out,
            config,
            set,
            seed,
        } => run_train_baseline(&kind, &data, &out, config.as_deref(), &set, seed),
        Cmd::Evaluate {
            model,
            verifier,
            data,
            out,
            seed,
            passwords,
        } => run_evaluate(&model, &verifier, &data, &out, seed, passwords),
        Cmd::Sweep {
            model,
            image,
            out,
            verifier,
            calibrate_data,
            second_image,
            seed,
        } => run_sweep(
            &model,
            &image,
            &out,
            &verifier,
            calibrate_data.as_deref(),
            second_image.as_deref(),
            seed,
        ),
    }
}

// ---------------------------------------------------------------------------
// pretrain-classifier
// ---------------------------------------------------------------------------

/// Settings for the classifier pretraining run: recognizer dimensions plus
/// the optimization schedule.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PretrainRunConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub embed_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub accuracy_floor: f64,
}

impl Default for PretrainRunConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            base_channels: 16,
            embed_dim: 64,
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 0,
            accuracy_floor: 0.9,
        }
    }
}

#[derive(Serialize)]
struct PretrainReport {
    classifier_accuracy: f64,
    verifier_accuracy: f64,
    num_identities: usize,
    num_images: usize,
}

pub fn run_pretrain(
    data: &Path,
    out: &Path,
    config_path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg: PretrainRunConfig = config::load_with_overrides(config_path, overrides)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let train = dataset::load_split(data, "train", cfg.image_size)?;
    std::fs::create_dir_all(out)?;

    let rec_cfg = RecognizerConfig {
        image_size: cfg.image_size,
        base_channels: cfg.base_channels,
        embed_dim: cfg.embed_dim,
        num_classes: train.num_identities(),
    };
    let make_pre = |seed: u64| PretrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        seed,
        accuracy_floor: cfg.accuracy_floor,
    };
    let (classifier, acc_f) =
        recognizer_pretrain(&train.images, &train.labels, rec_cfg.clone(), &make_pre(cfg.seed))?;
    // The verifier is an independently seeded copy that adversarial training
    // never touches; it stands in for an external recognition model.
    let (verifier, acc_v) = recognizer_pretrain(
        &train.images,
        &train.labels,
        rec_cfg,
        &make_pre(cfg.seed.wrapping_add(0x7ea)),
    )?;
    checkpoint::save_recognizer(&out.join("recognizer.ckpt"), &classifier, 0)?;
    checkpoint::save_recognizer(&out.join("verifier.ckpt"), &verifier, 0)?;
    config::write_effective(&out.join("pretrain_config.toml"), &cfg)?;
    let report = PretrainReport {
        classifier_accuracy: acc_f,
        verifier_accuracy: acc_v,
        num_identities: train.num_identities(),
        num_images: train.len(),
    };
    std::fs::write(
        out.join("pretrain_report.json"),
        serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    println!(
        "pretrained classifier acc {:.3}, verifier acc {:.3} on {} identities",
        acc_f,
        acc_v,
        train.num_identities()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn run_train(
    data: &Path,
    out: &Path,
    recognizer: Option<&Path>,
    resume: Option<&Path>,
    config_path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg: TrainConfig = config::load_with_overrides(config_path, overrides)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let train_split = dataset::load_split(data, "train", cfg.image_size)?;
    let rec = match (resume, recognizer) {
        (Some(_), _) => None,
        (None, Some(path)) => Some(checkpoint::load_recognizer(path)?),
        (None, None) => {
            return Err(Error::Config(
                "train needs --recognizer <ckpt> (from pretrain-classifier) or --resume".into(),
            ))
        }
    };
    let outcome = trainer::train(&cfg, &train_split, rec, resume, out)?;
    println!(
        "trained {} steps; checkpoint {}",
        outcome.steps,
        outcome.checkpoint.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// anonymize / deanonymize
// ---------------------------------------------------------------------------

fn parse_password(spec: &str, n_bits: usize, seed: Option<u64>) -> Result<Password> {
    if spec == "random" {
        let s = seed.ok_or_else(|| {
            Error::Config("--password random requires --seed <u64> for reproducibility".into())
        })?;
        return Password::sample(&mut ChaCha12Rng::seed_from_u64(s), n_bits);
    }
    Password::from_hex(n_bits, spec).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("--password: {msg}")),
        other => other,
    })
}

fn input_pngs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| Error::Data(format!("input {}: {e}", input.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no .png inputs under {}", input.display())));
    }
    Ok(files)
}

/// Run summary written next to transform outputs. Passwords (and their
/// seeds) are deliberately absent: the tool never persists them.
#[derive(Serialize)]
struct TransformRunInfo {
    command: String,
    model: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    whole_image: bool,
}

fn run_transform(
    mode: &str,
    model: &Path,
    input: &Path,
    out: &Path,
    password: &str,
    seed: Option<u64>,
) -> Result<()> {
    let (mut bundle, _) = checkpoint::load_bundle(model)?;
    let n_bits = bundle.generator.cfg.password_bits;
    let pw = parse_password(password, n_bits, seed)?;
    let files = input_pngs(input)?;
    std::fs::create_dir_all(out)?;
    let model_size = bundle.generator.cfg.image_size;
    let suffix = if mode == "anonymize" { "anon" } else { "deanon" };

    let mut outputs = Vec::new();
    let mut whole_image = false;
    for f in &files {
        let img = imageio::load_png(f)?;
        let transformed = if img.shape() == [3, model_size, model_size] {
            pipeline::anonymize(&mut bundle, &img, &pw)?
        } else {
            whole_image = true;
            let outcome =
                pipeline::process_whole_image(&mut bundle, &img, &pw, &PassthroughDetector, 0.08)?;
            if outcome.faces == 0 {
                eprintln!("warning: no faces detected in {}; copied unchanged", f.display());
            }
            outcome.image
        };
        let stem = f.file_stem().unwrap_or_default().to_string_lossy();
        let out_path = out.join(format!("{stem}_{suffix}.png"));
        imageio::save_png(&out_path, &transformed)?;
        outputs.push(out_path.display().to_string());
    }
    let info = TransformRunInfo {
        command: mode.to_string(),
        model: model.display().to_string(),
        inputs: files.iter().map(|f| f.display().to_string()).collect(),
        outputs,
        whole_image,
    };
    std::fs::write(
        out.join(format!("{suffix}_run.json")),
        serde_json::to_string_pretty(&info).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    if password == "random" {
        println!("password: {}", pw.to_hex());
        println!("recovery password: {}", pw.inverse().to_hex());
    }
    println!("{mode}d {} image(s) into {}", files.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// baselines
// ---------------------------------------------------------------------------

pub fn run_baseline(kind: &str, input: &Path, out: &Path, seed: u64) -> Result<()> {
    let kind: BaselineKind = kind.parse()?;
    let files = input_pngs(input)?;
    std::fs::create_dir_all(out)?;
    for (i, f) in files.iter().enumerate() {
        let img = imageio::load_png(f)?;
        let anon = baselines::apply_baseline(kind, &img, seed ^ (i as u64).wrapping_mul(0x9e37));
        let stem = f.file_stem().unwrap_or_default().to_string_lossy();
        imageio::save_png(&out.join(format!("{stem}_{}.png", kind.name())), &anon)?;
    }
    println!("applied {} to {} image(s)", kind.name(), files.len());
    Ok(())
}

pub fn run_train_baseline(
    kind: &str,
    data: &Path,
    out: &Path,
    config_path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<()> {
    let kind: BaselineKind = kind.parse()?;
    let mut cfg: BaselineTrainConfig = config::load_with_overrides(config_path, overrides)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let train_split = dataset::load_split(data, "train", cfg.image_size)?;
    std::fs::create_dir_all(out)?;
    config::write_effective(&out.join(format!("{}_deanon_config.toml", kind.name())), &cfg)?;
    let outcome = baselines::train_baseline_deanonymizer(kind, &cfg, &train_split, out)?;
    println!(
        "trained {} deanonymizer for {} steps; checkpoint {}",
        kind.name(),
        outcome.steps,
        outcome.checkpoint.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

pub fn run_evaluate(
    model: &Path,
    verifier: &Path,
    data: &Path,
    out: &Path,
    seed: u64,
    passwords_k: usize,
) -> Result<()> {
    let (mut bundle, _) = checkpoint::load_bundle(model)?;
    let mut verifier = checkpoint::load_recognizer(verifier)?;
    let size = bundle.generator.cfg.image_size;
    let test = dataset::load_split(data, "test", size)?;
    std::fs::create_dir_all(out)?;

    let (genuine, impostor) = metrics::pair_cosines(&mut verifier, &test, seed ^ 0xca11)?;
    let protocol = metrics::calibrate_threshold(&genuine, &impostor)?;
    let rates = metrics::verification_rates(&mut verifier, &protocol, &mut bundle, &test, seed)?;

    // reconstruction quality of correct-password recovery on the test split
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x4ec);
    let n_bits = bundle.generator.cfg.password_bits;
    let mut recovered = Vec::new();
    let mut originals = Vec::new();
    for i in 0..test.len() {
        let img = test.image(i);
        let p = Password::sample(&mut rng, n_bits)?;
        let a = bundle.generator.infer_one(&img, &p)?;
        let r = bundle.generator.infer_one(&a, &p.inverse())?;
        recovered.push(r);
        originals.push(img);
    }
    let reconstruction = metrics::reconstruction_distances(&mut verifier, &recovered, &originals)?;
    let multimodality =
        metrics::multimodality_score(&mut verifier, &mut bundle, &test, passwords_k, seed ^ 0x3u64)?;

    let report = metrics::EvalReport {
        protocol,
        rates,
        reconstruction,
        multimodality,
        genuine_pair_mean_cosine: protocol.genuine_mean_cosine,
    };
    report.validate()?;
    std::fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    std::fs::write(out.join("report.csv"), report.to_csv())?;
    println!(
        "rates I-A {:.3} | I-R {:.3} | I-WR {:.3} | A-WR {:.3}; recon L1 {:.4}",
        rates.i_vs_a, rates.i_vs_r, rates.i_vs_wr, rates.a_vs_wr, reconstruction.l1
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

pub fn run_sweep(
    model: &Path,
    image: &Path,
    out: &Path,
    verifier: &Path,
    calibrate_data: Option<&Path>,
    second_image: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let (mut bundle, _) = checkpoint::load_bundle(model)?;
    let mut verifier = checkpoint::load_recognizer(verifier)?;
    let size = bundle.generator.cfg.image_size;
    let load_sized = |p: &Path| -> Result<ndarray::Array3<f32>> {
        let img = imageio::load_png(p)?;
        Ok(if img.shape() == [3, size, size] {
            img
        } else {
            imageio::resize_bilinear(&img, size, size)
        })
    };
    let img = load_sized(image)?;
    let second = second_image.map(load_sized).transpose()?;

    let protocol = match calibrate_data {
        Some(root) => {
            let test = dataset::load_split(root, "test", size)?;
            let (genuine, impostor) = metrics::pair_cosines(&mut verifier, &test, seed ^ 0xca11)?;
            Some(metrics::calibrate_threshold(&genuine, &impostor)?)
        }
        None => None,
    };
    let report = metrics::password_sweep(
        &mut bundle,
        &mut verifier,
        &img,
        protocol.as_ref(),
        second.as_ref(),
    )?;
    std::fs::create_dir_all(out)?;
    imageio::save_png(&out.join("sweep_mosaic.png"), &report.mosaic)?;
    std::fs::write(
        out.join("sweep.json"),
        serde_json::to_string_pretty(&report.summary()).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    println!(
        "swept {} passwords; mean pairwise cosine {:.3}",
        report.n_passwords, report.pairwise_mean_cosine
    );
    Ok(())
}
