use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use replaykd::checkpoint::{self, CheckpointMeta};
use replaykd::config::{fnv1a, RunConfigFile};
use replaykd::data::{load_csv, load_idx, Dataset, Split};
use replaykd::distill::{run_distillation, train_teacher, ReplayMode};
use replaykd::metrics::{evaluate, export_curves, noise_sensitivity, summarize_runs};
use replaykd::models::{MlpModel, Role};
use replaykd::rng::{gaussian_sample, Rng};
use replaykd::{Error, Result, Tensor};

/// Data-free knowledge distillation with generative pseudo replay.
///
/// Data arguments accept a CSV file with a header (label column `label`
/// unless the config sets `csv_label_column`), an IDX pair written as
/// `images,labels`, or `blobs:train` / `blobs:eval` for the synthetic blob
/// benchmark described by the config's `blob_*` keys.
#[derive(Parser, Debug)]
#[command(name = "replaykd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a teacher classifier and write its checkpoint.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill a teacher into a student without touching real training data.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// pre-dfkd, no-replay or buffer-replay.
        #[arg(long)]
        mode: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Accuracy of a checkpointed classifier.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: String,
        /// Needed only for `blobs:*` data and custom CSV label columns.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Fraction of Gaussian perturbations that keep the teacher's label.
    NoiseSensitivity {
        #[arg(long)]
        teacher: PathBuf,
        /// A data argument (row `--index` is used) or a generator checkpoint
        /// (one sample drawn with `--seed`).
        #[arg(long)]
        source: String,
        /// Noise variance.
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<Option<RunConfigFile>> {
    path.map(RunConfigFile::load).transpose()
}

fn resolve_data(spec: &str, config: Option<&RunConfigFile>, split: Split) -> Result<Dataset> {
    if let Some(which) = spec.strip_prefix("blobs:") {
        let split = match which {
            "train" => Split::Train,
            "eval" => Split::Eval,
            other => return Err(Error::Config(format!("unknown blob split `{other}` (expected train or eval)"))),
        };
        let cfg = config.ok_or_else(|| Error::Config(format!("`{spec}` needs a config with blob_* keys")))?;
        return cfg.blob_settings()?.generate(split);
    }
    let data = match spec.split_once(',') {
        Some((images, labels)) => load_idx(images, labels)?,
        None => {
            let column = config.and_then(|c| c.get("csv_label_column")).unwrap_or("label");
            load_csv(spec, column)?
        }
    };
    Ok(data.with_split(split))
}

fn check_dims(model: &MlpModel, data: &Dataset) -> Result<()> {
    if model.input_dim() != data.dim() {
        return Err(Error::Invalid(format!(
            "model expects input dimension {} but data has dimension {}",
            model.input_dim(),
            data.dim()
        )));
    }
    if model.output_dim() < data.classes {
        return Err(Error::Invalid(format!(
            "model has {} outputs but data has {} classes",
            model.output_dim(),
            data.classes
        )));
    }
    Ok(())
}

fn load_classifier(path: &Path) -> Result<MlpModel> {
    let ckpt = checkpoint::load(path)?;
    match ckpt.model.role {
        Role::Teacher | Role::Student => Ok(ckpt.model),
        other => Err(Error::Invalid(format!("{} holds a {other} model, not a classifier", path.display()))),
    }
}

fn cmd_train_teacher(config: &Path, data: &str, out: &Path) -> Result<()> {
    let cfg = RunConfigFile::load(config)?;
    let tcfg = cfg.teacher_config()?;
    let train = resolve_data(data, Some(&cfg), Split::Train)?;
    let eval = if data.starts_with("blobs:") {
        Some(resolve_data("blobs:eval", Some(&cfg), Split::Eval)?)
    } else {
        None
    };
    let report = train_teacher(&train, eval.as_ref(), &tcfg)?;
    let hash = fnv1a(RunConfigFile::from_settings(None, Some(&tcfg), None).to_text().as_bytes());
    let meta = CheckpointMeta {
        seed: tcfg.seed,
        epoch: tcfg.epochs as u64,
        config_hash: hash,
    };
    checkpoint::save(out, &report.model, &meta)?;
    info!("teacher written to {}", out.display());
    println!("train_accuracy={:?}", report.train_accuracy);
    if let Some(acc) = report.eval_accuracy {
        println!("eval_accuracy={acc:?}");
    }
    Ok(())
}

fn cmd_distill(config: &Path, teacher: &Path, mode: &str, out_dir: &Path) -> Result<()> {
    let mode: ReplayMode = mode.parse()?;
    let cfg = RunConfigFile::load(config)?;
    let dcfg = cfg.distill_config(Some(mode))?;
    let eval_spec = cfg.get("eval_data").unwrap_or_default();
    let eval = resolve_data(eval_spec, Some(&cfg), Split::Eval)?;
    let teacher = checkpoint::load(teacher)?.model;
    if teacher.role != Role::Teacher {
        return Err(Error::Invalid(format!("teacher checkpoint holds a {} model", teacher.role)));
    }
    check_dims(&teacher, &eval)?;
    fs::create_dir_all(out_dir)?;

    let outcome = run_distillation(&dcfg, teacher, &eval)?;
    let meta = CheckpointMeta {
        seed: dcfg.seed,
        epoch: dcfg.epochs as u64,
        config_hash: dcfg.config_hash(),
    };
    checkpoint::save(out_dir.join("student.ckpt"), &outcome.state.student, &meta)?;
    checkpoint::save(out_dir.join("generator.ckpt"), &outcome.state.generator, &meta)?;
    export_curves(std::slice::from_ref(&outcome.record), out_dir.join("curves.csv"))?;

    let summary = summarize_runs(std::slice::from_ref(&outcome.record))?;
    let mut text = format!(
        "mode={mode}\nseed={}\nconfig_hash={:016x}\nepochs={}\n",
        dcfg.seed, meta.config_hash, dcfg.epochs
    );
    text.push_str(&summary.to_text());
    text.push_str(&format!("final_accuracy={}\n", outcome.record.final_accuracy()));
    fs::write(out_dir.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_eval(model: &Path, data: &str, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let model = load_classifier(model)?;
    let data = resolve_data(data, cfg.as_ref(), Split::Eval)?;
    check_dims(&model, &data)?;
    println!("accuracy={:?}", evaluate(&model, &data)?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_noise(
    teacher: &Path,
    source: &str,
    sigma: f64,
    trials: usize,
    seed: u64,
    index: usize,
    config: Option<&Path>,
) -> Result<()> {
    if trials == 0 {
        return Err(Error::Invalid("trials must be positive".into()));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Invalid(format!("sigma must be positive, got {sigma}")));
    }
    let cfg = load_config(config)?;
    let teacher = load_classifier(teacher)?;
    let mut rng = Rng::new(seed);
    let generator = match checkpoint::load(source) {
        Ok(c) if c.model.role == Role::Generator => Some(c.model),
        _ => None,
    };
    let sample: Tensor = match generator {
        Some(g) => {
            let z = gaussian_sample(&mut rng, &[1, g.input_dim()])?;
            g.predict(&z)?
        }
        None => {
            let data = resolve_data(source, cfg.as_ref(), Split::Eval)?;
            if index >= data.len() {
                return Err(Error::Invalid(format!("index {index} out of range for {} rows", data.len())));
            }
            data.x.select_rows(&[index])?
        }
    };
    if sample.numel() != teacher.input_dim() {
        return Err(Error::Invalid(format!(
            "model expects input dimension {} but the sample has dimension {}",
            teacher.input_dim(),
            sample.numel()
        )));
    }
    let rate = noise_sensitivity(&sample, &teacher, sigma, trials, &mut rng)?;
    println!("rate={rate:?}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTeacher { config, data, out } => cmd_train_teacher(&config, &data, &out),
        Command::Distill {
            config,
            teacher,
            mode,
            out_dir,
        } => cmd_distill(&config, &teacher, &mode, &out_dir),
        Command::Eval { model, data, config } => cmd_eval(&model, &data, config.as_deref()),
        Command::NoiseSensitivity {
            teacher,
            source,
            sigma,
            trials,
            seed,
            index,
            config,
        } => cmd_noise(&teacher, &source, sigma, trials, seed, index, config.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
