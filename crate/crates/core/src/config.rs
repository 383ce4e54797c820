//! Flat `key=value` run configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every other line is
//! `key = value`. Keys are grouped by what reads them (`blob_*`, `teacher_*`,
//! distillation); a group is only required when a command needs it. Unknown
//! and duplicate keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::{generate_blobs, BlobSpec, Dataset, Split};
use crate::distill::{DistillConfig, ReplayMode, TeacherConfig};
use crate::error::{Error, Result};
use crate::losses::{LossCoefficients, Reconstruction};

pub const BLOB_KEYS: &[&str] = &[
    "blob_classes",
    "blob_dim",
    "blob_spread",
    "blob_std",
    "blob_per_class",
    "blob_eval_per_class",
    "blob_means_seed",
    "blob_seed",
    "blob_eval_seed",
];

pub const TEACHER_KEYS: &[&str] = &[
    "teacher_hidden",
    "teacher_epochs",
    "teacher_lr",
    "teacher_batch",
    "teacher_seed",
];

/// `mode` is optional here because the distill command also takes it as a
/// flag.
pub const DISTILL_KEYS: &[&str] = &[
    "epochs",
    "batches_per_epoch",
    "batch_novel",
    "batch_memory",
    "latent_dim",
    "lambda1",
    "lambda2",
    "lambda3",
    "alpha",
    "gamma",
    "lr_student",
    "lr_generator",
    "lr_memory",
    "lr_latent",
    "student_optimizer",
    "student_cosine",
    "generator_optimizer",
    "tuning_steps",
    "latent_tuning",
    "reconstruction",
    "buffer_capacity",
    "seed",
    "eval_every",
    "generator_steps",
    "student_steps",
    "resample_student_batch",
    "student_hidden",
    "generator_hidden",
    "vae_hidden",
    "teacher_floor",
    "eval_data",
];

const OPTIONAL_KEYS: &[&str] = &["mode", "csv_label_column"];

fn is_known(key: &str) -> bool {
    [BLOB_KEYS, TEACHER_KEYS, DISTILL_KEYS, OPTIONAL_KEYS]
        .iter()
        .any(|group| group.contains(&key))
}

/// Parsed but not yet typed configuration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfigFile {
    entries: BTreeMap<String, String>,
}

/// Settings for a generated blob benchmark with separate train and eval
/// draws around the same class means.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobSettings {
    pub classes: usize,
    pub dim: usize,
    /// Class means are uniform in `[−spread, spread]^dim`.
    pub spread: f64,
    pub std: f64,
    pub per_class: usize,
    pub eval_per_class: usize,
    pub means_seed: u64,
    pub seed: u64,
    pub eval_seed: u64,
}

impl BlobSettings {
    pub fn spec(&self, split: Split) -> BlobSpec {
        let (per_class, seed) = match split {
            Split::Train => (self.per_class, self.seed),
            Split::Eval => (self.eval_per_class, self.eval_seed),
        };
        BlobSpec::random_means(self.classes, self.dim, self.spread, self.std, per_class, self.means_seed, seed)
    }

    pub fn generate(&self, split: Split) -> Result<Dataset> {
        Ok(generate_blobs(&self.spec(split))?.with_split(split))
    }
}

impl FromStr for RunConfigFile {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !is_known(k) {
                return Err(Error::Config(format!("line {}: unknown key `{k}`", n + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        Ok(Self { entries })
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse()
        .map_err(|e| Error::Config(format!("key `{key}`: cannot parse `{raw}`: {e}")))
}

fn parse_list(key: &str, raw: &str) -> Result<Vec<usize>> {
    if raw == "auto" || raw.is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|p| parse_value(key, p.trim())).collect()
}

fn format_list(v: &[usize]) -> String {
    if v.is_empty() {
        "auto".into()
    } else {
        v.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
    }
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("key `{key}`: expected true or false, got `{raw}`"))),
    }
}

fn reconstruction_name(r: Reconstruction) -> &'static str {
    match r {
        Reconstruction::SyntheticAware => "synthetic-aware",
        Reconstruction::PixelOnly => "pixel-only",
    }
}

fn parse_reconstruction(raw: &str) -> Result<Reconstruction> {
    match raw {
        "synthetic-aware" => Ok(Reconstruction::SyntheticAware),
        "pixel-only" => Ok(Reconstruction::PixelOnly),
        _ => Err(Error::Config(format!(
            "key `reconstruction`: expected synthetic-aware or pixel-only, got `{raw}`"
        ))),
    }
}

impl RunConfigFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        text.parse()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !is_known(key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        self.entries.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn has_group(&self, keys: &[&str]) -> bool {
        keys.iter().any(|k| self.entries.contains_key(*k))
    }

    fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    fn typed<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        parse_value(key, self.require(key)?)
    }

    pub fn blob_settings(&self) -> Result<BlobSettings> {
        let s = BlobSettings {
            classes: self.typed("blob_classes")?,
            dim: self.typed("blob_dim")?,
            spread: self.typed("blob_spread")?,
            std: self.typed("blob_std")?,
            per_class: self.typed("blob_per_class")?,
            eval_per_class: self.typed("blob_eval_per_class")?,
            means_seed: self.typed("blob_means_seed")?,
            seed: self.typed("blob_seed")?,
            eval_seed: self.typed("blob_eval_seed")?,
        };
        s.spec(Split::Train).validate().map_err(|e| Error::Config(e.to_string()))?;
        if s.eval_per_class == 0 {
            return Err(Error::Config("blob_eval_per_class must be positive".into()));
        }
        Ok(s)
    }

    pub fn teacher_config(&self) -> Result<TeacherConfig> {
        let cfg = TeacherConfig {
            hidden: parse_list("teacher_hidden", self.require("teacher_hidden")?)?,
            epochs: self.typed("teacher_epochs")?,
            lr: self.typed("teacher_lr")?,
            batch: self.typed("teacher_batch")?,
            seed: self.typed("teacher_seed")?,
        };
        if cfg.hidden.is_empty() {
            return Err(Error::Config("teacher_hidden needs at least one width".into()));
        }
        if !(cfg.lr > 0.0) || cfg.batch == 0 {
            return Err(Error::Config("teacher_lr and teacher_batch must be positive".into()));
        }
        Ok(cfg)
    }

    /// Typed and validated distillation settings. `mode` overrides the file's
    /// `mode` key; one of the two must be present.
    pub fn distill_config(&self, mode: Option<ReplayMode>) -> Result<DistillConfig> {
        let mode = match (mode, self.get("mode")) {
            (Some(m), _) => m,
            (None, Some(raw)) => raw.parse()?,
            (None, None) => return Err(Error::Config("missing required key `mode`".into())),
        };
        let cfg = DistillConfig {
            mode,
            epochs: self.typed("epochs")?,
            batches_per_epoch: self.typed("batches_per_epoch")?,
            batch_novel: self.typed("batch_novel")?,
            batch_memory: self.typed("batch_memory")?,
            latent_dim: self.typed("latent_dim")?,
            coeffs: LossCoefficients {
                lambda1: self.typed("lambda1")?,
                lambda2: self.typed("lambda2")?,
                lambda3: self.typed("lambda3")?,
                alpha: self.typed("alpha")?,
                gamma: self.typed("gamma")?,
            },
            lr_student: self.typed("lr_student")?,
            lr_generator: self.typed("lr_generator")?,
            lr_memory: self.typed("lr_memory")?,
            lr_latent: self.typed("lr_latent")?,
            student_optimizer: self.typed("student_optimizer")?,
            student_cosine: parse_bool("student_cosine", self.require("student_cosine")?)?,
            generator_optimizer: self.typed("generator_optimizer")?,
            tuning_steps: self.typed("tuning_steps")?,
            latent_tuning: parse_bool("latent_tuning", self.require("latent_tuning")?)?,
            reconstruction: parse_reconstruction(self.require("reconstruction")?)?,
            buffer_capacity: self.typed("buffer_capacity")?,
            seed: self.typed("seed")?,
            eval_every: self.typed("eval_every")?,
            generator_steps: self.typed("generator_steps")?,
            student_steps: self.typed("student_steps")?,
            resample_student_batch: parse_bool("resample_student_batch", self.require("resample_student_batch")?)?,
            student_hidden: parse_list("student_hidden", self.require("student_hidden")?)?,
            generator_hidden: parse_list("generator_hidden", self.require("generator_hidden")?)?,
            vae_hidden: parse_list("vae_hidden", self.require("vae_hidden")?)?,
            teacher_floor: self.typed("teacher_floor")?,
        };
        self.require("eval_data")?;
        cfg.validated()
    }

    /// Builds a file from typed settings; `None` groups are left out.
    pub fn from_settings(
        blobs: Option<&BlobSettings>,
        teacher: Option<&TeacherConfig>,
        distill: Option<(&DistillConfig, &str)>,
    ) -> Self {
        let mut entries = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            entries.insert(k.to_string(), v);
        };
        if let Some(b) = blobs {
            put("blob_classes", b.classes.to_string());
            put("blob_dim", b.dim.to_string());
            put("blob_spread", b.spread.to_string());
            put("blob_std", b.std.to_string());
            put("blob_per_class", b.per_class.to_string());
            put("blob_eval_per_class", b.eval_per_class.to_string());
            put("blob_means_seed", b.means_seed.to_string());
            put("blob_seed", b.seed.to_string());
            put("blob_eval_seed", b.eval_seed.to_string());
        }
        if let Some(t) = teacher {
            put("teacher_hidden", format_list(&t.hidden));
            put("teacher_epochs", t.epochs.to_string());
            put("teacher_lr", t.lr.to_string());
            put("teacher_batch", t.batch.to_string());
            put("teacher_seed", t.seed.to_string());
        }
        if let Some((d, eval_data)) = distill {
            for (k, v) in distill_pairs(d) {
                put(k, v);
            }
            put("eval_data", eval_data.to_string());
        }
        Self { entries }
    }

    /// Sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

fn distill_pairs(d: &DistillConfig) -> Vec<(&'static str, String)> {
    vec![
        ("mode", d.mode.to_string()),
        ("epochs", d.epochs.to_string()),
        ("batches_per_epoch", d.batches_per_epoch.to_string()),
        ("batch_novel", d.batch_novel.to_string()),
        ("batch_memory", d.batch_memory.to_string()),
        ("latent_dim", d.latent_dim.to_string()),
        ("lambda1", d.coeffs.lambda1.to_string()),
        ("lambda2", d.coeffs.lambda2.to_string()),
        ("lambda3", d.coeffs.lambda3.to_string()),
        ("alpha", d.coeffs.alpha.to_string()),
        ("gamma", d.coeffs.gamma.to_string()),
        ("lr_student", d.lr_student.to_string()),
        ("lr_generator", d.lr_generator.to_string()),
        ("lr_memory", d.lr_memory.to_string()),
        ("lr_latent", d.lr_latent.to_string()),
        ("student_optimizer", d.student_optimizer.to_string()),
        ("student_cosine", d.student_cosine.to_string()),
        ("generator_optimizer", d.generator_optimizer.to_string()),
        ("tuning_steps", d.tuning_steps.to_string()),
        ("latent_tuning", d.latent_tuning.to_string()),
        ("reconstruction", reconstruction_name(d.reconstruction).to_string()),
        ("buffer_capacity", d.buffer_capacity.to_string()),
        ("seed", d.seed.to_string()),
        ("eval_every", d.eval_every.to_string()),
        ("generator_steps", d.generator_steps.to_string()),
        ("student_steps", d.student_steps.to_string()),
        ("resample_student_batch", d.resample_student_batch.to_string()),
        ("student_hidden", format_list(&d.student_hidden)),
        ("generator_hidden", format_list(&d.generator_hidden)),
        ("vae_hidden", format_list(&d.vae_hidden)),
        ("teacher_floor", d.teacher_floor.to_string()),
    ]
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl BlobSettings {
    /// The four-class, sixteen-dimensional benchmark used by the shipped
    /// `configs/blobs.cfg` and the acceptance suite.
    pub fn benchmark() -> Self {
        Self {
            classes: 4,
            dim: 16,
            spread: 0.6,
            std: 0.2,
            per_class: 250,
            eval_per_class: 100,
            means_seed: 11,
            seed: 12,
            eval_seed: 13,
        }
    }
}

impl TeacherConfig {
    pub fn benchmark() -> Self {
        Self {
            hidden: vec![32, 16],
            epochs: 5,
            lr: 0.01,
            batch: 32,
            seed: 0,
        }
    }
}

impl DistillConfig {
    /// Distillation settings tuned for [`BlobSettings::benchmark`]. The
    /// activation term is off: on a 16-dimensional input it pulls every
    /// sample toward one class.
    pub fn benchmark(mode: ReplayMode, seed: u64) -> Self {
        let mut cfg = Self {
            mode,
            seed,
            epochs: 100,
            batches_per_epoch: 40,
            batch_novel: 64,
            batch_memory: 64,
            latent_dim: 8,
            lr_student: 0.05,
            lr_generator: 0.03,
            lr_memory: 0.003,
            lr_latent: 1.0,
            tuning_steps: 10,
            student_hidden: vec![4],
            generator_hidden: vec![32, 32],
            vae_hidden: vec![32, 32],
            ..Self::default()
        };
        cfg.coeffs.lambda1 = 0.5;
        cfg.coeffs.lambda2 = 0.0;
        cfg.coeffs.lambda3 = 5.0;
        cfg.coeffs.alpha = 10.0;
        cfg.coeffs.gamma = 0.01;
        if mode == ReplayMode::NoReplay {
            cfg.batch_memory = 0;
        }
        cfg
    }
}

impl DistillConfig {
    /// Canonical `key = value` rendering, one line per field.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in distill_pairs(self) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// FNV-1a of [`DistillConfig::canonical_text`].
    pub fn config_hash(&self) -> u64 {
        fnv1a(self.canonical_text().as_bytes())
    }
}
