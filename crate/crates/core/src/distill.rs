//! The distillation loop: alternating generator and student phases over
//! epochs, with one of three replay strategies feeding the student.

use std::fmt;
use std::str::FromStr;

use log::{debug, info};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{kd_loss, novel_generator_loss, LossCoefficients, Reconstruction};
use crate::metrics::{evaluate, MetricsRecord};
use crate::models::{Architecture, MlpModel, Role};
use crate::optim::{Optimizer, OptimizerKind};
use crate::replay::{
    infer_memory_batch, train_memory_generator_step, ReplayState, SampleBuffer, VaeStepOptions,
};
use crate::rng::{gaussian_sample, Rng};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReplayMode {
    /// Generative pseudo replay through the memory VAE.
    PreDfkd,
    /// Student sees only fresh novel samples.
    NoReplay,
    /// Student rehearses rows held in a fixed-size reservoir buffer.
    BufferReplay,
}

impl ReplayMode {
    pub const NAMES: [&'static str; 3] = ["pre-dfkd", "no-replay", "buffer-replay"];
}

impl fmt::Display for ReplayMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReplayMode::PreDfkd => "pre-dfkd",
            ReplayMode::NoReplay => "no-replay",
            ReplayMode::BufferReplay => "buffer-replay",
        })
    }
}

impl FromStr for ReplayMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre-dfkd" => Ok(ReplayMode::PreDfkd),
            "no-replay" => Ok(ReplayMode::NoReplay),
            "buffer-replay" => Ok(ReplayMode::BufferReplay),
            other => Err(Error::Config(format!(
                "unknown mode `{other}`; valid modes: {}",
                ReplayMode::NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub mode: ReplayMode,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_novel: usize,
    pub batch_memory: usize,
    pub latent_dim: usize,
    pub coeffs: LossCoefficients,
    pub lr_student: f64,
    pub lr_generator: f64,
    pub lr_memory: f64,
    /// Step size for latent tuning.
    pub lr_latent: f64,
    pub student_optimizer: OptimizerKind,
    /// Cosine-anneal the student learning rate over `epochs`.
    pub student_cosine: bool,
    pub generator_optimizer: OptimizerKind,
    pub tuning_steps: usize,
    /// Ablation switch for latent tuning of memory batches.
    pub latent_tuning: bool,
    pub reconstruction: Reconstruction,
    pub buffer_capacity: usize,
    pub seed: u64,
    /// Evaluate the student every this many epochs.
    pub eval_every: usize,
    pub generator_steps: usize,
    pub student_steps: usize,
    /// Draw a fresh novel batch for the student phase instead of reusing the
    /// one from the generator phase.
    pub resample_student_batch: bool,
    /// Student hidden widths; empty means half of each teacher width.
    pub student_hidden: Vec<usize>,
    pub generator_hidden: Vec<usize>,
    /// Decoder hidden widths; the encoder mirrors them.
    pub vae_hidden: Vec<usize>,
    /// Minimum teacher accuracy on the evaluation data.
    pub teacher_floor: f64,
}

impl Default for DistillConfig {
    /// Hyperparameters of the MNIST-scale setting: Adam everywhere, student
    /// lr 0.004, generator lr 0.2, memory lr 1/40 of that, batches 512/256,
    /// 100-d latents.
    fn default() -> Self {
        Self {
            mode: ReplayMode::PreDfkd,
            epochs: 200,
            batches_per_epoch: 50,
            batch_novel: 512,
            batch_memory: 256,
            latent_dim: 100,
            coeffs: LossCoefficients::default(),
            lr_student: 0.004,
            lr_generator: 0.2,
            lr_memory: 0.2 / 40.0,
            lr_latent: 0.2,
            student_optimizer: OptimizerKind::adam(),
            student_cosine: false,
            generator_optimizer: OptimizerKind::adam(),
            tuning_steps: 2,
            latent_tuning: true,
            reconstruction: Reconstruction::SyntheticAware,
            buffer_capacity: 4096,
            seed: 0,
            eval_every: 1,
            generator_steps: 1,
            student_steps: 1,
            resample_student_batch: true,
            student_hidden: Vec::new(),
            generator_hidden: vec![128, 256],
            vae_hidden: vec![128, 256],
            teacher_floor: 0.9,
        }
    }
}

impl DistillConfig {
    /// Checks ranges and applies mode-implied settings (`no-replay` forces an
    /// empty memory batch).
    pub fn validated(mut self) -> Result<Self> {
        let positive = [
            ("epochs", self.epochs),
            ("batches_per_epoch", self.batches_per_epoch),
            ("batch_novel", self.batch_novel),
            ("latent_dim", self.latent_dim),
            ("eval_every", self.eval_every),
            ("generator_steps", self.generator_steps),
            ("student_steps", self.student_steps),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        for (k, v) in [
            ("lr_student", self.lr_student),
            ("lr_generator", self.lr_generator),
            ("lr_memory", self.lr_memory),
            ("lr_latent", self.lr_latent),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.teacher_floor) {
            return Err(Error::Config("teacher_floor must lie in [0, 1]".into()));
        }
        self.coeffs.validate()?;
        match self.mode {
            ReplayMode::NoReplay => self.batch_memory = 0,
            ReplayMode::PreDfkd | ReplayMode::BufferReplay if self.batch_memory == 0 => {
                return Err(Error::Config(format!("batch_memory must be positive in {} mode", self.mode)));
            }
            ReplayMode::BufferReplay if self.buffer_capacity == 0 => {
                return Err(Error::Config("buffer_capacity must be positive in buffer-replay mode".into()));
            }
            _ => {}
        }
        Ok(self)
    }
}

/// What the student rehearses from.
#[derive(Clone, Debug)]
pub enum Memory {
    None,
    Vae(ReplayState),
    Buffer(SampleBuffer),
}

/// Bytes owned by a training state, split by what they hold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Footprint {
    /// Raw samples kept across minibatches (buffer mode only).
    pub stored_sample_bytes: usize,
    /// Encoder + decoder parameters.
    pub replay_param_bytes: usize,
    /// Every tensor the state owns: parameters of all models plus optimizer
    /// moment buffers.
    pub tensor_bytes: usize,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub teacher: MlpModel,
    pub student: MlpModel,
    pub generator: MlpModel,
    pub memory: Memory,
    pub student_opt: Optimizer,
    pub generator_opt: Optimizer,
    pub epoch: usize,
    pub rng: Rng,
}

fn teacher_hidden(teacher: &MlpModel) -> Vec<usize> {
    teacher.layers[..teacher.layers.len() - 1]
        .iter()
        .map(|l| l.outputs())
        .collect()
}

impl TrainState {
    /// Initializes student, generator and memory for `cfg`; the teacher is
    /// frozen on entry.
    pub fn new(cfg: &DistillConfig, mut teacher: MlpModel) -> Result<Self> {
        if teacher.role != Role::Teacher {
            return Err(Error::Invalid(format!("expected a teacher model, got {}", teacher.role)));
        }
        teacher.set_frozen(true);
        let d_x = teacher.input_dim();
        let classes = teacher.output_dim();
        let mut rng = Rng::new(cfg.seed);

        let student_hidden = if cfg.student_hidden.is_empty() {
            teacher_hidden(&teacher).iter().map(|w| (w / 2).max(1)).collect()
        } else {
            cfg.student_hidden.clone()
        };
        let student = MlpModel::new(&Architecture::classifier(Role::Student, d_x, &student_hidden, classes), &mut rng)?;
        let generator = MlpModel::new(
            &Architecture::generator(Role::Generator, cfg.latent_dim, &cfg.generator_hidden, d_x),
            &mut rng,
        )?;
        let memory = match cfg.mode {
            ReplayMode::PreDfkd => Memory::Vae(ReplayState::new(
                d_x,
                cfg.latent_dim,
                &cfg.vae_hidden,
                Optimizer::new(OptimizerKind::adam(), cfg.lr_memory)?,
                &mut rng,
            )?),
            ReplayMode::BufferReplay => Memory::Buffer(SampleBuffer::new(cfg.buffer_capacity, d_x)?),
            ReplayMode::NoReplay => Memory::None,
        };
        let mut student_opt = Optimizer::new(cfg.student_optimizer, cfg.lr_student)?;
        if cfg.student_cosine {
            student_opt = student_opt.with_cosine(cfg.epochs);
        }
        let generator_opt = Optimizer::new(cfg.generator_optimizer, cfg.lr_generator)?;
        Ok(Self {
            teacher,
            student,
            generator,
            memory,
            student_opt,
            generator_opt,
            epoch: 0,
            rng,
        })
    }

    pub fn footprint(&self) -> Footprint {
        let mut tensor_bytes = self.teacher.param_bytes()
            + self.student.param_bytes()
            + self.generator.param_bytes()
            + self.student_opt.state_bytes()
            + self.generator_opt.state_bytes();
        let (stored_sample_bytes, replay_param_bytes) = match &self.memory {
            Memory::None => (0, 0),
            Memory::Vae(r) => {
                tensor_bytes += r.param_bytes() + r.optimizer.state_bytes();
                (0, r.param_bytes())
            }
            Memory::Buffer(b) => (b.sample_bytes(), 0),
        };
        Footprint {
            stored_sample_bytes,
            replay_param_bytes,
            tensor_bytes,
        }
    }

    fn sample_novel(&mut self, batch: usize, latent: usize) -> Result<Tensor> {
        let z = gaussian_sample(&mut self.rng, &[batch, latent])?;
        self.generator.predict(&z)
    }
}

/// Mean losses over one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    /// 0-based epoch index.
    pub epoch: usize,
    pub iterations: usize,
    pub generator_loss: f64,
    /// Teacher/student JS divergence on generator batches, in bits.
    pub js: f64,
    pub vae_loss: Option<f64>,
    pub student_loss: f64,
    /// Rows in the last student minibatch.
    pub student_batch: usize,
}

/// One generator update against the current (frozen) student. Returns the
/// loss, the JS term and the generated batch, detached.
fn generator_step(state: &mut TrainState, cfg: &DistillConfig) -> Result<(f64, f64, Tensor)> {
    let z = gaussian_sample(&mut state.rng, &[cfg.batch_novel, cfg.latent_dim])?;
    let mut tape = Tape::new();
    let gb = state.generator.bind(&mut tape, true);
    let tb = state.teacher.bind(&mut tape, false);
    let sb = state.student.bind(&mut tape, false);
    let zv = tape.constant(z);
    let x = state.generator.generator_forward(&mut tape, &gb, zv)?;
    let t_out = state.teacher.classifier_forward(&mut tape, &tb, x)?;
    let s_out = state.student.classifier_forward(&mut tape, &sb, x)?;
    let pt = tape.softmax(t_out.logits)?;
    let s_logits = tape.detach(s_out.logits);
    let ps = tape.softmax(s_logits)?;
    let loss = novel_generator_loss(&mut tape, pt, t_out.features[0], ps, &cfg.coeffs)?;
    let value = tape.value(loss.total).item()?;
    let js = tape.value(loss.js).item()?;
    let samples = tape.value(x).clone();
    tape.backward(loss.total)?;
    state.generator.collect_grads(&tape, &gb)?;
    state.generator_opt.step(&mut state.generator.params_mut())?;
    Ok((value, js, samples))
}

fn student_step(state: &mut TrainState, batch: Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let sb = state.student.bind(&mut tape, true);
    let tb = state.teacher.bind(&mut tape, false);
    let x = tape.constant(batch);
    let t_out = state.teacher.classifier_forward(&mut tape, &tb, x)?;
    let s_out = state.student.classifier_forward(&mut tape, &sb, x)?;
    let loss = kd_loss(&mut tape, s_out.logits, t_out.logits)?;
    let value = tape.value(loss).item()?;
    tape.backward(loss)?;
    state.student.collect_grads(&tape, &sb)?;
    state.student_opt.step(&mut state.student.params_mut())?;
    Ok(value)
}

/// Runs `batches_per_epoch` iterations of: generator phase (novel generator
/// step and, with generative replay, a memory-VAE step), then student phase
/// on novel samples concatenated with replayed ones.
pub fn distill_epoch(state: &mut TrainState, cfg: &DistillConfig) -> Result<EpochSummary> {
    let epoch = state.epoch;
    state.student_opt.set_epoch(epoch);
    // The memory pathway needs a decoder trained for at least one epoch.
    let replay_ready = epoch > 0;
    let tuning_steps = if cfg.latent_tuning { cfg.tuning_steps } else { 0 };

    let (mut g_sum, mut js_sum, mut g_n) = (0.0, 0.0, 0usize);
    let (mut v_sum, mut v_n) = (0.0, 0usize);
    let (mut s_sum, mut s_n) = (0.0, 0usize);
    let mut student_batch = 0;

    for _ in 0..cfg.batches_per_epoch {
        let mut last_novel = None;
        for _ in 0..cfg.generator_steps {
            let (loss, js, x_n) = generator_step(state, cfg).map_err(|e| e.in_phase("generator"))?;
            g_sum += loss;
            js_sum += js;
            g_n += 1;
            if let Memory::Vae(replay) = &mut state.memory {
                let opts = VaeStepOptions {
                    rehearsal_batch: cfg.batch_memory,
                    rehearse: replay_ready,
                    reconstruction: cfg.reconstruction,
                };
                let v = train_memory_generator_step(replay, &x_n, &state.teacher, &cfg.coeffs, opts, &mut state.rng)
                    .map_err(|e| e.in_phase("memory generator"))?;
                v_sum += v;
                v_n += 1;
            }
            last_novel = Some(x_n);
        }

        for _ in 0..cfg.student_steps {
            let novel = match (cfg.resample_student_batch, last_novel.take()) {
                (false, Some(x)) => x,
                _ => state
                    .sample_novel(cfg.batch_novel, cfg.latent_dim)
                    .map_err(|e| e.in_phase("student"))?,
            };
            let replayed = match &state.memory {
                Memory::Vae(replay) if replay_ready => Some(
                    infer_memory_batch(
                        replay,
                        &state.teacher,
                        cfg.batch_memory,
                        tuning_steps,
                        cfg.lr_latent,
                        epoch,
                        &mut state.rng,
                    )
                    .map_err(|e| e.in_phase("memory inference"))?
                    .samples,
                ),
                Memory::Buffer(buf) if !buf.is_empty() => Some(
                    buf.sample(cfg.batch_memory, &mut state.rng)
                        .map_err(|e| e.in_phase("buffer sampling"))?,
                ),
                _ => None,
            };
            if let Memory::Buffer(buf) = &mut state.memory {
                buf.store(&novel, &mut state.rng)?;
            }
            let batch = match replayed {
                Some(m) => Tensor::concat_rows(&[&novel, &m])?,
                None => novel,
            };
            student_batch = batch.rows();
            s_sum += student_step(state, batch).map_err(|e| e.in_phase("student"))?;
            s_n += 1;
        }
    }
    state.epoch += 1;
    let summary = EpochSummary {
        epoch,
        iterations: cfg.batches_per_epoch,
        generator_loss: g_sum / g_n as f64,
        js: js_sum / g_n as f64,
        vae_loss: (v_n > 0).then(|| v_sum / v_n as f64),
        student_loss: s_sum / s_n as f64,
        student_batch,
    };
    debug!("{summary:?}");
    Ok(summary)
}

/// Final state, metrics and per-epoch summaries of a distillation run.
#[derive(Debug)]
pub struct DistillOutcome {
    pub record: MetricsRecord,
    pub summaries: Vec<EpochSummary>,
    pub state: TrainState,
}

pub fn run_distillation(cfg: &DistillConfig, teacher: MlpModel, eval: &Dataset) -> Result<DistillOutcome> {
    run_distillation_with(cfg, teacher, eval, |_, _| {})
}

/// Like [`run_distillation`], calling `observe` after every epoch. Evaluation
/// reads the student only and never feeds back into training.
pub fn run_distillation_with(
    cfg: &DistillConfig,
    teacher: MlpModel,
    eval: &Dataset,
    mut observe: impl FnMut(&TrainState, &EpochSummary),
) -> Result<DistillOutcome> {
    let cfg = cfg.clone().validated()?;
    let teacher_acc = evaluate(&teacher, eval)?;
    if teacher_acc < cfg.teacher_floor {
        return Err(Error::Config(format!(
            "teacher accuracy {teacher_acc:.4} is below the floor {}",
            cfg.teacher_floor
        )));
    }
    let mut state = TrainState::new(&cfg, teacher)?;
    let mut record = MetricsRecord::new(format!("{}-seed{}", cfg.mode, cfg.seed), cfg.config_hash());
    let mut summaries = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let summary = distill_epoch(&mut state, &cfg)?;
        let done = summary.epoch + 1;
        if done % cfg.eval_every == 0 {
            let acc = evaluate(&state.student, eval)?;
            info!(
                "epoch {done}: acc={acc:.4} kd={:.4} gen={:.4} js={:.4}",
                summary.student_loss, summary.generator_loss, summary.js
            );
            record.push(done, acc, summary.student_loss);
        }
        observe(&state, &summary);
        summaries.push(summary);
    }
    Ok(DistillOutcome {
        record,
        summaries,
        state,
    })
}

/// Teacher training settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32],
            epochs: 30,
            lr: 0.01,
            batch: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TeacherReport {
    /// Frozen trained teacher.
    pub model: MlpModel,
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
}

/// Supervised cross-entropy training with Adam on shuffled minibatches.
pub fn train_teacher(train: &Dataset, eval: Option<&Dataset>, cfg: &TeacherConfig) -> Result<TeacherReport> {
    if train.is_empty() {
        return Err(Error::Invalid("teacher training set is empty".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("teacher batch must be positive".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let arch = Architecture::classifier(Role::Teacher, train.dim(), &cfg.hidden, train.classes);
    let mut model = MlpModel::new(&arch, &mut rng)?;
    let mut opt = Optimizer::new(OptimizerKind::adam(), cfg.lr)?;
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch) {
            let x = train.x.select_rows(chunk)?;
            let mut onehot = vec![0.0; chunk.len() * train.classes];
            for (i, &k) in chunk.iter().enumerate() {
                onehot[i * train.classes + train.y[k]] = 1.0;
            }
            let mut tape = Tape::new();
            let b = model.bind(&mut tape, true);
            let xv = tape.constant(x);
            let out = model.classifier_forward(&mut tape, &b, xv)?;
            let p = tape.softmax(out.logits)?;
            let lp = tape.log(p)?;
            let target = tape.constant(Tensor::new(vec![chunk.len(), train.classes], onehot)?);
            let picked = tape.mul(lp, target)?;
            let s = tape.sum(picked)?;
            let loss = tape.scale(s, -1.0 / chunk.len() as f64)?;
            tape.backward(loss).map_err(|e| e.in_phase("teacher"))?;
            model.collect_grads(&tape, &b)?;
            opt.step(&mut model.params_mut())?;
        }
        debug!("teacher epoch {epoch} done");
    }
    model.set_frozen(true);
    let train_accuracy = evaluate(&model, train)?;
    let eval_accuracy = eval.map(|d| evaluate(&model, d)).transpose()?;
    Ok(TeacherReport {
        model,
        train_accuracy,
        eval_accuracy,
    })
}
