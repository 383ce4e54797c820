//! Memory for the student: a VAE that models every synthetic batch seen so
//! far, and a fixed-capacity sample buffer used as the stored-data baseline.
//!
//! The VAE is trained with self-rehearsal: each step reconstructs the fresh
//! novel batch and a batch decoded from the VAE's own prior, so the decoder
//! does not forget older generator distributions either. Memory batches are
//! drawn from the frozen decoder after a few gradient steps on the latent
//! codes that spread the teacher's predictions across classes.

use log::warn;

use crate::error::{Error, Result};
use crate::losses::{
    categorical_entropy, latent_tuning_loss, vae_loss, LossCoefficients, Reconstruction, ReconstructionPair,
};
use crate::models::{reparameterize, Architecture, MlpModel, Role};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{gaussian_sample, Rng};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ReplayState {
    pub encoder: MlpModel,
    /// The memory generator.
    pub decoder: MlpModel,
    pub optimizer: Optimizer,
    pub steps_trained: u64,
}

/// A detached batch decoded from the memory generator.
#[derive(Clone, Debug)]
pub struct MemoryBatch {
    /// `[B_m × d_x]`, values in (−1, 1).
    pub samples: Tensor,
    /// Epoch at which the batch was inferred.
    pub epoch: usize,
}

/// Options for one VAE training step.
#[derive(Clone, Copy, Debug)]
pub struct VaeStepOptions {
    pub rehearsal_batch: usize,
    /// Include the self-rehearsal pair. Off until the decoder has been
    /// trained on something.
    pub rehearse: bool,
    pub reconstruction: Reconstruction,
}

impl ReplayState {
    pub fn new(
        sample_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        optimizer: Optimizer,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut enc_hidden = hidden.to_vec();
        enc_hidden.reverse();
        let encoder = MlpModel::new(&Architecture::encoder(sample_dim, &enc_hidden, latent_dim), rng)?;
        let decoder = MlpModel::new(&Architecture::generator(Role::Decoder, latent_dim, hidden, sample_dim), rng)?;
        Self::from_parts(encoder, decoder, optimizer)
    }

    pub fn from_parts(encoder: MlpModel, decoder: MlpModel, optimizer: Optimizer) -> Result<Self> {
        if encoder.role != Role::Encoder || decoder.role != Role::Decoder {
            return Err(Error::Invalid("replay state needs an encoder and a decoder".into()));
        }
        if encoder.input_dim() != decoder.output_dim() || encoder.output_dim() != decoder.input_dim() {
            return Err(Error::Invalid(format!(
                "encoder {}→{} does not mirror decoder {}→{}",
                encoder.input_dim(),
                encoder.output_dim(),
                decoder.input_dim(),
                decoder.output_dim()
            )));
        }
        Ok(Self {
            encoder,
            decoder,
            optimizer,
            steps_trained: 0,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.input_dim()
    }

    pub fn sample_dim(&self) -> usize {
        self.decoder.output_dim()
    }

    /// Parameter bytes of encoder and decoder.
    pub fn param_bytes(&self) -> usize {
        self.encoder.param_bytes() + self.decoder.param_bytes()
    }

    /// Decodes `z` without recording gradients.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.decoder.predict(z)
    }
}

/// One joint optimizer step on encoder and decoder. `novel` is treated as
/// data; `teacher` is only read. Returns the VAE loss before the update.
pub fn train_memory_generator_step(
    state: &mut ReplayState,
    novel: &Tensor,
    teacher: &MlpModel,
    coeffs: &LossCoefficients,
    opts: VaeStepOptions,
    rng: &mut Rng,
) -> Result<f64> {
    if novel.shape().len() != 2 || novel.row_len() != state.sample_dim() {
        return Err(Error::Shape {
            op: "train_memory_generator_step",
            lhs: novel.shape().to_vec(),
            rhs: vec![state.sample_dim()],
        });
    }
    let mut tape = Tape::new();
    let enc = state.encoder.bind(&mut tape, true);
    let dec = state.decoder.bind(&mut tape, true);
    let tb = teacher.bind(&mut tape, false);

    // Train with novel samples.
    let x_n = tape.constant(novel.clone());
    let post_n = state.encoder.encoder_forward(&mut tape, &enc, x_n)?;
    let z_n = reparameterize(&mut tape, post_n, rng)?;
    let x_hat_n = state.decoder.generator_forward(&mut tape, &dec, z_n)?;
    let novel_pair = ReconstructionPair {
        x: x_n,
        x_hat: x_hat_n,
        posterior: post_n,
    };

    // Rehearse by reconstructing the decoder's own samples, which are data here.
    let memory_pair = if opts.rehearse && opts.rehearsal_batch > 0 {
        let z_m = gaussian_sample(rng, &[opts.rehearsal_batch, state.latent_dim()])?;
        let x_m = tape.constant(state.decode(&z_m)?);
        let post_m = state.encoder.encoder_forward(&mut tape, &enc, x_m)?;
        let z_bar = reparameterize(&mut tape, post_m, rng)?;
        let x_hat_m = state.decoder.generator_forward(&mut tape, &dec, z_bar)?;
        Some(ReconstructionPair {
            x: x_m,
            x_hat: x_hat_m,
            posterior: post_m,
        })
    } else {
        None
    };

    let loss = vae_loss(&mut tape, novel_pair, memory_pair, teacher, &tb, coeffs, opts.reconstruction)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite("memory generator loss".into()));
    }
    tape.backward(loss)?;
    state.encoder.collect_grads(&tape, &enc)?;
    state.decoder.collect_grads(&tape, &dec)?;
    let mut params = state.encoder.params_mut();
    params.extend(state.decoder.params_mut());
    state.optimizer.step(&mut params)?;
    state.steps_trained += 1;
    Ok(value)
}

/// Tuned latent codes and the samples they decode to.
#[derive(Clone, Debug)]
pub struct TunedLatents {
    pub z: Tensor,
    pub batch: MemoryBatch,
}

/// Draws `batch` latent codes, runs `tuning_steps` plain gradient-descent
/// steps on them against the latent-tuning objective (decoder and teacher
/// frozen), and decodes the result.
pub fn infer_memory_batch_with_latents(
    state: &ReplayState,
    teacher: &MlpModel,
    batch: usize,
    tuning_steps: usize,
    lr_z: f64,
    epoch: usize,
    rng: &mut Rng,
) -> Result<TunedLatents> {
    if batch == 0 {
        return Err(Error::Invalid("memory batch size must be positive".into()));
    }
    if state.steps_trained == 0 {
        warn!("inferring memory samples from an untrained decoder");
    }
    let mut z = gaussian_sample(rng, &[batch, state.latent_dim()])?;
    let mut tape = Tape::new();
    for _ in 0..tuning_steps {
        tape.reset();
        let dec = state.decoder.bind(&mut tape, false);
        let tb = teacher.bind(&mut tape, false);
        let zv = tape.param(z);
        let x = state.decoder.generator_forward(&mut tape, &dec, zv)?;
        let out = teacher.classifier_forward(&mut tape, &tb, x)?;
        let probs = tape.softmax(out.logits)?;
        let loss = latent_tuning_loss(&mut tape, probs, zv)?;
        if !tape.value(loss).all_finite() {
            return Err(Error::NonFinite("latent tuning loss".into()));
        }
        tape.backward(loss)?;
        let grad = tape.grad(zv).ok_or_else(|| Error::Tape("no gradient for latent codes".into()))?;
        let mut next = tape.value(zv).clone();
        for (v, g) in next.data_mut().iter_mut().zip(grad.data()) {
            *v -= lr_z * g;
        }
        if !next.all_finite() {
            return Err(Error::NonFinite("latent tuning step".into()));
        }
        z = next;
    }
    let samples = state.decode(&z)?;
    Ok(TunedLatents {
        z,
        batch: MemoryBatch { samples, epoch },
    })
}

pub fn infer_memory_batch(
    state: &ReplayState,
    teacher: &MlpModel,
    batch: usize,
    tuning_steps: usize,
    lr_z: f64,
    epoch: usize,
    rng: &mut Rng,
) -> Result<MemoryBatch> {
    Ok(infer_memory_batch_with_latents(state, teacher, batch, tuning_steps, lr_z, epoch, rng)?.batch)
}

/// Entropy (nats) of the teacher's batch-averaged class distribution over
/// `samples`.
pub fn batch_class_entropy(teacher: &MlpModel, samples: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let tb = teacher.bind(&mut tape, false);
    let x = tape.constant(samples.clone());
    let out = teacher.classifier_forward(&mut tape, &tb, x)?;
    let p = tape.softmax(out.logits)?;
    let h = categorical_entropy(&mut tape, p)?;
    tape.value(h).item()
}

/// Default optimizer for the memory VAE.
pub fn default_vae_optimizer(lr: f64) -> Result<Optimizer> {
    Optimizer::new(OptimizerKind::adam(), lr)
}

/// Fixed-capacity store of past samples, filled by reservoir sampling over
/// the stream of rows offered to it.
#[derive(Clone, Debug)]
pub struct SampleBuffer {
    capacity: usize,
    dim: usize,
    seen: u64,
    rows: Vec<Vec<f64>>,
}

impl SampleBuffer {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Invalid("buffer capacity and width must be positive".into()));
        }
        Ok(Self {
            capacity,
            dim,
            seen: 0,
            rows: Vec::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    /// Bytes of sample payload currently held.
    pub fn sample_bytes(&self) -> usize {
        self.rows.len() * self.dim * std::mem::size_of::<f64>()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Offers one row to the reservoir.
    pub fn offer(&mut self, row: &[f64], rng: &mut Rng) {
        self.seen += 1;
        if self.rows.len() < self.capacity {
            self.rows.push(row.to_vec());
        } else {
            let j = rng.below(self.seen as usize);
            if j < self.capacity {
                self.rows[j] = row.to_vec();
            }
        }
    }

    /// Offers every row of a `[B × d]` batch.
    pub fn store(&mut self, batch: &Tensor, rng: &mut Rng) -> Result<()> {
        if batch.shape().len() != 2 || batch.row_len() != self.dim {
            return Err(Error::Shape {
                op: "buffer_store",
                lhs: batch.shape().to_vec(),
                rhs: vec![self.dim],
            });
        }
        for i in 0..batch.rows() {
            self.offer(batch.row(i), rng);
        }
        Ok(())
    }

    /// `count` rows drawn uniformly, without replacement when the buffer
    /// holds at least `count` rows and with replacement otherwise.
    pub fn sample(&self, count: usize, rng: &mut Rng) -> Result<Tensor> {
        if self.rows.is_empty() {
            return Err(Error::Invalid("cannot sample from an empty buffer".into()));
        }
        if count == 0 {
            return Err(Error::Invalid("sample count must be positive".into()));
        }
        let idx = if self.rows.len() >= count {
            rng.sample_indices(self.rows.len(), count)
        } else {
            (0..count).map(|_| rng.below(self.rows.len())).collect()
        };
        let mut data = Vec::with_capacity(count * self.dim);
        for i in idx {
            data.extend_from_slice(&self.rows[i]);
        }
        Tensor::new(vec![count, self.dim], data)
    }
}
