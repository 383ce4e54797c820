//! Differentiable objectives for the novel generator, the memory VAE, latent
//! tuning and the student.
//!
//! Every function records onto the caller's [`Tape`] and returns a scalar
//! [`Var`]. Probabilities are row-wise distributions of shape `[B × C]`.

use std::f64::consts::LN_2;

use crate::error::{Error, Result};
use crate::models::{Bound, EncoderOutput, MlpModel};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Weights of the generator objective (`lambda*`, `alpha`) and of the VAE
/// prior term (`gamma`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossCoefficients {
    /// Teacher confidence (cross-entropy against its own argmax).
    pub lambda1: f64,
    /// Teacher activation magnitude.
    pub lambda2: f64,
    /// Batch class-balance entropy.
    pub lambda3: f64,
    /// Teacher/student disagreement.
    pub alpha: f64,
    /// KL weight in the VAE objective.
    pub gamma: f64,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 5.0,
            lambda3: 0.1,
            alpha: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossCoefficients {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("alpha", self.alpha),
            ("gamma", self.gamma),
        ];
        for (name, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which terms the VAE reconstruction loss includes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reconstruction {
    /// Pixel L1 plus L1 between teacher features of input and reconstruction.
    SyntheticAware,
    /// Pixel L1 only.
    PixelOnly,
}

fn batch_size(tape: &Tape, v: Var) -> f64 {
    tape.value(v).rows() as f64
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::Shape {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    Ok(())
}

/// `(1/B) Σ_i ‖a_i − b_i‖₁`.
fn mean_row_l1(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let n = batch_size(tape, a);
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    let s = tape.sum(d)?;
    tape.scale(s, 1.0 / n)
}

/// One-hot of the row argmax (ties to the lowest index), as a constant.
fn argmax_one_hot(tape: &mut Tape, probs: Var) -> Var {
    let t = tape.value(probs);
    let c = t.row_len();
    let mut data = vec![0.0; t.numel()];
    for (i, k) in t.argmax_rows().into_iter().enumerate() {
        data[i * c + k] = 1.0;
    }
    let shape = t.shape().to_vec();
    tape.constant(Tensor::from_parts(shape, data))
}

/// Cross-entropy of each row against its own argmax class, batch-averaged.
/// Zero when every row is one-hot; `ln C` for uniform rows.
pub fn one_hot_confidence_loss(tape: &mut Tape, probs: Var) -> Result<Var> {
    let target = argmax_one_hot(tape, probs);
    let n = batch_size(tape, probs);
    let lp = tape.log(probs)?;
    let picked = tape.mul(lp, target)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0 / n)
}

/// `−(1/B) Σ_i ‖f_i‖₁`: minimizing it drives teacher activations up.
pub fn activation_loss(tape: &mut Tape, features: Var) -> Result<Var> {
    let n = batch_size(tape, features);
    let a = tape.abs(features)?;
    let s = tape.sum(a)?;
    tape.scale(s, -1.0 / n)
}

/// Entropy (nats) of the batch-averaged class distribution.
pub fn categorical_entropy(tape: &mut Tape, probs: Var) -> Result<Var> {
    let p_bar = tape.mean_axis(probs, 0)?;
    let lp = tape.log(p_bar)?;
    let plp = tape.mul(p_bar, lp)?;
    let s = tape.sum(plp)?;
    tape.neg(s)
}

/// Row-wise `Σ_c p (ln p − ln m)`, summed over the batch.
fn kl_sum(tape: &mut Tape, p: Var, m: Var) -> Result<Var> {
    let lp = tape.log(p)?;
    let lm = tape.log(m)?;
    let d = tape.sub(lp, lm)?;
    let t = tape.mul(p, d)?;
    tape.sum(t)
}

/// Batch-mean Jensen-Shannon divergence in bits, so it lies in `[0, 1]`.
pub fn js_divergence(tape: &mut Tape, p: Var, q: Var) -> Result<Var> {
    same_shape(tape, "js_divergence", p, q)?;
    let n = batch_size(tape, p);
    let pq = tape.add(p, q)?;
    let m = tape.scale(pq, 0.5)?;
    let kp = kl_sum(tape, p, m)?;
    let kq = kl_sum(tape, q, m)?;
    let total = tape.add(kp, kq)?;
    tape.scale(total, 0.5 / (n * LN_2))
}

/// Individual terms of the novel-generator objective, already weighted
/// except where noted.
#[derive(Clone, Copy, Debug)]
pub struct NovelLoss {
    pub total: Var,
    /// Unweighted confidence cross-entropy.
    pub confidence: Var,
    /// Unweighted activation term.
    pub activation: Var,
    /// Unweighted batch class entropy.
    pub entropy: Var,
    /// Unweighted JS divergence between teacher and student.
    pub js: Var,
}

/// `λ1·CE + λ2·act − λ3·H(p̄) + α·(1 − JS(ŷ_T, ŷ_S))`.
///
/// `student_probs` should already be detached; this function does not cut
/// the graph for the caller.
pub fn novel_generator_loss(
    tape: &mut Tape,
    teacher_probs: Var,
    teacher_features: Var,
    student_probs: Var,
    coeffs: &LossCoefficients,
) -> Result<NovelLoss> {
    let confidence = one_hot_confidence_loss(tape, teacher_probs)?;
    let activation = activation_loss(tape, teacher_features)?;
    let entropy = categorical_entropy(tape, teacher_probs)?;
    let js = js_divergence(tape, teacher_probs, student_probs)?;

    let a = tape.scale(confidence, coeffs.lambda1)?;
    let b = tape.scale(activation, coeffs.lambda2)?;
    let c = tape.scale(entropy, -coeffs.lambda3)?;
    let d = tape.scale(js, -coeffs.alpha)?;
    let d = tape.add_scalar(d, coeffs.alpha)?;
    let ab = tape.add(a, b)?;
    let cd = tape.add(c, d)?;
    let total = tape.add(ab, cd)?;
    Ok(NovelLoss {
        total,
        confidence,
        activation,
        entropy,
        js,
    })
}

/// Batch-mean `½ Σ_d (μ² + σ² − 1 − ln σ²)` with `σ² = exp(log_var)`.
pub fn gaussian_kld(tape: &mut Tape, out: EncoderOutput) -> Result<Var> {
    same_shape(tape, "gaussian_kld", out.mu, out.log_var)?;
    let n = batch_size(tape, out.mu);
    let mu2 = tape.mul(out.mu, out.mu)?;
    let var = tape.exp(out.log_var)?;
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, out.log_var)?;
    let b = tape.add_scalar(b, -1.0)?;
    let s = tape.sum(b)?;
    tape.scale(s, 0.5 / n)
}

/// Pixel L1 between `x` and `x_hat`, plus (for
/// [`Reconstruction::SyntheticAware`]) the L1 distance between the frozen
/// teacher's responses to each over its feature layer set. `x` is treated as
/// data; gradients reach `x_hat` through the teacher's activations but never
/// the teacher's parameters, provided `teacher_bound` was bound as constant.
pub fn synthetic_aware_reconstruction(
    tape: &mut Tape,
    x: Var,
    x_hat: Var,
    teacher: &MlpModel,
    teacher_bound: &Bound,
    kind: Reconstruction,
) -> Result<Var> {
    same_shape(tape, "synthetic_aware_reconstruction", x, x_hat)?;
    let x = tape.detach(x);
    let mut total = mean_row_l1(tape, x, x_hat)?;
    if kind == Reconstruction::SyntheticAware {
        let target = teacher.classifier_forward(tape, teacher_bound, x)?;
        let recon = teacher.classifier_forward(tape, teacher_bound, x_hat)?;
        for (t, r) in target.features.iter().zip(&recon.features) {
            let t = tape.detach(*t);
            let term = mean_row_l1(tape, t, *r)?;
            total = tape.add(total, term)?;
        }
    }
    Ok(total)
}

/// One encode/decode pass of the VAE: input, reconstruction and the
/// posterior parameters that produced it.
#[derive(Clone, Copy, Debug)]
pub struct ReconstructionPair {
    pub x: Var,
    pub x_hat: Var,
    pub posterior: EncoderOutput,
}

/// Reconstruction of the novel pair plus (when present) the rehearsal pair,
/// plus `γ` times the KL of each pass's posterior.
pub fn vae_loss(
    tape: &mut Tape,
    novel: ReconstructionPair,
    memory: Option<ReconstructionPair>,
    teacher: &MlpModel,
    teacher_bound: &Bound,
    coeffs: &LossCoefficients,
    kind: Reconstruction,
) -> Result<Var> {
    let mut total = None;
    for pair in std::iter::once(novel).chain(memory) {
        let rec = synthetic_aware_reconstruction(tape, pair.x, pair.x_hat, teacher, teacher_bound, kind)?;
        let kld = gaussian_kld(tape, pair.posterior)?;
        let kld = tape.scale(kld, coeffs.gamma)?;
        let term = tape.add(rec, kld)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("novel pair always present"))
}

/// Batch-mean L1 distance between student and teacher softmax outputs; the
/// teacher side is treated as constant.
pub fn kd_loss(tape: &mut Tape, student_logits: Var, teacher_logits: Var) -> Result<Var> {
    same_shape(tape, "kd_loss", student_logits, teacher_logits)?;
    let t = tape.detach(teacher_logits);
    let pt = tape.softmax(t)?;
    let ps = tape.softmax(student_logits)?;
    mean_row_l1(tape, ps, pt)
}

/// KL between `N(mean, var)` (per-dimension empirical moments of the batch
/// `z`) and `N(0, 1)`, summed over dimensions.
pub fn empirical_latent_kld(tape: &mut Tape, z: Var) -> Result<Var> {
    let mean = tape.mean_axis(z, 0)?;
    let centered = tape.sub(z, mean)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_axis(sq, 0)?;
    let mu2 = tape.mul(mean, mean)?;
    let log_var = tape.log(var)?;
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, log_var)?;
    let b = tape.add_scalar(b, -1.0)?;
    let s = tape.sum(b)?;
    tape.scale(s, 0.5)
}

/// Latent-tuning objective: `−H(p̄) + CE_argmax + KL(z moments ‖ N(0,1))`.
/// Bounded below by `−ln C`.
pub fn latent_tuning_loss(tape: &mut Tape, teacher_probs: Var, z: Var) -> Result<Var> {
    let h = categorical_entropy(tape, teacher_probs)?;
    let ce = one_hot_confidence_loss(tape, teacher_probs)?;
    let kl = empirical_latent_kld(tape, z)?;
    let r = tape.add(ce, kl)?;
    tape.sub(r, h)
}
