//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use replaykd::config::BlobSettings;
use replaykd::data::{Dataset, Split};
use replaykd::distill::{train_teacher, TeacherConfig};
use replaykd::losses::{self, LossCoefficients, Reconstruction, ReconstructionPair};
use replaykd::models::{Activation, EncoderOutput, Layer, MlpModel, Role};
use replaykd::rng::Rng;
use replaykd::tape::{Tape, Var};
use replaykd::{Result, Tensor};

pub const FD_STEP: f64 = 1e-5;

/// A scalar function of several tensors, built on a fresh tape.
pub type LossFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Reverse-mode gradients of `f` at `inputs`, concatenated in input order.
pub fn tape_gradient(f: &LossFn, inputs: &[Tensor]) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();
    vars.iter()
        .flat_map(|&v| match tape.grad(v) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; tape.value(v).numel()],
        })
        .collect()
}

pub fn eval_loss(f: &LossFn, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = f(&mut tape, &vars).unwrap();
    tape.value(loss).item().unwrap()
}

/// Central differences of `f` with step `h`, in the same layout as
/// [`tape_gradient`].
pub fn central_difference(f: &LossFn, inputs: &[Tensor], h: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            out.push((eval_loss(f, &plus) - eval_loss(f, &minus)) / (2.0 * h));
        }
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` over the whole gradient vector; zero when both
/// vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub fn gradient_error(f: &LossFn, inputs: &[Tensor]) -> f64 {
    relative_error(&tape_gradient(f, inputs), &central_difference(f, inputs, FD_STEP))
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

/// Values bounded away from zero: `±[0.05, 1.05)`.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = 0.05 + rng.uniform(0.0, 1.0);
            if rng.uniform(0.0, 1.0) < 0.5 {
                -m
            } else {
                m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let c = t.row_len();
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for v in row.iter_mut() {
            *v = (*v - m).exp() / s;
        }
    }
    Tensor::new(t.shape().to_vec(), out).unwrap()
}

/// Smallest gap between the largest and second-largest entry of any row.
fn argmax_margin(t: &Tensor) -> f64 {
    let c = t.row_len();
    t.data()
        .chunks(c)
        .map(|row| {
            let mut s = row.to_vec();
            s.sort_by(|a, b| b.partial_cmp(a).unwrap());
            s[0] - s[1]
        })
        .fold(f64::INFINITY, f64::min)
}

fn min_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Small classifier with tanh hidden units, so its features are smooth.
pub fn smooth_teacher(input: usize, hidden: usize, classes: usize, rng: &mut Rng) -> MlpModel {
    let layers = vec![
        Layer::init(input, hidden, Activation::Tanh, rng),
        Layer::init(hidden, classes, Activation::Identity, rng),
    ];
    let mut m = MlpModel::from_layers(Role::Teacher, layers, vec![]).unwrap();
    m.set_frozen(true);
    m
}

fn teacher_features(teacher: &MlpModel, x: &Tensor) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let b = teacher.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = teacher.classifier_forward(&mut tape, &b, xv).unwrap();
    out.features.iter().map(|&f| tape.value(f).clone()).collect()
}

/// Rejects cases whose L1 terms sit within reach of a kink.
fn recon_case_ok(teacher: &MlpModel, x: &Tensor, x_hat: &Tensor) -> bool {
    if min_abs_diff(x, x_hat) < 1e-3 {
        return false;
    }
    let fx = teacher_features(teacher, x);
    let fh = teacher_features(teacher, x_hat);
    fx.iter().zip(&fh).all(|(a, b)| min_abs_diff(a, b) > 1e-3)
}

fn random_coeffs(rng: &mut Rng) -> LossCoefficients {
    LossCoefficients {
        lambda1: rng.uniform(0.1, 2.0),
        lambda2: rng.uniform(0.1, 5.0),
        lambda3: rng.uniform(0.1, 2.0),
        alpha: rng.uniform(0.1, 2.0),
        gamma: rng.uniform(0.1, 2.0),
    }
}

/// One randomized instance of a loss: the function and the point at which
/// to differentiate it.
pub struct GradCase {
    pub f: LossFn,
    pub inputs: Vec<Tensor>,
}

pub const LOSS_NAMES: [&str; 11] = [
    "one_hot_confidence_loss",
    "activation_loss",
    "categorical_entropy",
    "js_divergence",
    "novel_generator_loss",
    "gaussian_kld",
    "synthetic_aware_reconstruction",
    "vae_loss",
    "kd_loss",
    "empirical_latent_kld",
    "latent_tuning_loss",
];

/// Draws a valid case for loss `name`. Probability inputs are parameterized
/// by logits so the perturbed point stays on the simplex.
pub fn draw_case(name: &str, rng: &mut Rng) -> GradCase {
    loop {
        let b = 2 + rng.below(4);
        let c = 2 + rng.below(4);
        let d = 2 + rng.below(5);
        let case = match name {
            "one_hot_confidence_loss" => {
                let logits = uniform(rng, &[b, c], -2.0, 2.0);
                if argmax_margin(&softmax_rows(&logits)) < 1e-3 {
                    continue;
                }
                GradCase {
                    f: Box::new(|t, v| {
                        let p = t.softmax(v[0])?;
                        losses::one_hot_confidence_loss(t, p)
                    }),
                    inputs: vec![logits],
                }
            }
            "activation_loss" => GradCase {
                f: Box::new(|t, v| losses::activation_loss(t, v[0])),
                inputs: vec![away_from_zero(rng, &[b, d])],
            },
            "categorical_entropy" => GradCase {
                f: Box::new(|t, v| {
                    let p = t.softmax(v[0])?;
                    losses::categorical_entropy(t, p)
                }),
                inputs: vec![uniform(rng, &[b, c], -2.0, 2.0)],
            },
            "js_divergence" => GradCase {
                f: Box::new(|t, v| {
                    let p = t.softmax(v[0])?;
                    let q = t.softmax(v[1])?;
                    losses::js_divergence(t, p, q)
                }),
                inputs: vec![uniform(rng, &[b, c], -2.0, 2.0), uniform(rng, &[b, c], -2.0, 2.0)],
            },
            "novel_generator_loss" => {
                let tl = uniform(rng, &[b, c], -2.0, 2.0);
                if argmax_margin(&softmax_rows(&tl)) < 1e-3 {
                    continue;
                }
                let coeffs = random_coeffs(rng);
                GradCase {
                    f: Box::new(move |t, v| {
                        let pt = t.softmax(v[0])?;
                        let ps = t.softmax(v[2])?;
                        Ok(losses::novel_generator_loss(t, pt, v[1], ps, &coeffs)?.total)
                    }),
                    inputs: vec![tl, away_from_zero(rng, &[b, d]), uniform(rng, &[b, c], -2.0, 2.0)],
                }
            }
            "gaussian_kld" => GradCase {
                f: Box::new(|t, v| {
                    losses::gaussian_kld(
                        t,
                        EncoderOutput {
                            mu: v[0],
                            log_var: v[1],
                        },
                    )
                }),
                inputs: vec![uniform(rng, &[b, d], -2.0, 2.0), uniform(rng, &[b, d], -2.0, 2.0)],
            },
            "synthetic_aware_reconstruction" => {
                let teacher = smooth_teacher(d, 3 + rng.below(4), c, rng);
                let x = uniform(rng, &[b, d], -1.0, 1.0);
                let x_hat = uniform(rng, &[b, d], -1.0, 1.0);
                if !recon_case_ok(&teacher, &x, &x_hat) {
                    continue;
                }
                // `x` is data to this loss, so only `x_hat` is differentiated.
                GradCase {
                    f: Box::new(move |t, v| {
                        let tb = teacher.bind(t, false);
                        let xv = t.constant(x.clone());
                        losses::synthetic_aware_reconstruction(t, xv, v[0], &teacher, &tb, Reconstruction::SyntheticAware)
                    }),
                    inputs: vec![x_hat],
                }
            }
            "vae_loss" => {
                let teacher = smooth_teacher(d, 3 + rng.below(4), c, rng);
                let z = 1 + rng.below(3);
                let (x_n, xh_n) = (uniform(rng, &[b, d], -1.0, 1.0), uniform(rng, &[b, d], -1.0, 1.0));
                let (x_m, xh_m) = (uniform(rng, &[b, d], -1.0, 1.0), uniform(rng, &[b, d], -1.0, 1.0));
                if !recon_case_ok(&teacher, &x_n, &xh_n) || !recon_case_ok(&teacher, &x_m, &xh_m) {
                    continue;
                }
                let coeffs = random_coeffs(rng);
                GradCase {
                    f: Box::new(move |t, v| {
                        let tb = teacher.bind(t, false);
                        let novel = ReconstructionPair {
                            x: t.constant(x_n.clone()),
                            x_hat: v[0],
                            posterior: EncoderOutput { mu: v[1], log_var: v[2] },
                        };
                        let memory = ReconstructionPair {
                            x: t.constant(x_m.clone()),
                            x_hat: v[3],
                            posterior: EncoderOutput { mu: v[4], log_var: v[5] },
                        };
                        losses::vae_loss(t, novel, Some(memory), &teacher, &tb, &coeffs, Reconstruction::SyntheticAware)
                    }),
                    inputs: vec![
                        xh_n,
                        uniform(rng, &[b, z], -1.0, 1.0),
                        uniform(rng, &[b, z], -1.0, 1.0),
                        xh_m,
                        uniform(rng, &[b, z], -1.0, 1.0),
                        uniform(rng, &[b, z], -1.0, 1.0),
                    ],
                }
            }
            "kd_loss" => {
                let s = uniform(rng, &[b, c], -2.0, 2.0);
                let t = uniform(rng, &[b, c], -2.0, 2.0);
                if min_abs_diff(&softmax_rows(&s), &softmax_rows(&t)) < 1e-3 {
                    continue;
                }
                // The teacher side is a target, not an input.
                GradCase {
                    f: Box::new(move |tape, v| {
                        let tv = tape.constant(t.clone());
                        losses::kd_loss(tape, v[0], tv)
                    }),
                    inputs: vec![s],
                }
            }
            "empirical_latent_kld" => GradCase {
                f: Box::new(|t, v| losses::empirical_latent_kld(t, v[0])),
                inputs: vec![uniform(rng, &[b + 2, d], -2.0, 2.0)],
            },
            "latent_tuning_loss" => {
                let logits = uniform(rng, &[b + 2, c], -2.0, 2.0);
                if argmax_margin(&softmax_rows(&logits)) < 1e-3 {
                    continue;
                }
                GradCase {
                    f: Box::new(|t, v| {
                        let p = t.softmax(v[0])?;
                        losses::latent_tuning_loss(t, p, v[1])
                    }),
                    inputs: vec![logits, uniform(rng, &[b + 2, d], -2.0, 2.0)],
                }
            }
            other => panic!("no gradient case for `{other}`"),
        };
        return case;
    }
}

/// Worst relative gradient error of `cases` random instances of `name`.
pub fn worst_gradient_error(name: &str, cases: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    (0..cases)
        .map(|_| {
            let case = draw_case(name, &mut rng);
            gradient_error(&case.f, &case.inputs)
        })
        .fold(0.0, f64::max)
}

/// Benchmark train and eval splits.
pub fn benchmark_data() -> (Dataset, Dataset) {
    let b = BlobSettings::benchmark();
    (b.generate(Split::Train).unwrap(), b.generate(Split::Eval).unwrap())
}

/// Trained benchmark teacher and the eval split.
pub fn benchmark_teacher() -> (MlpModel, Dataset) {
    let (train, eval) = benchmark_data();
    let report = train_teacher(&train, Some(&eval), &TeacherConfig::benchmark()).unwrap();
    (report.model, eval)
}

/// `Σ (inputs + 1) · outputs` over a chain of widths, as f64 bytes.
pub fn mlp_bytes(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum::<usize>() * 8
}
