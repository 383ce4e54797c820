//! Multi-layer perceptrons in the five roles used by distillation: teacher,
//! student, novel-sample generator, and the encoder/decoder pair of the memory
//! VAE.

use std::fmt;

use crate::error::{Error, Result};
use crate::rng::{gaussian_sample, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Sigmoid => 2,
            Activation::Identity => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Activation::Relu,
            1 => Activation::Tanh,
            2 => Activation::Sigmoid,
            3 => Activation::Identity,
            t => return Err(Error::Format(format!("unknown activation tag {t}"))),
        })
    }

    fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => Ok(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
    Generator,
    Encoder,
    Decoder,
}

impl Role {
    pub fn tag(self) -> u8 {
        match self {
            Role::Teacher => 0,
            Role::Student => 1,
            Role::Generator => 2,
            Role::Encoder => 3,
            Role::Decoder => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Role::Teacher,
            1 => Role::Student,
            2 => Role::Generator,
            3 => Role::Encoder,
            4 => Role::Decoder,
            t => return Err(Error::Format(format!("unknown role tag {t}"))),
        })
    }

    fn is_classifier(self) -> bool {
        matches!(self, Role::Teacher | Role::Student)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
            Role::Generator => "generator",
            Role::Encoder => "encoder",
            Role::Decoder => "decoder",
        };
        f.write_str(s)
    }
}

/// A trainable tensor with its most recent gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub requires_grad: bool,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        Self {
            value,
            grad: None,
            requires_grad: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Layer {
    /// `[out × in]`
    pub weight: Parameter,
    /// `[out]`
    pub bias: Parameter,
    pub activation: Activation,
}

impl Layer {
    /// Fan-in uniform init in `±sqrt(6 / fan_in)`, zero bias.
    pub fn init(inputs: usize, outputs: usize, activation: Activation, rng: &mut Rng) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        let w = (0..inputs * outputs).map(|_| rng.uniform(-bound, bound)).collect();
        Self {
            weight: Parameter::new(Tensor::from_parts(vec![outputs, inputs], w)),
            bias: Parameter::new(Tensor::zeros(&[outputs])),
            activation,
        }
    }

    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            weight: Parameter::new(Tensor::zeros(&[outputs, inputs])),
            bias: Parameter::new(Tensor::zeros(&[outputs])),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }
}

/// Tape handles for one bound layer: `(Wᵀ, b)`.
#[derive(Clone, Copy, Debug)]
struct BoundLayer {
    weight_t: Var,
    bias: Var,
}

/// A model's parameters registered on a particular tape.
#[derive(Clone, Debug)]
pub struct Bound {
    layers: Vec<BoundLayer>,
    heads: Vec<BoundLayer>,
    trainable: bool,
}

/// Output of a classifier pass.
#[derive(Clone, Debug)]
pub struct ClassifierOutput {
    pub logits: Var,
    /// Layer set used for feature matching: the pre-activation of the final
    /// hidden layer followed by the logits.
    pub features: Vec<Var>,
}

/// Per-sample Gaussian parameters predicted by the encoder.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub mu: Var,
    pub log_var: Var,
}

#[derive(Clone, Debug)]
pub struct MlpModel {
    pub role: Role,
    pub layers: Vec<Layer>,
    /// Parallel output heads after the shared trunk (encoder: `[mu, log_var]`).
    pub heads: Vec<Layer>,
}

/// Widths and activations for building an [`MlpModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub role: Role,
    pub dims: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl Architecture {
    pub fn classifier(role: Role, input: usize, hidden: &[usize], classes: usize) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(classes);
        Self {
            role,
            dims,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Identity,
        }
    }

    /// Generator or decoder: relu trunk with a tanh head so samples live in (−1, 1).
    pub fn generator(role: Role, latent: usize, hidden: &[usize], output: usize) -> Self {
        let mut dims = vec![latent];
        dims.extend_from_slice(hidden);
        dims.push(output);
        Self {
            role,
            dims,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Tanh,
        }
    }

    /// Encoder trunk `input → hidden…` with twin linear heads of width `latent`.
    pub fn encoder(input: usize, hidden: &[usize], latent: usize) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(latent);
        Self {
            role: Role::Encoder,
            dims,
            hidden_activation: Activation::Relu,
            output_activation: Activation::Identity,
        }
    }
}

fn check_chain(layers: &[Layer], heads: &[Layer]) -> Result<()> {
    for pair in layers.windows(2) {
        if pair[0].outputs() != pair[1].inputs() {
            return Err(Error::Invalid(format!(
                "layer widths do not chain: {} -> {}",
                pair[0].outputs(),
                pair[1].inputs()
            )));
        }
    }
    if let Some(last) = layers.last() {
        if heads.iter().any(|h| h.inputs() != last.outputs()) {
            return Err(Error::Invalid("head input width does not match trunk".into()));
        }
    }
    Ok(())
}

impl MlpModel {
    pub fn from_layers(role: Role, layers: Vec<Layer>, heads: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Invalid("model needs at least one layer".into()));
        }
        if (role == Role::Encoder) != (heads.len() == 2) || (role != Role::Encoder && !heads.is_empty()) {
            return Err(Error::Invalid(format!("{role} models take {} heads", if role == Role::Encoder { 2 } else { 0 })));
        }
        check_chain(&layers, &heads)?;
        Ok(Self { role, layers, heads })
    }

    pub fn new(arch: &Architecture, rng: &mut Rng) -> Result<Self> {
        Self::build(arch, |i, o, a| Layer::init(i, o, a, rng))
    }

    /// Same architecture with every weight and bias set to zero.
    pub fn zeroed(arch: &Architecture) -> Result<Self> {
        Self::build(arch, Layer::zeros)
    }

    fn build(arch: &Architecture, mut make: impl FnMut(usize, usize, Activation) -> Layer) -> Result<Self> {
        if arch.dims.len() < 2 || arch.dims.iter().any(|&d| d == 0) {
            return Err(Error::Invalid(format!("bad layer widths {:?}", arch.dims)));
        }
        let n = arch.dims.len() - 1;
        let (trunk_n, head_w) = if arch.role == Role::Encoder {
            (n - 1, Some(arch.dims[n]))
        } else {
            (n, None)
        };
        let mut layers = Vec::with_capacity(trunk_n);
        for k in 0..trunk_n {
            let act = if k + 1 == trunk_n && head_w.is_none() {
                arch.output_activation
            } else {
                arch.hidden_activation
            };
            layers.push(make(arch.dims[k], arch.dims[k + 1], act));
        }
        let heads = match head_w {
            Some(w) => {
                if layers.is_empty() {
                    return Err(Error::Invalid("encoder needs a hidden trunk".into()));
                }
                let input = arch.dims[n - 1];
                vec![
                    make(input, w, arch.output_activation),
                    make(input, w, arch.output_activation),
                ]
            }
            None => Vec::new(),
        };
        Self::from_layers(arch.role, layers, heads)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        match self.heads.first() {
            Some(h) => h.outputs(),
            None => self.layers.last().map_or(0, Layer::outputs),
        }
    }

    /// Marks every parameter as (not) requiring gradients.
    pub fn set_frozen(&mut self, frozen: bool) {
        for p in self.params_mut() {
            p.requires_grad = !frozen;
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params().all(|p| !p.requires_grad)
    }

    pub fn params(&self) -> impl Iterator<Item = &Parameter> {
        self.layers
            .iter()
            .chain(&self.heads)
            .flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers
            .iter_mut()
            .chain(self.heads.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_bytes(&self) -> usize {
        self.params().map(|p| p.value.size_bytes()).sum()
    }

    /// Bitwise equality of all parameter values.
    pub fn same_params(&self, other: &MlpModel) -> bool {
        self.params().count() == other.params().count()
            && self.params().zip(other.params()).all(|(a, b)| a.value.bit_eq(&b.value))
    }

    /// Registers parameters on `tape`. With `trainable == false`, or for
    /// parameters that do not require gradients, the leaves are constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let mut bind_layer = |l: &Layer| {
            let w = &l.weight.value;
            let (o, i) = (w.shape()[0], w.shape()[1]);
            let mut wt = vec![0.0; o * i];
            for r in 0..o {
                for c in 0..i {
                    wt[c * o + r] = w.data()[r * i + c];
                }
            }
            BoundLayer {
                weight_t: tape.leaf(Tensor::from_parts(vec![i, o], wt), trainable && l.weight.requires_grad),
                bias: tape.leaf(l.bias.value.clone(), trainable && l.bias.requires_grad),
            }
        };
        Bound {
            layers: self.layers.iter().map(&mut bind_layer).collect(),
            heads: self.heads.iter().map(&mut bind_layer).collect(),
            trainable,
        }
    }

    fn check_input(&self, tape: &Tape, x: Var, op: &'static str) -> Result<()> {
        let s = tape.value(x).shape();
        if s.len() != 2 || s[1] != self.input_dim() {
            return Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![self.input_dim()],
            });
        }
        Ok(())
    }

    fn affine(tape: &mut Tape, b: BoundLayer, x: Var) -> Result<Var> {
        let h = tape.matmul(x, b.weight_t)?;
        tape.add(h, b.bias)
    }

    /// Runs the trunk, returning the final output and the pre-activation of
    /// the last trunk layer and of the layer before it.
    fn trunk(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<(Var, Vec<Var>)> {
        let mut h = x;
        let mut pre = Vec::with_capacity(self.layers.len());
        for (layer, b) in self.layers.iter().zip(&bound.layers) {
            let z = Self::affine(tape, *b, h)?;
            pre.push(z);
            h = layer.activation.apply(tape, z)?;
        }
        Ok((h, pre))
    }

    pub fn classifier_forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<ClassifierOutput> {
        if !self.role.is_classifier() {
            return Err(Error::Invalid(format!("classifier_forward on a {} model", self.role)));
        }
        self.check_input(tape, x, "classifier_forward")?;
        let (logits, pre) = self.trunk(tape, bound, x)?;
        let mut features = Vec::with_capacity(2);
        if pre.len() >= 2 {
            features.push(pre[pre.len() - 2]);
        }
        features.push(logits);
        Ok(ClassifierOutput { logits, features })
    }

    pub fn generator_forward(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
        if !matches!(self.role, Role::Generator | Role::Decoder) {
            return Err(Error::Invalid(format!("generator_forward on a {} model", self.role)));
        }
        self.check_input(tape, z, "generator_forward")?;
        Ok(self.trunk(tape, bound, z)?.0)
    }

    pub fn encoder_forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<EncoderOutput> {
        if self.role != Role::Encoder {
            return Err(Error::Invalid(format!("encoder_forward on a {} model", self.role)));
        }
        self.check_input(tape, x, "encoder_forward")?;
        let (h, _) = self.trunk(tape, bound, x)?;
        let mu = Self::affine(tape, bound.heads[0], h)?;
        let mu = self.heads[0].activation.apply(tape, mu)?;
        let log_var = Self::affine(tape, bound.heads[1], h)?;
        let log_var = self.heads[1].activation.apply(tape, log_var)?;
        Ok(EncoderOutput { mu, log_var })
    }

    /// Tape-free forward pass returning the model's primary output (logits or
    /// samples; for encoders, the mean head).
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = match self.role {
            Role::Teacher | Role::Student => self.classifier_forward(&mut tape, &bound, xv)?.logits,
            Role::Generator | Role::Decoder => self.generator_forward(&mut tape, &bound, xv)?,
            Role::Encoder => self.encoder_forward(&mut tape, &bound, xv)?.mu,
        };
        Ok(tape.value(out).clone())
    }

    /// Copies gradients from `tape` into the parameters bound by `bound`.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &Bound) -> Result<()> {
        if !bound.trainable {
            return Err(Error::Tape("model was bound as a constant".into()));
        }
        let pairs = self
            .layers
            .iter_mut()
            .zip(&bound.layers)
            .chain(self.heads.iter_mut().zip(&bound.heads));
        for (layer, b) in pairs {
            if let Some(gt) = tape.grad(b.weight_t) {
                let (i, o) = (gt.shape()[0], gt.shape()[1]);
                let mut g = vec![0.0; o * i];
                for r in 0..o {
                    for c in 0..i {
                        g[r * i + c] = gt.data()[c * o + r];
                    }
                }
                layer.weight.grad = Some(Tensor::from_parts(vec![o, i], g));
            }
            if let Some(gb) = tape.grad(b.bias) {
                layer.bias.grad = Some(gb.clone());
            }
        }
        Ok(())
    }
}

/// `mu + exp(0.5 · log_var) ∘ ε` with `ε ~ N(0, 1)` drawn from `rng` as a
/// constant, so gradients reach `mu` and `log_var` only.
pub fn reparameterize(tape: &mut Tape, out: EncoderOutput, rng: &mut Rng) -> Result<Var> {
    let shape = tape.value(out.mu).shape().to_vec();
    let eps = gaussian_sample(rng, &shape)?;
    reparameterize_with(tape, out, eps)
}

/// Reparameterization with caller-supplied noise.
pub fn reparameterize_with(tape: &mut Tape, out: EncoderOutput, eps: Tensor) -> Result<Var> {
    let mu_shape = tape.value(out.mu).shape().to_vec();
    if tape.value(out.log_var).shape() != mu_shape.as_slice() || eps.shape() != mu_shape.as_slice() {
        return Err(Error::Shape {
            op: "reparameterize",
            lhs: mu_shape,
            rhs: eps.shape().to_vec(),
        });
    }
    let half = tape.scale(out.log_var, 0.5)?;
    let std = tape.exp(half)?;
    let eps = tape.constant(eps);
    let noise = tape.mul(std, eps)?;
    tape.add(out.mu, noise)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_teacher_arch() -> Architecture {
        Architecture::classifier(Role::Teacher, 4, &[8, 6], 3)
    }

    #[test]
    fn zero_classifier_gives_zero_logits() {
        let m = MlpModel::zeroed(&blob_teacher_arch()).unwrap();
        let x = Tensor::from_rows(&[vec![0.3, -0.2, 0.9, 1.0]]).unwrap();
        assert!(m.predict(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_single_layer() {
        let mut layer = Layer::zeros(2, 2, Activation::Identity);
        layer.weight.value = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let m = MlpModel::from_layers(Role::Teacher, vec![layer], vec![]).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(m.predict(&x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn two_layer_matches_hand_evaluated_chain() {
        let arch = Architecture::classifier(Role::Student, 3, &[4], 2);
        let m = MlpModel::new(&arch, &mut Rng::new(0)).unwrap();
        let x = [0.5, -1.0, 0.25];
        let (l1, l2) = (&m.layers[0], &m.layers[1]);
        let w1 = l1.weight.value.data();
        let mut h = [0.0; 4];
        for (r, hr) in h.iter_mut().enumerate() {
            let mut s = l1.bias.value.data()[r];
            for c in 0..3 {
                s += w1[r * 3 + c] * x[c];
            }
            *hr = s.max(0.0);
        }
        let w2 = l2.weight.value.data();
        let expected: Vec<f64> = (0..2)
            .map(|r| l2.bias.value.data()[r] + (0..4).map(|c| w2[r * 4 + c] * h[c]).sum::<f64>())
            .collect();
        let got = m.predict(&Tensor::from_rows(&[x.to_vec()]).unwrap()).unwrap();
        for (g, e) in got.data().iter().zip(&expected) {
            assert!((g - e).abs() < 1e-14);
        }
    }

    #[test]
    fn classifier_features_are_last_hidden_preactivation_and_logits() {
        let m = MlpModel::new(&blob_teacher_arch(), &mut Rng::new(1)).unwrap();
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false);
        let x = tape.constant(Tensor::ones(&[5, 4]));
        let out = m.classifier_forward(&mut tape, &b, x).unwrap();
        assert_eq!(out.features.len(), 2);
        assert_eq!(tape.value(out.features[0]).shape(), &[5, 6]);
        assert_eq!(out.features[1], out.logits);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = MlpModel::new(&blob_teacher_arch(), &mut Rng::new(1)).unwrap();
        let err = m.predict(&Tensor::ones(&[2, 5])).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn zero_generator_outputs_zero_and_range_is_open_interval() {
        let arch = Architecture::generator(Role::Generator, 3, &[16, 16], 5);
        let zero = MlpModel::zeroed(&arch).unwrap();
        assert!(zero.predict(&Tensor::ones(&[2, 3])).unwrap().data().iter().all(|&v| v == 0.0));

        let g = MlpModel::new(&arch, &mut Rng::new(9)).unwrap();
        let z = gaussian_sample(&mut Rng::new(10), &[10_000, 3]).unwrap();
        let x = g.predict(&z).unwrap();
        assert!(x.data().iter().all(|&v| v > -1.0 && v < 1.0));
        let again = g.predict(&z).unwrap();
        assert!(x.bit_eq(&again));
    }

    #[test]
    fn encoder_shapes_and_zero_map() {
        let arch = Architecture::encoder(6, &[8], 3);
        let zero = MlpModel::zeroed(&arch).unwrap();
        let mut tape = Tape::new();
        let b = zero.bind(&mut tape, false);
        let x = tape.constant(Tensor::full(&[4, 6], 1.0));
        let out = zero.encoder_forward(&mut tape, &b, x).unwrap();
        assert_eq!(tape.value(out.mu).shape(), &[4, 3]);
        assert!(tape.value(out.mu).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(out.log_var).data().iter().all(|&v| v == 0.0));

        let enc = MlpModel::new(&arch, &mut Rng::new(2)).unwrap();
        let mut tape = Tape::new();
        let b = enc.bind(&mut tape, false);
        let rows: Vec<Vec<f64>> = vec![vec![1.0; 6], vec![-1.0; 6]];
        let x = tape.constant(Tensor::from_rows(&rows).unwrap());
        let out = enc.encoder_forward(&mut tape, &b, x).unwrap();
        assert!(tape.value(out.mu).all_finite());
        assert!(tape.value(out.log_var).data().iter().all(|v| v.exp() > 0.0));
    }

    #[test]
    fn reparameterize_limits() {
        let mut tape = Tape::new();
        let mu = tape.param(Tensor::from_rows(&[vec![0.3, -0.7]]).unwrap());
        let lv = tape.param(Tensor::full(&[1, 2], -60.0));
        let z = reparameterize(&mut tape, EncoderOutput { mu, log_var: lv }, &mut Rng::new(5)).unwrap();
        for (a, b) in tape.value(z).data().iter().zip([0.3, -0.7]) {
            assert!((a - b).abs() < 1e-10);
        }

        let mut tape = Tape::new();
        let mu = tape.param(Tensor::zeros(&[2, 2]));
        let lv = tape.param(Tensor::zeros(&[2, 2]));
        let eps = gaussian_sample(&mut Rng::new(6), &[2, 2]).unwrap();
        let z = reparameterize_with(&mut tape, EncoderOutput { mu, log_var: lv }, eps.clone()).unwrap();
        assert_eq!(tape.value(z).data(), eps.data());
        let s = tape.sum(z).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(mu).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn frozen_parameters_bind_as_constants() {
        let mut m = MlpModel::new(&blob_teacher_arch(), &mut Rng::new(3)).unwrap();
        m.set_frozen(true);
        assert!(m.is_frozen());
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, true);
        let x = tape.param(Tensor::ones(&[2, 4]));
        let out = m.classifier_forward(&mut tape, &b, x).unwrap();
        let l = tape.sum(out.logits).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(x).is_some());
        m.collect_grads(&tape, &b).unwrap();
        assert!(m.params().all(|p| p.grad.is_none()));
    }
}
