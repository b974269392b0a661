//! Gated dense networks for the encoder and decoder.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flows::{FlowKind, FlowParams};
use crate::tensor_ad::{Tape, Tensor, Var};

pub const LOGVAR_CLAMP: (f64, f64) = (-7.0, 7.0);
pub const BERNOULLI_CLAMP: (f64, f64) = (1e-7, 1.0 - 1e-7);
pub const GAUSSIAN_LOGVAR_CLAMP: (f64, f64) = (-7.0, 2.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name '{name}'")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::Format(format!("unknown parameter '{name}'")))?;
        if self.tensors[i].shape() != value.shape() {
            return Err(Error::shape("set_param", self.tensors[i].shape(), value.shape()));
        }
        self.tensors[i] = value;
        Ok(())
    }
}

/// Uniform Glorot initialization on `[−a, a]`, `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_init(fan_in: usize, fan_out: usize, rng: &mut impl rand::Rng) -> Result<Tensor> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::invalid("glorot_init", format!("zero fan ({fan_in}, {fan_out})")));
    }
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a);
    Tensor::new(&[fan_in, fan_out], (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect())
}

/// Affine map `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Linear {
            w: store.add(format!("{name}.w"), glorot_init(fan_in, fan_out, rng)?)?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let h = tape.matmul(x, params[self.w.0])?;
        tape.add(h, params[self.b.0])
    }
}

/// `(x W_h + b_h) ⊙ sigmoid(x W_g + b_g)`.
#[derive(Clone, Debug)]
pub struct GatedDenseLayer {
    linear: Linear,
    gate: Linear,
}

impl GatedDenseLayer {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(GatedDenseLayer {
            linear: Linear {
                w: store.add(format!("{name}.wh"), glorot_init(fan_in, fan_out, rng)?)?,
                b: store.add(format!("{name}.bh"), Tensor::zeros(&[fan_out]))?,
            },
            gate: Linear {
                w: store.add(format!("{name}.wg"), glorot_init(fan_in, fan_out, rng)?)?,
                b: store.add(format!("{name}.bg"), Tensor::zeros(&[fan_out]))?,
            },
        })
    }

    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let h = self.linear.forward(tape, params, x)?;
        let g = self.gate.forward(tape, params, x)?;
        let g = tape.sigmoid(g)?;
        tape.mul(h, g)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Likelihood {
    /// Binary pixels.
    Bernoulli,
    /// Continuous pixels in `[0, 1]` with learned per-pixel log-variance.
    Gaussian,
}

impl Likelihood {
    pub fn name(&self) -> &'static str {
        match self {
            Likelihood::Bernoulli => "bernoulli",
            Likelihood::Gaussian => "gaussian",
        }
    }
}

impl fmt::Display for Likelihood {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Likelihood {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bernoulli" => Ok(Likelihood::Bernoulli),
            "gaussian" => Ok(Likelihood::Gaussian),
            other => Err(Error::Config(format!("unknown likelihood '{other}'"))),
        }
    }
}

/// Architecture of a model; everything needed to rebuild its parameter layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub data_dim: usize,
    pub latent: usize,
    pub hidden: usize,
    pub flow: FlowKind,
    pub likelihood: Likelihood,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("data and hidden dimensions must be positive".into()));
        }
        self.flow.validate_latent(self.latent)
    }
}

/// Encoder outputs on a tape.
#[derive(Clone, Debug)]
pub struct PosteriorParams {
    pub mu: Var,
    /// Clamped to [`LOGVAR_CLAMP`].
    pub logvar: Var,
    pub flow: FlowParams,
}

#[derive(Clone, Debug)]
pub struct EncoderNet {
    layers: [GatedDenseLayer; 2],
    mu: Linear,
    logvar: Linear,
    flow: Option<Linear>,
    gate: Option<Linear>,
}

/// Decoder outputs on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LikelihoodParams {
    /// Bernoulli probabilities or Gaussian means, `[B, D]`.
    pub mean: Var,
    /// Gaussian log-variances, `[B, D]`.
    pub logvar: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct DecoderNet {
    layers: [GatedDenseLayer; 2],
    mean: Linear,
    logvar: Option<Linear>,
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: ParamStore,
    encoder: EncoderNet,
    decoder: DecoderNet,
}

impl Model {
    /// Builds a Glorot-initialized model; the same seed gives identical weights.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, m, h) = (spec.data_dim, spec.latent, spec.hidden);
        let rng = &mut rng;

        let encoder = EncoderNet {
            layers: [
                GatedDenseLayer::new(&mut store, "enc.l1", d, h, rng)?,
                GatedDenseLayer::new(&mut store, "enc.l2", h, h, rng)?,
            ],
            mu: Linear::new(&mut store, "enc.mu", h, m, rng)?,
            logvar: Linear::new(&mut store, "enc.logvar", h, m, rng)?,
            flow: match spec.flow.param_width(m) {
                0 => None,
                p => Some(Linear::new(&mut store, "enc.flow", h, p, rng)?),
            },
            gate: match spec.flow.gate_width() {
                0 => None,
                k => Some(Linear::new(&mut store, "enc.gate", h, k, rng)?),
            },
        };
        let decoder = DecoderNet {
            layers: [
                GatedDenseLayer::new(&mut store, "dec.l1", m, h, rng)?,
                GatedDenseLayer::new(&mut store, "dec.l2", h, h, rng)?,
            ],
            mean: Linear::new(&mut store, "dec.mean", h, d, rng)?,
            logvar: match spec.likelihood {
                Likelihood::Bernoulli => None,
                Likelihood::Gaussian => Some(Linear::new(&mut store, "dec.logvar", h, d, rng)?),
            },
        };
        Ok(Model {
            spec,
            params: store,
            encoder,
            decoder,
        })
    }

    /// Rebuilds the layout for `spec` and fills it with `params`; names and
    /// shapes must match exactly.
    pub fn from_params(spec: ModelSpec, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(spec, 0)?;
        if params.names() != model.params.names() {
            return Err(Error::Format("parameter names do not match the model layout".into()));
        }
        for (name, t) in params.iter() {
            model.params.set(name, t.clone())?;
        }
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Registers all parameters on `tape`, in store order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.bind(tape)
    }

    /// Registers all parameters as constants (no gradient).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect()
    }

    pub fn encode(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<PosteriorParams> {
        let (_, d) = tape.value(x).dims2()?;
        if d != self.spec.data_dim {
            return Err(Error::shape("encode", tape.shape(x), &[0, self.spec.data_dim]));
        }
        let enc = &self.encoder;
        let mut h = x;
        for layer in &enc.layers {
            h = layer.forward(tape, params, h)?;
        }
        let mu = enc.mu.forward(tape, params, h)?;
        let logvar = enc.logvar.forward(tape, params, h)?;
        let logvar = tape.clamp(logvar, LOGVAR_CLAMP.0, LOGVAR_CLAMP.1)?;
        let head = enc.flow.as_ref().map(|l| l.forward(tape, params, h)).transpose()?;
        let gate = enc.gate.as_ref().map(|l| l.forward(tape, params, h)).transpose()?;
        if cfg!(debug_assertions) {
            for v in [Some(mu), Some(logvar), head, gate].into_iter().flatten() {
                tape.value(v).check_finite("encode")?;
            }
        }
        let flow = FlowParams::from_heads(tape, self.spec.flow, self.spec.latent, head, gate)?;
        Ok(PosteriorParams { mu, logvar, flow })
    }

    pub fn decode(&self, tape: &mut Tape, params: &[Var], z: Var) -> Result<LikelihoodParams> {
        let (_, m) = tape.value(z).dims2()?;
        if m != self.spec.latent {
            return Err(Error::shape("decode", tape.shape(z), &[0, self.spec.latent]));
        }
        let dec = &self.decoder;
        let mut h = z;
        for layer in &dec.layers {
            h = layer.forward(tape, params, h)?;
        }
        let logits = dec.mean.forward(tape, params, h)?;
        let mean = tape.sigmoid(logits)?;
        let out = match &dec.logvar {
            None => LikelihoodParams {
                mean: tape.clamp(mean, BERNOULLI_CLAMP.0, BERNOULLI_CLAMP.1)?,
                logvar: None,
            },
            Some(head) => {
                let lv = head.forward(tape, params, h)?;
                LikelihoodParams {
                    mean,
                    logvar: Some(tape.clamp(lv, GAUSSIAN_LOGVAR_CLAMP.0, GAUSSIAN_LOGVAR_CLAMP.1)?),
                }
            }
        };
        if cfg!(debug_assertions) {
            tape.value(out.mean).check_finite("decode")?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_ad::{grad_check, DEFAULT_STEP};
    use rand::Rng;

    fn spec(flow: FlowKind) -> ModelSpec {
        ModelSpec {
            data_dim: 784,
            latent: 40,
            hidden: 300,
            flow,
            likelihood: Likelihood::Bernoulli,
        }
    }

    #[test]
    fn glorot_bound_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = glorot_init(3, 3, &mut rng).unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 1.0));

        let a = glorot_init(5, 7, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = glorot_init(5, 7, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        assert!(glorot_init(0, 3, &mut rng).is_err());
    }

    #[test]
    fn glorot_mean_is_statistically_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = glorot_init(1000, 1000, &mut rng).unwrap();
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        // Var of U[−a, a] is a²/3
        let a = (6.0f64 / 2000.0).sqrt();
        let sigma = (a * a / 3.0 / n).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean}, sigma {sigma}");
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let model = Model::new(spec(FlowKind::CcLinIaf { components: 5 }), 0).unwrap();
        let encoder = 784 * 300 * 2 + 600 + 300 * 300 * 2 + 600 + 300 * 40 * 2 + 80 + 300 * 3900 + 3900 + 300 * 5 + 5;
        let decoder = 40 * 300 * 2 + 600 + 300 * 300 * 2 + 600 + 300 * 784 + 784;
        assert_eq!(model.params().num_scalars(), encoder + decoder);

        let names: std::collections::HashSet<_> = model.params().names().iter().collect();
        assert_eq!(names.len(), model.params().len());
    }

    #[test]
    fn encode_shapes_and_head_widths() {
        let model = Model::new(spec(FlowKind::CcLinIaf { components: 5 }), 2).unwrap();
        let mut tape = Tape::new();
        let p = model.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::full(&[1, 784], 1.0));
        let post = model.encode(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(post.mu), &[1, 40]);
        assert_eq!(tape.shape(post.logvar), &[1, 40]);
        match post.flow {
            FlowParams::CcLinIaf { entries, logits } => {
                assert_eq!(tape.shape(entries), &[1, 3900]);
                assert_eq!(tape.shape(logits), &[1, 5]);
            }
            other => panic!("unexpected {other:?}"),
        }

        let bad = tape.constant(Tensor::zeros(&[1, 783]));
        assert!(matches!(model.encode(&mut tape, &p, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn logvar_clamp_holds_for_random_inputs() {
        let mut small = spec(FlowKind::None);
        small.hidden = 32;
        let mut model = Model::new(small, 3).unwrap();
        // blow up the logvar head so the clamp is exercised
        let w = model.params().by_name("enc.logvar.w").unwrap().clone();
        let scaled = Tensor::new(w.shape(), w.data().iter().map(|v| v * 400.0).collect()).unwrap();
        model.params_mut().set("enc.logvar.w", scaled).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::new(&[1000, 784], (0..784_000).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let p = model.bind_frozen(&mut tape);
        let xv = tape.constant(x);
        let post = model.encode(&mut tape, &p, xv).unwrap();
        let lv = tape.value(post.logvar).data();
        assert!(lv.iter().all(|v| (-7.0..=7.0).contains(v)));
        assert!(lv.iter().any(|v| v.abs() == 7.0));
    }

    #[test]
    fn decode_shapes_and_ranges() {
        for likelihood in [Likelihood::Bernoulli, Likelihood::Gaussian] {
            let mut s = spec(FlowKind::None);
            s.likelihood = likelihood;
            let model = Model::new(s, 5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let z = Tensor::new(&[3, 40], (0..120).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
            let run = || {
                let mut tape = Tape::new();
                let p = model.bind_frozen(&mut tape);
                let zv = tape.constant(z.clone());
                let out = model.decode(&mut tape, &p, zv).unwrap();
                (
                    tape.value(out.mean).clone(),
                    out.logvar.map(|v| tape.value(v).clone()),
                )
            };
            let (mean, logvar) = run();
            assert_eq!(mean.shape(), &[3, 784]);
            assert!(mean.data().iter().all(|&v| v > 0.0 && v < 1.0));
            if likelihood == Likelihood::Bernoulli {
                assert!(mean.data().iter().all(|&v| (1e-7..=1.0 - 1e-7).contains(&v)));
            } else {
                let lv = logvar.as_ref().unwrap();
                assert!(lv.data().iter().all(|v| (-7.0..=2.0).contains(v)));
            }
            assert_eq!(run(), (mean, logvar));
        }
    }

    #[test]
    fn open_gate_reduces_to_linear_layer() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = GatedDenseLayer::new(&mut store, "l", 4, 3, &mut rng).unwrap();
        store.set("l.wg", Tensor::zeros(&[4, 3])).unwrap();
        store.set("l.bg", Tensor::full(&[3], 20.0)).unwrap();
        let x = Tensor::new(&[2, 4], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();

        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let gated = layer.forward(&mut tape, &p, xv).unwrap();
        let plain = layer.linear.forward(&mut tape, &p, xv).unwrap();
        for (a, b) in tape.value(gated).data().iter().zip(tape.value(plain).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn encoder_decoder_gradients() {
        let s = ModelSpec {
            data_dim: 5,
            latent: 3,
            hidden: 4,
            flow: FlowKind::CcLinIaf { components: 2 },
            likelihood: Likelihood::Gaussian,
        };
        let model = Model::new(s, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::new(&[2, 5], (0..10).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let report = grad_check(
            |t, p| {
                let xv = t.constant(x.clone());
                let post = model.encode(t, p, xv)?;
                let out = model.decode(t, p, post.mu)?;
                let a = t.sum(out.mean, None)?;
                let b = t.sum(out.logvar.unwrap(), None)?;
                let c = t.sum(post.logvar, None)?;
                let FlowParams::CcLinIaf { entries, logits } = post.flow else {
                    unreachable!()
                };
                let e = t.tanh(entries)?;
                let e = t.sum(e, None)?;
                let g = t.softmax(logits)?;
                let g = t.square(g)?;
                let g = t.sum(g, None)?;
                let s = t.add(a, b)?;
                let s = t.add(s, c)?;
                let s = t.add(s, e)?;
                t.add(s, g)
            },
            model.params().tensors(),
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn from_params_round_trip() {
        let s = ModelSpec {
            data_dim: 6,
            latent: 2,
            hidden: 3,
            flow: FlowKind::LinIaf,
            likelihood: Likelihood::Bernoulli,
        };
        let a = Model::new(s, 1).unwrap();
        let b = Model::from_params(s, a.params().clone()).unwrap();
        assert_eq!(a.params(), b.params());

        let other = Model::new(ModelSpec { flow: FlowKind::None, ..s }, 1).unwrap();
        assert!(Model::from_params(s, other.params().clone()).is_err());
    }
}
