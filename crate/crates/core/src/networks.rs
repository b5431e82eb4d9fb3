//! Online/target network pair.
//!
//! The online side is an encoder `f` followed by a projector `h`; the target
//! side (`g`, `q`) has the same architecture and tracks the online weights by
//! exponential moving average. Target weights enter the tape as constants and
//! their outputs pass through `stop_gradient`, so they never receive gradient.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::tensor::{matmul_raw, relu_value, Gradients, Tape, Tensor, Var};

/// Architecture of the encoder and projector MLPs.
///
/// Each width list is `[input, hidden.., output]`; hidden layers use ReLU and
/// the final layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub encoder: Vec<usize>,
    pub projector: Vec<usize>,
    pub normalize_embeddings: bool,
}

impl NetworkSpec {
    pub fn new(encoder: Vec<usize>, projector: Vec<usize>) -> Self {
        NetworkSpec {
            encoder,
            projector,
            normalize_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, widths) in [("encoder", &self.encoder), ("projector", &self.projector)] {
            if widths.len() < 2 {
                return Err(Error::Config(format!("{name} needs at least one layer")));
            }
            if widths.contains(&0) {
                return Err(Error::Config(format!("{name} has a zero-width layer: {widths:?}")));
            }
        }
        if self.encoder.last() != self.projector.first() {
            return Err(Error::Config(format!(
                "projector input {} does not match encoder output {}",
                self.projector[0],
                self.encoder[self.encoder.len() - 1]
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.encoder[0]
    }

    pub fn representation_width(&self) -> usize {
        self.encoder[self.encoder.len() - 1]
    }

    pub fn embedding_width(&self) -> usize {
        self.projector[self.projector.len() - 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[fan_in × fan_out]`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    fn init(widths: &[usize], rng: &mut rng::Rng) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = |n: usize| -> Vec<f64> {
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                };
                let weight = Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out))
                    .expect("validated widths");
                let bias = Tensor::vector(draw(fan_out));
                Linear { weight, bias }
            })
            .collect();
        Mlp { layers }
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    fn forward_tape(tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let n_layers = params.len() / 2;
        let mut h = x;
        for (i, wb) in params.chunks_exact(2).enumerate() {
            h = tape.matmul(h, wb[0])?;
            h = tape.add_row(h, wb[1])?;
            if i + 1 < n_layers {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    fn forward_value(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let (k, n) = (layer.weight.shape()[0], layer.weight.shape()[1]);
            h = matmul_raw(&h, layer.weight.data(), rows, k, n);
            let last = i + 1 == self.layers.len();
            for row in h.chunks_exact_mut(n) {
                for (v, b) in row.iter_mut().zip(layer.bias.data()) {
                    *v += b;
                    if !last {
                        *v = relu_value(*v);
                    }
                }
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkPair {
    spec: NetworkSpec,
    pub online_encoder: Mlp,
    pub online_projector: Mlp,
    pub target_encoder: Mlp,
    pub target_projector: Mlp,
    gamma: f64,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("EMA coefficient {gamma} outside [0, 1]")));
    }
    Ok(())
}

impl NetworkPair {
    /// Online weights ~ U(±1/√fan_in); target starts as an exact copy.
    pub fn init(spec: NetworkSpec, gamma: f64, seed: u64) -> Result<Self> {
        spec.validate()?;
        check_gamma(gamma)?;
        let mut rng = rng::stream(seed, Purpose::Init, 0, 0);
        let online_encoder = Mlp::init(&spec.encoder, &mut rng);
        let online_projector = Mlp::init(&spec.projector, &mut rng);
        Ok(NetworkPair {
            target_encoder: online_encoder.clone(),
            target_projector: online_projector.clone(),
            online_encoder,
            online_projector,
            spec,
            gamma,
        })
    }

    /// Reassembles a pair from raw parameter lists in declaration order.
    pub fn from_params(
        spec: NetworkSpec,
        gamma: f64,
        online: Vec<Tensor>,
        target: Vec<Tensor>,
    ) -> Result<Self> {
        let mut net = Self::init(spec, gamma, 0)?;
        for (side, values) in [(true, online), (false, target)] {
            let slots: Vec<&mut Tensor> = if side {
                net.online_params_mut()
            } else {
                net.target_params_mut()
            };
            if slots.len() != values.len() {
                return Err(Error::Format(format!(
                    "expected {} parameter tensors, found {}",
                    slots.len(),
                    values.len()
                )));
            }
            for (slot, v) in slots.into_iter().zip(values) {
                if slot.shape() != v.shape() {
                    return Err(Error::dim("from_params", slot.shape(), v.shape()));
                }
                *slot = v;
            }
        }
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn set_gamma(&mut self, gamma: f64) -> Result<()> {
        check_gamma(gamma)?;
        self.gamma = gamma;
        Ok(())
    }

    /// Online parameters in declaration order: encoder layers (W, b), then projector.
    pub fn online_params(&self) -> Vec<&Tensor> {
        self.online_encoder
            .params()
            .chain(self.online_projector.params())
            .collect()
    }

    pub fn online_params_mut(&mut self) -> Vec<&mut Tensor> {
        self.online_encoder
            .params_mut()
            .chain(self.online_projector.params_mut())
            .collect()
    }

    pub fn target_params(&self) -> Vec<&Tensor> {
        self.target_encoder
            .params()
            .chain(self.target_projector.params())
            .collect()
    }

    pub fn target_params_mut(&mut self) -> Vec<&mut Tensor> {
        self.target_encoder
            .params_mut()
            .chain(self.target_projector.params_mut())
            .collect()
    }

    pub fn num_online_params(&self) -> usize {
        self.online_params().iter().map(|t| t.numel()).sum()
    }

    /// `target ← γ·target + (1−γ)·online`, elementwise.
    pub fn ema_update(&mut self) -> Result<()> {
        check_gamma(self.gamma)?;
        let gamma = self.gamma;
        let online: Vec<Tensor> = self.online_params().into_iter().cloned().collect();
        for (t, o) in self.target_params_mut().into_iter().zip(&online) {
            for (tv, ov) in t.data_mut().iter_mut().zip(o.data()) {
                *tv = gamma * *tv + (1.0 - gamma) * ov;
            }
        }
        Ok(())
    }

    /// Registers the online weights as trainable leaves and the target
    /// weights as constants on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundNetwork {
        let online = self
            .online_params()
            .into_iter()
            .map(|p| tape.param(p.clone()))
            .collect();
        let target = self
            .target_params()
            .into_iter()
            .map(|p| tape.constant(p.clone()))
            .collect();
        BoundNetwork {
            online,
            target,
            encoder_params: 2 * (self.spec.encoder.len() - 1),
            input_width: self.spec.input_width(),
            normalize: self.spec.normalize_embeddings,
        }
    }

    /// Encoder output `f(x)` for each row of `x` (`[m × input]`), off-tape.
    /// This is the representation used by probes and analysis.
    pub fn represent(&self, x: &Tensor) -> Result<Tensor> {
        let (rows, w) = x.row_layout();
        if w != self.spec.input_width() || x.rank() > 2 {
            return Err(Error::dim("represent", x.shape(), &[rows, self.spec.input_width()]));
        }
        let out = self.online_encoder.forward_value(x.data(), rows);
        Tensor::matrix(rows, self.spec.representation_width(), out)
    }
}

/// Network weights registered on one tape.
#[derive(Clone, Debug)]
pub struct BoundNetwork {
    pub online: Vec<Var>,
    pub target: Vec<Var>,
    encoder_params: usize,
    input_width: usize,
    normalize: bool,
}

impl BoundNetwork {
    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.input_width {
            return Err(Error::dim("embed", s, &[s.first().copied().unwrap_or(1), self.input_width]));
        }
        Ok(())
    }

    fn embed(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let (enc, proj) = params.split_at(self.encoder_params);
        let r = Mlp::forward_tape(tape, enc, x)?;
        let z = Mlp::forward_tape(tape, proj, r)?;
        Ok(if self.normalize { tape.l2_normalize(z) } else { z })
    }

    /// `h(f(x))` row-wise, L2-normalized when `normalize_embeddings` is set. Gradients flow.
    pub fn embed_online(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.embed(tape, &self.online, x)
    }

    /// `q(g(x))` row-wise, detached.
    pub fn embed_target(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let z = self.embed(tape, &self.target, x)?;
        Ok(tape.stop_gradient(z))
    }

    /// Online parameter gradients in declaration order.
    pub fn online_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.online.iter().map(|&v| grads.wrt(v)).collect()
    }

    /// Target parameter gradients; all zero unless the detachment contract is broken.
    pub fn target_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.target.iter().map(|&v| grads.wrt(v)).collect()
    }
}
