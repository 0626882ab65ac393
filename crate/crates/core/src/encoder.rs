//! Query and momentum-key MLP encoders.
//!
//! Architecture: `d_in → h₁ → ReLU → h₂ → … → projection → d`, with one
//! ReLU between consecutive hidden layers and unit-normalised output rows.
//! The key encoder is never differentiated; it follows the query encoder
//! through [`EncoderPair::momentum_update`] only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.999;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_in: usize,
    pub hidden: Vec<usize>,
    pub d_out: usize,
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_in: 32,
            hidden: vec![64, 64],
            d_out: 32,
            init_seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 {
            return Err(Error::config("encoder.d_in", "must be positive"));
        }
        if self.d_out == 0 {
            return Err(Error::config("encoder.d_out", "must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("encoder.hidden", "widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `fan_in × fan_out`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<Linear>,
    /// `last_width × d_out`, no bias.
    pub projection: Tensor,
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("shape by construction")
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut width = cfg.d_in;
        let mut layers = Vec::with_capacity(cfg.hidden.len());
        for &h in &cfg.hidden {
            layers.push(Linear {
                weight: glorot(&mut rng, width, h),
                bias: Tensor::zeros(&[h]),
            });
            width = h;
        }
        let projection = glorot(&mut rng, width, cfg.d_out);
        Self { layers, projection }
    }

    pub fn d_in(&self) -> usize {
        self.layers
            .first()
            .map_or(self.projection.rows(), |l| l.weight.rows())
    }

    pub fn d_out(&self) -> usize {
        self.projection.cols()
    }

    /// Every parameter tensor in a fixed order: `(W, b)` per layer, then the
    /// projection.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.projection);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.projection);
        out
    }

    /// Rebuilds parameters from tensors in [`Self::tensors`] order.
    pub fn from_tensors(mut tensors: Vec<Tensor>) -> Result<Self> {
        if tensors.len() % 2 != 1 {
            return Err(Error::Format(format!(
                "encoder needs an odd tensor count, got {}",
                tensors.len()
            )));
        }
        let projection = tensors.pop().expect("odd count is non-empty");
        let mut layers = Vec::with_capacity(tensors.len() / 2);
        let mut it = tensors.into_iter();
        while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
            layers.push(Linear { weight, bias });
        }
        let params = Self { layers, projection };
        params.check_shapes()?;
        Ok(params)
    }

    fn check_shapes(&self) -> Result<()> {
        let mut width = None;
        for (i, l) in self.layers.iter().enumerate() {
            let (fi, fo) = l.weight.dims2()?;
            if width.is_some_and(|w| w != fi) || l.bias.shape() != [fo] {
                return Err(Error::Format(format!("layer {i} has inconsistent shapes")));
            }
            width = Some(fo);
        }
        let (pi, _) = self.projection.dims2()?;
        if width.is_some_and(|w| w != pi) {
            return Err(Error::Format("projection width mismatch".into()));
        }
        Ok(())
    }

    pub fn same_shapes(&self, other: &EncoderParams) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.shape() == y.shape())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, w) = x.dims2()?;
        if w != self.d_in() {
            return Err(Error::dim(
                "encoder",
                format!("input width {w}, encoder expects {}", self.d_in()),
            ));
        }
        Ok(())
    }

    /// Forward pass with no tape.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind_constant(&tape);
        Ok(bound.forward(&tape.constant(x.clone()))?.detach())
    }

    /// Registers every parameter as a differentiable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundEncoder<'t> {
        BoundEncoder {
            params: self.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect(),
            d_in: self.d_in(),
        }
    }

    fn bind_constant<'t>(&self, tape: &'t Tape) -> BoundEncoder<'t> {
        BoundEncoder {
            params: self.tensors().into_iter().map(|t| tape.constant(t.clone())).collect(),
            d_in: self.d_in(),
        }
    }
}

/// Encoder parameters recorded on a tape.
pub struct BoundEncoder<'t> {
    params: Vec<Var<'t>>,
    d_in: usize,
}

impl<'t> BoundEncoder<'t> {
    pub fn params(&self) -> &[Var<'t>] {
        &self.params
    }

    pub fn forward(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let (_, w) = x.value().dims2()?;
        if w != self.d_in {
            return Err(Error::dim(
                "encoder",
                format!("input width {w}, encoder expects {}", self.d_in),
            ));
        }
        let n_layers = (self.params.len() - 1) / 2;
        let mut h = x.clone();
        for i in 0..n_layers {
            h = h.matmul(&self.params[2 * i])?.add_row(&self.params[2 * i + 1])?;
            if i + 1 < n_layers {
                h = h.relu();
            }
        }
        h.matmul(&self.params[2 * n_layers])?.l2_normalize_rows()
    }

    /// Per-parameter gradients in [`EncoderParams::tensors`] order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.params.iter().map(|p| grads.wrt(p)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderPair {
    pub query: EncoderParams,
    pub key: EncoderParams,
    pub momentum: f64,
}

impl EncoderPair {
    pub fn new(cfg: &EncoderConfig, momentum: f64) -> Result<Self> {
        cfg.validate()?;
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::config("momentum_encoder", "must lie in [0, 1]"));
        }
        let query = EncoderParams::init(cfg);
        Ok(Self {
            key: query.clone(),
            query,
            momentum,
        })
    }

    pub fn from_parts(query: EncoderParams, key: EncoderParams, momentum: f64) -> Result<Self> {
        if !query.same_shapes(&key) {
            return Err(Error::Format("query and key encoders differ in shape".into()));
        }
        Ok(Self {
            query,
            key,
            momentum,
        })
    }

    /// Query embeddings attached to `bound`'s tape.
    pub fn forward_query<'t>(&self, bound: &BoundEncoder<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        bound.forward(x)
    }

    /// Key embeddings as plain values: no tape, no gradient.
    pub fn forward_key(&self, x: &Tensor) -> Result<Tensor> {
        self.key.check_input(x)?;
        self.key.embed(x)
    }

    /// `θ_k ← m·θ_k + (1 − m)·θ_q`.
    pub fn momentum_update(&mut self) {
        let m = self.momentum;
        for (k, q) in self.key.tensors_mut().into_iter().zip(self.query.tensors()) {
            k.data_mut()
                .iter_mut()
                .zip(q.data())
                .for_each(|(kv, qv)| *kv = m * *kv + (1.0 - m) * qv);
        }
    }
}
