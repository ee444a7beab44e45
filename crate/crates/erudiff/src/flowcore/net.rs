//! Conditional velocity network.
//!
//! A small feed-forward net mapping (x, sinusoidal time features, condition
//! embedding) to a 2D velocity. Parameters live in one flat `Vec<f64>` whose
//! layout matches the checkpoint format exactly: embedding rows first, then
//! for each linear layer its weights row-major followed by its biases.
//! Reverse-mode gradients are hand-rolled; `vjp` accumulates the
//! vector-Jacobian product for a given output cotangent.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use crate::corpus::{TokenId, Vec2};
use crate::error::{Error, Result};

/// Number of sinusoidal time features: sin/cos at frequencies pi, 2pi, 4pi.
pub const TIME_FEATURES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
}

impl Activation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hyper {
    pub vocab: u32,
    pub d_embed: u32,
    pub hidden: Vec<u32>,
    pub activation: Activation,
}

impl Hyper {
    pub fn new(vocab: u32, d_embed: u32, hidden: Vec<u32>) -> Self {
        Hyper {
            vocab,
            d_embed,
            hidden,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.d_embed == 0 {
            return Err(Error::invalid("vocab and d_embed must be >= 1"));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::invalid("zero-width hidden layer"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        2 + TIME_FEATURES + self.d_embed as usize
    }

    /// (fan_in, fan_out) of every linear layer, hidden layers then output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim();
        for &h in &self.hidden {
            dims.push((prev, h as usize));
            prev = h as usize;
        }
        dims.push((prev, 2));
        dims
    }

    pub fn embed_len(&self) -> usize {
        self.vocab as usize * self.d_embed as usize
    }

    pub fn param_count(&self) -> usize {
        self.embed_len()
            + self
                .layer_dims()
                .iter()
                .map(|(fi, fo)| fi * fo + fo)
                .sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hyper: Hyper,
    pub data: Vec<f64>,
}

/// Forward-pass activations retained for the backward pass.
pub struct Cache {
    cond: TokenId,
    /// acts[0] is the input feature vector; acts[l] the post-activation of
    /// hidden layer l; the final entry is the raw output.
    acts: Vec<Vec<f64>>,
}

pub fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    let p = std::f64::consts::PI * t;
    [
        p.sin(),
        p.cos(),
        (2.0 * p).sin(),
        (2.0 * p).cos(),
        (4.0 * p).sin(),
        (4.0 * p).cos(),
    ]
}

impl ModelParams {
    pub fn embed_row(&self, token: TokenId) -> Result<&[f64]> {
        if token >= self.hyper.vocab {
            return Err(Error::UnknownToken(token));
        }
        let d = self.hyper.d_embed as usize;
        let off = token as usize * d;
        Ok(&self.data[off..off + d])
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::new();
        let mut off = self.hyper.embed_len();
        for (fi, fo) in self.hyper.layer_dims() {
            offs.push(off);
            off += fi * fo + fo;
        }
        offs
    }

    fn features(&self, x: Vec2, t: f64, cond: TokenId) -> Result<Vec<f64>> {
        let mut feat = Vec::with_capacity(self.hyper.input_dim());
        feat.push(x[0]);
        feat.push(x[1]);
        feat.extend_from_slice(&time_features(t));
        feat.extend_from_slice(self.embed_row(cond)?);
        Ok(feat)
    }

    pub fn forward(&self, x: Vec2, t: f64, cond: TokenId) -> Result<Vec2> {
        let (v, _) = self.forward_cached(x, t, cond)?;
        Ok(v)
    }

    pub fn forward_cached(&self, x: Vec2, t: f64, cond: TokenId) -> Result<(Vec2, Cache)> {
        let dims = self.hyper.layer_dims();
        let offs = self.layer_offsets();
        let mut acts = Vec::with_capacity(dims.len() + 1);
        acts.push(self.features(x, t, cond)?);

        for (l, &(fi, fo)) in dims.iter().enumerate() {
            let w = &self.data[offs[l]..offs[l] + fi * fo];
            let b = &self.data[offs[l] + fi * fo..offs[l] + fi * fo + fo];
            let input = acts.last().unwrap();
            let mut out = Vec::with_capacity(fo);
            for o in 0..fo {
                let row = &w[o * fi..(o + 1) * fi];
                let mut s = b[o];
                for (wi, xi) in row.iter().zip(input.iter()) {
                    s += wi * xi;
                }
                out.push(if l + 1 < dims.len() { s.tanh() } else { s });
            }
            acts.push(out);
        }

        let out = acts.last().unwrap();
        let v = [out[0], out[1]];
        Ok((v, Cache { cond, acts }))
    }

    /// Accumulates d(cot . v)/d(params) into `grad`, which must have
    /// `param_count` entries.
    pub fn vjp(&self, cache: &Cache, cot: Vec2, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.hyper.param_count());
        let dims = self.hyper.layer_dims();
        let offs = self.layer_offsets();

        let mut delta = vec![cot[0], cot[1]];
        for l in (0..dims.len()).rev() {
            let (fi, fo) = dims[l];
            let w = &self.data[offs[l]..offs[l] + fi * fo];
            let input = &cache.acts[l];
            let (gw, rest) = grad[offs[l]..offs[l] + fi * fo + fo].split_at_mut(fi * fo);

            let mut d_input = vec![0.0; fi];
            for o in 0..fo {
                let d = delta[o];
                rest[o] += d; // bias
                let wrow = &w[o * fi..(o + 1) * fi];
                let grow = &mut gw[o * fi..(o + 1) * fi];
                for i in 0..fi {
                    grow[i] += d * input[i];
                    d_input[i] += d * wrow[i];
                }
            }
            if l > 0 {
                // through tanh of the previous hidden layer
                let a = &cache.acts[l];
                debug_assert_eq!(a.len(), fi);
                // acts[l] is the post-activation that fed layer l
                for i in 0..fi {
                    d_input[i] *= 1.0 - a[i] * a[i];
                }
                delta = d_input;
            } else {
                // input layer: route the embedding slice into the embed table
                let d = self.hyper.d_embed as usize;
                let off = cache.cond as usize * d;
                for i in 0..d {
                    grad[off + i] += d_input[2 + TIME_FEATURES + i];
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Deterministic initialization: embeddings uniform in [-1, 1], weights
/// uniform Xavier, biases zero.
pub fn init_params(hyper: &Hyper, seed: u64) -> Result<ModelParams> {
    hyper.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(hyper.param_count());
    for _ in 0..hyper.embed_len() {
        data.push(rng.gen_range(-1.0..1.0));
    }
    for (fi, fo) in hyper.layer_dims() {
        let a = (6.0 / (fi + fo) as f64).sqrt();
        for _ in 0..fi * fo {
            data.push(rng.gen_range(-a..a));
        }
        data.extend(std::iter::repeat(0.0).take(fo));
    }
    Ok(ModelParams {
        hyper: hyper.clone(),
        data,
    })
}
