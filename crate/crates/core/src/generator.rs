//! Autoregressive caption generation and input normalization.

use alloc::string::String;
use alloc::vec::Vec;
use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::Captioner;
use crate::rng;
use crate::tokenizer::Tokenizer;
use crate::types::Image;

pub const MAX_TOKENS: usize = 50;

/// Per-channel `(x − mean) / std` applied to `[0, 1]` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelNorm {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl PixelNorm {
    pub const REFERENCE: PixelNorm = PixelNorm { mean: [0.5; 3], std: [0.5; 3] };

    pub fn apply(&self, img: &Image) -> Image {
        let mut out = img.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            let c = i % 3;
            *v = (*v - self.mean[c]) / self.std[c];
        }
        out
    }
}

impl Default for PixelNorm {
    fn default() -> Self {
        Self::REFERENCE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub temperature: f64,
    pub deterministic: bool,
    pub max_tokens: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self { temperature: 1.0, deterministic: true, max_tokens: MAX_TOKENS }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub caption: String,
    /// Generated ids after BOS, including the terminating EOS if one was
    /// produced.
    pub tokens: Vec<u32>,
    /// Next-token logits at each step.
    pub logits: Vec<Vec<f64>>,
    /// Mean negative log-likelihood of `tokens` under the model at
    /// temperature 1.
    pub nll: f64,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn log_softmax_at(v: &[f64], i: usize) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = v.iter().map(|x| libm::exp(x - max)).sum();
    v[i] - max - libm::log(z)
}

fn sample(v: &[f64], temperature: f64, r: &mut dyn RngCore) -> usize {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = v.iter().map(|x| libm::exp((x - max) / temperature)).collect();
    let z: f64 = w.iter().sum();
    let mut u = rng::uniform(r) * z;
    for (i, &wi) in w.iter().enumerate() {
        if u < wi {
            return i;
        }
        u -= wi;
    }
    argmax(v)
}

/// Captions one normalized image. No prompt input is consumed. The token
/// budget is also capped so the sequence fits the model's context.
pub fn generate(
    model: &Captioner,
    tokenizer: &dyn Tokenizer,
    image: &Image,
    opts: &GenerateOptions,
    rng: &mut dyn RngCore,
) -> Result<Generation> {
    if !opts.deterministic && !(opts.temperature > 0.0) {
        return Err(Error::Temperature(opts.temperature));
    }
    if tokenizer.vocab_size() != model.config.vocab_size {
        return Err(Error::DimensionMismatch { expected: model.config.vocab_size, got: tokenizer.vocab_size() });
    }
    let budget = opts.max_tokens.min(model.config.max_len - 1);
    let memory = {
        let mut t = Tape::new(&model.params);
        let (feats, _) = model.encode_images(&mut t, core::slice::from_ref(image))?;
        t.value(feats).clone()
    };
    let eos = tokenizer.eos_id();
    let mut seq = alloc::vec![tokenizer.bos_id()];
    let mut logits = Vec::new();
    let mut nll = 0.0;
    for _ in 0..budget {
        let mut t = Tape::new(&model.params);
        let mem = t.constant(memory.clone());
        let out = model.decode(&mut t, mem, core::slice::from_ref(&seq))?;
        let all = t.value(out);
        let last = all.row(all.rows - 1).to_vec();
        let next = if opts.deterministic { argmax(&last) } else { sample(&last, opts.temperature, rng) };
        nll -= log_softmax_at(&last, next);
        logits.push(last);
        seq.push(next as u32);
        if next as u32 == eos {
            break;
        }
    }
    let tokens = seq[1..].to_vec();
    let caption = tokenizer.decode(&tokens)?;
    let nll = if tokens.is_empty() { 0.0 } else { nll / tokens.len() as f64 };
    Ok(Generation { caption, tokens, logits, nll })
}

/// Greedy captions for a batch of `[0, 1]` images.
pub fn caption_images(model: &Captioner, tokenizer: &dyn Tokenizer, images: &[&Image], norm: &PixelNorm, max_tokens: usize) -> Result<Vec<String>> {
    let opts = GenerateOptions { deterministic: true, max_tokens, ..GenerateOptions::default() };
    let mut r = rng::seeded(&[0]);
    images.iter().map(|img| generate(model, tokenizer, &norm.apply(img), &opts, &mut r).map(|g| g.caption)).collect()
}
