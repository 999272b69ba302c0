//! Tiny transformer captioner and frozen text encoder.
//!
//! The captioner is a patch encoder (pre-LN blocks) feeding a causal decoder
//! with cross-attention. The image embedding is the mean of the encoder's
//! patch features followed by a linear projection into the shared space. The
//! text encoder has the same block shape without causality and is never
//! updated by training.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnLayout, Mat, NodeId, ParamId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::rng::{self, ChaCha8Rng};
use crate::types::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FreezeFlags {
    pub vision: bool,
    pub decoder: bool,
    pub projection: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub text_layers: usize,
    pub mlp_ratio: usize,
    pub max_len: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub init_std: f64,
    #[serde(default)]
    pub freeze: FreezeFlags,
}

impl ModelConfig {
    pub fn reference(vocab_size: usize) -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            width: 128,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            text_layers: 2,
            mlp_ratio: 4,
            max_len: 64,
            embed_dim: 128,
            vocab_size,
            init_std: 0.02,
            freeze: FreezeFlags::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad("width must be a positive multiple of heads");
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad("image_size must be a positive multiple of patch_size");
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 || self.text_layers == 0 {
            return bad("layer counts must be >= 1");
        }
        if self.mlp_ratio == 0 || self.max_len < 2 || self.embed_dim == 0 || self.vocab_size < 4 {
            return bad("mlp_ratio, max_len, embed_dim or vocab_size out of range");
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be positive");
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Vision,
    Decoder,
    Projection,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    ln1: Norm,
    attn: Attn,
    cross: Option<(Norm, Attn)>,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    std: f64,
}

impl Init<'_> {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let data = (0..rows * cols).map(|_| rng::normal(&mut self.rng) * std).collect();
        self.store.add(name, Mat { rows, cols, data })
    }

    fn fill(&mut self, name: String, cols: usize, v: f64) -> ParamId {
        self.store.add(name, Mat { rows: 1, cols, data: vec![v; cols] })
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize) -> Linear {
        let std = self.std;
        Linear { w: self.normal(format!("{prefix}.w"), din, dout, std), b: self.fill(format!("{prefix}.b"), dout, 0.0) }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm { g: self.fill(format!("{prefix}.g"), d, 1.0), b: self.fill(format!("{prefix}.b"), d, 0.0) }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Attn {
        Attn {
            q: self.linear(&format!("{prefix}.q"), d, d),
            k: self.linear(&format!("{prefix}.k"), d, d),
            v: self.linear(&format!("{prefix}.v"), d, d),
            o: self.linear(&format!("{prefix}.o"), d, d),
        }
    }

    fn block(&mut self, prefix: &str, d: usize, hidden: usize, cross: bool) -> Block {
        let ln1 = self.norm(&format!("{prefix}.ln1"), d);
        let attn = self.attn(&format!("{prefix}.attn"), d);
        let cross = cross.then(|| (self.norm(&format!("{prefix}.ln_cross"), d), self.attn(&format!("{prefix}.cross"), d)));
        let ln2 = self.norm(&format!("{prefix}.ln2"), d);
        let fc1 = self.linear(&format!("{prefix}.fc1"), d, hidden);
        let fc2 = self.linear(&format!("{prefix}.fc2"), hidden, d);
        Block { ln1, attn, cross, ln2, fc1, fc2 }
    }
}

fn linear(t: &mut Tape, x: NodeId, l: Linear) -> Result<NodeId> {
    let w = t.param(l.w);
    let b = t.param(l.b);
    let y = t.matmul(x, w)?;
    t.add_bias(y, b)
}

fn norm(t: &mut Tape, x: NodeId, n: Norm) -> Result<NodeId> {
    let g = t.param(n.g);
    let b = t.param(n.b);
    t.layer_norm(x, g, b)
}

fn attention(t: &mut Tape, x: NodeId, mem: NodeId, a: Attn, layout: AttnLayout) -> Result<NodeId> {
    let q = linear(t, x, a.q)?;
    let k = linear(t, mem, a.k)?;
    let v = linear(t, mem, a.v)?;
    let h = t.attention(q, k, v, layout)?;
    linear(t, h, a.o)
}

struct Ctx {
    batch: usize,
    len: usize,
    heads: usize,
    causal: bool,
    /// `(memory node, memory length)` for cross-attention.
    memory: Option<(NodeId, usize)>,
}

fn block(t: &mut Tape, x: NodeId, b: &Block, ctx: &Ctx) -> Result<NodeId> {
    let h = norm(t, x, b.ln1)?;
    let self_layout = AttnLayout { batch: ctx.batch, q_len: ctx.len, k_len: ctx.len, heads: ctx.heads, causal: ctx.causal };
    let a = attention(t, h, h, b.attn, self_layout)?;
    let mut x = t.add(x, a)?;
    if let Some((ln, cross)) = b.cross {
        let (mem, mem_len) = ctx.memory.ok_or_else(|| Error::Shape("cross-attention without memory".into()))?;
        let h = norm(t, x, ln)?;
        let layout = AttnLayout { batch: ctx.batch, q_len: ctx.len, k_len: mem_len, heads: ctx.heads, causal: false };
        let a = attention(t, h, mem, cross, layout)?;
        x = t.add(x, a)?;
    }
    let h = norm(t, x, b.ln2)?;
    let h = linear(t, h, b.fc1)?;
    let h = t.gelu(h);
    let h = linear(t, h, b.fc2)?;
    t.add(x, h)
}

#[derive(Debug, Clone)]
struct CaptionerIds {
    patch: Linear,
    vis_pos: ParamId,
    vis_blocks: Vec<Block>,
    vis_ln: Norm,
    proj: Linear,
    tok: ParamId,
    dec_pos: ParamId,
    dec_blocks: Vec<Block>,
    dec_ln: Norm,
    head: Linear,
}

/// Node handles produced by a captioner forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub ce: NodeId,
    /// Projected image embedding, before normalization.
    pub e_img: NodeId,
    pub logits: NodeId,
}

#[derive(Debug, Clone)]
pub struct Captioner {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: CaptionerIds,
    components: Vec<Component>,
}

/// Names and shapes of the parameters used at inference, plus the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureManifest {
    pub config: ModelConfig,
    pub parameters: Vec<(String, Vec<usize>)>,
}

impl Captioner {
    pub fn component(&self, p: ParamId) -> Component {
        self.components[p]
    }

    pub fn is_trainable(&self, p: ParamId) -> bool {
        let f = self.config.freeze;
        match self.components[p] {
            Component::Vision => !f.vision,
            Component::Decoder => !f.decoder,
            Component::Projection => !f.projection,
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn architecture_manifest(&self) -> ArchitectureManifest {
        let mut config = self.config.clone();
        config.freeze = FreezeFlags::default();
        let parameters = self.params.iter().map(|(n, m)| (n.to_string(), vec![m.rows, m.cols])).collect();
        ArchitectureManifest { config, parameters }
    }

    /// Flattens each image into patch rows, `(n·P) × (p·p·3)`.
    pub fn patchify(&self, images: &[Image]) -> Result<Mat> {
        let c = &self.config;
        let (s, p) = (c.image_size, c.patch_size);
        let g = s / p;
        let mut out = Mat::zeros(images.len() * c.num_patches(), c.patch_dim());
        for (i, img) in images.iter().enumerate() {
            if img.height != s || img.width != s || img.data.len() != s * s * 3 {
                return Err(Error::Shape(format!("image {}x{} but model expects {s}x{s}", img.height, img.width)));
            }
            for gy in 0..g {
                for gx in 0..g {
                    let row = out.row_mut(i * g * g + gy * g + gx);
                    let mut k = 0;
                    for y in 0..p {
                        let base = ((gy * p + y) * s + gx * p) * 3;
                        for v in &img.data[base..base + p * 3] {
                            row[k] = f64::from(*v);
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Returns `(patch features, projected image embedding)`.
    pub fn encode_images(&self, t: &mut Tape, images: &[Image]) -> Result<(NodeId, NodeId)> {
        if images.is_empty() {
            return Err(Error::Empty("image batch"));
        }
        let ids = &self.ids;
        let n_p = self.config.num_patches();
        let x = t.constant(self.patchify(images)?);
        let x = linear(t, x, ids.patch)?;
        let pos_table = t.param(ids.vis_pos);
        let pos = t.gather(pos_table, (0..images.len() * n_p).map(|r| r % n_p).collect())?;
        let mut x = t.add(x, pos)?;
        let ctx = Ctx { batch: images.len(), len: n_p, heads: self.config.heads, causal: false, memory: None };
        for b in &ids.vis_blocks {
            x = block(t, x, b, &ctx)?;
        }
        let feats = norm(t, x, ids.vis_ln)?;
        let pooled = t.mean_pool(feats, n_p)?;
        let e_img = linear(t, pooled, ids.proj)?;
        Ok((feats, e_img))
    }

    /// Next-token logits `(n·L) × V` for equal-length id rows.
    pub fn decode(&self, t: &mut Tape, memory: NodeId, input_ids: &[Vec<u32>]) -> Result<NodeId> {
        let n = input_ids.len();
        let len = input_ids.first().map_or(0, Vec::len);
        if n == 0 || len == 0 {
            return Err(Error::Empty("token batch"));
        }
        if len > self.config.max_len {
            return Err(Error::Shape(format!("sequence length {len} exceeds max_len {}", self.config.max_len)));
        }
        let mut flat = Vec::with_capacity(n * len);
        for row in input_ids {
            if row.len() != len {
                return Err(Error::Shape("ragged input_ids".into()));
            }
            for &id in row {
                if id as usize >= self.config.vocab_size {
                    return Err(Error::TokenOutOfRange { id, size: self.config.vocab_size });
                }
                flat.push(id as usize);
            }
        }
        let mem_rows = t.value(memory).rows;
        if mem_rows % n != 0 {
            return Err(Error::Shape("memory rows not divisible by batch".into()));
        }
        let ids = &self.ids;
        let tok = t.param(ids.tok);
        let x = t.gather(tok, flat)?;
        let pos_table = t.param(ids.dec_pos);
        let pos = t.gather(pos_table, (0..n * len).map(|r| r % len).collect())?;
        let mut x = t.add(x, pos)?;
        let ctx = Ctx { batch: n, len, heads: self.config.heads, causal: true, memory: Some((memory, mem_rows / n)) };
        for b in &ids.dec_blocks {
            x = block(t, x, b, &ctx)?;
        }
        let x = norm(t, x, ids.dec_ln)?;
        linear(t, x, ids.head)
    }

    /// Records the full forward pass; `labels` rows align with `input_ids`.
    pub fn forward_tape(
        &self,
        t: &mut Tape,
        images: &[Image],
        input_ids: &[Vec<u32>],
        labels: &[Vec<Option<usize>>],
    ) -> Result<ForwardNodes> {
        if images.len() != input_ids.len() || labels.len() != input_ids.len() {
            return Err(Error::Shape("batch sizes differ".into()));
        }
        let (feats, e_img) = self.encode_images(t, images)?;
        let logits = self.decode(t, feats, input_ids)?;
        let mut flat = Vec::with_capacity(t.value(logits).rows);
        for (l, ids) in labels.iter().zip(input_ids) {
            if l.len() != ids.len() {
                return Err(Error::Shape("labels and input_ids lengths differ".into()));
            }
            flat.extend_from_slice(l);
        }
        let ce = t.cross_entropy(logits, flat)?;
        Ok(ForwardNodes { ce, e_img, logits })
    }

    /// Returns `(L_CE, e_img, logits)` with logits as `(n·L) × V`.
    pub fn forward(&self, images: &[Image], input_ids: &[Vec<u32>], labels: &[Vec<Option<usize>>]) -> Result<(f64, Mat, Mat)> {
        let mut t = Tape::new(&self.params);
        let out = self.forward_tape(&mut t, images, input_ids, labels)?;
        Ok((t.scalar(out.ce), t.value(out.e_img).clone(), t.value(out.logits).clone()))
    }

    /// Projected image embeddings, one row per image.
    pub fn image_embeddings(&self, images: &[Image]) -> Result<Mat> {
        let mut t = Tape::new(&self.params);
        let (_, e) = self.encode_images(&mut t, images)?;
        Ok(t.value(e).clone())
    }
}

#[derive(Debug, Clone)]
struct TextIds {
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln: Norm,
    proj: Linear,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: TextIds,
}

impl TextEncoder {
    /// Mean-pooled, projected embedding of one token sequence (unnormalized).
    pub fn encode(&self, ids: &[u32]) -> Result<Vec<f64>> {
        if ids.is_empty() {
            return Err(Error::Empty("text sequence"));
        }
        let ids_used = &ids[..ids.len().min(self.config.max_len)];
        let mut rows = Vec::with_capacity(ids_used.len());
        for &id in ids_used {
            if id as usize >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange { id, size: self.config.vocab_size });
            }
            rows.push(id as usize);
        }
        let len = rows.len();
        let mut t = Tape::new(&self.params);
        let tok = t.param(self.ids.tok);
        let x = t.gather(tok, rows)?;
        let pos_table = t.param(self.ids.pos);
        let pos = t.gather(pos_table, (0..len).collect())?;
        let mut x = t.add(x, pos)?;
        let ctx = Ctx { batch: 1, len, heads: self.config.heads, causal: false, memory: None };
        for b in &self.ids.blocks {
            x = block(&mut t, x, b, &ctx)?;
        }
        let x = norm(&mut t, x, self.ids.ln)?;
        let pooled = t.mean_pool(x, len)?;
        let e = linear(&mut t, pooled, self.ids.proj)?;
        Ok(t.value(e).data.clone())
    }

    /// One row per sequence.
    pub fn encode_text(&self, batch: &[Vec<u32>]) -> Result<Mat> {
        let rows = batch.iter().map(|s| self.encode(s)).collect::<Result<Vec<_>>>()?;
        Ok(Mat::from_rows(&rows))
    }
}

/// Builds a seeded captioner and its frozen text encoder. The text encoder
/// starts from a copy of the decoder's initial token table.
pub fn build_reference_model(config: ModelConfig, seed: u64) -> Result<(Captioner, TextEncoder)> {
    config.validate()?;
    let d = config.width;
    let hidden = d * config.mlp_ratio;
    let std = config.init_std;
    let proj_std = 1.0 / libm::sqrt(d as f64);

    let mut params = ParamStore::new();
    let mut components = Vec::new();
    let ids = {
        let mut init = Init { store: &mut params, rng: rng::seeded(&[seed, 0xCA97]), std };
        let mut mark = |init: &Init, c: Component| {
            while components.len() < init.store.len() {
                components.push(c);
            }
        };
        let patch = init.linear("vision.patch", config.patch_dim(), d);
        let vis_pos = init.normal("vision.pos".into(), config.num_patches(), d, std);
        let vis_blocks = (0..config.encoder_layers).map(|i| init.block(&format!("vision.block{i}"), d, hidden, false)).collect();
        let vis_ln = init.norm("vision.ln_f", d);
        mark(&init, Component::Vision);
        let proj = Linear {
            w: init.normal("proj.w".into(), d, config.embed_dim, proj_std),
            b: init.fill("proj.b".into(), config.embed_dim, 0.0),
        };
        mark(&init, Component::Projection);
        let tok = init.normal("decoder.tok".into(), config.vocab_size, d, std);
        let dec_pos = init.normal("decoder.pos".into(), config.max_len, d, std);
        let dec_blocks = (0..config.decoder_layers).map(|i| init.block(&format!("decoder.block{i}"), d, hidden, true)).collect();
        let dec_ln = init.norm("decoder.ln_f", d);
        let head = init.linear("decoder.head", d, config.vocab_size);
        mark(&init, Component::Decoder);
        CaptionerIds { patch, vis_pos, vis_blocks, vis_ln, proj, tok, dec_pos, dec_blocks, dec_ln, head }
    };

    let mut text_params = ParamStore::new();
    let text_ids = {
        let table = params.get(ids.tok).clone();
        let mut init = Init { store: &mut text_params, rng: rng::seeded(&[seed, 0x7E47]), std };
        let tok = init.store.add("text.tok", table);
        let pos = init.normal("text.pos".into(), config.max_len, d, std);
        let blocks = (0..config.text_layers).map(|i| init.block(&format!("text.block{i}"), d, hidden, false)).collect();
        let ln = init.norm("text.ln_f", d);
        let proj = Linear {
            w: init.normal("text.proj.w".into(), d, config.embed_dim, proj_std),
            b: init.fill("text.proj.b".into(), config.embed_dim, 0.0),
        };
        TextIds { tok, pos, blocks, ln, proj }
    };

    Ok((
        Captioner { config: config.clone(), params, ids, components },
        TextEncoder { config, params: text_params, ids: text_ids },
    ))
}

/// Rebuilds the module structure for `config` and loads named tensors into
/// it. Every parameter must be supplied with a matching shape.
pub fn assemble(config: ModelConfig, captioner: &[(String, Mat)], text: &[(String, Mat)]) -> Result<(Captioner, TextEncoder)> {
    let (mut cap, mut enc) = build_reference_model(config, 0)?;
    for (store, tensors) in [(&mut cap.params, captioner), (&mut enc.params, text)] {
        if tensors.len() != store.len() {
            return Err(Error::Shape(format!("expected {} tensors, got {}", store.len(), tensors.len())));
        }
        for (name, m) in tensors {
            store.set(name, m.clone())?;
        }
    }
    Ok((cap, enc))
}

/// Teacher-forcing rows for a batch of tokenized captions:
/// `input = [bos, t…]`, `label = [t…, eos]`, right-padded with `pad`
/// inputs and ignored labels. Captions are truncated to fit `max_len`.
pub fn teacher_forcing(captions: &[Vec<u32>], bos: u32, eos: u32, pad: u32, max_len: usize) -> (Vec<Vec<u32>>, Vec<Vec<Option<usize>>>) {
    let keep = max_len.saturating_sub(1);
    let len = captions.iter().map(|c| c.len().min(keep) + 1).max().unwrap_or(1);
    let mut inputs = Vec::with_capacity(captions.len());
    let mut labels = Vec::with_capacity(captions.len());
    for c in captions {
        let c = &c[..c.len().min(keep)];
        let mut inp = Vec::with_capacity(len);
        let mut lab = Vec::with_capacity(len);
        inp.push(bos);
        inp.extend_from_slice(c);
        lab.extend(c.iter().map(|&t| Some(t as usize)));
        lab.push(Some(eos as usize));
        while inp.len() < len {
            inp.push(pad);
            lab.push(None);
        }
        inputs.push(inp);
        labels.push(lab);
    }
    (inputs, labels)
}
