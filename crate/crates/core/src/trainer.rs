//! Task-sequential training with gated auxiliary losses, prompt pools and
//! per-task evaluation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, Tape};
use crate::error::{Error, Result};
use crate::forgetting::RunRecord;
use crate::generator::{self, PixelNorm};
use crate::losses::{self, LossConfig};
use crate::metrics::{self, ClipScorer, EvalPair, MetricScores, Stemmer};
use crate::model::{teacher_forcing, Captioner, TextEncoder};
use crate::optim::{clip_grad_norm, lr_schedule, AdamW};
use crate::prompt::{extract_salient_with, select_negative, NegativeMode, PosTagger, PromptPools};
use crate::rng;
use crate::tokenizer::Tokenizer;
use crate::types::{normalize, Image, LossBreakdown, Sample, TaskSplit, TaskStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_per_task: u32,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub pool_cap: usize,
    /// Pool size from which per-row selection replaces broadcasting;
    /// 0 means the batch size.
    pub neg_threshold: usize,
    pub negative_mode: NegativeMode,
    pub eval_max_tokens: usize,
    pub deterministic_eval: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_task: 5,
            batch_size: 32,
            peak_lr: 1e-5,
            base_lr: 1e-5 / 25.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            warmup_frac: 0.3,
            grad_clip: 1.0,
            seed: 0,
            pool_cap: 10_000,
            neg_threshold: 0,
            negative_mode: NegativeMode::MostDissimilar,
            eval_max_tokens: generator::MAX_TOKENS,
            deterministic_eval: true,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Every problem found, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.epochs_per_task == 0 {
            out.push("epochs_per_task must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            out.push("batch_size must be >= 1".to_string());
        }
        if !(self.base_lr > 0.0 && self.base_lr <= self.peak_lr && self.peak_lr.is_finite()) {
            out.push(format!("need 0 < base_lr <= peak_lr (got {} and {})", self.base_lr, self.peak_lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            out.push("betas must lie in [0, 1)".to_string());
        }
        if !(self.adam_eps > 0.0) {
            out.push("adam_eps must be > 0".to_string());
        }
        if !(self.weight_decay >= 0.0) {
            out.push("weight_decay must be >= 0".to_string());
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            out.push("warmup_frac must lie in [0, 1]".to_string());
        }
        if !(self.grad_clip >= 0.0) {
            out.push("grad_clip must be >= 0".to_string());
        }
        if self.pool_cap == 0 {
            out.push("pool_cap must be >= 1".to_string());
        }
        if self.eval_max_tokens == 0 {
            out.push("eval_max_tokens must be >= 1".to_string());
        }
        if let Err(e) = self.loss.validate() {
            out.push(e.to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() { Ok(()) } else { Err(Error::Config(p.join("; "))) }
    }

    pub fn threshold(&self) -> usize {
        if self.neg_threshold == 0 { self.batch_size } else { self.neg_threshold }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    /// Index of the next task to train.
    pub task_num: usize,
    /// Last completed epoch of the current task (1-based, 0 before any).
    pub epoch: u32,
    pub global_step: u64,
    pub optimizer: AdamW,
    pub pools: PromptPools,
    /// Evaluation rows for every finished task.
    pub runs: Vec<RunRecord>,
}

impl TrainerState {
    pub fn new(model: &Captioner, cfg: &TrainConfig) -> Self {
        Self {
            task_num: 0,
            epoch: 0,
            global_step: 0,
            optimizer: AdamW::new(&model.params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay),
            pools: PromptPools::new(cfg.pool_cap, rng::derive_seed(&[cfg.seed, 0x9001])),
            runs: Vec::new(),
        }
    }
}

/// One line of the training log; absent components serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub task: usize,
    pub epoch: u32,
    pub step: u64,
    pub ce: f64,
    pub nouns: Option<f64>,
    pub clip: Option<f64>,
    pub lgcl: Option<f64>,
    pub total: f64,
}

/// Callbacks from [`Trainer::run_stream`].
pub trait StreamObserver {
    fn on_step(&mut self, _record: &LogRecord) -> Result<()> {
        Ok(())
    }
    /// Called after each task is trained and evaluated; `state.task_num`
    /// already points at the next task.
    fn on_task_end(&mut self, _model: &Captioner, _state: &TrainerState) -> Result<()> {
        Ok(())
    }
}

/// Collects log records in memory.
#[derive(Debug, Default)]
pub struct MemoryLog {
    pub records: Vec<LogRecord>,
    pub checkpoints: Vec<(Captioner, TrainerState)>,
}

impl StreamObserver for MemoryLog {
    fn on_step(&mut self, record: &LogRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }
    fn on_task_end(&mut self, model: &Captioner, state: &TrainerState) -> Result<()> {
        self.checkpoints.push((model.clone(), state.clone()));
        Ok(())
    }
}

/// Shared, read-only training context plus the text-embedding cache.
pub struct Trainer<'a> {
    pub tokenizer: &'a dyn Tokenizer,
    pub text: &'a TextEncoder,
    pub tagger: &'a dyn PosTagger,
    pub stemmer: &'a dyn Stemmer,
    pub norm: PixelNorm,
    pub cfg: TrainConfig,
    cache: BTreeMap<String, Vec<f64>>,
}

fn finite(component: &'static str, v: f64, task: usize, epoch: u32, step: u64) -> Result<f64> {
    if v.is_finite() { Ok(v) } else { Err(Error::NonFinite { component, task, epoch, step }) }
}

impl<'a> Trainer<'a> {
    pub fn new(
        tokenizer: &'a dyn Tokenizer,
        text: &'a TextEncoder,
        tagger: &'a dyn PosTagger,
        stemmer: &'a dyn Stemmer,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { tokenizer, text, tagger, stemmer, norm: PixelNorm::REFERENCE, cfg, cache: BTreeMap::new() })
    }

    fn text_ids(&self, s: &str) -> Vec<u32> {
        let ids = self.tokenizer.encode(s).ids;
        if ids.is_empty() { alloc::vec![self.tokenizer.eos_id()] } else { ids }
    }

    /// Unit-norm frozen-encoder embedding, memoized by string.
    pub fn embed_text(&mut self, s: &str) -> Result<Vec<f64>> {
        if let Some(v) = self.cache.get(s) {
            return Ok(v.clone());
        }
        let v = normalize(&self.text.encode(&self.text_ids(s))?)?.values;
        self.cache.insert(s.to_string(), v.clone());
        Ok(v)
    }

    fn embed_rows(&mut self, texts: &[String]) -> Result<Mat> {
        let rows = texts.iter().map(|t| self.embed_text(t)).collect::<Result<Vec<_>>>()?;
        Ok(Mat::from_rows(&rows))
    }

    /// Trains `state.task_num` on `task` for the configured epochs, then
    /// commits the prompt pool and advances the task counter.
    pub fn train_task(&mut self, model: &mut Captioner, task: &TaskSplit, state: &mut TrainerState, obs: &mut dyn StreamObserver) -> Result<()> {
        let n = task.train.len();
        if n == 0 {
            return Err(Error::Empty("task training split"));
        }
        let cfg = self.cfg.clone();
        let t_idx = state.task_num;
        let images: Vec<Image> = task.train.iter().map(|s| self.norm.apply(&s.image)).collect();
        let steps_per_epoch = n.div_ceil(cfg.batch_size);
        let total_steps = steps_per_epoch * cfg.epochs_per_task as usize;
        let (bos, eos, pad) = (self.tokenizer.bos_id(), self.tokenizer.eos_id(), self.tokenizer.pad_id());

        for epoch in (state.epoch + 1)..=cfg.epochs_per_task {
            let order = rng::permutation(&mut rng::seeded(&[cfg.seed, 0x0DE7, t_idx as u64, u64::from(epoch)]), n);
            for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let local_step = (epoch as usize - 1) * steps_per_epoch + b;
                let lr = lr_schedule(local_step, total_steps, cfg.peak_lr, cfg.base_lr, cfg.warmup_frac);
                let step = state.global_step;
                let batch_imgs: Vec<Image> = chunk.iter().map(|&i| images[i].clone()).collect();
                let captions: Vec<String> = chunk
                    .iter()
                    .map(|&i| {
                        let s: &Sample = &task.train[i];
                        let mut r = rng::seeded(&[cfg.seed, 0xCA9, t_idx as u64, u64::from(epoch), i as u64]);
                        s.captions[rng::below(&mut r, s.captions.len())].clone()
                    })
                    .collect();
                let tokens: Vec<Vec<u32>> = captions.iter().map(|c| self.tokenizer.encode(c).ids).collect();
                let (inputs, labels) = teacher_forcing(&tokens, bos, eos, pad, model.config.max_len);

                let gate = losses::gate(&cfg.loss, t_idx, epoch, !state.pools.neg_prompt_pool.is_empty());
                let positives = if cfg.loss.use_lgcl {
                    let prompts: Vec<String> = captions.iter().map(|c| extract_salient_with(self.tagger, c).rendered).collect();
                    Some(self.embed_rows(&prompts)?)
                } else {
                    None
                };
                let caption_emb = if gate.clip { Some(self.embed_rows(&captions)?) } else { None };

                let grads;
                let parts;
                {
                    let mut tape = Tape::new(&model.params);
                    let out = model.forward_tape(&mut tape, &batch_imgs, &inputs, &labels)?;
                    let w = cfg.loss.weights;
                    let mut terms = alloc::vec![(out.ce, w.ce)];
                    let (mut nouns, mut clip, mut lgcl) = (None, None, None);
                    if let Some(pos) = &positives {
                        let e = tape.row_normalize(out.e_img)?;
                        if gate.nouns {
                            let node = tape.cosine_align(e, pos.clone())?;
                            nouns = Some(tape.scalar(node));
                            terms.push((node, w.nouns));
                        }
                        if let Some(cap) = caption_emb {
                            let node = tape.cosine_align(e, cap)?;
                            clip = Some(tape.scalar(node));
                            terms.push((node, w.clip));
                        }
                        if gate.lgcl {
                            let sel = select_negative(tape.value(e), &state.pools, cfg.threshold(), cfg.negative_mode)?;
                            if let Some(sel) = sel {
                                let node = tape.triplet(e, pos.clone(), sel.vectors, cfg.loss.lgcl_margin, cfg.loss.lgcl_hinged)?;
                                lgcl = Some(tape.scalar(node));
                                terms.push((node, w.lgcl));
                            }
                        }
                    }
                    let ce = finite("ce", tape.scalar(out.ce), t_idx, epoch, step)?;
                    for (name, v) in [("nouns", nouns), ("clip", clip), ("lgcl", lgcl)] {
                        if let Some(v) = v {
                            finite(name, v, t_idx, epoch, step)?;
                        }
                    }
                    let mut breakdown = LossBreakdown::new(ce, nouns, clip, lgcl);
                    breakdown.total = losses::total_loss(&breakdown, &cfg.loss)?;
                    let root = tape.weighted_sum(terms)?;
                    finite("total", tape.scalar(root), t_idx, epoch, step)?;
                    grads = tape.backward(root);
                    parts = breakdown;
                }
                let mut grads = grads;
                if cfg.grad_clip > 0.0 {
                    let norm = clip_grad_norm(&mut grads, cfg.grad_clip);
                    finite("gradient", norm, t_idx, epoch, step)?;
                }
                let trainable: Vec<bool> = (0..model.params.len()).map(|p| model.is_trainable(p)).collect();
                state.optimizer.step(&mut model.params, &grads, lr, |p| trainable[p]);

                if let Some(pos) = &positives {
                    for r in 0..pos.rows {
                        state.pools.push_current(t_idx, pos.row(r).to_vec())?;
                    }
                }
                state.global_step += 1;
                obs.on_step(&LogRecord {
                    task: t_idx,
                    epoch,
                    step,
                    ce: parts.ce,
                    nouns: parts.nouns,
                    clip: parts.clip,
                    lgcl: parts.lgcl,
                    total: parts.total,
                })?;
            }
            state.epoch = epoch;
        }
        state.pools.commit_task();
        state.task_num += 1;
        state.epoch = 0;
        Ok(())
    }

    /// Greedy test-split scores (×100) for tasks `0..=upto`.
    pub fn evaluate(&mut self, model: &Captioner, stream: &TaskStream, upto: usize) -> Result<BTreeMap<String, MetricScores>> {
        let mut out = BTreeMap::new();
        for t in 0..=upto {
            let samples = &stream.tasks[t].test;
            if samples.is_empty() {
                return Err(Error::Empty("task test split"));
            }
            let norm_imgs: Vec<Image> = samples.iter().map(|s| self.norm.apply(&s.image)).collect();
            let opts = generator::GenerateOptions { deterministic: self.cfg.deterministic_eval, max_tokens: self.cfg.eval_max_tokens, temperature: 1.0 };
            let mut pairs = Vec::with_capacity(samples.len());
            for (i, (s, img)) in samples.iter().zip(&norm_imgs).enumerate() {
                let mut r = rng::seeded(&[self.cfg.seed, 0xE7A1, t as u64, i as u64]);
                let g = generator::generate(model, self.tokenizer, img, &opts, &mut r)?;
                pairs.push(EvalPair::new(g.caption, s.captions.clone()));
            }
            let stemmer = self.stemmer;
            let scorer = EvalScorer { trainer: core::cell::RefCell::new(&mut *self), model, images: &norm_imgs };
            let scores = metrics::score_all(&pairs, stemmer, Some(&scorer))?;
            out.insert(t.to_string(), scores.scaled());
        }
        Ok(out)
    }

    /// Trains the remaining tasks of `stream` starting at `state.task_num`,
    /// evaluating after each one.
    pub fn run_stream(&mut self, model: &mut Captioner, stream: &TaskStream, state: &mut TrainerState, obs: &mut dyn StreamObserver) -> Result<()> {
        if stream.is_empty() {
            return Err(Error::Empty("task stream"));
        }
        while state.task_num < stream.len() {
            let t = state.task_num;
            self.train_task(model, &stream.tasks[t], state, obs)?;
            let scores = self.evaluate(model, stream, t)?;
            state.runs.push(RunRecord { task_trained: t, scores });
            obs.on_task_end(model, state)?;
        }
        Ok(())
    }
}

/// Image side from the captioner being evaluated, text side from the
/// frozen encoder.
struct EvalScorer<'t, 'a, 'm> {
    trainer: core::cell::RefCell<&'t mut Trainer<'a>>,
    model: &'m Captioner,
    images: &'m [Image],
}

impl ClipScorer for EvalScorer<'_, '_, '_> {
    fn embed_image(&self, index: usize) -> Result<Vec<f64>> {
        Ok(self.model.image_embeddings(core::slice::from_ref(&self.images[index]))?.data)
    }
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        self.trainer.borrow_mut().embed_text(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::PluralStemmer;
    use crate::model::{build_reference_model, FreezeFlags, ModelConfig};
    use crate::prompt::LexiconTagger;
    use crate::synthetic;
    use crate::tokenizer::DeskTokenizer;

    struct Fixture {
        tok: DeskTokenizer,
        tagger: LexiconTagger,
        stream: TaskStream,
    }

    fn fixture() -> Fixture {
        let manifest = synthetic::build_synthetic_stream(2, 16, 3).unwrap();
        Fixture {
            tok: DeskTokenizer::new(synthetic::vocabulary_words()),
            tagger: LexiconTagger::default(),
            stream: synthetic::resolve_stream(&manifest).unwrap(),
        }
    }

    fn micro(vocab: usize) -> ModelConfig {
        ModelConfig {
            image_size: 32,
            patch_size: 8,
            width: 16,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            text_layers: 1,
            mlp_ratio: 2,
            max_len: 64,
            embed_dim: 16,
            vocab_size: vocab,
            init_std: 0.02,
            freeze: FreezeFlags::default(),
        }
    }

    fn cfg(use_lgcl: bool) -> TrainConfig {
        TrainConfig {
            epochs_per_task: 3,
            batch_size: 4,
            peak_lr: 1e-3,
            base_lr: 4e-5,
            seed: 11,
            eval_max_tokens: 12,
            loss: LossConfig { use_lgcl, nouns_epochs: 1, ..LossConfig::default() },
            ..TrainConfig::default()
        }
    }

    fn run(f: &Fixture, c: TrainConfig) -> (MemoryLog, TrainerState, Captioner, TextEncoder) {
        let (mut model, text) = build_reference_model(micro(f.tok.vocab_size()), 5).unwrap();
        let frozen = text.params.clone();
        let mut log = MemoryLog::default();
        let mut state = TrainerState::new(&model, &c);
        {
            let mut tr = Trainer::new(&f.tok, &text, &f.tagger, &PluralStemmer, c).unwrap();
            tr.run_stream(&mut model, &f.stream, &mut state, &mut log).unwrap();
        }
        assert_eq!(frozen, text.params);
        (log, state, model, text)
    }

    #[test]
    fn gating_follows_schedule() {
        let f = fixture();
        let (log, state, _, _) = run(&f, cfg(true));
        assert_eq!(log.records.len(), 2 * 3 * 3);
        for r in &log.records {
            assert_eq!(r.nouns.is_some(), r.epoch <= 1, "{r:?}");
            assert_eq!(r.clip.is_some(), r.epoch > 1, "{r:?}");
            assert_eq!(r.lgcl.is_some(), r.task > 0, "{r:?}");
            let sum = r.ce + r.nouns.unwrap_or(0.0) + r.clip.unwrap_or(0.0) + r.lgcl.unwrap_or(0.0);
            assert!((sum - r.total).abs() < 1e-12);
        }
        assert_eq!(state.runs.len(), 2);
        assert_eq!(state.runs[1].scores.len(), 2);
        assert!(state.pools.current_task_pool.is_empty());
        assert!(state.pools.neg_prompt_pool.iter().any(|e| e.task == 1));
    }

    #[test]
    fn ce_only_baseline_logs_only_ce() {
        let f = fixture();
        let (log, state, _, _) = run(&f, cfg(false));
        assert!(log.records.iter().all(|r| r.nouns.is_none() && r.clip.is_none() && r.lgcl.is_none() && r.total == r.ce));
        assert!(state.pools.neg_prompt_pool.is_empty());
    }

    #[test]
    fn deterministic_and_resumable() {
        let f = fixture();
        let (a, sa, ma, _) = run(&f, cfg(true));
        let (b, sb, mb, _) = run(&f, cfg(true));
        assert_eq!(a.records, b.records);
        assert_eq!(sa.runs, sb.runs);
        assert_eq!(ma.params, mb.params);

        // Resume from the first task's checkpoint.
        let (mut model, mut state) = a.checkpoints[0].clone();
        let (_, text) = build_reference_model(micro(f.tok.vocab_size()), 5).unwrap();
        let mut log = MemoryLog::default();
        let mut tr = Trainer::new(&f.tok, &text, &f.tagger, &PluralStemmer, cfg(true)).unwrap();
        tr.run_stream(&mut model, &f.stream, &mut state, &mut log).unwrap();
        assert_eq!(state.runs, sa.runs);
        assert_eq!(log.records[..], a.records[9..]);
        assert_eq!(model.params, ma.params);
    }

    #[test]
    fn config_problems_are_all_listed() {
        let bad = TrainConfig { epochs_per_task: 0, batch_size: 0, base_lr: 1.0, ..TrainConfig::default() };
        assert_eq!(bad.problems().len(), 3);
        assert!(TrainConfig::default().validate().is_ok());
    }
}
