//! Drivers behind the `train`, `eval` and `generate` commands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lgcap_core::forgetting::ResultsFile;
use lgcap_core::generator::{self, GenerateOptions, Generation, PixelNorm};
use lgcap_core::metrics::{self, ClipScorer, EvalPair, MetricScores};
use lgcap_core::model::{build_reference_model, Captioner, TextEncoder};
use lgcap_core::prompt::LexiconTagger;
use lgcap_core::rng;
use lgcap_core::split::Manifest;
use lgcap_core::tokenizer::Tokenizer;
use lgcap_core::trainer::{LogRecord, StreamObserver, Trainer, TrainerState};
use lgcap_core::types::{normalize, Image, TaskStream};

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::error::{AppError, AppResult};
use crate::io::{read_text, write_bytes};
use crate::results::{self, checkpoint_name, LogWriter, Prediction, LOG_FILE, RESULTS_FILE};
use crate::stemmer::EnglishStemmer;
use crate::tokenizers::{desk_words, TokenizerSpec};

pub fn tokenizer_spec(cfg: &RunConfig, manifest: &Manifest) -> TokenizerSpec {
    match (&cfg.bpe_vocab, &cfg.bpe_merges) {
        (Some(vocab), Some(merges)) => TokenizerSpec::Bpe { vocab: vocab.clone(), merges: merges.clone() },
        _ => TokenizerSpec::Desk { words: desk_words(manifest) },
    }
}

pub fn load_tagger(path: Option<&Path>) -> AppResult<LexiconTagger> {
    match path {
        Some(p) => Ok(LexiconTagger::from_text(&read_text(p)?)?),
        None => Ok(LexiconTagger::default()),
    }
}

/// Files produced by a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub results: ResultsFile,
    pub results_path: PathBuf,
    pub log_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

struct FileObserver<'a> {
    out_dir: &'a Path,
    log: LogWriter,
    text: &'a TextEncoder,
    base: &'a Checkpoint,
    written: Vec<PathBuf>,
}

impl StreamObserver for FileObserver<'_> {
    fn on_step(&mut self, record: &LogRecord) -> lgcap_core::Result<()> {
        self.log.append(record).map_err(|e| lgcap_core::Error::Config(format!("writing log: {e}")))
    }

    fn on_task_end(&mut self, model: &Captioner, state: &TrainerState) -> lgcap_core::Result<()> {
        let ck = Checkpoint { model: model.clone(), text: self.text.clone(), state: state.clone(), ..self.base.clone() };
        let path = self.out_dir.join(checkpoint_name(state.task_num - 1));
        checkpoint::save(&path, &ck).map_err(|e| lgcap_core::Error::Config(format!("writing checkpoint: {e}")))?;
        self.written.push(path);
        Ok(())
    }
}

/// Builds a fresh run from a config, or resumes one from a checkpoint.
///
/// On resume the checkpoint's own tokenizer, model and training config are
/// used, and the log in `out_dir` is truncated to the steps the checkpoint
/// has seen.
pub fn train(cfg: &RunConfig, manifest: &Manifest, stream: &TaskStream, out_dir: &Path, resume: Option<Checkpoint>) -> AppResult<TrainOutcome> {
    let log_path = out_dir.join(LOG_FILE);
    let (start, keep) = match resume {
        Some(ck) => {
            if ck.task_names != stream.names {
                return Err(AppError::Data("checkpoint task names do not match the manifest".into()));
            }
            let keep = if log_path.exists() {
                results::read_log(&log_path)?.into_iter().filter(|r| r.step < ck.state.global_step).collect()
            } else {
                Vec::new()
            };
            (ck, keep)
        }
        None => {
            let problems = cfg.problems();
            if !problems.is_empty() {
                return Err(AppError::Usage(format!("invalid configuration:\n  {}", problems.join("\n  "))));
            }
            let spec = tokenizer_spec(cfg, manifest);
            let tok = spec.build()?;
            let mut mc = cfg.model.clone();
            mc.vocab_size = tok.vocab_size();
            let (model, text) = build_reference_model(mc, cfg.model_seed)?;
            let state = TrainerState::new(&model, &cfg.train);
            let ck = Checkpoint {
                model,
                text,
                model_seed: cfg.model_seed,
                train: cfg.train.clone(),
                tokenizer: spec,
                task_names: stream.names.clone(),
                state,
            };
            (ck, Vec::new())
        }
    };
    let tok = start.tokenizer.build()?;
    let tagger = load_tagger(cfg.lexicon.as_deref())?;
    let stemmer = EnglishStemmer::default();
    let Checkpoint { mut model, text, mut state, .. } = start.clone();
    let mut trainer = Trainer::new(tok.as_ref(), &text, &tagger, &stemmer, start.train.clone())?;
    let mut obs = FileObserver { out_dir, log: LogWriter::create(&log_path, &keep)?, text: &text, base: &start, written: Vec::new() };
    trainer.run_stream(&mut model, stream, &mut state, &mut obs)?;

    let results = ResultsFile { method: method_name(&start).into(), task_names: stream.names.clone(), runs: state.runs.clone() };
    let results_path = out_dir.join(RESULTS_FILE);
    write_bytes(&results_path, &results::results_bytes(&results))?;
    let checkpoints = (0..stream.len()).map(|t| out_dir.join(checkpoint_name(t))).collect();
    Ok(TrainOutcome { results, results_path, log_path, checkpoints })
}

/// Method label used in results files.
pub fn method_name(ck: &Checkpoint) -> &'static str {
    if ck.train.loss.use_lgcl { "lgcap" } else { "no_lgcl" }
}

/// Image embeddings from a trained captioner, text embeddings from its
/// frozen encoder.
pub struct CheckpointScorer<'a> {
    pub model: &'a Captioner,
    pub text: &'a TextEncoder,
    pub tokenizer: &'a dyn Tokenizer,
    pub images: &'a [Image],
}

impl ClipScorer for CheckpointScorer<'_> {
    fn embed_image(&self, index: usize) -> lgcap_core::Result<Vec<f64>> {
        Ok(self.model.image_embeddings(std::slice::from_ref(&self.images[index]))?.data)
    }
    fn embed_text(&self, text: &str) -> lgcap_core::Result<Vec<f64>> {
        let mut ids = self.tokenizer.encode(text).ids;
        if ids.is_empty() {
            ids.push(self.tokenizer.eos_id());
        }
        Ok(normalize(&self.text.encode(&ids)?)?.values)
    }
}

/// Scores predictions against one task's test split (×100). CLIPScore
/// needs the checkpoint and the images; without them it is omitted.
pub fn eval_predictions(
    preds: &[Prediction],
    manifest: &Manifest,
    task: usize,
    with_clip: Option<(&Checkpoint, &TaskStream)>,
) -> AppResult<MetricScores> {
    let t = manifest
        .tasks
        .get(task)
        .ok_or_else(|| AppError::Usage(format!("task {task} out of range (manifest has {})", manifest.tasks.len())))?;
    let by_id: BTreeMap<&str, &str> = preds.iter().map(|p| (p.image_id.as_str(), p.caption.as_str())).collect();
    let mut pairs = Vec::with_capacity(t.test.len());
    for e in &t.test {
        let hyp = by_id.get(e.image_id.as_str()).ok_or_else(|| AppError::Data(format!("no prediction for image {}", e.image_id)))?;
        pairs.push(EvalPair::new(*hyp, e.captions.clone()));
    }
    let stemmer = EnglishStemmer::default();
    let scores = match with_clip {
        None => metrics::score_all(&pairs, &stemmer, None)?,
        Some((ck, stream)) => {
            let tok = ck.tokenizer.build()?;
            let norm = PixelNorm::REFERENCE;
            let images: Vec<Image> = stream.tasks[task].test.iter().map(|s| norm.apply(&s.image)).collect();
            let scorer = CheckpointScorer { model: &ck.model, text: &ck.text, tokenizer: tok.as_ref(), images: &images };
            metrics::score_all(&pairs, &stemmer, Some(&scorer))?
        }
    };
    Ok(scores.scaled())
}

/// Captions one preprocessed image.
pub fn generate_caption(ck: &Checkpoint, image: &Image, opts: &GenerateOptions, seed: u64) -> AppResult<Generation> {
    let tok = ck.tokenizer.build()?;
    let mut r = rng::seeded(&[seed, 0x6E4]);
    Ok(generator::generate(&ck.model, tok.as_ref(), image, opts, &mut r)?)
}
