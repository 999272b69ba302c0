//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. The same keys are accepted by
//! `train --set key=value`, applied after the file.

use std::path::{Path, PathBuf};

use lgcap_core::model::{FreezeFlags, ModelConfig};
use lgcap_core::prompt::NegativeMode;
use lgcap_core::trainer::TrainConfig;

use crate::error::{AppError, AppResult};
use crate::io::read_text;

/// Environment variable naming the directory that relative image paths in a
/// manifest resolve against.
pub const DATA_ROOT_ENV: &str = "LGCAP_DATA_ROOT";

/// Every accepted key with its help text.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("epochs_per_task", "epochs per task (5)"),
    ("batch_size", "images per optimizer step (32)"),
    ("peak_lr", "peak learning rate (1e-5)"),
    ("base_lr", "start/end learning rate (peak_lr/25)"),
    ("beta1", "AdamW first-moment decay (0.9)"),
    ("beta2", "AdamW second-moment decay (0.999)"),
    ("adam_eps", "AdamW epsilon (1e-8)"),
    ("weight_decay", "decoupled weight decay (0.01)"),
    ("warmup_frac", "fraction of each task's steps spent warming up (0.3)"),
    ("grad_clip", "global gradient-norm bound, 0 disables (1.0)"),
    ("seed", "training seed (0)"),
    ("pool_cap", "prompt pool capacity (10000)"),
    ("neg_threshold", "pool size for per-row negatives, 0 = batch_size (0)"),
    ("negative_mode", "most_dissimilar | most_similar (most_dissimilar)"),
    ("eval_max_tokens", "generation length cap at evaluation (50)"),
    ("deterministic_eval", "greedy decoding at evaluation (true)"),
    ("use_lgcl", "enable the auxiliary prompt losses (true)"),
    ("nouns_epochs", "epochs using the prompt loss before the caption loss (2)"),
    ("weight_ce", "weight of the caption cross-entropy (1.0)"),
    ("weight_nouns", "weight of the prompt alignment loss (1.0)"),
    ("weight_clip", "weight of the caption alignment loss (1.0)"),
    ("weight_lgcl", "weight of the triplet loss (1.0)"),
    ("lgcl_margin", "triplet margin (1.0)"),
    ("lgcl_hinged", "clamp the triplet term at zero (true)"),
    ("image_size", "input resolution (32)"),
    ("patch_size", "patch side (8)"),
    ("width", "transformer width (128)"),
    ("heads", "attention heads (4)"),
    ("encoder_layers", "vision encoder layers (2)"),
    ("decoder_layers", "caption decoder layers (2)"),
    ("text_layers", "frozen text encoder layers (2)"),
    ("mlp_ratio", "MLP hidden size / width (4)"),
    ("max_len", "maximum token positions (64)"),
    ("embed_dim", "shared embedding size (128)"),
    ("init_std", "initialization standard deviation (0.02)"),
    ("freeze_vision", "freeze the vision encoder (false)"),
    ("freeze_decoder", "freeze the caption decoder (false)"),
    ("freeze_projection", "freeze the image projection (false)"),
    ("model_seed", "initialization seed (0)"),
    ("bpe_vocab", "byte-level BPE vocab.json; desk tokenizer when unset"),
    ("bpe_merges", "byte-level BPE merges.txt"),
    ("lexicon", "part-of-speech lexicon file; built-in when unset"),
    ("data_root", "image root directory (overrides LGCAP_DATA_ROOT)"),
];

/// Parsed run configuration. `model` carries a placeholder vocabulary size
/// until the tokenizer is known.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub bpe_vocab: Option<PathBuf>,
    pub bpe_merges: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub data_root: Option<PathBuf>,
    base_lr_set: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            model: ModelConfig::reference(0),
            model_seed: 0,
            bpe_vocab: None,
            bpe_merges: None,
            lexicon: None,
            data_root: None,
            base_lr_set: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> AppResult<T> {
    value.parse().map_err(|_| AppError::Usage(format!("invalid value `{value}` for `{key}`")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> AppResult<()> {
        let t = &mut self.train;
        let l = &mut t.loss;
        let m = &mut self.model;
        match key {
            "epochs_per_task" => t.epochs_per_task = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "peak_lr" => t.peak_lr = parse(key, value)?,
            "base_lr" => {
                t.base_lr = parse(key, value)?;
                self.base_lr_set = true;
            }
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "warmup_frac" => t.warmup_frac = parse(key, value)?,
            "grad_clip" => t.grad_clip = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "pool_cap" => t.pool_cap = parse(key, value)?,
            "neg_threshold" => t.neg_threshold = parse(key, value)?,
            "negative_mode" => {
                t.negative_mode = match value {
                    "most_dissimilar" => NegativeMode::MostDissimilar,
                    "most_similar" => NegativeMode::MostSimilar,
                    _ => return Err(AppError::Usage(format!("invalid value `{value}` for `{key}`"))),
                }
            }
            "eval_max_tokens" => t.eval_max_tokens = parse(key, value)?,
            "deterministic_eval" => t.deterministic_eval = parse(key, value)?,
            "use_lgcl" => l.use_lgcl = parse(key, value)?,
            "nouns_epochs" => l.nouns_epochs = parse(key, value)?,
            "weight_ce" => l.weights.ce = parse(key, value)?,
            "weight_nouns" => l.weights.nouns = parse(key, value)?,
            "weight_clip" => l.weights.clip = parse(key, value)?,
            "weight_lgcl" => l.weights.lgcl = parse(key, value)?,
            "lgcl_margin" => l.lgcl_margin = parse(key, value)?,
            "lgcl_hinged" => l.lgcl_hinged = parse(key, value)?,
            "image_size" => m.image_size = parse(key, value)?,
            "patch_size" => m.patch_size = parse(key, value)?,
            "width" => m.width = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "encoder_layers" => m.encoder_layers = parse(key, value)?,
            "decoder_layers" => m.decoder_layers = parse(key, value)?,
            "text_layers" => m.text_layers = parse(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "max_len" => m.max_len = parse(key, value)?,
            "embed_dim" => m.embed_dim = parse(key, value)?,
            "init_std" => m.init_std = parse(key, value)?,
            "freeze_vision" => m.freeze.vision = parse(key, value)?,
            "freeze_decoder" => m.freeze.decoder = parse(key, value)?,
            "freeze_projection" => m.freeze.projection = parse(key, value)?,
            "model_seed" => self.model_seed = parse(key, value)?,
            "bpe_vocab" => self.bpe_vocab = Some(value.into()),
            "bpe_merges" => self.bpe_merges = Some(value.into()),
            "lexicon" => self.lexicon = Some(value.into()),
            "data_root" => self.data_root = Some(value.into()),
            _ => return Err(AppError::Usage(format!("unknown config key `{key}`"))),
        }
        if !self.base_lr_set {
            self.train.base_lr = self.train.peak_lr / 25.0;
        }
        Ok(())
    }

    /// Applies one `key=value` assignment.
    pub fn assign(&mut self, pair: &str) -> AppResult<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| AppError::Usage(format!("expected key=value, got `{pair}`")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn apply_text(&mut self, text: &str) -> AppResult<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.assign(line).map_err(|e| match e {
                AppError::Usage(msg) => AppError::Usage(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> AppResult<Self> {
        let mut c = Self::default();
        c.apply_text(&read_text(path)?).map_err(|e| match e {
            AppError::Usage(msg) => AppError::Usage(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        Ok(c)
    }

    /// Data root from the config, else the environment.
    pub fn resolve_data_root(&self) -> Option<PathBuf> {
        self.data_root.clone().or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
    }

    /// All validation problems of the training and model settings.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.train.problems();
        let mut m = self.model.clone();
        m.vocab_size = m.vocab_size.max(4);
        if let Err(e) = m.validate() {
            out.push(e.to_string());
        }
        if self.bpe_vocab.is_some() != self.bpe_merges.is_some() {
            out.push("bpe_vocab and bpe_merges must be given together".into());
        }
        out
    }

    pub fn freeze(&self) -> FreezeFlags {
        self.model.freeze
    }
}
