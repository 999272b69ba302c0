//! Single-file checkpoint archive.
//!
//! Layout: magic `LGCK`, `u32` format version, `u64` header length, the JSON
//! header, then every tensor as little-endian `f64` in manifest order. The
//! header carries the configs, the tensor manifest (name, dtype, shape, byte
//! offset into the data section), trainer counters, pool bookkeeping and the
//! finished evaluation rows.

use std::path::Path;

use lgcap_core::autograd::Mat;
use lgcap_core::forgetting::RunRecord;
use lgcap_core::model::{assemble, ArchitectureManifest, Captioner, ModelConfig, TextEncoder};
use lgcap_core::optim::AdamW;
use lgcap_core::prompt::{PoolEntry, PromptPools};
use lgcap_core::trainer::{TrainConfig, TrainerState};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::tokenizers::TokenizerSpec;

const MAGIC: &[u8; 4] = b"LGCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: [usize; 2],
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PoolMeta {
    cap: usize,
    seed: u64,
    current_seen: u64,
    commits: u64,
    current_tasks: Vec<usize>,
    neg_tasks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    model_seed: u64,
    train: TrainConfig,
    tokenizer: TokenizerSpec,
    task_names: Vec<String>,
    task_num: usize,
    epoch: u32,
    global_step: u64,
    adam_t: u64,
    pools: PoolMeta,
    runs: Vec<RunRecord>,
    architecture: ArchitectureManifest,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to resume a run or to generate from it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Captioner,
    pub text: TextEncoder,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub tokenizer: TokenizerSpec,
    pub task_names: Vec<String>,
    pub state: TrainerState,
}

impl Checkpoint {
    pub fn architecture(&self) -> ArchitectureManifest {
        self.model.architecture_manifest()
    }
}

fn pool_matrix(entries: &[PoolEntry], dim: usize) -> Mat {
    let mut m = Mat::zeros(entries.len(), dim);
    for (i, e) in entries.iter().enumerate() {
        m.row_mut(i).copy_from_slice(&e.vector);
    }
    m
}

fn pool_entries(m: &Mat, tasks: &[usize]) -> AppResult<Vec<PoolEntry>> {
    if m.rows != tasks.len() {
        return Err(AppError::Data(format!("pool has {} rows but {} task ids", m.rows, tasks.len())));
    }
    Ok(tasks.iter().enumerate().map(|(i, &task)| PoolEntry { task, vector: m.row(i).to_vec() }).collect())
}

/// Serializes a checkpoint to bytes.
pub fn to_bytes(ck: &Checkpoint) -> AppResult<Vec<u8>> {
    let dim = ck.model.config.embed_dim;
    let mut named: Vec<(String, &Mat)> = Vec::new();
    named.extend(ck.model.params.iter().map(|(n, m)| (format!("captioner/{n}"), m)));
    named.extend(ck.text.params.iter().map(|(n, m)| (format!("text/{n}"), m)));
    for (i, (n, _)) in ck.model.params.iter().enumerate() {
        named.push((format!("adam.m/{n}"), &ck.state.optimizer.m[i]));
        named.push((format!("adam.v/{n}"), &ck.state.optimizer.v[i]));
    }
    let cur = pool_matrix(&ck.state.pools.current_task_pool, dim);
    let neg = pool_matrix(&ck.state.pools.neg_prompt_pool, dim);
    named.push(("pool.current".into(), &cur));
    named.push(("pool.neg".into(), &neg));

    let mut offset = 0u64;
    let tensors = named
        .iter()
        .map(|(name, m)| {
            let e = TensorEntry { name: name.clone(), dtype: "f64".into(), shape: [m.rows, m.cols], offset };
            offset += (m.data.len() * 8) as u64;
            e
        })
        .collect();
    let p = &ck.state.pools;
    let header = Header {
        model: ck.model.config.clone(),
        model_seed: ck.model_seed,
        train: ck.train.clone(),
        tokenizer: ck.tokenizer.clone(),
        task_names: ck.task_names.clone(),
        task_num: ck.state.task_num,
        epoch: ck.state.epoch,
        global_step: ck.state.global_step,
        adam_t: ck.state.optimizer.t,
        pools: PoolMeta {
            cap: p.cap,
            seed: p.seed,
            current_seen: p.current_seen,
            commits: p.commits,
            current_tasks: p.current_task_pool.iter().map(|e| e.task).collect(),
            neg_tasks: p.neg_prompt_pool.iter().map(|e| e.task).collect(),
        },
        runs: ck.state.runs.clone(),
        architecture: ck.model.architecture_manifest(),
        tensors,
    };
    let head = serde_json::to_vec(&header).map_err(|e| AppError::Data(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + head.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    for (_, m) in &named {
        for x in &m.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> AppError {
    AppError::Data(format!("corrupt checkpoint: {}", msg.into()))
}

/// Parses a checkpoint, checking every tensor against the rebuilt model.
pub fn from_bytes(bytes: &[u8]) -> AppResult<Checkpoint> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let data_start = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..data_start]).map_err(|e| corrupt(e.to_string()))?;
    let data = &bytes[data_start..];

    let tensor = |e: &TensorEntry| -> AppResult<(String, Mat)> {
        if e.dtype != "f64" {
            return Err(corrupt(format!("tensor {} has dtype {}", e.name, e.dtype)));
        }
        let n = e.shape[0] * e.shape[1];
        let start = e.offset as usize;
        let chunk = data.get(start..start + n * 8).ok_or_else(|| corrupt(format!("tensor {} out of bounds", e.name)))?;
        let vals = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((e.name.clone(), Mat::from_vec(e.shape[0], e.shape[1], vals)?))
    };
    let mut cap = Vec::new();
    let mut text = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    let (mut cur, mut neg) = (None, None);
    for e in &header.tensors {
        let (name, mat) = tensor(e)?;
        if let Some(n) = name.strip_prefix("captioner/") {
            cap.push((n.to_string(), mat));
        } else if let Some(n) = name.strip_prefix("text/") {
            text.push((n.to_string(), mat));
        } else if let Some(n) = name.strip_prefix("adam.m/") {
            m.push((n.to_string(), mat));
        } else if let Some(n) = name.strip_prefix("adam.v/") {
            v.push((n.to_string(), mat));
        } else if name == "pool.current" {
            cur = Some(mat);
        } else if name == "pool.neg" {
            neg = Some(mat);
        } else {
            return Err(corrupt(format!("unexpected tensor {name}")));
        }
    }
    let (model, text) = assemble(header.model.clone(), &cap, &text)?;
    if model.architecture_manifest() != header.architecture {
        return Err(corrupt("architecture manifest does not match tensors"));
    }
    let t = &header.train;
    let mut optimizer = AdamW::new(&model.params, t.beta1, t.beta2, t.adam_eps, t.weight_decay);
    optimizer.t = header.adam_t;
    for (dst, src, label) in [(&mut optimizer.m, m, "adam.m"), (&mut optimizer.v, v, "adam.v")] {
        if src.len() != dst.len() {
            return Err(corrupt(format!("{label} has {} tensors, expected {}", src.len(), dst.len())));
        }
        for (name, mat) in src {
            let id = model.params.id(&name).ok_or_else(|| corrupt(format!("{label} for unknown parameter {name}")))?;
            if mat.shape() != model.params.get(id).shape() {
                return Err(corrupt(format!("{label}/{name} has the wrong shape")));
            }
            dst[id] = mat;
        }
    }
    let pm = &header.pools;
    let pools = PromptPools {
        current_task_pool: pool_entries(&cur.ok_or_else(|| corrupt("missing pool.current"))?, &pm.current_tasks)?,
        neg_prompt_pool: pool_entries(&neg.ok_or_else(|| corrupt("missing pool.neg"))?, &pm.neg_tasks)?,
        cap: pm.cap,
        seed: pm.seed,
        current_seen: pm.current_seen,
        commits: pm.commits,
    };
    let state = TrainerState {
        task_num: header.task_num,
        epoch: header.epoch,
        global_step: header.global_step,
        optimizer,
        pools,
        runs: header.runs,
    };
    Ok(Checkpoint {
        model,
        text,
        model_seed: header.model_seed,
        train: header.train,
        tokenizer: header.tokenizer,
        task_names: header.task_names,
        state,
    })
}

pub fn save(path: &Path, ck: &Checkpoint) -> AppResult<()> {
    crate::io::write_bytes(path, &to_bytes(ck)?)
}

pub fn load(path: &Path) -> AppResult<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        AppError::Data(msg) => AppError::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use lgcap_core::model::{build_reference_model, FreezeFlags};

    fn micro() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 8,
            width: 8,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            text_layers: 1,
            mlp_ratio: 2,
            max_len: 8,
            embed_dim: 4,
            vocab_size: 110,
            init_std: 0.02,
            freeze: FreezeFlags { decoder: true, ..FreezeFlags::default() },
        }
    }

    fn sample() -> Checkpoint {
        let (model, text) = build_reference_model(micro(), 5).unwrap();
        let train = TrainConfig::default();
        let mut state = TrainerState::new(&model, &train);
        state.task_num = 1;
        state.global_step = 17;
        state.optimizer.t = 17;
        state.optimizer.m[3].data[0] = 0.125;
        state.optimizer.v[2].data[1] = f64::MIN_POSITIVE;
        state.pools.push_current(0, vec![0.6, 0.8, 0.0, 0.0]).unwrap();
        state.pools.commit_task();
        state.pools.push_current(1, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        Checkpoint {
            model,
            text,
            model_seed: 5,
            train,
            tokenizer: TokenizerSpec::Desk { words: vec!["cat".into()] },
            task_names: vec!["a".into(), "b".into()],
            state,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = to_bytes(&ck).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.state, ck.state);
        assert_eq!(back.model.params, ck.model.params);
        assert_eq!(back.text.params, ck.text.params);
        assert_eq!(back.model.config.freeze, ck.model.config.freeze);
        assert_eq!(back.tokenizer, ck.tokenizer);
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_damage() {
        let mut bytes = to_bytes(&sample()).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 8]).is_err());
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(AppError::Data(_))));
    }
}
