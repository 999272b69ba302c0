//! COCO-style annotation files.
//!
//! Both the official layout (`{"images": [...], "annotations": [...]}`) and
//! bare annotation lists are accepted.

use std::collections::BTreeMap;
use std::path::Path;

use lgcap_core::split::{CaptionRecord, CocoAnnotations, InstanceRecord};
use serde::Deserialize;

use crate::error::{AppError, AppResult};

#[derive(Deserialize)]
struct ImageRecord {
    id: u64,
    file_name: String,
}

#[derive(Deserialize)]
struct Full<T> {
    #[serde(default)]
    images: Vec<ImageRecord>,
    annotations: Vec<T>,
}

fn read_file<T: serde::de::DeserializeOwned>(path: &Path) -> AppResult<(Vec<T>, Vec<ImageRecord>)> {
    let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
    let bare = bytes.iter().find(|b| !b.is_ascii_whitespace()) == Some(&b'[');
    if bare {
        let a: Vec<T> = serde_json::from_slice(&bytes).map_err(|e| AppError::json(path, e))?;
        Ok((a, Vec::new()))
    } else {
        let f: Full<T> = serde_json::from_slice(&bytes).map_err(|e| AppError::json(path, e))?;
        Ok((f.annotations, f.images))
    }
}

/// Reads one caption file and one instance file.
pub fn load_annotations(captions: &Path, instances: &Path) -> AppResult<CocoAnnotations> {
    let (caps, mut images) = read_file::<CaptionRecord>(captions)?;
    if !instances.exists() {
        return Err(AppError::Data(format!("missing instance annotations: {}", instances.display())));
    }
    let (inst, more) = read_file::<InstanceRecord>(instances)?;
    images.extend(more);
    let file_names: BTreeMap<u64, String> = images.into_iter().map(|i| (i.id, i.file_name)).collect();
    Ok(CocoAnnotations { captions: caps, instances: inst, file_names })
}

/// Standard file names under `dir` for one COCO split, e.g. `train2014`.
pub fn load_split_dir(dir: &Path, split: &str) -> AppResult<CocoAnnotations> {
    load_annotations(&dir.join(format!("captions_{split}.json")), &dir.join(format!("instances_{split}.json")))
}
