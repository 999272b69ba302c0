//! Manifest files: the task-stream JSON with an embedded SHA-256 digest of
//! its canonical (compact) serialization.

use std::path::Path;

use lgcap_core::split::Manifest;
use sha2::{Digest, Sha256};

use crate::error::{AppError, AppResult};
use crate::io::{read_text, write_bytes};

pub fn digest(manifest: &Manifest) -> String {
    let canonical = serde_json::to_vec(manifest).expect("manifest serializes");
    hex::encode(Sha256::digest(&canonical))
}

pub fn to_bytes(manifest: &Manifest) -> Vec<u8> {
    let mut v = serde_json::to_value(manifest).expect("manifest serializes");
    v.as_object_mut().expect("object").insert("digest".into(), digest(manifest).into());
    let mut out = serde_json::to_vec_pretty(&v).expect("value serializes");
    out.push(b'\n');
    out
}

/// Writes the manifest and returns its digest.
pub fn write_manifest(path: &Path, manifest: &Manifest) -> AppResult<String> {
    write_bytes(path, &to_bytes(manifest))?;
    Ok(digest(manifest))
}

/// Reads a manifest, rejecting it if a stored digest does not match.
pub fn read_manifest(path: &Path) -> AppResult<Manifest> {
    let text = read_text(path)?;
    let mut v: serde_json::Value = serde_json::from_str(&text).map_err(|e| AppError::json(path, e))?;
    let stored = v.as_object_mut().and_then(|o| o.remove("digest"));
    let m: Manifest = serde_json::from_value(v).map_err(|e| AppError::json(path, e))?;
    if let Some(stored) = stored {
        let actual = digest(&m);
        if stored.as_str() != Some(actual.as_str()) {
            return Err(AppError::Data(format!("{}: digest mismatch (stored {stored}, computed {actual})", path.display())));
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use lgcap_core::synthetic::build_synthetic_stream;

    #[test]
    fn round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let m = build_synthetic_stream(2, 8, 1).unwrap();
        let d = write_manifest(&p, &m).unwrap();
        assert_eq!(d.len(), 64);
        assert_eq!(read_manifest(&p).unwrap(), m);
        let text = std::fs::read_to_string(&p).unwrap().replacen("\"seed\": 1", "\"seed\": 2", 1);
        std::fs::write(&p, text).unwrap();
        assert!(read_manifest(&p).is_err());
    }
}
