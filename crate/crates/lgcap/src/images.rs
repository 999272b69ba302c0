//! Image decoding, resizing and scene re-rendering.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use lgcap_core::generator::PixelNorm;
use lgcap_core::split::{Manifest, ManifestEntry};
use lgcap_core::synthetic::{Scene, SCENE_PREFIX};
use lgcap_core::{Image, TaskStream};

use crate::error::{AppError, AppResult};

/// Decodes `path`, converts to RGB and resizes to `size × size`; pixels in
/// `[0, 1]`.
pub fn load_rgb(path: &Path, size: usize) -> AppResult<Image> {
    let img = image::open(path).map_err(|e| AppError::Image { path: path.to_path_buf(), msg: e.to_string() })?;
    let rgb = img.to_rgb8();
    let resized = image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
    let data = resized.as_raw().iter().map(|&b| f32::from(b) / 255.0).collect();
    Ok(Image::new(size, size, data)?)
}

/// Model input for one file: RGB, resized, normalized with fixed constants.
/// The result is a batch of one; see [`batch_shape`].
pub fn preprocess_image(path: &Path, size: usize, norm: &PixelNorm) -> AppResult<Image> {
    Ok(norm.apply(&load_rgb(path, size)?))
}

/// `[1, H, W, 3]`
pub fn batch_shape(img: &Image) -> [usize; 4] {
    [1, img.height, img.width, 3]
}

/// Resolves a manifest entry: scene codes are rendered, anything else is a
/// path relative to `root`.
pub fn load_entry(entry: &ManifestEntry, root: &Path, size: usize) -> AppResult<Image> {
    if entry.file.starts_with(SCENE_PREFIX) {
        let img = Scene::parse(&entry.file)?.render(size);
        return Ok(img);
    }
    let p = PathBuf::from(&entry.file);
    let p = if p.is_absolute() { p } else { root.join(p) };
    load_rgb(&p, size)
}

/// Loads every image of the manifest using `workers` threads. Output order
/// matches the manifest regardless of the worker count.
pub fn load_stream(manifest: &Manifest, root: &Path, size: usize, workers: usize) -> AppResult<TaskStream> {
    let entries: Vec<&ManifestEntry> = manifest.tasks.iter().flat_map(|t| t.train.iter().chain(&t.val).chain(&t.test)).collect();
    let workers = workers.max(1).min(entries.len().max(1));
    let chunk = entries.len().div_ceil(workers).max(1);
    let loaded: Vec<AppResult<Image>> = std::thread::scope(|s| {
        let handles: Vec<_> = entries
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|e| load_entry(e, root, size)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("loader thread panicked")).collect()
    });
    let mut it = loaded.into_iter();
    manifest.resolve(|_| it.next().expect("one image per entry"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use lgcap_core::synthetic::build_synthetic_stream;

    #[test]
    fn grayscale_becomes_rgb_and_resizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        image::GrayImage::from_pixel(10, 7, image::Luma([0u8])).save(&p).unwrap();
        let img = preprocess_image(&p, 32, &PixelNorm::REFERENCE).unwrap();
        assert_eq!(batch_shape(&img), [1, 32, 32, 3]);
        assert!(img.data.iter().all(|&v| v == -1.0));
    }

    #[test]
    fn corrupt_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not an image").unwrap();
        let err = preprocess_image(&p, 32, &PixelNorm::REFERENCE).unwrap_err();
        assert!(err.to_string().contains("bad.png"));
    }

    #[test]
    fn worker_count_does_not_change_order() {
        let m = build_synthetic_stream(2, 8, 4).unwrap();
        let a = load_stream(&m, Path::new("."), 32, 1).unwrap();
        let b = load_stream(&m, Path::new("."), 32, 3).unwrap();
        assert_eq!(a, b);
    }
}
