//! Image datasets: lazily decoded image folders or in-memory sets.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;

const EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Clone, Debug, PartialEq)]
enum Source {
    Files(Vec<PathBuf>),
    Memory(Vec<Image>),
}

/// A fixed-order collection of square training images at `size x size`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    source: Source,
    size: usize,
}

/// Result of scanning an image folder.
#[derive(Clone, Debug, PartialEq)]
pub struct Ingested {
    pub train: Dataset,
    pub val: Dataset,
    /// Files with an image extension whose header could not be read.
    pub skipped: Vec<PathBuf>,
}

impl Dataset {
    /// In-memory images, resized to `size` when needed.
    pub fn from_images(images: Vec<Image>, size: usize) -> Self {
        let images = images.into_iter().map(|im| im.resized(size, size)).collect();
        Dataset { source: Source::Memory(images), size }
    }

    pub fn len(&self) -> usize {
        match &self.source {
            Source::Files(p) => p.len(),
            Source::Memory(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn paths(&self) -> Option<&[PathBuf]> {
        match &self.source {
            Source::Files(p) => Some(p),
            Source::Memory(_) => None,
        }
    }

    /// Decodes (for folders) and squashes image `i` to `size x size`.
    pub fn get(&self, i: usize) -> Result<Image> {
        match &self.source {
            Source::Files(paths) => Ok(Image::load_png(&paths[i])?.resized(self.size, self.size)),
            Source::Memory(images) => Ok(images[i].clone()),
        }
    }

    pub fn all(&self) -> Result<Vec<Image>> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}

fn split_key(path: &Path) -> [u8; 32] {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Sha256::digest(name.as_bytes()).into()
}

/// Scans `root` (non-recursively) for decodable images.
///
/// Files are listed in name order. When `val_fraction > 0`, the
/// `round(n * val_fraction)` files with the smallest name hashes form the
/// validation split.
pub fn ingest_dataset(root: &Path, size: usize, val_fraction: f64) -> Result<Ingested> {
    let ingest_err = |message: String| Error::Ingestion { path: root.to_path_buf(), message };
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(ingest_err(format!("validation fraction must lie in [0, 1), got {val_fraction}")));
    }
    let entries = std::fs::read_dir(root).map_err(|e| ingest_err(e.to_string()))?;
    let mut candidates: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    candidates.sort();
    let mut files = Vec::new();
    let mut skipped = Vec::new();
    for p in candidates {
        let readable = ::image::ImageReader::open(&p)
            .ok()
            .and_then(|r| r.with_guessed_format().ok())
            .and_then(|r| r.into_dimensions().ok())
            .is_some_and(|(w, h)| w > 0 && h > 0);
        if readable {
            files.push(p);
        } else {
            log::warn!("skipping unreadable image {}", p.display());
            skipped.push(p);
        }
    }
    if files.is_empty() {
        return Err(ingest_err(format!("no decodable images ({} skipped)", skipped.len())));
    }
    let n_val = (files.len() as f64 * val_fraction).round() as usize;
    let mut by_hash: Vec<&PathBuf> = files.iter().collect();
    by_hash.sort_by_key(|p| split_key(p));
    let val_set: Vec<PathBuf> = by_hash[..n_val].iter().map(|p| (*p).clone()).collect();
    let (val, train): (Vec<PathBuf>, Vec<PathBuf>) = files.into_iter().partition(|p| val_set.contains(p));
    if train.is_empty() {
        return Err(ingest_err("validation split leaves no training images".into()));
    }
    Ok(Ingested {
        train: Dataset { source: Source::Files(train), size },
        val: Dataset { source: Source::Files(val), size },
        skipped,
    })
}
