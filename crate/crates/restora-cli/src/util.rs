//! Shared helpers: directory listing, hashing, manifests, and a
//! deterministic parallel map.

use restora_core::error::{Error, Result};
use restora_core::imgproc::{load_image, Image};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

/// Sorted list of PPM/PGM files in a directory.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|s| s.to_str()),
                Some("ppm") | Some("pgm")
            )
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Pairing(format!(
            "no .ppm/.pgm files in {}",
            dir.display()
        )));
    }
    Ok(files)
}

pub fn load_dir(dir: &Path) -> Result<Vec<(String, Image)>> {
    list_images(dir)?
        .into_iter()
        .map(|p| {
            let name = p
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("image")
                .to_string();
            load_image(&p).map(|img| (name, img))
        })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json serialization");
    write_bytes(path, text.as_bytes())
}

/// Parallel map with deterministic output order; the pool size is the --jobs
/// value, and results are identical regardless of it.
pub fn par_map<T, U, F>(jobs: usize, items: Vec<T>, f: F) -> Result<Vec<U>>
where
    T: Send + Sync,
    U: Send,
    F: Fn(usize, &T) -> Result<U> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        use rayon::prelude::*;
        items
            .par_iter()
            .enumerate()
            .map(|(i, item)| f(i, item))
            .collect()
    })
}
