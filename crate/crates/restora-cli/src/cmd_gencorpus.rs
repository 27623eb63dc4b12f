//! `restora gencorpus`: deterministic toy corpus plus manifest.

use crate::util::{ensure_dir, sha256_hex, write_bytes, write_json};
use crate::Cli;
use restora_core::corpus::{generate_one, pattern_name, CorpusSpec};
use restora_core::error::{Error, Result};
use restora_core::imgproc::encode_ppm;
use serde::Serialize;
use std::path::PathBuf;

#[derive(clap::Args)]
pub struct Args {
    /// Number of images.
    #[arg(long, default_value_t = 10)]
    pub count: usize,

    /// Image size as HxW (e.g. 32x32).
    #[arg(long, default_value = "32x32")]
    pub size: String,
}

#[derive(Serialize)]
struct ManifestImage {
    file: String,
    pattern: &'static str,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    version: u32,
    count: usize,
    height: usize,
    width: usize,
    master_seed: u64,
    corpus_sha256: String,
    images: Vec<ManifestImage>,
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s.split_once('x').ok_or_else(|| Error::InvalidParam {
        name: "size",
        value: s.to_string(),
        reason: "expected HxW",
    })?;
    let parse = |v: &str| {
        v.parse::<usize>().map_err(|_| Error::InvalidParam {
            name: "size",
            value: s.to_string(),
            reason: "expected HxW integers",
        })
    };
    Ok((parse(h)?, parse(w)?))
}

pub fn run(cli: &Cli, args: &Args) -> Result<()> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("corpus"));
    ensure_dir(&out)?;
    let (height, width) = parse_size(&args.size)?;
    let spec = CorpusSpec {
        count: args.count,
        height,
        width,
        master_seed: cli.seed.unwrap_or(42),
    };
    let mut images = Vec::with_capacity(args.count);
    let mut running = String::new();
    for i in 0..spec.count {
        let img = generate_one(&spec, i)?;
        let bytes = encode_ppm(&img)?;
        let file = format!("img_{i:03}.ppm");
        write_bytes(&out.join(&file), &bytes)?;
        let sha = sha256_hex(&bytes);
        running.push_str(&sha);
        images.push(ManifestImage {
            file,
            pattern: pattern_name(i),
            sha256: sha,
        });
    }
    let manifest = Manifest {
        version: 1,
        count: spec.count,
        height,
        width,
        master_seed: spec.master_seed,
        corpus_sha256: sha256_hex(running.as_bytes()),
        images,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    println!(
        "wrote {} images to {} (corpus sha256 {})",
        spec.count,
        out.display(),
        manifest.corpus_sha256
    );
    Ok(())
}
