//! `restora eval`: full-reference metrics between two directories paired by
//! filename.

use crate::util::{ensure_dir, load_dir, write_bytes, write_json};
use crate::Cli;
use restora_core::error::{Error, Result};
use restora_core::imgproc::{psnr, ssim};
use restora_core::report::{Report, ReportRow};
use std::path::PathBuf;

#[derive(clap::Args)]
pub struct Args {
    /// Directory of restored (or otherwise processed) images.
    #[arg(long)]
    pub restored: PathBuf,

    /// Directory of reference images.
    #[arg(long)]
    pub reference: PathBuf,

    /// Task label recorded in the report.
    #[arg(long, default_value = "eval")]
    pub task: String,
}

pub fn run(cli: &Cli, args: &Args) -> Result<()> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("eval"));
    ensure_dir(&out)?;
    let restored = load_dir(&args.restored)?;
    let reference = load_dir(&args.reference)?;
    if restored.len() != reference.len() {
        return Err(Error::Pairing(format!(
            "file sets differ: {} restored vs {} reference",
            restored.len(),
            reference.len()
        )));
    }
    for ((a, _), (b, _)) in restored.iter().zip(&reference) {
        if a != b {
            return Err(Error::Pairing(format!(
                "unpaired files: {a:?} vs {b:?} (pairing is by filename)"
            )));
        }
    }
    let mut rows = Vec::with_capacity(restored.len());
    for ((name, img), (_, clean)) in restored.iter().zip(&reference) {
        let mut row = ReportRow::new(name.clone(), args.task.clone());
        row.psnr_after = Some(psnr(img, clean)?);
        row.ssim_after = Some(ssim(img, clean)?);
        rows.push(row);
    }
    let report = Report::new(rows);
    write_bytes(&out.join("report.csv"), report.to_csv().as_bytes())?;
    write_json(&out.join("report.json"), &report)?;
    println!("evaluated {} pairs into {}", report.rows.len(), out.display());
    Ok(())
}
