//! `restora fit`: per-image GGD statistics in the pixel or latent domain,
//! plus pixel histograms.

use crate::util::{ensure_dir, load_dir, write_bytes};
use crate::Cli;
use restora_core::error::{Error, Result};
use restora_core::ggd::ggd_fit;
use restora_core::imgproc::pixel_histogram;
use restora_core::latent::{encode, latent_stats, latent_stats_per_channel};
use std::path::PathBuf;

#[derive(clap::Args)]
pub struct Args {
    /// Source directory of PPM images.
    #[arg(long)]
    pub input: PathBuf,

    /// Statistics domain.
    #[arg(long, value_parser = ["pixel", "latent"], default_value = "latent")]
    pub domain: String,

    /// Histogram bin count.
    #[arg(long, default_value_t = 50)]
    pub bins: usize,

    /// Keep per-block DC coefficients in latent statistics.
    #[arg(long)]
    pub include_dc: bool,

    /// Emit one row per channel instead of pooling.
    #[arg(long)]
    pub per_channel: bool,
}

pub fn run(cli: &Cli, args: &Args) -> Result<()> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("stats"));
    ensure_dir(&out)?;
    let images = load_dir(&args.input)?;

    let mut csv = String::from("image,domain,alpha,sigma\n");
    for (name, img) in &images {
        match args.domain.as_str() {
            "pixel" => {
                // Zero-mean fit over pooled, mean-subtracted pixel values.
                let mean = img.data().iter().sum::<f64>() / img.data().len() as f64;
                let centered: Vec<f64> = img.data().iter().map(|v| v - mean).collect();
                let fit = ggd_fit(&centered)?;
                csv.push_str(&format!(
                    "{name},pixel,{},{}\n",
                    fit.params.alpha, fit.params.sigma
                ));
            }
            "latent" => {
                let z = encode(img);
                if args.per_channel {
                    let fits = latent_stats_per_channel(&z, !args.include_dc)?;
                    for (ch, fit) in fits.iter().enumerate() {
                        csv.push_str(&format!(
                            "{name},latent_ch{ch},{},{}\n",
                            fit.params.alpha, fit.params.sigma
                        ));
                    }
                } else {
                    let fit = latent_stats(&z, !args.include_dc)?;
                    csv.push_str(&format!(
                        "{name},latent,{},{}\n",
                        fit.params.alpha, fit.params.sigma
                    ));
                }
            }
            other => {
                return Err(Error::InvalidParam {
                    name: "domain",
                    value: other.to_string(),
                    reason: "expected pixel or latent",
                })
            }
        }
        let hist = pixel_histogram(img, args.bins)?;
        write_bytes(
            &out.join(format!("{name}_hist.csv")),
            hist.to_csv().as_bytes(),
        )?;
    }
    write_bytes(&out.join("ggd_fits.csv"), csv.as_bytes())?;
    println!(
        "fitted {} images ({} domain) into {}",
        images.len(),
        args.domain,
        out.display()
    );
    Ok(())
}
