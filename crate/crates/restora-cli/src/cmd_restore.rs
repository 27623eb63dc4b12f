//! `restora restore`: staged guided restoration over a directory.
//!
//! The diffusion schedule, restoration hyperparameters, and prior source all
//! come from the flat config file; per-image seeds derive from the master
//! seed so runs are byte-reproducible at any --jobs value.

use crate::util::{ensure_dir, load_dir, par_map, write_bytes, write_json};
use crate::Cli;
use restora_core::config::{self, FlatConfig};
use restora_core::diffusion::{fit_gmm, make_schedule, DiffusionSchedule, GmmPrior};
use restora_core::error::{Error, Result};
use restora_core::ggd::{ggd_fit, ggd_kld, GgdFit};
use restora_core::guide::{run_restoration, RestoreConfig};
use restora_core::imgproc::{encode_ppm, psnr, ssim, Image};
use restora_core::latent::{encode, latent_stats, stats_indices};
use restora_core::refine::{fit_pristine_model, QualityModel};
use restora_core::report::{trace_to_csv, Report, ReportRow};
use restora_core::rng::derive_seed;
use std::path::PathBuf;

#[derive(clap::Args)]
pub struct Args {
    /// Directory of degraded PPM images.
    #[arg(long)]
    pub input: PathBuf,

    /// Optional clean references (paired by filename) for before/after
    /// metrics.
    #[arg(long)]
    pub reference: Option<PathBuf>,

    /// Prefitted quality model JSON; fitted from the prior corpus otherwise.
    #[arg(long)]
    pub quality_model: Option<PathBuf>,

    /// Record wall-clock times in the report (non-reproducible field).
    #[arg(long)]
    pub timings: bool,

    /// Task label recorded in the report (defaults to the config preset).
    #[arg(long)]
    pub task: Option<String>,
}

struct Setup {
    sched: DiffusionSchedule,
    restore_cfg: RestoreConfig,
    prior: GmmPrior,
    quality: QualityModel,
    clean_ref: Option<GgdFit>,
    task: String,
}

fn build_setup(cli: &Cli, args: &Args) -> Result<Setup> {
    let flat = match &cli.config {
        Some(path) => FlatConfig::load(path)?,
        None => FlatConfig::default(),
    };
    let sp = config::schedule_params(&flat)?;
    let sched = make_schedule(sp.t_steps, sp.beta_start, sp.beta_end, sp.delta_mode)?;
    let mut restore_cfg = config::restore_config(&flat)?;
    if let Some(seed) = cli.seed {
        restore_cfg.seed = seed;
    }

    let pp = config::prior_params(&flat)?;
    let (prior, corpus) = if let Some(path) = &pp.path {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.clone(), e))?;
        let prior: GmmPrior = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("prior {path}: {e}")))?;
        prior.validate()?;
        (prior, None)
    } else if let Some(dir) = &pp.corpus_dir {
        let corpus = load_dir(PathBuf::from(dir).as_path())?;
        let latents: Vec<Vec<f64>> = corpus
            .iter()
            .map(|(_, img)| {
                restora_core::latent::encode_field(&img.as_field(), restore_cfg.latent_block)
                    .data()
                    .to_vec()
            })
            .collect();
        let fit = fit_gmm(&latents, pp.k, pp.seed, pp.iters, pp.var_floor)?;
        (fit.prior, Some(corpus))
    } else {
        return Err(Error::Config(
            "restore needs prior.path or prior.corpus in the config".into(),
        ));
    };

    let quality = match &args.quality_model {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("quality model {}: {e}", path.display())))?
        }
        None => {
            let corpus = corpus.as_ref().ok_or_else(|| {
                Error::Config(
                    "restore needs --quality-model or a prior.corpus to fit one from".into(),
                )
            })?;
            let images: Vec<Image> = corpus.iter().map(|(_, img)| img.clone()).collect();
            fit_pristine_model(&images)?
        }
    };

    // Pooled clean-corpus statistics anchor the report's alignment column.
    let clean_ref = corpus.as_ref().and_then(|corpus| {
        let mut pooled = Vec::new();
        for (_, img) in corpus {
            let z = restora_core::latent::encode_field(&img.as_field(), restore_cfg.latent_block);
            let idx = stats_indices(&z, restore_cfg.exclude_dc);
            pooled.extend(idx.iter().map(|&i| z.data()[i]));
        }
        ggd_fit(&pooled).ok()
    });

    let task = args
        .task
        .clone()
        .unwrap_or_else(|| flat.get("guide.task_preset").unwrap_or("denoise").to_string());
    Ok(Setup {
        sched,
        restore_cfg,
        prior,
        quality,
        clean_ref,
        task,
    })
}

pub fn run(cli: &Cli, args: &Args) -> Result<()> {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("restored"));
    ensure_dir(&out)?;
    let trace_dir = out.join("traces");
    ensure_dir(&trace_dir)?;
    let setup = build_setup(cli, args)?;
    let inputs = load_dir(&args.input)?;
    let references = match &args.reference {
        Some(dir) => {
            let refs = load_dir(dir)?;
            if refs.len() != inputs.len()
                || refs.iter().zip(&inputs).any(|((a, _), (b, _))| a != b)
            {
                return Err(Error::Pairing(
                    "reference directory does not pair one-to-one by filename with the input"
                        .into(),
                ));
            }
            Some(refs)
        }
        None => None,
    };

    let results = par_map(cli.jobs, inputs, |i, (name, x_lq)| {
        let mut cfg = setup.restore_cfg.clone();
        cfg.seed = derive_seed(setup.restore_cfg.seed, "image", i as u64);
        let started = std::time::Instant::now();
        let result = run_restoration(x_lq, &cfg, &setup.sched, &setup.prior, &setup.quality)?;
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;

        let mut row = ReportRow::new(name.clone(), setup.task.clone());
        if let Some(refs) = &references {
            let clean = &refs[i].1;
            row.psnr_before = Some(psnr(x_lq, clean)?);
            row.ssim_before = Some(ssim(x_lq, clean)?);
            row.psnr_after = Some(psnr(&result.restored, clean)?);
            row.ssim_after = Some(ssim(&result.restored, clean)?);
        }
        // Fitted statistics of the restored image in both domains.
        let mean = result.restored.data().iter().sum::<f64>()
            / result.restored.data().len() as f64;
        let centered: Vec<f64> = result.restored.data().iter().map(|v| v - mean).collect();
        if let Ok(fit) = ggd_fit(&centered) {
            row.alpha_pixel = Some(fit.params.alpha);
            row.sigma_pixel = Some(fit.params.sigma);
        }
        let z = encode(&result.restored);
        if let Ok(fit) = latent_stats(&z, setup.restore_cfg.exclude_dc) {
            row.alpha_latent = Some(fit.params.alpha);
            row.sigma_latent = Some(fit.params.sigma);
            if let Some(cref) = &setup.clean_ref {
                row.j_deg_clean = Some(ggd_kld(
                    &fit.params,
                    &cref.params,
                    setup.restore_cfg.kld_variant,
                ));
            }
        }
        row.refine_rounds = Some(result.refine_rounds_used);
        if args.timings {
            row.wall_ms = Some(wall_ms);
        }
        let bytes = encode_ppm(&result.restored)?;
        Ok((name.clone(), bytes, trace_to_csv(&result.trace), row))
    })?;

    let mut rows = Vec::with_capacity(results.len());
    for (name, bytes, trace_csv, row) in results {
        write_bytes(&out.join(format!("{name}.ppm")), &bytes)?;
        write_bytes(
            &trace_dir.join(format!("{name}_trace.csv")),
            trace_csv.as_bytes(),
        )?;
        rows.push(row);
    }
    let report = Report::new(rows);
    write_bytes(&out.join("report.csv"), report.to_csv().as_bytes())?;
    write_json(&out.join("report.json"), &report)?;
    // Persist the fitted model pieces so later runs can reuse them via
    // prior.path and --quality-model.
    write_json(&out.join("prior.json"), &setup.prior)?;
    write_json(&out.join("quality_model.json"), &setup.quality)?;
    println!(
        "restored {} images into {}",
        report.rows.len(),
        out.display()
    );
    Ok(())
}
