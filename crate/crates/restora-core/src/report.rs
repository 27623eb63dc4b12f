//! Run reports and trace export.
//!
//! Reports carry one row per image with metrics, fitted statistics, and
//! refinement counts; they serialize to CSV and JSON with identical field
//! content. Trace CSVs use the fixed column schema
//! `t,stage,j_deg,j_mse,j_pse,j_adv,q,score`.

use crate::guide::TraceRecord;
use serde::{Deserialize, Serialize};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub image: String,
    pub task: String,
    pub psnr_before: Option<f64>,
    pub ssim_before: Option<f64>,
    pub psnr_after: Option<f64>,
    pub ssim_after: Option<f64>,
    pub alpha_pixel: Option<f64>,
    pub sigma_pixel: Option<f64>,
    pub alpha_latent: Option<f64>,
    pub sigma_latent: Option<f64>,
    pub j_deg_clean: Option<f64>,
    pub refine_rounds: Option<usize>,
    /// Populated only when timing output is requested; excluded from
    /// reproducibility comparisons.
    pub wall_ms: Option<f64>,
}

impl ReportRow {
    pub fn new(image: impl Into<String>, task: impl Into<String>) -> Self {
        ReportRow {
            image: image.into(),
            task: task.into(),
            psnr_before: None,
            ssim_before: None,
            psnr_after: None,
            ssim_after: None,
            alpha_pixel: None,
            sigma_pixel: None,
            alpha_latent: None,
            sigma_latent: None,
            j_deg_clean: None,
            refine_rounds: None,
            wall_ms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn new(rows: Vec<ReportRow>) -> Self {
        Report {
            version: REPORT_SCHEMA_VERSION,
            rows,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "image,task,psnr_before,ssim_before,psnr_after,ssim_after,alpha_pixel,sigma_pixel,alpha_latent,sigma_latent,j_deg_clean,refine_rounds,wall_ms\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.image,
                r.task,
                opt(r.psnr_before),
                opt(r.ssim_before),
                opt(r.psnr_after),
                opt(r.ssim_after),
                opt(r.alpha_pixel),
                opt(r.sigma_pixel),
                opt(r.alpha_latent),
                opt(r.sigma_latent),
                opt(r.j_deg_clean),
                r.refine_rounds.map(|v| v.to_string()).unwrap_or_default(),
                opt(r.wall_ms),
            ));
        }
        out
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Fixed-schema trace export.
pub fn trace_to_csv(trace: &[TraceRecord]) -> String {
    let mut out = String::from("t,stage,j_deg,j_mse,j_pse,j_adv,q,score\n");
    for rec in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            rec.t,
            rec.stage.name(),
            opt(rec.j_deg),
            opt(rec.j_mse),
            opt(rec.j_pse),
            opt(rec.j_adv),
            opt(rec.q),
            opt(rec.score),
        ));
    }
    out
}
