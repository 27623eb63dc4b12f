//! Flat key-value configuration: `dotted.key=value` lines, `#` comments.
//! Every language parses this identically, which keeps cross-tool runs
//! byte-reproducible.

use crate::diffusion::{DeltaMode, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T};
use crate::error::{Error, Result};
use crate::guide::{DegOpTarget, GuidanceScaleMode, PhiMode, RestoreConfig};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Default)]
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(FlatConfig { entries })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected a number, got {s:?}"))),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected an integer, got {s:?}"))),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected an integer, got {s:?}"))),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(s) => Err(Error::Config(format!(
                "{key}: expected true/false, got {s:?}"
            ))),
        }
    }
}

/// Schedule parameters carried in the config file.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleParams {
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub delta_mode: DeltaMode,
}

pub fn schedule_params(cfg: &FlatConfig) -> Result<ScheduleParams> {
    let delta_mode = match cfg.get("diffusion.delta_mode") {
        None | Some("sigma_t") => DeltaMode::SigmaT,
        Some(s) => {
            let v: f64 = s.parse().map_err(|_| {
                Error::Config(format!(
                    "diffusion.delta_mode: expected sigma_t or a number, got {s:?}"
                ))
            })?;
            DeltaMode::Fixed(v)
        }
    };
    Ok(ScheduleParams {
        t_steps: cfg.get_usize("diffusion.T", DEFAULT_T)?,
        beta_start: cfg.get_f64("diffusion.beta_start", DEFAULT_BETA_START)?,
        beta_end: cfg.get_f64("diffusion.beta_end", DEFAULT_BETA_END)?,
        delta_mode,
    })
}

/// Builds the restoration config: the task preset supplies defaults, then
/// explicit keys override field by field.
pub fn restore_config(cfg: &FlatConfig) -> Result<RestoreConfig> {
    let task = cfg.get("guide.task_preset").unwrap_or("denoise");
    let mut rc = RestoreConfig::preset(task);
    rc.guidance_scale = cfg.get_f64("guide.Z", rc.guidance_scale)?;
    for (i, name) in ["lambda1", "lambda2", "lambda3", "lambda4", "lambda5", "lambda6"]
        .iter()
        .enumerate()
    {
        rc.lambda[i] = cfg.get_f64(&format!("guide.{name}"), rc.lambda[i])?;
    }
    rc.tau = cfg.get_f64("guide.tau", rc.tau)?;
    rc.eta = cfg.get_f64("guide.eta", rc.eta)?;
    rc.dt_check = cfg.get_usize("guide.dt_check", rc.dt_check)?;
    rc.t_prime = cfg.get_usize("guide.t_prime", rc.t_prime)?;
    if let Some(s) = cfg.get("guide.stages") {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("guide.stages: expected four integers, got {s:?}")))?;
        if parts.len() != 4 {
            return Err(Error::Config(format!(
                "guide.stages: expected four integers, got {s:?}"
            )));
        }
        rc.stage_bounds = (parts[0], parts[1], parts[2], parts[3]);
    }
    rc.max_refine_rounds = cfg.get_usize("guide.max_refine_rounds", rc.max_refine_rounds)?;
    if let Some(s) = cfg.get("guide.kld_variant") {
        rc.kld_variant = s.parse()?;
    }
    rc.seed = cfg.get_u64("guide.seed", rc.seed)?;
    rc.phi_mode = match cfg.get("guide.phi_mode") {
        None | Some("operator") => PhiMode::Operator,
        Some("identity") => PhiMode::Identity,
        Some(s) => {
            return Err(Error::Config(format!(
                "guide.phi_mode: expected operator|identity, got {s:?}"
            )))
        }
    };
    rc.scale_mode = match cfg.get("guide.scale_mode") {
        None | Some("zdelta") => GuidanceScaleMode::ZDelta,
        Some("raw") => GuidanceScaleMode::RawDelta,
        Some(s) => {
            return Err(Error::Config(format!(
                "guide.scale_mode: expected zdelta|raw, got {s:?}"
            )))
        }
    };
    rc.degop_lr = cfg.get_f64("degop.lr", rc.degop_lr)?;
    rc.degop_target = match cfg.get("degop.target") {
        None | Some("xlq") => DegOpTarget::Observation,
        Some("x0hat") => DegOpTarget::Prediction,
        Some(s) => {
            return Err(Error::Config(format!(
                "degop.target: expected xlq|x0hat, got {s:?}"
            )))
        }
    };
    rc.exclude_dc = cfg.get_bool("guide.exclude_dc", rc.exclude_dc)?;
    rc.latent_block = cfg.get_usize("latent.block", rc.latent_block)?;
    if rc.latent_block == 0 {
        return Err(Error::Config("latent.block must be positive".into()));
    }
    rc.audit_gradients = cfg.get_bool("guide.audit", rc.audit_gradients)?;
    Ok(rc)
}

/// Prior construction parameters (fit from a corpus directory unless a
/// prefitted JSON path is given).
#[derive(Debug, Clone, PartialEq)]
pub struct PriorParams {
    pub k: usize,
    pub iters: usize,
    pub seed: u64,
    pub var_floor: f64,
    pub path: Option<String>,
    pub corpus_dir: Option<String>,
}

pub fn prior_params(cfg: &FlatConfig) -> Result<PriorParams> {
    Ok(PriorParams {
        k: cfg.get_usize("prior.k", 5)?,
        iters: cfg.get_usize("prior.iters", 30)?,
        seed: cfg.get_u64("prior.seed", 0)?,
        var_floor: cfg.get_f64("prior.var_floor", 1e-4)?,
        path: cfg.get("prior.path").map(str::to_string),
        corpus_dir: cfg.get("prior.corpus").map(str::to_string),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ggd::KldVariant;

    #[test]
    fn parses_dotted_keys_and_comments() {
        let text = "# comment\nguide.Z=4000\n\n guide.tau = 0.5 \ndiffusion.T=1000\n";
        let cfg = FlatConfig::parse(text).unwrap();
        assert_eq!(cfg.get("guide.Z"), Some("4000"));
        assert_eq!(cfg.get("guide.tau"), Some("0.5"));
        assert!(FlatConfig::parse("not a pair").is_err());
    }

    #[test]
    fn restore_config_defaults_and_overrides() {
        let cfg = FlatConfig::parse(
            "guide.task_preset=lowlight\nguide.Z=200\nguide.lambda2=2.5\nguide.kld_variant=as_printed\nguide.stages=800,600,100,0\n",
        )
        .unwrap();
        let rc = restore_config(&cfg).unwrap();
        assert_eq!(rc.guidance_scale, 200.0);
        assert_eq!(rc.lambda[0], 1e-5); // preset value survives
        assert_eq!(rc.lambda[1], 2.5); // explicit override
        assert_eq!(rc.kld_variant, KldVariant::AsPrinted);
        assert_eq!(rc.stage_bounds, (800, 600, 100, 0));
        assert!(restore_config(&FlatConfig::parse("guide.phi_mode=magic\n").unwrap()).is_err());
    }

    #[test]
    fn schedule_params_defaults() {
        let cfg = FlatConfig::parse("").unwrap();
        let sp = schedule_params(&cfg).unwrap();
        assert_eq!(sp.t_steps, 1000);
        assert_eq!(sp.beta_start, 1e-4);
        assert_eq!(sp.beta_end, 0.02);
        assert_eq!(sp.delta_mode, DeltaMode::SigmaT);
        let cfg = FlatConfig::parse("diffusion.delta_mode=0.01\n").unwrap();
        assert_eq!(
            schedule_params(&cfg).unwrap().delta_mode,
            DeltaMode::Fixed(0.01)
        );
    }
}
