//! Run configuration files: flat TOML with one key per training setting.
//!
//! ```toml
//! dataset = "shapes.dmmd"
//! output_dir = "runs/shapes"
//! epochs = 300
//! lr_schedule = [[0, 1e-3], [150, 3e-4], [250, 1e-4]]
//! gamma = 0.01
//! ```
//!
//! Every key except `dataset` and `output_dir` is optional and falls back to
//! the base configuration. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{DmmError, Result};
use crate::infer::DEFAULT_EPSILON;
use crate::train::TrainConfig;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dataset: PathBuf,
    output_dir: PathBuf,
    epsilon: Option<f32>,
    checkpoint_every: Option<usize>,
    seed: Option<u64>,
    epochs: Option<usize>,
    warmup_epochs: Option<usize>,
    batch_size: Option<usize>,
    lr_schedule: Option<Vec<(usize, f32)>>,
    codes: Option<usize>,
    code_dim: Option<usize>,
    kappa: Option<f32>,
    alpha: Option<f32>,
    beta: Option<f32>,
    gamma: Option<f32>,
    height: Option<usize>,
    width: Option<usize>,
    latent: Option<usize>,
    encoder_hidden: Option<Vec<usize>>,
    generator_hidden: Option<Vec<usize>>,
    fixed_codebook: Option<bool>,
    learnable_classifier: Option<bool>,
    log_recon: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    pub epsilon: f32,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub train: TrainConfig,
    /// Whether the file fixed the image size rather than leaving it to the
    /// dataset.
    pub explicit_image_size: bool,
}

impl RunConfig {
    /// Parses `text`, starting from `base` for every key the file omits.
    pub fn parse(text: &str, base: TrainConfig) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            let msg = e.message().trim().to_string();
            DmmError::Config(match line {
                Some(l) => format!("line {l}: {msg}"),
                None => msg,
            })
        })?;
        let mut t = base;
        let explicit_image_size = raw.height.is_some() || raw.width.is_some();
        set(&mut t.seed, raw.seed);
        set(&mut t.epochs, raw.epochs);
        set(&mut t.warmup_epochs, raw.warmup_epochs);
        set(&mut t.batch_size, raw.batch_size);
        set(&mut t.kappa, raw.kappa);
        set(&mut t.weights.alpha, raw.alpha);
        set(&mut t.weights.beta, raw.beta);
        set(&mut t.weights.gamma, raw.gamma);
        set(&mut t.dims.codes, raw.codes);
        set(&mut t.dims.code_dim, raw.code_dim);
        set(&mut t.dims.height, raw.height);
        set(&mut t.dims.width, raw.width);
        set(&mut t.dims.latent, raw.latent);
        set(&mut t.fixed_codebook, raw.fixed_codebook);
        set(&mut t.learnable_classifier, raw.learnable_classifier);
        set(&mut t.log_recon, raw.log_recon);
        if let Some(v) = raw.lr_schedule {
            t.lr_schedule = v;
        }
        if let Some(v) = raw.encoder_hidden {
            t.dims.encoder_hidden = v;
        }
        if let Some(v) = raw.generator_hidden {
            t.dims.generator_hidden = v;
        }
        t.validate()?;
        let epsilon = raw.epsilon.unwrap_or(DEFAULT_EPSILON);
        if !(epsilon > 0.0 && (epsilon as f64) < 1.0 / t.dims.codes as f64) {
            return Err(DmmError::Config(format!(
                "epsilon {epsilon} must lie in (0, 1/{})",
                t.dims.codes
            )));
        }
        Ok(Self {
            dataset: raw.dataset,
            output_dir: raw.output_dir,
            epsilon,
            checkpoint_every: raw.checkpoint_every.unwrap_or(0),
            train: t,
            explicit_image_size,
        })
    }

    /// Reads a config file; relative dataset and output paths are resolved
    /// against the file's directory.
    pub fn load(path: impl AsRef<Path>, base: TrainConfig) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| DmmError::io(path, e))?;
        let mut cfg = Self::parse(&text, base)
            .map_err(|e| DmmError::Config(format!("{}: {}", path.display(), strip_prefix(e))))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        cfg.dataset = dir.join(&cfg.dataset);
        cfg.output_dir = dir.join(&cfg.output_dir);
        Ok(cfg)
    }
}

fn set<T>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

fn strip_prefix(e: DmmError) -> String {
    match e {
        DmmError::Config(s) => s,
        other => other.to_string(),
    }
}
