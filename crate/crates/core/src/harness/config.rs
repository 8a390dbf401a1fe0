use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{FrontendConfig, MaskPolicy, SpecAugment};
use crate::error::{Error, Result};
use crate::fed::HyperParams;
use crate::model::ModelConfig;
use crate::objective::{Augmentation, DaeLossWeights, LossWeights};

pub const SEED_ENV: &str = "FEDCRY_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OodSource {
    #[default]
    Synthetic,
    /// Every `.wav` file in the directory, sorted by name.
    WavDir(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub sites: usize,
    /// Clips generated per class per site; the pool is then re-split by the
    /// Dirichlet partitioner.
    pub clips_per_class: usize,
    pub clip_seconds: f64,
    /// Model input length in frames.
    pub frames: usize,
    pub dirichlet_alpha: f64,
    /// SNR grid in dB; `inf` means no overlay.
    pub snr_levels: Vec<f64>,
    /// Extra held-out-site evaluations of each final model, one per SNR
    /// (`inf` = no overlay); the stress copies are mixed independently of
    /// the training overlays.
    pub eval_snr_levels: Vec<f64>,
    /// Held-out-site folds per seed, rotating with the seed index.
    pub folds_per_seed: usize,
    /// Fractions of the training sites kept out for temperature fitting and
    /// for the abstention threshold.
    pub calibration_fraction: f64,
    pub threshold_fraction: f64,
    pub ood_source: OodSource,
    pub ood_clips: usize,
    /// CSV with `path,label[,site]` rows replacing synthetic cries.
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub secure: bool,
    pub target_tpr: f64,
    pub energy_temperature: f64,
    pub eval_batch: usize,
    pub frontend: FrontendConfig,
    pub model: ModelConfig,
    pub losses: LossWeights,
    pub dae_loss: DaeLossWeights,
    pub augment: Augmentation,
    /// DAE reconstructs the pre-overlay spectrogram of each training clip.
    pub dae_clean_targets: bool,
    pub fed: HyperParams,
}

/// Desk-scale model on 48-frame inputs.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        patch_t: 8,
        patch_f: 16,
        token_dim: 32,
        layers: 3,
        heads: 4,
        mlp_dim: 64,
        dae_channels: [6, 8],
        ..ModelConfig::default()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            sites: 3,
            clips_per_class: 40,
            clip_seconds: 0.8,
            frames: 48,
            dirichlet_alpha: 0.5,
            snr_levels: vec![f64::INFINITY, 10.0, 5.0, 0.0],
            eval_snr_levels: vec![f64::INFINITY, 10.0, 5.0, 0.0],
            folds_per_seed: 1,
            calibration_fraction: 0.15,
            threshold_fraction: 0.15,
            ood_source: OodSource::Synthetic,
            ood_clips: 100,
            manifest: None,
            output_dir: PathBuf::from("out"),
            secure: true,
            target_tpr: 0.95,
            energy_temperature: 1.0,
            eval_batch: 64,
            frontend: FrontendConfig::default(),
            model: desk_model(),
            losses: LossWeights::default(),
            dae_loss: DaeLossWeights::default(),
            augment: Augmentation {
                noise_std: 0.1,
                mask: MaskPolicy {
                    count: 1,
                    ..MaskPolicy::default()
                },
                view: Some(SpecAugment::default()),
            },
            dae_clean_targets: true,
            fed: HyperParams {
                rounds: 30,
                clients_per_round: 2,
                lr: 5e-4,
                ..HyperParams::default()
            },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Replaces the seed list with the value of `FEDCRY_SEED`, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seeds = parse_seeds(&v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sites == 0 {
            return bad("sites must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if !(self.dirichlet_alpha > 0.0) {
            return bad(format!(
                "dirichlet_alpha must be positive, got {}",
                self.dirichlet_alpha
            ));
        }
        if self.snr_levels.is_empty()
            || self
                .snr_levels
                .iter()
                .any(|s| s.is_nan() || *s == f64::NEG_INFINITY)
        {
            return bad(format!("invalid snr_levels {:?}", self.snr_levels));
        }
        if self
            .eval_snr_levels
            .iter()
            .any(|s| s.is_nan() || *s == f64::NEG_INFINITY)
        {
            return bad(format!(
                "invalid eval_snr_levels {:?}",
                self.eval_snr_levels
            ));
        }
        if self.folds_per_seed == 0 || self.folds_per_seed > self.sites {
            return bad(format!("folds_per_seed must lie in 1..={}", self.sites));
        }
        if self.sites < 2 {
            return bad("site-held-out evaluation needs at least 2 sites".into());
        }
        let (c, t) = (self.calibration_fraction, self.threshold_fraction);
        if !(c > 0.0 && t > 0.0 && c + t < 0.9) {
            return bad(format!("calibration/threshold fractions {c}/{t} must be positive and leave data to train on"));
        }
        if !(self.target_tpr > 0.0 && self.target_tpr < 1.0) || !(self.energy_temperature > 0.0) {
            return bad(
                "target_tpr must lie in (0, 1) and energy_temperature must be positive".into(),
            );
        }
        if self.frames == 0 || self.eval_batch == 0 {
            return bad("frames and eval_batch must be positive".into());
        }
        let need = self.frontend.samples_for(self.frames) as f64 / crate::audio::SAMPLE_RATE as f64;
        if self.clip_seconds < need.max(0.5) {
            return bad(format!(
                "clip_seconds {} shorter than the {} frame window",
                self.clip_seconds, self.frames
            ));
        }
        if self.model.n_classes != crate::audio::NUM_CRY_CLASSES && self.manifest.is_none() {
            return bad(format!(
                "synthetic data has {} classes",
                crate::audio::NUM_CRY_CLASSES
            ));
        }
        self.frontend.validate()?;
        self.model.validate()?;
        self.losses.validate()?;
        self.dae_loss.validate()?;
        self.fed.validate()?;
        if let Some(m) = &self.manifest {
            if !m.is_file() {
                return bad(format!("manifest {} not found", m.display()));
            }
        }
        if let OodSource::WavDir(d) = &self.ood_source {
            if !d.is_dir() {
                return bad(format!("OOD directory {} not found", d.display()));
            }
        }
        Ok(())
    }
}

/// Comma- or whitespace-separated list of seeds.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = s
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Config(format!("bad seed {t:?} in {SEED_ENV}")))
        })
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::Config(format!("{SEED_ENV} is empty")));
    }
    Ok(seeds)
}
