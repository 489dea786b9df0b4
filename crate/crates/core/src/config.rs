//! Run configuration: one structured document covering every stage, with
//! defaults for each key, strict rejection of unknown keys, and a content
//! hash embedded in all outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionConfig;
use crate::domain::DomainConfig;
use crate::dpo::AlignmentConfig;
use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::ranker::{RankerConfig, ScorerKind};
use crate::vae::VaeConfig;

/// Preference-dataset build settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PamBuildConfig {
    /// Generations per generator per prompt.
    pub k: usize,
    /// Pool generations from both generators (raw + latent) instead of the
    /// aligned family only.
    pub pam_plus: bool,
    pub scorer: ScorerKind,
    /// Train-split prompts included in the dataset.
    pub n_prompts: usize,
}

impl Default for PamBuildConfig {
    fn default() -> Self {
        PamBuildConfig {
            k: 4,
            pam_plus: true,
            scorer: ScorerKind::Learned,
            n_prompts: 256,
        }
    }
}

/// The whole run configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub domain: DomainConfig,
    pub vae: VaeConfig,
    pub diffusion_raw: DiffusionConfig,
    pub diffusion_latent: DiffusionConfig,
    pub ranker: RankerConfig,
    pub pam: PamBuildConfig,
    pub align: AlignmentConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Defaults tuned for the desk-scale pipeline.
    pub fn desk_default() -> RunConfig {
        let mut cfg = RunConfig {
            seed: 42,
            ..Default::default()
        };
        // The latent denoiser works in a 16-dim space; a slimmer trunk
        // trains faster and is plenty.
        cfg.diffusion_latent.hidden = vec![64, 64];
        cfg.diffusion_latent.steps = 4000;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        self.vae.validate()?;
        self.diffusion_raw.validate()?;
        self.diffusion_latent.validate()?;
        self.ranker.validate()?;
        self.align.validate()?;
        if self.pam.k == 0 || self.pam.n_prompts == 0 {
            return Err(Error::Config("pam.k and pam.n_prompts must be positive".to_string()));
        }
        if self.eval.pool_size < 2 || self.eval.n_gen == 0 || self.eval.n_prompts == 0 {
            return Err(Error::Config("eval sizes must be positive".to_string()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<RunConfig> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Content hash of the canonical (JSON) serialization.
    pub fn hash(&self) -> String {
        crate::hashing::hash_bytes(
            serde_json::to_string(self)
                .expect("config serializes")
                .as_bytes(),
        )
    }

    /// Hash of one section's canonical serialization (used in stage keys).
    pub fn section_json<T: Serialize>(section: &T) -> String {
        serde_json::to_string(section).expect("section serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::desk_default();
        let text = cfg.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "seed = 1\n[domain]\nfps = 20\nnot_a_key = 3\n";
        let err = RunConfig::from_toml_str(text).unwrap_err();
        assert!(matches!(err, Error::Config(_)));

        let text = "seed = 1\nmystery = true\n";
        assert!(matches!(
            RunConfig::from_toml_str(text).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn partial_configs_get_defaults() {
        let cfg = RunConfig::from_toml_str("seed = 7\n[vae]\nlatent_dim = 8\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.vae.latent_dim, 8);
        assert_eq!(cfg.vae.hidden, VaeConfig::default().hidden);
    }

    #[test]
    fn hash_tracks_every_section() {
        let base = RunConfig::desk_default();
        let mut changed = base.clone();
        changed.align.beta_dpo += 1.0;
        assert_ne!(base.hash(), changed.hash());
        let mut changed = base.clone();
        changed.eval.pool_size = 16;
        assert_ne!(base.hash(), changed.hash());
    }

    #[test]
    fn invalid_sections_fail_validation() {
        let mut cfg = RunConfig::desk_default();
        cfg.align.beta_dpo = -1.0;
        assert!(matches!(cfg.validate().unwrap_err(), Error::Config(_)));
    }
}
