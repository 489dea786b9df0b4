//! Staged experiment pipeline: each stage reads its upstream artifacts,
//! writes content-addressed outputs plus a summary, and is a no-op when
//! re-run with unchanged inputs.
//!
//! Stage keys are pure functions of the run config, so downstream stages
//! can verify that an upstream artifact was built under the current config
//! (a mismatch is a staleness error; a missing pointer names the stage
//! that must run first).

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::artifacts::{ArtifactStore, StageSummary};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::diffusion::{Generator, SpaceKind};
use crate::domain::{load_splits, save_splits, DatasetSplits, PromptSpec};
use crate::dpo::{align_offline, align_online, AlignOutcome, AlignmentConfig, GtLookup};
use crate::error::{Error, Result};
use crate::hashing::{hash_file, PartHasher};
use crate::metrics::{winner_loser_protocol, ProtocolOutput};
use crate::pam::{load_pam, save_pam};
use crate::ranker::{GeneratorTag, JointEmbedder, Scorer, ScorerKind};
use crate::seeding::{derive_seed, derived_rng};
use crate::vae::{VaeModel, VaeStructure};

pub const STAGE_GEN_DATA: &str = "gen-data";
pub const STAGE_TRAIN_VAE: &str = "train-vae";
pub const STAGE_TRAIN_DIFFUSION_RAW: &str = "train-diffusion-raw";
pub const STAGE_TRAIN_DIFFUSION_LATENT: &str = "train-diffusion-latent";
pub const STAGE_TRAIN_RANKER: &str = "train-ranker";
pub const STAGE_BUILD_PAM: &str = "build-pam";
pub const STAGE_ALIGN: &str = "align";
pub const STAGE_EVAL_BASE: &str = "eval-base";
pub const STAGE_EVAL_ALIGNED: &str = "eval-aligned";
pub const STAGE_ABLATE: &str = "ablate";
pub const STAGE_REPORT: &str = "report";

/// Which checkpoint an eval run measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTarget {
    Base,
    Aligned,
}

/// Orchestrates all stages against one artifact store.
pub struct Pipeline {
    pub config: RunConfig,
    pub store: ArtifactStore,
    config_hash: String,
}

impl Pipeline {
    pub fn new(config: RunConfig, out_dir: impl Into<PathBuf>) -> Result<Pipeline> {
        config.validate()?;
        let config_hash = config.hash();
        Ok(Pipeline {
            config,
            store: ArtifactStore::new(out_dir),
            config_hash,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    fn key(&self, stage: &str, sections: &[String], upstream: &[(&str, String)]) -> String {
        let mut h = PartHasher::new("stage-key-v1");
        h.text(stage);
        h.part(&self.config.seed.to_le_bytes());
        for s in sections {
            h.text(s);
        }
        for (name, key) in upstream {
            h.text(name).text(key);
        }
        h.finish()
    }

    // ----- stage keys (pure functions of the config) -----

    pub fn gen_data_key(&self) -> String {
        self.key(
            STAGE_GEN_DATA,
            &[RunConfig::section_json(&self.config.domain)],
            &[],
        )
    }

    pub fn vae_key(&self) -> String {
        self.key(
            STAGE_TRAIN_VAE,
            &[RunConfig::section_json(&self.config.vae)],
            &[(STAGE_GEN_DATA, self.gen_data_key())],
        )
    }

    pub fn diffusion_key(&self, space: SpaceKind) -> String {
        match space {
            SpaceKind::Raw => self.key(
                STAGE_TRAIN_DIFFUSION_RAW,
                &[RunConfig::section_json(&self.config.diffusion_raw)],
                &[(STAGE_GEN_DATA, self.gen_data_key())],
            ),
            SpaceKind::Latent => self.key(
                STAGE_TRAIN_DIFFUSION_LATENT,
                &[RunConfig::section_json(&self.config.diffusion_latent)],
                &[
                    (STAGE_GEN_DATA, self.gen_data_key()),
                    (STAGE_TRAIN_VAE, self.vae_key()),
                ],
            ),
        }
    }

    pub fn ranker_key(&self) -> String {
        self.key(
            STAGE_TRAIN_RANKER,
            &[RunConfig::section_json(&self.config.ranker)],
            &[(STAGE_GEN_DATA, self.gen_data_key())],
        )
    }

    fn pam_generator_spaces(&self) -> Vec<SpaceKind> {
        if self.config.pam.pam_plus {
            vec![SpaceKind::Raw, SpaceKind::Latent]
        } else {
            vec![self.config.align.family]
        }
    }

    pub fn pam_key(&self) -> String {
        let mut upstream = vec![(STAGE_GEN_DATA, self.gen_data_key())];
        for space in self.pam_generator_spaces() {
            upstream.push((stage_for_space(space), self.diffusion_key(space)));
        }
        if self.config.pam.scorer == ScorerKind::Learned {
            upstream.push((STAGE_TRAIN_RANKER, self.ranker_key()));
        }
        self.key(
            STAGE_BUILD_PAM,
            &[RunConfig::section_json(&self.config.pam)],
            &upstream,
        )
    }

    pub fn align_key(&self) -> String {
        let mut upstream = vec![
            (STAGE_GEN_DATA, self.gen_data_key()),
            (
                stage_for_space(self.config.align.family),
                self.diffusion_key(self.config.align.family),
            ),
        ];
        if self.config.align.online {
            if self.config.pam.scorer == ScorerKind::Learned {
                upstream.push((STAGE_TRAIN_RANKER, self.ranker_key()));
            }
        } else {
            upstream.push((STAGE_BUILD_PAM, self.pam_key()));
        }
        self.key(
            STAGE_ALIGN,
            &[RunConfig::section_json(&self.config.align)],
            &upstream,
        )
    }

    pub fn eval_key(&self, target: EvalTarget) -> String {
        let (stage, model_key) = match target {
            EvalTarget::Base => (
                stage_for_space(self.config.align.family),
                self.diffusion_key(self.config.align.family),
            ),
            EvalTarget::Aligned => (STAGE_ALIGN, self.align_key()),
        };
        self.key(
            eval_stage_name(target),
            &[RunConfig::section_json(&self.config.eval)],
            &[
                (stage, model_key),
                (STAGE_TRAIN_RANKER, self.ranker_key()),
                (STAGE_GEN_DATA, self.gen_data_key()),
            ],
        )
    }

    // ----- loading helpers -----

    fn load_dataset(&self) -> Result<DatasetSplits> {
        let summary = self
            .store
            .load_upstream(STAGE_GEN_DATA, &self.gen_data_key())?;
        load_splits(&self.store.stage_dir(STAGE_GEN_DATA, &summary.key))
    }

    pub fn load_vae(&self) -> Result<VaeModel> {
        let summary = self.store.load_upstream(STAGE_TRAIN_VAE, &self.vae_key())?;
        let path = self.store.output_path(&summary, "vae.ckpt.json")?;
        VaeModel::from_checkpoint(&Checkpoint::load(&path)?)
    }

    pub fn load_generator(&self, space: SpaceKind) -> Result<Generator> {
        let stage = stage_for_space(space);
        let summary = self.store.load_upstream(stage, &self.diffusion_key(space))?;
        let path = self.store.output_path(&summary, "generator.ckpt.json")?;
        let vae = match space {
            SpaceKind::Raw => None,
            SpaceKind::Latent => Some(self.load_vae()?),
        };
        Generator::from_checkpoint(&Checkpoint::load(&path)?, vae)
    }

    pub fn load_embedder(&self) -> Result<JointEmbedder> {
        let summary = self
            .store
            .load_upstream(STAGE_TRAIN_RANKER, &self.ranker_key())?;
        let path = self.store.output_path(&summary, "embedder.ckpt.json")?;
        JointEmbedder::from_checkpoint(&Checkpoint::load(&path)?)
    }

    pub fn load_aligned(&self) -> Result<Generator> {
        let summary = self.store.load_upstream(STAGE_ALIGN, &self.align_key())?;
        let path = self.store.output_path(&summary, "aligned.ckpt.json")?;
        let vae = match self.config.align.family {
            SpaceKind::Raw => None,
            SpaceKind::Latent => Some(self.load_vae()?),
        };
        Generator::from_checkpoint(&Checkpoint::load(&path)?, vae)
    }

    /// Prompts the preference dataset is built over (a seeded subset of the
    /// train split).
    fn pam_prompts(&self, splits: &DatasetSplits) -> Vec<PromptSpec> {
        let all: Vec<PromptSpec> = splits.train.records.iter().map(|(p, _)| *p).collect();
        if self.config.pam.n_prompts >= all.len() {
            return all;
        }
        let mut idx: Vec<usize> = (0..all.len()).collect();
        let mut rng = derived_rng(self.config.seed, "pam-prompts", 0);
        for i in (1..idx.len()).rev() {
            let j = rand::Rng::gen_range(&mut rng, 0..=i);
            idx.swap(i, j);
        }
        let mut chosen: Vec<usize> = idx[..self.config.pam.n_prompts].to_vec();
        chosen.sort_unstable();
        chosen.into_iter().map(|i| all[i]).collect()
    }

    fn base_meta(&self) -> BTreeMap<String, String> {
        let mut meta = BTreeMap::new();
        meta.insert("config_hash".to_string(), self.config_hash.clone());
        meta.insert("seed".to_string(), self.config.seed.to_string());
        meta
    }

    fn finish_stage(
        &self,
        stage: &str,
        key: String,
        inputs: BTreeMap<String, String>,
        files: &[(&str, &[u8])],
        stats: BTreeMap<String, f64>,
    ) -> Result<StageSummary> {
        let dir = self.store.stage_dir(stage, &key);
        let mut outputs = BTreeMap::new();
        for (name, bytes) in files {
            let path = dir.join(name);
            crate::artifacts::atomic_write(&path, bytes)?;
            outputs.insert(name.to_string(), hash_file(&path)?);
        }
        let summary = StageSummary {
            stage: stage.to_string(),
            key,
            config_hash: self.config_hash.clone(),
            inputs,
            outputs,
            stats,
        };
        self.store.write_summary(&summary)?;
        Ok(summary)
    }

    // ----- stages -----

    pub fn gen_data(&self) -> Result<StageSummary> {
        let key = self.gen_data_key();
        if self.store.is_complete(STAGE_GEN_DATA, &key) {
            return self.store.load_summary(STAGE_GEN_DATA, &key);
        }
        let splits = crate::domain::build_dataset(
            self.config.domain.n_prompts,
            derive_seed(self.config.seed, "data", 0),
            &self.config.domain,
        )?;
        let dir = self.store.stage_dir(STAGE_GEN_DATA, &key);
        save_splits(&dir, &splits)?;
        let mut outputs = BTreeMap::new();
        for name in ["train.jsonl", "val.jsonl", "test.jsonl", "norm_stats.json"] {
            outputs.insert(name.to_string(), hash_file(&dir.join(name))?);
        }
        let mut stats = BTreeMap::new();
        stats.insert("train_records".to_string(), splits.train.len() as f64);
        stats.insert("val_records".to_string(), splits.val.len() as f64);
        stats.insert("test_records".to_string(), splits.test.len() as f64);
        let summary = StageSummary {
            stage: STAGE_GEN_DATA.to_string(),
            key,
            config_hash: self.config_hash.clone(),
            inputs: BTreeMap::new(),
            outputs,
            stats,
        };
        self.store.write_summary(&summary)?;
        Ok(summary)
    }

    pub fn train_vae(&self) -> Result<StageSummary> {
        let key = self.vae_key();
        if self.store.is_complete(STAGE_TRAIN_VAE, &key) {
            return self.store.load_summary(STAGE_TRAIN_VAE, &key);
        }
        let splits = self.load_dataset()?;
        let structure = VaeStructure {
            latent_dim: self.config.vae.latent_dim,
            hidden: self.config.vae.hidden,
            frames: self.config.domain.frames,
            fps: self.config.domain.fps,
            f_min: self.config.domain.f_min,
            f_max: self.config.domain.f_max,
        };
        let (model, history) = crate::vae::train_vae(
            &splits.train,
            &self.config.vae,
            structure,
            derive_seed(self.config.seed, "vae", 0),
        )?;
        let mut meta = self.base_meta();
        meta.insert("steps".to_string(), self.config.vae.steps.to_string());
        let ckpt = model.to_checkpoint(meta)?;
        let history_lines: String = history
            .iter()
            .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
            .collect::<std::result::Result<String, _>>()?;
        let mut stats = BTreeMap::new();
        if let Some(last) = history.last() {
            stats.insert("final_loss".to_string(), last.total);
            stats.insert("final_recon".to_string(), last.recon);
        }
        let inputs = BTreeMap::from([(STAGE_GEN_DATA.to_string(), self.gen_data_key())]);
        self.finish_stage(
            STAGE_TRAIN_VAE,
            key,
            inputs,
            &[
                ("vae.ckpt.json", serde_json::to_string(&ckpt)?.as_bytes()),
                ("history.jsonl", history_lines.as_bytes()),
            ],
            stats,
        )
    }

    pub fn train_diffusion(&self, space: SpaceKind) -> Result<StageSummary> {
        let stage = stage_for_space(space);
        let key = self.diffusion_key(space);
        if self.store.is_complete(stage, &key) {
            return self.store.load_summary(stage, &key);
        }
        let splits = self.load_dataset()?;
        let stats_norm = splits.norm_stats().clone();
        let (cfg, vae, seed_tag) = match space {
            SpaceKind::Raw => (&self.config.diffusion_raw, None, "diff-raw"),
            SpaceKind::Latent => (
                &self.config.diffusion_latent,
                Some(self.load_vae()?),
                "diff-latent",
            ),
        };

        // Encode the train split into the diffusion space.
        let n = splits.train.len();
        let dim = match (&vae, space) {
            (_, SpaceKind::Raw) => self.config.domain.frames * crate::domain::FEATURE_COUNT,
            (Some(v), SpaceKind::Latent) => v.structure.latent_dim,
            _ => unreachable!(),
        };
        let mut states = ndarray::Array2::<f64>::zeros((n, dim));
        let mut conds = Vec::with_capacity(n);
        for (i, (p, m)) in splits.train.records.iter().enumerate() {
            let norm = stats_norm.normalize(m)?;
            match space {
                SpaceKind::Raw => {
                    let flat = norm
                        .data
                        .into_shape((dim,))
                        .map_err(|e| Error::Contract(e.to_string()))?;
                    states.row_mut(i).assign(&flat);
                }
                SpaceKind::Latent => {
                    let enc = crate::vae::encode(&norm, vae.as_ref().unwrap())?;
                    states.row_mut(i).assign(&enc.mu);
                }
            }
            conds.push(crate::domain::render_tokens(p));
        }
        let data = crate::diffusion::DiffusionTrainData { states, conds };
        let (net, sched, history) = crate::diffusion::train_diffusion(
            &data,
            cfg,
            derive_seed(self.config.seed, seed_tag, 0),
        )?;
        let generator = Generator {
            net,
            sched,
            space,
            vae: vae.clone(),
            norm_stats: stats_norm,
            frames: self.config.domain.frames,
            fps: self.config.domain.fps,
        };
        let mut meta = self.base_meta();
        if let Some(v) = &vae {
            meta.insert(
                "vae_hash".to_string(),
                v.to_checkpoint(BTreeMap::new())?.hash().to_string(),
            );
        }
        let ckpt = generator.to_checkpoint(meta)?;
        let history_lines: String = history
            .iter()
            .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
            .collect::<std::result::Result<String, _>>()?;
        let mut stats = BTreeMap::new();
        if let Some(last) = history.last() {
            stats.insert("final_loss".to_string(), last.loss);
        }
        let mut inputs = BTreeMap::from([(STAGE_GEN_DATA.to_string(), self.gen_data_key())]);
        if space == SpaceKind::Latent {
            inputs.insert(STAGE_TRAIN_VAE.to_string(), self.vae_key());
        }
        self.finish_stage(
            stage,
            key,
            inputs,
            &[
                (
                    "generator.ckpt.json",
                    serde_json::to_string(&ckpt)?.as_bytes(),
                ),
                ("history.jsonl", history_lines.as_bytes()),
            ],
            stats,
        )
    }

    pub fn train_ranker(&self) -> Result<StageSummary> {
        let key = self.ranker_key();
        if self.store.is_complete(STAGE_TRAIN_RANKER, &key) {
            return self.store.load_summary(STAGE_TRAIN_RANKER, &key);
        }
        let splits = self.load_dataset()?;
        let (embedder, history) = crate::ranker::train_ranker(
            &splits.train,
            &self.config.ranker,
            self.config.domain.frames,
            self.config.domain.fps,
            derive_seed(self.config.seed, "ranker", 0),
        )?;
        let ckpt = embedder.to_checkpoint(self.base_meta())?;
        let history_lines: String = history
            .iter()
            .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
            .collect::<std::result::Result<String, _>>()?;
        let mut stats = BTreeMap::new();
        if let Some(last) = history.last() {
            stats.insert("final_loss".to_string(), last.loss);
        }
        let inputs = BTreeMap::from([(STAGE_GEN_DATA.to_string(), self.gen_data_key())]);
        self.finish_stage(
            STAGE_TRAIN_RANKER,
            key,
            inputs,
            &[
                (
                    "embedder.ckpt.json",
                    serde_json::to_string(&ckpt)?.as_bytes(),
                ),
                ("history.jsonl", history_lines.as_bytes()),
            ],
            stats,
        )
    }

    pub fn build_pam(&self) -> Result<StageSummary> {
        let key = self.pam_key();
        if self.store.is_complete(STAGE_BUILD_PAM, &key) {
            return self.store.load_summary(STAGE_BUILD_PAM, &key);
        }
        let splits = self.load_dataset()?;
        let prompts = self.pam_prompts(&splits);

        let spaces = self.pam_generator_spaces();
        let mut generators = Vec::new();
        for space in &spaces {
            generators.push((tag_for_space(*space), self.load_generator(*space)?));
        }
        let generator_refs: Vec<(GeneratorTag, &Generator)> =
            generators.iter().map(|(t, g)| (*t, g)).collect();

        let embedder;
        let scorer = match self.config.pam.scorer {
            ScorerKind::Oracle => Scorer::Oracle,
            ScorerKind::Learned => {
                embedder = self.load_embedder()?;
                Scorer::Learned(&embedder)
            }
        };
        let dataset = crate::pam::build_pam(
            &generator_refs,
            &prompts,
            self.config.pam.k,
            &scorer,
            derive_seed(self.config.seed, "pam", 0),
        )?;
        let dir = self.store.stage_dir(STAGE_BUILD_PAM, &key);
        let path = dir.join("pam.jsonl");
        save_pam(&path, &dataset)?;

        let mut inputs = BTreeMap::from([(STAGE_GEN_DATA.to_string(), self.gen_data_key())]);
        for space in &spaces {
            inputs.insert(
                stage_for_space(*space).to_string(),
                self.diffusion_key(*space),
            );
        }
        if self.config.pam.scorer == ScorerKind::Learned {
            inputs.insert(STAGE_TRAIN_RANKER.to_string(), self.ranker_key());
        }
        let mut outputs = BTreeMap::new();
        outputs.insert("pam.jsonl".to_string(), hash_file(&path)?);
        let mut stats = BTreeMap::new();
        stats.insert("prompts".to_string(), dataset.len() as f64);
        stats.insert(
            "candidates_per_prompt".to_string(),
            (self.config.pam.k * spaces.len()) as f64,
        );
        let summary = StageSummary {
            stage: STAGE_BUILD_PAM.to_string(),
            key,
            config_hash: self.config_hash.clone(),
            inputs,
            outputs,
            stats,
        };
        self.store.write_summary(&summary)?;
        Ok(summary)
    }

    pub fn align(&self) -> Result<StageSummary> {
        let key = self.align_key();
        if self.store.is_complete(STAGE_ALIGN, &key) {
            return self.store.load_summary(STAGE_ALIGN, &key);
        }
        let splits = self.load_dataset()?;
        let base = self.load_generator(self.config.align.family)?;
        let base_hash = base.to_checkpoint(BTreeMap::new())?.hash().to_string();

        let gt: GtLookup = splits
            .train
            .records
            .iter()
            .map(|(p, m)| (p.prompt_id, m.clone()))
            .collect();

        let align_cfg = AlignmentConfig {
            seed: derive_seed(self.config.seed, "align", 0),
            ..self.config.align.clone()
        };

        let mut inputs = BTreeMap::from([
            (STAGE_GEN_DATA.to_string(), self.gen_data_key()),
            (
                stage_for_space(self.config.align.family).to_string(),
                self.diffusion_key(self.config.align.family),
            ),
        ]);
        let mut pam_hash = "online".to_string();
        let outcome: AlignOutcome = if self.config.align.online {
            let embedder;
            let scorer = match self.config.pam.scorer {
                ScorerKind::Oracle => Scorer::Oracle,
                ScorerKind::Learned => {
                    embedder = self.load_embedder()?;
                    inputs.insert(STAGE_TRAIN_RANKER.to_string(), self.ranker_key());
                    Scorer::Learned(&embedder)
                }
            };
            let prompts = self.pam_prompts(&splits);
            align_online(&prompts, &base, &scorer, &gt, &align_cfg)?
        } else {
            let pam_summary = self.store.load_upstream(STAGE_BUILD_PAM, &self.pam_key())?;
            inputs.insert(STAGE_BUILD_PAM.to_string(), self.pam_key());
            let pam_path = self.store.output_path(&pam_summary, "pam.jsonl")?;
            let pam = load_pam(&pam_path)?;
            pam_hash = pam.manifest.content_hash.clone();
            align_offline(&pam, &gt, &base, &align_cfg)?
        };

        let mut meta = self.base_meta();
        meta.insert("base_checkpoint".to_string(), base_hash);
        meta.insert("pam_hash".to_string(), pam_hash);
        meta.insert(
            "alignment_config".to_string(),
            serde_json::to_string(&align_cfg)?,
        );
        let ckpt = outcome.aligned.to_checkpoint(meta)?;
        let log_lines: String = outcome
            .log
            .iter()
            .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
            .collect::<std::result::Result<String, _>>()?;
        let mut stats = BTreeMap::new();
        if let Some(last) = outcome.log.last() {
            stats.insert("final_loss".to_string(), last.loss);
        }
        if !outcome.log.is_empty() {
            let tail = outcome.log.len() - (outcome.log.len() / 5).max(1);
            let acc: f64 = outcome.log[tail..]
                .iter()
                .map(|r| r.implicit_accuracy)
                .sum::<f64>()
                / (outcome.log.len() - tail) as f64;
            stats.insert("tail_implicit_accuracy".to_string(), acc);
        }
        self.finish_stage(
            STAGE_ALIGN,
            key,
            inputs,
            &[
                ("aligned.ckpt.json", serde_json::to_string(&ckpt)?.as_bytes()),
                ("align_log.jsonl", log_lines.as_bytes()),
            ],
            stats,
        )
    }

    /// Evaluation prompts: fresh seeded draws outside the dataset id range.
    pub fn eval_prompts(&self) -> Vec<PromptSpec> {
        let n = self.config.eval.n_prompts;
        let mut prompts = Vec::with_capacity(n);
        for i in 0..n {
            let action = crate::domain::Action::ALL[i % crate::domain::Action::ALL.len()];
            let mut rng = derived_rng(self.config.seed, "eval-prompt", i as u64);
            use rand::Rng;
            prompts.push(PromptSpec {
                action,
                speed: rng.gen_range(crate::domain::SPEED_RANGE.0..crate::domain::SPEED_RANGE.1),
                amplitude: rng
                    .gen_range(crate::domain::AMPLITUDE_RANGE.0..crate::domain::AMPLITUDE_RANGE.1),
                direction: rng.gen_range(0.0..std::f64::consts::TAU),
                prompt_id: 1_000_000 + i as u64,
            });
        }
        prompts
    }

    /// Run the winner/loser protocol for a checkpoint.
    pub fn run_protocol(&self, target: EvalTarget) -> Result<ProtocolOutput> {
        let generator = match target {
            EvalTarget::Base => self.load_generator(self.config.align.family)?,
            EvalTarget::Aligned => self.load_aligned()?,
        };
        let embedder = self.load_embedder()?;
        let scorer = Scorer::Learned(&embedder);
        let prompts = self.eval_prompts();
        let model_id = generator.to_checkpoint(BTreeMap::new())?.hash()[..12].to_string();
        winner_loser_protocol(
            &generator,
            &embedder,
            &scorer,
            &prompts,
            &self.config.domain,
            &self.config.eval,
            &model_id,
            derive_seed(self.config.seed, "eval", 0),
        )
    }

    pub fn eval(&self, target: EvalTarget) -> Result<StageSummary> {
        let stage = eval_stage_name(target);
        let key = self.eval_key(target);
        if self.store.is_complete(stage, &key) {
            return self.store.load_summary(stage, &key);
        }
        let output = self.run_protocol(target)?;

        let json = serde_json::to_string_pretty(&output)?;
        let mut csv = String::from(crate::metrics::EvalReport::csv_header());
        csv.push('\n');
        for r in [&output.all, &output.winners, &output.losers] {
            csv.push_str(&r.csv_row());
            csv.push('\n');
        }
        let mut stats = BTreeMap::new();
        stats.insert("fid".to_string(), output.all.fid.mean);
        if let Some(of) = &output.all.oracle_fid {
            stats.insert("oracle_fid".to_string(), of.mean);
        }
        stats.insert("top3".to_string(), output.all.top3.mean);
        stats.insert("fid_gap".to_string(), output.fid_gap);
        stats.insert("oracle_fid_gap".to_string(), output.oracle_fid_gap);
        if let Some(mm) = &output.all.multimodality {
            stats.insert("multimodality".to_string(), mm.mean);
        }

        let model_stage = match target {
            EvalTarget::Base => stage_for_space(self.config.align.family).to_string(),
            EvalTarget::Aligned => STAGE_ALIGN.to_string(),
        };
        let model_key = match target {
            EvalTarget::Base => self.diffusion_key(self.config.align.family),
            EvalTarget::Aligned => self.align_key(),
        };
        let inputs = BTreeMap::from([
            (model_stage, model_key),
            (STAGE_TRAIN_RANKER.to_string(), self.ranker_key()),
            (STAGE_GEN_DATA.to_string(), self.gen_data_key()),
        ]);
        self.finish_stage(
            stage,
            key,
            inputs,
            &[
                ("eval.json", json.as_bytes()),
                ("eval.csv", csv.as_bytes()),
            ],
            stats,
        )
    }

    /// Run every stage needed for a full offline evaluation, in order.
    pub fn run_all(&self) -> Result<Vec<StageSummary>> {
        let mut out = vec![self.gen_data()?, self.train_vae()?];
        for space in self.pam_generator_spaces() {
            out.push(self.train_diffusion(space)?);
        }
        if self.config.align.family == SpaceKind::Latent
            && !self
                .pam_generator_spaces()
                .contains(&SpaceKind::Latent)
        {
            out.push(self.train_diffusion(SpaceKind::Latent)?);
        }
        out.push(self.train_ranker()?);
        if !self.config.align.online {
            out.push(self.build_pam()?);
        }
        out.push(self.align()?);
        out.push(self.eval(EvalTarget::Base)?);
        out.push(self.eval(EvalTarget::Aligned)?);
        out.push(self.report()?);
        Ok(out)
    }

    pub fn report(&self) -> Result<StageSummary> {
        let base = self.store.load_upstream(
            eval_stage_name(EvalTarget::Base),
            &self.eval_key(EvalTarget::Base),
        )?;
        let aligned = self.store.load_upstream(
            eval_stage_name(EvalTarget::Aligned),
            &self.eval_key(EvalTarget::Aligned),
        )?;
        let key = self.key(
            STAGE_REPORT,
            &[RunConfig::section_json(&self.config.eval)],
            &[
                (STAGE_EVAL_BASE, base.key.clone()),
                (STAGE_EVAL_ALIGNED, aligned.key.clone()),
            ],
        );
        if self.store.is_complete(STAGE_REPORT, &key) {
            return self.store.load_summary(STAGE_REPORT, &key);
        }

        let load_output = |summary: &StageSummary| -> Result<ProtocolOutput> {
            let path = self.store.output_path(summary, "eval.json")?;
            Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
        };
        let base_out = load_output(&base)?;
        let aligned_out = load_output(&aligned)?;

        let align_summary = self.store.load_latest(STAGE_ALIGN)?;
        let aligned_ckpt =
            Checkpoint::load(&self.store.output_path(&align_summary, "aligned.ckpt.json")?)?;
        let base_ckpt_hash = aligned_ckpt
            .meta
            .get("base_checkpoint")
            .cloned()
            .unwrap_or_default();
        let pam_hash = aligned_ckpt.meta.get("pam_hash").cloned().unwrap_or_default();

        #[derive(Serialize)]
        struct Report<'a> {
            config_hash: &'a str,
            base_checkpoint: &'a str,
            pam_hash: &'a str,
            base: &'a ProtocolOutput,
            aligned: &'a ProtocolOutput,
            fid_gap_base: f64,
            fid_gap_aligned: f64,
            oracle_fid_gap_base: f64,
            oracle_fid_gap_aligned: f64,
        }
        let report = Report {
            config_hash: &self.config_hash,
            base_checkpoint: &base_ckpt_hash,
            pam_hash: &pam_hash,
            base: &base_out,
            aligned: &aligned_out,
            fid_gap_base: base_out.fid_gap,
            fid_gap_aligned: aligned_out.fid_gap,
            oracle_fid_gap_base: base_out.oracle_fid_gap,
            oracle_fid_gap_aligned: aligned_out.oracle_fid_gap,
        };
        let json = serde_json::to_string_pretty(&report)?;

        let mut csv = String::from("model,");
        csv.push_str(crate::metrics::EvalReport::csv_header());
        csv.push_str(",base_checkpoint,pam_hash,config_hash\n");
        for (label, r) in [
            ("base", &base_out.all),
            ("base_winners", &base_out.winners),
            ("base_losers", &base_out.losers),
            ("aligned", &aligned_out.all),
            ("aligned_winners", &aligned_out.winners),
            ("aligned_losers", &aligned_out.losers),
        ] {
            csv.push_str(&format!(
                "{label},{},{},{},{}\n",
                r.csv_row(),
                &base_ckpt_hash[..12.min(base_ckpt_hash.len())],
                &pam_hash[..12.min(pam_hash.len())],
                &self.config_hash[..12],
            ));
        }

        let inputs = BTreeMap::from([
            (eval_stage_name(EvalTarget::Base).to_string(), base.key),
            (eval_stage_name(EvalTarget::Aligned).to_string(), aligned.key),
        ]);
        let mut stats = BTreeMap::new();
        stats.insert(
            "fid_improvement".to_string(),
            base_out.all.fid.mean - aligned_out.all.fid.mean,
        );
        self.finish_stage(
            STAGE_REPORT,
            key,
            inputs,
            &[
                ("report.json", json.as_bytes()),
                ("report.csv", csv.as_bytes()),
            ],
            stats,
        )
    }
}

fn stage_for_space(space: SpaceKind) -> &'static str {
    match space {
        SpaceKind::Raw => STAGE_TRAIN_DIFFUSION_RAW,
        SpaceKind::Latent => STAGE_TRAIN_DIFFUSION_LATENT,
    }
}

fn eval_stage_name(target: EvalTarget) -> &'static str {
    match target {
        EvalTarget::Base => STAGE_EVAL_BASE,
        EvalTarget::Aligned => STAGE_EVAL_ALIGNED,
    }
}

fn tag_for_space(space: SpaceKind) -> GeneratorTag {
    match space {
        SpaceKind::Raw => GeneratorTag::Raw,
        SpaceKind::Latent => GeneratorTag::Latent,
    }
}

/// One row of the ablation grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationVariant {
    pub name: String,
    pub scorer: ScorerKind,
    pub stochastic: bool,
    #[serde(default)]
    pub gt_p: f64,
    #[serde(default)]
    pub online: bool,
    #[serde(default)]
    pub pam_plus: bool,
}

/// The ablation grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub variants: Vec<AblationVariant>,
}

impl AblationGrid {
    pub fn validate(&self) -> Result<()> {
        let mut names = std::collections::HashSet::new();
        for v in &self.variants {
            if !names.insert(&v.name) {
                return Err(Error::Config(format!("duplicate grid row name {}", v.name)));
            }
            if !(0.0..=1.0).contains(&v.gt_p) {
                return Err(Error::Config(format!("{}: gt_p outside [0,1]", v.name)));
            }
        }
        Ok(())
    }

    pub fn from_path(path: &std::path::Path) -> Result<AblationGrid> {
        let grid: AblationGrid = toml::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Config(e.to_string()))?;
        grid.validate()?;
        Ok(grid)
    }

    /// Scorer x selection grid with defaults elsewhere.
    pub fn default_grid() -> AblationGrid {
        let mut variants = Vec::new();
        for scorer in [ScorerKind::Learned, ScorerKind::Oracle] {
            for stochastic in [true, false] {
                variants.push(AblationVariant {
                    name: format!(
                        "{:?}-{}",
                        scorer,
                        if stochastic { "stoch" } else { "edge" }
                    )
                    .to_lowercase(),
                    scorer,
                    stochastic,
                    gt_p: 0.0,
                    online: false,
                    pam_plus: false,
                });
            }
        }
        AblationGrid { variants }
    }
}

impl Pipeline {
    /// Derive the per-variant config: the grid axes override the pam and
    /// align sections, everything else stays.
    pub fn variant_config(&self, v: &AblationVariant) -> RunConfig {
        let mut cfg = self.config.clone();
        cfg.pam.scorer = v.scorer;
        cfg.pam.pam_plus = v.pam_plus;
        cfg.align.selection = if v.stochastic {
            crate::pam::SelectionKind::Stochastic
        } else {
            crate::pam::SelectionKind::Edge
        };
        cfg.align.gt_p = v.gt_p;
        cfg.align.online = v.online;
        cfg
    }

    /// Run the grid: align + eval per variant (cached by content key), and
    /// emit one CSV with the grid axes, metrics, and provenance.
    pub fn ablate(&self, grid: &AblationGrid) -> Result<StageSummary> {
        grid.validate()?;
        let grid_json = serde_json::to_string(grid)?;
        let key = self.key(STAGE_ABLATE, &[grid_json], &[]);
        if self.store.is_complete(STAGE_ABLATE, &key) {
            return self.store.load_summary(STAGE_ABLATE, &key);
        }

        let mut csv = String::from(
            "name,scorer,stochastic,gt_p,online,pam_plus,top3,mm_dist,diversity,fid,multimodality,oracle_fid,config_hash\n",
        );
        // Baseline row: the unaligned checkpoint.
        let base_eval = self.eval(EvalTarget::Base)?;
        let base_out: ProtocolOutput = {
            let path = self.store.output_path(&base_eval, "eval.json")?;
            serde_json::from_str(&std::fs::read_to_string(path)?)?
        };
        let fmt_opt = |s: &Option<crate::metrics::Stat>| match s {
            Some(v) => v.to_string(),
            None => "-".to_string(),
        };
        csv.push_str(&format!(
            "without-alignment,-,-,-,-,-,{},{},{},{},{},{},{}\n",
            base_out.all.top3,
            base_out.all.mm_dist,
            base_out.all.diversity,
            base_out.all.fid,
            fmt_opt(&base_out.all.multimodality),
            fmt_opt(&base_out.all.oracle_fid),
            &self.config_hash[..12],
        ));

        let mut inputs = BTreeMap::new();
        for v in &grid.variants {
            let cfg = self.variant_config(v);
            let sub = Pipeline::new(cfg, self.store.root().to_path_buf())?;
            if !v.pam_plus || sub.config.align.online {
                // Variant may need generators the default path skipped.
                for space in sub.pam_generator_spaces() {
                    sub.train_diffusion(space)?;
                }
            }
            if !sub.config.align.online {
                sub.build_pam()?;
            }
            sub.align()?;
            let eval = sub.eval(EvalTarget::Aligned)?;
            inputs.insert(format!("variant:{}", v.name), eval.key.clone());
            let out: ProtocolOutput = {
                let path = sub.store.output_path(&eval, "eval.json")?;
                serde_json::from_str(&std::fs::read_to_string(path)?)?
            };
            csv.push_str(&format!(
                "{},{:?},{},{},{},{},{},{},{},{},{},{},{}\n",
                v.name,
                v.scorer,
                v.stochastic,
                v.gt_p,
                v.online,
                v.pam_plus,
                out.all.top3,
                out.all.mm_dist,
                out.all.diversity,
                out.all.fid,
                fmt_opt(&out.all.multimodality),
                fmt_opt(&out.all.oracle_fid),
                &sub.config_hash[..12],
            ));
        }

        self.finish_stage(
            STAGE_ABLATE,
            key,
            inputs,
            &[("ablation.csv", csv.as_bytes())],
            BTreeMap::new(),
        )
    }
}
