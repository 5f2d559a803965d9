//! Experiment configuration, read from TOML. Every section is optional and
//! falls back to the desk-scale defaults; unknown keys are rejected.

use std::fs;
use std::path::Path;

use avpyramid_core::encoders::InputShapes;
use avpyramid_core::evalkit::{ClassifierConfig, ProbeConfig};
use avpyramid_core::model::ModelConfig;
use avpyramid_core::msd::SamplerMode;
use avpyramid_core::synthpair::CorpusConfig;
use avpyramid_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

/// Sizes of the corpus splits. Each split is drawn from its own seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_size: usize,
    pub test_size: usize,
    /// Pairs used to fit the alignment probe.
    pub probe_size: usize,
    /// Real clips used to fit the evaluator classifier.
    pub reference_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_size: 2048,
            test_size: 256,
            probe_size: 256,
            reference_size: 1024,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// One weighted sum of both objectives at every step.
    Joint,
    /// Contrastive objective for the first half of the epochs, diffusion
    /// objective for the rest.
    Staged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub msa_weight: f64,
    pub msd_weight: f64,
    /// Apply the terminal-step diffusion term every `k` optimizer steps;
    /// 0 never applies it.
    pub bidirectional_interval: usize,
    pub schedule: Schedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 2e-3,
            msa_weight: 1.0,
            msd_weight: 1.0,
            bidirectional_interval: 1,
            schedule: Schedule::Joint,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalScoring {
    /// Similarity at the finest pyramid level only.
    Finest,
    /// Mean of the similarities of all levels.
    MeanLevels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Batch size for inference.
    pub chunk: usize,
    pub retrieval_scoring: RetrievalScoring,
    /// Test videos used for generation metrics (taken from the front of the
    /// test split).
    pub generation_samples: usize,
    pub sampler: SamplerMode,
    /// Reverse steps; 0 uses `model.msd.sample_steps`.
    pub sample_steps: usize,
    /// Roll applied to the audio of misaligned probe pairs, in audio frames.
    pub negative_shift: usize,
    pub probe: ProbeConfig,
    pub classifier: ClassifierConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            chunk: 64,
            retrieval_scoring: RetrievalScoring::Finest,
            generation_samples: 256,
            sampler: SamplerMode::Deterministic,
            sample_steps: 0,
            negative_shift: 16,
            probe: ProbeConfig::default(),
            classifier: ClassifierConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn steps(&self, model: &ModelConfig) -> usize {
        if self.sample_steps == 0 {
            model.msd.sample_steps
        } else {
            self.sample_steps
        }
    }
}

/// Sweeps run by `ablate` in addition to the 2×2 grid. Empty lists skip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub sampling_steps: Vec<usize>,
    pub bidirectional_intervals: Vec<usize>,
    pub spatial: bool,
    pub corpus_sizes: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            sampling_steps: vec![5, 10, 25, 50, 100],
            bidirectional_intervals: Vec::new(),
            spatial: false,
            corpus_sizes: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is serialisable")
    }

    pub fn shapes(&self) -> InputShapes {
        InputShapes::from_corpus(&self.corpus)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate(&self.shapes())?;
        if self.model.pyramid.levels > self.corpus.levels {
            return Err(Error::Config(format!(
                "pyramid has {} levels but the corpus only {}",
                self.model.pyramid.levels, self.corpus.levels
            )));
        }
        let d = &self.data;
        if d.train_size < 2 || d.test_size < 2 {
            return Err(Error::Config("train and test splits need at least two pairs".into()));
        }
        if d.probe_size < 2 || d.reference_size < 2 {
            return Err(Error::Config(
                "probe and reference splits need at least two pairs".into(),
            ));
        }
        let t = &self.train;
        if t.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be at least 2".into()));
        }
        if !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        for (name, w) in [("msa_weight", t.msa_weight), ("msd_weight", t.msd_weight)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("train.{name} must be finite and >= 0")));
            }
        }
        if t.msa_weight == 0.0 && t.msd_weight == 0.0 {
            return Err(Error::Config(
                "at least one of train.msa_weight, train.msd_weight must be positive".into(),
            ));
        }
        if t.schedule == Schedule::Staged && (t.msa_weight == 0.0 || t.msd_weight == 0.0) {
            return Err(Error::Config("staged training needs both loss weights positive".into()));
        }
        let e = &self.eval;
        if e.chunk == 0 {
            return Err(Error::Config("eval.chunk must be positive".into()));
        }
        if e.generation_samples > d.test_size {
            return Err(Error::Config("eval.generation_samples exceeds the test split".into()));
        }
        if e.generation_samples > 0 && e.generation_samples <= e.classifier.hidden {
            return Err(Error::Config(format!(
                "eval.generation_samples must be 0 or exceed the classifier width {} so feature covariances are defined",
                e.classifier.hidden
            )));
        }
        let steps = e.steps(&self.model);
        if steps == 0 || steps > self.model.msd.steps {
            return Err(Error::Config(format!(
                "sampling steps {steps} outside 1..={}",
                self.model.msd.steps
            )));
        }
        if e.negative_shift == 0 || e.negative_shift >= self.corpus.audio_frames {
            return Err(Error::Config("eval.negative_shift must lie in 1..audio_frames".into()));
        }
        let a = &self.ablation;
        if let Some(&s) = a.sampling_steps.iter().find(|&&s| s == 0 || s > self.model.msd.steps) {
            return Err(Error::Config(format!(
                "ablation sampling step count {s} outside 1..={}",
                self.model.msd.steps
            )));
        }
        if a.corpus_sizes.iter().any(|&n| n < 2) {
            return Err(Error::Config("ablation corpus sizes must be at least 2".into()));
        }
        Ok(())
    }

    /// Hex digest identifying this config together with `seed`.
    pub fn fingerprint(&self, seed: u64) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config is serialisable"));
        h.update(seed.to_le_bytes());
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
