//! Run configuration: one strict JSON schema shared by every command.

use std::fs;
use std::path::{Path, PathBuf};

use egodepth::data::{load_dataset, synth_generate, AugmentPolicy, SceneFamily, StereoSnippet, SynthSpec};
use egodepth::model::{ModelConfig, TrainOptions};
use egodepth::objective::{validate_snippet_len, CharbonnierParams, LossWeights, ObjectiveConfig};
use egodepth::rng::{stream, Stream};
use egodepth::{Error, Result};
use serde::{Deserialize, Serialize};

/// A generated set of snippets from the synthetic scene family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSet {
    pub count: usize,
    /// Seed of the scene draws; independent of the run seed so a dataset
    /// stays fixed while the run seed varies.
    pub seed: u64,
    /// `frames` is overridden by the run's `snippet_len`.
    pub family: SceneFamily,
}

impl Default for SynthSet {
    fn default() -> Self {
        Self {
            count: 200,
            seed: 1,
            family: SceneFamily::default(),
        }
    }
}

impl SynthSet {
    pub fn generate(&self, snippet_len: usize) -> Result<Vec<StereoSnippet>> {
        let family = SceneFamily {
            frames: snippet_len,
            ..self.family.clone()
        };
        family.generate(self.count, &mut stream(self.seed, Stream::Synth))
    }
}

/// Exactly one source: a directory of sequences, a synthetic family, or a
/// single synthetic scene.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub synth: Option<SynthSet>,
    pub spec: Option<SynthSpec>,
    /// Held-out synthetic set used by `eval-depth` when no `--data` is given.
    pub heldout: Option<SynthSet>,
}

impl DataConfig {
    fn sources(&self) -> usize {
        self.root.is_some() as usize + self.synth.is_some() as usize + self.spec.is_some() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources() > 1 {
            return Err(Error::Config("data: give only one of root, synth, spec".into()));
        }
        if let Some(s) = &self.spec {
            s.validate().map_err(|e| Error::Config(format!("data.spec: {e}")))?;
        }
        for (key, set) in [("data.synth", &self.synth), ("data.heldout", &self.heldout)] {
            if let Some(set) = set {
                if set.count == 0 {
                    return Err(Error::Config(format!("{key}.count must be positive")));
                }
            }
        }
        Ok(())
    }

    /// Training snippets.
    pub fn load(&self, snippet_len: usize) -> Result<Vec<StereoSnippet>> {
        if let Some(root) = &self.root {
            return load_dataset(root, snippet_len);
        }
        if let Some(set) = &self.synth {
            return set.generate(snippet_len);
        }
        if let Some(spec) = &self.spec {
            if spec.motion.len() + 1 != snippet_len {
                return Err(Error::Config(format!(
                    "data.spec has {} motion steps, snippet_len {snippet_len} needs {}",
                    spec.motion.len(),
                    snippet_len - 1
                )));
            }
            return Ok(vec![synth_generate(spec)?]);
        }
        Err(Error::Config("data: no source (root, synth or spec)".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub snippet_len: usize,
    pub iterations: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub charbonnier: CharbonnierParams,
    /// Also score the right view's temporal reconstructions.
    pub right_temporal: bool,
    pub model: ModelConfig,
    pub augment: AugmentPolicy,
    pub data: DataConfig,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            seed: t.seed,
            snippet_len: 3,
            iterations: t.iterations,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            weights: LossWeights::default(),
            charbonnier: CharbonnierParams::default(),
            right_temporal: false,
            model: ModelConfig::default(),
            augment: AugmentPolicy::default(),
            data: DataConfig::default(),
            output: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            if key == "." {
                Error::Config(e.into_inner().to_string())
            } else {
                Error::Config(format!("{key}: {}", e.into_inner()))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        validate_snippet_len(self.snippet_len).map_err(|e| Error::Config(format!("snippet_len: {e}")))?;
        self.model.validate()?;
        self.data.validate()?;
        self.train_options().validate()
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            weights: self.weights,
            charbonnier: self.charbonnier,
            right_temporal: self.right_temporal,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            seed: self.seed,
            iterations: self.iterations,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            objective: self.objective(),
            augment: self.augment,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
