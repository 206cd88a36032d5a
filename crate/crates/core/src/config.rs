//! Run configuration: one strict JSON document for every command.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bank::{self, BankSource, SemanticBank};
use crate::error::{ArtError, Result};
use crate::experiment::AblateConfig;
use crate::gradcheck::GradcheckConfig;
use crate::head::{ArtModel, HeadFlags, ModelConfig};
use crate::rng::substream;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    pub n_prom: usize,
    pub text_dim: usize,
    pub source: BankSource,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            n_prom: 4,
            text_dim: 16,
            source: BankSource::Synthetic { seed: 0, jitter: 0.3 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Directory holding `train/` and `test/` datasets written by `art synth`.
    /// Unset means the sets are generated from `synth`.
    pub dir: Option<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 512,
            n_test: 256,
            dir: None,
        }
    }
}

/// Everything a command needs. `seed` is the single source of randomness
/// and is copied into the synth, train and synthetic-bank seeds by
/// [`RunConfig::resolved`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub single_thread: bool,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub bank: BankConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Chebyshev radius of the tracking hit rate.
    pub hit_radius: usize,
    /// Checkpoint read by `eval` and `inspect`; defaults to the final
    /// checkpoint under the output directory.
    pub checkpoint: Option<String>,
    /// Videos exported by `inspect`.
    pub inspect_videos: usize,
    /// Random instances per loss in `losses`.
    pub oracle_instances: usize,
    pub gradcheck: GradcheckConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        RunConfig {
            seed: 0,
            single_thread: false,
            synth,
            model: ModelConfig {
                t: synth.t,
                h: synth.h,
                w: synth.w,
                c: synth.c,
                k: synth.n_parts,
                d: 16,
                heads: 2,
                depth_sse: 1,
                depth_rssa: 1,
                n_class: synth.n_classes,
                ..ModelConfig::default()
            },
            bank: BankConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            hit_radius: 1,
            checkpoint: None,
            inspect_videos: 4,
            oracle_instances: 1000,
            gradcheck: GradcheckConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl RunConfig {
    /// Default config with a partial JSON document merged over it. Missing
    /// keys inside a given section keep the run defaults, not the section's
    /// own defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let patch: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ArtError::Config(e.to_string()))?;
        let mut base = serde_json::to_value(RunConfig::default())?;
        merge_json(&mut base, patch);
        serde_json::from_value(base).map_err(|e| ArtError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Copy with `seed` propagated into every seeded section.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.synth.seed = c.seed;
        c.train.seed = c.seed;
        if let BankSource::Synthetic { seed, .. } = &mut c.bank.source {
            *seed = c.seed;
        }
        c
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        RunConfig {
            seed,
            ..self.clone()
        }
        .resolved()
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let m = &self.model;
        let s = &self.synth;
        if (m.t, m.h, m.w, m.c) != (s.t, s.h, s.w, s.c) {
            return Err(ArtError::Config(format!(
                "model (T, H, W, C) = {:?} differs from synth {:?}",
                (m.t, m.h, m.w, m.c),
                (s.t, s.h, s.w, s.c)
            )));
        }
        if m.n_class != s.n_classes {
            return Err(ArtError::Config(format!(
                "model.n_class = {} but synth.n_classes = {}",
                m.n_class, s.n_classes
            )));
        }
        if self.bank.n_prom == 0 || self.bank.text_dim == 0 {
            return Err(ArtError::Config("bank.n_prom and bank.text_dim must be positive".into()));
        }
        Ok(())
    }

    /// Fully resolved config as JSON, defaults included.
    pub fn echo(&self) -> serde_json::Value {
        let mut c = self.resolved();
        c.train.eta = Some(c.train.agent_lr());
        serde_json::to_value(c).expect("config is serializable")
    }

    pub fn build_bank(&self) -> Result<SemanticBank> {
        let c = self.resolved();
        let s0 = bank::generate_bank(
            &bank::default_labels("class", c.model.n_class),
            &bank::default_labels("prompt", c.bank.n_prom),
            c.bank.text_dim,
            &c.bank.source,
        )?;
        SemanticBank::new(s0, c.train.mu, c.train.agent_lr())
    }

    /// Freshly initialized model from the `init` substream.
    pub fn build_model(&self) -> Result<ArtModel> {
        let c = self.resolved();
        c.validate()?;
        ArtModel::init(c.model, c.build_bank()?, &mut substream(c.seed, "init", 0))
    }

    /// Same config with the head switched to one of the component-ablation
    /// settings.
    pub fn with_setting(&self, setting: AblationSetting) -> Self {
        let mut c = self.clone();
        let (flags, gamma1) = setting.flags();
        c.model.flags = flags;
        if !gamma1 {
            c.train.gamma1 = 0.0;
        }
        c
    }
}

/// Recursively overwrites `base` with the keys of `patch`.
pub fn merge_json(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// The five rows of the component ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationSetting {
    /// Class token only.
    Baseline,
    /// Region queries without SSE, mean-pooled tracklets, no MTC.
    Rssa,
    /// Region queries with SSE, mean-pooled tracklets, no MTC.
    RssaSse,
    /// Adds temporal saliency aggregation.
    RssaSseTa,
    /// Full head with the MTC loss.
    Full,
}

impl AblationSetting {
    pub const ALL: [AblationSetting; 5] = [
        AblationSetting::Baseline,
        AblationSetting::Rssa,
        AblationSetting::RssaSse,
        AblationSetting::RssaSseTa,
        AblationSetting::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationSetting::Baseline => "baseline",
            AblationSetting::Rssa => "+rssa",
            AblationSetting::RssaSse => "+rssa+sse",
            AblationSetting::RssaSseTa => "+rssa+sse+ta",
            AblationSetting::Full => "+rssa+sse+ta+mtc",
        }
    }

    /// Head flags and whether the MTC term stays on.
    pub fn flags(self) -> (HeadFlags, bool) {
        let f = |rssa, sse, saliency_aggregation| HeadFlags {
            rssa,
            sse,
            saliency_aggregation,
        };
        match self {
            AblationSetting::Baseline => (f(false, false, false), false),
            AblationSetting::Rssa => (f(true, false, false), false),
            AblationSetting::RssaSse => (f(true, true, false), false),
            AblationSetting::RssaSseTa => (f(true, true, true), false),
            AblationSetting::Full => (f(true, true, true), true),
        }
    }
}
