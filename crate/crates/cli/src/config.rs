//! TOML run configuration. See `docs/config.md` for the annotated schema.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use dvp_core::adapter::default_bottleneck;
use dvp_core::bandit::{SearchConfig, DEFAULT_ALPHA, DEFAULT_SAMPLES};
use dvp_core::prompt::{PromptSpec, Strategy};
use dvp_core::tasks::SyntheticTaskSpec;
use dvp_core::train::{FinalPhase, TrainConfig};
use dvp_core::transformer::{ModelKind, ModelSpec};

/// Learning rates used when `train.optim.lr` is not given.
pub const ENCODER_LR: f64 = 1e-4;
pub const ENCODER_DECODER_LR: f64 = 2e-4;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Token vocabulary; defaults to the task vocabulary.
    pub vocab: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { kind: ModelKind::Encoder, layers: 6, width: 64, heads: 4, ffn_mult: 4, vocab: None }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSection {
    pub strategy: Strategy,
    pub layer: usize,
}

impl Default for PromptSection {
    fn default() -> Self {
        PromptSection { strategy: Strategy::DvpSingle, layer: 1 }
    }
}

/// Precomputed feature files; when set they replace the synthetic task.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: Option<PathBuf>,
    pub num_classes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSection {
    pub enabled: bool,
    /// Bottleneck width; defaults to an eighth of the model width.
    pub bottleneck: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    /// Layers scored per step; defaults to the smaller of 5 and the layer
    /// count.
    pub samples: Option<usize>,
    pub alpha: f64,
    /// Search length in training epochs, used when `steps` is absent.
    pub epochs: usize,
    pub steps: Option<usize>,
    pub train_batch: Option<usize>,
    pub val_batch: usize,
    pub final_phase: FinalPhase,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            samples: None,
            alpha: DEFAULT_ALPHA,
            epochs: 2,
            steps: None,
            train_batch: None,
            val_batch: 32,
            final_phase: FinalPhase::None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// Insertion layers to train; defaults to every layer.
    pub layers: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKind {
    #[default]
    Scripted,
    Bernoulli,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BanditTestSection {
    pub means: Vec<f64>,
    pub oracle: OracleKind,
    pub seeds: usize,
    pub steps: usize,
    pub samples: usize,
    pub alpha: f64,
}

impl Default for BanditTestSection {
    fn default() -> Self {
        BanditTestSection {
            means: vec![0.5, 0.5, 0.8, 0.5, 0.5],
            oracle: OracleKind::Scripted,
            seeds: 50,
            steps: 2000,
            samples: DEFAULT_SAMPLES,
            alpha: DEFAULT_ALPHA,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlopsPreset {
    /// The `[model]` section with the task's text and visual shapes.
    #[default]
    Config,
    PaperEncoder,
    PaperEncoderDecoder,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlopsSection {
    pub preset: FlopsPreset,
    /// Visual token count; defaults to 197 for paper presets and the task's
    /// count otherwise.
    pub n_visual: Option<usize>,
}

impl Default for FlopsSection {
    fn default() -> Self {
        FlopsSection { preset: FlopsPreset::Config, n_visual: None }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct DumpSection {
    /// Checkpoint to load; when absent a model is trained first.
    pub checkpoint: Option<PathBuf>,
    /// Index into the validation split.
    pub example: usize,
}


#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelSection,
    pub prompt: PromptSection,
    pub task: SyntheticTaskSpec,
    pub data: Option<DataSection>,
    pub train: TrainConfig,
    pub adapter: AdapterSection,
    pub search: SearchSection,
    pub sweep: SweepSection,
    pub bandit_test: BanditTestSection,
    pub flops: FlopsSection,
    pub dump: DumpSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut train = TrainConfig::default();
        train.optim.lr = ENCODER_LR;
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs"),
            model: ModelSection::default(),
            prompt: PromptSection::default(),
            task: SyntheticTaskSpec::default(),
            data: None,
            train,
            adapter: AdapterSection::default(),
            search: SearchSection::default(),
            sweep: SweepSection::default(),
            bandit_test: BanditTestSection::default(),
            flops: FlopsSection::default(),
            dump: DumpSection::default(),
        }
    }
}

fn field<T>(path: &str, r: dvp_core::Result<T>) -> Result<T> {
    r.with_context(|| format!("invalid config field {path}"))
}

impl RunConfig {
    /// Parses TOML; relative data paths resolve against `base`.
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Self> {
        let raw: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        let explicit_lr = raw
            .get("train")
            .and_then(|t| t.get("optim"))
            .and_then(|o| o.get("lr"))
            .is_some();
        let mut cfg: RunConfig = toml::from_str(text).context("config does not match the schema")?;
        if !explicit_lr {
            cfg.train.optim.lr = match cfg.model.kind {
                ModelKind::Encoder => ENCODER_LR,
                ModelKind::EncoderDecoder => ENCODER_DECODER_LR,
            };
        }
        if let (Some(base), Some(data)) = (base, cfg.data.as_mut()) {
            for p in [Some(&mut data.train), Some(&mut data.val), data.test.as_mut()].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        if let (Some(base), Some(ck)) = (base, cfg.dump.checkpoint.as_mut()) {
            if ck.is_relative() {
                *ck = base.join(&*ck);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text, path.parent()).with_context(|| format!("in {}", path.display()))
    }

    /// Shape of the model for the configured task.
    pub fn model_spec(&self, vocab: usize, text_len: usize, num_classes: usize, visual_width: usize) -> Result<ModelSpec> {
        let m = &self.model;
        let spec = ModelSpec {
            kind: m.kind,
            layers: m.layers,
            width: m.width,
            heads: m.heads,
            ffn_mult: m.ffn_mult,
            vocab: m.vocab.unwrap_or(vocab),
            text_len,
            num_classes,
            visual_width,
        };
        field("model", spec.validate())?;
        Ok(spec)
    }

    pub fn prompt_spec(&self) -> PromptSpec {
        PromptSpec::new(self.prompt.strategy, self.prompt.layer)
    }

    pub fn adapter_width(&self) -> Option<usize> {
        self.adapter
            .enabled
            .then(|| self.adapter.bottleneck.unwrap_or_else(|| default_bottleneck(self.model.width)))
    }

    pub fn search_config(&self, train_len: usize) -> SearchConfig {
        let s = &self.search;
        let train_batch = s.train_batch.unwrap_or(self.train.batch_size);
        let steps = s.steps.unwrap_or(s.epochs * train_len.div_ceil(train_batch));
        SearchConfig {
            arms: self.model.layers,
            samples: self.search_samples(),
            steps,
            alpha: s.alpha,
            train_batch,
            val_batch: s.val_batch,
            seed: self.seed,
        }
    }

    pub fn search_samples(&self) -> usize {
        self.search.samples.unwrap_or(DEFAULT_SAMPLES.min(self.model.layers))
    }

    /// Checks that do not need the data loaded.
    pub fn validate(&self) -> Result<()> {
        field("train", self.train.validate())?;
        if self.data.is_none() {
            field("task", self.task.validate())?;
        }
        if let Some(d) = &self.data {
            for p in [Some(&d.train), Some(&d.val), d.test.as_ref()].into_iter().flatten() {
                if !p.exists() {
                    bail!("invalid config field data: {} does not exist", p.display());
                }
            }
            if d.num_classes == 0 {
                bail!("invalid config field data.num_classes: must be positive");
            }
        }
        if let Some(ck) = &self.dump.checkpoint {
            if !ck.exists() {
                bail!("invalid config field dump.checkpoint: {} does not exist", ck.display());
            }
        }
        let s = &self.search;
        let samples = self.search_samples();
        if samples == 0 || samples > self.model.layers {
            bail!("invalid config field search.samples: {samples} must be in 1..={}", self.model.layers);
        }
        if !(s.alpha >= 0.0 && s.alpha.is_finite()) {
            bail!("invalid config field search.alpha: must be finite and non-negative");
        }
        let b = &self.bandit_test;
        if b.means.is_empty() || b.means.iter().any(|m| !(0.0..=1.0).contains(m)) {
            bail!("invalid config field bandit_test.means: need at least one mean, each in [0, 1]");
        }
        if b.samples == 0 || b.samples > b.means.len() {
            bail!("invalid config field bandit_test.samples: {} must be in 1..={}", b.samples, b.means.len());
        }
        if b.seeds == 0 {
            bail!("invalid config field bandit_test.seeds: must be positive");
        }
        if let Some(layers) = &self.sweep.layers {
            if layers.is_empty() {
                bail!("invalid config field sweep.layers: must not be empty");
            }
        }
        if let Some(w) = self.adapter.bottleneck {
            if w == 0 || w >= self.model.width {
                bail!("invalid config field adapter.bottleneck: {w} must be in 1..{}", self.model.width);
            }
        }
        Ok(())
    }
}
