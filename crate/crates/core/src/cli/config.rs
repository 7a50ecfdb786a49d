use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::eda::{EdaConfig, MatcherKind};
use crate::error::{Error, Result};
use crate::pipeline::{FeatureConfig, InferenceConfig, EDA_STACK};
use crate::simulate::DatasetSpec;
use crate::tsvad::{JsdKind, TsVadConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Concat,
    BlstmBlstm,
    TransTrans,
    #[default]
    BlstmTimeTransSpk,
    EdaDot,
    EdaTsvad,
}

impl Variant {
    pub fn is_eda(self) -> bool {
        matches!(self, Variant::EdaDot | Variant::EdaTsvad)
    }

    fn jsd_kind(self) -> JsdKind {
        match self {
            Variant::Concat => JsdKind::Concat,
            Variant::BlstmBlstm => JsdKind::BlstmBlstm,
            Variant::TransTrans => JsdKind::TransTrans,
            _ => JsdKind::BlstmTimeTransSpk,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Paper,
    /// Every width divided by four.
    Toy,
}

/// Architecture. Unset sizes take the preset's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: Variant,
    pub preset: Preset,
    /// Front-end output width; profiles share it.
    pub embed_dim: Option<usize>,
    pub frontend_channels: Option<usize>,
    pub strides: Option<Vec<usize>>,
    pub isd_proj: Option<usize>,
    pub isd_hidden: Option<usize>,
    pub isd_out: Option<usize>,
    pub jsd_blocks: Option<usize>,
    pub blstm_hidden: Option<usize>,
    pub blstm_proj: Option<usize>,
    pub heads: Option<usize>,
    pub ff_dim: Option<usize>,
    pub time_positional_encoding: Option<bool>,
    pub concat_hidden: Option<usize>,
    pub concat_proj: Option<usize>,
    pub max_speakers: Option<usize>,
    pub eda_dim: Option<usize>,
    pub eda_layers: Option<usize>,
    pub eda_heads: Option<usize>,
    pub eda_ff_dim: Option<usize>,
    pub max_attractors: Option<usize>,
}

/// Resolved architecture.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelConfig {
    TsVad(TsVadConfig),
    Eda(EdaConfig),
}

/// Optimisation. Unset schedule values and batch size follow the variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub peak_lr: Option<f64>,
    pub warmup_steps: Option<u64>,
    pub total_steps: Option<u64>,
    pub batch: Option<usize>,
    pub chunk_seconds: f64,
    pub seed: u64,
    /// Weight of the attractor existence loss.
    pub alpha: f64,
    pub grad_clip: f64,
    pub checkpoint_every: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            peak_lr: None,
            warmup_steps: None,
            total_steps: None,
            batch: None,
            chunk_seconds: 60.0,
            seed: 0,
            alpha: 1.0,
            grad_clip: 5.0,
            checkpoint_every: 1000,
        }
    }
}

/// Schedule and batch size after variant defaults are applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResolvedTraining {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch: usize,
}

impl TrainingSection {
    pub fn resolve(&self, variant: Variant) -> ResolvedTraining {
        let (lr, warm, total, batch) = if variant.is_eda() {
            (5e-5, 27_000, 230_000, 36)
        } else {
            (2e-4, 20_000, 200_000, 32)
        };
        ResolvedTraining {
            peak_lr: self.peak_lr.unwrap_or(lr),
            warmup_steps: self.warmup_steps.unwrap_or(warm),
            total_steps: self.total_steps.unwrap_or(total),
            batch: self.batch.unwrap_or(batch),
        }
    }
}

/// File locations. Relative paths resolve against the config file's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Output directory of `simulate`.
    pub data_dir: Option<PathBuf>,
    pub train_manifest: Option<PathBuf>,
    /// Sessions to diarize: a manifest or a single WAV file.
    pub infer_input: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
    pub output_rttm: Option<PathBuf>,
    /// Reference for `score`: an RTTM file or a manifest.
    pub reference: Option<PathBuf>,
    /// Segments from which TS-VAD profiles are taken when the first pass is off.
    pub profile_rttm: Option<PathBuf>,
    /// Machine-readable score report.
    pub report: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub train_conversations: usize,
    pub dev_conversations: usize,
    pub test_conversations: usize,
    pub seed: u64,
    pub min_speakers: usize,
    pub max_speakers: usize,
    pub min_overlap: f64,
    pub max_overlap: f64,
    pub duration: f64,
    pub turn_seconds: (f64, f64),
    pub pause_seconds: (f64, f64),
    pub snr_db: Option<f64>,
    pub sample_rate: u32,
    pub pool_size: usize,
    pub pool_seed: u64,
    pub pool_min_mel: f64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let d = DatasetSpec::default();
        Self {
            train_conversations: 200,
            dev_conversations: 0,
            test_conversations: 20,
            seed: 1,
            min_speakers: d.min_speakers,
            max_speakers: d.max_speakers,
            min_overlap: d.min_overlap,
            max_overlap: d.max_overlap,
            duration: d.duration,
            turn_seconds: d.turn_seconds,
            pause_seconds: d.pause_seconds,
            snr_db: d.snr_db,
            sample_rate: d.sample_rate,
            pool_size: d.pool_size,
            pool_seed: d.pool_seed,
            pool_min_mel: d.pool_min_mel,
        }
    }
}

impl SimulationSection {
    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            min_speakers: self.min_speakers,
            max_speakers: self.max_speakers,
            min_overlap: self.min_overlap,
            max_overlap: self.max_overlap,
            duration: self.duration,
            turn_seconds: self.turn_seconds,
            pause_seconds: self.pause_seconds,
            snr_db: self.snr_db,
            sample_rate: self.sample_rate,
            pool_size: self.pool_size,
            pool_seed: self.pool_seed,
            pool_min_mel: self.pool_min_mel,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelSection,
    pub features: FeatureConfig,
    pub training: TrainingSection,
    pub inference: InferenceConfig,
    pub paths: PathsSection,
    pub simulation: SimulationSection,
}

fn check_seed(field: &str, v: u64) -> Result<()> {
    if v > i64::MAX as u64 {
        return Err(Error::config(field, "must fit in a signed 64-bit integer"));
    }
    Ok(())
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| format!(" (line {})", text[..s.start].matches('\n').count() + 1))
                .unwrap_or_default();
            Error::config("config", format!("{}{line}", e.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Reads a config file; relative paths inside it are made absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.resolve_against(base);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.inference.validate()?;
        self.model_config()?;
        let t = &self.training;
        if !(t.chunk_seconds > 0.0) {
            return Err(Error::config("training.chunk_seconds", "must be positive"));
        }
        if !(t.grad_clip > 0.0) {
            return Err(Error::config("training.grad_clip", "must be positive"));
        }
        if t.checkpoint_every == 0 {
            return Err(Error::config("training.checkpoint_every", "must be positive"));
        }
        let r = t.resolve(self.model.variant);
        if !(r.peak_lr > 0.0 && r.peak_lr.is_finite()) {
            return Err(Error::config("training.peak_lr", "must be positive"));
        }
        if r.total_steps == 0 || r.warmup_steps > r.total_steps {
            return Err(Error::config("training.warmup_steps", "need warmup_steps <= total_steps and total_steps > 0"));
        }
        if r.batch == 0 {
            return Err(Error::config("training.batch", "must be at least 1"));
        }
        check_seed("training.seed", t.seed)?;
        check_seed("simulation.seed", self.simulation.seed)?;
        check_seed("simulation.pool_seed", self.simulation.pool_seed)?;
        self.simulation.dataset_spec().validate()?;
        Ok(())
    }

    /// Architecture for the configured variant and preset.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        if let Some(b) = m.jsd_blocks {
            if !(1..=2).contains(&b) {
                return Err(Error::config("model.jsd_blocks", "must be 1 or 2"));
            }
        }
        let toy = m.preset == Preset::Toy;
        let apply_jsd = |jsd: &mut crate::tsvad::JsdConfig| {
            set(&mut jsd.blocks, m.jsd_blocks);
            set(&mut jsd.blstm_hidden, m.blstm_hidden);
            set(&mut jsd.blstm_proj, m.blstm_proj);
            set(&mut jsd.heads, m.heads);
            set(&mut jsd.ff_dim, m.ff_dim);
            set(&mut jsd.time_positional_encoding, m.time_positional_encoding);
            set(&mut jsd.concat_hidden, m.concat_hidden);
            set(&mut jsd.concat_proj, m.concat_proj);
            set(&mut jsd.max_speakers, m.max_speakers);
        };
        let apply_isd = |isd: &mut crate::tsvad::IsdConfig| {
            set(&mut isd.proj, m.isd_proj);
            set(&mut isd.hidden, m.isd_hidden);
            set(&mut isd.out, m.isd_out);
        };
        if m.variant.is_eda() {
            let matcher = if m.variant == Variant::EdaDot { MatcherKind::Dot } else { MatcherKind::Tsvad };
            let blocks = m.jsd_blocks.unwrap_or(2);
            let mut c = if toy { EdaConfig::toy(matcher, blocks) } else { EdaConfig::paper(matcher, blocks) };
            c.input_dim = EDA_STACK * self.features.mel_bins;
            set(&mut c.model_dim, m.eda_dim);
            set(&mut c.layers, m.eda_layers);
            set(&mut c.heads, m.eda_heads);
            set(&mut c.ff_dim, m.eda_ff_dim);
            set(&mut c.max_attractors, m.max_attractors);
            c.isd.embed_dim = c.model_dim;
            c.isd.profile_dim = c.model_dim;
            apply_isd(&mut c.isd);
            apply_jsd(&mut c.jsd);
            c.tau = self.inference.tau;
            c.alpha = self.training.alpha;
            c.validate()?;
            Ok(ModelConfig::Eda(c))
        } else {
            let kind = m.variant.jsd_kind();
            let mut c = if toy { TsVadConfig::toy(kind) } else { TsVadConfig::paper(kind) };
            c.frontend.input_dim = self.features.mel_bins;
            set(&mut c.frontend.channels, m.frontend_channels);
            set(&mut c.frontend.embed_dim, m.embed_dim);
            if let Some(s) = &m.strides {
                if s.is_empty() || s.contains(&0) {
                    return Err(Error::config("model.strides", "need at least one positive stride"));
                }
                c.frontend.strides = s.clone();
            }
            c.isd.embed_dim = c.frontend.embed_dim;
            c.isd.profile_dim = c.frontend.embed_dim;
            apply_isd(&mut c.isd);
            apply_jsd(&mut c.jsd);
            c.validate()?;
            Ok(ModelConfig::TsVad(c))
        }
    }
}

fn set<T: Clone>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl PathsSection {
    pub fn resolve_against(&mut self, base: &Path) {
        for p in [
            &mut self.data_dir,
            &mut self.train_manifest,
            &mut self.infer_input,
            &mut self.checkpoint,
            &mut self.loss_csv,
            &mut self.output_rttm,
            &mut self.reference,
            &mut self.profile_rttm,
            &mut self.report,
        ] {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        }
    }
}

/// The path stored at `field`, or a config error naming it.
pub fn require<'a>(p: &'a Option<PathBuf>, field: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::config(field, "path is required"))
}
