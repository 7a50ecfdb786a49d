//! From audio to RTTM: features, first-pass clustering, chunked model
//! inference and post-processing.

mod features;
mod firstpass;
mod postprocess;

pub use features::{
    cmvn, energy_vad, hz_to_mel, logmel, mel_centers, mel_filterbank, mel_to_hz, read_wav, resample_nearest,
    stack_subsample, write_wav, FeatureConfig, LogMel, VadConfig,
};
pub use firstpass::{
    ahc, ahc_firstpass, center_embeddings, profiles_from_firstpass, segment_embeddings, FirstPassConfig, FirstPassResult,
    FirstPassSpeaker, SegmentEmbedding,
};
pub use postprocess::{binarize, chunk, frames_to_segments, median_filter, segments_to_frames, stitch};

use serde::{Deserialize, Serialize};

use crate::eda::EdaModel;
use crate::error::{Error, Result};
use crate::score::RttmSegment;
use crate::tensor::{Graph, Tensor};
use crate::tsvad::{pad_profiles_baseline, training_profiles, JsdModule, TsVadModel};

pub const EDA_STACK: usize = 15;
pub const EDA_SUBSAMPLE: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub threshold: f64,
    pub median_taps: usize,
    pub collar: f64,
    pub chunk_seconds: f64,
    /// Attractor existence threshold.
    pub tau: f64,
    /// Run the clustering first pass for profiles; without it, profiles must
    /// come from a reference.
    pub first_pass: bool,
    /// Speaker-count buckets for score reports, e.g. `"1-10,11+"`.
    pub buckets: String,
    pub clustering: FirstPassConfig,
    /// Extra TS-VAD passes whose profiles are re-estimated from the previous
    /// pass; only used with first-pass profiles.
    pub refine_passes: usize,
    /// A refined speaker is dropped when this fraction of its active frames
    /// is also active for a speaker with more activity.
    pub duplicate_overlap: f64,
    pub vad: VadConfig,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            median_taps: 11,
            collar: 0.25,
            chunk_seconds: 60.0,
            tau: 0.5,
            first_pass: true,
            buckets: "1-10,11+".into(),
            clustering: FirstPassConfig::default(),
            refine_passes: 1,
            duplicate_overlap: 0.8,
            vad: VadConfig::default(),
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("inference.threshold", "must lie in [0, 1]"));
        }
        if self.median_taps % 2 == 0 {
            return Err(Error::config("inference.median_taps", "must be odd"));
        }
        if !(self.collar >= 0.0) {
            return Err(Error::config("inference.collar", "must be non-negative"));
        }
        if !(self.chunk_seconds > 0.0) {
            return Err(Error::config("inference.chunk_seconds", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config("inference.tau", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.duplicate_overlap) {
            return Err(Error::config("inference.duplicate_overlap", "must lie in [0, 1]"));
        }
        crate::score::BucketRule::parse(&self.buckets)?;
        Ok(())
    }
}

/// A trained diarization model.
#[derive(Clone, Debug)]
pub enum Diarizer {
    TsVad(TsVadModel),
    Eda(EdaModel),
}

/// Normalized log-mel frames for the TS-VAD front-end.
pub fn tsvad_features(audio: &[f64], cfg: &FeatureConfig) -> Result<Tensor> {
    Ok(cmvn(&logmel(audio, cfg)?))
}

/// Normalized, spliced and subsampled frames for the attractor model.
pub fn eda_features(audio: &[f64], cfg: &FeatureConfig) -> Result<Tensor> {
    stack_subsample(&cmvn(&logmel(audio, cfg)?), EDA_STACK, EDA_SUBSAMPLE)
}

/// Output frame period in seconds.
pub fn frame_shift(model: &Diarizer, cfg: &FeatureConfig) -> f64 {
    let hop = cfg.hop_ms / 1000.0;
    match model {
        Diarizer::TsVad(m) => hop * m.downsample() as f64,
        Diarizer::Eda(_) => hop * EDA_SUBSAMPLE as f64,
    }
}

/// Majority vote of feature-rate decisions over each output frame.
fn downsample_mask(mask: &[bool], factor: usize, frames: usize) -> Vec<bool> {
    (0..frames)
        .map(|t| {
            let lo = (t * factor).min(mask.len());
            let hi = ((t + 1) * factor).min(mask.len());
            2 * mask[lo..hi].iter().filter(|&&b| b).count() >= factor
        })
        .collect()
}

/// Activity probabilities `[T, S]` computed chunk by chunk with fixed profiles.
pub fn tsvad_chunked(model: &TsVadModel, emb: &Tensor, profiles: &Tensor, chunk_frames: usize) -> Result<Tensor> {
    let (t, s) = (emb.shape()[0], profiles.shape()[0]);
    let mut out = Tensor::zeros(&[t, s]);
    for r in chunk(t, chunk_frames) {
        let mut g = Graph::inference(&model.params);
        let e = g.input(emb.select_rows(&r.clone().collect::<Vec<_>>()));
        let p = g.input(profiles.clone());
        let z = model.logits(&mut g, e, p)?;
        let y = g.sigmoid(z);
        let y = g.value(y);
        out.data_mut()[r.start * s..r.end * s].copy_from_slice(y.data());
    }
    Ok(out)
}

/// Profiles re-estimated from binary decisions `[T, S]`: speakers with less
/// than `min_frames` active frames or mostly covered by a more active speaker
/// are dropped, the rest get the training-time profile of their decisions.
/// Returns the new profiles and the surviving column indices.
pub fn refine_profiles(emb: &Tensor, decisions: &Tensor, min_frames: usize, duplicate: f64) -> Result<(Tensor, Vec<usize>)> {
    let (t, s) = (decisions.shape()[0], decisions.shape()[1]);
    let on = |i: usize, j: usize| decisions.at(&[i, j]) > 0.5;
    let count: Vec<usize> = (0..s).map(|j| (0..t).filter(|&i| on(i, j)).count()).collect();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| count[b].cmp(&count[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for j in order {
        if count[j] < min_frames.max(1) {
            continue;
        }
        let dup = kept.iter().any(|&k| {
            let both = (0..t).filter(|&i| on(i, j) && on(i, k)).count();
            both as f64 >= duplicate * count[j] as f64
        });
        if !dup {
            kept.push(j);
        }
    }
    kept.sort_unstable();
    if kept.is_empty() {
        return Ok((Tensor::zeros(&[0, emb.shape()[1]]), kept));
    }
    let (p, w) = training_profiles(emb, &decisions.select_columns(&kept))?;
    let kept = w.kept.iter().map(|&k| kept[k]).collect();
    Ok((p, kept))
}

/// Diarizes one session. `oracle` supplies reference segments to build
/// TS-VAD profiles instead of the clustering first pass.
pub fn infer_session(
    session: &str,
    audio: &[f64],
    model: &Diarizer,
    feat: &FeatureConfig,
    cfg: &InferenceConfig,
    oracle: Option<&[RttmSegment]>,
) -> Result<Vec<RttmSegment>> {
    infer_inner(session, audio, model, feat, cfg, oracle).map_err(|e| e.in_session(session))
}

fn infer_inner(
    session: &str,
    audio: &[f64],
    model: &Diarizer,
    feat: &FeatureConfig,
    cfg: &InferenceConfig,
    oracle: Option<&[RttmSegment]>,
) -> Result<Vec<RttmSegment>> {
    let speech = energy_vad(audio, feat, &cfg.vad);
    if !speech.iter().any(|&b| b) {
        return Ok(Vec::new());
    }
    let shift = frame_shift(model, feat);
    let postprocess = |probs: &Tensor, labels: &[String]| -> Result<Vec<RttmSegment>> {
        let bin = median_filter(&binarize(probs, cfg.threshold), cfg.median_taps)?;
        Ok(frames_to_segments(&bin, labels, session, shift, 0.0))
    };
    match model {
        Diarizer::Eda(m) => {
            let x = eda_features(audio, feat)?;
            let (probs, set) = m.infer_with(&x, cfg.tau)?;
            let labels: Vec<String> = (0..set.count).map(|k| format!("spk{k}")).collect();
            postprocess(&probs, &labels)
        }
        Diarizer::TsVad(m) => {
            let x = tsvad_features(audio, feat)?;
            let emb = m.embeddings(&x)?;
            let t = emb.shape()[0];
            let active = downsample_mask(&speech, m.downsample(), t);
            // Per kept speaker: its profile source segments, used for copy-through.
            let (mut profiles, mut labels, mut copied, durations, sources) = match oracle {
                Some(refs) => {
                    let names: Vec<String> = {
                        let set: std::collections::BTreeSet<&str> = refs.iter().map(|s| s.speaker.as_str()).collect();
                        set.into_iter().map(str::to_string).collect()
                    };
                    let lab = segments_to_frames(refs, &names, t, shift, 0.0);
                    let (p, w) = training_profiles(&emb, &lab)?;
                    let dur: Vec<f64> = w
                        .kept
                        .iter()
                        .map(|&j| (0..t).filter(|&i| lab.at(&[i, j]) > 0.5).count() as f64 * shift)
                        .collect();
                    let kept: Vec<String> = w.kept.iter().map(|&j| names[j].clone()).collect();
                    let sources = kept
                        .iter()
                        .map(|n| refs.iter().filter(|s| &s.speaker == n).cloned().collect())
                        .collect();
                    (p, kept, Vec::new(), dur, sources)
                }
                None if cfg.first_pass => {
                    let len = (cfg.clustering.subsegment_seconds / shift).round() as usize;
                    let mut segs = segment_embeddings(&emb, &active, len, shift);
                    if cfg.clustering.center {
                        center_embeddings(&mut segs);
                    }
                    let fp = ahc_firstpass(session, &segs, cfg.clustering.ahc_threshold);
                    let (p, kept, excluded) =
                        profiles_from_firstpass(&emb, &fp, cfg.clustering.min_profile_seconds, shift)?;
                    let find = |l: &String| fp.speakers.iter().find(|s| &s.label == l).expect("kept speaker");
                    let dur = kept.iter().map(|l| find(l).duration).collect();
                    let sources: Vec<Vec<RttmSegment>> = kept.iter().map(|l| find(l).segments.clone()).collect();
                    let copied: Vec<RttmSegment> = excluded.into_iter().flat_map(|s| s.segments).collect();
                    (p, kept, copied, dur, sources)
                }
                None => {
                    return Err(Error::config(
                        "inference.first_pass",
                        "TS-VAD inference needs the first pass or reference profiles",
                    ))
                }
            };
            if let JsdModule::Concat { max_speakers, .. } = &m.matcher.jsd {
                let (padded, kept, dropped) = pad_profiles_baseline(&profiles, &durations, *max_speakers)?;
                for &d in &dropped {
                    copied.extend(sources[d].iter().cloned());
                }
                labels = kept.iter().map(|&k| labels[k].clone()).collect();
                profiles = padded;
            }
            if labels.is_empty() {
                return stitch(&[], &copied);
            }
            let chunk_frames = ((cfg.chunk_seconds / shift).round() as usize).max(1);
            let mut probs = tsvad_chunked(m, &emb, &profiles, chunk_frames)?;
            let is_concat = matches!(m.matcher.jsd, JsdModule::Concat { .. });
            if oracle.is_none() && !is_concat {
                let min_frames = (cfg.clustering.min_profile_seconds / shift).round() as usize;
                for _ in 0..cfg.refine_passes {
                    let bin = median_filter(&binarize(&probs, cfg.threshold), cfg.median_taps)?;
                    let (p, kept) = refine_profiles(&emb, &bin, min_frames, cfg.duplicate_overlap)?;
                    if kept.is_empty() {
                        break;
                    }
                    labels = kept.iter().map(|&k| labels[k].clone()).collect();
                    profiles = p;
                    probs = tsvad_chunked(m, &emb, &profiles, chunk_frames)?;
                }
            }
            let probs = probs.select_columns(&(0..labels.len()).collect::<Vec<_>>());
            let hyp = postprocess(&probs, &labels)?;
            stitch(&hyp, &copied)
        }
    }
}
