use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::save_checkpoint;
use super::config::Config;
use crate::eda::{combined_loss_logits, EdaModel};
use crate::error::{Error, Result};
use crate::pipeline::{eda_features, read_wav, segments_to_frames, tsvad_features, Diarizer, FeatureConfig, EDA_SUBSAMPLE};
use crate::score::{read_rttm_file, RttmSegment};
use crate::simulate::read_manifest;
use crate::tensor::{clip_grad_norm, Adam, AdamConfig, Graph, LrSchedule, Tensor};
use crate::tsvad::{bce_sum_loss_logits, pad_profiles_baseline, training_profiles, JsdModule, TsVadModel};

/// Features of one training session, kept in `f32` to halve memory.
#[derive(Clone, Debug)]
pub struct TrainSession {
    pub name: String,
    pub frames: usize,
    pub dim: usize,
    pub feats: Vec<f32>,
    pub segments: Vec<RttmSegment>,
    pub speakers: Vec<String>,
}

impl TrainSession {
    fn crop(&self, start: usize, len: usize) -> Tensor {
        let data = self.feats[start * self.dim..(start + len) * self.dim]
            .iter()
            .map(|&v| v as f64)
            .collect();
        Tensor::new(&[len, self.dim], data).expect("crop shape")
    }
}

#[derive(Clone, Debug)]
pub struct TrainingData {
    pub sessions: Vec<TrainSession>,
    /// Seconds per feature frame.
    pub frame_seconds: f64,
}

/// Loads every session of a manifest with the feature type `model` consumes.
pub fn load_training_data(manifest: &Path, model: &Diarizer, feat: &FeatureConfig, jobs: usize) -> Result<TrainingData> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::config("paths.train_manifest", "manifest lists no sessions"));
    }
    let eda = matches!(model, Diarizer::Eda(_));
    let results = crate::parallel_map(entries.len(), jobs, |i| -> Result<TrainSession> {
        let e = &entries[i];
        let audio = read_wav(&e.audio, feat.sample_rate)?;
        let x = if eda { eda_features(&audio, feat)? } else { tsvad_features(&audio, feat)? };
        let segments: Vec<RttmSegment> = read_rttm_file(&e.rttm)?
            .into_iter()
            .filter(|s| s.session == e.session)
            .collect();
        let speakers: BTreeSet<String> = segments.iter().map(|s| s.speaker.clone()).collect();
        Ok(TrainSession {
            name: e.session.clone(),
            frames: x.shape()[0],
            dim: x.shape()[1],
            feats: x.data().iter().map(|&v| v as f32).collect(),
            segments,
            speakers: speakers.into_iter().collect(),
        })
    });
    let sessions = results.into_iter().collect::<Result<Vec<_>>>()?;
    let hop = feat.hop_ms / 1000.0;
    Ok(TrainingData {
        sessions,
        frame_seconds: if eda { hop * EDA_SUBSAMPLE as f64 } else { hop },
    })
}

/// Where training writes its outputs.
pub struct TrainOutputs<'a> {
    pub checkpoint: &'a Path,
    pub loss_csv: &'a Path,
}

/// Per-step mean losses of a finished run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub losses: Vec<f64>,
}

/// Graph for one training example: loss value and parameter gradients.
type Example = Option<(f64, Vec<(crate::tensor::ParamId, Tensor)>)>;

fn tsvad_example(model: &TsVadModel, s: &TrainSession, frame_s: f64, chunk_frames: usize, rng: &mut ChaCha8Rng) -> Result<Example> {
    let d = model.downsample();
    let len = (chunk_frames.min(s.frames) / d) * d;
    if len == 0 {
        return Ok(None);
    }
    let start = rng.random_range(0..=(s.frames - len) / d) * d;
    let t = len / d;
    let shift = frame_s * d as f64;
    let labels = segments_to_frames(&s.segments, &s.speakers, t, shift, start as f64 * frame_s);
    let mut g = Graph::with_params(&model.params);
    let x = g.input(s.crop(start, len));
    let emb = model.embed(&mut g, x)?;
    let (profiles, w) = training_profiles(g.value(emb), &labels)?;
    if w.kept.is_empty() {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..w.kept.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut profiles = profiles.select_rows(&order);
    let mut target = labels.select_columns(&order.iter().map(|&k| w.kept[k]).collect::<Vec<_>>());
    if let JsdModule::Concat { max_speakers, .. } = &model.matcher.jsd {
        let dur: Vec<f64> = (0..target.shape()[1])
            .map(|j| (0..t).map(|i| target.at(&[i, j])).sum())
            .collect();
        let (padded, kept, _) = pad_profiles_baseline(&profiles, &dur, *max_speakers)?;
        let mut tgt = Tensor::zeros(&[t, *max_speakers]);
        for (c, &k) in kept.iter().enumerate() {
            for i in 0..t {
                tgt.set(&[i, c], target.at(&[i, k]));
            }
        }
        profiles = padded;
        target = tgt;
    }
    let p = g.input(profiles);
    let z = model.logits(&mut g, emb, p)?;
    let loss = bce_sum_loss_logits(&mut g, z, &target, &vec![1.0; t])?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss is {value} on session {}", s.name)));
    }
    let grads = g.backward(loss)?;
    Ok(Some((value, g.param_grads(&grads))))
}

fn eda_example(model: &EdaModel, s: &TrainSession, frame_s: f64, chunk_frames: usize, rng: &mut ChaCha8Rng) -> Result<Example> {
    let len = chunk_frames.min(s.frames);
    if len == 0 {
        return Ok(None);
    }
    let start = rng.random_range(0..=s.frames - len);
    let labels = segments_to_frames(&s.segments, &s.speakers, len, frame_s, start as f64 * frame_s);
    // Active speakers in order of first activity.
    let mut active: Vec<(usize, usize)> = (0..s.speakers.len())
        .filter_map(|j| (0..len).find(|&i| labels.at(&[i, j]) > 0.5).map(|i| (i, j)))
        .collect();
    active.sort();
    let cols: Vec<usize> = active.iter().map(|a| a.1).collect();
    let n = cols.len();
    if n > model.config.max_attractors {
        return Err(Error::contract(format!(
            "session {} has {n} speakers in one chunk, above max_attractors",
            s.name
        )));
    }
    let target = labels.select_columns(&cols);
    let mut g = Graph::with_params(&model.params);
    let x = g.input(s.crop(start, len));
    let out = model.train_forward(&mut g, x, n, rng.random())?;
    let (loss, _) = combined_loss_logits(&mut g, out.logits, &target, &vec![1.0; len], out.existence, n, model.config.alpha)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss is {value} on session {}", s.name)));
    }
    let grads = g.backward(loss)?;
    Ok(Some((value, g.param_grads(&grads))))
}

/// Runs the configured number of optimizer steps, appending `step,loss,lr`
/// rows to the loss CSV and checkpointing periodically. On a numerical
/// failure the last finite parameters are saved before the error returns.
pub fn train(model: &mut Diarizer, cfg: &Config, data: &TrainingData, out: TrainOutputs) -> Result<TrainSummary> {
    let r = cfg.training.resolve(cfg.model.variant);
    let schedule = LrSchedule {
        peak: r.peak_lr,
        warmup_steps: r.warmup_steps,
        total_steps: r.total_steps,
    };
    let mut opt = Adam::new(model.params(), AdamConfig::default(), schedule);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
    let chunk_frames = (cfg.training.chunk_seconds / data.frame_seconds).round() as usize;
    let file = File::create(out.loss_csv).map_err(|e| Error::io(out.loss_csv, e))?;
    let mut csv = BufWriter::new(file);
    let io = |e| Error::io(out.loss_csv, e);
    writeln!(csv, "step,loss,lr").map_err(io)?;
    let mut losses = Vec::with_capacity(r.total_steps as usize);
    for step in 1..=r.total_steps {
        match train_step(model, data, chunk_frames, r.batch, cfg.training.grad_clip, &mut opt, &mut rng) {
            Ok((loss, lr)) => {
                losses.push(loss);
                writeln!(csv, "{step},{loss:.8},{lr:.6e}").map_err(io)?;
            }
            Err(e) => {
                csv.flush().map_err(io)?;
                if model.params().iter().all(|(_, p)| p.value.all_finite()) {
                    save_checkpoint(model, cfg, out.checkpoint)?;
                }
                log::error!("training stopped at step {step}: {e}");
                return Err(e);
            }
        }
        if step % cfg.training.checkpoint_every == 0 {
            csv.flush().map_err(io)?;
            save_checkpoint(model, cfg, out.checkpoint)?;
            log::info!("step {step}: loss {:.5}", losses.last().copied().unwrap_or(f64::NAN));
        }
    }
    csv.flush().map_err(io)?;
    save_checkpoint(model, cfg, out.checkpoint)?;
    Ok(TrainSummary { losses })
}

fn train_step(
    model: &mut Diarizer,
    data: &TrainingData,
    chunk_frames: usize,
    batch: usize,
    clip: f64,
    opt: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    model.params_mut().zero_grad();
    let mut total = 0.0;
    let mut used = 0;
    let mut attempts = 0;
    while used < batch {
        attempts += 1;
        if attempts > 100 * batch {
            return Err(Error::contract("no training crop contains speech"));
        }
        let s = &data.sessions[rng.random_range(0..data.sessions.len())];
        let ex = match model {
            Diarizer::TsVad(m) => tsvad_example(m, s, data.frame_seconds, chunk_frames, rng)?,
            Diarizer::Eda(m) => eda_example(m, s, data.frame_seconds, chunk_frames, rng)?,
        };
        if let Some((loss, grads)) = ex {
            model.params_mut().accumulate(&grads);
            total += loss;
            used += 1;
        }
    }
    let store = model.params_mut();
    store.scale_grads(1.0 / batch as f64);
    clip_grad_norm(store, clip);
    let lr = opt.step(store)?;
    Ok((total / batch as f64, lr))
}
