use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub mel_bins: usize,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            window_ms: 25.0,
            hop_ms: 10.0,
            mel_bins: 80,
            log_floor: 1e-10,
        }
    }
}

impl FeatureConfig {
    pub fn window(&self) -> usize {
        (self.sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn fft_size(&self) -> usize {
        self.window().next_power_of_two()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::config("features.sample_rate", "must be positive"));
        }
        if self.hop() == 0 || self.window() == 0 || self.hop() > self.window() {
            return Err(Error::config("features.hop_ms", "need 0 < hop <= window"));
        }
        if self.mel_bins == 0 {
            return Err(Error::config("features.mel_bins", "must be at least 1"));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::config("features.log_floor", "must be positive"));
        }
        Ok(())
    }

    /// Number of frames for `n` samples without centered padding.
    pub fn num_frames(&self, n: usize) -> usize {
        if n < self.window() {
            0
        } else {
            (n - self.window()) / self.hop() + 1
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequency in Hz of every mel band.
pub fn mel_centers(cfg: &FeatureConfig) -> Vec<f64> {
    let top = hz_to_mel(cfg.sample_rate as f64 / 2.0);
    (1..=cfg.mel_bins)
        .map(|k| mel_to_hz(top * k as f64 / (cfg.mel_bins + 1) as f64))
        .collect()
}

/// Triangular HTK filters over `fft_size / 2 + 1` bins, `[mel_bins][bins]`.
pub fn mel_filterbank(cfg: &FeatureConfig) -> Vec<Vec<f64>> {
    let n_fft = cfg.fft_size();
    let bins = n_fft / 2 + 1;
    let top = hz_to_mel(cfg.sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..cfg.mel_bins + 2)
        .map(|k| top * k as f64 / (cfg.mel_bins + 1) as f64)
        .collect();
    (0..cfg.mel_bins)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|b| {
                    let mel = hz_to_mel(b as f64 * cfg.sample_rate as f64 / n_fft as f64);
                    if mel <= lo || mel >= hi {
                        0.0
                    } else if mel <= mid {
                        (mel - lo) / (mid - lo)
                    } else {
                        (hi - mel) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Reusable log-mel extractor.
pub struct LogMel {
    cfg: FeatureConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// Sparse filters: first nonzero bin and weights.
    filters: Vec<(usize, Vec<f64>)>,
}

impl LogMel {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.window();
        // Periodic Hann window.
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let filters = mel_filterbank(cfg)
            .into_iter()
            .map(|f| {
                let first = f.iter().position(|&w| w > 0.0).unwrap_or(0);
                let last = f.iter().rposition(|&w| w > 0.0).map_or(first, |l| l + 1);
                (first, f[first..last].to_vec())
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            fft: FftPlanner::new().plan_fft_forward(cfg.fft_size()),
            window,
            filters,
        })
    }

    pub fn compute(&self, audio: &[f64]) -> Result<Tensor> {
        let frames = self.cfg.num_frames(audio.len());
        if frames == 0 {
            return Err(Error::contract(format!(
                "audio of {} samples is shorter than one {}-sample window",
                audio.len(),
                self.cfg.window()
            )));
        }
        let (win, hop, n_fft) = (self.cfg.window(), self.cfg.hop(), self.cfg.fft_size());
        let floor = self.cfg.log_floor;
        let mut out = Vec::with_capacity(frames * self.cfg.mel_bins);
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut power = vec![0.0; n_fft / 2 + 1];
        for f in 0..frames {
            let frame = &audio[f * hop..f * hop + win];
            for (k, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(if k < win { frame[k] * self.window[k] } else { 0.0 }, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, b) in power.iter_mut().zip(&buf) {
                *p = b.norm_sqr();
            }
            for (first, w) in &self.filters {
                let e: f64 = w.iter().zip(&power[*first..]).map(|(a, b)| a * b).sum();
                out.push(e.max(floor).ln());
            }
        }
        Tensor::new(&[frames, self.cfg.mel_bins], out)
    }
}

/// Log mel-filterbank features `[T0, mel_bins]`.
pub fn logmel(audio: &[f64], cfg: &FeatureConfig) -> Result<Tensor> {
    LogMel::new(cfg)?.compute(audio)
}

/// Per-dimension mean and variance normalization over all frames.
pub fn cmvn(feats: &Tensor) -> Tensor {
    let (t, d) = (feats.shape()[0], feats.shape()[1]);
    let mut out = feats.clone();
    if t == 0 {
        return out;
    }
    for j in 0..d {
        let mean = (0..t).map(|i| feats.at(&[i, j])).sum::<f64>() / t as f64;
        let var = (0..t).map(|i| (feats.at(&[i, j]) - mean).powi(2)).sum::<f64>() / t as f64;
        let inv = 1.0 / (var + 1e-8).sqrt();
        for i in 0..t {
            out.set(&[i, j], (feats.at(&[i, j]) - mean) * inv);
        }
    }
    out
}

/// Splices `stack` frames centered on every `factor`-th frame, replicating edges.
pub fn stack_subsample(frames: &Tensor, stack: usize, factor: usize) -> Result<Tensor> {
    let (t0, d) = (frames.shape()[0], frames.shape()[1]);
    if stack == 0 || factor == 0 {
        return Err(Error::contract("stack and factor must be positive"));
    }
    if t0 < stack {
        return Err(Error::contract(format!("need at least {stack} frames to stack, got {t0}")));
    }
    let t = t0 / factor;
    let half = (stack / 2) as isize;
    let mut out = Vec::with_capacity(t * stack * d);
    for k in 0..t {
        let c = (k * factor) as isize;
        for off in -half..(stack as isize - half) {
            let i = (c + off).clamp(0, t0 as isize - 1) as usize;
            out.extend_from_slice(frames.row(i));
        }
    }
    Tensor::new(&[t, stack * d], out)
}

/// Frame-level speech decisions from log energy with a hangover.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VadConfig {
    /// dB above the 10th-percentile frame energy, capped at the same margin
    /// below the loudest frame.
    pub margin_db: f64,
    /// Frames below this absolute level are never speech.
    pub floor_db: f64,
    pub hangover: usize,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            margin_db: 10.0,
            floor_db: -60.0,
            hangover: 30,
        }
    }
}

pub fn energy_vad(audio: &[f64], feat: &FeatureConfig, cfg: &VadConfig) -> Vec<bool> {
    let (win, hop) = (feat.window(), feat.hop());
    let n = feat.num_frames(audio.len());
    let db: Vec<f64> = (0..n)
        .map(|f| {
            let fr = &audio[f * hop..f * hop + win];
            let e = fr.iter().map(|x| x * x).sum::<f64>() / win as f64;
            10.0 * e.max(1e-20).log10()
        })
        .collect();
    if db.is_empty() {
        return Vec::new();
    }
    let mut sorted = db.clone();
    sorted.sort_by(f64::total_cmp);
    let p10 = sorted[(sorted.len() - 1) / 10];
    let top = sorted[sorted.len() - 1];
    // Recordings that are almost all speech put p10 inside speech, so the
    // margin is also taken down from the loudest frame.
    let thr = (p10 + cfg.margin_db).min(top - cfg.margin_db).max(cfg.floor_db);
    let mut out = vec![false; n];
    let mut hold = 0;
    for (o, &e) in out.iter_mut().zip(&db) {
        if e > thr {
            hold = cfg.hangover + 1;
        }
        if hold > 0 {
            *o = true;
            hold -= 1;
        }
    }
    out
}

pub fn read_wav(path: &Path, target_rate: u32) -> Result<Vec<f64>> {
    let wav = |source| Error::Wav { path: path.to_path_buf(), source };
    let mut r = hound::WavReader::open(path).map_err(wav)?;
    let spec = r.spec();
    let ch = spec.channels as usize;
    let raw: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            r.samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav)?
        }
        hound::SampleFormat::Float => r
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav)?,
    };
    let mono: Vec<f64> = if ch <= 1 {
        raw
    } else {
        raw.chunks(ch).map(|c| c.iter().sum::<f64>() / ch as f64).collect()
    };
    Ok(resample_nearest(&mono, spec.sample_rate, target_rate))
}

pub fn resample_nearest(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || x.is_empty() {
        return x.to_vec();
    }
    let n = (x.len() as u64 * to as u64 / from as u64) as usize;
    (0..n)
        .map(|i| x[((i as u64 * from as u64 / to as u64) as usize).min(x.len() - 1)])
        .collect()
}

/// Writes 16-bit mono PCM.
pub fn write_wav(path: &Path, samples: &[f64], rate: u32) -> Result<()> {
    let wav = |source| Error::Wav { path: path.to_path_buf(), source };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav)?;
    for &s in samples {
        let v = (s * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(wav)?;
    }
    w.finalize().map_err(wav)
}
