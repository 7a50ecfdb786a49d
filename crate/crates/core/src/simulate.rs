//! Deterministic synthetic conversations with exact reference segments.
//!
//! Speakers are filtered-noise sources with individual resonances and
//! amplitude modulation. Conversations are scheduled turn by turn; overlaps
//! only ever involve two consecutive turns, so references never contain
//! triple or same-speaker overlap.

use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{hz_to_mel, mel_to_hz, write_wav};
use crate::score::{merge_intervals, write_rttm, RttmSegment};

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const BAND_RANGES: [(f64, f64); 3] = [(250.0, 900.0), (900.0, 2400.0), (2400.0, 6000.0)];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpeaker {
    pub id: u32,
    /// Resonance centers in Hz, one per band.
    pub centers: [f64; 3],
    pub bandwidths: [f64; 3],
    pub gains: [f64; 3],
    pub mod_rate: f64,
    pub mod_depth: f64,
}

impl SyntheticSpeaker {
    pub fn from_seed(id: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, id as u64));
        let mut centers = [0.0; 3];
        let mut bandwidths = [0.0; 3];
        let mut gains = [0.0; 3];
        for (k, &(lo, hi)) in BAND_RANGES.iter().enumerate() {
            let m = rng.random_range(hz_to_mel(lo)..hz_to_mel(hi));
            centers[k] = mel_to_hz(m);
            bandwidths[k] = centers[k] * rng.random_range(0.06..0.12);
            gains[k] = rng.random_range(0.4..1.0);
        }
        Self {
            id,
            centers,
            bandwidths,
            gains,
            mod_rate: rng.random_range(2.5..6.0),
            mod_depth: rng.random_range(0.2..0.5),
        }
    }

    /// Euclidean distance between resonance centers on the mel scale.
    pub fn distance(&self, other: &Self) -> f64 {
        self.centers
            .iter()
            .zip(&other.centers)
            .map(|(a, b)| (hz_to_mel(*a) - hz_to_mel(*b)).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// `n` speakers whose signatures lie at least `min_mel` apart.
pub fn speaker_pool(n: usize, seed: u64, min_mel: f64) -> Result<Vec<SyntheticSpeaker>> {
    let mut pool: Vec<SyntheticSpeaker> = Vec::with_capacity(n);
    let mut draw = 0u64;
    while pool.len() < n {
        if draw > 200_000 {
            return Err(Error::config(
                "simulation.pool_size",
                format!("cannot place {n} speakers {min_mel} mel apart"),
            ));
        }
        let cand = SyntheticSpeaker::from_seed(pool.len() as u32, mix_seed(seed, draw));
        draw += 1;
        if pool.iter().all(|p| cand.distance(p) >= min_mel) {
            pool.push(cand);
        }
    }
    Ok(pool)
}

/// Two-pole resonator coefficients `(b0, a1, a2)` with unit peak gain.
fn resonator(fc: f64, bw: f64, sr: f64) -> (f64, f64, f64) {
    let r = (-PI * bw / sr).exp();
    let theta = 2.0 * PI * fc / sr;
    let a1 = -2.0 * r * theta.cos();
    let a2 = r * r;
    (1.0 - r, a1, a2)
}

/// Filtered noise with a smooth onset/offset and amplitude modulation,
/// scaled to unit RMS.
pub fn synth_utterance(speaker: &SyntheticSpeaker, length_s: f64, seed: u64, sample_rate: u32) -> Vec<f64> {
    let sr = sample_rate as f64;
    let n = (length_s * sr).round() as usize;
    if n == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, speaker.id as u64 ^ 0xA5A5));
    let noise: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; n];
    for k in 0..3 {
        let (b0, a1, a2) = resonator(speaker.centers[k], speaker.bandwidths[k], sr);
        let (mut y1, mut y2) = (0.0, 0.0);
        for (o, &x) in out.iter_mut().zip(&noise) {
            let y = b0 * x - a1 * y1 - a2 * y2;
            y2 = y1;
            y1 = y;
            *o += speaker.gains[k] * y;
        }
    }
    let phase = rng.random_range(0.0..2.0 * PI);
    let ramp = (0.01 * sr) as usize;
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let m = 1.0 - speaker.mod_depth * 0.5 * (1.0 + (2.0 * PI * speaker.mod_rate * t + phase).sin());
        let edge = (i.min(n - 1 - i) as f64 / ramp.max(1) as f64).min(1.0);
        *o *= m * edge;
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConversationSpec {
    pub speakers: Vec<SyntheticSpeaker>,
    pub overlap_ratio: f64,
    pub duration: f64,
    /// Uniform turn length range in seconds.
    pub turn_seconds: (f64, f64),
    /// Uniform pause range in seconds between non-overlapping turns.
    pub pause_seconds: (f64, f64),
    pub snr_db: Option<f64>,
    pub sample_rate: u32,
    pub seed: u64,
}

impl ConversationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.speakers.is_empty() {
            return Err(Error::config("simulation.speakers", "need at least one speaker"));
        }
        if !(0.0..0.5).contains(&self.overlap_ratio) {
            return Err(Error::config("simulation.overlap_ratio", "must lie in [0, 0.5)"));
        }
        if self.speakers.len() == 1 && self.overlap_ratio > 0.0 {
            return Err(Error::config(
                "simulation.overlap_ratio",
                "a single speaker cannot overlap with anyone",
            ));
        }
        if !(self.duration > 0.0) {
            return Err(Error::config("simulation.duration", "must be positive"));
        }
        let (a, b) = self.turn_seconds;
        if !(a > 0.0 && b >= a) {
            return Err(Error::config("simulation.turn_seconds", "need 0 < min <= max"));
        }
        let (a, b) = self.pause_seconds;
        if !(a >= 0.0 && b >= a) {
            return Err(Error::config("simulation.pause_seconds", "need 0 <= min <= max"));
        }
        Ok(())
    }
}

// Speaker id of a synthetic pool member as written to RTTM.
pub fn speaker_label(s: &SyntheticSpeaker) -> String {
    format!("spk{:03}", s.id)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedConversation {
    pub audio: Vec<f64>,
    pub segments: Vec<RttmSegment>,
    pub realized_overlap: f64,
}

fn quantize(t: f64) -> f64 {
    (t * 100.0).round() / 100.0
}

/// Time with two or more active speakers over time with at least one.
pub fn overlap_ratio(segments: &[RttmSegment]) -> f64 {
    let mut ev: Vec<(f64, i32)> = segments
        .iter()
        .flat_map(|s| [(s.onset, 1), (s.end(), -1)])
        .collect();
    ev.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (mut speech, mut overlap, mut active, mut last) = (0.0, 0.0, 0, 0.0);
    for (t, d) in ev {
        let dt = t - last;
        if active >= 1 {
            speech += dt;
        }
        if active >= 2 {
            overlap += dt;
        }
        active += d;
        last = t;
    }
    if speech > 0.0 {
        overlap / speech
    } else {
        0.0
    }
}

/// Scheduled turns `(speaker index, onset, length)`.
pub fn schedule(spec: &ConversationSpec) -> Result<Vec<(usize, f64, f64)>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x5C4E));
    let n = spec.speakers.len();
    let r = spec.overlap_ratio;
    let min_turn = 0.3;
    let mut turns: Vec<(usize, f64, f64)> = Vec::new();
    // Union speech and overlap so far, and the tail of the last turn that is
    // free to be overlapped.
    let (mut speech, mut overlap) = (0.0, 0.0);
    let mut free_tail = 0.0;
    let mut prev_end = 0.0;
    let mut order: Vec<usize> = Vec::new();
    loop {
        let k = turns.len();
        let spk = if k < n {
            if order.is_empty() {
                order = (0..n).collect();
                for i in (1..n).rev() {
                    order.swap(i, rng.random_range(0..=i));
                }
            }
            order[k]
        } else {
            let prev = turns[k - 1].0;
            let mut s = rng.random_range(0..n);
            if n > 1 {
                while s == prev {
                    s = rng.random_range(0..n);
                }
            }
            s
        };
        let len = quantize(rng.random_range(spec.turn_seconds.0..=spec.turn_seconds.1));
        let pause = quantize(rng.random_range(spec.pause_seconds.0..=spec.pause_seconds.1));
        let mut ov = if k == 0 || n == 1 { 0.0 } else { (r * (speech + len) - overlap) / (1.0 + r) };
        ov = quantize(ov.min(free_tail).min(len - min_turn));
        let onset = if ov >= 0.1 {
            prev_end - ov
        } else {
            ov = 0.0;
            if k == 0 { quantize(pause) } else { prev_end + pause }
        };
        if onset + min_turn > spec.duration {
            break;
        }
        let len = quantize(len.min(spec.duration - onset));
        let end = quantize(onset + len);
        speech += end - prev_end.max(onset);
        overlap += ov;
        free_tail = quantize(end - prev_end.max(onset));
        prev_end = end;
        turns.push((spk, quantize(onset), len));
    }
    Ok(turns)
}

/// Mixes a scheduled conversation and emits its reference segments.
pub fn mix_conversation(spec: &ConversationSpec, session: &str) -> Result<SimulatedConversation> {
    let turns = schedule(spec)?;
    let sr = spec.sample_rate as f64;
    let total = (spec.duration * sr).round() as usize;
    let mut audio = vec![0.0; total];
    let mut gain_rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x6A1));
    let gains: Vec<f64> = spec
        .speakers
        .iter()
        .map(|_| 10f64.powf(gain_rng.random_range(-3.0..3.0) / 20.0))
        .collect();
    let mut segments = Vec::with_capacity(turns.len());
    for (k, &(spk, onset, len)) in turns.iter().enumerate() {
        let sig = synth_utterance(&spec.speakers[spk], len, mix_seed(spec.seed, k as u64 + 1), spec.sample_rate);
        let start = (onset * sr).round() as usize;
        for (i, v) in sig.iter().enumerate() {
            if let Some(a) = audio.get_mut(start + i) {
                *a += gains[spk] * v;
            }
        }
        segments.push(RttmSegment::new(session, onset, len, speaker_label(&spec.speakers[spk])));
    }
    if let Some(snr) = spec.snr_db {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x401));
        let speech_samples: usize = turns.iter().map(|t| (t.2 * sr) as usize).sum();
        let power = audio.iter().map(|v| v * v).sum::<f64>() / speech_samples.max(1) as f64;
        let amp = (power / 10f64.powf(snr / 10.0) * 3.0).sqrt();
        for a in audio.iter_mut() {
            *a += amp * rng.random_range(-1.0..1.0);
        }
    }
    let peak = audio.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let s = 0.5 / peak;
        audio.iter_mut().for_each(|v| *v *= s);
    }
    let realized = overlap_ratio(&segments);
    if spec.speakers.len() > 1 && (realized - spec.overlap_ratio).abs() > 0.05 {
        log::warn!(
            "{session}: overlap ratio {realized:.3} misses the target {:.3}",
            spec.overlap_ratio
        );
    }
    Ok(SimulatedConversation {
        audio,
        segments,
        realized_overlap: realized,
    })
}

/// Ranges from which each conversation of a dataset is drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
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
    /// Minimum signature distance between pool speakers, in mel.
    pub pool_min_mel: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            min_speakers: 2,
            max_speakers: 10,
            min_overlap: 0.0,
            max_overlap: 0.3,
            duration: 60.0,
            turn_seconds: (1.0, 4.0),
            pause_seconds: (0.1, 0.8),
            snr_db: Some(25.0),
            sample_rate: 16000,
            pool_size: 40,
            pool_seed: 7,
            pool_min_mel: 150.0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_speakers == 0 || self.max_speakers < self.min_speakers {
            return Err(Error::config("simulation.min_speakers", "need 1 <= min_speakers <= max_speakers"));
        }
        if self.max_speakers > self.pool_size {
            return Err(Error::config("simulation.pool_size", "must be at least max_speakers"));
        }
        if !(0.0..0.5).contains(&self.max_overlap) {
            return Err(Error::config("simulation.max_overlap", "must lie in [0, 0.5)"));
        }
        if !(0.0..=self.max_overlap).contains(&self.min_overlap) {
            return Err(Error::config("simulation.min_overlap", "must lie in [0, max_overlap]"));
        }
        if !(self.duration > 0.0) {
            return Err(Error::config("simulation.duration", "must be positive"));
        }
        if self.sample_rate == 0 {
            return Err(Error::config("simulation.sample_rate", "must be positive"));
        }
        Ok(())
    }

    /// Specification of conversation `index` in a split seeded by `seed`.
    pub fn conversation(&self, pool: &[SyntheticSpeaker], seed: u64, index: usize) -> ConversationSpec {
        let cseed = mix_seed(seed, index as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(cseed);
        let n = rng.random_range(self.min_speakers..=self.max_speakers);
        let mut ids: Vec<usize> = (0..pool.len()).collect();
        for i in 0..n {
            let j = rng.random_range(i..ids.len());
            ids.swap(i, j);
        }
        let overlap = if n == 1 {
            0.0
        } else {
            rng.random_range(self.min_overlap..=self.max_overlap)
        };
        ConversationSpec {
            speakers: ids[..n].iter().map(|&i| pool[i].clone()).collect(),
            overlap_ratio: overlap,
            duration: self.duration,
            turn_seconds: self.turn_seconds,
            pause_seconds: self.pause_seconds,
            snr_db: self.snr_db,
            sample_rate: self.sample_rate,
            seed: cseed,
        }
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub session: String,
    pub audio: PathBuf,
    pub rttm: PathBuf,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut s = String::new();
    for e in entries {
        s.push_str(&format!("{}\t{}\t{}\n", e.session, e.audio.display(), e.rttm.display()));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads a manifest; relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::Parse {
                line: k + 1,
                msg: format!("{}: expected 3 tab-separated fields", path.display()),
            });
        }
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() { p } else { base.join(p) }
        };
        out.push(ManifestEntry {
            session: f[0].to_string(),
            audio: resolve(f[1]),
            rttm: resolve(f[2]),
        });
    }
    Ok(out)
}

/// Per-conversation facts written next to the manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ConversationStats {
    pub session: String,
    pub speakers: usize,
    pub target_overlap: f64,
    pub realized_overlap: f64,
}

/// Writes `n` conversations under `dir/<split>/` plus `dir/<split>.tsv`
/// (manifest) and `dir/<split>.stats.tsv`. Paths in the manifest are
/// relative to `dir`.
pub fn build_dataset(
    dir: &Path,
    split: &str,
    n: usize,
    spec: &DatasetSpec,
    seed: u64,
    jobs: usize,
) -> Result<(PathBuf, Vec<ConversationStats>)> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::config("simulation.conversations", "must be at least 1"));
    }
    let pool = speaker_pool(spec.pool_size, spec.pool_seed, spec.pool_min_mel)?;
    let sub = dir.join(split);
    fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let one = |i: usize| -> Result<(ManifestEntry, ConversationStats)> {
        let session = format!("{split}{i:04}");
        let cs = spec.conversation(&pool, seed, i);
        let conv = mix_conversation(&cs, &session)?;
        let wav = sub.join(format!("{session}.wav"));
        let rttm = sub.join(format!("{session}.rttm"));
        write_wav(&wav, &conv.audio, spec.sample_rate)?;
        fs::write(&rttm, write_rttm(&conv.segments)).map_err(|e| Error::io(&rttm, e))?;
        Ok((
            ManifestEntry {
                session: session.clone(),
                audio: PathBuf::from(split).join(format!("{session}.wav")),
                rttm: PathBuf::from(split).join(format!("{session}.rttm")),
            },
            ConversationStats {
                session,
                speakers: cs.speakers.len(),
                target_overlap: cs.overlap_ratio,
                realized_overlap: conv.realized_overlap,
            },
        ))
    };
    let results = crate::parallel_map(n, jobs, one);
    let mut entries = Vec::with_capacity(n);
    let mut stats = Vec::with_capacity(n);
    for r in results {
        let (e, s) = r?;
        entries.push(e);
        stats.push(s);
    }
    let manifest = dir.join(format!("{split}.tsv"));
    write_manifest(&manifest, &entries)?;
    let stats_path = dir.join(format!("{split}.stats.tsv"));
    let mut f = fs::File::create(&stats_path).map_err(|e| Error::io(&stats_path, e))?;
    let mut body = String::from("session\tspeakers\ttarget_overlap\trealized_overlap\n");
    for s in &stats {
        body.push_str(&format!(
            "{}\t{}\t{:.4}\t{:.4}\n",
            s.session, s.speakers, s.target_overlap, s.realized_overlap
        ));
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(&stats_path, e))?;
    Ok((manifest, stats))
}

/// Per-speaker total of merged reference time.
pub fn speech_per_speaker(segments: &[RttmSegment]) -> std::collections::BTreeMap<String, f64> {
    let mut by: std::collections::BTreeMap<String, Vec<(f64, f64)>> = Default::default();
    for s in segments {
        by.entry(s.speaker.clone()).or_default().push((s.onset, s.end()));
    }
    by.into_iter()
        .map(|(k, v)| (k, merge_intervals(v).iter().map(|(a, b)| b - a).sum()))
        .collect()
}
