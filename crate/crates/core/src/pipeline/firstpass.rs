use serde::{Deserialize, Serialize};

use super::postprocess::segments_to_frames;
use crate::error::{Error, Result};
use crate::score::{merge_segments, RttmSegment};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FirstPassConfig {
    /// Average-linkage cosine distance below which clusters merge.
    pub ahc_threshold: f64,
    pub subsegment_seconds: f64,
    pub min_profile_seconds: f64,
    /// Remove the session mean from segment embeddings before clustering.
    pub center: bool,
}

impl Default for FirstPassConfig {
    fn default() -> Self {
        Self {
            ahc_threshold: 0.4,
            subsegment_seconds: 1.5,
            min_profile_seconds: 2.0,
            center: true,
        }
    }
}

/// A speech span with the mean embedding over it.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentEmbedding {
    pub onset: f64,
    pub end: f64,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FirstPassSpeaker {
    pub label: String,
    pub segments: Vec<RttmSegment>,
    pub duration: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct FirstPassResult {
    pub speakers: Vec<FirstPassSpeaker>,
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

/// Average-linkage clustering on cosine distance; merges while the closest
/// pair of clusters is nearer than `threshold`. Cluster ids are numbered by
/// first appearance.
pub fn ahc(embeddings: &[Vec<f64>], threshold: f64) -> Vec<usize> {
    let n = embeddings.len();
    let mut dist: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| cosine_distance(&embeddings[i], &embeddings[j])).collect())
        .collect();
    let mut size = vec![1usize; n];
    let mut alive = vec![true; n];
    let mut owner: Vec<usize> = (0..n).collect();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            for j in i + 1..n {
                if alive[i] && alive[j] && best.is_none_or(|b| dist[i][j] < b.2) {
                    best = Some((i, j, dist[i][j]));
                }
            }
        }
        let Some((i, j, d)) = best else { break };
        if d >= threshold {
            break;
        }
        // Lance-Williams update for average linkage.
        for k in 0..n {
            if alive[k] && k != i && k != j {
                let v = (size[i] as f64 * dist[i][k] + size[j] as f64 * dist[j][k]) / (size[i] + size[j]) as f64;
                dist[i][k] = v;
                dist[k][i] = v;
            }
        }
        size[i] += size[j];
        alive[j] = false;
        for o in owner.iter_mut() {
            if *o == j {
                *o = i;
            }
        }
    }
    let mut ids = Vec::new();
    owner
        .iter()
        .map(|o| match ids.iter().position(|x| x == o) {
            Some(p) => p,
            None => {
                ids.push(*o);
                ids.len() - 1
            }
        })
        .collect()
}

/// Clusters segment embeddings into first-pass speakers `fp0`, `fp1`, ….
pub fn ahc_firstpass(session: &str, segments: &[SegmentEmbedding], threshold: f64) -> FirstPassResult {
    if segments.is_empty() {
        return FirstPassResult::default();
    }
    let embs: Vec<Vec<f64>> = segments.iter().map(|s| s.embedding.clone()).collect();
    let ids = ahc(&embs, threshold);
    let k = ids.iter().max().map_or(0, |m| m + 1);
    let speakers = (0..k)
        .map(|c| {
            let label = format!("fp{c}");
            let raw: Vec<RttmSegment> = segments
                .iter()
                .zip(&ids)
                .filter(|(_, &id)| id == c)
                .map(|(s, _)| RttmSegment::new(session, s.onset, s.end - s.onset, label.as_str()))
                .collect();
            let segments = merge_segments(&raw);
            let duration = segments.iter().map(|s| s.duration).sum();
            FirstPassSpeaker { label, segments, duration }
        })
        .collect();
    FirstPassResult { speakers }
}

/// Splits runs of active frames into subsegments of about `len` frames and
/// averages the embeddings over each. A short tail joins the previous piece.
pub fn segment_embeddings(emb: &Tensor, active: &[bool], len: usize, shift: f64) -> Vec<SegmentEmbedding> {
    let t = emb.shape()[0].min(active.len());
    let d = emb.shape()[1];
    let len = len.max(1);
    let mut pieces: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < t {
        if !active[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < t && active[i] {
            i += 1;
        }
        let mut a = start;
        while a < i {
            let mut b = (a + len).min(i);
            if i - b < len / 2 {
                b = i;
            }
            pieces.push((a, b));
            a = b;
        }
    }
    pieces
        .into_iter()
        .map(|(a, b)| {
            let mut m = vec![0.0; d];
            for r in a..b {
                for (x, v) in m.iter_mut().zip(emb.row(r)) {
                    *x += v / (b - a) as f64;
                }
            }
            SegmentEmbedding {
                onset: a as f64 * shift,
                end: b as f64 * shift,
                embedding: m,
            }
        })
        .collect()
}

/// Subtracts the mean over all segments from every segment embedding, so
/// cosine distances compare what differs within the session.
pub fn center_embeddings(segments: &mut [SegmentEmbedding]) {
    let Some(d) = segments.first().map(|s| s.embedding.len()) else { return };
    let mut mean = vec![0.0; d];
    for s in segments.iter() {
        for (m, v) in mean.iter_mut().zip(&s.embedding) {
            *m += v / segments.len() as f64;
        }
    }
    for s in segments.iter_mut() {
        for (v, m) in s.embedding.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
}

/// Profiles `[S', E]` (mean embedding over each speaker's regions) for
/// first-pass speakers with at least `min_dur` seconds, their labels, and the
/// speakers left out.
pub fn profiles_from_firstpass(
    emb: &Tensor,
    fp: &FirstPassResult,
    min_dur: f64,
    shift: f64,
) -> Result<(Tensor, Vec<String>, Vec<FirstPassSpeaker>)> {
    let (t, d) = (emb.shape()[0], emb.shape()[1]);
    let mut rows = Vec::new();
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for spk in &fp.speakers {
        if spk.duration < min_dur {
            excluded.push(spk.clone());
            continue;
        }
        let mask = segments_to_frames(&spk.segments, std::slice::from_ref(&spk.label), t, shift, 0.0);
        let frames: Vec<usize> = (0..t).filter(|&i| mask.at(&[i, 0]) > 0.5).collect();
        if frames.is_empty() {
            return Err(Error::contract(format!(
                "first-pass speaker {} has no embedding frames",
                spk.label
            )));
        }
        let mut m = vec![0.0; d];
        for &i in &frames {
            for (x, v) in m.iter_mut().zip(emb.row(i)) {
                *x += v;
            }
        }
        rows.push(m.into_iter().map(|x| x / frames.len() as f64).collect::<Vec<_>>());
        kept.push(spk.label.clone());
    }
    let profiles = if rows.is_empty() {
        Tensor::zeros(&[0, d])
    } else {
        Tensor::from_rows(&rows)?
    };
    Ok((profiles, kept, excluded))
}
