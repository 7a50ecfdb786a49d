use std::collections::BTreeSet;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::score::{merge_segments, RttmSegment};
use crate::tensor::Tensor;

/// Consecutive `[start, end)` ranges of at most `chunk` frames covering `0..len`.
pub fn chunk(len: usize, chunk: usize) -> Vec<Range<usize>> {
    let chunk = chunk.max(1);
    (0..len.div_ceil(chunk))
        .map(|k| k * chunk..((k + 1) * chunk).min(len))
        .collect()
}

/// `1` where `p >= thr`.
pub fn binarize(probs: &Tensor, thr: f64) -> Tensor {
    probs.map(|p| if p >= thr { 1.0 } else { 0.0 })
}

/// Recursive median filter on each column of a binary `[T, S]` matrix.
///
/// The window holds the `taps / 2` previous outputs, the current input and
/// the next `taps / 2` inputs; edges replicate the first and last input.
/// Feeding back outputs makes the filter idempotent.
pub fn median_filter(decisions: &Tensor, taps: usize) -> Result<Tensor> {
    if taps % 2 == 0 {
        return Err(Error::contract(format!("median filter needs an odd tap count, got {taps}")));
    }
    let (t, s) = (decisions.shape()[0], decisions.shape()[1]);
    let half = taps / 2;
    let mut out = decisions.clone();
    for j in 0..s {
        let x: Vec<f64> = (0..t).map(|i| decisions.at(&[i, j])).collect();
        let mut y = Vec::with_capacity(t);
        for i in 0..t {
            let mut ones = 0;
            for k in 1..=half {
                let v = if i >= k { y[i - k] } else { x[0] };
                ones += (v > 0.5) as usize;
            }
            for k in 0..=half {
                ones += (x[(i + k).min(t - 1)] > 0.5) as usize;
            }
            y.push(if ones > half { 1.0 } else { 0.0 });
        }
        for (i, v) in y.into_iter().enumerate() {
            out.set(&[i, j], v);
        }
    }
    Ok(out)
}

/// Runs of active frames as segments; frame `t` spans `[t·shift, (t+1)·shift)`
/// after `offset`.
pub fn frames_to_segments(
    decisions: &Tensor,
    labels: &[String],
    session: &str,
    shift: f64,
    offset: f64,
) -> Vec<RttmSegment> {
    let (t, s) = (decisions.shape()[0], decisions.shape()[1]);
    let mut out = Vec::new();
    for (j, label) in labels.iter().enumerate().take(s) {
        let mut start = None;
        for i in 0..=t {
            let on = i < t && decisions.at(&[i, j]) > 0.5;
            match (on, start) {
                (true, None) => start = Some(i),
                (false, Some(a)) => {
                    out.push(RttmSegment::new(
                        session,
                        offset + a as f64 * shift,
                        (i - a) as f64 * shift,
                        label.as_str(),
                    ));
                    start = None;
                }
                _ => {}
            }
        }
    }
    crate::score::sort_segments(&mut out);
    out
}

/// `[T, S]` frame labels: a frame is active when more than half of it is covered.
pub fn segments_to_frames(segs: &[RttmSegment], labels: &[String], frames: usize, shift: f64, offset: f64) -> Tensor {
    let s = labels.len();
    let mut cover = vec![0.0; frames * s];
    for seg in segs {
        let Some(j) = labels.iter().position(|l| *l == seg.speaker) else { continue };
        let (a, b) = ((seg.onset - offset) / shift, (seg.end() - offset) / shift);
        let lo = a.floor().max(0.0) as usize;
        let hi = (b.ceil().max(0.0) as usize).min(frames);
        for i in lo..hi {
            let ov = (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0);
            cover[i * s + j] += ov;
        }
    }
    let data = cover.into_iter().map(|c| if c > 0.5 { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[frames, s], data).expect("shape")
}

/// Union of model output and copied-through first-pass segments, merged per speaker.
pub fn stitch(model: &[RttmSegment], copied: &[RttmSegment]) -> Result<Vec<RttmSegment>> {
    let a: BTreeSet<(&str, &str)> = model.iter().map(|s| (s.session.as_str(), s.speaker.as_str())).collect();
    if let Some(c) = copied.iter().find(|s| a.contains(&(s.session.as_str(), s.speaker.as_str()))) {
        return Err(Error::contract(format!(
            "speaker label `{}` appears in both segment sets of session {}",
            c.speaker, c.session
        )));
    }
    let mut all = model.to_vec();
    all.extend_from_slice(copied);
    Ok(merge_segments(&all))
}
