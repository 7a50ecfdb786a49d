//! RTTM reading and writing, and diarization error rate scoring.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::eda::hungarian;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RttmSegment {
    pub session: String,
    pub onset: f64,
    pub duration: f64,
    pub speaker: String,
}

impl RttmSegment {
    pub fn new(session: impl Into<String>, onset: f64, duration: f64, speaker: impl Into<String>) -> Self {
        Self {
            session: session.into(),
            onset,
            duration,
            speaker: speaker.into(),
        }
    }

    pub fn end(&self) -> f64 {
        self.onset + self.duration
    }
}

pub fn parse_rttm(text: &str) -> Result<Vec<RttmSegment>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.first() != Some(&"SPEAKER") {
            continue;
        }
        let err = |msg: String| Error::Parse { line: k + 1, msg };
        if fields.len() < 8 {
            return Err(err(format!("expected at least 8 fields, found {}", fields.len())));
        }
        let num = |i: usize, what: &str| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("bad {what} `{}`", fields[i])))
        };
        let onset = num(3, "onset")?;
        let duration = num(4, "duration")?;
        if onset < 0.0 || duration < 0.0 {
            return Err(err("negative onset or duration".into()));
        }
        if duration == 0.0 {
            continue;
        }
        out.push(RttmSegment::new(fields[1], onset, duration, fields[7]));
    }
    Ok(out)
}

pub fn write_rttm(segments: &[RttmSegment]) -> String {
    let mut s = String::new();
    for seg in segments {
        let _ = writeln!(
            s,
            "SPEAKER {} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>",
            seg.session, seg.onset, seg.duration, seg.speaker
        );
    }
    s
}

pub fn read_rttm_file(path: &Path) -> Result<Vec<RttmSegment>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rttm(&text)
}

/// Sorted union of half-open intervals.
pub fn merge_intervals(mut iv: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    iv.retain(|(a, b)| b > a);
    iv.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(iv.len());
    for (a, b) in iv {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

/// Merges overlapping or abutting segments of the same session and speaker.
/// Output is ordered by session, onset, then speaker.
pub fn merge_segments(segments: &[RttmSegment]) -> Vec<RttmSegment> {
    let mut groups: BTreeMap<(&str, &str), Vec<(f64, f64)>> = BTreeMap::new();
    for s in segments {
        groups
            .entry((s.session.as_str(), s.speaker.as_str()))
            .or_default()
            .push((s.onset, s.end()));
    }
    let mut out: Vec<RttmSegment> = groups
        .into_iter()
        .flat_map(|((sess, spk), iv)| {
            merge_intervals(iv)
                .into_iter()
                .map(move |(a, b)| RttmSegment::new(sess, a, b - a, spk))
        })
        .collect();
    sort_segments(&mut out);
    out
}

pub fn sort_segments(segs: &mut [RttmSegment]) {
    segs.sort_by(|a, b| {
        a.session
            .cmp(&b.session)
            .then(a.onset.total_cmp(&b.onset))
            .then(a.speaker.cmp(&b.speaker))
    });
}

/// Merged no-score zones `[b − collar, b + collar]` around every reference
/// onset and offset.
pub fn collar_zones(reference: &[RttmSegment], collar: f64) -> Vec<(f64, f64)> {
    if collar <= 0.0 {
        return Vec::new();
    }
    merge_intervals(
        reference
            .iter()
            .flat_map(|s| [s.onset, s.end()])
            .map(|b| (b - collar, b + collar))
            .collect(),
    )
}

/// Scored intervals within `[start, end]`: the complement of the collar zones.
pub fn apply_collar(reference: &[RttmSegment], collar: f64, start: f64, end: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut cur = start;
    for (a, b) in collar_zones(reference, collar) {
        if a > cur {
            out.push((cur, a.min(end)));
        }
        cur = cur.max(b);
        if cur >= end {
            break;
        }
    }
    if cur < end {
        out.push((cur, end));
    }
    out.retain(|(a, b)| b > a);
    out
}

fn intersect_len(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let (mut i, mut j, mut total) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if hi > lo {
            total += hi - lo;
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

fn intersect(a: &[(f64, f64)], b: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let (mut i, mut j, mut out) = (0, 0, Vec::new());
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        if hi > lo {
            out.push((lo, hi));
        }
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    out
}

type SpeakerTracks = BTreeMap<String, Vec<(f64, f64)>>;

fn tracks(segs: &[&RttmSegment]) -> SpeakerTracks {
    let mut m: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for s in segs {
        m.entry(s.speaker.clone()).or_default().push((s.onset, s.end()));
    }
    m.into_iter().map(|(k, v)| (k, merge_intervals(v))).collect()
}

/// One-to-one mapping from hypothesis to reference speakers maximizing their
/// co-active time inside `scored` (all time when `None`).
pub fn optimal_speaker_map(
    reference: &[RttmSegment],
    hypothesis: &[RttmSegment],
    scored: Option<&[(f64, f64)]>,
) -> Result<BTreeMap<String, String>> {
    let r = tracks(&reference.iter().collect::<Vec<_>>());
    let h = tracks(&hypothesis.iter().collect::<Vec<_>>());
    map_tracks(&r, &h, scored)
}

fn map_tracks(r: &SpeakerTracks, h: &SpeakerTracks, scored: Option<&[(f64, f64)]>) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    if r.is_empty() || h.is_empty() {
        return Ok(out);
    }
    let clip = |iv: &Vec<(f64, f64)>| match scored {
        Some(s) => intersect(iv, s),
        None => iv.clone(),
    };
    let rs: Vec<(&String, Vec<(f64, f64)>)> = r.iter().map(|(k, v)| (k, clip(v))).collect();
    let hs: Vec<(&String, Vec<(f64, f64)>)> = h.iter().map(|(k, v)| (k, clip(v))).collect();
    let n = rs.len().max(hs.len());
    let mut cost = vec![vec![0.0; n]; n];
    for (i, (_, hv)) in hs.iter().enumerate() {
        for (j, (_, rv)) in rs.iter().enumerate() {
            cost[i][j] = -intersect_len(hv, rv);
        }
    }
    let perm = hungarian(&cost)?;
    for (i, &j) in perm.iter().enumerate() {
        if i < hs.len() && j < rs.len() {
            out.insert(hs[i].0.clone(), rs[j].0.clone());
        }
    }
    Ok(out)
}

/// Error components of one session or a pool of sessions, in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct DerComponents {
    /// Reference speaker time inside the scored region.
    pub scored: f64,
    pub miss: f64,
    pub fa: f64,
    pub conf: f64,
}

impl DerComponents {
    /// `(miss + fa + conf) / scored`, or `None` without reference speech.
    pub fn der(&self) -> Option<f64> {
        (self.scored > 0.0).then(|| (self.miss + self.fa + self.conf) / self.scored)
    }

    pub fn add(&mut self, o: &DerComponents) {
        self.scored += o.scored;
        self.miss += o.miss;
        self.fa += o.fa;
        self.conf += o.conf;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionScore {
    pub components: DerComponents,
    pub ref_speakers: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DerReport {
    pub total: DerComponents,
    pub per_session: BTreeMap<String, SessionScore>,
    pub buckets: BTreeMap<String, DerComponents>,
    /// Bucket labels in rule order.
    pub bucket_order: Vec<String>,
}

/// Event-sweep scoring of one session.
pub fn score_session(reference: &[&RttmSegment], hypothesis: &[&RttmSegment], collar: f64) -> Result<SessionScore> {
    let r = tracks(reference);
    let h = tracks(hypothesis);
    let end = r
        .values()
        .chain(h.values())
        .flatten()
        .map(|iv| iv.1)
        .fold(0.0, f64::max);
    // Collars go around merged speaker turns, so splitting a turn changes nothing.
    let merged: Vec<RttmSegment> = r
        .iter()
        .flat_map(|(spk, iv)| iv.iter().map(move |&(a, b)| RttmSegment::new("", a, b - a, spk.as_str())))
        .collect();
    let scored = apply_collar(&merged, collar, 0.0, end);
    let map = map_tracks(&r, &h, Some(&scored))?;

    let ref_names: Vec<&String> = r.keys().collect();
    let mapped: Vec<Option<usize>> = h
        .keys()
        .map(|k| map.get(k).and_then(|rn| ref_names.iter().position(|n| *n == rn)))
        .collect();
    let rt: Vec<&Vec<(f64, f64)>> = r.values().collect();
    let ht: Vec<&Vec<(f64, f64)>> = h.values().collect();

    let mut cuts: Vec<f64> = scored.iter().flat_map(|&(a, b)| [a, b]).collect();
    for iv in rt.iter().chain(ht.iter()) {
        cuts.extend(iv.iter().flat_map(|&(a, b)| [a, b]));
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let active = |iv: &[(f64, f64)], t: f64| {
        let k = iv.partition_point(|p| p.1 <= t);
        k < iv.len() && iv[k].0 <= t
    };
    let mut c = DerComponents::default();
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mid = 0.5 * (a + b);
        if !active(&scored, mid) {
            continue;
        }
        let dt = b - a;
        let r_on: Vec<bool> = rt.iter().map(|iv| active(iv, mid)).collect();
        let nr = r_on.iter().filter(|&&x| x).count();
        let mut nh = 0;
        let mut matched = 0;
        for (k, iv) in ht.iter().enumerate() {
            if active(iv, mid) {
                nh += 1;
                if mapped[k].is_some_and(|j| r_on[j]) {
                    matched += 1;
                }
            }
        }
        c.scored += nr as f64 * dt;
        c.miss += nr.saturating_sub(nh) as f64 * dt;
        c.fa += nh.saturating_sub(nr) as f64 * dt;
        c.conf += (nr.min(nh) - matched) as f64 * dt;
    }
    Ok(SessionScore {
        components: c,
        ref_speakers: r.len(),
    })
}

/// Maps a reference speaker count to a bucket label.
#[derive(Clone, Debug, PartialEq)]
pub struct BucketRule {
    /// `(low, high, label)` with inclusive bounds; `high = None` is open-ended.
    ranges: Vec<(usize, Option<usize>, String)>,
}

impl BucketRule {
    /// Parses `"1-10,11+"` or `"2,3,4,5,6+"`.
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = || Error::config("inference.buckets", format!("cannot parse bucket rule `{spec}`"));
        let mut ranges = Vec::new();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
            let range = if let Some(lo) = part.strip_suffix('+') {
                (num(lo)?, None)
            } else if let Some((lo, hi)) = part.split_once('-') {
                (num(lo)?, Some(num(hi)?))
            } else {
                let v = num(part)?;
                (v, Some(v))
            };
            if range.1.is_some_and(|hi| hi < range.0) {
                return Err(bad());
            }
            ranges.push((range.0, range.1, part.to_string()));
        }
        if ranges.is_empty() {
            return Err(bad());
        }
        Ok(Self { ranges })
    }

    pub fn label(&self, count: usize) -> Option<&str> {
        self.ranges
            .iter()
            .find(|(lo, hi, _)| count >= *lo && hi.is_none_or(|h| count <= h))
            .map(|r| r.2.as_str())
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.ranges.iter().map(|r| r.2.as_str())
    }
}

impl Default for BucketRule {
    fn default() -> Self {
        Self::parse("1-10,11+").expect("valid")
    }
}

/// Pools session components per bucket; sessions outside every range are skipped.
pub fn breakdown(sessions: &BTreeMap<String, SessionScore>, rule: &BucketRule) -> BTreeMap<String, DerComponents> {
    let mut out: BTreeMap<String, DerComponents> = BTreeMap::new();
    for s in sessions.values() {
        if let Some(l) = rule.label(s.ref_speakers) {
            out.entry(l.to_string()).or_default().add(&s.components);
        }
    }
    out
}

/// Scores every reference session; hypothesis sessions absent from the
/// reference are ignored.
pub fn compute_der(reference: &[RttmSegment], hypothesis: &[RttmSegment], collar: f64, rule: &BucketRule) -> Result<DerReport> {
    if !(collar >= 0.0 && collar.is_finite()) {
        return Err(Error::contract("collar must be a non-negative number"));
    }
    let mut by_ref: BTreeMap<&str, Vec<&RttmSegment>> = BTreeMap::new();
    for s in reference {
        by_ref.entry(&s.session).or_default().push(s);
    }
    let mut by_hyp: BTreeMap<&str, Vec<&RttmSegment>> = BTreeMap::new();
    for s in hypothesis {
        by_hyp.entry(&s.session).or_default().push(s);
    }
    let unknown: BTreeSet<&str> = by_hyp.keys().filter(|k| !by_ref.contains_key(*k)).copied().collect();
    if !unknown.is_empty() {
        log::warn!("hypothesis sessions without reference ignored: {unknown:?}");
    }
    let mut per_session = BTreeMap::new();
    let mut total = DerComponents::default();
    for (sess, refs) in &by_ref {
        let hyps = by_hyp.get(sess).cloned().unwrap_or_default();
        let s = score_session(refs, &hyps, collar)?;
        total.add(&s.components);
        per_session.insert(sess.to_string(), s);
    }
    if total.scored <= 0.0 {
        return Err(Error::contract("reference contains no scored speech; DER is undefined"));
    }
    let buckets = breakdown(&per_session, rule);
    Ok(DerReport {
        total,
        per_session,
        buckets,
        bucket_order: rule.labels().map(str::to_string).collect(),
    })
}

fn pct(c: &DerComponents) -> f64 {
    100.0 * c.der().unwrap_or(f64::NAN)
}

impl DerReport {
    pub fn der(&self) -> f64 {
        self.total.der().unwrap_or(f64::NAN)
    }

    pub fn to_text(&self) -> String {
        let t = &self.total;
        let mut s = format!(
            "DER {:.2}% (scored {:.3} s, miss {:.3} s, fa {:.3} s, conf {:.3} s)\n",
            pct(t),
            t.scored,
            t.miss,
            t.fa,
            t.conf
        );
        if !self.buckets.is_empty() {
            let _ = writeln!(s, "{:<10} {:>10} {:>8}", "speakers", "scored", "DER");
            for label in &self.bucket_order {
                if let Some(b) = self.buckets.get(label) {
                    let _ = writeln!(s, "{:<10} {:>10.3} {:>7.2}%", label, b.scored, pct(b));
                }
            }
        }
        s
    }

    /// JSON with keys `total` (DER %), `scored`, `miss`, `fa`, `conf`
    /// (seconds), `per_session` and `buckets`.
    pub fn to_json(&self) -> String {
        let comp = |c: &DerComponents| {
            serde_json::json!({
                "der": c.der().map(|d| 100.0 * d),
                "scored": c.scored,
                "miss": c.miss,
                "fa": c.fa,
                "conf": c.conf,
            })
        };
        let per_session: serde_json::Map<String, serde_json::Value> = self
            .per_session
            .iter()
            .map(|(k, v)| {
                let mut o = comp(&v.components);
                o["ref_speakers"] = v.ref_speakers.into();
                (k.clone(), o)
            })
            .collect();
        let buckets: serde_json::Map<String, serde_json::Value> =
            self.buckets.iter().map(|(k, v)| (k.clone(), comp(v))).collect();
        let doc = serde_json::json!({
            "total": 100.0 * self.der(),
            "scored": self.total.scored,
            "miss": self.total.miss,
            "fa": self.total.fa,
            "conf": self.total.conf,
            "per_session": per_session,
            "buckets": buckets,
        });
        serde_json::to_string_pretty(&doc).expect("serializable")
    }
}
