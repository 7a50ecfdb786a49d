#![allow(dead_code)]

use diarkit::score::RttmSegment;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(cur: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for k in 0..used.len() {
            if !used[k] {
                used[k] = true;
                cur.push(k);
                go(cur, used, out);
                cur.pop();
                used[k] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Minimum assignment cost by exhaustive search.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    permutations(cost.len())
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

/// Error times `(scored, miss, fa, conf)` in seconds from sampling every
/// millisecond at its midpoint, with the best speaker map found by
/// exhaustive search over the sampled co-activity.
pub fn dense_der(reference: &[RttmSegment], hypothesis: &[RttmSegment], collar: f64) -> (f64, f64, f64, f64) {
    let names = |segs: &[RttmSegment]| {
        let mut v: Vec<String> = segs.iter().map(|s| s.speaker.clone()).collect();
        v.sort();
        v.dedup();
        v
    };
    let (rn, hn) = (names(reference), names(hypothesis));
    let end = reference
        .iter()
        .chain(hypothesis)
        .map(|s| s.end())
        .fold(0.0, f64::max);
    let steps = (end * 1000.0).ceil() as usize;
    let on = |segs: &[RttmSegment], who: &str, t: f64| segs.iter().any(|s| s.speaker == who && s.onset <= t && t < s.end());
    let in_collar = |t: f64| {
        reference
            .iter()
            .flat_map(|s| [s.onset, s.end()])
            .any(|b| (t - b).abs() <= collar)
    };
    let mut frames: Vec<(Vec<bool>, Vec<bool>)> = Vec::new();
    for k in 0..steps {
        let t = (k as f64 + 0.5) / 1000.0;
        if collar > 0.0 && in_collar(t) {
            continue;
        }
        let r: Vec<bool> = rn.iter().map(|n| on(reference, n, t)).collect();
        let h: Vec<bool> = hn.iter().map(|n| on(hypothesis, n, t)).collect();
        frames.push((r, h));
    }
    let n = rn.len().max(hn.len());
    let mut best: Option<(f64, Vec<usize>)> = None;
    for p in permutations(n) {
        let mut score = 0.0;
        for (r, h) in &frames {
            for (i, &j) in p.iter().enumerate() {
                if i < hn.len() && j < rn.len() && h[i] && r[j] {
                    score += 1.0;
                }
            }
        }
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, p));
        }
    }
    let map = best.map(|b| b.1).unwrap_or_default();
    let (mut scored, mut miss, mut fa, mut conf) = (0.0, 0.0, 0.0, 0.0);
    for (r, h) in &frames {
        let nr = r.iter().filter(|&&x| x).count();
        let nh = h.iter().filter(|&&x| x).count();
        let matched = (0..hn.len()).filter(|&i| h[i] && map[i] < rn.len() && r[map[i]]).count();
        scored += nr as f64;
        miss += nr.saturating_sub(nh) as f64;
        fa += nh.saturating_sub(nr) as f64;
        conf += (nr.min(nh) - matched) as f64;
    }
    (scored / 1000.0, miss / 1000.0, fa / 1000.0, conf / 1000.0)
}

/// A random reference and a perturbed hypothesis for one short session,
/// with boundaries on a 10-ms grid.
pub fn random_pair(seed: u64) -> (Vec<RttmSegment>, Vec<RttmSegment>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = |x: f64| (x * 100.0).round() / 100.0;
    let n_ref = rng.random_range(1..=3);
    let mut reference = Vec::new();
    for k in 0..n_ref {
        let mut t = rng.random_range(0.0..2.0);
        for _ in 0..rng.random_range(1..=3) {
            let d = rng.random_range(0.3..3.0);
            reference.push(RttmSegment::new("s", grid(t), grid(d), format!("r{k}")));
            t += d + rng.random_range(0.2..2.0);
        }
    }
    let n_hyp = rng.random_range(1..=4);
    let mut hypothesis = Vec::new();
    for seg in &reference {
        if rng.random_bool(0.15) {
            continue;
        }
        let spk = rng.random_range(0..n_hyp);
        let a = (seg.onset + rng.random_range(-0.4..0.4)).max(0.0);
        let d = (seg.duration + rng.random_range(-0.4..0.4)).max(0.1);
        hypothesis.push(RttmSegment::new("s", grid(a), grid(d), format!("h{spk}")));
    }
    if rng.random_bool(0.5) {
        let spk = rng.random_range(0..n_hyp);
        hypothesis.push(RttmSegment::new("s", grid(rng.random_range(0.0..8.0)), 0.5, format!("h{spk}")));
    }
    (reference, hypothesis)
}

/// Largest gradient error over `per_param` randomly chosen scalars of every
/// parameter tensor, against central differences with step `h`. Errors are
/// relative to `max(|analytic|, |numeric|, 1e-6)`: below that magnitude the
/// difference quotient itself carries more than 1e-4 relative roundoff.
pub fn sampled_param_check<F>(store: &diarkit::tensor::ParamStore, f: F, per_param: usize, h: f64, seed: u64) -> f64
where
    F: Fn(&mut diarkit::tensor::Graph) -> diarkit::Result<diarkit::tensor::Var>,
{
    use diarkit::tensor::Graph;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::with_params(store);
    let loss = f(&mut g).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic = g.param_grads(&grads);
    drop(g);
    let mut probe = store.clone();
    let eval = |s: &diarkit::tensor::ParamStore| {
        let mut g = Graph::inference(s);
        let l = f(&mut g).unwrap();
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (id, grad) in analytic {
        let n = store.value(id).numel();
        for _ in 0..per_param.min(n) {
            let k = rng.random_range(0..n);
            let orig = store.value(id).data()[k];
            probe.value_mut(id).data_mut()[k] = orig + h;
            let up = eval(&probe);
            probe.value_mut(id).data_mut()[k] = orig - h;
            let down = eval(&probe);
            probe.value_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
    }
    worst
}

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> diarkit::Tensor {
    let n = shape.iter().product();
    diarkit::Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Columns of `t: [T, S]` reordered so output column `j` is input column `perm[j]`.
pub fn permute_columns(t: &diarkit::Tensor, perm: &[usize]) -> diarkit::Tensor {
    t.select_columns(perm)
}
