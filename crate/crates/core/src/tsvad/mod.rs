//! Target-speaker voice activity detection.
//!
//! A [`TsVadModel`] maps log-mel features and a set of speaker profiles to
//! per-frame, per-speaker activity probabilities:
//! front-end → ISD (each speaker independently) → JSD (time and speaker axes
//! alternately) → linear + sigmoid.

mod modules;

pub use modules::{FrontEnd, FrontEndConfig, IsdConfig, IsdModule, JsdConfig, JsdKind, JsdModule, Matcher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsVadConfig {
    pub frontend: FrontEndConfig,
    pub isd: IsdConfig,
    pub jsd: JsdConfig,
}

impl TsVadConfig {
    /// Full-size configuration for a JSD variant.
    pub fn paper(kind: JsdKind) -> Self {
        Self {
            frontend: FrontEndConfig {
                input_dim: 80,
                channels: 256,
                strides: vec![4, 2],
                embed_dim: 128,
            },
            isd: IsdConfig {
                embed_dim: 128,
                profile_dim: 128,
                proj: 384,
                hidden: 128,
                out: 256,
            },
            jsd: JsdConfig::paper(kind),
        }
    }

    /// Every width divided by four.
    pub fn toy(kind: JsdKind) -> Self {
        let p = Self::paper(kind);
        Self {
            frontend: FrontEndConfig {
                channels: p.frontend.channels / 4,
                embed_dim: p.frontend.embed_dim / 4,
                ..p.frontend
            },
            isd: IsdConfig {
                embed_dim: p.isd.embed_dim / 4,
                profile_dim: p.isd.profile_dim / 4,
                proj: p.isd.proj / 4,
                hidden: p.isd.hidden / 4,
                out: p.isd.out / 4,
            },
            jsd: JsdConfig::toy(kind),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.isd.embed_dim != self.frontend.embed_dim {
            return Err(Error::config("model.embed_dim", "ISD input must match the front-end output"));
        }
        if self.isd.profile_dim != self.isd.embed_dim {
            return Err(Error::config("model.profile_dim", "profiles live in embedding space"));
        }
        let attn_dim = match self.jsd.kind {
            JsdKind::TransTrans => self.isd.out,
            _ => self.jsd.blstm_proj,
        };
        if self.jsd.kind != JsdKind::Concat && self.jsd.kind != JsdKind::BlstmBlstm {
            if self.jsd.heads == 0 || attn_dim % self.jsd.heads != 0 {
                return Err(Error::config(
                    "model.heads",
                    format!("attention width {attn_dim} is not divisible by {} heads", self.jsd.heads),
                ));
            }
        }
        Ok(())
    }
}

/// A TS-VAD network together with its parameters.
#[derive(Clone, Debug)]
pub struct TsVadModel {
    pub config: TsVadConfig,
    pub params: ParamStore,
    pub frontend: FrontEnd,
    pub matcher: Matcher,
}

impl TsVadModel {
    pub fn new(config: TsVadConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let frontend = FrontEnd::new(&mut params, "frontend", &config.frontend, &mut rng)?;
        let matcher = Matcher::new(&mut params, "tsvad", config.isd, &config.jsd, &mut rng)?;
        Ok(Self {
            config,
            params,
            frontend,
            matcher,
        })
    }

    pub fn downsample(&self) -> usize {
        self.frontend.downsample()
    }

    /// Frame embeddings `[T, E]` from features `[T0, D]`.
    pub fn embed(&self, g: &mut Graph, feats: Var) -> Result<Var> {
        self.frontend.forward(g, feats)
    }

    /// Activity logits `[T, S]` from embeddings and profiles `[S, P]`.
    pub fn logits(&self, g: &mut Graph, emb: Var, profiles: Var) -> Result<Var> {
        self.matcher.forward(g, emb, profiles)
    }

    /// Activity probabilities `[T, S]`.
    pub fn forward(&self, g: &mut Graph, feats: Var, profiles: Var) -> Result<Var> {
        let e = self.embed(g, feats)?;
        let z = self.logits(g, e, profiles)?;
        Ok(g.sigmoid(z))
    }

    pub fn predict(&self, feats: &Tensor, profiles: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(&self.params);
        let f = g.input(feats.clone());
        let p = g.input(profiles.clone());
        let y = self.forward(&mut g, f, p)?;
        Ok(g.value(y).clone())
    }

    pub fn embeddings(&self, feats: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference(&self.params);
        let f = g.input(feats.clone());
        let e = self.embed(&mut g, f)?;
        Ok(g.value(e).clone())
    }
}

fn check_binary(t: &Tensor, what: &str) -> Result<()> {
    if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract(format!("{what} must be 0/1")));
    }
    Ok(())
}

/// Loss weights `[T, S]` and normalizer for a frame mask `[T]`.
fn masked_weights(shape: &[usize], mask: &[f64]) -> Result<(Tensor, f64)> {
    let (t, s) = (shape[0], shape[1]);
    if mask.len() != t {
        return Err(Error::contract(format!("mask has {} frames, predictions {t}", mask.len())));
    }
    let mut w = Tensor::zeros(&[t, s]);
    for (i, &m) in mask.iter().enumerate() {
        for j in 0..s {
            w.set(&[i, j], m);
        }
    }
    let norm = mask.iter().sum::<f64>() * s as f64;
    if norm <= 0.0 {
        return Err(Error::contract("mask selects no frames"));
    }
    Ok((w, norm))
}

/// Mean BCE over masked frames and all speakers for probabilities `pred: [T, S]`.
pub fn bce_sum_loss(g: &mut Graph, pred: Var, target: &Tensor, mask: &[f64]) -> Result<Var> {
    check_binary(target, "targets")?;
    let (w, norm) = masked_weights(g.shape(pred), mask)?;
    g.bce_with_probs(pred, target, &w, norm)
}

/// [`bce_sum_loss`] evaluated from logits.
pub fn bce_sum_loss_logits(g: &mut Graph, logits: Var, target: &Tensor, mask: &[f64]) -> Result<Var> {
    check_binary(target, "targets")?;
    let (w, norm) = masked_weights(g.shape(logits), mask)?;
    g.bce_with_logits(logits, target, &w, norm)
}

/// Averaging weights for training-time profiles.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileWeights {
    /// `[S', T]`; row `k` averages the frames used for kept speaker `kept[k]`.
    pub weights: Tensor,
    pub kept: Vec<usize>,
    /// Speakers with no active frame in the chunk.
    pub silent: Vec<usize>,
}

/// Frames where each speaker talks alone; falls back to all of its active
/// frames when it never does.
pub fn profile_weights(labels: &Tensor) -> Result<ProfileWeights> {
    if labels.rank() != 2 {
        return Err(Error::contract("labels must be [T, S]"));
    }
    check_binary(labels, "labels")?;
    let (t, s) = (labels.shape()[0], labels.shape()[1]);
    let mut rows = Vec::new();
    let (mut kept, mut silent) = (Vec::new(), Vec::new());
    for j in 0..s {
        let active: Vec<usize> = (0..t).filter(|&i| labels.at(&[i, j]) == 1.0).collect();
        if active.is_empty() {
            silent.push(j);
            continue;
        }
        let solo: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&i| (0..s).all(|k| k == j || labels.at(&[i, k]) == 0.0))
            .collect();
        let frames = if solo.is_empty() { &active } else { &solo };
        let mut row = vec![0.0; t];
        for &i in frames {
            row[i] = 1.0 / frames.len() as f64;
        }
        rows.push(row);
        kept.push(j);
    }
    let weights = if rows.is_empty() {
        Tensor::zeros(&[0, t])
    } else {
        Tensor::from_rows(&rows)?
    };
    Ok(ProfileWeights { weights, kept, silent })
}

/// Profiles `[S', E]` from embeddings `[T, E]` and labels `[T, S]`, with the
/// kept and silent speaker indices.
pub fn training_profiles(emb: &Tensor, labels: &Tensor) -> Result<(Tensor, ProfileWeights)> {
    let w = profile_weights(labels)?;
    if emb.rank() != 2 || emb.shape()[0] != labels.shape()[0] {
        return Err(Error::Shape {
            op: "training_profiles",
            lhs: emb.shape().to_vec(),
            rhs: labels.shape().to_vec(),
        });
    }
    let p = w.weights.matmul(emb)?;
    Ok((p, w))
}

/// Pads profiles with zero rows up to `n`, or keeps the `n` with the most
/// speech. Returns the `[n, P]` profiles, the kept source rows in output
/// order and the excluded rows.
pub fn pad_profiles_baseline(profiles: &Tensor, durations: &[f64], n: usize) -> Result<(Tensor, Vec<usize>, Vec<usize>)> {
    let (s, p) = (profiles.shape()[0], profiles.shape()[1]);
    if durations.len() != s {
        return Err(Error::contract(format!("{} durations for {s} profiles", durations.len())));
    }
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| durations[b].total_cmp(&durations[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.iter().copied().take(n).collect();
    kept.sort_unstable();
    let excluded: Vec<usize> = order.iter().copied().skip(n).collect();
    let mut out = Tensor::zeros(&[n, p]);
    for (k, &r) in kept.iter().enumerate() {
        out.data_mut()[k * p..(k + 1) * p].copy_from_slice(profiles.row(r));
    }
    Ok((out, kept, excluded))
}
