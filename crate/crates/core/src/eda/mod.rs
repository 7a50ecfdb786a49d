//! End-to-end diarization with encoder-decoder attractors.
//!
//! An [`EdaModel`] encodes stacked features with a transformer, summarizes
//! the (time-shuffled) embeddings into speaker attractors with an LSTM
//! encoder-decoder, and scores frame activity per attractor with either a
//! dot product or a TS-VAD [`Matcher`].

mod hungarian;

pub use hungarian::{assignment_cost, hungarian};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Linear, LstmCell, TransformerConfig, TransformerEncoderLayer};
use crate::tensor::{kernels, Graph, ParamStore, Tensor, Var};
use crate::tsvad::{IsdConfig, JsdConfig, JsdKind, Matcher};

/// Linear projection followed by transformer layers without positional encoding.
#[derive(Clone, Debug)]
pub struct EendEncoder {
    pub input: Linear,
    pub layers: Vec<TransformerEncoderLayer>,
}

impl EendEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EdaConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let input = Linear::new(store, &format!("{name}.input"), cfg.input_dim, cfg.model_dim, rng);
        let layers = (0..cfg.layers)
            .map(|k| {
                TransformerEncoderLayer::new(
                    store,
                    &format!("{name}.layer{k}"),
                    TransformerConfig {
                        heads: cfg.heads,
                        dim: cfg.model_dim,
                        ff_dim: cfg.ff_dim,
                        positional_encoding: false,
                    },
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { input, layers })
    }

    /// `[T, D_in] -> [T, D]`.
    pub fn forward(&self, g: &mut Graph, feats: Var) -> Result<Var> {
        let shape = g.shape(feats).to_vec();
        if shape.len() != 2 || shape[1] != self.input.in_dim {
            return Err(Error::Shape {
                op: "eend_encode",
                lhs: shape,
                rhs: vec![self.input.in_dim],
            });
        }
        let t = shape[0];
        let x = self.input.forward(g, feats)?;
        let mut x = g.reshape(x, &[1, t, self.input.out_dim])?;
        for layer in &self.layers {
            x = layer.forward(g, x)?;
        }
        g.reshape(x, &[t, self.input.out_dim])
    }
}

/// Uniformly random row order of `t` frames, fixed by `seed`.
pub fn shuffle_permutation(t: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..t).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    perm
}

/// Rows of `emb` in a seed-determined random order.
pub fn shuffle_time(emb: &Tensor, seed: u64) -> Tensor {
    emb.select_rows(&shuffle_permutation(emb.shape()[0], seed))
}

/// LSTM encoder-decoder attractor extractor with an existence head.
#[derive(Clone, Debug)]
pub struct EdaModule {
    pub encoder: LstmCell,
    pub decoder: LstmCell,
    pub existence: Linear,
}

impl EdaModule {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            encoder: LstmCell::new(store, &format!("{name}.encoder"), dim, dim, rng),
            decoder: LstmCell::new(store, &format!("{name}.decoder"), dim, dim, rng),
            existence: Linear::new(store, &format!("{name}.existence"), dim, 1, rng),
        }
    }

    /// Decodes `n` attractors from `emb: [T, D]`; returns attractors `[n, D]`
    /// and existence logits `[n]`.
    pub fn extract(&self, g: &mut Graph, emb: Var, n: usize) -> Result<(Var, Var)> {
        if n == 0 {
            return Err(Error::contract("decode at least one attractor"));
        }
        let shape = g.shape(emb).to_vec();
        let (t, d) = (shape[0], shape[1]);
        let h = self.encoder.hidden;
        let x = g.reshape(emb, &[1, t, d])?;
        let states = self.encoder.scan(g, x, None, false)?;
        let last = g.narrow(states, 1, t - 1, 1)?;
        let h0 = g.narrow(last, 2, 0, h)?;
        let h0 = g.reshape(h0, &[1, h])?;
        let c0 = g.narrow(last, 2, h, h)?;
        let c0 = g.reshape(c0, &[1, h])?;
        let zeros = g.input(Tensor::zeros(&[1, n, self.decoder.input]));
        let dec = self.decoder.scan(g, zeros, Some((h0, c0)), false)?;
        let att = g.narrow(dec, 2, 0, h)?;
        let att = g.reshape(att, &[n, h])?;
        let logits = self.existence.forward(g, att)?;
        let logits = g.reshape(logits, &[n])?;
        Ok((att, logits))
    }
}

/// Decoded attractors with their existence probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct AttractorSet {
    /// `[count, D]`.
    pub attractors: Tensor,
    /// Probabilities for every decoded step, including the stopping one.
    pub existence_probs: Vec<f64>,
    pub count: usize,
    pub truncated: bool,
}

/// Number of leading probabilities at or above `tau`, capped at `max`.
/// The flag reports whether the cap cut decoding short.
pub fn count_speakers(probs: &[f64], tau: f64, max: usize) -> (usize, bool) {
    match probs.iter().take(max).position(|&p| p < tau) {
        Some(k) => (k, false),
        None => {
            let n = probs.len().min(max);
            (n, n == max)
        }
    }
}

/// `σ(E·Aᵀ)` for `E: [T, D]`, `A: [S, D]`.
pub fn dot_match(g: &mut Graph, emb: Var, attractors: Var) -> Result<Var> {
    let z = dot_logits(g, emb, attractors)?;
    Ok(g.sigmoid(z))
}

pub fn dot_logits(g: &mut Graph, emb: Var, attractors: Var) -> Result<Var> {
    let at = g.transpose(attractors, 0, 1)?;
    g.matmul(emb, at)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatcherKind {
    Dot,
    Tsvad,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdaConfig {
    /// Stacked feature width.
    pub input_dim: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub matcher: MatcherKind,
    /// TS-VAD matcher sizes; `embed_dim` and `profile_dim` equal `model_dim`.
    pub isd: IsdConfig,
    pub jsd: JsdConfig,
    pub tau: f64,
    pub max_attractors: usize,
    pub alpha: f64,
}

impl EdaConfig {
    pub fn paper(matcher: MatcherKind, jsd_blocks: usize) -> Self {
        Self {
            input_dim: 600,
            model_dim: 320,
            layers: 6,
            heads: 10,
            ff_dim: 1024,
            matcher,
            isd: IsdConfig {
                embed_dim: 320,
                profile_dim: 320,
                proj: 384,
                hidden: 128,
                out: 256,
            },
            jsd: JsdConfig {
                blocks: jsd_blocks,
                ..JsdConfig::paper(JsdKind::BlstmTimeTransSpk)
            },
            tau: 0.5,
            max_attractors: 12,
            alpha: 1.0,
        }
    }

    /// Widths divided by four; two encoder layers with four heads.
    pub fn toy(matcher: MatcherKind, jsd_blocks: usize) -> Self {
        let p = Self::paper(matcher, jsd_blocks);
        Self {
            model_dim: 80,
            layers: 2,
            heads: 4,
            ff_dim: 256,
            isd: IsdConfig {
                embed_dim: 80,
                profile_dim: 80,
                proj: 96,
                hidden: 32,
                out: 64,
            },
            jsd: JsdConfig {
                blocks: jsd_blocks,
                ..JsdConfig::toy(JsdKind::BlstmTimeTransSpk)
            },
            ..p
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::config("model.heads", "model_dim must be divisible by heads"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config("inference.tau", "must lie in [0, 1]"));
        }
        if self.max_attractors == 0 {
            return Err(Error::config("inference.max_attractors", "must be positive"));
        }
        if self.alpha < 0.0 {
            return Err(Error::config("training.alpha", "must be non-negative"));
        }
        if self.matcher == MatcherKind::Tsvad {
            if self.isd.embed_dim != self.model_dim || self.isd.profile_dim != self.model_dim {
                return Err(Error::config("model.isd", "matcher inputs must equal model_dim"));
            }
            if self.jsd.kind != JsdKind::BlstmTimeTransSpk || !(1..=2).contains(&self.jsd.blocks) {
                return Err(Error::config(
                    "model.jsd_blocks",
                    "the attractor matcher uses 1 or 2 BLSTM/transformer blocks",
                ));
            }
        }
        Ok(())
    }
}

/// Outputs of a training forward pass.
pub struct EdaTrainOutputs {
    /// Activity logits `[T, n]` for the first `n` attractors.
    pub logits: Var,
    /// Existence logits `[n + 1]`.
    pub existence: Var,
}

/// EEND-EDA with a dot-product or TS-VAD matcher.
#[derive(Clone, Debug)]
pub struct EdaModel {
    pub config: EdaConfig,
    pub params: ParamStore,
    pub encoder: EendEncoder,
    pub eda: EdaModule,
    pub matcher: Option<Matcher>,
}

impl EdaModel {
    pub fn new(config: EdaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = EendEncoder::new(&mut params, "eend", &config, &mut rng)?;
        let eda = EdaModule::new(&mut params, "eda", config.model_dim, &mut rng);
        let matcher = match config.matcher {
            MatcherKind::Dot => None,
            MatcherKind::Tsvad => Some(Matcher::new(&mut params, "matcher", config.isd, &config.jsd, &mut rng)?),
        };
        Ok(Self {
            config,
            params,
            encoder,
            eda,
            matcher,
        })
    }

    pub fn encode(&self, g: &mut Graph, feats: Var) -> Result<Var> {
        self.encoder.forward(g, feats)
    }

    /// Activity logits `[T, S]` for embeddings `[T, D]` and attractors `[S, D]`.
    pub fn match_logits(&self, g: &mut Graph, emb: Var, attractors: Var) -> Result<Var> {
        match &self.matcher {
            None => dot_logits(g, emb, attractors),
            Some(m) => m.forward(g, emb, attractors),
        }
    }

    /// Training pass for a chunk with `n` speakers: attractors come from the
    /// time-shuffled embeddings, activities from the original order.
    pub fn train_forward(&self, g: &mut Graph, feats: Var, n: usize, shuffle_seed: u64) -> Result<EdaTrainOutputs> {
        let emb = self.encode(g, feats)?;
        let t = g.shape(emb)[0];
        let shuffled = g.gather_rows(emb, &shuffle_permutation(t, shuffle_seed))?;
        let (att, existence) = self.eda.extract(g, shuffled, n + 1)?;
        let logits = if n == 0 {
            g.input(Tensor::zeros(&[t, 0]))
        } else {
            let att = g.narrow(att, 0, 0, n)?;
            self.match_logits(g, emb, att)?
        };
        Ok(EdaTrainOutputs { logits, existence })
    }

    /// Single-pass inference: activities `[T, S]` and the decoded attractors.
    pub fn infer(&self, feats: &Tensor) -> Result<(Tensor, AttractorSet)> {
        self.infer_with(feats, self.config.tau)
    }

    pub fn infer_with(&self, feats: &Tensor, tau: f64) -> Result<(Tensor, AttractorSet)> {
        let mut g = Graph::inference(&self.params);
        let f = g.input(feats.clone());
        let emb = self.encode(&mut g, f)?;
        let t = g.shape(emb)[0];
        let max = self.config.max_attractors;
        let (att, logits) = self.eda.extract(&mut g, emb, max)?;
        let probs: Vec<f64> = g.value(logits).data().iter().map(|&z| kernels::sigmoid(z)).collect();
        let (count, truncated) = count_speakers(&probs, tau, max);
        if truncated {
            log::warn!("attractor decoding stopped at the cap of {max} speakers");
        }
        let d = self.config.model_dim;
        if count == 0 {
            let set = AttractorSet {
                attractors: Tensor::zeros(&[0, d]),
                existence_probs: probs,
                count,
                truncated,
            };
            return Ok((Tensor::zeros(&[t, 0]), set));
        }
        let att = g.narrow(att, 0, 0, count)?;
        let z = self.match_logits(&mut g, emb, att)?;
        let y = g.sigmoid(z);
        let probs = probs[..(count + 1).min(probs.len())].to_vec();
        let set = AttractorSet {
            attractors: g.value(att).clone(),
            existence_probs: probs,
            count,
            truncated,
        };
        Ok((g.value(y).clone(), set))
    }
}

fn frame_weights(t: usize, s: usize, mask: &[f64]) -> Result<(Tensor, f64)> {
    if mask.len() != t {
        return Err(Error::contract(format!("mask has {} frames, predictions {t}", mask.len())));
    }
    let valid: f64 = mask.iter().sum();
    if valid <= 0.0 {
        return Err(Error::contract("mask selects no frames"));
    }
    let mut w = Tensor::zeros(&[t, s]);
    for (i, &m) in mask.iter().enumerate() {
        w.data_mut()[i * s..(i + 1) * s].fill(m);
    }
    Ok((w, valid * s as f64))
}

/// `C[i][j]`: masked mean BCE of prediction column `i` against target column `j`.
pub fn pairwise_bce(pred: &Tensor, target: &Tensor, mask: &[f64], logits: bool) -> Result<Vec<Vec<f64>>> {
    let (t, s) = (pred.shape()[0], pred.shape()[1]);
    if target.shape() != [t, s] {
        return Err(Error::Shape {
            op: "pit",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let valid: f64 = mask.iter().sum();
    let mut c = vec![vec![0.0; s]; s];
    for (i, row) in c.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (f, &m) in mask.iter().enumerate() {
                if m != 0.0 {
                    let (x, y) = (pred.at(&[f, i]), target.at(&[f, j]));
                    let l = if logits { kernels::bce_with_logit(x, y) } else { kernels::bce_prob(x, y) };
                    acc += m * l;
                }
            }
            *cell = acc / valid;
        }
    }
    Ok(c)
}

fn pit(g: &mut Graph, pred: Var, target: &Tensor, mask: &[f64], logits: bool) -> Result<(Var, Vec<usize>)> {
    let shape = g.shape(pred).to_vec();
    if shape.len() != 2 || target.shape() != shape.as_slice() {
        return Err(Error::contract(format!(
            "permutation-free loss needs equal speaker counts, got {:?} and {:?}",
            shape,
            target.shape()
        )));
    }
    if target.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract("targets must be 0/1"));
    }
    let (t, s) = (shape[0], shape[1]);
    let (w, norm) = frame_weights(t, s, mask)?;
    let cost = pairwise_bce(g.value(pred), target, mask, logits)?;
    let perm = hungarian(&cost)?;
    let permuted = target.permute(&[1, 0])?.select_rows(&perm).permute(&[1, 0])?;
    let loss = if logits {
        g.bce_with_logits(pred, &permuted, &w, norm)?
    } else {
        g.bce_with_probs(pred, &permuted, &w, norm)?
    };
    Ok((loss, perm))
}

/// Permutation-free BCE for probabilities `[T, S]`; returns the loss and the
/// optimal assignment (prediction column `i` ↔ target column `perm[i]`).
pub fn pit_bce_loss(g: &mut Graph, pred: Var, target: &Tensor, mask: &[f64]) -> Result<(Var, Vec<usize>)> {
    pit(g, pred, target, mask, false)
}

/// [`pit_bce_loss`] evaluated from logits.
pub fn pit_bce_loss_logits(g: &mut Graph, logits: Var, target: &Tensor, mask: &[f64]) -> Result<(Var, Vec<usize>)> {
    pit(g, logits, target, mask, true)
}

fn existence_targets(len: usize, true_n: usize) -> Result<Tensor> {
    if len != true_n + 1 {
        return Err(Error::contract(format!(
            "existence loss expects {} probabilities for {true_n} speakers, got {len}",
            true_n + 1
        )));
    }
    let mut y = vec![1.0; len];
    y[true_n] = 0.0;
    Tensor::new(&[len], y)
}

/// Mean BCE of probabilities `[n + 1]` against `[1, …, 1, 0]`.
pub fn existence_loss(g: &mut Graph, probs: Var, true_n: usize) -> Result<Var> {
    let len = g.value(probs).numel();
    let y = existence_targets(len, true_n)?;
    g.bce_with_probs(probs, &y, &Tensor::ones(&[len]), len as f64)
}

pub fn existence_loss_logits(g: &mut Graph, logits: Var, true_n: usize) -> Result<Var> {
    let len = g.value(logits).numel();
    let y = existence_targets(len, true_n)?;
    g.bce_with_logits(logits, &y, &Tensor::ones(&[len]), len as f64)
}

/// `pit_bce_loss + α·existence_loss`.
pub fn combined_loss(
    g: &mut Graph,
    activities: Var,
    labels: &Tensor,
    mask: &[f64],
    probs: Var,
    true_n: usize,
    alpha: f64,
) -> Result<(Var, Vec<usize>)> {
    if alpha < 0.0 {
        return Err(Error::contract("alpha must be non-negative"));
    }
    let (pit, perm) = pit_bce_loss(g, activities, labels, mask)?;
    let ex = existence_loss(g, probs, true_n)?;
    let ex = g.scale(ex, alpha);
    Ok((g.add(pit, ex)?, perm))
}

/// [`combined_loss`] evaluated from logits. Chunks without speakers carry only
/// the existence term.
pub fn combined_loss_logits(
    g: &mut Graph,
    logits: Var,
    labels: &Tensor,
    mask: &[f64],
    existence: Var,
    true_n: usize,
    alpha: f64,
) -> Result<(Var, Vec<usize>)> {
    let ex = existence_loss_logits(g, existence, true_n)?;
    let ex = g.scale(ex, alpha);
    if true_n == 0 {
        return Ok((ex, Vec::new()));
    }
    let (pit, perm) = pit_bce_loss_logits(g, logits, labels, mask)?;
    Ok((g.add(pit, ex)?, perm))
}
