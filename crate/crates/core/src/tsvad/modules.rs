use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Blstm, BlstmConfig, Linear, SeqLayer, TransformerConfig, TransformerEncoderLayer};
use crate::tensor::{Graph, ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontEndConfig {
    pub input_dim: usize,
    pub channels: usize,
    /// Kernel and stride of each non-overlapping strided convolution.
    pub strides: Vec<usize>,
    pub embed_dim: usize,
}

impl FrontEndConfig {
    pub fn downsample(&self) -> usize {
        self.strides.iter().product()
    }
}

/// Strided convolutions over time (kernel == stride) with GELU, then a linear to `E`.
#[derive(Clone, Debug)]
pub struct FrontEnd {
    convs: Vec<Linear>,
    strides: Vec<usize>,
    out: Linear,
    input_dim: usize,
}

impl FrontEnd {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &FrontEndConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.strides.is_empty() || cfg.strides.contains(&0) {
            return Err(Error::config("frontend.strides", "need at least one positive stride"));
        }
        let mut convs = Vec::new();
        let mut dim = cfg.input_dim;
        for (k, &s) in cfg.strides.iter().enumerate() {
            convs.push(Linear::new(store, &format!("{name}.conv{k}"), dim * s, cfg.channels, rng));
            dim = cfg.channels;
        }
        let out = Linear::new(store, &format!("{name}.out"), dim, cfg.embed_dim, rng);
        Ok(Self {
            convs,
            strides: cfg.strides.clone(),
            out,
            input_dim: cfg.input_dim,
        })
    }

    pub fn downsample(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn embed_dim(&self) -> usize {
        self.out.out_dim
    }

    /// `[T0, D] -> [floor(T0 / factor), E]`; trailing frames that do not fill a
    /// full embedding are dropped.
    pub fn forward(&self, g: &mut Graph, feats: Var) -> Result<Var> {
        let shape = g.shape(feats).to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::Shape {
                op: "frontend",
                lhs: shape,
                rhs: vec![self.input_dim],
            });
        }
        let factor = self.downsample();
        let t = shape[0] / factor;
        if t == 0 {
            return Err(Error::contract(format!(
                "front-end needs at least {factor} feature frames, got {}",
                shape[0]
            )));
        }
        let mut x = g.narrow(feats, 0, 0, t * factor)?;
        let mut len = t * factor;
        let mut dim = self.input_dim;
        for (conv, &s) in self.convs.iter().zip(&self.strides) {
            len /= s;
            x = g.reshape(x, &[len, s * dim])?;
            x = conv.forward(g, x)?;
            x = g.gelu(x);
            dim = conv.out_dim;
        }
        self.out.forward(g, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsdConfig {
    pub embed_dim: usize,
    pub profile_dim: usize,
    pub proj: usize,
    pub hidden: usize,
    pub out: usize,
}

/// Per-speaker detection: `[E ‖ p_s]` through a linear layer and two BLSTMs.
#[derive(Clone, Debug)]
pub struct IsdModule {
    input: Linear,
    blstms: [Blstm; 2],
    cfg: IsdConfig,
}

impl IsdModule {
    pub fn new(store: &mut ParamStore, name: &str, cfg: IsdConfig, rng: &mut ChaCha8Rng) -> Self {
        let input = Linear::new(store, &format!("{name}.input"), cfg.embed_dim + cfg.profile_dim, cfg.proj, rng);
        let b0 = Blstm::new(
            store,
            &format!("{name}.blstm0"),
            BlstmConfig { input: cfg.proj, hidden: cfg.hidden, proj: Some(cfg.out) },
            rng,
        );
        let b1 = Blstm::new(
            store,
            &format!("{name}.blstm1"),
            BlstmConfig { input: cfg.out, hidden: cfg.hidden, proj: Some(cfg.out) },
            rng,
        );
        Self { input, blstms: [b0, b1], cfg }
    }

    pub fn out_dim(&self) -> usize {
        self.cfg.out
    }

    /// `E: [T, E]`, `P: [S, P]` to speaker-major `[S, T, F]`.
    pub fn forward_speaker_major(&self, g: &mut Graph, e: Var, p: Var) -> Result<Var> {
        let (es, ps) = (g.shape(e).to_vec(), g.shape(p).to_vec());
        if es.len() != 2 || ps.len() != 2 || es[1] != self.cfg.embed_dim || ps[1] != self.cfg.profile_dim {
            return Err(Error::Shape { op: "isd", lhs: es, rhs: ps });
        }
        let (t, s, h) = (es[0], ps[0], self.cfg.proj);
        if s == 0 {
            return Err(Error::contract("isd needs at least one profile"));
        }
        // [E ‖ p]·W + b == E·W[:E] + p·W[E:] + b, broadcast over (S, T).
        let w = g.param(self.input.weight);
        let w_e = g.narrow(w, 0, 0, self.cfg.embed_dim)?;
        let w_p = g.narrow(w, 0, self.cfg.embed_dim, self.cfg.profile_dim)?;
        let ze = g.matmul(e, w_e)?;
        let ze = g.reshape(ze, &[1, t, h])?;
        let zp = g.matmul(p, w_p)?;
        let zp = g.reshape(zp, &[s, 1, h])?;
        let mut x = g.add(ze, zp)?;
        if let Some(b) = self.input.bias {
            let b = g.param(b);
            x = g.add(x, b)?;
        }
        for b in &self.blstms {
            x = b.forward(g, x)?;
        }
        Ok(x)
    }

    /// `E: [T, E]`, `P: [S, P]` to `[T, S, F]`.
    pub fn forward(&self, g: &mut Graph, e: Var, p: Var) -> Result<Var> {
        let x = self.forward_speaker_major(g, e, p)?;
        g.permute(x, &[1, 0, 2])
    }
}

/// Joint-speaker-detection variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JsdKind {
    /// Speakers concatenated into one BLSTM over time; fixed speaker count.
    Concat,
    BlstmBlstm,
    TransTrans,
    BlstmTimeTransSpk,
}

impl JsdKind {
    pub fn name(self) -> &'static str {
        match self {
            JsdKind::Concat => "concat",
            JsdKind::BlstmBlstm => "blstm_blstm",
            JsdKind::TransTrans => "trans_trans",
            JsdKind::BlstmTimeTransSpk => "blstm_time_trans_spk",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsdConfig {
    pub kind: JsdKind,
    pub blocks: usize,
    /// BLSTM memory cells per direction.
    pub blstm_hidden: usize,
    pub blstm_proj: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Sinusoidal positions on the time-axis transformer.
    pub time_positional_encoding: bool,
    pub concat_hidden: usize,
    pub concat_proj: usize,
    pub max_speakers: usize,
}

impl JsdConfig {
    pub fn paper(kind: JsdKind) -> Self {
        let (hidden, proj, ff) = match kind {
            JsdKind::TransTrans => (160, 160, 256),
            _ => (160, 160, 160),
        };
        Self {
            kind,
            blocks: 2,
            blstm_hidden: hidden,
            blstm_proj: proj,
            heads: 4,
            ff_dim: ff,
            time_positional_encoding: false,
            concat_hidden: 256,
            concat_proj: 192,
            max_speakers: 10,
        }
    }

    pub fn toy(kind: JsdKind) -> Self {
        let p = Self::paper(kind);
        Self {
            blstm_hidden: p.blstm_hidden / 4,
            blstm_proj: p.blstm_proj / 4,
            ff_dim: p.ff_dim / 4,
            concat_hidden: p.concat_hidden / 4,
            concat_proj: p.concat_proj / 4,
            ..p
        }
    }
}

/// JSD layers plus the per-speaker output head, producing logits `[T, S]`.
#[derive(Clone, Debug)]
pub enum JsdModule {
    Concat {
        blstm: Blstm,
        head: Linear,
        max_speakers: usize,
    },
    Blocks {
        blocks: Vec<(SeqLayer, SeqLayer)>,
        head: Linear,
    },
}

impl JsdModule {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, cfg: &JsdConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.kind == JsdKind::Concat {
            let blstm = Blstm::new(
                store,
                &format!("{name}.concat"),
                BlstmConfig {
                    input: input * cfg.max_speakers,
                    hidden: cfg.concat_hidden,
                    proj: Some(cfg.concat_proj),
                },
                rng,
            );
            let head = Linear::new(store, &format!("{name}.head"), cfg.concat_proj, cfg.max_speakers, rng);
            return Ok(JsdModule::Concat {
                blstm,
                head,
                max_speakers: cfg.max_speakers,
            });
        }
        if cfg.blocks == 0 {
            return Err(Error::config("model.jsd_blocks", "must be at least 1"));
        }
        let blstm = |store: &mut ParamStore, n: String, input: usize, rng: &mut ChaCha8Rng| {
            SeqLayer::Blstm(Blstm::new(
                store,
                &n,
                BlstmConfig { input, hidden: cfg.blstm_hidden, proj: Some(cfg.blstm_proj) },
                rng,
            ))
        };
        let trans = |store: &mut ParamStore, n: String, dim: usize, pe: bool, rng: &mut ChaCha8Rng| {
            TransformerEncoderLayer::new(
                store,
                &n,
                TransformerConfig { heads: cfg.heads, dim, ff_dim: cfg.ff_dim, positional_encoding: pe },
                rng,
            )
            .map(SeqLayer::Transformer)
        };
        let mut dim = input;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for k in 0..cfg.blocks {
            let tn = format!("{name}.block{k}.time");
            let sn = format!("{name}.block{k}.speaker");
            let time = match cfg.kind {
                JsdKind::TransTrans => trans(store, tn, dim, cfg.time_positional_encoding, rng)?,
                _ => blstm(store, tn, dim, rng),
            };
            dim = time.out_dim();
            let speaker = match cfg.kind {
                JsdKind::BlstmBlstm => blstm(store, sn, dim, rng),
                _ => trans(store, sn, dim, false, rng)?,
            };
            dim = speaker.out_dim();
            blocks.push((time, speaker));
        }
        let head = Linear::new(store, &format!("{name}.head"), dim, 1, rng);
        Ok(JsdModule::Blocks { blocks, head })
    }

    /// Speaker-major `[S, T, F]` to logits `[T, S]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (s, t, f) = (shape[0], shape[1], shape[2]);
        match self {
            JsdModule::Concat { blstm, head, max_speakers } => {
                if s != *max_speakers {
                    return Err(Error::contract(format!(
                        "concatenation JSD needs exactly {max_speakers} profiles, got {s}"
                    )));
                }
                let x = g.permute(x, &[1, 0, 2])?;
                let x = g.reshape(x, &[1, t, s * f])?;
                let y = blstm.forward(g, x)?;
                let y = head.forward(g, y)?;
                g.reshape(y, &[t, s])
            }
            JsdModule::Blocks { blocks, head } => {
                let mut x = x;
                for (time, speaker) in blocks {
                    x = time.forward(g, x)?;
                    let y = g.permute(x, &[1, 0, 2])?;
                    let y = speaker.forward(g, y)?;
                    x = g.permute(y, &[1, 0, 2])?;
                }
                let y = head.forward(g, x)?;
                let y = g.reshape(y, &[s, t])?;
                g.transpose(y, 0, 1)
            }
        }
    }
}

/// ISD, JSD and output head: frame embeddings and profiles to activity logits.
#[derive(Clone, Debug)]
pub struct Matcher {
    pub isd: IsdModule,
    pub jsd: JsdModule,
}

impl Matcher {
    pub fn new(store: &mut ParamStore, name: &str, isd: IsdConfig, jsd: &JsdConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let isd = IsdModule::new(store, &format!("{name}.isd"), isd, rng);
        let jsd = JsdModule::new(store, &format!("{name}.jsd"), isd.out_dim(), jsd, rng)?;
        Ok(Self { isd, jsd })
    }

    /// `E: [T, E]`, `P: [S, P]` to logits `[T, S]`.
    pub fn forward(&self, g: &mut Graph, e: Var, p: Var) -> Result<Var> {
        let x = self.isd.forward_speaker_major(g, e, p)?;
        self.jsd.forward(g, x)
    }
}
