//! The transformer, its latent heads and the two ways latents reach the
//! decoder.
//!
//! Graph-building code lives on [`Net`], a borrowed view of a config and a
//! parameter store, so the same forward pass can run against the live
//! weights or against a perturbed copy during gradient checks.
//! [`VoltaModel`] owns the weights and offers value-level wrappers.
//!
//! Two latent streams exist. The *generation* stream `[z_g; c_g]` conditions
//! text generation; the *answer* stream `[z_a; c_a]` (flattened relaxed
//! one-hots and code one-hots) conditions span prediction.
//!
//! In decoder-only mode every self-attention layer sees one extra key/value
//! slot in front of the sequence. With a latent stream the slot is produced
//! from it; without one the slot is all zeros, so a zeroed connection is the
//! same network as no connection.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VoltaError};
use crate::graph::{Graph, Var};
use crate::latent::{
    self, argmax, softmax, CategoricalPosterior, CategoricalVars, GaussianPosterior, GaussianVars, LatentCodes,
    LatentSample, RecoveryParam,
};
use crate::tensor::{ParamStore, Tensor};
use crate::tokenizer::{BOS, EOS, SEP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    DecoderOnly,
    EncoderDecoder,
}

impl FromStr for Mode {
    type Err = VoltaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoder-only" => Ok(Mode::DecoderOnly),
            "encoder-decoder" => Ok(Mode::EncoderDecoder),
            _ => Err(VoltaError::Config(format!("unknown mode `{s}`"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::DecoderOnly => "decoder-only",
            Mode::EncoderDecoder => "encoder-decoder",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: Mode,
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_seq: usize,
    pub d_ff: usize,
    pub n_zg: usize,
    pub n_cg: usize,
    pub n_za: usize,
    pub n_ca: usize,
    pub k: usize,
    pub n_latent_slots: usize,
    /// Use one latent K/V projection for every decoder layer.
    pub share_latent_kv: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: Mode::DecoderOnly,
            vocab_size: 256,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            max_seq: 64,
            d_ff: 256,
            n_zg: 32,
            n_cg: 4,
            n_za: 20,
            n_ca: 5,
            k: 10,
            n_latent_slots: 4,
            share_latent_kv: false,
        }
    }
}

/// Which latent stream conditions a pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    /// `[z_g; c_g]`, conditions text generation.
    Generation,
    /// `[z_a; c_a]`, conditions span prediction.
    Answer,
}

impl Stream {
    fn tag(self) -> &'static str {
        match self {
            Stream::Generation => "g",
            Stream::Answer => "a",
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("max_seq", self.max_seq),
            ("d_ff", self.d_ff),
            ("n_latent_slots", self.n_latent_slots),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(VoltaError::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(VoltaError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= SEP {
            return Err(VoltaError::Config("vocab_size must cover the special tokens".into()));
        }
        if self.n_za + self.n_ca > 0 && self.k == 0 {
            return Err(VoltaError::Config("categorical latents need k > 0".into()));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn stream_dim(&self, s: Stream) -> usize {
        match s {
            Stream::Generation => self.n_zg + self.n_cg,
            Stream::Answer => (self.n_za + self.n_ca) * self.k,
        }
    }
}

/// A latent stream fed into a pass: a `[1 × stream_dim]` row.
#[derive(Clone, Copy, Debug)]
pub struct StreamInput {
    pub kind: Stream,
    pub x: Var,
}

/// Latent head outputs on a graph. Absent parts have zero width.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub gaussian: Option<GaussianVars>,
    pub categorical: Option<CategoricalVars>,
}

/// Gaussian and categorical distribution parameters for one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub gaussian: GaussianPosterior,
    pub categorical: CategoricalPosterior,
}

impl Posterior {
    pub fn standard(cfg: &ModelConfig) -> Self {
        Posterior {
            gaussian: GaussianPosterior::standard(cfg.n_zg),
            categorical: CategoricalPosterior::uniform(cfg.n_za, cfg.k),
        }
    }

    /// Reparametrized draw.
    pub fn sample<R: Rng + ?Sized>(&self, tau: f64, rng: &mut R) -> Result<LatentSample> {
        Ok(LatentSample {
            z_g: latent::sample_gaussian(&self.gaussian, rng),
            z_a: latent::sample_gumbel_softmax(&self.categorical, tau, rng)?,
            n_za: self.categorical.n_vars,
            k: self.categorical.k,
            tau,
        })
    }

    /// Noise-free point: `z_g = μ`, `z_a = softmax(logits)`.
    pub fn mean(&self, tau: f64) -> LatentSample {
        LatentSample {
            z_g: self.gaussian.mu.clone(),
            z_a: self.categorical.probs(),
            n_za: self.categorical.n_vars,
            k: self.categorical.k,
            tau,
        }
    }
}

/// Output of [`VoltaModel::encode`].
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub posterior: Posterior,
    pub sample: LatentSample,
    pub codes: LatentCodes,
}

/// Predicted answer span, 1-based and inclusive.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanPrediction {
    pub start: usize,
    pub end: usize,
    /// `false` when the independent argmaxes give `end < start`.
    pub valid: bool,
    pub p_start: Vec<f64>,
    pub p_end: Vec<f64>,
}

impl SpanPrediction {
    /// 1-based positions covered by the span, in order.
    pub fn positions(&self) -> std::ops::RangeInclusive<usize> {
        self.start.min(self.end)..=self.start.max(self.end)
    }
}

/// Independent argmax of the start and end distributions.
pub fn span_from_logits(start: &[f64], end: &[f64]) -> Result<SpanPrediction> {
    if start.is_empty() || start.len() != end.len() {
        return Err(VoltaError::Dimension {
            op: "span",
            lhs: vec![start.len()],
            rhs: vec![end.len()],
        });
    }
    let (s, e) = (argmax(start) + 1, argmax(end) + 1);
    Ok(SpanPrediction {
        start: s,
        end: e,
        valid: e >= s,
        p_start: softmax(start),
        p_end: softmax(end),
    })
}

/// Best `(s, e)` with `s ≤ e` under `p(s)·p(e)`; ties go to the lowest pair.
pub fn constrained_span_from_logits(start: &[f64], end: &[f64]) -> Result<SpanPrediction> {
    let mut pred = span_from_logits(start, end)?;
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for s in 0..start.len() {
        for e in s..end.len() {
            let score = start[s] + end[e];
            if score > best.0 {
                best = (score, s, e);
            }
        }
    }
    pred.start = best.1 + 1;
    pred.end = best.2 + 1;
    pred.valid = true;
    Ok(pred)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decoding {
    Greedy,
    Sample { temperature: f64 },
}

/// Borrowed view used to build forward passes on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Net<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ParamStore,
}

fn null_slot(g: &mut Graph, d: usize) -> (Var, Var) {
    let z = Tensor::zeros(&[1, d]);
    (g.constant(&z), g.constant(&z))
}

impl<'a> Net<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ParamStore) -> Self {
        Net { cfg, params }
    }

    fn p(&self, g: &mut Graph, name: &str) -> Result<Var> {
        g.param(self.params, name)
    }

    /// `x·W + b` with parameters `{name}.w` and `{name}.b`.
    pub fn linear(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let w = self.p(g, &format!("{name}.w"))?;
        let b = self.p(g, &format!("{name}.b"))?;
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    fn layer_norm(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let gamma = self.p(g, &format!("{name}.g"))?;
        let beta = self.p(g, &format!("{name}.b"))?;
        g.layer_norm(x, gamma, beta)
    }

    /// Token plus position embeddings, `[T × d]`.
    pub fn embed(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(VoltaError::DegenerateInput("empty token sequence".into()));
        }
        if ids.len() > self.cfg.max_seq {
            return Err(VoltaError::Length {
                len: ids.len(),
                max: self.cfg.max_seq,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(VoltaError::Vocabulary {
                id,
                vocab: self.cfg.vocab_size,
            });
        }
        let tok = self.p(g, "tok_emb")?;
        let pos = self.p(g, "pos_emb")?;
        let t = g.gather(tok, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let p = g.gather(pos, &positions)?;
        g.add(t, p)
    }

    /// Multi-head scaled dot-product attention of `q [T×d]` over `k, v [S×d]`.
    fn attend(&self, g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<&Tensor>) -> Result<Var> {
        let (h, dk) = (self.cfg.n_heads, self.cfg.d_k());
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(h);
        for head in 0..h {
            let (qh, kh, vh) = if h == 1 {
                (q, k, v)
            } else {
                let r = (head * dk, (head + 1) * dk);
                (
                    g.slice(q, 1, r.0, r.1)?,
                    g.slice(k, 1, r.0, r.1)?,
                    g.slice(v, 1, r.0, r.1)?,
                )
            };
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let mut s = g.scale(s, scale);
            if let Some(m) = mask {
                s = g.add_const(s, m)?;
            }
            let a = g.softmax(s, 1)?;
            outs.push(g.matmul(a, vh)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            g.concat(&outs, 1)
        }
    }

    fn self_attention(
        &self,
        g: &mut Graph,
        prefix: &str,
        x: Var,
        causal: bool,
        past: Option<(Var, Var)>,
    ) -> Result<Var> {
        let d = self.cfg.d_model;
        let t = g.shape(x)[0];
        let qkv = self.linear(g, x, &format!("{prefix}.attn.qkv"))?;
        let q = g.slice(qkv, 1, 0, d)?;
        let mut k = g.slice(qkv, 1, d, 2 * d)?;
        let mut v = g.slice(qkv, 1, 2 * d, 3 * d)?;
        let mut n_past = 0;
        if let Some((pk, pv)) = past {
            n_past = g.shape(pk)[0];
            k = g.concat(&[pk, k], 0)?;
            v = g.concat(&[pv, v], 0)?;
        }
        let mask = causal.then(|| {
            let s = n_past + t;
            let mut m = Tensor::zeros(&[t, s]);
            for i in 0..t {
                for j in (n_past + i + 1)..s {
                    m.data_mut()[i * s + j] = f64::NEG_INFINITY;
                }
            }
            m
        });
        let a = self.attend(g, q, k, v, mask.as_ref())?;
        self.linear(g, a, &format!("{prefix}.attn.out"))
    }

    /// Attention from `x` over the encoder memory rows followed by the
    /// latent slots.
    pub fn cross_attention(
        &self,
        g: &mut Graph,
        prefix: &str,
        x: Var,
        memory: Option<Var>,
        latent: Option<(Var, Var)>,
    ) -> Result<Var> {
        let d = self.cfg.d_model;
        let q = self.linear(g, x, &format!("{prefix}.xattn.q"))?;
        let mut keys = Vec::new();
        let mut values = Vec::new();
        if let Some(m) = memory {
            let kv = self.linear(g, m, &format!("{prefix}.xattn.kv"))?;
            keys.push(g.slice(kv, 1, 0, d)?);
            values.push(g.slice(kv, 1, d, 2 * d)?);
        }
        if let Some((lk, lv)) = latent {
            keys.push(lk);
            values.push(lv);
        }
        let k = if keys.len() == 1 { keys[0] } else { g.concat(&keys, 0)? };
        let v = if values.len() == 1 {
            values[0]
        } else {
            g.concat(&values, 0)?
        };
        let a = self.attend(g, q, k, v, None)?;
        self.linear(g, a, &format!("{prefix}.xattn.out"))
    }

    fn feed_forward(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(g, x, &format!("{prefix}.ff1"))?;
        let h = g.gelu(h);
        self.linear(g, h, &format!("{prefix}.ff2"))
    }

    /// One pre-LN block: self-attention, optional cross-attention, MLP.
    fn block(
        &self,
        g: &mut Graph,
        prefix: &str,
        x: Var,
        causal: bool,
        past: Option<(Var, Var)>,
        cross: Option<(Option<Var>, Option<(Var, Var)>)>,
    ) -> Result<Var> {
        let h = self.layer_norm(g, x, &format!("{prefix}.ln1"))?;
        let a = self.self_attention(g, prefix, h, causal, past)?;
        let mut x = g.add(x, a)?;
        if let Some((memory, latent)) = cross {
            if memory.is_some() || latent.is_some() {
                let h = self.layer_norm(g, x, &format!("{prefix}.lnx"))?;
                let c = self.cross_attention(g, prefix, h, memory, latent)?;
                x = g.add(x, c)?;
            }
        }
        let h = self.layer_norm(g, x, &format!("{prefix}.ln2"))?;
        let f = self.feed_forward(g, prefix, h)?;
        g.add(x, f)
    }

    /// Latent key/value slots `[n_latent_slots × d]` for one decoder layer.
    pub fn latent_kv(&self, g: &mut Graph, s: StreamInput, layer: usize) -> Result<(Var, Var)> {
        if self.cfg.mode != Mode::EncoderDecoder {
            return Err(VoltaError::Mode(
                "latent K/V slots exist only in encoder-decoder mode".into(),
            ));
        }
        let width = g.shape(s.x)[1];
        if width != self.cfg.stream_dim(s.kind) {
            return Err(VoltaError::Dimension {
                op: "latent_kv",
                lhs: vec![1, width],
                rhs: vec![1, self.cfg.stream_dim(s.kind)],
            });
        }
        let l = if self.cfg.share_latent_kv { 0 } else { layer };
        let shape = [self.cfg.n_latent_slots, self.cfg.d_model];
        let k = self.linear(g, s.x, &format!("conn.{}.k.{l}", s.kind.tag()))?;
        let v = self.linear(g, s.x, &format!("conn.{}.v.{l}", s.kind.tag()))?;
        Ok((g.reshape(k, &shape)?, g.reshape(v, &shape)?))
    }

    /// Decoder-only connection: an embedding offset `[d]` and one key/value
    /// slot `[1 × d]` per layer.
    pub fn memory_embedding(&self, g: &mut Graph, s: StreamInput) -> Result<(Var, Vec<(Var, Var)>)> {
        if self.cfg.mode != Mode::DecoderOnly {
            return Err(VoltaError::Mode(
                "the memory/embedding connection exists only in decoder-only mode".into(),
            ));
        }
        let d = self.cfg.d_model;
        let tag = s.kind.tag();
        let off = self.linear(g, s.x, &format!("conn.{tag}.emb"))?;
        let off = g.reshape(off, &[d])?;
        let mem = self.linear(g, s.x, &format!("conn.{tag}.mem"))?;
        let mut slots = Vec::with_capacity(self.cfg.n_layers);
        for l in 0..self.cfg.n_layers {
            let k = g.slice(mem, 1, 2 * l * d, (2 * l + 1) * d)?;
            let v = g.slice(mem, 1, (2 * l + 1) * d, (2 * l + 2) * d)?;
            slots.push((k, v));
        }
        Ok((off, slots))
    }

    /// Encoder stack over `ids` (the caller adds BOS/SEP). In decoder-only
    /// mode this is the shared backbone, causal, without latents.
    pub fn encoder_states(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let mut x = self.embed(g, ids)?;
        match self.cfg.mode {
            Mode::DecoderOnly => {
                for l in 0..self.cfg.n_layers {
                    let slot = null_slot(g, self.cfg.d_model);
                    x = self.block(g, &format!("dec.{l}"), x, true, Some(slot), None)?;
                }
                self.layer_norm(g, x, "dec.lnf")
            }
            Mode::EncoderDecoder => {
                for l in 0..self.cfg.n_layers {
                    x = self.block(g, &format!("enc.{l}"), x, false, None, None)?;
                }
                self.layer_norm(g, x, "enc.lnf")
            }
        }
    }

    /// Causal decoder stack over `ids`, conditioned on an optional encoder
    /// memory (encoder-decoder mode only) and an optional latent stream.
    pub fn decoder_states(
        &self,
        g: &mut Graph,
        ids: &[usize],
        memory: Option<Var>,
        stream: Option<StreamInput>,
    ) -> Result<Var> {
        let mut x = self.embed(g, ids)?;
        match self.cfg.mode {
            Mode::DecoderOnly => {
                if memory.is_some() {
                    return Err(VoltaError::Mode("decoder-only mode takes no encoder memory".into()));
                }
                let slots = match stream {
                    Some(s) => {
                        let (off, slots) = self.memory_embedding(g, s)?;
                        x = g.add_bias(x, off)?;
                        slots
                    }
                    None => (0..self.cfg.n_layers).map(|_| null_slot(g, self.cfg.d_model)).collect(),
                };
                for (l, slot) in slots.into_iter().enumerate() {
                    x = self.block(g, &format!("dec.{l}"), x, true, Some(slot), None)?;
                }
            }
            Mode::EncoderDecoder => {
                for l in 0..self.cfg.n_layers {
                    let latent = stream.map(|s| self.latent_kv(g, s, l)).transpose()?;
                    x = self.block(g, &format!("dec.{l}"), x, true, None, Some((memory, latent)))?;
                }
            }
        }
        self.layer_norm(g, x, "dec.lnf")
    }

    /// Encoder memory over the context (encoder-decoder mode with a
    /// non-empty context), otherwise `None`.
    pub fn context_memory(&self, g: &mut Graph, ctx: &[usize]) -> Result<Option<Var>> {
        if self.cfg.mode == Mode::EncoderDecoder && !ctx.is_empty() {
            let ids = with_bos(ctx);
            Ok(Some(self.encoder_states(g, &ids)?))
        } else {
            Ok(None)
        }
    }

    /// Hidden states whose rows predict `prefix[0], …, prefix[t−1], EOS`,
    /// shape `[(t+1) × d]`.
    pub fn generation_states(
        &self,
        g: &mut Graph,
        ctx: &[usize],
        memory: Option<Var>,
        prefix: &[usize],
        stream: Option<StreamInput>,
    ) -> Result<Var> {
        match self.cfg.mode {
            Mode::DecoderOnly => {
                let mut ids = with_bos(ctx);
                ids.push(SEP);
                ids.extend_from_slice(prefix);
                let h = self.decoder_states(g, &ids, None, stream)?;
                let from = 1 + ctx.len();
                g.slice(h, 0, from, ids.len())
            }
            Mode::EncoderDecoder => {
                let ids = with_bos(prefix);
                self.decoder_states(g, &ids, memory, stream)
            }
        }
    }

    /// Hidden states over the context positions `1..=m`, `[m × d]`.
    pub fn span_states(
        &self,
        g: &mut Graph,
        ctx: &[usize],
        memory: Option<Var>,
        stream: Option<StreamInput>,
    ) -> Result<Var> {
        if ctx.is_empty() {
            return Err(VoltaError::DegenerateInput("span prediction needs a context".into()));
        }
        let ids = with_bos(ctx);
        let mem = match self.cfg.mode {
            Mode::DecoderOnly => None,
            Mode::EncoderDecoder => memory,
        };
        let h = self.decoder_states(g, &ids, mem, stream)?;
        g.slice(h, 0, 1, ids.len())
    }

    fn heads(&self, g: &mut Graph, pooled: Var, prefix: &str) -> Result<LatentVars> {
        let gaussian = if self.cfg.n_zg > 0 {
            let mu = self.linear(g, pooled, &format!("{prefix}.zg.mu"))?;
            let ls = self.linear(g, pooled, &format!("{prefix}.zg.logsig"))?;
            Some(GaussianVars {
                mu: g.reshape(mu, &[self.cfg.n_zg])?,
                log_sigma: g.reshape(ls, &[self.cfg.n_zg])?,
            })
        } else {
            None
        };
        let categorical = if self.cfg.n_za > 0 {
            let l = self.linear(g, pooled, &format!("{prefix}.za.logits"))?;
            Some(CategoricalVars {
                logits: g.reshape(l, &[self.cfg.n_za, self.cfg.k])?,
            })
        } else {
            None
        };
        Ok(LatentVars { gaussian, categorical })
    }

    /// Posterior heads over the mean-pooled encoding of `ctx [SEP] target`.
    pub fn posterior_vars(&self, g: &mut Graph, ctx: &[usize], target: &[usize]) -> Result<LatentVars> {
        let mut ids = with_bos(ctx);
        ids.push(SEP);
        ids.extend_from_slice(target);
        let h = self.encoder_states(g, &ids)?;
        let pooled = g.mean(h, Some(0))?;
        self.heads(g, pooled, "head")
    }

    /// Prior heads over the context alone. `memory` may carry a context
    /// encoding computed earlier in the same graph.
    pub fn prior_vars(&self, g: &mut Graph, ctx: &[usize], memory: Option<Var>) -> Result<LatentVars> {
        if ctx.is_empty() {
            return Err(VoltaError::DegenerateInput(
                "the prior needs a non-empty context".into(),
            ));
        }
        let h = match memory {
            Some(m) => m,
            None => self.encoder_states(g, &with_bos(ctx))?,
        };
        let pooled = g.mean(h, Some(0))?;
        self.heads(g, pooled, "prior")
    }

    pub fn lm_logits(&self, g: &mut Graph, h: Var) -> Result<Var> {
        self.linear(g, h, "lm_head")
    }

    /// Start and end logits, each `[1 × m]`.
    pub fn span_logits(&self, g: &mut Graph, h: Var) -> Result<(Var, Var)> {
        let m = g.shape(h)[0];
        let s = self.linear(g, h, "span.start")?;
        let e = self.linear(g, h, "span.end")?;
        Ok((g.reshape(s, &[1, m])?, g.reshape(e, &[1, m])?))
    }

    /// Means `[n_cg]` of the continuous-code recovery distribution from
    /// mean-pooled hidden rows.
    pub fn recover_continuous(&self, g: &mut Graph, rows: Var) -> Result<Var> {
        let pooled = g.mean(rows, Some(0))?;
        let t = self.linear(g, pooled, "rec.cg")?;
        g.reshape(t, &[self.cfg.n_cg])
    }

    /// Logits `[n_ca × k]` of the discrete-code recovery distribution.
    pub fn recover_discrete(&self, g: &mut Graph, rows: Var) -> Result<Var> {
        let pooled = g.mean(rows, Some(0))?;
        let t = self.linear(g, pooled, "rec.ca")?;
        g.reshape(t, &[self.cfg.n_ca, self.cfg.k])
    }

    /// Bilinear scores `H_q · W · H_aᵀ`, `[B_q × B_a]`, over pooled rows.
    pub fn qami_logits(&self, g: &mut Graph, hq: Var, ha: Var) -> Result<Var> {
        let w = self.p(g, "qami.w")?;
        let left = g.matmul(hq, w)?;
        let hat = g.transpose(ha)?;
        g.matmul(left, hat)
    }

    /// The stream row `[z; c]` built from a latent variable node (flattened)
    /// and constant codes. `None` when the stream has zero width.
    pub fn stream_input(
        &self,
        g: &mut Graph,
        kind: Stream,
        z: Option<Var>,
        codes: &LatentCodes,
    ) -> Result<Option<StreamInput>> {
        if self.cfg.stream_dim(kind) == 0 {
            return Ok(None);
        }
        let c = match kind {
            Stream::Generation => codes.continuous.clone(),
            Stream::Answer => codes.one_hot(),
        };
        let mut parts = Vec::new();
        if let Some(z) = z {
            let n = g.numel(z);
            parts.push(g.reshape(z, &[1, n])?);
        }
        if !c.is_empty() {
            let n = c.len();
            parts.push(g.constant(&Tensor::new(vec![1, n], c)?));
        }
        let x = match parts.len() {
            0 => return Ok(None),
            1 => parts[0],
            _ => g.concat(&parts, 1)?,
        };
        let want = self.cfg.stream_dim(kind);
        if g.numel(x) != want {
            return Err(VoltaError::Dimension {
                op: "stream_input",
                lhs: vec![1, g.numel(x)],
                rhs: vec![1, want],
            });
        }
        Ok(Some(StreamInput { kind, x }))
    }

    /// Stream row from plain latent values.
    pub fn stream_from_values(
        &self,
        g: &mut Graph,
        kind: Stream,
        sample: &LatentSample,
        codes: &LatentCodes,
    ) -> Result<Option<StreamInput>> {
        let z = match kind {
            Stream::Generation => &sample.z_g,
            Stream::Answer => &sample.z_a,
        };
        let zv = if z.is_empty() {
            None
        } else {
            Some(g.constant(&Tensor::vector(z)))
        };
        self.stream_input(g, kind, zv, codes)
    }
}

pub(crate) fn with_bos(ids: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(ids.len() + 1);
    out.push(BOS);
    out.extend_from_slice(ids);
    out
}

/// A VOLTA network and its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct VoltaModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn add_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    std: f64,
) {
    store.insert(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], std, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

fn add_layer_norm(store: &mut ParamStore, name: &str, d: usize) {
    store.insert(format!("{name}.g"), Tensor::filled(&[d], 1.0));
    store.insert(format!("{name}.b"), Tensor::zeros(&[d]));
}

/// Parameter names and shapes for `cfg`, in creation order. Shapes depend
/// only on the config.
fn init_params<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> ParamStore {
    let d = cfg.d_model;
    let mut p = ParamStore::new();
    let inv = |n: usize| 1.0 / (n as f64).sqrt();
    let out_std = inv(d) / (2.0 * cfg.n_layers as f64).sqrt();

    p.insert("tok_emb", Tensor::randn(&[cfg.vocab_size, d], 0.1, rng));
    p.insert("pos_emb", Tensor::randn(&[cfg.max_seq, d], 0.1, rng));

    let mut stacks = vec![("dec", cfg.mode == Mode::EncoderDecoder)];
    if cfg.mode == Mode::EncoderDecoder {
        stacks.insert(0, ("enc", false));
    }
    for (stack, cross) in stacks {
        for l in 0..cfg.n_layers {
            let pre = format!("{stack}.{l}");
            add_layer_norm(&mut p, &format!("{pre}.ln1"), d);
            add_linear(&mut p, rng, &format!("{pre}.attn.qkv"), d, 3 * d, inv(d));
            add_linear(&mut p, rng, &format!("{pre}.attn.out"), d, d, out_std);
            if cross {
                add_layer_norm(&mut p, &format!("{pre}.lnx"), d);
                add_linear(&mut p, rng, &format!("{pre}.xattn.q"), d, d, inv(d));
                add_linear(&mut p, rng, &format!("{pre}.xattn.kv"), d, 2 * d, inv(d));
                add_linear(&mut p, rng, &format!("{pre}.xattn.out"), d, d, out_std);
            }
            add_layer_norm(&mut p, &format!("{pre}.ln2"), d);
            add_linear(&mut p, rng, &format!("{pre}.ff1"), d, cfg.d_ff, inv(d));
            add_linear(
                &mut p,
                rng,
                &format!("{pre}.ff2"),
                cfg.d_ff,
                d,
                inv(cfg.d_ff) / (2.0 * cfg.n_layers as f64).sqrt(),
            );
        }
        add_layer_norm(&mut p, &format!("{stack}.lnf"), d);
    }

    for head in ["head", "prior"] {
        if cfg.n_zg > 0 {
            add_linear(&mut p, rng, &format!("{head}.zg.mu"), d, cfg.n_zg, inv(d));
            add_linear(&mut p, rng, &format!("{head}.zg.logsig"), d, cfg.n_zg, 0.1 * inv(d));
        }
        if cfg.n_za > 0 {
            add_linear(&mut p, rng, &format!("{head}.za.logits"), d, cfg.n_za * cfg.k, inv(d));
        }
    }

    for kind in [Stream::Generation, Stream::Answer] {
        let n_in = cfg.stream_dim(kind);
        if n_in == 0 {
            continue;
        }
        let tag = kind.tag();
        match cfg.mode {
            Mode::DecoderOnly => {
                add_linear(&mut p, rng, &format!("conn.{tag}.emb"), n_in, d, 0.1 * inv(n_in));
                add_linear(
                    &mut p,
                    rng,
                    &format!("conn.{tag}.mem"),
                    n_in,
                    2 * cfg.n_layers * d,
                    inv(n_in),
                );
            }
            Mode::EncoderDecoder => {
                let layers = if cfg.share_latent_kv { 1 } else { cfg.n_layers };
                for l in 0..layers {
                    for kv in ["k", "v"] {
                        add_linear(
                            &mut p,
                            rng,
                            &format!("conn.{tag}.{kv}.{l}"),
                            n_in,
                            cfg.n_latent_slots * d,
                            inv(n_in),
                        );
                    }
                }
            }
        }
    }

    add_linear(&mut p, rng, "lm_head", d, cfg.vocab_size, inv(d));
    add_linear(&mut p, rng, "span.start", d, 1, inv(d));
    add_linear(&mut p, rng, "span.end", d, 1, inv(d));
    if cfg.n_cg > 0 {
        add_linear(&mut p, rng, "rec.cg", d, cfg.n_cg, inv(d));
    }
    if cfg.n_ca > 0 {
        add_linear(&mut p, rng, "rec.ca", d, cfg.n_ca * cfg.k, inv(d));
    }
    p.insert("qami.w", Tensor::randn(&[d, d], 1.0 / d as f64, rng));
    p
}

impl VoltaModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, rng);
        Ok(VoltaModel { config, params })
    }

    pub fn net(&self) -> Net<'_> {
        Net::new(&self.config, &self.params)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    fn posterior_from_vars(&self, g: &Graph, v: &LatentVars) -> Result<Posterior> {
        let cfg = &self.config;
        let gaussian = match v.gaussian {
            Some(gv) => GaussianPosterior::new(g.value(gv.mu).to_vec(), g.value(gv.log_sigma).to_vec())?,
            None => GaussianPosterior::standard(0),
        };
        let categorical = match v.categorical {
            Some(cv) => CategoricalPosterior::new(cfg.n_za, cfg.k, g.value(cv.logits).to_vec())?,
            None => CategoricalPosterior::uniform(0, cfg.k),
        };
        Ok(Posterior { gaussian, categorical })
    }

    /// Posterior for `(ctx, target)`, a reparametrized sample and fresh codes.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        ctx: &[usize],
        target: &[usize],
        tau: f64,
        rng: &mut R,
    ) -> Result<LatentState> {
        let posterior = self.posterior(ctx, target)?;
        let sample = posterior.sample(tau, rng)?;
        let c = &self.config;
        let codes = latent::sample_codes(c.n_cg, c.n_ca, c.k, rng)?;
        Ok(LatentState {
            posterior,
            sample,
            codes,
        })
    }

    /// Posterior parameters only, without sampling.
    pub fn posterior(&self, ctx: &[usize], target: &[usize]) -> Result<Posterior> {
        let mut g = Graph::new();
        let v = self.net().posterior_vars(&mut g, ctx, target)?;
        self.posterior_from_vars(&g, &v)
    }

    /// Prior parameters `(μ′, σ′, π′)` from the context alone.
    pub fn prior_from_context(&self, ctx: &[usize]) -> Result<Posterior> {
        let mut g = Graph::new();
        let net = self.net();
        let memory = net.context_memory(&mut g, ctx)?;
        let v = net.prior_vars(&mut g, ctx, memory)?;
        self.posterior_from_vars(&g, &v)
    }

    /// Prior for `ctx`, or the standard prior when there is no context.
    pub fn prior_or_standard(&self, ctx: &[usize]) -> Result<Posterior> {
        if ctx.is_empty() {
            Ok(Posterior::standard(&self.config))
        } else {
            self.prior_from_context(ctx)
        }
    }

    /// `(K_latent, V_latent)`, each `[n_latent_slots × d]`, for one layer.
    pub fn latent_kv(
        &self,
        kind: Stream,
        sample: &LatentSample,
        codes: &LatentCodes,
        layer: usize,
    ) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let net = self.net();
        let s = net
            .stream_from_values(&mut g, kind, sample, codes)?
            .ok_or_else(|| VoltaError::DegenerateInput("latent stream has zero width".into()))?;
        let (k, v) = net.latent_kv(&mut g, s, layer)?;
        Ok((g.tensor(k), g.tensor(v)))
    }

    /// Per-layer `(key, value)` slots and the embedding offset.
    pub fn memory_embedding_connection(
        &self,
        kind: Stream,
        sample: &LatentSample,
        codes: &LatentCodes,
    ) -> Result<(Vec<(Tensor, Tensor)>, Tensor)> {
        if self.config.mode != Mode::DecoderOnly {
            return Err(VoltaError::Mode(
                "the memory/embedding connection exists only in decoder-only mode".into(),
            ));
        }
        let mut g = Graph::new();
        let net = self.net();
        let s = net
            .stream_from_values(&mut g, kind, sample, codes)?
            .ok_or_else(|| VoltaError::DegenerateInput("latent stream has zero width".into()))?;
        let (off, slots) = net.memory_embedding(&mut g, s)?;
        let slots = slots.into_iter().map(|(k, v)| (g.tensor(k), g.tensor(v))).collect();
        Ok((slots, g.tensor(off)))
    }

    /// Final hidden states of the generation pass, `[(t+1) × d]`.
    pub fn generation_hidden(
        &self,
        ctx: &[usize],
        prefix: &[usize],
        sample: &LatentSample,
        codes: &LatentCodes,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let h = self.generation_graph(&mut g, ctx, prefix, sample, codes)?;
        Ok(g.tensor(h))
    }

    fn generation_graph(
        &self,
        g: &mut Graph,
        ctx: &[usize],
        prefix: &[usize],
        sample: &LatentSample,
        codes: &LatentCodes,
    ) -> Result<Var> {
        let net = self.net();
        let memory = net.context_memory(g, ctx)?;
        let s = net.stream_from_values(g, Stream::Generation, sample, codes)?;
        net.generation_states(g, ctx, memory, prefix, s)
    }

    /// Next-token logits `[(t+1) × V]` for every prefix position.
    pub fn decoder_forward(
        &self,
        ctx: &[usize],
        prefix: &[usize],
        sample: &LatentSample,
        codes: &LatentCodes,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let h = self.generation_graph(&mut g, ctx, prefix, sample, codes)?;
        let logits = self.net().lm_logits(&mut g, h)?;
        Ok(g.tensor(logits))
    }

    /// Autoregressive decoding from BOS until EOS, `max_len` tokens or the
    /// sequence limit.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        ctx: &[usize],
        sample: &LatentSample,
        codes: &LatentCodes,
        max_len: usize,
        decoding: Decoding,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let overhead = match self.config.mode {
            Mode::DecoderOnly => ctx.len() + 2,
            Mode::EncoderDecoder => 1,
        };
        let cap = max_len.min(self.config.max_seq.saturating_sub(overhead) + 1);
        let mut out = Vec::new();
        while out.len() < cap {
            let logits = self.decoder_forward(ctx, &out, sample, codes)?;
            let v = self.config.vocab_size;
            let last = &logits.data()[logits.numel() - v..];
            let next = match decoding {
                Decoding::Greedy => argmax(last),
                Decoding::Sample { temperature } => {
                    if temperature <= 0.0 {
                        return Err(VoltaError::Contract(format!("temperature {temperature} must be > 0")));
                    }
                    let scaled: Vec<f64> = last.iter().map(|x| x / temperature).collect();
                    let p = softmax(&scaled);
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = p.len() - 1;
                    for (i, pi) in p.iter().enumerate() {
                        acc += pi;
                        if u < acc {
                            pick = i;
                            break;
                        }
                    }
                    pick
                }
            };
            if next == EOS {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }

    /// Span-pass hidden states over the context, `[m × d]`.
    pub fn span_hidden(&self, ctx: &[usize], sample: &LatentSample, codes: &LatentCodes) -> Result<Tensor> {
        let mut g = Graph::new();
        let h = self.span_graph(&mut g, ctx, sample, codes)?;
        Ok(g.tensor(h))
    }

    fn span_graph(&self, g: &mut Graph, ctx: &[usize], sample: &LatentSample, codes: &LatentCodes) -> Result<Var> {
        let net = self.net();
        let memory = net.context_memory(g, ctx)?;
        let s = net.stream_from_values(g, Stream::Answer, sample, codes)?;
        net.span_states(g, ctx, memory, s)
    }

    /// Start and end logits over the context positions.
    pub fn span_logits(
        &self,
        ctx: &[usize],
        sample: &LatentSample,
        codes: &LatentCodes,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let h = self.span_graph(&mut g, ctx, sample, codes)?;
        let (s, e) = self.net().span_logits(&mut g, h)?;
        Ok((g.value(s).to_vec(), g.value(e).to_vec()))
    }

    pub fn predict_span(&self, ctx: &[usize], sample: &LatentSample, codes: &LatentCodes) -> Result<SpanPrediction> {
        let (s, e) = self.span_logits(ctx, sample, codes)?;
        span_from_logits(&s, &e)
    }

    /// Recovery parameters from hidden rows: one mean per continuous code
    /// (from `gen_rows`) and one logit vector per discrete code (from
    /// `span_rows`). Pass `None` to skip a family.
    pub fn recover_codes(&self, gen_rows: Option<&Tensor>, span_rows: Option<&Tensor>) -> Result<Vec<RecoveryParam>> {
        let mut out = Vec::new();
        let net = self.net();
        for (rows, continuous) in [(gen_rows, true), (span_rows, false)] {
            let Some(rows) = rows else { continue };
            if rows.rank() != 2 || rows.shape()[1] != self.config.d_model {
                return Err(VoltaError::Dimension {
                    op: "recover_codes",
                    lhs: rows.shape().to_vec(),
                    rhs: vec![self.config.d_model],
                });
            }
            let mut g = Graph::new();
            let r = g.constant(rows);
            if continuous && self.config.n_cg > 0 {
                let t = net.recover_continuous(&mut g, r)?;
                out.extend(g.value(t).iter().map(|m| RecoveryParam::Mean(*m)));
            } else if !continuous && self.config.n_ca > 0 {
                let t = net.recover_discrete(&mut g, r)?;
                out.extend(
                    g.value(t)
                        .chunks(self.config.k)
                        .map(|l| RecoveryParam::Logits(l.to_vec())),
                );
            }
        }
        Ok(out)
    }

    /// `sigmoid(h_qᵀ W h_a)` over mean-pooled rows.
    pub fn qami_score(&self, q_rows: &Tensor, a_rows: &Tensor) -> Result<f64> {
        if q_rows.numel() == 0 || a_rows.numel() == 0 {
            return Err(VoltaError::DegenerateInput("QAMI needs non-empty spans".into()));
        }
        let mut g = Graph::new();
        let q = g.constant(q_rows);
        let a = g.constant(a_rows);
        let hq = g.mean(q, Some(0))?;
        let ha = g.mean(a, Some(0))?;
        let s = self.net().qami_logits(&mut g, hq, ha)?;
        let p = g.sigmoid(s);
        Ok(g.item(p))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn tiny(mode: Mode) -> VoltaModel {
        let cfg = ModelConfig {
            mode,
            vocab_size: 16,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            max_seq: 24,
            d_ff: 16,
            n_zg: 3,
            n_cg: 2,
            n_za: 2,
            n_ca: 1,
            k: 3,
            n_latent_slots: 2,
            share_latent_kv: false,
        };
        VoltaModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn span_tie_breaks_low() {
        let p = span_from_logits(&[0.0; 4], &[0.0; 4]).unwrap();
        assert_eq!((p.start, p.end, p.valid), (1, 1, true));
        let p = span_from_logits(&[0.0, 0.0, 5.0], &[3.0, 0.0, 0.0]).unwrap();
        assert_eq!((p.start, p.end, p.valid), (3, 1, false));
        let c = constrained_span_from_logits(&[0.0, 0.0, 5.0], &[3.0, 0.0, 0.0]).unwrap();
        assert!(c.valid && c.start <= c.end);
    }

    #[test]
    fn shapes_follow_config() {
        for mode in [Mode::DecoderOnly, Mode::EncoderDecoder] {
            let m = tiny(mode);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let st = m.encode(&[5, 6], &[7], 1.0, &mut rng).unwrap();
            assert_eq!(st.sample.z_g.len(), 3);
            assert_eq!(st.sample.z_a.len(), 6);
            let logits = m.decoder_forward(&[5, 6], &[7, 8], &st.sample, &st.codes).unwrap();
            assert_eq!(logits.shape(), &[3, 16]);
            let span = m.predict_span(&[5, 6, 7], &st.sample, &st.codes).unwrap();
            assert_eq!(span.p_start.len(), 3);
        }
    }

    #[test]
    fn wrong_mode_connections_are_rejected() {
        let dec = tiny(Mode::DecoderOnly);
        let encdec = tiny(Mode::EncoderDecoder);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let st = dec.encode(&[5], &[6], 1.0, &mut rng).unwrap();
        assert!(matches!(
            dec.latent_kv(Stream::Generation, &st.sample, &st.codes, 0),
            Err(VoltaError::Mode(_))
        ));
        assert!(matches!(
            encdec.memory_embedding_connection(Stream::Generation, &st.sample, &st.codes),
            Err(VoltaError::Mode(_))
        ));
    }

    #[test]
    fn too_long_is_a_length_error() {
        let m = tiny(Mode::DecoderOnly);
        let ctx = vec![5; 30];
        assert!(matches!(m.posterior(&ctx, &[6]), Err(VoltaError::Length { .. })));
    }
}
