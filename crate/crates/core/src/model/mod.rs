//! The shared multilingual encoder-decoder.
//!
//! A pre-LN transformer with learned positions and tied input/output
//! embeddings. The target-language tag is prepended to the encoder input, so
//! one set of weights serves every direction.

mod cache;
mod checkpoint;
mod decode;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autograd::{Graph, LAYER_NORM_EPS, Var};
use crate::exec::Exec;
use crate::tensor::{Tensor, TensorError};
use crate::text::{lang_tag_id, Batch, LanguageId, Sentence, TokenId, EOS, N_SPECIAL, PAD};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader};
pub use decode::{beam_decode, beam_search, greedy_decode, greedy_decode_batch, BeamResult, Decoded, Hypothesis};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds max_len {max}")]
    OverLength { len: usize, max: usize },
    #[error("language {0} has no tag in this model")]
    UnknownLanguage(LanguageId),
    #[error("empty input")]
    EmptyInput,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint config does not match the requested config")]
    ConfigMismatch,
    #[error("checkpoint vocabulary hash {found} does not match {expected}")]
    VocabMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Longest content sentence the model accepts, excluding tags and bos/eos.
    pub max_len: usize,
    pub vocab_size: usize,
    pub n_langs: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 64,
            heads: 4,
            ffn_mult: 4,
            max_len: 32,
            vocab_size: 128,
            n_langs: 3,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return bad("layers, hidden, heads and ffn_mult must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            ));
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        if self.vocab_size <= N_SPECIAL + self.n_langs {
            return bad(format!(
                "vocab_size {} leaves no content tokens for {} languages",
                self.vocab_size, self.n_langs
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Rows of each position table: the encoder sees two tags before the
    /// source, the decoder one BOS before the target.
    fn positions(&self) -> usize {
        self.max_len + 2
    }

    fn ffn(&self) -> usize {
        self.hidden * self.ffn_mult
    }

    /// First token id that is neither reserved nor a language tag.
    pub fn content_offset(&self) -> TokenId {
        (N_SPECIAL + self.n_langs) as TokenId
    }
}

const ENC_LAYER: usize = 16;
const DEC_LAYER: usize = 26;
const EMBED: usize = 0;
const ENC_POS: usize = 1;
const DEC_POS: usize = 2;

fn enc_layer(l: usize) -> usize {
    3 + ENC_LAYER * l
}

fn enc_final(cfg: &ModelConfig) -> usize {
    3 + ENC_LAYER * cfg.layers
}

fn dec_layer(cfg: &ModelConfig, l: usize) -> usize {
    enc_final(cfg) + 2 + DEC_LAYER * l
}

fn dec_final(cfg: &ModelConfig) -> usize {
    dec_layer(cfg, cfg.layers)
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (h, f) = (cfg.hidden, cfg.ffn());
    let mut out = vec![
        ("embed".to_string(), vec![cfg.vocab_size, h]),
        ("enc.pos".into(), vec![cfg.positions(), h]),
        ("dec.pos".into(), vec![cfg.positions(), h]),
    ];
    let attn = |p: &str, out: &mut Vec<(String, Vec<usize>)>| {
        for m in ["q", "k", "v", "o"] {
            out.push((format!("{p}.w{m}"), vec![h, h]));
            out.push((format!("{p}.b{m}"), vec![h]));
        }
    };
    let ln = |p: &str, out: &mut Vec<(String, Vec<usize>)>| {
        out.push((format!("{p}.gamma"), vec![h]));
        out.push((format!("{p}.beta"), vec![h]));
    };
    let ffn = |p: &str, out: &mut Vec<(String, Vec<usize>)>| {
        out.push((format!("{p}.w1"), vec![h, f]));
        out.push((format!("{p}.b1"), vec![f]));
        out.push((format!("{p}.w2"), vec![f, h]));
        out.push((format!("{p}.b2"), vec![h]));
    };
    for l in 0..cfg.layers {
        let p = format!("enc.{l}");
        ln(&format!("{p}.ln1"), &mut out);
        attn(&format!("{p}.self"), &mut out);
        ln(&format!("{p}.ln2"), &mut out);
        ffn(&format!("{p}.ffn"), &mut out);
    }
    ln("enc.ln", &mut out);
    for l in 0..cfg.layers {
        let p = format!("dec.{l}");
        ln(&format!("{p}.ln1"), &mut out);
        attn(&format!("{p}.self"), &mut out);
        ln(&format!("{p}.ln2"), &mut out);
        attn(&format!("{p}.cross"), &mut out);
        ln(&format!("{p}.ln3"), &mut out);
        ffn(&format!("{p}.ffn"), &mut out);
    }
    ln("dec.ln", &mut out);
    out
}

/// Seeded initialization: embeddings and positions N(0, 0.05²), weight
/// matrices N(0, 1/fan_in), biases and layer-norm offsets 0, scales 1.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape) in param_shapes(cfg) {
        let t = if name == "embed" || name.ends_with(".pos") {
            Tensor::randn(&shape, 0.05, &mut rng)
        } else if name.ends_with(".gamma") {
            Tensor::ones(&shape)
        } else if shape.len() == 2 {
            Tensor::randn(&shape, 1.0 / (shape[0] as f64).sqrt(), &mut rng)
        } else {
            Tensor::zeros(&shape)
        };
        names.push(name);
        tensors.push(t);
    }
    Ok(ModelParams {
        config: cfg.clone(),
        names,
        tensors,
    })
}

impl ModelParams {
    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    /// SHA-256 over names, shapes and raw values.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.update(n.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Adds every tensor to `g`, as trainable leaves or as constants.
    pub fn attach(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    fn check_lang(&self, lang: LanguageId) -> Result<()> {
        if lang.index() < self.config.n_langs {
            Ok(())
        } else {
            Err(ModelError::UnknownLanguage(lang))
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len == 0 {
            Err(ModelError::EmptyInput)
        } else if len > self.config.max_len {
            Err(ModelError::OverLength {
                len,
                max: self.config.max_len,
            })
        } else {
            Ok(())
        }
    }
}

const MASKED: f64 = -1e9;

/// Builds the model's computation inside a graph.
pub(crate) struct Net<'a, 'r> {
    pub g: &'a mut Graph,
    pub p: &'a [Var],
    pub cfg: &'a ModelConfig,
    pub rng: Option<&'r mut dyn RngCore>,
}

impl Net<'_, '_> {
    fn dropout(&mut self, x: Var) -> Result<Var> {
        match self.rng.as_mut() {
            Some(rng) if self.cfg.dropout > 0.0 => Ok(self.g.dropout(x, self.cfg.dropout, rng)?),
            _ => Ok(x),
        }
    }

    fn linear(&mut self, x: Var, w: usize) -> Result<Var> {
        let y = self.g.matmul(x, self.p[w])?;
        Ok(self.g.add(y, self.p[w + 1])?)
    }

    fn layer_norm(&mut self, x: Var, at: usize) -> Result<Var> {
        Ok(self
            .g
            .layer_norm(x, self.p[at], self.p[at + 1], LAYER_NORM_EPS)?)
    }

    fn split_heads(&mut self, x: Var, b: usize, t: usize) -> Result<Var> {
        let (h, d) = (self.cfg.heads, self.cfg.hidden / self.cfg.heads);
        let x = self.g.reshape(x, &[b, t, h, d])?;
        Ok(self.g.swap_axes12(x)?)
    }

    /// Multi-head attention; `mask` is `[b, heads, t, s]` of 0 / -1e9.
    fn attention(&mut self, xq: Var, xkv: Var, at: usize, mask: Var) -> Result<Var> {
        let (b, t) = (self.g.shape(xq)[0], self.g.shape(xq)[1]);
        let s = self.g.shape(xkv)[1];
        let d = self.cfg.hidden / self.cfg.heads;
        let q = self.linear(xq, at)?;
        let k = self.linear(xkv, at + 2)?;
        let v = self.linear(xkv, at + 4)?;
        let q = self.split_heads(q, b, t)?;
        let k = self.split_heads(k, b, s)?;
        let v = self.split_heads(v, b, s)?;
        let kt = self.g.transpose(k)?;
        let scores = self.g.matmul(q, kt)?;
        let scores = self.g.scale(scores, 1.0 / (d as f64).sqrt())?;
        let scores = self.g.add(scores, mask)?;
        let a = self.g.softmax(scores)?;
        let a = self.dropout(a)?;
        let o = self.g.matmul(a, v)?;
        let o = self.g.swap_axes12(o)?;
        let o = self.g.reshape(o, &[b, t, self.cfg.hidden])?;
        self.linear(o, at + 6)
    }

    fn ffn(&mut self, x: Var, at: usize) -> Result<Var> {
        let y = self.linear(x, at)?;
        let y = self.g.gelu(y)?;
        let y = self.dropout(y)?;
        self.linear(y, at + 2)
    }

    fn residual(&mut self, x: Var, y: Var) -> Result<Var> {
        let y = self.dropout(y)?;
        Ok(self.g.add(x, y)?)
    }

    fn embed(&mut self, ids: &[TokenId], b: usize, t: usize, pos_table: usize) -> Result<Var> {
        let tok = self.g.embed_gather(self.p[EMBED], ids)?;
        let pos_ids: Vec<u32> = (0..b).flat_map(|_| 0..t as u32).collect();
        let pos = self.g.embed_gather(self.p[pos_table], &pos_ids)?;
        let x = self.g.add(tok, pos)?;
        let x = self.g.reshape(x, &[b, t, self.cfg.hidden])?;
        self.dropout(x)
    }

    /// Encoder over `[b, s]` ids (tag already prepended); returns `[b, s, H]`.
    pub fn encode(&mut self, ids: &[TokenId], lens: &[usize], s: usize) -> Result<Var> {
        let b = lens.len();
        let mask = self.key_pad_mask(lens, s, s);
        let mut x = self.embed(ids, b, s, ENC_POS)?;
        for l in 0..self.cfg.layers {
            let at = enc_layer(l);
            let h = self.layer_norm(x, at)?;
            let y = self.attention(h, h, at + 2, mask)?;
            x = self.residual(x, y)?;
            let h = self.layer_norm(x, at + 10)?;
            let y = self.ffn(h, at + 12)?;
            x = self.residual(x, y)?;
        }
        self.layer_norm(x, enc_final(self.cfg))
    }

    /// Decoder over `[b, t]` input ids against encoder `memory`; returns the
    /// final hidden states `[b, t, H]`.
    pub fn decode(&mut self, ids: &[TokenId], t: usize, memory: Var, src_lens: &[usize]) -> Result<Var> {
        let b = src_lens.len();
        let s = self.g.shape(memory)[1];
        let self_mask = self.causal_mask(b, t);
        let cross_mask = self.key_pad_mask(src_lens, t, s);
        let mut x = self.embed(ids, b, t, DEC_POS)?;
        for l in 0..self.cfg.layers {
            let at = dec_layer(self.cfg, l);
            let h = self.layer_norm(x, at)?;
            let y = self.attention(h, h, at + 2, self_mask)?;
            x = self.residual(x, y)?;
            let h = self.layer_norm(x, at + 10)?;
            let y = self.attention(h, memory, at + 12, cross_mask)?;
            x = self.residual(x, y)?;
            let h = self.layer_norm(x, at + 20)?;
            let y = self.ffn(h, at + 22)?;
            x = self.residual(x, y)?;
        }
        self.layer_norm(x, dec_final(self.cfg))
    }

    /// `[b, t, H]` hidden states to `[b*t, V]` logits through the tied embedding.
    pub fn logits(&mut self, hidden: Var) -> Result<Var> {
        let s = self.g.shape(hidden).to_vec();
        let rows = s[0] * s[1];
        let h = self.g.reshape(hidden, &[rows, self.cfg.hidden])?;
        let et = self.g.transpose(self.p[EMBED])?;
        Ok(self.g.matmul(h, et)?)
    }

    fn key_pad_mask(&mut self, lens: &[usize], t: usize, s: usize) -> Var {
        let heads = self.cfg.heads;
        let mut m = Vec::with_capacity(lens.len() * heads * t * s);
        for &len in lens {
            for _ in 0..heads * t {
                m.extend((0..s).map(|j| if j < len { 0.0 } else { MASKED }));
            }
        }
        self.g
            .constant(Tensor::from_parts(vec![lens.len(), heads, t, s], m))
    }

    fn causal_mask(&mut self, b: usize, t: usize) -> Var {
        let heads = self.cfg.heads;
        let mut m = Vec::with_capacity(b * heads * t * t);
        for _ in 0..b * heads {
            for i in 0..t {
                m.extend((0..t).map(|j| if j <= i { 0.0 } else { MASKED }));
            }
        }
        self.g.constant(Tensor::from_parts(vec![b, heads, t, t], m))
    }
}

/// Encoder ids for a batch: target tag, source tag, the source tokens, then
/// padding. Returns the ids, the per-row lengths including the tags, and
/// the width.
pub(crate) fn encoder_input(
    srcs: &[&[TokenId]],
    src_langs: &[LanguageId],
    tgt_langs: &[LanguageId],
) -> (Vec<TokenId>, Vec<usize>, usize) {
    let s = srcs.iter().map(|x| x.len()).max().unwrap_or(0) + 2;
    let mut ids = vec![PAD; srcs.len() * s];
    for (r, x) in srcs.iter().enumerate() {
        ids[r * s] = lang_tag_id(tgt_langs[r]);
        ids[r * s + 1] = lang_tag_id(src_langs[r]);
        ids[r * s + 2..r * s + 2 + x.len()].copy_from_slice(x);
    }
    let lens = srcs.iter().map(|x| x.len() + 2).collect();
    (ids, lens, s)
}

impl ModelParams {
    fn check_batch(&self, batch: &Batch) -> Result<()> {
        for r in 0..batch.size {
            self.check_len(batch.src_lens[r])?;
            self.check_len(batch.tgt_lens[r])?;
            self.check_lang(batch.src_langs[r])?;
            self.check_lang(batch.tgt_langs[r])?;
        }
        Ok(())
    }

    /// Builds the teacher-forced forward pass for `batch` into `g` and
    /// returns the `[size * tgt_width, V]` logits. Dropout is applied only
    /// when `rng` is given.
    pub fn forward_logits(
        &self,
        g: &mut Graph,
        vars: &[Var],
        batch: &Batch,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        self.check_batch(batch)?;
        let srcs: Vec<&[TokenId]> = (0..batch.size)
            .map(|r| &batch.src[r * batch.src_width..r * batch.src_width + batch.src_lens[r]])
            .collect();
        let (ids, lens, s) = encoder_input(&srcs, &batch.src_langs, &batch.tgt_langs);
        let mut net = Net {
            g,
            p: vars,
            cfg: &self.config,
            rng,
        };
        let memory = net.encode(&ids, &lens, s)?;
        let hidden = net.decode(&batch.tgt_in, batch.tgt_width, memory, &lens)?;
        net.logits(hidden)
    }

    /// Scores each `(src, tgt)` row in inference mode; the target language is
    /// `tgt.lang`.
    pub fn score_batch(&self, rows: &[(Sentence, Sentence)]) -> Result<Vec<Score>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let batch = crate::text::make_batch(rows).map_err(|_| ModelError::EmptyInput)?;
        let mut g = Graph::with_exec(Exec::Sequential);
        let vars = self.attach(&mut g, false);
        let logits = self.forward_logits(&mut g, &vars, &batch, None)?;
        let lt = g.value(logits);
        let w = batch.tgt_width;
        Ok((0..batch.size)
            .map(|r| {
                let n = batch.tgt_lens[r] + 1;
                let mut position_logprobs = Vec::with_capacity(n);
                let mut token_logprobs = Vec::with_capacity(n);
                for i in 0..n {
                    let lp = log_softmax(lt.row(r * w + i));
                    token_logprobs.push(lp[batch.tgt_out[r * w + i] as usize]);
                    position_logprobs.push(lp);
                }
                debug_assert_eq!(batch.tgt_out[r * w + n - 1], EOS);
                Score {
                    total: token_logprobs.iter().sum(),
                    token_logprobs,
                    position_logprobs,
                }
            })
            .collect())
    }

    pub fn score(&self, src: &Sentence, tgt: &Sentence) -> Result<Score> {
        let mut out = self.score_batch(&[(src.clone(), tgt.clone())])?;
        Ok(out.remove(0))
    }
}

/// Inference-mode log-probabilities of one target sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct Score {
    /// `log P(y_i | y_<i, x)` for every target token, then for eos.
    pub token_logprobs: Vec<f64>,
    pub total: f64,
    /// Full next-token log-distribution at every scored position.
    pub position_logprobs: Vec<Vec<f64>>,
}

pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}
