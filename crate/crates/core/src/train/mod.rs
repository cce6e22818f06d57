//! Loss terms, pseudo-data generation and the CUNMT training loop.
//!
//! The joint objective sums supervised cross entropy over directions with
//! parallel data, back-translation losses over unsupervised directions,
//! pivot-based indirect terms weighted per pivot, and denoising
//! auto-encoding weighted by a decaying `lambda_l`. Every term is a
//! token-level mean; all of them go through one batched forward pass.

mod generate;
mod trainer;

use std::collections::BTreeMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Graph;
use crate::model::{ModelError, ModelParams};
use crate::optim::{AdamConfig, LrSchedule};
use crate::tensor::{Tensor, TensorError};
use crate::text::{
    apply_noise, make_batch, DataError, LanguageId, MonoCorpus, NoiseConfig, ParallelCorpus,
    Sentence,
};

pub use generate::{
    gen_back_translation, gen_indirect_backward, gen_indirect_forward, GenOutput, ModelTranslator,
    Translator,
};
pub use trainer::{MetricsRecord, PoolCounts, RoundTerms, TrainState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("pivot {pivot} must differ from both ends of {src}->{tgt}")]
    PivotGuard {
        pivot: LanguageId,
        src: LanguageId,
        tgt: LanguageId,
    },
    #[error("coefficient given for unknown pivot {0}")]
    UnknownPivot(LanguageId),
    #[error("{0}->{1} is not a supervised direction")]
    NotSupervised(LanguageId, LanguageId),
    #[error("invalid direction set: {0}")]
    Directions(String),
    #[error("invalid training config: {0}")]
    Config(String),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

pub type Direction = (LanguageId, LanguageId);

/// Directions with parallel data (`supervised`, E) and without
/// (`unsupervised`, W).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DirectionSet {
    pub supervised: Vec<Direction>,
    pub unsupervised: Vec<Direction>,
}

impl DirectionSet {
    /// Every language touched by some direction, ascending.
    pub fn languages(&self) -> Vec<LanguageId> {
        let mut out: Vec<LanguageId> = self
            .supervised
            .iter()
            .chain(&self.unsupervised)
            .flat_map(|&(a, b)| [a, b])
            .collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn is_supervised(&self, d: Direction) -> bool {
        self.supervised.contains(&d)
    }

    pub fn validate(&self, data: &TrainData) -> Result<()> {
        for d in &self.supervised {
            if self.unsupervised.contains(d) {
                return Err(TrainError::Directions(format!(
                    "{}->{} is both supervised and unsupervised",
                    d.0, d.1
                )));
            }
            if data.parallel_rows(*d).is_none() {
                return Err(TrainError::Directions(format!(
                    "no parallel corpus for {}->{}",
                    d.0, d.1
                )));
            }
        }
        for &(a, b) in self.supervised.iter().chain(&self.unsupervised) {
            if a == b {
                return Err(TrainError::Directions(format!("{a}->{b} is not a translation")));
            }
        }
        for l in self.languages() {
            if data.mono(l).is_none() {
                return Err(TrainError::Directions(format!("no monolingual corpus for {l}")));
            }
        }
        Ok(())
    }
}

/// Training corpora: `D_i` per language and `D_{i,j}` per supervised pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainData {
    pub mono: Vec<MonoCorpus>,
    pub parallel: Vec<ParallelCorpus>,
}

impl TrainData {
    pub fn mono(&self, lang: LanguageId) -> Option<&MonoCorpus> {
        self.mono.iter().find(|c| c.lang == lang)
    }

    /// The parallel corpus covering `d` in either orientation, and whether it
    /// must be read reversed.
    pub fn parallel_rows(&self, d: Direction) -> Option<(&ParallelCorpus, bool)> {
        self.parallel.iter().find_map(|c| {
            if c.pair == d {
                Some((c, false))
            } else if c.pair == (d.1, d.0) {
                Some((c, true))
            } else {
                None
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeStrategy {
    Greedy,
    Beam(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PivotWeight {
    pub pivot: LanguageId,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// `lambda_j` per pivot. Empty means every language has weight 1; once
    /// any pivot is listed, unlisted pivots get 0.
    pub lambda_indirect: Vec<PivotWeight>,
    /// Generate indirect forward rows (F^i).
    pub forward: bool,
    /// Generate indirect backward rows (B^i).
    pub backward: bool,
    /// Directions that receive indirect terms; all of E and W when unset.
    pub indirect_directions: Option<Vec<Direction>>,
    /// First CUNMT round that generates and trains on indirect rows.
    pub indirect_from_round: u64,
    /// Initial denoising weight; used as-is during pre-training.
    pub lambda_l: f64,
    /// Rounds over which `lambda_l` falls linearly to exactly 0.
    pub lambda_l_decay_rounds: u64,
    pub lambda_b: f64,
    /// Sentences per epoch; an epoch is `ceil(epoch_size / batch_size)` rounds.
    pub epoch_size: usize,
    /// Training rows per loss term and step.
    pub batch_size: usize,
    /// Monolingual sentences translated per generation job and round.
    pub gen_batch_size: usize,
    /// Rounds between pool resets; one epoch when unset.
    pub pool_refresh_rounds: Option<u64>,
    pub decode: DecodeStrategy,
    pub gen_max_len: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub clip_norm: Option<f64>,
    pub noise: NoiseConfig,
    pub pretrain_steps: u64,
    pub rounds: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_indirect: Vec::new(),
            forward: true,
            backward: true,
            indirect_directions: None,
            indirect_from_round: 0,
            lambda_l: 1.0,
            lambda_l_decay_rounds: 1000,
            lambda_b: 1.0,
            epoch_size: 2000,
            batch_size: 16,
            gen_batch_size: 8,
            pool_refresh_rounds: None,
            decode: DecodeStrategy::Greedy,
            gen_max_len: 16,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            clip_norm: Some(5.0),
            noise: NoiseConfig::default(),
            pretrain_steps: 1000,
            rounds: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_langs: usize) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        for w in &self.lambda_indirect {
            if w.pivot.index() >= n_langs {
                return Err(TrainError::UnknownPivot(w.pivot));
            }
            if !(w.lambda >= 0.0) {
                return bad("indirect coefficients must be >= 0");
            }
        }
        if !(self.lambda_l >= 0.0 && self.lambda_b >= 0.0) {
            return bad("lambda_l and lambda_b must be >= 0");
        }
        if self.epoch_size == 0 || self.batch_size == 0 || self.gen_batch_size == 0 {
            return bad("epoch_size, batch_size and gen_batch_size must be positive");
        }
        if let DecodeStrategy::Beam(0) = self.decode {
            return bad("beam size must be >= 1");
        }
        if self.gen_max_len == 0 {
            return bad("gen_max_len must be positive");
        }
        Ok(())
    }

    pub fn lambda_pivot(&self, pivot: LanguageId) -> f64 {
        if self.lambda_indirect.is_empty() {
            1.0
        } else {
            self.lambda_indirect
                .iter()
                .find(|w| w.pivot == pivot)
                .map_or(0.0, |w| w.lambda)
        }
    }

    /// Denoising weight after `round` CUNMT rounds.
    pub fn lambda_l_at(&self, round: u64) -> f64 {
        if round >= self.lambda_l_decay_rounds {
            0.0
        } else {
            self.lambda_l * (1.0 - round as f64 / self.lambda_l_decay_rounds as f64)
        }
    }

    pub fn rounds_per_epoch(&self) -> u64 {
        self.epoch_size.div_ceil(self.batch_size) as u64
    }

    pub fn refresh_rounds(&self) -> u64 {
        self.pool_refresh_rounds
            .unwrap_or_else(|| self.rounds_per_epoch())
            .max(1)
    }

    /// `(direction, pivot)` pairs that get indirect terms.
    pub fn indirect_plan(&self, dirs: &DirectionSet) -> Vec<(Direction, LanguageId)> {
        let directions: Vec<Direction> = match &self.indirect_directions {
            Some(d) => d.clone(),
            None => dirs
                .supervised
                .iter()
                .chain(&dirs.unsupervised)
                .copied()
                .collect(),
        };
        let langs = dirs.languages();
        let mut out = Vec::new();
        for d in directions {
            for &j in &langs {
                if j != d.0 && j != d.1 && self.lambda_pivot(j) > 0.0 {
                    out.push((d, j));
                }
            }
        }
        out
    }
}

/// Where a training row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Provenance {
    /// True parallel data.
    S,
    /// Direct back-translation.
    B,
    /// Back-translation through a pivot.
    Bi,
    /// Forward translation through a pivot.
    Fi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoRow {
    pub src: Sentence,
    pub tgt: Sentence,
    pub tag: Provenance,
    pub pivot: Option<LanguageId>,
    /// Optimizer step of the snapshot that produced the row.
    pub step: u64,
}

impl PseudoRow {
    pub fn direction(&self) -> Direction {
        (self.src.lang, self.tgt.lang)
    }
}

/// Synthetic rows merged for training, reset every refresh period.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoDataPool {
    pub rows: Vec<PseudoRow>,
}

impl PseudoDataPool {
    pub fn clear(&mut self) {
        self.rows.clear();
    }

    pub fn extend(&mut self, rows: impl IntoIterator<Item = PseudoRow>) {
        self.rows.extend(rows);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn count(&self, tag: Provenance) -> usize {
        self.rows.iter().filter(|r| r.tag == tag).count()
    }

    /// Indices of rows with this tag, direction and pivot.
    pub fn select(&self, tag: Provenance, d: Direction, pivot: Option<LanguageId>) -> Vec<usize> {
        self.rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.tag == tag && r.direction() == d && r.pivot == pivot)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    Supervised,
    BackTranslation,
    IndirectBackward,
    IndirectForward,
    Denoising,
}

/// One weighted loss term and its rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TermBatch {
    pub kind: TermKind,
    pub direction: Direction,
    pub pivot: Option<LanguageId>,
    pub weight: f64,
    pub rows: Vec<(Sentence, Sentence)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermLoss {
    pub kind: TermKind,
    pub src: LanguageId,
    pub tgt: LanguageId,
    pub pivot: Option<LanguageId>,
    pub weight: f64,
    /// Token-level mean negative log-likelihood.
    pub loss: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: Vec<TermLoss>,
    pub total: f64,
}

impl LossReport {
    pub fn weighted_sum(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * t.loss).sum()
    }

    pub fn of(&self, kind: TermKind) -> impl Iterator<Item = &TermLoss> {
        self.terms.iter().filter(move |t| t.kind == kind)
    }

    /// Indirect loss per `(direction, pivot)`: backward plus forward parts.
    pub fn indirect(&self) -> BTreeMap<(Direction, LanguageId), f64> {
        let mut out = BTreeMap::new();
        for t in &self.terms {
            if let (TermKind::IndirectBackward | TermKind::IndirectForward, Some(j)) =
                (t.kind, t.pivot)
            {
                *out.entry(((t.src, t.tgt), j)).or_insert(0.0) += t.loss;
            }
        }
        out
    }
}

/// Runs every term with positive weight through one forward pass. Each target token of term `k`
/// carries weight `weight_k / tokens_k`, so the graph loss is exactly the
/// weighted sum of per-term token means. Returns the report and, when
/// `with_grads`, one gradient per parameter tensor.
pub fn joint_loss(
    params: &ModelParams,
    terms: &[TermBatch],
    rng: Option<&mut dyn RngCore>,
    with_grads: bool,
) -> Result<(LossReport, Option<Vec<Tensor>>)> {
    let terms: Vec<&TermBatch> = terms
        .iter()
        .filter(|t| !t.rows.is_empty() && t.weight > 0.0)
        .collect();
    if terms.is_empty() {
        return Ok((LossReport::default(), None));
    }
    let rows: Vec<(Sentence, Sentence)> = terms.iter().flat_map(|t| t.rows.iter().cloned()).collect();
    let batch = make_batch(&rows)?;
    let w = batch.tgt_width;
    let mut weights = vec![0.0; batch.size * w];
    let mut spans = Vec::with_capacity(terms.len());
    let mut r0 = 0;
    for t in &terms {
        let n = t.rows.len();
        let tokens: usize = t.rows.iter().map(|(_, y)| y.len() + 1).sum();
        let tw = t.weight / tokens as f64;
        for r in r0..r0 + n {
            for i in 0..=batch.tgt_lens[r] {
                weights[r * w + i] = tw;
            }
        }
        spans.push((r0, n, tokens));
        r0 += n;
    }

    let mut g = Graph::new();
    let vars = params.attach(&mut g, with_grads);
    let logits = params.forward_logits(&mut g, &vars, &batch, rng)?;
    let loss = g.nll(logits, &batch.tgt_out, &weights)?;
    let per_row = g.row_nll(loss).expect("nll node").to_vec();

    let mut report = LossReport::default();
    for (t, &(r0, n, tokens)) in terms.iter().zip(&spans) {
        let mut sum = 0.0;
        for r in r0..r0 + n {
            for i in 0..=batch.tgt_lens[r] {
                sum += per_row[r * w + i];
            }
        }
        report.terms.push(TermLoss {
            kind: t.kind,
            src: t.direction.0,
            tgt: t.direction.1,
            pivot: t.pivot,
            weight: t.weight,
            loss: sum / tokens as f64,
            tokens,
        });
    }
    report.total = g.value(loss).item().expect("scalar loss");
    let grads = if with_grads {
        let gr = g.backward(loss)?;
        Some(vars.iter().map(|&v| gr.get(v)).collect())
    } else {
        None
    };
    Ok((report, grads))
}

/// Mean `-log P(x_t | x_s)` over a batch from a supervised direction.
pub fn loss_supervised(
    params: &ModelParams,
    dirs: &DirectionSet,
    rows: &[(Sentence, Sentence)],
) -> Result<f64> {
    let d = rows
        .first()
        .map(|(s, t)| (s.lang, t.lang))
        .ok_or(DataError::EmptyBatch)?;
    if !dirs.is_supervised(d) {
        return Err(TrainError::NotSupervised(d.0, d.1));
    }
    let term = TermBatch {
        kind: TermKind::Supervised,
        direction: d,
        pivot: None,
        weight: 1.0,
        rows: rows.to_vec(),
    };
    Ok(joint_loss(params, &[term], None, false)?.0.total)
}

/// Denoising rows `(C(x), x)` with source and target in the same language.
pub fn dae_rows<R: rand::Rng + ?Sized>(
    sentences: &[Sentence],
    noise: &NoiseConfig,
    rng: &mut R,
) -> Vec<(Sentence, Sentence)> {
    sentences
        .iter()
        .map(|x| (apply_noise(x, noise, rng), x.clone()))
        .collect()
}

/// Mean `-log P(x | C(x))`.
pub fn loss_dae<R: rand::Rng + ?Sized>(
    params: &ModelParams,
    sentences: &[Sentence],
    noise: &NoiseConfig,
    rng: &mut R,
) -> Result<f64> {
    let lang = sentences.first().ok_or(DataError::EmptyBatch)?.lang;
    let term = TermBatch {
        kind: TermKind::Denoising,
        direction: (lang, lang),
        pivot: None,
        weight: 1.0,
        rows: dae_rows(sentences, noise, rng),
    };
    Ok(joint_loss(params, &[term], None, false)?.0.total)
}
