//! Synthetic parallel data: direct back-translation and the two indirect
//! (pivot) variants. Generators are written against [`Translator`], so the
//! exact oracle of a synthetic family can stand in for the model.

use crate::exec::Exec;
use crate::model::{beam_decode, greedy_decode_batch, ModelParams};
use crate::synth::Family;
use crate::text::{LanguageId, Sentence};

use super::{DecodeStrategy, Provenance, PseudoRow, Result, TrainError};

pub trait Translator: Sync {
    /// Translates every source into `tgt`; `None` marks a row that could not
    /// be completed (for a model, a decode that hit its length limit).
    fn translate(&self, srcs: &[Sentence], tgt: LanguageId) -> Result<Vec<Option<Sentence>>>;
}

/// A frozen model snapshot plus the decoding strategy used for generation.
#[derive(Clone, Copy, Debug)]
pub struct ModelTranslator<'a> {
    pub params: &'a ModelParams,
    pub strategy: DecodeStrategy,
    pub max_len: usize,
    pub exec: Exec,
}

impl Translator for ModelTranslator<'_> {
    fn translate(&self, srcs: &[Sentence], tgt: LanguageId) -> Result<Vec<Option<Sentence>>> {
        match self.strategy {
            DecodeStrategy::Greedy => {
                let langs = vec![tgt; srcs.len()];
                let out = greedy_decode_batch(self.params, srcs, &langs, self.max_len, self.exec)?;
                Ok(out
                    .into_iter()
                    .map(|d| (!d.truncated).then(|| d.into_sentence(tgt)))
                    .collect())
            }
            DecodeStrategy::Beam(k) => self
                .exec
                .map(srcs, |x| {
                    let b = beam_decode(self.params, x, tgt, k, self.max_len)?;
                    Ok((!b.best.truncated).then(|| Sentence::new(b.best.tokens, tgt)))
                })
                .into_iter()
                .collect(),
        }
    }
}

impl Translator for Family {
    fn translate(&self, srcs: &[Sentence], tgt: LanguageId) -> Result<Vec<Option<Sentence>>> {
        Ok(srcs
            .iter()
            .map(|x| Family::translate(self, x, tgt).ok())
            .collect())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenOutput {
    pub rows: Vec<PseudoRow>,
    pub dropped: usize,
}

fn guard(pivot: LanguageId, src: LanguageId, tgt: LanguageId) -> Result<()> {
    if pivot == src || pivot == tgt {
        Err(TrainError::PivotGuard { pivot, src, tgt })
    } else {
        Ok(())
    }
}

/// Translates `srcs` into `via`, then into `to`; `None` where either hop fails.
fn two_hop<T: Translator + ?Sized>(
    tr: &T,
    srcs: &[Sentence],
    via: LanguageId,
    to: LanguageId,
) -> Result<Vec<Option<Sentence>>> {
    let first = tr.translate(srcs, via)?;
    let ok: Vec<Sentence> = first.iter().flatten().cloned().collect();
    let mut second = tr.translate(&ok, to)?.into_iter();
    Ok(first
        .into_iter()
        .map(|h| h.and_then(|_| second.next().flatten()))
        .collect())
}

fn rows_from(
    pairs: impl Iterator<Item = (Option<Sentence>, Option<Sentence>)>,
    tag: Provenance,
    pivot: Option<LanguageId>,
    step: u64,
) -> GenOutput {
    let mut out = GenOutput::default();
    for (src, tgt) in pairs {
        match (src, tgt) {
            (Some(src), Some(tgt)) => out.rows.push(PseudoRow {
                src,
                tgt,
                tag,
                pivot,
                step,
            }),
            _ => out.dropped += 1,
        }
    }
    out
}

/// Rows `(g_{t->s}(x_t), x_t)` for the direction `s -> t`, tagged `B`.
pub fn gen_back_translation<T: Translator + ?Sized>(
    tr: &T,
    mono_t: &[Sentence],
    s: LanguageId,
    step: u64,
) -> Result<GenOutput> {
    let synth = tr.translate(mono_t, s)?;
    Ok(rows_from(
        synth.into_iter().zip(mono_t.iter().cloned().map(Some)),
        Provenance::B,
        None,
        step,
    ))
}

/// Rows `(g_{t->j->s}(x_t), x_t)` for `s -> t` through pivot `j`, tagged `Bi`.
pub fn gen_indirect_backward<T: Translator + ?Sized>(
    tr: &T,
    mono_t: &[Sentence],
    pivot: LanguageId,
    s: LanguageId,
    step: u64,
) -> Result<GenOutput> {
    if let Some(x) = mono_t.first() {
        guard(pivot, s, x.lang)?;
    }
    let synth = two_hop(tr, mono_t, pivot, s)?;
    Ok(rows_from(
        synth.into_iter().zip(mono_t.iter().cloned().map(Some)),
        Provenance::Bi,
        Some(pivot),
        step,
    ))
}

/// Rows `(x_s, f_{s->j->t}(x_s))` tagged `Fi`. With `hints` (the true pivot
/// sides `x_j` of parallel rows `(x_s, x_j)`) only the `j -> t` hop is
/// decoded; otherwise both hops are.
pub fn gen_indirect_forward<T: Translator + ?Sized>(
    tr: &T,
    sources: &[Sentence],
    hints: Option<&[Sentence]>,
    pivot: LanguageId,
    t: LanguageId,
    step: u64,
) -> Result<GenOutput> {
    if let Some(x) = sources.first() {
        guard(pivot, x.lang, t)?;
    }
    let synth = match hints {
        Some(h) => {
            if h.len() != sources.len() || h.iter().any(|x| x.lang != pivot) {
                return Err(TrainError::Config(
                    "forward hints must be pivot-language rows aligned with the sources".into(),
                ));
            }
            tr.translate(h, t)?
        }
        None => two_hop(tr, sources, pivot, t)?,
    };
    Ok(rows_from(
        sources.iter().cloned().map(Some).zip(synth),
        Provenance::Fi,
        Some(pivot),
        step,
    ))
}
