//! Synthetic "cipher" languages over a shared concept space.
//!
//! Every language maps concept ids to content tokens through a bijection and
//! then reverses consecutive blocks of `reorder_period` tokens. Both steps are
//! invertible, so translating between any two languages of a family is exact:
//! undo the source language, then apply the target language.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::text::{LanguageId, MonoCorpus, ParallelCorpus, Sentence, TokenId, Vocabulary};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid language parameters: {0}")]
    InvalidParameter(String),
    #[error("token {token} is not a content token of {lang}")]
    OutOfRange { token: TokenId, lang: LanguageId },
    #[error("sentence is in {found}, expected {expected}")]
    WrongLanguage {
        expected: LanguageId,
        found: LanguageId,
    },
    #[error("concept space exhausted: needed {needed} distinct sentences, produced {produced}")]
    Capacity { needed: usize, produced: usize },
    #[error("pair {0}-{1} references a language outside the family")]
    UnknownPair(LanguageId, LanguageId),
}

/// SplitMix64 finalizer; derives independent sub-seeds from one seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageDef {
    pub lang: LanguageId,
    /// `cipher[concept]` is the content index (0-based) of that concept.
    pub cipher: Vec<u32>,
    inverse: Vec<u32>,
    pub reorder_period: usize,
    pub similarity: f64,
    pub seed: u64,
}

/// Builds a language whose cipher keeps `round(similarity * n)` concepts on the
/// reference (identity) mapping and permutes the rest uniformly at random.
pub fn make_language(
    lang: LanguageId,
    base_vocab_size: usize,
    reorder_period: usize,
    similarity: f64,
    seed: u64,
) -> Result<LanguageDef, SynthError> {
    if base_vocab_size < 2 {
        return Err(SynthError::InvalidParameter(
            "base vocabulary needs at least two concepts".into(),
        ));
    }
    if !(0.0..=1.0).contains(&similarity) {
        return Err(SynthError::InvalidParameter(format!(
            "similarity {similarity} outside [0, 1]"
        )));
    }
    if reorder_period == 0 {
        return Err(SynthError::InvalidParameter("reorder period must be >= 1".into()));
    }
    let n = base_vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.shuffle(&mut rng);
    let n_keep = (similarity * n as f64).round() as usize;
    let mut rest: Vec<u32> = order[n_keep..].to_vec();
    rest.sort_unstable();
    let mut images = rest.clone();
    images.shuffle(&mut rng);
    let mut cipher: Vec<u32> = (0..n as u32).collect();
    for (&c, &t) in rest.iter().zip(&images) {
        cipher[c as usize] = t;
    }
    let mut inverse = vec![0u32; n];
    for (c, &t) in cipher.iter().enumerate() {
        inverse[t as usize] = c as u32;
    }
    Ok(LanguageDef {
        lang,
        cipher,
        inverse,
        reorder_period,
        similarity,
        seed,
    })
}

/// Reverses consecutive blocks of `period` items; an involution.
pub fn block_reverse<T: Copy>(xs: &[T], period: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(xs.len());
    for block in xs.chunks(period.max(1)) {
        out.extend(block.iter().rev());
    }
    out
}

impl LanguageDef {
    pub fn base_vocab_size(&self) -> usize {
        self.cipher.len()
    }

    /// Renders a concept sequence in this language.
    pub fn realize(&self, concepts: &[u32], vocab: &Vocabulary) -> Sentence {
        let tokens: Vec<TokenId> = concepts
            .iter()
            .map(|&c| vocab.content_token(self.cipher[c as usize] as usize))
            .collect();
        Sentence::new(block_reverse(&tokens, self.reorder_period), self.lang)
    }

    /// Recovers the concept sequence behind a sentence of this language.
    pub fn concepts(&self, x: &Sentence, vocab: &Vocabulary) -> Result<Vec<u32>, SynthError> {
        if x.lang != self.lang {
            return Err(SynthError::WrongLanguage {
                expected: self.lang,
                found: x.lang,
            });
        }
        let offset = vocab.content_offset();
        block_reverse(&x.tokens, self.reorder_period)
            .into_iter()
            .map(|t| {
                let idx = t.checked_sub(offset).map(|i| i as usize);
                match idx {
                    Some(i) if i < self.inverse.len() => Ok(self.inverse[i]),
                    _ => Err(SynthError::OutOfRange {
                        token: t,
                        lang: self.lang,
                    }),
                }
            })
            .collect()
    }

    pub fn cipher_hash(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.cipher {
            h.update(c.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Number of concepts this language maps to the same token as `other`.
    pub fn shared_entries(&self, other: &LanguageDef) -> usize {
        self.cipher
            .iter()
            .zip(&other.cipher)
            .filter(|(a, b)| a == b)
            .count()
    }
}

pub fn oracle_translate(
    x: &Sentence,
    from: &LanguageDef,
    to: &LanguageDef,
    vocab: &Vocabulary,
) -> Result<Sentence, SynthError> {
    let concepts = from.concepts(x, vocab)?;
    Ok(to.realize(&concepts, vocab))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub reorder_period: usize,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FamilySpec {
    /// Total vocabulary size including reserved and language-tag tokens.
    pub vocab_size: usize,
    pub languages: Vec<LanguageSpec>,
    pub zipf_exponent: f64,
    pub len_min: usize,
    pub len_max: usize,
}

impl Default for FamilySpec {
    fn default() -> Self {
        Self {
            vocab_size: 128,
            languages: vec![
                LanguageSpec {
                    reorder_period: 1,
                    similarity: 0.0,
                },
                LanguageSpec {
                    reorder_period: 2,
                    similarity: 1.0,
                },
                LanguageSpec {
                    reorder_period: 3,
                    similarity: 0.5,
                },
            ],
            zipf_exponent: 1.0,
            len_min: 4,
            len_max: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Family {
    pub spec: FamilySpec,
    pub seed: u64,
    pub vocab: Vocabulary,
    pub languages: Vec<LanguageDef>,
}

const STREAM_LANG: u64 = 1 << 32;
const STREAM_MONO: u64 = 2 << 32;
const STREAM_PAR: u64 = 3 << 32;
const STREAM_TEST: u64 = 4 << 32;

impl Family {
    pub fn build(spec: &FamilySpec, seed: u64) -> Result<Self, SynthError> {
        let n = spec.languages.len();
        if spec.vocab_size < 4 + n + 2 {
            return Err(SynthError::InvalidParameter(format!(
                "vocabulary of {} cannot hold {n} languages",
                spec.vocab_size
            )));
        }
        if spec.len_min == 0 || spec.len_min > spec.len_max {
            return Err(SynthError::InvalidParameter(format!(
                "bad length range {}..={}",
                spec.len_min, spec.len_max
            )));
        }
        let vocab = Vocabulary::with_total_size(n, spec.vocab_size);
        let languages = spec
            .languages
            .iter()
            .enumerate()
            .map(|(i, l)| {
                make_language(
                    LanguageId(i as u16),
                    vocab.content_size(),
                    l.reorder_period,
                    l.similarity,
                    derive_seed(seed, STREAM_LANG + i as u64),
                )
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            spec: spec.clone(),
            seed,
            vocab,
            languages,
        })
    }

    pub fn language(&self, id: LanguageId) -> &LanguageDef {
        &self.languages[id.index()]
    }

    pub fn translate(&self, x: &Sentence, to: LanguageId) -> Result<Sentence, SynthError> {
        let from = self
            .languages
            .get(x.lang.index())
            .ok_or(SynthError::UnknownPair(x.lang, to))?;
        let to = self
            .languages
            .get(to.index())
            .ok_or(SynthError::UnknownPair(x.lang, to))?;
        oracle_translate(x, from, to, &self.vocab)
    }

    fn sampler(&self) -> ConceptSampler {
        ConceptSampler {
            zipf: Zipf::new(self.vocab.content_size() as f64, self.spec.zipf_exponent)
                .expect("valid zipf parameters"),
            len_min: self.spec.len_min,
            len_max: self.spec.len_max,
        }
    }

    /// Human-readable record of everything needed to rebuild the family.
    pub fn meta(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "family_seed={}", self.seed);
        let _ = writeln!(s, "vocab_size={}", self.spec.vocab_size);
        let _ = writeln!(s, "vocab_sha256={}", self.vocab.hash());
        let _ = writeln!(s, "zipf_exponent={}", self.spec.zipf_exponent);
        let _ = writeln!(s, "len_range={}..={}", self.spec.len_min, self.spec.len_max);
        for l in &self.languages {
            let _ = writeln!(
                s,
                "language name={} seed={} reorder_period={} similarity={} cipher_sha256={}",
                self.vocab.lang_name(l.lang),
                l.seed,
                l.reorder_period,
                l.similarity,
                l.cipher_hash()
            );
        }
        s
    }
}

struct ConceptSampler {
    zipf: Zipf<f64>,
    len_min: usize,
    len_max: usize,
}

impl ConceptSampler {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<u32> {
        let len = rng.random_range(self.len_min..=self.len_max);
        (0..len)
            .map(|_| self.zipf.sample(rng) as u32 - 1)
            .collect()
    }

    /// Draws `n` concept sentences not yet in `used`, recording them.
    fn draw_fresh<R: Rng + ?Sized>(
        &self,
        n: usize,
        used: &mut HashSet<Vec<u32>>,
        rng: &mut R,
    ) -> Result<Vec<Vec<u32>>, SynthError> {
        let budget = 50 * n + 1000;
        let mut out = Vec::with_capacity(n);
        for _ in 0..budget {
            if out.len() == n {
                break;
            }
            let c = self.sample(rng);
            if used.insert(c.clone()) {
                out.push(c);
            }
        }
        if out.len() < n {
            return Err(SynthError::Capacity {
                needed: n,
                produced: out.len(),
            });
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpora {
    pub mono: Vec<MonoCorpus>,
    pub parallel: Vec<ParallelCorpus>,
    pub test: Vec<ParallelCorpus>,
}

/// Generates one monolingual corpus per language, one parallel corpus per
/// unordered pair in `parallel_pairs`, and one held-out test corpus per pair in
/// `test_pairs`. Every concept sentence is used at most once across all of
/// them, so monolingual pools share no hidden parallel content and test data
/// never overlaps training data.
pub fn gen_corpora(
    family: &Family,
    n_mono: usize,
    parallel_pairs: &[(LanguageId, LanguageId)],
    n_parallel: usize,
    test_pairs: &[(LanguageId, LanguageId)],
    n_test: usize,
    seed: u64,
) -> Result<Corpora, SynthError> {
    let n_langs = family.languages.len();
    for &(a, b) in parallel_pairs.iter().chain(test_pairs) {
        if a.index() >= n_langs || b.index() >= n_langs || a == b {
            return Err(SynthError::UnknownPair(a, b));
        }
    }
    let sampler = family.sampler();
    let vocab = &family.vocab;
    let mut used = HashSet::new();

    // Test pools are drawn first from their own streams so that changing the
    // size of any training pool leaves the test sets unchanged.
    let mut test = Vec::new();
    for (i, &(a, b)) in test_pairs.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_TEST + i as u64));
        let concepts = sampler.draw_fresh(n_test, &mut used, &mut rng)?;
        let rows = concepts
            .iter()
            .map(|c| {
                (
                    family.language(a).realize(c, vocab),
                    family.language(b).realize(c, vocab),
                )
            })
            .collect();
        test.push(ParallelCorpus::new((a, b), rows).expect("languages match by construction"));
    }

    let mut mono = Vec::new();
    for l in &family.languages {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_MONO + l.lang.0 as u64));
        let concepts = sampler.draw_fresh(n_mono, &mut used, &mut rng)?;
        let sentences = concepts.iter().map(|c| l.realize(c, vocab)).collect();
        mono.push(MonoCorpus::new(l.lang, sentences).expect("languages match by construction"));
    }

    let mut parallel: Vec<ParallelCorpus> = Vec::new();
    for &(a, b) in parallel_pairs {
        if parallel
            .iter()
            .any(|p| p.pair == (a, b) || p.pair == (b, a))
        {
            continue;
        }
        let stream = STREAM_PAR + ((a.0 as u64) << 16) + b.0 as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream));
        let concepts = sampler.draw_fresh(n_parallel, &mut used, &mut rng)?;
        let rows = concepts
            .iter()
            .map(|c| {
                (
                    family.language(a).realize(c, vocab),
                    family.language(b).realize(c, vocab),
                )
            })
            .collect();
        parallel.push(ParallelCorpus::new((a, b), rows).expect("languages match by construction"));
    }
    Ok(Corpora {
        mono,
        parallel,
        test,
    })
}
