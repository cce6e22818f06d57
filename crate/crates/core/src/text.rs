//! Vocabulary, corpora, batching, and the denoising noise model.

use std::fmt;
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const BLANK: TokenId = 3;
/// Number of reserved ids before the language tags.
pub const N_SPECIAL: usize = 4;

/// Tag token that asks the model to produce language `lang`.
pub fn lang_tag_id(lang: LanguageId) -> TokenId {
    (N_SPECIAL + lang.index()) as TokenId
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot build a batch from zero rows")]
    EmptyBatch,
    #[error("cannot sample from an empty corpus")]
    EmptyCorpus,
    #[error("sentence must hold at least one token")]
    EmptySentence,
    #[error("token {token} is reserved and cannot appear in sentence content")]
    ReservedToken { token: TokenId },
    #[error("token {token} is outside the vocabulary (size {size})")]
    UnknownToken { token: TokenId, size: usize },
    #[error("unknown language `{0}`")]
    UnknownLanguage(String),
    #[error("expected language {expected}, found {found}")]
    LanguageMismatch {
        expected: LanguageId,
        found: LanguageId,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LanguageId(pub u16);

impl LanguageId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for LanguageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.0)
    }
}

/// Token inventory shared by every language.
///
/// Layout: `pad, bos, eos, blank`, one target-language tag per language,
/// then `content_size` content tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    lang_names: Vec<String>,
    content_size: usize,
}

impl Vocabulary {
    pub fn new(lang_names: Vec<String>, content_size: usize) -> Self {
        Self {
            lang_names,
            content_size,
        }
    }

    /// A vocabulary with `n_langs` languages named `L0, L1, ...` whose total
    /// size is `total_size`.
    pub fn with_total_size(n_langs: usize, total_size: usize) -> Self {
        let names = (0..n_langs).map(|i| format!("L{i}")).collect();
        Self::new(names, total_size - N_SPECIAL - n_langs)
    }

    pub fn size(&self) -> usize {
        N_SPECIAL + self.lang_names.len() + self.content_size
    }

    pub fn n_langs(&self) -> usize {
        self.lang_names.len()
    }

    pub fn content_size(&self) -> usize {
        self.content_size
    }

    pub fn languages(&self) -> impl Iterator<Item = LanguageId> + '_ {
        (0..self.lang_names.len()).map(|i| LanguageId(i as u16))
    }

    pub fn lang_name(&self, lang: LanguageId) -> &str {
        &self.lang_names[lang.index()]
    }

    pub fn lang_by_name(&self, name: &str) -> Option<LanguageId> {
        self.lang_names
            .iter()
            .position(|n| n == name)
            .map(|i| LanguageId(i as u16))
    }

    pub fn lang_tag(&self, lang: LanguageId) -> TokenId {
        lang_tag_id(lang)
    }

    pub fn content_offset(&self) -> TokenId {
        (N_SPECIAL + self.lang_names.len()) as TokenId
    }

    /// Token id of the `i`-th content token.
    pub fn content_token(&self, i: usize) -> TokenId {
        self.content_offset() + i as TokenId
    }

    pub fn is_content(&self, t: TokenId) -> bool {
        t >= self.content_offset() && (t as usize) < self.size()
    }

    pub fn is_reserved(&self, t: TokenId) -> bool {
        t < self.content_offset()
    }

    pub fn token_name(&self, t: TokenId) -> String {
        match t {
            PAD => "<pad>".into(),
            BOS => "<bos>".into(),
            EOS => "<eos>".into(),
            BLANK => "<blank>".into(),
            t if self.is_reserved(t) => {
                format!("<2{}>", self.lang_names[t as usize - N_SPECIAL])
            }
            t => format!("w{}", t - self.content_offset()),
        }
    }

    pub fn token_id(&self, name: &str) -> Option<TokenId> {
        (0..self.size() as TokenId).find(|&t| self.token_name(t) == name)
    }

    /// Content hash of the token inventory; checkpoints record it.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in 0..self.size() as TokenId {
            h.update(self.token_name(t).as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<TokenId>,
    pub lang: LanguageId,
}

impl Sentence {
    pub fn new(tokens: Vec<TokenId>, lang: LanguageId) -> Self {
        Self { tokens, lang }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), DataError> {
        if self.tokens.is_empty() {
            return Err(DataError::EmptySentence);
        }
        for &t in &self.tokens {
            if t as usize >= vocab.size() {
                return Err(DataError::UnknownToken {
                    token: t,
                    size: vocab.size(),
                });
            }
            if vocab.is_reserved(t) && t != BLANK {
                return Err(DataError::ReservedToken { token: t });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonoCorpus {
    pub lang: LanguageId,
    pub sentences: Vec<Sentence>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub pair: (LanguageId, LanguageId),
    pub rows: Vec<(Sentence, Sentence)>,
}

impl MonoCorpus {
    pub fn new(lang: LanguageId, sentences: Vec<Sentence>) -> Result<Self, DataError> {
        for s in &sentences {
            if s.lang != lang {
                return Err(DataError::LanguageMismatch {
                    expected: lang,
                    found: s.lang,
                });
            }
        }
        Ok(Self { lang, sentences })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

impl ParallelCorpus {
    pub fn new(
        pair: (LanguageId, LanguageId),
        rows: Vec<(Sentence, Sentence)>,
    ) -> Result<Self, DataError> {
        for (a, b) in &rows {
            for (s, want) in [(a, pair.0), (b, pair.1)] {
                if s.lang != want {
                    return Err(DataError::LanguageMismatch {
                        expected: want,
                        found: s.lang,
                    });
                }
            }
        }
        Ok(Self { pair, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// The same rows with source and target swapped.
    pub fn reversed(&self) -> Self {
        Self {
            pair: (self.pair.1, self.pair.0),
            rows: self.rows.iter().map(|(a, b)| (b.clone(), a.clone())).collect(),
        }
    }

    /// The first `n` rows.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            pair: self.pair,
            rows: self.rows.iter().take(n).cloned().collect(),
        }
    }
}

/// Noise model for denoising auto-encoding: word drop, word blanking, and a
/// local shuffle in which no token moves more than `swap_window` positions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub p_drop: f64,
    pub p_blank: f64,
    pub swap_window: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            p_drop: 0.1,
            p_blank: 0.1,
            swap_window: 3,
        }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self {
            p_drop: 0.0,
            p_blank: 0.0,
            swap_window: 0,
        }
    }
}

pub fn apply_noise<R: Rng + ?Sized>(x: &Sentence, cfg: &NoiseConfig, rng: &mut R) -> Sentence {
    let mut kept: Vec<TokenId> = x
        .tokens
        .iter()
        .copied()
        .filter(|_| cfg.p_drop <= 0.0 || rng.random::<f64>() >= cfg.p_drop)
        .collect();
    if kept.is_empty() && !x.tokens.is_empty() {
        kept.push(x.tokens[rng.random_range(0..x.tokens.len())]);
    }
    if cfg.p_blank > 0.0 {
        for t in kept.iter_mut() {
            if rng.random::<f64>() < cfg.p_blank {
                *t = BLANK;
            }
        }
    }
    let order = local_shuffle(kept.len(), cfg.swap_window, rng);
    Sentence::new(order.into_iter().map(|i| kept[i]).collect(), x.lang)
}

/// `out[p]` is the original index placed at position `p`. Sorting
/// `i + U[0, k+1)` keys guarantees `|p - out[p]| <= k`.
fn local_shuffle<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    if k == 0 || n < 2 {
        return (0..n).collect();
    }
    let keys: Vec<f64> = (0..n)
        .map(|i| i as f64 + rng.random::<f64>() * (k as f64 + 1.0))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
    order
}

/// Padded teacher-forcing batch. Matrices are row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_width: usize,
    pub src: Vec<TokenId>,
    pub src_lens: Vec<usize>,
    /// Width of the target matrices: longest target plus one.
    pub tgt_width: usize,
    /// `bos` followed by the target tokens.
    pub tgt_in: Vec<TokenId>,
    /// The target tokens followed by `eos`.
    pub tgt_out: Vec<TokenId>,
    pub tgt_lens: Vec<usize>,
    pub src_langs: Vec<LanguageId>,
    pub tgt_langs: Vec<LanguageId>,
}

pub fn make_batch(rows: &[(Sentence, Sentence)]) -> Result<Batch, DataError> {
    if rows.is_empty() {
        return Err(DataError::EmptyBatch);
    }
    if rows.iter().any(|(s, t)| s.is_empty() || t.is_empty()) {
        return Err(DataError::EmptySentence);
    }
    let size = rows.len();
    let src_width = rows.iter().map(|(s, _)| s.len()).max().unwrap_or(0);
    let tgt_width = rows.iter().map(|(_, t)| t.len()).max().unwrap_or(0) + 1;
    let mut src = vec![PAD; size * src_width];
    let mut tgt_in = vec![PAD; size * tgt_width];
    let mut tgt_out = vec![PAD; size * tgt_width];
    for (r, (s, t)) in rows.iter().enumerate() {
        src[r * src_width..r * src_width + s.len()].copy_from_slice(&s.tokens);
        let ti = &mut tgt_in[r * tgt_width..];
        ti[0] = BOS;
        ti[1..=t.len()].copy_from_slice(&t.tokens);
        let to = &mut tgt_out[r * tgt_width..];
        to[..t.len()].copy_from_slice(&t.tokens);
        to[t.len()] = EOS;
    }
    Ok(Batch {
        size,
        src_width,
        src,
        src_lens: rows.iter().map(|(s, _)| s.len()).collect(),
        tgt_width,
        tgt_in,
        tgt_out,
        tgt_lens: rows.iter().map(|(_, t)| t.len()).collect(),
        src_langs: rows.iter().map(|(s, _)| s.lang).collect(),
        tgt_langs: rows.iter().map(|(_, t)| t.lang).collect(),
    })
}

impl Batch {
    /// Strips padding and `bos`/`eos`, recovering the rows.
    pub fn rows(&self) -> Vec<(Sentence, Sentence)> {
        (0..self.size)
            .map(|r| {
                let s = &self.src[r * self.src_width..r * self.src_width + self.src_lens[r]];
                let t = &self.tgt_out[r * self.tgt_width..r * self.tgt_width + self.tgt_lens[r]];
                (
                    Sentence::new(s.to_vec(), self.src_langs[r]),
                    Sentence::new(t.to_vec(), self.tgt_langs[r]),
                )
            })
            .collect()
    }
}

/// Uniform sampling with replacement.
pub fn sample_mono<R: Rng + ?Sized>(
    corpus: &MonoCorpus,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Sentence>, DataError> {
    if corpus.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    Ok((0..batch_size)
        .map(|_| corpus.sentences[rng.random_range(0..corpus.len())].clone())
        .collect())
}

pub fn sample_parallel<R: Rng + ?Sized>(
    corpus: &ParallelCorpus,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<(Sentence, Sentence)>, DataError> {
    if corpus.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    Ok((0..batch_size)
        .map(|_| corpus.rows[rng.random_range(0..corpus.len())].clone())
        .collect())
}

fn format_tokens(tokens: &[TokenId]) -> String {
    tokens
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_tokens(s: &str, line: usize) -> Result<Vec<TokenId>, DataError> {
    s.split(' ')
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse().map_err(|_| DataError::Parse {
                line,
                msg: format!("bad token id `{p}`"),
            })
        })
        .collect()
}

/// Header line `lang=<name>`, then one sentence of space-separated ids per line.
pub fn write_mono<W: Write>(w: &mut W, corpus: &MonoCorpus, vocab: &Vocabulary) -> std::io::Result<()> {
    writeln!(w, "lang={}", vocab.lang_name(corpus.lang))?;
    for s in &corpus.sentences {
        writeln!(w, "{}", format_tokens(&s.tokens))?;
    }
    Ok(())
}

/// Header line `pair=<a>,<b>`, then tab-separated source/target columns.
pub fn write_parallel<W: Write>(
    w: &mut W,
    corpus: &ParallelCorpus,
    vocab: &Vocabulary,
) -> std::io::Result<()> {
    writeln!(
        w,
        "pair={},{}",
        vocab.lang_name(corpus.pair.0),
        vocab.lang_name(corpus.pair.1)
    )?;
    for (a, b) in &corpus.rows {
        writeln!(w, "{}\t{}", format_tokens(&a.tokens), format_tokens(&b.tokens))?;
    }
    Ok(())
}

fn header<'a>(line: Option<&'a str>, key: &str) -> Result<&'a str, DataError> {
    line.and_then(|l| l.strip_prefix(key))
        .and_then(|l| l.strip_prefix('='))
        .ok_or_else(|| DataError::Parse {
            line: 1,
            msg: format!("expected `{key}=` header"),
        })
}

fn lang(vocab: &Vocabulary, name: &str) -> Result<LanguageId, DataError> {
    vocab
        .lang_by_name(name.trim())
        .ok_or_else(|| DataError::UnknownLanguage(name.trim().to_string()))
}

pub fn read_mono<R: BufRead>(r: R, vocab: &Vocabulary) -> Result<MonoCorpus, DataError> {
    let lines: Vec<String> = r.lines().collect::<Result<_, _>>()?;
    let l = lang(vocab, header(lines.first().map(String::as_str), "lang")?)?;
    let mut sentences = Vec::new();
    for (i, line) in lines.iter().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let s = Sentence::new(parse_tokens(line, i + 1)?, l);
        s.validate(vocab).map_err(|e| DataError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        sentences.push(s);
    }
    MonoCorpus::new(l, sentences)
}

pub fn read_parallel<R: BufRead>(r: R, vocab: &Vocabulary) -> Result<ParallelCorpus, DataError> {
    let lines: Vec<String> = r.lines().collect::<Result<_, _>>()?;
    let h = header(lines.first().map(String::as_str), "pair")?;
    let (a, b) = h.split_once(',').ok_or_else(|| DataError::Parse {
        line: 1,
        msg: "pair header needs two comma-separated names".into(),
    })?;
    let pair = (lang(vocab, a)?, lang(vocab, b)?);
    let mut rows = Vec::new();
    for (i, line) in lines.iter().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let (sa, sb) = line.split_once('\t').ok_or_else(|| DataError::Parse {
            line: i + 1,
            msg: "expected two tab-separated columns".into(),
        })?;
        let x = Sentence::new(parse_tokens(sa, i + 1)?, pair.0);
        let y = Sentence::new(parse_tokens(sb, i + 1)?, pair.1);
        for s in [&x, &y] {
            s.validate(vocab).map_err(|e| DataError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        rows.push((x, y));
    }
    ParallelCorpus::new(pair, rows)
}
