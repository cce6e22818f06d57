//! BLEU, token accuracy, held-out evaluation and comparison tables.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::model::{beam_decode, greedy_decode_batch, ModelError, ModelParams};
use crate::text::{LanguageId, MonoCorpus, ParallelCorpus, Sentence, TokenId};
use crate::train::{DecodeStrategy, Direction, TrainError, Translator};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot score an empty corpus")]
    Empty,
    #[error("{hyps} hypotheses for {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("test set for {0}->{1} shares {2} sentences with the training pools")]
    Contaminated(LanguageId, LanguageId, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    /// In `[0, 100]`.
    pub score: f64,
    pub precisions: [f64; 4],
    pub bp: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + Hash>(xs: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut out = HashMap::new();
    if xs.len() >= n {
        for w in xs.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped matches and totals for orders 1..=4.
fn stats<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> ([usize; 4], [usize; 4]) {
    let mut matched = [0; 4];
    let mut total = [0; 4];
    for n in 1..=4 {
        let r = ngram_counts(reference, n);
        for (g, c) in ngram_counts(hyp, n) {
            matched[n - 1] += c.min(r.get(g).copied().unwrap_or(0));
        }
        total[n - 1] = hyp.len().saturating_sub(n - 1);
    }
    (matched, total)
}

fn check_lengths<A, B>(hyps: &[A], refs: &[B]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch {
            hyps: hyps.len(),
            refs: refs.len(),
        });
    }
    if hyps.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Corpus BLEU-4, unsmoothed: n-gram counts are summed over the corpus
/// before taking ratios, and a zero precision at any order gives 0.
pub fn bleu<S: AsRef<[T]>, T: Eq + Hash>(hyps: &[S], refs: &[S]) -> Result<BleuScore> {
    check_lengths(hyps, refs)?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (h.as_ref(), r.as_ref());
        let (m, t) = stats(h, r);
        for n in 0..4 {
            matched[n] += m[n];
            total[n] += t[n];
        }
        hyp_len += h.len();
        ref_len += r.len();
    }
    let precisions = std::array::from_fn(|n| {
        if total[n] == 0 {
            0.0
        } else {
            matched[n] as f64 / total[n] as f64
        }
    });
    let bp = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let score = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
        100.0 * bp * log_mean.exp()
    };
    Ok(BleuScore {
        score,
        precisions,
        bp,
        hyp_len,
        ref_len,
    })
}

/// Sentence-level BLEU with add-one smoothing on orders 2..=4. For
/// inspecting single outputs only.
pub fn sentence_bleu<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let (m, t) = stats(hyp, reference);
    let mut log_sum = 0.0;
    for n in 0..4 {
        let (num, den) = if n == 0 {
            (m[0] as f64, t[0] as f64)
        } else {
            (m[n] as f64 + 1.0, t[n] as f64 + 1.0)
        };
        if num == 0.0 {
            return 0.0;
        }
        log_sum += (num / den).ln();
    }
    let bp = if hyp.len() < reference.len() {
        (1.0 - reference.len() as f64 / hyp.len() as f64).exp()
    } else {
        1.0
    };
    100.0 * bp * (log_sum / 4.0).exp()
}

/// Position-aligned matches over `max(len(hyp), len(ref))`, averaged over
/// sentences.
pub fn token_accuracy<S: AsRef<[T]>, T: Eq>(hyps: &[S], refs: &[S]) -> Result<f64> {
    check_lengths(hyps, refs)?;
    let sum: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| {
            let (h, r) = (h.as_ref(), r.as_ref());
            let denom = h.len().max(r.len());
            if denom == 0 {
                1.0
            } else {
                h.iter().zip(r).filter(|(a, b)| a == b).count() as f64 / denom as f64
            }
        })
        .sum();
    Ok(sum / hyps.len() as f64)
}

/// Every `(language, tokens)` seen in training.
#[derive(Clone, Debug, Default)]
pub struct ContentIndex {
    seen: HashSet<(LanguageId, Vec<TokenId>)>,
}

impl ContentIndex {
    pub fn new(mono: &[MonoCorpus], parallel: &[ParallelCorpus]) -> Self {
        let mut seen = HashSet::new();
        for c in mono {
            for x in &c.sentences {
                seen.insert((x.lang, x.tokens.clone()));
            }
        }
        for c in parallel {
            for (a, b) in &c.rows {
                seen.insert((a.lang, a.tokens.clone()));
                seen.insert((b.lang, b.tokens.clone()));
            }
        }
        Self { seen }
    }

    pub fn contains(&self, x: &Sentence) -> bool {
        self.seen.contains(&(x.lang, x.tokens.clone()))
    }

    /// Fails if any sentence of `test` appears in training data.
    pub fn check(&self, test: &ParallelCorpus) -> Result<()> {
        let n = test
            .rows
            .iter()
            .filter(|(a, b)| self.contains(a) || self.contains(b))
            .count();
        if n > 0 {
            return Err(EvalError::Contaminated(test.pair.0, test.pair.1, n));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub src: LanguageId,
    pub tgt: LanguageId,
    pub bleu: BleuScore,
    pub token_accuracy: f64,
    pub sentences: usize,
    pub truncated: usize,
    pub strategy: DecodeStrategy,
    pub seed: u64,
}

fn report(
    test: &ParallelCorpus,
    hyps: &[Vec<TokenId>],
    truncated: usize,
    strategy: DecodeStrategy,
    seed: u64,
) -> Result<EvalReport> {
    let refs: Vec<Vec<TokenId>> = test.rows.iter().map(|(_, y)| y.tokens.clone()).collect();
    Ok(EvalReport {
        src: test.pair.0,
        tgt: test.pair.1,
        bleu: bleu(hyps, &refs)?,
        token_accuracy: token_accuracy(hyps, &refs)?,
        sentences: refs.len(),
        truncated,
        strategy,
        seed,
    })
}

/// Decodes the sources of `test` into its target language. Returns the
/// tokens and whether the decode hit `max_len`.
pub fn decode_corpus(
    params: &ModelParams,
    test: &ParallelCorpus,
    strategy: DecodeStrategy,
    max_len: usize,
    exec: Exec,
) -> Result<Vec<(Vec<TokenId>, bool)>> {
    let srcs: Vec<Sentence> = test.rows.iter().map(|(x, _)| x.clone()).collect();
    let tgt = test.pair.1;
    Ok(match strategy {
        DecodeStrategy::Greedy => {
            greedy_decode_batch(params, &srcs, &vec![tgt; srcs.len()], max_len, exec)?
                .into_iter()
                .map(|d| (d.tokens, d.truncated))
                .collect()
        }
        DecodeStrategy::Beam(k) => exec
            .map(&srcs, |x| beam_decode(params, x, tgt, k, max_len))
            .into_iter()
            .map(|b| b.map(|b| (b.best.tokens, b.best.truncated)))
            .collect::<Result<_, ModelError>>()?,
    })
}

/// Decodes the sources of `test` with the model and scores against its
/// targets. Truncated outputs are scored as they are.
pub fn eval_direction(
    params: &ModelParams,
    test: &ParallelCorpus,
    strategy: DecodeStrategy,
    max_len: usize,
    exec: Exec,
    seed: u64,
) -> Result<EvalReport> {
    let out = decode_corpus(params, test, strategy, max_len, exec)?;
    let truncated = out.iter().filter(|(_, t)| *t).count();
    let hyps: Vec<Vec<TokenId>> = out.into_iter().map(|(h, _)| h).collect();
    report(test, &hyps, truncated, strategy, seed)
}

/// Scores any [`Translator`]; rows it cannot translate count as empty
/// hypotheses.
pub fn eval_translator<T: Translator + ?Sized>(
    tr: &T,
    test: &ParallelCorpus,
    seed: u64,
) -> Result<EvalReport> {
    let srcs: Vec<Sentence> = test.rows.iter().map(|(x, _)| x.clone()).collect();
    let out = tr.translate(&srcs, test.pair.1)?;
    let truncated = out.iter().filter(|h| h.is_none()).count();
    let hyps: Vec<Vec<TokenId>> = out
        .into_iter()
        .map(|h| h.map(|s| s.tokens).unwrap_or_default())
        .collect();
    report(test, &hyps, truncated, DecodeStrategy::Greedy, seed)
}

/// Median of a non-empty sample; the mean of the middle pair for even sizes.
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub config: String,
    /// Median BLEU per direction, in the table's direction order.
    pub bleu: Vec<f64>,
    /// BLEU per seed, then per direction.
    pub per_seed: Vec<Vec<f64>>,
}

/// Configurations by directions, median BLEU over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub directions: Vec<Direction>,
    pub seeds: Vec<u64>,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    /// Builds the table from `(config, reports of one seed)` entries. Rows
    /// are sorted by configuration name; missing directions give NaN.
    pub fn from_reports(
        directions: &[Direction],
        seeds: &[u64],
        runs: &[(String, Vec<EvalReport>)],
    ) -> Self {
        let mut by_config: std::collections::BTreeMap<&str, Vec<Vec<f64>>> = Default::default();
        for (name, reports) in runs {
            let row = directions
                .iter()
                .map(|&(s, t)| {
                    reports
                        .iter()
                        .find(|r| r.src == s && r.tgt == t)
                        .map_or(f64::NAN, |r| r.bleu.score)
                })
                .collect();
            by_config.entry(name).or_default().push(row);
        }
        let rows = by_config
            .into_iter()
            .map(|(config, per_seed)| ComparisonRow {
                config: config.to_string(),
                bleu: (0..directions.len())
                    .map(|d| median(&per_seed.iter().map(|r| r[d]).collect::<Vec<_>>()))
                    .collect(),
                per_seed,
            })
            .collect();
        Self {
            directions: directions.to_vec(),
            seeds: seeds.to_vec(),
            rows,
        }
    }

    pub fn get(&self, config: &str, d: Direction) -> Option<f64> {
        let j = self.directions.iter().position(|&x| x == d)?;
        self.rows.iter().find(|r| r.config == config).map(|r| r.bleu[j])
    }

    fn headers(&self) -> Vec<String> {
        std::iter::once("config".to_string())
            .chain(self.directions.iter().map(|(s, t)| format!("{s}->{t}")))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut cells = vec![self.headers()];
        for r in &self.rows {
            cells.push(
                std::iter::once(r.config.clone())
                    .chain(r.bleu.iter().map(|b| format!("{b:.2}")))
                    .collect(),
            );
        }
        let widths: Vec<usize> = (0..cells[0].len())
            .map(|j| cells.iter().map(|row| row[j].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (c, &w))| if j == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = self.headers().join("\t");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.config);
            for b in &r.bleu {
                let _ = write!(out, "\t{b:.4}");
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::synth::{gen_corpora, Family, FamilySpec};
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_hand_example() {
        let b = bleu(&[words("a b c d")], &[words("a b c d e")]).unwrap();
        assert_eq!(b.precisions, [1.0; 4]);
        assert!((b.bp - (-0.25f64).exp()).abs() < 1e-12);
        assert!((b.score - 77.88).abs() < 0.01, "{}", b.score);
    }

    #[test]
    fn bleu_extremes() {
        let h = vec![words("a b c d e"), words("x y z w")];
        assert!((bleu(&h, &h).unwrap().score - 100.0).abs() < 1e-9);
        let b = bleu(&[words("p q r s")], &[words("a b c d")]).unwrap();
        assert_eq!(b.score, 0.0);
        assert!(matches!(bleu::<Vec<&str>, &str>(&[], &[]), Err(EvalError::Empty)));
        assert!(matches!(
            bleu(&h, &h[..1]),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn clipping_limits_repeated_ngrams() {
        let b = bleu(&[words("the the the the")], &[words("the cat sat on")]).unwrap();
        assert_eq!(b.precisions[0], 0.25);
    }

    #[test]
    fn token_accuracy_examples() {
        assert_eq!(token_accuracy(&[words("a b")], &[words("a c d")]).unwrap(), 1.0 / 3.0);
        let h = vec![words("a b c")];
        assert_eq!(token_accuracy(&h, &h).unwrap(), 1.0);
        assert_eq!(token_accuracy(&[words("x y")], &[words("a b")]).unwrap(), 0.0);
    }

    #[test]
    fn smoothed_sentence_bleu_is_positive_on_partial_matches() {
        assert!(sentence_bleu(&words("a b x d"), &words("a b c d")) > 0.0);
        assert!((sentence_bleu(&words("a b c d"), &words("a b c d")) - 100.0).abs() < 1e-9);
    }

    fn corpus() -> impl Strategy<Value = (Vec<Vec<u8>>, Vec<Vec<u8>>)> {
        (1usize..8).prop_flat_map(|n| {
            (
                prop::collection::vec(prop::collection::vec(0u8..6, 4..10), n),
                prop::collection::vec(prop::collection::vec(0u8..6, 4..10), n),
            )
        })
    }

    proptest! {
        #[test]
        fn bleu_is_order_invariant_and_bounded((h, r) in corpus(), rot in 0usize..8) {
            let b = bleu(&h, &r).unwrap();
            prop_assert!((0.0..=100.0).contains(&b.score));
            prop_assert!(b.bp <= 1.0);
            if b.score > 0.0 {
                let gm = b.precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
                prop_assert!((b.score - 100.0 * b.bp * gm.exp()).abs() < 1e-9);
            }
            let k = rot % h.len();
            let (mut h2, mut r2) = (h.clone(), r.clone());
            h2.rotate_left(k);
            r2.rotate_left(k);
            prop_assert!((bleu(&h2, &r2).unwrap().score - b.score).abs() < 1e-9);
        }

        #[test]
        fn bleu_of_a_corpus_with_itself_is_100((h, _) in corpus()) {
            prop_assert!((bleu(&h, &h).unwrap().score - 100.0).abs() < 1e-9);
        }
    }

    fn family_and_test() -> (Family, crate::synth::Corpora) {
        let f = Family::build(&FamilySpec::default(), 4).unwrap();
        let l = LanguageId;
        let c = gen_corpora(&f, 30, &[(l(0), l(1))], 20, &[(l(0), l(2))], 40, 8).unwrap();
        (f, c)
    }

    #[test]
    fn oracle_scores_100_and_untrained_model_is_near_chance() {
        let (f, c) = family_and_test();
        let test = &c.test[0];
        for t in [test.clone(), test.reversed()] {
            let r = eval_translator(&f, &t, 0).unwrap();
            assert!((r.bleu.score - 100.0).abs() < 1e-9);
            assert_eq!(r.token_accuracy, 1.0);
        }
        let p = init_model(
            &ModelConfig {
                layers: 1,
                hidden: 16,
                heads: 2,
                max_len: 16,
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap();
        let r = eval_direction(&p, test, DecodeStrategy::Greedy, 16, Exec::auto(), 0).unwrap();
        assert_eq!(r.sentences, 40);
        assert!(r.token_accuracy < 0.05, "{}", r.token_accuracy);
    }

    #[test]
    fn contamination_is_a_hard_error() {
        let (_, c) = family_and_test();
        let idx = ContentIndex::new(&c.mono, &c.parallel);
        idx.check(&c.test[0]).unwrap();
        let leaked = ContentIndex::new(&c.mono, &[c.test[0].clone()]);
        assert!(matches!(
            leaked.check(&c.test[0]),
            Err(EvalError::Contaminated(_, _, 40))
        ));
    }

    #[test]
    fn comparison_table_is_sorted_and_takes_medians() {
        let l = LanguageId;
        let mk = |s: f64| EvalReport {
            src: l(0),
            tgt: l(2),
            bleu: BleuScore {
                score: s,
                precisions: [0.0; 4],
                bp: 1.0,
                hyp_len: 0,
                ref_len: 0,
            },
            token_accuracy: 0.0,
            sentences: 1,
            truncated: 0,
            strategy: DecodeStrategy::Greedy,
            seed: 0,
        };
        let runs = vec![
            ("w-para".to_string(), vec![mk(3.0)]),
            ("unmt-only".to_string(), vec![mk(1.0)]),
            ("w-para".to_string(), vec![mk(9.0)]),
            ("w-para".to_string(), vec![mk(5.0)]),
        ];
        let t = ComparisonTable::from_reports(&[(l(0), l(2))], &[1, 2, 3], &runs);
        assert_eq!(t.rows[0].config, "unmt-only");
        assert_eq!(t.get("w-para", (l(0), l(2))), Some(5.0));
        let text = t.to_text();
        assert!(text.lines().next().unwrap().starts_with("config"));
        assert_eq!(t.to_tsv().lines().count(), 3);
        assert_eq!(t, ComparisonTable::from_reports(&[(l(0), l(2))], &[1, 2, 3], &runs));
    }
}
