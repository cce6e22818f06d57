//! Greedy and beam decoding in inference mode.

use crate::autograd::Graph;
use crate::exec::Exec;
use crate::tensor::Tensor;
use crate::text::{LanguageId, Sentence, TokenId, BOS, EOS};

use super::cache::DecodeCache;
use super::{encoder_input, ModelError, ModelParams, Net, Result};

/// Encoder states for a set of sources, reused across decoding steps.
struct Memory {
    states: Tensor,
    lens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<TokenId>,
    /// Sum of token log-probabilities, including eos when present.
    pub logprob: f64,
    /// Hit `max_len` without producing eos.
    pub truncated: bool,
}

impl Decoded {
    pub fn into_sentence(self, lang: LanguageId) -> Sentence {
        Sentence::new(self.tokens, lang)
    }
}

impl ModelParams {
    fn encode_sources(&self, srcs: &[&Sentence], tgt_langs: &[LanguageId]) -> Result<Memory> {
        for (x, &l) in srcs.iter().zip(tgt_langs) {
            self.check_len(x.len())?;
            self.check_lang(x.lang)?;
            self.check_lang(l)?;
        }
        let toks: Vec<&[TokenId]> = srcs.iter().map(|x| x.tokens.as_slice()).collect();
        let src_langs: Vec<LanguageId> = srcs.iter().map(|x| x.lang).collect();
        let (ids, lens, s) = encoder_input(&toks, &src_langs, tgt_langs);
        let mut g = Graph::with_exec(Exec::Sequential);
        let vars = self.attach(&mut g, false);
        let mut net = Net {
            g: &mut g,
            p: &vars,
            cfg: &self.config,
            rng: None,
        };
        let m = net.encode(&ids, &lens, s)?;
        Ok(Memory {
            states: g.value(m).clone(),
            lens,
        })
    }

    /// A decoding cache over the encoded sources.
    fn start<'p>(&'p self, mem: Memory, max_len: usize) -> DecodeCache<'p> {
        DecodeCache::new(self, &mem.states, mem.lens, max_len + 1)
    }

    /// Tokens a decoder may emit at `step`: content tokens, plus eos after
    /// the first position.
    fn allowed(&self, tok: usize, step: usize) -> bool {
        tok >= self.config.content_offset() as usize || (tok == EOS as usize && step > 0)
    }
}

/// Greedy decoding of several sources at once. Ties go to the lowest token id.
pub fn greedy_decode_batch(
    params: &ModelParams,
    srcs: &[Sentence],
    tgt_langs: &[LanguageId],
    max_len: usize,
    exec: Exec,
) -> Result<Vec<Decoded>> {
    const CHUNK: usize = 64;
    if srcs.len() != tgt_langs.len() {
        return Err(ModelError::InvalidConfig(
            "one target language per source required".into(),
        ));
    }
    let chunks: Vec<(usize, usize)> = (0..srcs.len())
        .step_by(CHUNK)
        .map(|a| (a, (a + CHUNK).min(srcs.len())))
        .collect();
    let parts = exec.map(&chunks, |&(a, b)| {
        greedy_chunk(params, &srcs[a..b], &tgt_langs[a..b], max_len)
    });
    let mut out = Vec::with_capacity(srcs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

fn greedy_chunk(
    params: &ModelParams,
    srcs: &[Sentence],
    tgt_langs: &[LanguageId],
    max_len: usize,
) -> Result<Vec<Decoded>> {
    let refs: Vec<&Sentence> = srcs.iter().collect();
    let max_len = max_len.clamp(1, params.config.max_len);
    let mut cache = params.start(params.encode_sources(&refs, tgt_langs)?, max_len);
    let mut out: Vec<Decoded> = (0..srcs.len())
        .map(|_| Decoded {
            tokens: Vec::new(),
            logprob: 0.0,
            truncated: true,
        })
        .collect();
    let mut active: Vec<usize> = (0..srcs.len()).collect();
    for step in 0..max_len {
        if active.is_empty() {
            break;
        }
        let last: Vec<TokenId> = active
            .iter()
            .map(|&i| out[i].tokens.last().copied().unwrap_or(BOS))
            .collect();
        let dists = cache.step(&active, &last);
        let mut still = Vec::with_capacity(active.len());
        for (&i, lp) in active.iter().zip(&dists) {
            let mut best = None;
            for (tok, &x) in lp.iter().enumerate() {
                if params.allowed(tok, step) && best.is_none_or(|(_, b)| x > b) {
                    best = Some((tok, x));
                }
            }
            let (tok, x) = best.expect("content tokens are always allowed");
            out[i].logprob += x;
            if tok == EOS as usize {
                out[i].truncated = false;
            } else {
                out[i].tokens.push(tok as TokenId);
                still.push(i);
            }
        }
        active = still;
    }
    Ok(out)
}

pub fn greedy_decode(
    params: &ModelParams,
    src: &Sentence,
    tgt_lang: LanguageId,
    max_len: usize,
) -> Result<Decoded> {
    let mut out = greedy_chunk(params, std::slice::from_ref(src), &[tgt_lang], max_len)?;
    Ok(out.remove(0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<TokenId>,
    pub logprob: f64,
    /// `logprob` divided by the number of scored positions.
    pub score: f64,
    pub truncated: bool,
}

impl Hypothesis {
    fn from_decoded(d: Decoded) -> Self {
        let n = d.tokens.len() + usize::from(!d.truncated);
        Self {
            score: d.logprob / n as f64,
            tokens: d.tokens,
            logprob: d.logprob,
            truncated: d.truncated,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    pub best: Hypothesis,
    /// Distinct hypotheses, best first.
    pub nbest: Vec<Hypothesis>,
}

/// Plain beam search ranked by cumulative log-probability while expanding
/// and by length-normalized score among finished hypotheses. Returns the
/// distinct hypotheses, best first.
pub fn beam_search(
    params: &ModelParams,
    src: &Sentence,
    tgt_lang: LanguageId,
    beam_size: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    if beam_size == 0 {
        return Err(ModelError::InvalidConfig("beam_size must be >= 1".into()));
    }
    let max_len = max_len.clamp(1, params.config.max_len);
    let mut cache = params.start(params.encode_sources(&[src], &[tgt_lang])?, max_len);
    let mut live: Vec<(Vec<TokenId>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..max_len {
        let rows: Vec<usize> = (0..live.len()).collect();
        let last: Vec<TokenId> = live
            .iter()
            .map(|(t, _)| t.last().copied().unwrap_or(BOS))
            .collect();
        let dists = cache.step(&rows, &last);
        // (score, hypothesis index, token): sorting gives ties to earlier
        // hypotheses and lower ids, as greedy does.
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (h, lp) in dists.iter().enumerate() {
            for (tok, &x) in lp.iter().enumerate() {
                if params.allowed(tok, step) {
                    cands.push((live[h].1 + x, h, tok));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(beam_size);
        let mut parents = Vec::with_capacity(beam_size);
        for (rank, &(lp, h, tok)) in cands.iter().enumerate() {
            if tok == EOS as usize {
                if rank < beam_size {
                    finished.push(Hypothesis::from_decoded(Decoded {
                        tokens: live[h].0.clone(),
                        logprob: lp,
                        truncated: false,
                    }));
                }
            } else if next.len() < beam_size {
                let mut t = live[h].0.clone();
                t.push(tok as TokenId);
                next.push((t, lp));
                parents.push(h);
            }
            if next.len() == beam_size && rank + 1 >= beam_size {
                break;
            }
        }
        live = next;
        if finished.len() >= beam_size || live.is_empty() {
            break;
        }
        cache = cache.fork(&parents);
    }
    let mut pool = finished;
    if pool.is_empty() {
        pool.extend(live.into_iter().map(|(tokens, logprob)| {
            Hypothesis::from_decoded(Decoded {
                tokens,
                logprob,
                truncated: true,
            })
        }));
    }
    Ok(rank(pool))
}

fn rank(mut pool: Vec<Hypothesis>) -> Vec<Hypothesis> {
    pool.sort_by(|a, b| {
        a.truncated
            .cmp(&b.truncated)
            .then(b.score.total_cmp(&a.score))
            .then(a.tokens.cmp(&b.tokens))
    });
    pool.dedup_by(|a, b| a.tokens == b.tokens && a.truncated == b.truncated);
    pool
}

/// [`beam_search`] with the greedy hypothesis added to the candidates, so
/// the best score never falls below greedy's. Width 1 is greedy decoding.
pub fn beam_decode(
    params: &ModelParams,
    src: &Sentence,
    tgt_lang: LanguageId,
    beam_size: usize,
    max_len: usize,
) -> Result<BeamResult> {
    if beam_size == 0 {
        return Err(ModelError::InvalidConfig("beam_size must be >= 1".into()));
    }
    let greedy = Hypothesis::from_decoded(greedy_decode(params, src, tgt_lang, max_len)?);
    let mut pool = if beam_size == 1 {
        Vec::new()
    } else {
        beam_search(params, src, tgt_lang, beam_size, max_len)?
    };
    pool.push(greedy);
    let nbest = rank(pool);
    Ok(BeamResult {
        best: nbest[0].clone(),
        nbest,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::overfit;
    use super::super::{init_model, ModelConfig};
    use super::*;

    fn s(tokens: &[u32], lang: u16) -> Sentence {
        Sentence::new(tokens.to_vec(), LanguageId(lang))
    }

    fn small() -> ModelParams {
        init_model(
            &ModelConfig {
                max_len: 8,
                ..ModelConfig::default()
            },
            11,
        )
        .unwrap()
    }

    #[test]
    fn greedy_is_deterministic_and_never_empty() {
        let p = small();
        let x = s(&[10, 20, 30], 0);
        let a = greedy_decode(&p, &x, LanguageId(1), 8).unwrap();
        assert_eq!(a, greedy_decode(&p, &x, LanguageId(1), 8).unwrap());
        assert!(!a.tokens.is_empty());
        assert!(a.tokens.len() <= 8);
        assert!(a.tokens.iter().all(|&t| t >= p.config.content_offset()));
    }

    #[test]
    fn batched_greedy_matches_single_and_exec_modes_agree() {
        let p = small();
        let srcs = vec![s(&[10, 20, 30], 0), s(&[40], 0), s(&[50, 51, 52, 53, 54], 2)];
        let langs = [LanguageId(1), LanguageId(2), LanguageId(0)];
        let seq = greedy_decode_batch(&p, &srcs, &langs, 8, Exec::Sequential).unwrap();
        let par = greedy_decode_batch(&p, &srcs, &langs, 8, Exec::Parallel).unwrap();
        assert_eq!(seq, par);
        for (i, x) in srcs.iter().enumerate() {
            let single = greedy_decode(&p, x, langs[i], 8).unwrap();
            assert_eq!(single.tokens, seq[i].tokens);
            assert!((single.logprob - seq[i].logprob).abs() < 1e-9);
        }
    }

    #[test]
    fn greedy_logprob_matches_score() {
        let p = small();
        let x = s(&[10, 20], 0);
        let d = greedy_decode(&p, &x, LanguageId(1), 8).unwrap();
        if !d.truncated {
            let sc = p.score(&x, &d.clone().into_sentence(LanguageId(1))).unwrap();
            assert!((sc.total - d.logprob).abs() < 1e-9);
        }
    }

    #[test]
    fn cached_steps_match_full_recompute() {
        let p = small();
        for (src, lang) in [(vec![10u32, 20, 30], 0u16), (vec![44], 2), (vec![9, 9, 9, 9, 9, 9], 1)] {
            let x = s(&src, lang);
            let d = greedy_decode(&p, &x, LanguageId(2), 6).unwrap();
            let sc = p.score(&x, &d.clone().into_sentence(LanguageId(2))).unwrap();
            let mut lp: f64 = d
                .tokens
                .iter()
                .enumerate()
                .map(|(i, &t)| sc.position_logprobs[i][t as usize])
                .sum();
            if !d.truncated {
                lp += sc.position_logprobs[d.tokens.len()][EOS as usize];
            }
            assert!((lp - d.logprob).abs() < 1e-9, "{lp} vs {}", d.logprob);
        }
    }

    #[test]
    fn beam_one_equals_greedy_and_wider_beams_do_not_lose() {
        let p = small();
        for src in [[10u32, 20, 30], [11, 12, 13], [60, 70, 80]] {
            let x = s(&src, 0);
            let g = greedy_decode(&p, &x, LanguageId(2), 8).unwrap();
            let b1 = beam_decode(&p, &x, LanguageId(2), 1, 8).unwrap();
            assert_eq!(b1.best.tokens, g.tokens);
            let greedy_score = Hypothesis::from_decoded(g).score;
            let b4 = beam_decode(&p, &x, LanguageId(2), 4, 8).unwrap();
            if !b4.best.truncated {
                assert!(b4.best.score >= greedy_score - 1e-12);
            }
            for w in b4.nbest.windows(2) {
                assert!(w[0].truncated || w[1].truncated || w[0].score >= w[1].score);
                assert_ne!(w[0].tokens, w[1].tokens);
            }
        }
    }

    #[test]
    fn trained_beam_recovers_target() {
        let mut p = small();
        let x = s(&[10, 11, 12], 0);
        let y = s(&[40, 41, 42, 43], 1);
        overfit(&mut p, &[(x.clone(), y.clone())], 120);
        let b = beam_decode(&p, &x, LanguageId(1), 3, 8).unwrap();
        assert_eq!(b.best.tokens, y.tokens);
        assert!(!b.best.truncated);
    }

    #[test]
    fn width_one_search_follows_greedy() {
        let p = small();
        for (src, lang) in [(vec![10u32, 20, 30], 0u16), (vec![44, 45], 1), (vec![70; 6], 2)] {
            let x = s(&src, lang);
            let g = greedy_decode(&p, &x, LanguageId(1), 8).unwrap();
            let b = beam_search(&p, &x, LanguageId(1), 1, 8).unwrap();
            assert_eq!(b.len(), 1);
            assert_eq!(b[0].tokens, g.tokens);
            assert_eq!(b[0].truncated, g.truncated);
            assert!((b[0].logprob - g.logprob).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_beam_is_rejected() {
        assert!(beam_decode(&small(), &s(&[10], 0), LanguageId(1), 0, 4).is_err());
    }
}
