//! Pre-training, CUNMT rounds, and checkpointable trainer state.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::model::{Checkpoint, ModelParams};
use crate::optim::{adam_step, clip_grad_norm, AdamState};
use crate::tensor::Tensor;
use crate::text::{sample_mono, sample_parallel, LanguageId, Sentence};

use super::generate::{gen_back_translation, gen_indirect_backward, gen_indirect_forward};
use super::{
    dae_rows, joint_loss, Direction, DirectionSet, GenOutput, LossReport, ModelTranslator,
    Provenance, PseudoDataPool, Result, TermBatch, TermKind, TrainConfig, TrainData, TrainError,
};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: String,
    /// Optimizer steps taken so far, including this one.
    pub step: u64,
    /// CUNMT rounds completed so far, including this one.
    pub round: u64,
    pub lr: f64,
    pub lambda_l: f64,
    pub lambda_b: f64,
    pub grad_norm: f64,
    pub generated: usize,
    pub dropped: usize,
    pub pool: PoolCounts,
    pub report: LossReport,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoolCounts {
    pub s: usize,
    pub b: usize,
    pub bi: usize,
    pub fi: usize,
}

/// Generation work for one round, sampled up front so that running the jobs
/// in any order gives the same rows.
enum Job {
    Back {
        mono_t: Vec<Sentence>,
        s: LanguageId,
    },
    IndirectBack {
        mono_t: Vec<Sentence>,
        pivot: LanguageId,
        s: LanguageId,
    },
    IndirectForward {
        sources: Vec<Sentence>,
        hints: Option<Vec<Sentence>>,
        pivot: LanguageId,
        t: LanguageId,
    },
}

impl Job {
    fn run(&self, tr: &ModelTranslator<'_>, step: u64) -> Result<GenOutput> {
        match self {
            Job::Back { mono_t, s } => gen_back_translation(tr, mono_t, *s, step),
            Job::IndirectBack { mono_t, pivot, s } => {
                gen_indirect_backward(tr, mono_t, *pivot, *s, step)
            }
            Job::IndirectForward {
                sources,
                hints,
                pivot,
                t,
            } => gen_indirect_forward(tr, sources, hints.as_deref(), *pivot, *t, step),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RoundTerms {
    pub terms: Vec<TermBatch>,
    pub lambda_l: f64,
    pub generated: usize,
    pub dropped: usize,
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub round: u64,
    pub pool: PseudoDataPool,
    pub exec: Exec,
}

fn sample_direction<R: Rng + ?Sized>(
    data: &TrainData,
    d: Direction,
    n: usize,
    rng: &mut R,
) -> Result<Vec<(Sentence, Sentence)>> {
    let (corpus, reversed) = data
        .parallel_rows(d)
        .ok_or(TrainError::NotSupervised(d.0, d.1))?;
    let rows = sample_parallel(corpus, n, rng)?;
    Ok(if reversed {
        rows.into_iter().map(|(a, b)| (b, a)).collect()
    } else {
        rows
    })
}

fn mono<'a>(data: &'a TrainData, lang: LanguageId) -> Result<&'a crate::text::MonoCorpus> {
    data.mono(lang)
        .ok_or_else(|| TrainError::Directions(format!("no monolingual corpus for {lang}")))
}

impl TrainState {
    pub fn new(params: ModelParams, cfg: &TrainConfig, seed: u64, exec: Exec) -> Self {
        Self {
            adam: AdamState::new(&params.tensors, cfg.adam),
            params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
            round: 0,
            pool: PseudoDataPool::default(),
            exec,
        }
    }

    fn optimize(&mut self, terms: &[TermBatch], cfg: &TrainConfig) -> Result<(LossReport, f64, f64)> {
        let rng: Option<&mut dyn RngCore> = if self.params.config.dropout > 0.0 {
            Some(&mut self.rng)
        } else {
            None
        };
        let (report, grads) = joint_loss(&self.params, terms, rng, true)?;
        let Some(mut grads) = grads else {
            return Ok((report, 0.0, 0.0));
        };
        let norm = match cfg.clip_norm {
            Some(max) => clip_grad_norm(&mut grads, max),
            None => clip_grad_norm(&mut grads, f64::INFINITY),
        };
        let lr = cfg.schedule.lr_at(self.step + 1);
        adam_step(&mut self.params.tensors, &grads, &mut self.adam, lr)?;
        self.step += 1;
        Ok((report, lr, norm))
    }

    fn supervised_terms(&mut self, data: &TrainData, dirs: &DirectionSet, cfg: &TrainConfig) -> Result<Vec<TermBatch>> {
        dirs.supervised
            .iter()
            .map(|&d| {
                Ok(TermBatch {
                    kind: TermKind::Supervised,
                    direction: d,
                    pivot: None,
                    weight: 1.0,
                    rows: sample_direction(data, d, cfg.batch_size, &mut self.rng)?,
                })
            })
            .collect()
    }

    fn dae_terms(
        &mut self,
        data: &TrainData,
        dirs: &DirectionSet,
        cfg: &TrainConfig,
        lambda_l: f64,
    ) -> Result<Vec<TermBatch>> {
        if lambda_l <= 0.0 {
            return Ok(Vec::new());
        }
        dirs.languages()
            .into_iter()
            .map(|lang| {
                let xs = sample_mono(mono(data, lang)?, cfg.batch_size, &mut self.rng)?;
                Ok(TermBatch {
                    kind: TermKind::Denoising,
                    direction: (lang, lang),
                    pivot: None,
                    weight: lambda_l,
                    rows: dae_rows(&xs, &cfg.noise, &mut self.rng),
                })
            })
            .collect()
    }

    fn pool_counts(&self) -> PoolCounts {
        PoolCounts {
            s: self.pool.count(Provenance::S),
            b: self.pool.count(Provenance::B),
            bi: self.pool.count(Provenance::Bi),
            fi: self.pool.count(Provenance::Fi),
        }
    }

    /// One pre-training step on `lambda_l * sum L_DAE + sum_E L^S`.
    pub fn pretrain_step(&mut self, data: &TrainData, dirs: &DirectionSet, cfg: &TrainConfig) -> Result<MetricsRecord> {
        let mut terms = self.supervised_terms(data, dirs, cfg)?;
        terms.extend(self.dae_terms(data, dirs, cfg, cfg.lambda_l)?);
        let (report, lr, grad_norm) = self.optimize(&terms, cfg)?;
        Ok(MetricsRecord {
            phase: "pretrain".into(),
            step: self.step,
            round: self.round,
            lr,
            lambda_l: cfg.lambda_l,
            lambda_b: cfg.lambda_b,
            grad_norm,
            generated: 0,
            dropped: 0,
            pool: self.pool_counts(),
            report,
        })
    }

    pub fn pretrain(
        &mut self,
        data: &TrainData,
        dirs: &DirectionSet,
        cfg: &TrainConfig,
        steps: u64,
        sink: &mut dyn FnMut(&MetricsRecord) -> std::io::Result<()>,
    ) -> Result<()> {
        dirs.validate(data)?;
        for _ in 0..steps {
            let rec = self.pretrain_step(data, dirs, cfg)?;
            sink(&rec).map_err(crate::model::ModelError::from)?;
        }
        Ok(())
    }

    fn plan_jobs(&mut self, data: &TrainData, dirs: &DirectionSet, cfg: &TrainConfig) -> Result<Vec<Job>> {
        let n = cfg.gen_batch_size;
        let mut jobs = Vec::new();
        for &(s, t) in &dirs.unsupervised {
            jobs.push(Job::Back {
                mono_t: sample_mono(mono(data, t)?, n, &mut self.rng)?,
                s,
            });
        }
        let plan = if self.round >= cfg.indirect_from_round {
            cfg.indirect_plan(dirs)
        } else {
            Vec::new()
        };
        for ((s, t), pivot) in plan {
            if cfg.backward {
                jobs.push(Job::IndirectBack {
                    mono_t: sample_mono(mono(data, t)?, n, &mut self.rng)?,
                    pivot,
                    s,
                });
            }
            if cfg.forward {
                let (sources, hints) = if data.parallel_rows((s, pivot)).is_some() {
                    let rows = sample_direction(data, (s, pivot), n, &mut self.rng)?;
                    let (a, b): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
                    (a, Some(b))
                } else {
                    (sample_mono(mono(data, s)?, n, &mut self.rng)?, None)
                };
                jobs.push(Job::IndirectForward {
                    sources,
                    hints,
                    pivot,
                    t,
                });
            }
        }
        Ok(jobs)
    }

    fn pool_terms(&mut self, dirs: &DirectionSet, cfg: &TrainConfig) -> Vec<TermBatch> {
        let mut keys: Vec<(TermKind, Provenance, Direction, Option<LanguageId>, f64)> = dirs
            .unsupervised
            .iter()
            .map(|&d| (TermKind::BackTranslation, Provenance::B, d, None, cfg.lambda_b))
            .collect();
        let plan = if self.round >= cfg.indirect_from_round {
            cfg.indirect_plan(dirs)
        } else {
            Vec::new()
        };
        for (d, j) in plan {
            let w = cfg.lambda_pivot(j);
            if cfg.backward {
                keys.push((TermKind::IndirectBackward, Provenance::Bi, d, Some(j), w));
            }
            if cfg.forward {
                keys.push((TermKind::IndirectForward, Provenance::Fi, d, Some(j), w));
            }
        }
        let mut terms = Vec::new();
        for (kind, tag, d, pivot, weight) in keys {
            let idx = self.pool.select(tag, d, pivot);
            if idx.is_empty() || weight <= 0.0 {
                continue;
            }
            let rows = (0..cfg.batch_size)
                .map(|_| {
                    let r = &self.pool.rows[idx[self.rng.random_range(0..idx.len())]];
                    (r.src.clone(), r.tgt.clone())
                })
                .collect();
            terms.push(TermBatch {
                kind,
                direction: d,
                pivot,
                weight,
                rows,
            });
        }
        terms
    }

    /// The terms of the next round: clears the pool on refresh, generates B,
    /// B^i and F^i rows from a snapshot of the current parameters, merges them
    /// into the pool and samples every term batch. Parameters are untouched.
    pub fn round_terms(&mut self, data: &TrainData, dirs: &DirectionSet, cfg: &TrainConfig) -> Result<RoundTerms> {
        if self.round % cfg.refresh_rounds() == 0 {
            self.pool.clear();
        }
        let lambda_l = cfg.lambda_l_at(self.round);
        let jobs = self.plan_jobs(data, dirs, cfg)?;
        let tr = ModelTranslator {
            params: &self.params,
            strategy: cfg.decode,
            max_len: cfg.gen_max_len,
            exec: Exec::Sequential,
        };
        let step = self.step;
        let outputs = self.exec.map(&jobs, |j| j.run(&tr, step));
        let (mut generated, mut dropped) = (0, 0);
        for out in outputs {
            let out = out?;
            generated += out.rows.len();
            dropped += out.dropped;
            self.pool.extend(out.rows);
        }

        let mut terms = self.supervised_terms(data, dirs, cfg)?;
        terms.extend(self.pool_terms(dirs, cfg));
        terms.extend(self.dae_terms(data, dirs, cfg, lambda_l)?);
        Ok(RoundTerms {
            terms,
            lambda_l,
            generated,
            dropped,
        })
    }

    /// One round: [`TrainState::round_terms`], then one optimizer step on
    /// their joint loss.
    pub fn cunmt_round(&mut self, data: &TrainData, dirs: &DirectionSet, cfg: &TrainConfig) -> Result<MetricsRecord> {
        let rt = self.round_terms(data, dirs, cfg)?;
        let (report, lr, grad_norm) = self.optimize(&rt.terms, cfg)?;
        self.round += 1;
        Ok(MetricsRecord {
            phase: "cunmt".into(),
            step: self.step,
            round: self.round,
            lr,
            lambda_l: rt.lambda_l,
            lambda_b: cfg.lambda_b,
            grad_norm,
            generated: rt.generated,
            dropped: rt.dropped,
            pool: self.pool_counts(),
            report,
        })
    }

    /// Packs parameters, optimizer moments, RNG position and pool.
    pub fn to_checkpoint(&self, vocab_hash: &str) -> Checkpoint {
        let mut more = Vec::new();
        for (i, n) in self.params.names.iter().enumerate() {
            more.push((format!("adam_m/{n}"), self.adam.m[i].clone()));
            more.push((format!("adam_v/{n}"), self.adam.v[i].clone()));
        }
        let extra = serde_json::json!({
            "round": self.round,
            "adam_step": self.adam.step,
            "adam": self.adam.config,
            "rng_seed": hex::encode(self.rng.get_seed()),
            "rng_stream": self.rng.get_stream(),
            "rng_word_pos": self.rng.get_word_pos().to_string(),
            "pool": self.pool,
        });
        Checkpoint::new(&self.params, vocab_hash, self.step, extra, more)
    }

    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        config: &crate::model::ModelConfig,
        vocab_hash: &str,
        exec: Exec,
    ) -> Result<Self> {
        let params = ckpt.params(config, vocab_hash)?;
        let bad = |m: &str| TrainError::Model(crate::model::ModelError::Checkpoint(m.into()));
        let x = &ckpt.header.extra;
        let get = |k: &str| x.get(k).ok_or_else(|| bad(&format!("missing trainer field {k}")));
        let seed_hex = get("rng_seed")?.as_str().ok_or_else(|| bad("rng_seed"))?;
        let seed: [u8; 32] = hex::decode(seed_hex)
            .ok()
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| bad("rng_seed"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(get("rng_stream")?.as_u64().ok_or_else(|| bad("rng_stream"))?);
        let pos: u128 = get("rng_word_pos")?
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("rng_word_pos"))?;
        rng.set_word_pos(pos);
        let m: Vec<Tensor> = ckpt.with_prefix("adam_m/");
        let v: Vec<Tensor> = ckpt.with_prefix("adam_v/");
        if m.len() != params.tensors.len() || v.len() != params.tensors.len() {
            return Err(bad("optimizer moments do not match parameters"));
        }
        let adam = AdamState {
            step: get("adam_step")?.as_u64().ok_or_else(|| bad("adam_step"))?,
            m,
            v,
            config: serde_json::from_value(get("adam")?.clone()).map_err(|_| bad("adam"))?,
        };
        let pool: PseudoDataPool =
            serde_json::from_value(get("pool")?.clone()).map_err(|_| bad("pool"))?;
        Ok(Self {
            params,
            adam,
            rng,
            step: ckpt.header.step,
            round: get("round")?.as_u64().ok_or_else(|| bad("round"))?,
            pool,
            exec,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::optim::LrSchedule;
    use crate::synth::{gen_corpora, Family, FamilySpec};
    use crate::text::NoiseConfig;
    use crate::train::PivotWeight;

    fn l(i: u16) -> LanguageId {
        LanguageId(i)
    }

    fn setup() -> (TrainData, ModelParams) {
        let f = Family::build(&FamilySpec::default(), 11).unwrap();
        let c = gen_corpora(&f, 40, &[(l(0), l(1))], 30, &[], 0, 2).unwrap();
        let data = TrainData {
            mono: c.mono,
            parallel: c.parallel,
        };
        let cfg = ModelConfig {
            layers: 1,
            hidden: 16,
            heads: 2,
            ffn_mult: 2,
            max_len: 12,
            ..ModelConfig::default()
        };
        (data, init_model(&cfg, 5).unwrap())
    }

    fn dirs() -> DirectionSet {
        DirectionSet {
            supervised: vec![(l(0), l(1)), (l(1), l(0))],
            unsupervised: vec![(l(0), l(2)), (l(2), l(0)), (l(1), l(2)), (l(2), l(1))],
        }
    }

    fn tcfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            gen_batch_size: 2,
            epoch_size: 12,
            gen_max_len: 10,
            lambda_l_decay_rounds: 2,
            indirect_directions: Some(vec![(l(0), l(2)), (l(2), l(0))]),
            schedule: LrSchedule {
                warmup_steps: 2,
                peak_lr: 1e-3,
            },
            ..TrainConfig::default()
        }
    }

    fn single(p: &ModelParams, t: &TermBatch) -> f64 {
        let unit = TermBatch {
            weight: 1.0,
            ..t.clone()
        };
        joint_loss(p, &[unit], None, false).unwrap().0.total
    }

    #[test]
    fn joint_loss_is_the_weighted_sum_of_separate_terms() {
        let (data, p) = setup();
        let mut st = TrainState::new(p.clone(), &tcfg(), 1, Exec::Sequential);
        let cfg = TrainConfig {
            lambda_l: 0.3,
            ..tcfg()
        };
        let d = dirs();
        let mut terms = st.supervised_terms(&data, &d, &cfg).unwrap();
        terms.extend(st.dae_terms(&data, &d, &cfg, cfg.lambda_l).unwrap());
        // A back-translation term built from fake rows; the loss does not care
        // where rows came from.
        let fake = sample_mono(data.mono(l(2)).unwrap(), 3, &mut st.rng).unwrap();
        let src = sample_mono(data.mono(l(0)).unwrap(), 3, &mut st.rng).unwrap();
        terms.push(TermBatch {
            kind: TermKind::BackTranslation,
            direction: (l(0), l(2)),
            pivot: None,
            weight: 0.7,
            rows: src.into_iter().zip(fake).collect(),
        });
        let (report, grads) = joint_loss(&p, &terms, None, false).unwrap();
        assert!(grads.is_none());
        let expected: f64 = terms.iter().map(|t| t.weight * single(&p, t)).sum();
        assert!((report.total - expected).abs() < 1e-9, "{} vs {expected}", report.total);
        assert!((report.weighted_sum() - report.total).abs() < 1e-9);
        for (t, r) in terms.iter().zip(&report.terms) {
            assert!((single(&p, t) - r.loss).abs() < 1e-9);
        }
    }

    #[test]
    fn without_unsupervised_directions_a_round_is_supervised_training() {
        let (data, p) = setup();
        let d = DirectionSet {
            supervised: dirs().supervised,
            unsupervised: vec![],
        };
        let cfg = TrainConfig {
            lambda_l: 0.0,
            indirect_directions: None,
            ..tcfg()
        };
        let mut st = TrainState::new(p, &cfg, 3, Exec::Sequential);
        let rec = st.cunmt_round(&data, &d, &cfg).unwrap();
        assert_eq!(rec.generated, 0);
        assert!(rec.report.terms.iter().all(|t| t.kind == TermKind::Supervised));
        assert_eq!(rec.report.terms.len(), 2);
    }

    #[test]
    fn without_supervision_a_round_is_back_translation_plus_denoising() {
        let (data, p) = setup();
        let d = DirectionSet {
            supervised: vec![],
            unsupervised: vec![(l(0), l(1)), (l(1), l(0))],
        };
        let cfg = TrainConfig {
            lambda_indirect: vec![PivotWeight {
                pivot: l(2),
                lambda: 0.0,
            }],
            indirect_directions: None,
            ..tcfg()
        };
        let mut st = TrainState::new(p, &cfg, 3, Exec::Sequential);
        let rec = st.cunmt_round(&data, &d, &cfg).unwrap();
        let kinds: Vec<TermKind> = rec.report.terms.iter().map(|t| t.kind).collect();
        assert!(kinds
            .iter()
            .all(|k| matches!(k, TermKind::BackTranslation | TermKind::Denoising)));
        assert!(kinds.contains(&TermKind::Denoising));
        assert_eq!(rec.pool.bi + rec.pool.fi, 0);
    }

    #[test]
    fn indirect_rows_are_tagged_and_routed_through_the_pivot() {
        let (data, p) = setup();
        let cfg = tcfg();
        let mut st = TrainState::new(p, &cfg, 4, Exec::auto());
        let rec = st.cunmt_round(&data, &dirs(), &cfg).unwrap();
        assert_eq!(rec.generated + rec.dropped, 4 * 2 + 2 * 2 * 2);
        for r in &st.pool.rows {
            match r.tag {
                Provenance::B => assert!(r.pivot.is_none()),
                Provenance::Bi | Provenance::Fi => {
                    assert_eq!(r.pivot, Some(l(1)));
                    assert!([(l(0), l(2)), (l(2), l(0))].contains(&r.direction()));
                }
                Provenance::S => panic!("true parallel rows never enter the pool"),
            }
        }
    }

    #[test]
    fn denoising_weight_reaches_zero_and_stays_there() {
        let (data, p) = setup();
        let cfg = tcfg();
        let mut st = TrainState::new(p, &cfg, 4, Exec::Sequential);
        let mut ls = Vec::new();
        for _ in 0..3 {
            let rec = st.cunmt_round(&data, &dirs(), &cfg).unwrap();
            ls.push((rec.lambda_l, rec.report.of(TermKind::Denoising).count()));
        }
        assert_eq!(ls[0].0, 1.0);
        assert_eq!(ls[1].0, 0.5);
        assert_eq!(ls[2], (0.0, 0));
        assert!(ls[1].1 > 0);
    }

    #[test]
    fn runs_replay_exactly_and_resume_from_checkpoints() {
        let (data, p) = setup();
        let cfg = TrainConfig {
            noise: NoiseConfig::default(),
            ..tcfg()
        };
        let run = |exec: Exec, rounds: usize| {
            let mut st = TrainState::new(p.clone(), &cfg, 9, exec);
            st.pretrain(&data, &dirs(), &cfg, 2, &mut |_| Ok(())).unwrap();
            let recs: Vec<MetricsRecord> = (0..rounds)
                .map(|_| st.cunmt_round(&data, &dirs(), &cfg).unwrap())
                .collect();
            (st, recs)
        };
        let (a, ra) = run(Exec::Sequential, 3);
        let (b, rb) = run(Exec::auto(), 3);
        assert_eq!(ra, rb);
        assert_eq!(a.params.hash(), b.params.hash());

        let (mid, _) = run(Exec::Sequential, 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        crate::model::save_checkpoint(&path, &mid.to_checkpoint("v")).unwrap();
        let ck = crate::model::load_checkpoint(&path).unwrap();
        let mut resumed =
            TrainState::from_checkpoint(&ck, &p.config, "v", Exec::Sequential).unwrap();
        assert_eq!(resumed, mid);
        let last = resumed.cunmt_round(&data, &dirs(), &cfg).unwrap();
        assert_eq!(&last, ra.last().unwrap());
        assert_eq!(resumed, a);
    }
}
