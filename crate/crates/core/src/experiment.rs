//! Experiment configs, variants, run directories and the commands behind the
//! CLI.
//!
//! A run directory holds:
//!
//! ```text
//! config.toml          effective config, every default written out
//! family.meta          the synthetic family
//! data/                mono.L<i>.txt, parallel.L<a>-L<b>.txt, test.L<a>-L<b>.txt
//! checkpoints/         state.ckpt (latest, resumable), final.ckpt
//! metrics.jsonl        one record per optimizer step, bit-reproducible
//! timing.jsonl         wall-clock per record
//! eval.json            held-out reports
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{eval_direction, ComparisonTable, ContentIndex, EvalError, EvalReport};
use crate::exec::Exec;
use crate::model::{
    init_model, load_checkpoint, save_checkpoint, ModelConfig, ModelError, ModelParams,
};
use crate::synth::{derive_seed, gen_corpora, Corpora, Family, FamilySpec, SynthError};
use crate::text::{
    read_mono, read_parallel, write_mono, write_parallel, DataError, LanguageId, MonoCorpus,
    ParallelCorpus, Vocabulary,
};
use crate::train::{
    DecodeStrategy, Direction, DirectionSet, MetricsRecord, TrainConfig, TrainData, TrainError,
    TrainState,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("contract: {0}")]
    Contract(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl ExperimentError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Data(_) => 3,
            ExperimentError::Contract(_) => 4,
            ExperimentError::Io(_) => 1,
        }
    }
}

impl From<SynthError> for ExperimentError {
    fn from(e: SynthError) -> Self {
        ExperimentError::Data(e.to_string())
    }
}

impl From<DataError> for ExperimentError {
    fn from(e: DataError) -> Self {
        ExperimentError::Data(e.to_string())
    }
}

impl From<ModelError> for ExperimentError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(m) => ExperimentError::Config(m),
            ModelError::Io(e) => ExperimentError::Io(e),
            e @ (ModelError::ConfigMismatch
            | ModelError::VocabMismatch { .. }
            | ModelError::Checkpoint(_)) => ExperimentError::Contract(e.to_string()),
            e => ExperimentError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for ExperimentError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Data(d) => d.into(),
            TrainError::Config(m) => ExperimentError::Config(m),
            e @ (TrainError::UnknownPivot(_) | TrainError::Directions(_)) => {
                ExperimentError::Config(e.to_string())
            }
            e => ExperimentError::Contract(e.to_string()),
        }
    }
}

impl From<EvalError> for ExperimentError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::Train(t) => t.into(),
            e => ExperimentError::Data(e.to_string()),
        }
    }
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub train: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self::from_run(0)
    }
}

impl Seeds {
    /// Independent data, init and training seeds derived from one number.
    pub fn from_run(seed: u64) -> Self {
        Self {
            data: derive_seed(seed, 1),
            model: derive_seed(seed, 2),
            train: derive_seed(seed, 3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Sentences per monolingual corpus.
    pub mono: usize,
    /// Rows per parallel corpus before `parallel_fraction` is applied.
    pub parallel: usize,
    /// Fraction of each parallel corpus kept for training. The rest is
    /// generated and discarded, so monolingual and test data do not change.
    pub parallel_fraction: f64,
    pub parallel_pairs: Vec<Direction>,
    pub test: usize,
    pub test_pairs: Vec<Direction>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let l = LanguageId;
        Self {
            mono: 2000,
            parallel: 2000,
            parallel_fraction: 1.0,
            parallel_pairs: vec![(l(0), l(1)), (l(1), l(2))],
            test: 200,
            test_pairs: vec![(l(0), l(1)), (l(0), l(2)), (l(1), l(2))],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub strategy: DecodeStrategy,
    pub max_len: usize,
    /// Directions scored after training; both orientations of every test
    /// pair when empty.
    pub directions: Vec<Direction>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            strategy: DecodeStrategy::Greedy,
            max_len: 16,
            directions: Vec::new(),
        }
    }
}

/// Masks over one training procedure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Only the evaluated unsupervised pair, no parallel data, no pivots.
    #[serde(rename = "unmt-only")]
    UnmtOnly,
    /// Every pair unsupervised and trained jointly, with pivot terms.
    #[serde(rename = "wo-para")]
    WoPara,
    /// Parallel data for E, back-translation for W, no pivot terms.
    #[serde(rename = "w-para")]
    WPara,
    /// `w-para` plus indirect forward rows.
    #[serde(rename = "+forward")]
    Forward,
    /// `w-para` plus indirect forward and backward rows.
    #[serde(rename = "+fw+bw")]
    FwBw,
    /// `w-para` plus indirect backward rows.
    #[serde(rename = "bw-only")]
    BwOnly,
    /// Parallel data only.
    #[serde(rename = "sup-only")]
    SupOnly,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::UnmtOnly,
        Variant::WoPara,
        Variant::WPara,
        Variant::Forward,
        Variant::FwBw,
        Variant::BwOnly,
        Variant::SupOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::UnmtOnly => "unmt-only",
            Variant::WoPara => "wo-para",
            Variant::WPara => "w-para",
            Variant::Forward => "+forward",
            Variant::FwBw => "+fw+bw",
            Variant::BwOnly => "bw-only",
            Variant::SupOnly => "sup-only",
        }
    }

    /// Whether the variant trains like `w-para` until `indirect_from_round`.
    pub fn shares_w_para_prefix(self) -> bool {
        matches!(
            self,
            Variant::WPara | Variant::Forward | Variant::FwBw | Variant::BwOnly
        )
    }

    /// The base config with this variant's direction and coefficient mask.
    pub fn apply(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        let (e, w) = (&base.directions.supervised, &base.directions.unsupervised);
        let (fw, bw) = match self {
            Variant::UnmtOnly | Variant::WPara | Variant::SupOnly => (false, false),
            Variant::WoPara | Variant::FwBw => (true, true),
            Variant::Forward => (true, false),
            Variant::BwOnly => (false, true),
        };
        c.train.forward = fw;
        c.train.backward = bw;
        match self {
            Variant::UnmtOnly => {
                let targets = base.indirect_targets();
                c.directions = DirectionSet {
                    supervised: vec![],
                    unsupervised: w.iter().copied().filter(|d| targets.contains(d)).collect(),
                };
            }
            Variant::WoPara => {
                c.directions = DirectionSet {
                    supervised: vec![],
                    unsupervised: w.iter().chain(e).copied().collect(),
                };
                c.train.indirect_from_round = 0;
            }
            Variant::SupOnly => {
                c.directions.unsupervised.clear();
            }
            _ => {}
        }
        c.name = format!("{}/{}", base.name, self.name());
        c
    }
}

impl FromStr for Variant {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ExperimentError::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub family: FamilySpec,
    pub directions: DirectionSet,
    pub corpora: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seeds: Seeds,
    /// Rounds between resumable checkpoints; 0 disables them.
    pub checkpoint_every: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let l = LanguageId;
        Self {
            name: "default".into(),
            family: FamilySpec::default(),
            directions: DirectionSet {
                supervised: vec![(l(0), l(1)), (l(1), l(0)), (l(1), l(2)), (l(2), l(1))],
                unsupervised: vec![(l(0), l(2)), (l(2), l(0))],
            },
            corpora: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                indirect_directions: Some(vec![(l(0), l(2)), (l(2), l(0))]),
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            seeds: Seeds::default(),
            checkpoint_every: 100,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| ExperimentError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Every field, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.family.languages.len();
        let cfg = |m: String| Err(ExperimentError::Config(m));
        if self.model.vocab_size != self.family.vocab_size {
            return cfg(format!(
                "model vocab {} differs from family vocab {}",
                self.model.vocab_size, self.family.vocab_size
            ));
        }
        if self.model.n_langs != n {
            return cfg(format!("model has {} languages, family {n}", self.model.n_langs));
        }
        self.model.validate()?;
        self.train.validate(n)?;
        let pairs = self
            .directions
            .supervised
            .iter()
            .chain(&self.directions.unsupervised)
            .chain(&self.corpora.parallel_pairs)
            .chain(&self.corpora.test_pairs);
        for &(a, b) in pairs {
            if a.index() >= n || b.index() >= n {
                return cfg(format!("{a}->{b} names a language outside the family"));
            }
        }
        for &(a, b) in &self.directions.supervised {
            let covered = self
                .corpora
                .parallel_pairs
                .iter()
                .any(|&p| p == (a, b) || p == (b, a));
            if !covered {
                return cfg(format!("supervised {a}->{b} has no parallel pair"));
            }
        }
        if !(self.corpora.parallel_fraction > 0.0 && self.corpora.parallel_fraction <= 1.0) {
            return cfg("parallel_fraction must be in (0, 1]".into());
        }
        if self.model.max_len < self.family.len_max || self.eval.max_len == 0 {
            return cfg("model max_len must cover the longest sentence".into());
        }
        Ok(())
    }

    /// Directions that receive indirect terms.
    pub fn indirect_targets(&self) -> Vec<Direction> {
        match &self.train.indirect_directions {
            Some(d) => d.clone(),
            None => self
                .directions
                .supervised
                .iter()
                .chain(&self.directions.unsupervised)
                .copied()
                .collect(),
        }
    }

    pub fn eval_directions(&self) -> Vec<Direction> {
        if !self.eval.directions.is_empty() {
            return self.eval.directions.clone();
        }
        self.corpora
            .test_pairs
            .iter()
            .flat_map(|&(a, b)| [(a, b), (b, a)])
            .collect()
    }

    pub fn with_run_seed(&self, seed: u64) -> Self {
        Self {
            seeds: Seeds::from_run(seed),
            ..self.clone()
        }
    }
}

/// A family with its corpora, ready for training and evaluation.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub family: Family,
    pub corpora: Corpora,
    pub data: TrainData,
    pub index: ContentIndex,
}

impl Prepared {
    pub fn vocab_hash(&self) -> String {
        self.family.vocab.hash()
    }

    /// The held-out corpus for `d`, reversed if stored the other way round.
    pub fn test(&self, d: Direction) -> Option<ParallelCorpus> {
        self.corpora.test.iter().find_map(|c| {
            if c.pair == d {
                Some(c.clone())
            } else if c.pair == (d.1, d.0) {
                Some(c.reversed())
            } else {
                None
            }
        })
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let family = Family::build(&cfg.family, cfg.seeds.data)?;
    let c = &cfg.corpora;
    let corpora = gen_corpora(
        &family,
        c.mono,
        &c.parallel_pairs,
        c.parallel,
        &c.test_pairs,
        c.test,
        derive_seed(cfg.seeds.data, 1),
    )?;
    Ok(assemble(family, corpora, c.parallel_fraction))
}

fn assemble(family: Family, corpora: Corpora, fraction: f64) -> Prepared {
    let parallel = corpora
        .parallel
        .iter()
        .map(|p| p.truncated((p.len() as f64 * fraction).round() as usize))
        .collect();
    let data = TrainData {
        mono: corpora.mono.clone(),
        parallel,
    };
    let index = ContentIndex::new(&data.mono, &corpora.parallel);
    Prepared {
        family,
        corpora,
        data,
        index,
    }
}

/// Result of one training run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub variant: Option<Variant>,
    pub state: TrainState,
    pub metrics: Vec<MetricsRecord>,
    pub reports: Vec<EvalReport>,
}

/// Pre-training followed by CUNMT rounds, resuming after `records` metrics
/// records and stopping at `until_round` or when `sink` returns false.
fn train_loop(
    cfg: &ExperimentConfig,
    data: &TrainData,
    state: &mut TrainState,
    records: &mut usize,
    until_round: u64,
    sink: &mut dyn FnMut(&TrainState, &MetricsRecord, usize) -> Result<bool>,
) -> Result<bool> {
    let t = &cfg.train;
    let dirs = &cfg.directions;
    dirs.validate(data)?;
    while (*records as u64) < t.pretrain_steps {
        let rec = state.pretrain_step(data, dirs, t)?;
        *records += 1;
        if !sink(state, &rec, *records)? {
            return Ok(false);
        }
    }
    while state.round < until_round.min(t.rounds) {
        let rec = state.cunmt_round(data, dirs, t)?;
        *records += 1;
        if !sink(state, &rec, *records)? {
            return Ok(false);
        }
    }
    Ok(true)
}

fn collect_into(metrics: &mut Vec<MetricsRecord>) -> impl FnMut(&TrainState, &MetricsRecord, usize) -> Result<bool> + '_ {
    move |_, r, _| {
        metrics.push(r.clone());
        Ok(true)
    }
}

pub fn evaluate(cfg: &ExperimentConfig, prep: &Prepared, params: &ModelParams, exec: Exec) -> Result<Vec<EvalReport>> {
    cfg.eval_directions()
        .into_iter()
        .map(|d| {
            let test = prep
                .test(d)
                .ok_or_else(|| ExperimentError::Config(format!("no test pair for {}->{}", d.0, d.1)))?;
            prep.index.check(&test)?;
            Ok(eval_direction(
                params,
                &test,
                cfg.eval.strategy,
                cfg.eval.max_len,
                exec,
                cfg.seeds.data,
            )?)
        })
        .collect()
}

fn fresh_state(cfg: &ExperimentConfig, exec: Exec) -> Result<TrainState> {
    let params = init_model(&cfg.model, cfg.seeds.model)?;
    Ok(TrainState::new(params, &cfg.train, cfg.seeds.train, exec))
}

/// Trains and evaluates one config in memory.
pub fn run_in_memory(cfg: &ExperimentConfig, prep: &Prepared, exec: Exec) -> Result<RunOutcome> {
    let mut state = fresh_state(cfg, exec)?;
    let mut metrics = Vec::new();
    train_loop(cfg, &prep.data, &mut state, &mut 0, u64::MAX, &mut collect_into(&mut metrics))?;
    let reports = evaluate(cfg, prep, &state.params, exec)?;
    Ok(RunOutcome {
        variant: None,
        state,
        metrics,
        reports,
    })
}

/// The shared `w-para` run up to `indirect_from_round`.
#[derive(Clone, Debug)]
pub struct Prefix {
    pub state: TrainState,
    pub metrics: Vec<MetricsRecord>,
}

/// Runs several variants of `base` on one prepared dataset. Variants that
/// train like `w-para` until `indirect_from_round` share that prefix, which
/// is trained once and cloned; the result is identical to running each
/// variant from scratch.
pub fn run_variants(
    base: &ExperimentConfig,
    prep: &Prepared,
    variants: &[Variant],
    exec: Exec,
) -> Result<Vec<RunOutcome>> {
    run_variants_from(base, prep, variants, exec, &mut None)
}

/// [`run_variants`] with the prefix kept by the caller. An existing prefix
/// is reused as given, even if it was trained under another base config.
pub fn run_variants_from(
    base: &ExperimentConfig,
    prep: &Prepared,
    variants: &[Variant],
    exec: Exec,
    prefix: &mut Option<Prefix>,
) -> Result<Vec<RunOutcome>> {
    let mut out = Vec::new();
    for &v in variants {
        let cfg = v.apply(base);
        let (mut state, mut metrics) = if v.shares_w_para_prefix() {
            if prefix.is_none() {
                let wp = Variant::WPara.apply(base);
                let mut state = fresh_state(&wp, exec)?;
                let mut metrics = Vec::new();
                let until = base.train.indirect_from_round;
                train_loop(&wp, &prep.data, &mut state, &mut 0, until, &mut collect_into(&mut metrics))?;
                *prefix = Some(Prefix { state, metrics });
            }
            let p = prefix.clone().expect("prefix trained");
            (p.state, p.metrics)
        } else {
            (fresh_state(&cfg, exec)?, Vec::new())
        };
        let mut records = metrics.len();
        train_loop(&cfg, &prep.data, &mut state, &mut records, u64::MAX, &mut collect_into(&mut metrics))?;
        let reports = evaluate(&cfg, prep, &state.params, exec)?;
        out.push(RunOutcome {
            variant: Some(v),
            state,
            metrics,
            reports,
        });
    }
    Ok(out)
}

/// Trains every `(variant, seed)` and tabulates median BLEU over seeds.
pub fn run_comparison(
    base: &ExperimentConfig,
    variants: &[Variant],
    seeds: &[u64],
    exec: Exec,
) -> Result<ComparisonTable> {
    let mut runs = Vec::new();
    for &s in seeds {
        let cfg = base.with_run_seed(s);
        let prep = prepare(&cfg)?;
        for o in run_variants(&cfg, &prep, variants, exec)? {
            runs.push((o.variant.expect("variant run").name().to_string(), o.reports));
        }
    }
    Ok(ComparisonTable::from_reports(&base.eval_directions(), seeds, &runs))
}

// ---- run directories ----

/// Exclusive ownership of a run directory for the life of the guard.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(ExperimentError::Contract(
                format!("{} is locked by another process", dir.display()),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.output_dir
        .clone()
        .ok_or_else(|| ExperimentError::Config("no output directory".into()))
}

fn lang_name(l: LanguageId) -> String {
    format!("L{}", l.0)
}

fn mono_file(dir: &Path, l: LanguageId) -> PathBuf {
    dir.join("data").join(format!("mono.{}.txt", lang_name(l)))
}

fn pair_file(dir: &Path, kind: &str, (a, b): Direction) -> PathBuf {
    dir.join("data")
        .join(format!("{kind}.{}-{}.txt", lang_name(a), lang_name(b)))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

/// Writes the effective config, `family.meta` and every corpus. Returns the
/// files written.
pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let dir = out_dir(cfg)?;
    let _lock = RunLock::acquire(&dir)?;
    let prep = prepare(cfg)?;
    write_synth(&dir, cfg, &prep)
}

fn write_synth(dir: &Path, cfg: &ExperimentConfig, prep: &Prepared) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir.join("data"))?;
    write_config(dir, cfg)?;
    let vocab = &prep.family.vocab;
    let mut files = vec![dir.join("config.toml"), dir.join("family.meta")];
    fs::write(&files[1], prep.family.meta())?;
    for m in &prep.corpora.mono {
        let p = mono_file(dir, m.lang);
        write_file(&p, |w| write_mono(w, m, vocab))?;
        files.push(p);
    }
    for c in &prep.data.parallel {
        let p = pair_file(dir, "parallel", c.pair);
        write_file(&p, |w| write_parallel(w, c, vocab))?;
        files.push(p);
    }
    for c in &prep.corpora.test {
        let p = pair_file(dir, "test", c.pair);
        write_file(&p, |w| write_parallel(w, c, vocab))?;
        files.push(p);
    }
    Ok(files)
}

fn read_mono_file(path: &Path, vocab: &Vocabulary) -> Result<MonoCorpus> {
    Ok(read_mono(BufReader::new(File::open(path)?), vocab)?)
}

fn read_parallel_file(path: &Path, vocab: &Vocabulary) -> Result<ParallelCorpus> {
    Ok(read_parallel(BufReader::new(File::open(path)?), vocab)?)
}

/// Reads corpora written by [`cmd_synth`], checking them against the family
/// the config describes.
fn load_synth(dir: &Path, cfg: &ExperimentConfig) -> Result<Prepared> {
    let family = Family::build(&cfg.family, cfg.seeds.data)?;
    let meta = fs::read_to_string(dir.join("family.meta"))?;
    if meta != family.meta() {
        return Err(ExperimentError::Contract(
            "family.meta does not match the config".into(),
        ));
    }
    let vocab = &family.vocab;
    let mono = vocab
        .languages()
        .map(|l| read_mono_file(&mono_file(dir, l), vocab))
        .collect::<Result<Vec<_>>>()?;
    let parallel = cfg
        .corpora
        .parallel_pairs
        .iter()
        .map(|&p| read_parallel_file(&pair_file(dir, "parallel", p), vocab))
        .collect::<Result<Vec<_>>>()?;
    let test = cfg
        .corpora
        .test_pairs
        .iter()
        .map(|&p| read_parallel_file(&pair_file(dir, "test", p), vocab))
        .collect::<Result<Vec<_>>>()?;
    let data = TrainData {
        mono: mono.clone(),
        parallel: parallel.clone(),
    };
    let index = ContentIndex::new(&mono, &parallel);
    Ok(Prepared {
        family,
        corpora: Corpora {
            mono,
            parallel,
            test,
        },
        data,
        index,
    })
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from `checkpoints/state.ckpt` if present.
    pub resume: bool,
    /// Stop after this many metrics records, as if interrupted.
    pub stop_after: Option<usize>,
    pub exec: Option<Exec>,
}

fn state_path(dir: &Path) -> PathBuf {
    dir.join("checkpoints").join("state.ckpt")
}

fn save_state(dir: &Path, state: &TrainState, vocab_hash: &str, records: usize) -> Result<()> {
    let mut ck = state.to_checkpoint(vocab_hash);
    if let serde_json::Value::Object(m) = &mut ck.header.extra {
        m.insert("records".into(), records.into());
    }
    save_checkpoint(&state_path(dir), &ck)?;
    Ok(())
}

/// Keeps the first `n` lines of a line-delimited log.
fn truncate_lines(path: &Path, n: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let keep: Vec<String> = BufReader::new(File::open(path)?)
        .lines()
        .take(n)
        .collect::<std::io::Result<_>>()?;
    if keep.len() < n {
        return Err(ExperimentError::Contract(format!(
            "{} has {} records, checkpoint expects {n}",
            path.display(),
            keep.len()
        )));
    }
    let mut s = keep.join("\n");
    if n > 0 {
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

#[derive(Serialize)]
struct Timing {
    step: u64,
    round: u64,
    wall_ms: f64,
}

/// Trains into the run directory, writing the synthetic data first if it is
/// missing. Returns the final state and held-out reports.
pub fn cmd_train(cfg: &ExperimentConfig, opts: &TrainOptions) -> Result<(TrainState, Vec<EvalReport>)> {
    let dir = out_dir(cfg)?;
    let _lock = RunLock::acquire(&dir)?;
    let exec = opts.exec.unwrap_or_else(Exec::auto);
    let prep = if dir.join("family.meta").exists() {
        let p = load_synth(&dir, cfg)?;
        write_config(&dir, cfg)?;
        p
    } else {
        let p = prepare(cfg)?;
        write_synth(&dir, cfg, &p)?;
        p
    };
    fs::create_dir_all(dir.join("checkpoints"))?;
    let vocab_hash = prep.vocab_hash();
    let metrics_path = dir.join("metrics.jsonl");
    let timing_path = dir.join("timing.jsonl");

    let (mut state, done) = if opts.resume && state_path(&dir).exists() {
        let ck = load_checkpoint(&state_path(&dir))?;
        let records = ck.header.extra.get("records").and_then(|v| v.as_u64()).ok_or_else(|| {
            ExperimentError::Contract("checkpoint lacks a record count".into())
        })? as usize;
        let state = TrainState::from_checkpoint(&ck, &cfg.model, &vocab_hash, exec)?;
        truncate_lines(&metrics_path, records)?;
        truncate_lines(&timing_path, records)?;
        (state, records)
    } else {
        fs::write(&metrics_path, "")?;
        fs::write(&timing_path, "")?;
        (fresh_state(cfg, exec)?, 0)
    };

    let mut metrics_w = BufWriter::new(OpenOptions::new().append(true).open(&metrics_path)?);
    let mut timing_w = BufWriter::new(OpenOptions::new().append(true).open(&timing_path)?);
    let stop = opts.stop_after.unwrap_or(usize::MAX);
    let mut clock = Instant::now();
    let mut sink = |st: &TrainState, rec: &MetricsRecord, n: usize| -> Result<bool> {
        serde_json::to_writer(&mut metrics_w, rec).map_err(std::io::Error::from)?;
        metrics_w.write_all(b"\n")?;
        let t = Timing {
            step: rec.step,
            round: rec.round,
            wall_ms: clock.elapsed().as_secs_f64() * 1e3,
        };
        serde_json::to_writer(&mut timing_w, &t).map_err(std::io::Error::from)?;
        timing_w.write_all(b"\n")?;
        clock = Instant::now();
        let boundary = rec.phase == "cunmt"
            && cfg.checkpoint_every > 0
            && rec.round % cfg.checkpoint_every == 0;
        if boundary || n >= stop || n as u64 == cfg.train.pretrain_steps {
            metrics_w.flush()?;
            timing_w.flush()?;
            save_state(&dir, st, &vocab_hash, n)?;
        }
        Ok(n < stop)
    };
    let mut records = done;
    let finished = train_loop(cfg, &prep.data, &mut state, &mut records, u64::MAX, &mut sink)?;
    metrics_w.flush()?;
    timing_w.flush()?;
    if !finished {
        return Ok((state, Vec::new()));
    }
    save_checkpoint(&dir.join("checkpoints").join("final.ckpt"), &state.to_checkpoint(&vocab_hash))?;
    save_state(&dir, &state, &vocab_hash, records)?;
    let reports = evaluate(cfg, &prep, &state.params, exec)?;
    fs::write(
        dir.join("eval.json"),
        serde_json::to_string_pretty(&reports).expect("reports serialize"),
    )?;
    Ok((state, reports))
}

fn vocab_for(cfg: &ExperimentConfig) -> Result<Vocabulary> {
    Ok(Family::build(&cfg.family, cfg.seeds.data)?.vocab)
}

fn load_params(cfg: &ExperimentConfig, checkpoint: &Path, vocab: &Vocabulary) -> Result<ModelParams> {
    Ok(load_checkpoint(checkpoint)?.params(&cfg.model, &vocab.hash())?)
}

/// Translates a monolingual corpus file from `src` into `tgt`. The identity
/// direction copies its input.
pub fn cmd_translate(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    (src, tgt): Direction,
    strategy: DecodeStrategy,
) -> Result<usize> {
    let vocab = vocab_for(cfg)?;
    let params = load_params(cfg, checkpoint, &vocab)?;
    let corpus = read_mono_file(input, &vocab)?;
    if corpus.lang != src {
        return Err(ExperimentError::Data(format!(
            "{} holds {} text, expected {src}",
            input.display(),
            corpus.lang
        )));
    }
    let sentences = if src == tgt {
        corpus.sentences
    } else {
        let test = ParallelCorpus {
            pair: (src, tgt),
            rows: corpus.sentences.iter().map(|x| (x.clone(), x.clone())).collect(),
        };
        crate::eval::decode_corpus(&params, &test, strategy, cfg.eval.max_len, Exec::auto())?
            .into_iter()
            .map(|(tokens, _)| crate::text::Sentence::new(tokens, tgt))
            .collect()
    };
    let n = sentences.len();
    let out = MonoCorpus {
        lang: tgt,
        sentences,
    };
    write_file(output, |w| write_mono(w, &out, &vocab))?;
    Ok(n)
}

/// Scores a checkpoint on test files (both orientations of each), or on the
/// configured test pairs when `tests` is empty. Test data is checked
/// against the training pools the config generates.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path, tests: &[PathBuf]) -> Result<Vec<EvalReport>> {
    let prep = prepare(cfg)?;
    let params = load_params(cfg, checkpoint, &prep.family.vocab)?;
    let corpora: Vec<ParallelCorpus> = if tests.is_empty() {
        prep.corpora.test.clone()
    } else {
        tests
            .iter()
            .map(|p| read_parallel_file(p, &prep.family.vocab))
            .collect::<Result<_>>()?
    };
    let mut reports = Vec::new();
    for c in corpora {
        for t in [c.clone(), c.reversed()] {
            prep.index.check(&t)?;
            reports.push(eval_direction(
                &params,
                &t,
                cfg.eval.strategy,
                cfg.eval.max_len,
                Exec::auto(),
                cfg.seeds.data,
            )?);
        }
    }
    Ok(reports)
}

/// Runs the variants over the seeds and writes `ablation.txt` and
/// `ablation.tsv` to the output directory, if one is set.
pub fn cmd_ablate(cfg: &ExperimentConfig, variants: &[Variant], seeds: &[u64]) -> Result<ComparisonTable> {
    let _lock = match &cfg.output_dir {
        Some(d) => Some(RunLock::acquire(d)?),
        None => None,
    };
    let table = run_comparison(cfg, variants, seeds, Exec::auto())?;
    if let Some(d) = &cfg.output_dir {
        write_config(d, cfg)?;
        fs::write(d.join("ablation.txt"), table.to_text())?;
        fs::write(d.join("ablation.tsv"), table.to_tsv())?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    fn l(i: u16) -> LanguageId {
        LanguageId(i)
    }

    fn tiny() -> ExperimentConfig {
        let base = ExperimentConfig::default();
        ExperimentConfig {
            name: "tiny".into(),
            corpora: CorpusConfig {
                mono: 40,
                parallel: 30,
                test: 10,
                ..CorpusConfig::default()
            },
            model: ModelConfig {
                layers: 1,
                hidden: 16,
                heads: 2,
                ffn_mult: 2,
                max_len: 12,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                batch_size: 4,
                gen_batch_size: 2,
                epoch_size: 8,
                pretrain_steps: 3,
                rounds: 6,
                indirect_from_round: 3,
                lambda_l_decay_rounds: 4,
                gen_max_len: 10,
                ..base.train.clone()
            },
            eval: EvalConfig {
                max_len: 10,
                ..EvalConfig::default()
            },
            checkpoint_every: 2,
            ..base
        }
    }

    fn digest(path: &Path) -> String {
        hex::encode(Sha256::digest(fs::read(path).unwrap()))
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let c = tiny();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml(), c.to_toml());
        let err = ExperimentConfig::from_toml("model = 3").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let mut bad = tiny();
        bad.model.vocab_size = 64;
        assert!(matches!(bad.validate(), Err(ExperimentError::Config(_))));
    }

    #[test]
    fn variants_are_masks_over_the_base_config() {
        let b = tiny();
        let u = Variant::UnmtOnly.apply(&b);
        assert!(u.directions.supervised.is_empty());
        assert_eq!(u.directions.unsupervised, vec![(l(0), l(2)), (l(2), l(0))]);
        assert!(!u.train.forward && !u.train.backward);
        let wo = Variant::WoPara.apply(&b);
        assert!(wo.directions.supervised.is_empty());
        assert_eq!(wo.directions.unsupervised.len(), 6);
        assert!(wo.train.forward && wo.train.backward);
        let w = Variant::WPara.apply(&b);
        assert_eq!(w.directions, b.directions);
        assert!(!w.train.forward && !w.train.backward);
        let f = Variant::Forward.apply(&b);
        assert!(f.train.forward && !f.train.backward);
        let bw = Variant::BwOnly.apply(&b);
        assert!(!bw.train.forward && bw.train.backward);
        assert!(Variant::SupOnly.apply(&b).directions.unsupervised.is_empty());
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("bogus".parse::<Variant>().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn shared_prefix_matches_independent_runs() {
        let c = tiny();
        let prep = prepare(&c).unwrap();
        let shared = run_variants(&c, &prep, &[Variant::WPara, Variant::FwBw], Exec::auto()).unwrap();
        let alone = run_in_memory(&Variant::FwBw.apply(&c), &prep, Exec::Sequential).unwrap();
        assert_eq!(shared[1].metrics, alone.metrics);
        assert_eq!(shared[1].state.params, alone.state.params);
        assert_eq!(shared[1].reports, alone.reports);
        let jobs = |o: &RunOutcome| o.metrics.last().map(|m| m.generated + m.dropped).unwrap();
        assert!(jobs(&shared[1]) > jobs(&shared[0]));
    }

    #[test]
    fn synth_is_deterministic_and_complete() {
        let d = tempfile::tempdir().unwrap();
        let mut c = tiny();
        let mut digests = Vec::new();
        for run in ["a", "b"] {
            c.output_dir = Some(d.path().join(run));
            let files = cmd_synth(&c).unwrap();
            // config.toml echoes the output directory, which differs.
            digests.push(files[1..].iter().map(|f| digest(f)).collect::<Vec<_>>());
        }
        assert_eq!(digests[0], digests[1]);
        let data = d.path().join("a/data");
        let parallel: Vec<_> = fs::read_dir(&data)
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().starts_with("parallel."))
            .collect();
        assert_eq!(parallel.len(), 2);
        let mono = fs::read_to_string(data.join("mono.L2.txt")).unwrap();
        // A header line naming the language, then one sentence per line.
        assert_eq!(mono.lines().count(), 1 + c.corpora.mono);
        assert!(!d.path().join("a/.lock").exists());
    }

    #[test]
    fn interrupted_training_resumes_to_the_same_log() {
        let d = tempfile::tempdir().unwrap();
        let mut c = tiny();
        c.output_dir = Some(d.path().join("full"));
        let (full, reports) = cmd_train(&c, &TrainOptions::default()).unwrap();
        assert_eq!(reports.len(), 6);
        let full_log = fs::read_to_string(d.path().join("full/metrics.jsonl")).unwrap();
        assert_eq!(full_log.lines().count(), 9);

        c.output_dir = Some(d.path().join("cut"));
        for stop in [2, 6] {
            let opts = TrainOptions {
                resume: true,
                stop_after: Some(stop),
                exec: None,
            };
            cmd_train(&c, &opts).unwrap();
        }
        // Simulate a crash after the last checkpoint: records past it are
        // written again on resume.
        let cut_log = d.path().join("cut/metrics.jsonl");
        let mut partial = fs::read_to_string(&cut_log).unwrap();
        partial.push_str("{\"garbage\":true}\n");
        fs::write(&cut_log, partial).unwrap();
        let (resumed, _) = cmd_train(
            &c,
            &TrainOptions {
                resume: true,
                ..TrainOptions::default()
            },
        )
        .unwrap();
        assert_eq!(fs::read_to_string(&cut_log).unwrap(), full_log);
        assert_eq!(resumed.params.hash(), full.params.hash());
        assert_eq!(
            digest(&d.path().join("cut/checkpoints/final.ckpt")),
            digest(&d.path().join("full/checkpoints/final.ckpt"))
        );
    }

    #[test]
    fn a_locked_run_directory_is_refused() {
        let d = tempfile::tempdir().unwrap();
        let mut c = tiny();
        c.output_dir = Some(d.path().to_path_buf());
        let lock = RunLock::acquire(d.path()).unwrap();
        let err = cmd_synth(&c).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        drop(lock);
        cmd_synth(&c).unwrap();
    }

    #[test]
    fn eval_and_translate_use_the_final_checkpoint() {
        let d = tempfile::tempdir().unwrap();
        let mut c = tiny();
        c.output_dir = Some(d.path().to_path_buf());
        let (_, reports) = cmd_train(&c, &TrainOptions::default()).unwrap();
        let ck = d.path().join("checkpoints/final.ckpt");
        assert_eq!(cmd_eval(&c, &ck, &[]).unwrap(), reports);

        let input = d.path().join("data/mono.L0.txt");
        let same = d.path().join("same.txt");
        cmd_translate(&c, &ck, &input, &same, (l(0), l(0)), DecodeStrategy::Greedy).unwrap();
        assert_eq!(fs::read(&same).unwrap(), fs::read(&input).unwrap());
        let out = d.path().join("out.txt");
        let n = cmd_translate(&c, &ck, &input, &out, (l(0), l(2)), DecodeStrategy::Beam(2)).unwrap();
        assert_eq!(n, c.corpora.mono);
        let err = cmd_translate(&c, &ck, &input, &out, (l(1), l(2)), DecodeStrategy::Greedy).unwrap_err();
        assert_eq!(err.exit_code(), 3);

        let mut other = c.clone();
        other.family.vocab_size = 100;
        other.model.vocab_size = 100;
        assert_eq!(cmd_eval(&other, &ck, &[]).unwrap_err().exit_code(), 4);
    }
}
