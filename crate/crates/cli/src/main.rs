use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pivotmt::experiment::{
    cmd_ablate, cmd_eval, cmd_synth, cmd_train, cmd_translate, ExperimentConfig, ExperimentError,
    Seeds, TrainOptions, Variant,
};
use pivotmt::eval::EvalReport;
use pivotmt::text::LanguageId;
use pivotmt::train::DecodeStrategy;
use pivotmt::Exec;

/// Multilingual unsupervised NMT with pivot supervision on synthetic languages.
#[derive(Parser)]
#[command(name = "pivotmt", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Run directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Derive data, model and training seeds from one number.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long)]
    train_seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, ExperimentError> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seeds = Seeds::from_run(s);
        }
        if let Some(s) = self.data_seed {
            cfg.seeds.data = s;
        }
        if let Some(s) = self.model_seed {
            cfg.seeds.model = s;
        }
        if let Some(s) = self.train_seed {
            cfg.seeds.train = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = Some(o.clone());
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic family and every corpus.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train, run CUNMT rounds, checkpoint and evaluate.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the run directory's latest checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many metrics records.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Disable data parallelism.
        #[arg(long)]
        sequential: bool,
    },
    /// Translate a corpus file with a checkpoint.
    Translate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Source language, e.g. L0.
        #[arg(long)]
        src: String,
        #[arg(long)]
        tgt: String,
        /// Beam size; greedy when omitted.
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Score a checkpoint on held-out data.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Parallel test files; the configured test pairs when omitted.
        #[arg(long)]
        test: Vec<PathBuf>,
    },
    /// Train variants over seeds and print the comparison table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated: unmt-only, wo-para, w-para, +forward, +fw+bw, bw-only, sup-only.
        #[arg(long, value_delimiter = ',', default_value = "unmt-only,wo-para,w-para,+forward,+fw+bw")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
}

fn lang(s: &str) -> Result<LanguageId, ExperimentError> {
    s.trim_start_matches('L')
        .parse()
        .map(LanguageId)
        .map_err(|_| ExperimentError::Config(format!("bad language `{s}`, expected L<n>")))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Synth { common } => {
            let cfg = common.load()?;
            for f in cmd_synth(&cfg)? {
                println!("{}", f.display());
            }
        }
        Cmd::Train {
            common,
            resume,
            stop_after,
            sequential,
        } => {
            let cfg = common.load()?;
            let opts = TrainOptions {
                resume,
                stop_after,
                exec: sequential.then_some(Exec::Sequential),
            };
            let (state, reports) = cmd_train(&cfg, &opts)?;
            println!("step {} round {}", state.step, state.round);
            print_reports(&reports);
        }
        Cmd::Translate {
            common,
            checkpoint,
            input,
            output,
            src,
            tgt,
            beam,
        } => {
            let cfg = common.load()?;
            let strategy = beam.map_or(DecodeStrategy::Greedy, DecodeStrategy::Beam);
            let n = cmd_translate(&cfg, &checkpoint, &input, &output, (lang(&src)?, lang(&tgt)?), strategy)?;
            println!("{n} sentences -> {}", output.display());
        }
        Cmd::Eval {
            common,
            checkpoint,
            test,
        } => {
            let cfg = common.load()?;
            print_reports(&cmd_eval(&cfg, &checkpoint, &test)?);
        }
        Cmd::Ablate {
            common,
            variants,
            seeds,
        } => {
            let cfg = common.load()?;
            let variants = variants
                .iter()
                .map(|v| v.parse::<Variant>())
                .collect::<Result<Vec<_>, _>>()?;
            let table = cmd_ablate(&cfg, &variants, &seeds)?;
            print!("{}", table.to_text());
        }
    }
    Ok(())
}

fn print_reports(reports: &[EvalReport]) {
    for r in reports {
        println!(
            "{}->{}  bleu {:6.2}  acc {:.3}  n {}  truncated {}",
            r.src, r.tgt, r.bleu.score, r.token_accuracy, r.sentences, r.truncated
        );
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .downcast_ref::<ExperimentError>()
                .map_or(1, ExperimentError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
