use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diarkit::cli::{self, Config};
use diarkit::Error;

#[derive(Parser)]
#[command(name = "diarkit", version, about = "Speaker diarization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Sessions processed in parallel.
    #[arg(long)]
    jobs: Option<usize>,
    /// Overrides the seed of the command's config section.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic conversations.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output directory (overrides paths.data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Checkpoint to write (overrides paths.checkpoint).
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Diarize a manifest or a WAV file.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        profiles: Option<PathBuf>,
    },
    /// Compute DER of a hypothesis RTTM.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long)]
        hyp: Option<PathBuf>,
        #[arg(long)]
        collar: Option<f64>,
        /// Bucket rule such as "1-10,11+" or "2,3,4,5,6+".
        #[arg(long)]
        buckets: Option<String>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run internal consistency checks.
    Selftest {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn set<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

fn load(common: &Common) -> diarkit::Result<(Config, usize)> {
    let cfg = Config::load(&common.config)?;
    let env = std::env::var("DIARKIT_THREADS").ok();
    let jobs = cli::worker_count(common.jobs, env.as_deref())?;
    Ok((cfg, jobs))
}

fn run(cmd: Command) -> diarkit::Result<()> {
    match cmd {
        Command::Simulate { common, out } => {
            let (mut cfg, jobs) = load(&common)?;
            set(&mut cfg.paths.data_dir, out);
            if let Some(s) = common.seed {
                cfg.simulation.seed = s;
            }
            cfg.validate()?;
            for (manifest, stats) in cli::cmd_simulate(&cfg, jobs)? {
                let mean = stats.iter().map(|s| s.realized_overlap).sum::<f64>() / stats.len() as f64;
                println!("{}\t{} sessions\tmean overlap {:.3}", manifest.display(), stats.len(), mean);
            }
        }
        Command::Train {
            common,
            manifest,
            output,
            loss_csv,
        } => {
            let (mut cfg, jobs) = load(&common)?;
            set(&mut cfg.paths.train_manifest, manifest);
            set(&mut cfg.paths.checkpoint, output);
            set(&mut cfg.paths.loss_csv, loss_csv);
            if let Some(s) = common.seed {
                cfg.training.seed = s;
            }
            cfg.validate()?;
            let summary = cli::cmd_train(&cfg, jobs)?;
            if let (Some(first), Some(last)) = (summary.losses.first(), summary.losses.last()) {
                println!("trained {} steps, loss {first:.4} -> {last:.4}", summary.losses.len());
            }
        }
        Command::Infer {
            common,
            checkpoint,
            input,
            output,
            profiles,
        } => {
            let (mut cfg, jobs) = load(&common)?;
            set(&mut cfg.paths.checkpoint, checkpoint);
            set(&mut cfg.paths.infer_input, input);
            set(&mut cfg.paths.output_rttm, output);
            set(&mut cfg.paths.profile_rttm, profiles);
            let segs = cli::cmd_infer(&cfg, jobs)?;
            if let Some(p) = &cfg.paths.output_rttm {
                println!("{}\t{} segments", p.display(), segs.len());
            }
        }
        Command::Score {
            common,
            reference,
            hyp,
            collar,
            buckets,
            report,
        } => {
            let (mut cfg, _) = load(&common)?;
            set(&mut cfg.paths.reference, reference);
            set(&mut cfg.paths.output_rttm, hyp);
            set(&mut cfg.paths.report, report);
            if let Some(c) = collar {
                cfg.inference.collar = c;
            }
            if let Some(b) = buckets {
                cfg.inference.buckets = b;
            }
            cfg.inference.validate()?;
            let report = cli::cmd_score(&cfg)?;
            print!("{}", report.to_text());
        }
        Command::Selftest { .. } => {
            let results = cli::selftest();
            let mut failed = 0;
            for (name, ok, detail) in &results {
                println!("{} {name}: {detail}", if *ok { "ok  " } else { "FAIL" });
                failed += usize::from(!ok);
            }
            if failed > 0 {
                return Err(Error::Numerical(format!("{failed} self-test check(s) failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { cli::EXIT_CONFIG } else { cli::EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
