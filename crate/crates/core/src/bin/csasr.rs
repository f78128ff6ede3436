use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use csasr::metrics::BucketSpec;
use csasr::model::ModelKind;
use csasr::pipeline::{
    cmd_decode, cmd_evaluate, cmd_gradcheck, cmd_train, generate_synthetic_corpus, load_manifest, parse_config,
    read_hypotheses, EvalRun, PipelineError, SynthSpec, TargetSet,
};
use csasr::targets::{target_set_stats, Alphabet, Scheme, REDUCED_INVENTORY, UNIFIED_INVENTORY};

#[derive(Parser)]
#[command(name = "csasr", version, about = "Code-switching speech recognition with unified or reduced targets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus with manifests, alphabets and lexicon.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        vocab: usize,
        #[arg(long, default_value_t = 200)]
        utterances: usize,
        #[arg(long, default_value_t = 10)]
        phones: usize,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        /// Words per utterance as MIN-MAX.
        #[arg(long, default_value = "1-6", value_parser = parse_range)]
        words: (usize, usize),
    },
    /// Train a model; writes model.ckpt and train_log.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override training.epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Decode a manifest into a JSON-lines hypothesis file.
    Decode {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the config's test manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override decoding.beam_width.
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Score hypothesis files and print the bucketed results table.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// NAME=CONFIG,HYPOTHESES; repeat for several rows.
        #[arg(long = "run", required = true, value_parser = parse_run)]
        runs: Vec<(String, PathBuf, PathBuf)>,
        /// Word-count buckets as MIN-MAX:NAME,...
        #[arg(long)]
        buckets: Option<String>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write the text table here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Check analytic gradients of a small random model.
    Gradcheck {
        #[arg(long, default_value = "ctc")]
        model: ModelKind,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = usize::MAX)]
        sample: usize,
    },
    /// Target-set sizes and the reduction from unified to reduced targets.
    Stats {
        /// Defaults to the bundled 94-character inventory.
        #[arg(long)]
        unified: Option<PathBuf>,
        /// Defaults to the bundled 62-phone inventory.
        #[arg(long)]
        reduced: Option<PathBuf>,
    },
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once('-').ok_or("expected MIN-MAX")?;
    let a = a.trim().parse().map_err(|_| format!("bad number `{a}`"))?;
    let b = b.trim().parse().map_err(|_| format!("bad number `{b}`"))?;
    Ok((a, b))
}

fn parse_run(s: &str) -> Result<(String, PathBuf, PathBuf), String> {
    let (name, rest) = s.split_once('=').ok_or("expected NAME=CONFIG,HYPOTHESES")?;
    let (config, hyps) = rest.split_once(',').ok_or("expected NAME=CONFIG,HYPOTHESES")?;
    Ok((name.to_string(), PathBuf::from(config), PathBuf::from(hyps)))
}

fn write(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

fn read_alphabet(path: Option<&Path>, bundled: &str, scheme: Scheme) -> Result<Alphabet, PipelineError> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| PipelineError::io(p, e))?,
        None => bundled.to_string(),
    };
    Ok(Alphabet::parse(&text, scheme, false)?)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Synth {
            out,
            seed,
            vocab,
            utterances,
            phones,
            noise,
            words,
        } => {
            let spec = SynthSpec {
                vocab_size: vocab,
                num_utterances: utterances,
                phone_count: phones,
                noise_sigma: noise,
                words_per_utterance: words,
                seed,
                ..SynthSpec::default()
            };
            let c = generate_synthetic_corpus(&spec, &out)?;
            println!(
                "wrote {} train / {} dev / {} test utterances to {}",
                c.sizes.0,
                c.sizes.1,
                c.sizes.2,
                out.display()
            );
        }
        Command::Train { config, out, epochs } => {
            let mut cfg = parse_config(&config)?;
            if let Some(e) = epochs {
                if e == 0 {
                    return Err(PipelineError::Usage("--epochs must be >= 1".into()));
                }
                cfg.training.epochs = e;
            }
            let s = cmd_train(&cfg, &out)?;
            println!(
                "best dev loss {:.4} at epoch {}; checkpoint {}",
                s.best_dev_loss,
                s.best_epoch,
                s.checkpoint.display()
            );
        }
        Command::Decode {
            config,
            checkpoint,
            manifest,
            out,
            beam,
        } => {
            let mut cfg = parse_config(&config)?;
            if let Some(b) = beam {
                if b == 0 {
                    return Err(PipelineError::Usage("--beam must be >= 1".into()));
                }
                cfg.decoding.beam_width = b;
            }
            let manifest = manifest
                .or_else(|| cfg.data.test.clone())
                .ok_or_else(|| PipelineError::Usage("no --manifest and no [data] test in config".into()))?;
            let decoded = cmd_decode(&cfg, &checkpoint, &load_manifest(&manifest)?, &out)?;
            println!("decoded {} utterances into {}", decoded.len(), out.display());
        }
        Command::Evaluate {
            manifest,
            runs,
            buckets,
            csv,
            output,
        } => {
            let buckets = match buckets {
                Some(b) => BucketSpec::parse(&b).map_err(PipelineError::Usage)?,
                None => BucketSpec::default(),
            };
            let manifest = load_manifest(&manifest)?;
            let runs = runs
                .into_iter()
                .map(|(name, config, hyps)| {
                    let cfg = parse_config(&config)?;
                    Ok(EvalRun {
                        name,
                        targets: TargetSet::from_config(&cfg)?,
                        hypotheses: read_hypotheses(&hyps)?,
                    })
                })
                .collect::<Result<Vec<_>, PipelineError>>()?;
            let report = cmd_evaluate(&runs, &manifest, &buckets)?;
            if let Some(p) = csv {
                write(&p, &report.csv)?;
            }
            match output {
                Some(p) => write(&p, &report.text)?,
                None => print!("{}", report.text),
            }
        }
        Command::Gradcheck {
            model,
            seed,
            epsilon,
            tolerance,
            sample,
        } => {
            let r = cmd_gradcheck(model, seed, epsilon, sample)?;
            println!(
                "{model}: checked {} parameters, max relative error {:.3e}, max absolute error {:.3e}, smallest nonzero gradient {:.3e}",
                r.checked, r.max_rel_error, r.max_abs_error, r.min_abs_analytic
            );
            if let Some(w) = &r.worst {
                println!(
                    "worst: {}[{}] analytic {:.6e} numeric {:.6e}",
                    w.param, w.index, w.analytic, w.numeric
                );
            }
            if r.max_rel_error > tolerance {
                return Err(PipelineError::GradCheck {
                    max_rel_error: r.max_rel_error,
                    tolerance,
                });
            }
        }
        Command::Stats { unified, reduced } => {
            let u = read_alphabet(unified.as_deref(), UNIFIED_INVENTORY, Scheme::Unified)?;
            let r = read_alphabet(reduced.as_deref(), REDUCED_INVENTORY, Scheme::Reduced)?;
            println!("{}", target_set_stats(&u, &r));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
