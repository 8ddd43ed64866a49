use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use selcal::annotation::AnnotationStrategy;
use selcal::calibrator::CalibratorKind;
use selcal::features::FeatureLayout;
use selcal::pipeline::{self, GridConfig, RunConfig};
use selcal::synthetic;
use selcal::{predlog, Error, Result};

/// Selective prediction: annotate held-out prediction logs, train
/// calibrators and evaluate them with risk-coverage analysis.
#[derive(Debug, Parser)]
#[command(name = "selcal", version)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// classification, regression-a1 or regression-a2.
    #[arg(long, global = true)]
    strategy: Option<AnnotationStrategy>,
    /// maxprob, rf-class, rf-regress, mlp-class, mlp-regress or rejection.
    #[arg(long, global = true)]
    calibrator: Option<CalibratorKind>,
    #[arg(long, global = true)]
    target_accuracy: Option<f64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Evaluation log as `tag=path`; repeatable.
    #[arg(long, global = true, value_parser = parse_eval)]
    eval: Vec<(String, PathBuf)>,
    /// Tag of the evaluation set used for threshold selection.
    #[arg(long, global = true)]
    in_domain: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Turn a plain log into calibration targets.
    Annotate {
        #[arg(long)]
        log: Option<PathBuf>,
        /// Annotate only a seeded holdout slice of this size.
        #[arg(long)]
        holdout_fraction: Option<f64>,
    },
    /// Train a calibrator on an annotated log and write its artifact.
    Train {
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        num_classes: Option<usize>,
    },
    /// Score eval logs with every artifact and write the report bundle.
    Evaluate {
        /// `path`, `label=path`, or `maxprob`; repeatable.
        #[arg(long = "artifact")]
        artifacts: Vec<String>,
        #[arg(long)]
        selection_fraction: Option<f64>,
        /// Cumulative abstention grid as `start:end:step`.
        #[arg(long, value_parser = parse_grid)]
        grid: Option<GridConfig>,
    },
    /// Coverage, risk and accuracy over a threshold grid.
    Sweep {
        #[arg(long = "artifact")]
        artifacts: Vec<String>,
        #[arg(long, value_parser = parse_grid)]
        grid: Option<GridConfig>,
    },
    /// Re-render summary.md from an evaluation directory.
    Report {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Print the feature layout as JSON.
    DescribeFeatures {
        #[arg(long, default_value_t = 2)]
        num_classes: usize,
        #[arg(long)]
        length_norm: Option<f64>,
    },
    /// Write a seeded synthetic benchmark: holdout, in-domain and shifted logs.
    Synth {
        #[arg(long, default_value_t = 2000)]
        holdout: usize,
        #[arg(long = "eval-size", default_value_t = 2000)]
        eval_size: usize,
    },
}

fn parse_eval(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (tag, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected tag=path, got {s:?}"))?;
    if tag.is_empty() || path.is_empty() {
        return Err(format!("expected tag=path, got {s:?}"));
    }
    Ok((tag.to_string(), PathBuf::from(path)))
}

fn parse_grid(s: &str) -> std::result::Result<GridConfig, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [start, end, step] = parts[..] else {
        return Err(format!("expected start:end:step, got {s:?}"));
    };
    let p = |v: &str| v.parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok(GridConfig {
        start: p(start)?,
        end: p(end)?,
        step: p(step)?,
    })
}

fn merged_config(cli: &Cli) -> Result<RunConfig> {
    let mut c = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = cli.seed {
        c.seed = v;
    }
    if let Some(v) = cli.strategy {
        c.strategy = Some(v);
    }
    if let Some(v) = cli.calibrator {
        c.calibrator = Some(v);
    }
    if let Some(v) = cli.target_accuracy {
        c.target_accuracy = v;
    }
    if let Some(v) = &cli.out {
        c.out = Some(v.clone());
    }
    for (tag, path) in &cli.eval {
        c.eval.insert(tag.clone(), path.clone());
    }
    if let Some(v) = &cli.in_domain {
        c.in_domain = Some(v.clone());
    }
    match &cli.command {
        Command::Annotate {
            log,
            holdout_fraction,
        } => {
            c.log = log.clone().or(c.log);
            c.holdout_fraction = holdout_fraction.or(c.holdout_fraction);
        }
        Command::Train { log, num_classes } => {
            c.log = log.clone().or(c.log);
            c.num_classes = num_classes.or(c.num_classes);
        }
        Command::Evaluate {
            artifacts,
            selection_fraction,
            grid,
        } => {
            c.artifacts.extend(artifacts.iter().cloned());
            c.selection_fraction = selection_fraction.unwrap_or(c.selection_fraction);
            c.grid = grid.clone().unwrap_or(c.grid);
        }
        Command::Sweep { artifacts, grid } => {
            c.artifacts.extend(artifacts.iter().cloned());
            c.grid = grid.clone().unwrap_or(c.grid);
        }
        Command::Report { .. } | Command::DescribeFeatures { .. } | Command::Synth { .. } => {}
    }
    Ok(c)
}

fn required<T>(value: Option<T>, what: &str) -> Result<T> {
    value.ok_or_else(|| Error::InvalidArgument(format!("missing {what}")))
}

fn run(cli: &Cli) -> Result<()> {
    let config = merged_config(cli)?;
    match &cli.command {
        Command::Annotate { .. } => {
            let outcome = pipeline::annotate(
                &required(config.log.clone(), "input log (--log)")?,
                required(config.strategy, "annotation strategy (--strategy)")?,
                config.calibrator,
                config.holdout_fraction,
                config.seed,
                config.out_dir()?,
            )?;
            println!("{}", outcome.summary_line());
            println!("wrote {}", outcome.annotated.display());
            if let Some(r) = &outcome.remainder {
                println!("wrote {}", r.display());
            }
        }
        Command::Train { .. } => {
            let kind = required(config.calibrator, "calibrator (--calibrator)")?;
            let (_, path) = pipeline::train(
                config.log.as_deref(),
                kind,
                config.strategy,
                config.num_classes,
                &config.train_config(),
                config.out_dir()?,
            )?;
            println!("wrote {}", path.display());
        }
        Command::Evaluate { .. } => {
            let evaluation = pipeline::run_evaluate(&config)?;
            print!("{}", pipeline::comparison_tsv(&evaluation.report));
            println!("wrote {}", config.out_dir()?.join("summary.json").display());
        }
        Command::Sweep { .. } => {
            for path in pipeline::run_sweep(&config)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Report { dir } => {
            let dir = match dir {
                Some(d) => d.clone(),
                None => config.out_dir()?.to_path_buf(),
            };
            println!("wrote {}", pipeline::run_report(&dir)?.display());
        }
        Command::DescribeFeatures {
            num_classes,
            length_norm,
        } => {
            let mut layout = FeatureLayout::new(*num_classes);
            if let Some(n) = length_norm {
                layout = layout.with_length_norm(*n);
            }
            layout.validate()?;
            let text = serde_json::to_string_pretty(&layout.describe())
                .map_err(|e| Error::Serialization(e.to_string()))?;
            println!("{text}");
        }
        Command::Synth { holdout, eval_size } => {
            let out = config.out_dir()?;
            std::fs::create_dir_all(out).map_err(|e| Error::Io {
                path: out.to_path_buf(),
                source: e,
            })?;
            let b = synthetic::shift_benchmark(config.seed, *holdout, *eval_size)?;
            let header = synthetic::header(2);
            for (name, records) in [
                ("holdout", &b.holdout),
                ("in-domain", &b.in_domain),
                ("ood", &b.ood),
            ] {
                let path = out.join(format!("{name}.jsonl"));
                predlog::write_log(&path, &header, records)?;
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {message}", e.category());
            ExitCode::from(1)
        }
    }
}
