use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dsibh_cli::commands::{
    append_csv, cmd_encode, cmd_eval, cmd_retrieve, cmd_synth, cmd_train, CliError, CliResult, EVAL_TABLE_HEADER,
    EXIT_OK, EXIT_USAGE,
};
use dsibh_cli::config::{DataSource, ReportFormat};
use dsibh_cli::ExperimentConfig;
use dsibh_core::dataio::SynthSpec;
use dsibh_core::eval::Direction;

#[derive(Parser, Debug)]
#[command(name = "dsibh", version, about = "Cross-modal deep hashing: train, encode, retrieve, evaluate")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed (training seed for `train`, generator seed for `synth`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel evaluation.
    #[arg(long, global = true, env = "DSIBH_THREADS")]
    threads: Option<usize>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic paired dataset.
    Synth(SynthArgs),
    /// Train all encoders from --config and write models, code DBs and metrics.
    Train {
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Encode a feature file into a code DB.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// List the top-k database items for each query row.
    Retrieve {
        /// Query feature file.
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// MAP of a query DB against a retrieval DB.
    Eval {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long, default_value = "x2r")]
        direction: Direction,
        /// Retrieval radius; defaults to the database size.
        #[arg(long)]
        radius: Option<usize>,
        /// Append the result as a CSV row to this file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    d1: Option<usize>,
    #[arg(long)]
    d2: Option<usize>,
    #[arg(long)]
    label_dim: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    multilabel_rate: Option<f64>,
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<ExperimentConfig> {
    let path = path.ok_or_else(|| CliError::usage("train needs --config PATH"))?;
    if !path.exists() {
        return Err(CliError::io(format!("{}: no such file", path.display())));
    }
    Ok(ExperimentConfig::load(path)?)
}

fn print_json<T: serde::Serialize>(v: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::io(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    match cli.command {
        Command::Synth(a) => {
            let mut spec = match cli.config.as_deref().map(|p| load_config(Some(p))).transpose()? {
                Some(ExperimentConfig {
                    data: DataSource::Synth(s), ..
                }) => s,
                Some(_) => return Err(CliError::usage("config does not describe a synthetic dataset")),
                None => SynthSpec::default(),
            };
            spec.class_count = a.classes.unwrap_or(spec.class_count);
            spec.samples_per_class = a.per_class.unwrap_or(spec.samples_per_class);
            spec.d1 = a.d1.unwrap_or(spec.d1);
            spec.d2 = a.d2.unwrap_or(spec.d2);
            spec.noise_sigma = a.noise.unwrap_or(spec.noise_sigma);
            spec.multilabel_rate = a.multilabel_rate.unwrap_or(spec.multilabel_rate);
            spec.seed = cli.seed.unwrap_or(spec.seed);
            spec.label_dim = a.label_dim.unwrap_or(spec.label_dim.max(spec.class_count));
            let out = cmd_synth(&spec, &a.out_dir)?;
            if cli.json {
                print_json(&out)?;
            } else {
                println!("wrote {} rows:", out.rows);
                for f in &out.files {
                    println!("  {}", f.display());
                }
            }
        }
        Command::Train { out_dir } => {
            let mut cfg = load_config(cli.config.as_deref())?;
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            if let Some(o) = out_dir {
                cfg.output_dir = o;
            }
            let m = cmd_train(&cfg)?;
            let format = if cli.json { ReportFormat::Json } else { cfg.report.format };
            match format {
                ReportFormat::Json => print_json(&m)?,
                ReportFormat::Csv => {
                    println!("direction,bits,map,evaluated,skipped");
                    for d in &cfg.directions {
                        let r = &m.map[d.key()];
                        println!("{d},{},{:.6},{},{}", m.code_bits, r.map, r.evaluated, r.skipped);
                    }
                }
                ReportFormat::Table => {
                    println!(
                        "trained {} rounds{} on {} rows; outputs in {}",
                        m.rounds_completed,
                        if m.converged { " (converged)" } else { "" },
                        m.counts.train,
                        cfg.output_dir.display()
                    );
                    println!("{EVAL_TABLE_HEADER}");
                    for d in &cfg.directions {
                        let r = &m.map[d.key()];
                        println!("{:<9} {:>5} {:>8.4} {:>8}", d.to_string(), m.code_bits, r.map, r.skipped);
                    }
                    println!(
                        "held-out I(G;X): img {:.4}, txt {:.4}; bit agreement {:.4}",
                        m.heldout_mi.img, m.heldout_mi.txt, m.bit_agreement
                    );
                }
            }
        }
        Command::Encode {
            model,
            features,
            labels,
            out,
        } => {
            let db = cmd_encode(&model, &features, labels.as_deref(), &out)?;
            if cli.json {
                print_json(&serde_json::json!({
                    "out": out,
                    "items": db.len(),
                    "code_bits": db.code_bits(),
                }))?;
            } else {
                println!("encoded {} items at {} bits -> {}", db.len(), db.code_bits(), out.display());
            }
        }
        Command::Retrieve { queries, model, db, k } => {
            let res = cmd_retrieve(&queries, &model, &db, k)?;
            if cli.json {
                print_json(&res)?;
            } else {
                println!("query  rank        id  distance");
                for q in &res {
                    for (r, h) in q.hits.iter().enumerate() {
                        println!("{:>5} {:>5} {:>9} {:>9}", q.query, r + 1, h.id, h.distance);
                    }
                }
            }
        }
        Command::Eval {
            queries,
            db,
            direction,
            radius,
            csv,
        } => {
            let row = cmd_eval(&queries, &db, &direction.to_string(), radius)?;
            if let Some(p) = csv {
                append_csv(&p, &row)?;
            }
            if cli.json {
                print_json(&row)?;
            } else {
                println!("{EVAL_TABLE_HEADER}");
                println!("{row}");
            }
        }
    }
    Ok(())
}
