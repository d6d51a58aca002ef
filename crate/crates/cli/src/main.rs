use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use nps::config::{PipelineConfig, Preset};
use nps::graph::import_graph;
use nps::pipeline::{self, Artifacts, FailureKind, StageError};
use nps::snapshot::{context_at, LabelIndex, SnapshotBuilder};
use nps::tracer::read_trace;

#[derive(Parser)]
#[command(name = "nps", version, about = "Neural program sampling toolchain")]
struct Cli {
    /// TOML pipeline configuration; relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base preset the configuration is layered over.
    #[arg(long, global = true, value_enum, default_value_t = PresetArg::Desk)]
    preset: PresetArg,
    /// Master seed; overrides the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Desk,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the assembly program and report its shape.
    Parse {
        /// Assembly file; defaults to the configured one.
        asm: Option<PathBuf>,
        /// Print the canonical instruction listing.
        #[arg(long)]
        dump_ir: bool,
    },
    /// Execute the program and write the trace.
    Trace {
        /// Assembly file; overrides the configured one.
        #[arg(long)]
        asm: Option<PathBuf>,
        /// Initial state TOML; overrides the configured one.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Dynamic instruction budget.
        #[arg(long)]
        max_insts: Option<u64>,
        /// Trace file; defaults to trace.txt in the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the program graph and write it as JSON.
    BuildGraph,
    /// Dump the snapshot rooted at one trace position as JSON.
    Snapshot {
        /// Trace position (0-based dynamic instruction).
        #[arg(long)]
        at: usize,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the network on labelled snapshots of the trace.
    Train,
    /// Compute one embedding per execution interval.
    Embed,
    /// Cluster interval embeddings and BBVs into simulation points.
    Sample,
    /// Score both samplings against the synthetic CPI model.
    Eval,
    /// Project embeddings onto two principal components.
    Pca,
    /// Compare two evaluation files row by row.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage in order.
    Pipeline,
}

enum Failure {
    User(String),
    Internal(String),
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        match e.kind {
            FailureKind::User => Failure::User(e.to_string()),
            FailureKind::Internal => Failure::Internal(e.to_string()),
        }
    }
}

fn config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let preset = match cli.preset {
        PresetArg::Desk => Preset::Desk,
        PresetArg::Paper => Preset::Paper,
    };
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p, preset).map_err(|e| Failure::User(e.to_string()))?,
        None => PipelineConfig::from_toml("", preset, Path::new("")).map_err(|e| Failure::User(e.to_string()))?,
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    cfg.finalize().map_err(|e| Failure::User(e.to_string()))
}

fn print_epoch(e: &nps::nn::EpochStats) {
    eprintln!(
        "epoch {:>3}  loss {:.4}  train acc {:.4}  test acc {:.4}",
        e.epoch, e.train_loss, e.train_accuracy, e.test_accuracy
    );
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Parse { asm, dump_ir } => {
            let path = match asm {
                Some(p) => p.clone(),
                None => config(cli)?.paths.asm,
            };
            let text = std::fs::read_to_string(&path).map_err(|e| Failure::User(format!("{}: {e}", path.display())))?;
            let p = nps::asm::parse_program(&text).map_err(|e| Failure::User(format!("{}: {e}", path.display())))?;
            if *dump_ir {
                print!("{}", p.dump_ir());
            } else {
                println!(
                    "{} instructions, {} labels, {} data words, hash {:016x}",
                    p.len(),
                    p.labels.len(),
                    p.data.len(),
                    p.content_hash()
                );
            }
        }
        Command::Trace { asm, init, max_insts, out } => {
            let mut cfg = config(cli)?;
            if let Some(p) = asm {
                cfg.paths.asm = p.clone();
            }
            if init.is_some() {
                cfg.paths.init = init.clone();
            }
            if let Some(n) = max_insts {
                cfg.trace.max_instructions = *n;
            }
            let t = match out {
                Some(path) => pipeline::trace_to(&cfg, path)?,
                None => pipeline::stage_trace(&cfg)?,
            };
            println!("{} records{}", t.len(), if t.truncated { " (truncated at budget)" } else { "" });
        }
        Command::BuildGraph => {
            let g = pipeline::stage_graph(&config(cli)?)?;
            println!("{} nodes, {} edges", g.node_count(), g.edge_count());
        }
        Command::Snapshot { at, out } => {
            let cfg = config(cli)?;
            let a = Artifacts::new(&cfg);
            let p = pipeline::load_program(&cfg)?;
            let g = import_graph(&a.graph()).map_err(|e| Failure::User(e.to_string()))?;
            let t = read_trace(&a.trace()).map_err(|e| Failure::User(e.to_string()))?;
            if *at >= t.len() {
                return Err(Failure::User(format!("position {at} is past the end of a {}-record trace", t.len())));
            }
            let ctx = context_at(&p, &t, *at).map_err(|e| Failure::User(e.to_string()))?;
            let labels = LabelIndex::new(&t);
            let mut b = SnapshotBuilder::new(&p, &g);
            let s = b
                .extract(t.records[*at].inst_index as usize, &ctx, *at, Some(&labels))
                .map_err(|e| Failure::Internal(e.to_string()))?;
            match out {
                Some(path) => s.dump(path).map_err(|e| Failure::User(e.to_string()))?,
                None => println!("{}", s.to_json()),
            }
        }
        Command::Train => {
            let r = pipeline::stage_train(&config(cli)?, print_epoch)?;
            if let Some(e) = r.epochs.last() {
                println!("test prefetch accuracy {:.4}", e.test_accuracy);
            }
        }
        Command::Embed => {
            let m = pipeline::stage_embed(&config(cli)?)?;
            println!("{} interval embeddings of width {}", m.rows.len(), m.h);
        }
        Command::Sample => {
            let s = pipeline::stage_sample(&config(cli)?)?;
            println!("nps k = {}, bbv k = {}", s.nps.k, s.bbv.k);
        }
        Command::Eval => {
            let e = pipeline::stage_eval(&config(cli)?)?;
            println!("nps    k {:>2}  MAPE {:.4}  ME {:.4}", e.nps.k, e.nps.mape, e.nps.me);
            println!("bbv    k {:>2}  MAPE {:.4}  ME {:.4}", e.bbv.k, e.bbv.mape, e.bbv.me);
            println!("random median MAPE {:.4} over {} runs", e.random_median_mape, e.random.len());
        }
        Command::Pca => {
            if !pipeline::stage_pca(&config(cli)?)? {
                eprintln!("warning: all embeddings are identical; both components are zero");
            }
        }
        Command::Compare { a, b, out } => {
            let rows = pipeline::compare_files(a, b)?;
            for r in &rows {
                println!(
                    "{}: MAPE {:.4} vs {:.4}, ME {:.4} vs {:.4}, MAPE reduction {:.1}%",
                    r.label,
                    r.mape_a,
                    r.mape_b,
                    r.me_a,
                    r.me_b,
                    100.0 * r.reduction
                );
            }
            if let Some(out) = out {
                pipeline::write_comparison(&rows, out)?;
            }
        }
        Command::Pipeline => {
            let cfg = config(cli)?;
            let r = pipeline::run_pipeline(&cfg, print_epoch)?;
            let e = &r.evaluation;
            println!("nps    k {:>2}  MAPE {:.4}  ME {:.4}", e.nps.k, e.nps.mape, e.nps.me);
            println!("bbv    k {:>2}  MAPE {:.4}  ME {:.4}", e.bbv.k, e.bbv.mape, e.bbv.me);
            println!("random median MAPE {:.4}", e.random_median_mape);
            println!("artifacts in {}", cfg.paths.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(2)
        }
    }
}
