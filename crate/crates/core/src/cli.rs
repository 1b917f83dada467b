//! Command-line driver.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{load_config, PipelineConfig};
use crate::datastore::{load_dataset, write_head_checkpoint, HeadCheckpoint};
use crate::error::{Error, Result};
use crate::inference::{read_detections_jsonl, write_detections_jsonl, ScoringMode};
use crate::pipeline::{self, OutputLayout, SweepParam};
use crate::probe::concat_heads;
use crate::retrieval::PseudoLabelSet;

#[derive(Debug, Parser)]
#[command(name = "ovprobe", version, about = "Open-vocabulary detection heads on precomputed region features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Pipeline config (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed (overrides the config's `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset into --out.
    Synth(Common),
    /// Train the base sigmoid head and distillation projector.
    TrainBase(Common),
    /// Retrieve top-K pseudo labels for novel classes.
    Retrieve(Common),
    /// Train the novel head on pseudo labels and build the unified head.
    Probe(Common),
    /// Run detection on the test split.
    Infer(Common),
    /// Evaluate detections (AP50).
    Eval(Common),
    /// Run every stage end to end.
    RunAll(Common),
    /// Sweep K or beta and write AP_novel per value.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `k` or `beta`.
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Component ablations (objectness, retrieval, similarity baseline).
    Ablate(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth(c)
            | Command::TrainBase(c)
            | Command::Retrieve(c)
            | Command::Probe(c)
            | Command::Infer(c)
            | Command::Eval(c)
            | Command::RunAll(c)
            | Command::Ablate(c) => c,
            Command::Sweep { common, .. } => common,
        }
    }
}

fn resolve_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Parse { .. } | Error::Range { .. } | Error::InvalidConfig(_) => 2,
        _ => 1,
    }
}

/// Parses `argv` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run_subcommand<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = resolve_config(cli.command.common()).and_then(|cfg| execute(&cli.command, &cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(command: &Command, cfg: &PipelineConfig) -> Result<()> {
    let layout = OutputLayout::new(&cfg.out);
    match command {
        Command::Synth(_) => {
            let (dataset, manifest) = pipeline::synthesize(cfg, &cfg.out)?;
            println!(
                "wrote {} ({} images, {} proposals)",
                manifest.display(),
                dataset.images.len(),
                dataset.proposals.len()
            );
        }
        Command::TrainBase(_) => {
            layout.ensure()?;
            let dataset = load_dataset(&cfg.manifest_path())?;
            let ckpt = pipeline::train_base(&dataset, cfg)?;
            let path = layout.path(pipeline::BASE_HEAD_FILE);
            write_head_checkpoint(&path, &ckpt)?;
            println!("wrote {}", path.display());
        }
        Command::Retrieve(_) => {
            layout.ensure()?;
            let dataset = load_dataset(&cfg.manifest_path())?;
            let pseudo = pipeline::retrieve(&dataset, cfg, cfg.k)?;
            let path = layout.path(pipeline::PSEUDO_LABELS_FILE);
            pseudo.write_json(&path)?;
            println!("wrote {} ({} pseudo labels)", path.display(), pseudo.len());
        }
        Command::Probe(_) => {
            let dataset = load_dataset(&cfg.manifest_path())?;
            let pseudo = PseudoLabelSet::read_json(&layout.path(pipeline::PSEUDO_LABELS_FILE))?;
            let base = pipeline::read_checkpoint(&layout, pipeline::BASE_HEAD_FILE)?;
            let novel = pipeline::probe(&dataset, &pseudo, cfg)?;
            write_head_checkpoint(
                &layout.path(pipeline::NOVEL_HEAD_FILE),
                &HeadCheckpoint {
                    head: novel.clone(),
                    projector: None,
                },
            )?;
            let unified = HeadCheckpoint {
                head: concat_heads(&base.head, &novel)?,
                projector: base.projector,
            };
            let path = layout.path(pipeline::UNIFIED_HEAD_FILE);
            write_head_checkpoint(&path, &unified)?;
            println!("wrote {}", path.display());
        }
        Command::Infer(_) => {
            let dataset = load_dataset(&cfg.manifest_path())?;
            let unified = pipeline::read_checkpoint(&layout, pipeline::UNIFIED_HEAD_FILE)?;
            let dets = pipeline::infer(&dataset, Some(&unified.head), &unified, &cfg.fusion(), ScoringMode::Fused)?;
            let path = layout.path(pipeline::DETECTIONS_FILE);
            write_detections_jsonl(&path, &dets)?;
            println!("wrote {} ({} detections)", path.display(), dets.len());
        }
        Command::Eval(_) => {
            let dataset = load_dataset(&cfg.manifest_path())?;
            let dets = read_detections_jsonl(&layout.path(pipeline::DETECTIONS_FILE))?;
            let report = pipeline::evaluate(&dataset, &dets, cfg)?;
            pipeline::write_report(&dataset, &report, &layout)?;
            print!("{}", report.to_table(&dataset));
        }
        Command::RunAll(_) => {
            let outcome = pipeline::run_all(cfg, &layout)?;
            let r = &outcome.report;
            println!(
                "AP_novel {:.4}  AP_base {:.4}  AP {:.4}  -> {}",
                r.ap_novel,
                r.ap_base,
                r.ap_all,
                layout.path(pipeline::REPORT_FILE).display()
            );
        }
        Command::Sweep { param, values, .. } => {
            layout.ensure()?;
            let dataset = pipeline::load_or_synthesize(cfg, &layout)?;
            let rows = pipeline::sweep(&dataset, cfg, *param, values)?;
            let csv = pipeline::sweep_csv(*param, &rows);
            let path = layout.path(pipeline::SWEEP_FILE);
            std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
            print!("{csv}");
        }
        Command::Ablate(_) => {
            layout.ensure()?;
            let dataset = pipeline::load_or_synthesize(cfg, &layout)?;
            let rows = pipeline::ablate(&dataset, cfg)?;
            let csv = pipeline::ablation_csv(&rows);
            let path = layout.path(pipeline::ABLATION_FILE);
            std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
            print!("{csv}");
        }
    }
    Ok(())
}
