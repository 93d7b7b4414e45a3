use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use natscale::pipeline::{
    read_report_records, render_report, run_pipeline_with, ModelKind, PipelineConfig, PipelineOutcome, Stage,
    TableStyle,
};

/// Desk-scale NAT scaling experiments: synthetic data, AT/MaskT/GLAT
/// training, distillation, decoding, metrics, probes and speed.
#[derive(Parser)]
#[command(name = "natscale", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpora and vocabulary.
    GenerateData(Common),
    /// Train the student model, or the AT teacher with --teacher.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: bool,
    },
    /// Build the distilled corpus with the teacher.
    Distill(Common),
    /// Decode the test set.
    Decode(Common),
    /// Score the decoded test set.
    Evaluate(Common),
    /// Measure Speed1 and Speed_max.
    BenchSpeed(Common),
    /// Run the SeLen and WC probes on the trained encoder.
    Probe(Common),
    /// Run every stage listed in the config.
    Run(Common),
    /// Render report files as a markdown table.
    Report {
        /// JSON-lines report files.
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// table1, table3, table4 or table7.
        #[arg(long, default_value = "table1")]
        style: TableStyle,
    },
    /// Print the default configuration.
    DefaultConfig,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML pipeline config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Student architecture preset.
    #[arg(long)]
    preset: Option<String>,
    /// Student model: at, maskt or glat.
    #[arg(long)]
    kind: Option<ModelKind>,
    /// Mask-predict iterations (T).
    #[arg(short = 'T', long)]
    iterations: Option<usize>,
    /// Length beam (B).
    #[arg(short = 'B', long)]
    length_beam: Option<usize>,
    /// Token budget for Speed_max.
    #[arg(long)]
    token_budget: Option<usize>,
    /// Train the student on the raw corpus instead of the distilled one.
    #[arg(long)]
    raw: bool,
    /// Rerun stages even when their stamps are current.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn config(&self, stages: Option<Vec<Stage>>) -> anyhow::Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(p) = &self.preset {
            cfg.model.preset = p.clone();
            cfg.model.arch = None;
        }
        if let Some(k) = self.kind {
            cfg.model.kind = k;
        }
        if let Some(t) = self.iterations {
            cfg.decode.iterations = t;
        }
        if let Some(b) = self.length_beam {
            cfg.decode.length_beam = b;
        }
        if let Some(b) = self.token_budget {
            cfg.speed.token_budget = b;
        }
        if self.raw {
            cfg.use_distilled = false;
        }
        if let Some(s) = stages {
            cfg.stages = s;
        }
        Ok(cfg.resolved())
    }
}

fn summarize(out: &PipelineOutcome) {
    for s in &out.skipped {
        eprintln!("{s}: up to date");
    }
    for s in &out.ran {
        eprintln!("{s}: done");
    }
}

fn run_stage(common: &Common, stage: Stage) -> anyhow::Result<PipelineConfig> {
    let cfg = common.config(Some(vec![stage]))?;
    let out = run_pipeline_with(&cfg, common.force)?;
    summarize(&out);
    Ok(cfg)
}

fn print_file(path: PathBuf) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    print!("{text}");
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenerateData(c) => {
            run_stage(&c, Stage::Generate)?;
        }
        Command::Train { common, teacher } => {
            run_stage(&common, if teacher { Stage::TrainTeacher } else { Stage::TrainNat })?;
        }
        Command::Distill(c) => {
            run_stage(&c, Stage::Distill)?;
        }
        Command::Decode(c) => {
            let cfg = run_stage(&c, Stage::Decode)?;
            println!("{}", cfg.output_dir.join("test.hyp.txt").display());
        }
        Command::Evaluate(c) => {
            let cfg = run_stage(&c, Stage::Evaluate)?;
            print_file(cfg.output_dir.join("metrics.jsonl"))?;
        }
        Command::BenchSpeed(c) => {
            let cfg = run_stage(&c, Stage::BenchSpeed)?;
            print_file(cfg.output_dir.join("speed.jsonl"))?;
        }
        Command::Probe(c) => {
            let cfg = run_stage(&c, Stage::Probe)?;
            print_file(cfg.output_dir.join("probes.jsonl"))?;
        }
        Command::Run(c) => {
            let cfg = c.config(None)?;
            let out = run_pipeline_with(&cfg, c.force)?;
            summarize(&out);
            if out.metrics.is_some() {
                print_file(cfg.output_dir.join("metrics.jsonl"))?;
            }
        }
        Command::Report { files, style } => {
            let records = read_report_records(&files)?;
            print!("{}", render_report(&records, style)?);
        }
        Command::DefaultConfig => {
            print!("{}", PipelineConfig::default().to_toml()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
