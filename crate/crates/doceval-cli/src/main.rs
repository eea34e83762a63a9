//! Command-line interface: corpus generation, layout serialization,
//! evaluation runs, and report re-emission.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use doceval::gateway::CassetteMode;
use doceval::layout::{serialize_document, DEFAULT_GRID_COLS, DEFAULT_ROW_TOLERANCE};
use doceval::report::{emit_cost_table, emit_error_report, emit_score_table, ScoreMatrix};
use doceval::run::{load_run_ledger, read_json_artifact, run_eval, run_offline, RunConfig};
use doceval::synth::{write_corpus, CorpusProfile};
use doceval::triage::attribution::AttributionReport;
use doceval::triage::handler::DiscrepancyKind;
use doceval::DocumentFixture;

#[derive(Parser)]
#[command(
    name = "doceval",
    version,
    about = "Document information-extraction evaluation and error triage"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic corpus operations.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Layout-text serialization.
    #[command(subcommand)]
    Layout(LayoutCommand),
    /// Evaluation runs.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Re-emit reports from a finished run directory.
    #[command(subcommand)]
    Report(ReportCommand),
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Generate fixtures, gold records, and (optionally) injected
    /// predictions with their injection manifest.
    Gen(CorpusGenArgs),
}

#[derive(Args)]
struct CorpusGenArgs {
    /// Output directory for the corpus.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    docs: usize,
    #[arg(long, default_value_t = 1)]
    items_min: usize,
    #[arg(long, default_value_t = 4)]
    items_max: usize,
    /// Dataset ids assigned round-robin.
    #[arg(long, default_value = "C1,C2", value_delimiter = ',')]
    datasets: Vec<String>,
    /// Error injection rates, e.g. `missing=0.2,homoglyph=0.1`.
    #[arg(long, value_delimiter = ',')]
    inject: Vec<String>,
}

#[derive(Subcommand)]
enum LayoutCommand {
    /// Serialize a fixture file into layout-preserving text.
    Serialize(LayoutSerializeArgs),
}

#[derive(Args)]
struct LayoutSerializeArgs {
    /// Fixture JSON file.
    #[arg(long)]
    fixture: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GRID_COLS)]
    cols: usize,
    #[arg(long, default_value_t = DEFAULT_ROW_TOLERANCE)]
    row_tolerance: f64,
    /// Output file; stdout when omitted.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Full evaluation run driven by a TOML config file.
    Run(EvalRunArgs),
    /// Score pre-computed prediction files from a corpus manifest, with
    /// heuristic triage and no model calls.
    Offline(EvalOfflineArgs),
}

#[derive(Args)]
struct EvalRunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the prompt template from the config.
    #[arg(long, value_enum)]
    template: Option<CliTemplate>,
    /// Override the cassette mode from the config.
    #[arg(long, value_enum)]
    mode: Option<CliCassetteMode>,
    /// Override the in-flight request bound.
    #[arg(long)]
    max_inflight: Option<usize>,
    /// Override the cost budget; paid calls stop once spend reaches it.
    #[arg(long)]
    budget: Option<f64>,
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum CliCassetteMode {
    Record,
    Replay,
    Passthrough,
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum CliTemplate {
    Baseline,
    Refined,
}

#[derive(Args)]
struct EvalOfflineArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Clustering similarity threshold.
    #[arg(long, default_value_t = 0.8)]
    tau: f64,
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Print the model-by-modality score table.
    Score(RunDirArgs),
    /// Print the per-modality error distribution.
    Errors(RunDirArgs),
    /// Print the per-model cost/latency table.
    Cost(RunDirArgs),
}

#[derive(Args)]
struct RunDirArgs {
    /// A finished run directory.
    #[arg(long)]
    run: PathBuf,
}

fn parse_inject(specs: &[String]) -> Result<std::collections::BTreeMap<DiscrepancyKind, f64>> {
    let mut noise = std::collections::BTreeMap::new();
    for spec in specs {
        let (kind_text, rate_text) = spec
            .split_once('=')
            .with_context(|| format!("expected kind=rate, got {spec:?}"))?;
        let kind: DiscrepancyKind = serde_json::from_value(serde_json::json!(kind_text))
            .with_context(|| format!("unknown error kind {kind_text:?}"))?;
        let rate: f64 = rate_text
            .parse()
            .with_context(|| format!("bad rate in {spec:?}"))?;
        if !(0.0..=1.0).contains(&rate) {
            bail!("rate must be within [0, 1]: {spec:?}");
        }
        noise.insert(kind, rate);
    }
    Ok(noise)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Corpus(CorpusCommand::Gen(args)) => {
            let profile = CorpusProfile {
                seed: args.seed,
                doc_count: args.docs,
                items_per_doc: (args.items_min, args.items_max),
                noise: parse_inject(&args.inject)?,
                ..CorpusProfile::default()
            };
            let manifest = write_corpus(&profile, &args.out, &args.datasets)
                .with_context(|| format!("writing corpus to {}", args.out.display()))?;
            println!("wrote {} documents to {}", manifest.docs.len(), args.out.display());
        }
        Command::Layout(LayoutCommand::Serialize(args)) => {
            let text = std::fs::read_to_string(&args.fixture)
                .with_context(|| args.fixture.display().to_string())?;
            let fixture = DocumentFixture::from_json(&text).map_err(|e| anyhow::anyhow!(e))?;
            let serialized = serialize_document(&fixture, args.cols, args.row_tolerance)?;
            match args.out {
                Some(path) => std::fs::write(&path, serialized + "\n")
                    .with_context(|| path.display().to_string())?,
                None => println!("{serialized}"),
            }
        }
        Command::Eval(EvalCommand::Run(args)) => {
            let mut config = RunConfig::from_toml_file(&args.config)?;
            if let Some(template) = args.template {
                config.template = match template {
                    CliTemplate::Baseline => doceval::prompt::TemplateId::Baseline,
                    CliTemplate::Refined => doceval::prompt::TemplateId::Refined,
                };
            }
            if let Some(mode) = args.mode {
                config.cassette.mode = match mode {
                    CliCassetteMode::Record => CassetteMode::Record,
                    CliCassetteMode::Replay => CassetteMode::Replay,
                    CliCassetteMode::Passthrough => CassetteMode::Passthrough,
                };
            }
            if let Some(max_inflight) = args.max_inflight {
                config.gateway.max_inflight = max_inflight;
            }
            if let Some(budget) = args.budget {
                config.gateway.budget = Some(budget);
            }
            let summary = run_eval(&config)?;
            println!("run complete: {}", config.out_dir.display());
            for (combo, tallies) in &summary.per_combo {
                println!(
                    "  {combo}: scored {}/{} (parse failures {}, cassette misses {}, missing input {}, transport errors {})",
                    tallies.scored,
                    tallies.docs,
                    tallies.parse_failures,
                    tallies.cassette_misses,
                    tallies.missing_input,
                    tallies.transport_errors,
                );
            }
            println!("  errors: {}  cost: {:.4}", summary.total_errors, summary.total_cost);
        }
        Command::Eval(EvalCommand::Offline(args)) => {
            let summary = run_offline(&args.corpus, &args.out, args.tau)?;
            println!("offline run complete: {}", args.out.display());
            println!("  errors: {}", summary.total_errors);
        }
        Command::Report(ReportCommand::Score(args)) => {
            let payload = read_json_artifact(&args.run.join("scores/matrix.json"), "matrix")
                .context("scores/matrix.json (is this a run directory?)")?;
            let matrix: ScoreMatrix = serde_json::from_value(payload)?;
            print!("{}", emit_score_table(&matrix));
        }
        Command::Report(ReportCommand::Errors(args)) => {
            let payload =
                read_json_artifact(&args.run.join("triage/attribution.json"), "attribution")
                    .context("triage/attribution.json (is this a run directory?)")?;
            let attribution: AttributionReport = serde_json::from_value(payload)?;
            print!("{}", emit_error_report(&attribution));
        }
        Command::Report(ReportCommand::Cost(args)) => {
            let entries = load_run_ledger(&args.run)?;
            print!("{}", emit_cost_table(&entries));
        }
    }
    Ok(())
}
