use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use kgetool::dataset::{load_dataset, load_tools, summarize, validate_against_kg};
use kgetool::evaluator::{aggregate, extract_tool_call, grade_tool_use, SampleRecord};
use kgetool::harness::{
    regrade_dir, write_outputs, write_report, EndpointConfig, Harness, HarnessError, ModeKind,
    RunConfig, Stages,
};
use kgetool::kg::KnowledgeGraph;
use kgetool::llm::ChatResponse;
use kgetool::path_extractor::Strategy;

/// Knowledge-graph augmented tool-use evaluation.
#[derive(Parser)]
#[command(name = "kgetool", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// golden | extracted | full_kg | documents | true_values
    #[arg(long, global = true)]
    mode: Option<ModeKind>,
    /// exact | greedy_search | relation_retrieval
    #[arg(long, global = true, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    /// Candidates per fake relation (relation retrieval).
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Documents retrieved per query (documents mode).
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Base URL used for endpoints that do not set one.
    #[arg(long, global = true)]
    base_url: Option<String>,
    #[arg(long, global = true)]
    extraction_model: Option<String>,
    #[arg(long, global = true)]
    tooluse_model: Option<String>,
    /// Answer model requests from this store instead of the network.
    #[arg(long, global = true)]
    replay: Option<PathBuf>,
    /// Append every live response to this store.
    #[arg(long, global = true)]
    record: Option<PathBuf>,
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true)]
    kg: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    tools: Option<PathBuf>,
    #[arg(long, global = true)]
    parallelism: Option<usize>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown strategy {s:?}"))
}

#[derive(Subcommand)]
enum Command {
    /// Run the extraction step only and grade the extracted links.
    Extract,
    /// Grade a file of tool-use model outputs against the dataset.
    Tooluse {
        /// JSON lines of `{"id", "text"}` or `{"id", "response": {...}}`.
        #[arg(long)]
        calls: PathBuf,
    },
    /// Run both steps end to end.
    Run,
    /// Re-grade the raw outputs logged in a run directory.
    Grade {
        run_dir: PathBuf,
    },
    /// Check the dataset against the KG and print statistics.
    Validate {
        /// Exit with status 1 when any sample is flagged.
        #[arg(long)]
        strict: bool,
    },
    /// Document-retrieval coverage for n = 1..=max_n.
    DocsBaseline {
        #[arg(long, default_value_t = 10)]
        max_n: usize,
    },
}

fn build_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = g.mode {
        cfg.mode.kind = m;
    }
    if let Some(s) = g.strategy {
        cfg.mode.strategy = s;
    }
    if let Some(k) = g.k {
        cfg.mode.k = k;
    }
    if let Some(n) = g.n {
        cfg.mode.n = Some(n);
    }
    if let Some(p) = g.parallelism {
        cfg.parallelism = p;
    }
    let set_model = |slot: &mut Option<EndpointConfig>, model: &Option<String>| {
        if let Some(model) = model {
            let base_url = slot
                .as_ref()
                .map(|e| e.base_url.clone())
                .or_else(|| g.base_url.clone())
                .unwrap_or_default();
            *slot = Some(EndpointConfig {
                base_url,
                model: model.clone(),
            });
        }
        if let (Some(ep), Some(url)) = (slot.as_mut(), &g.base_url) {
            if ep.base_url.is_empty() {
                ep.base_url = url.clone();
            }
        }
    };
    set_model(&mut cfg.endpoints.extraction, &g.extraction_model);
    set_model(&mut cfg.endpoints.tooluse, &g.tooluse_model);
    let p = &mut cfg.paths;
    for (slot, value) in [
        (&mut p.replay, &g.replay),
        (&mut p.record, &g.record),
        (&mut p.output_dir, &g.output),
        (&mut p.kg, &g.kg),
        (&mut p.dataset, &g.dataset),
        (&mut p.tools, &g.tools),
    ] {
        if value.is_some() {
            *slot = value.clone();
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn finish_run(cfg: &RunConfig, h: &Harness, stages: Stages) -> Result<()> {
    let outcome = h.run_corpus(stages)?;
    if let Some(dir) = &cfg.paths.output_dir {
        write_outputs(dir, cfg, &outcome)?;
        eprintln!("wrote {}", dir.display());
    }
    print!("{}", outcome.report.table());
    Ok(())
}

#[derive(Deserialize)]
struct CallLine {
    id: String,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    response: Option<ChatResponse>,
}

fn grade_calls(cfg: &RunConfig, calls: &Path) -> Result<()> {
    let dataset = cfg.paths.dataset.as_ref().context("--dataset is required")?;
    let samples = load_dataset(&fs::read_to_string(dataset)?)?;
    let mut records = Vec::new();
    for (i, line) in fs::read_to_string(calls)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: CallLine = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", calls.display(), i + 1))?;
        let sample = samples
            .iter()
            .find(|s| s.id == entry.id)
            .with_context(|| format!("unknown sample id {:?}", entry.id))?;
        let response = entry
            .response
            .or_else(|| entry.text.map(ChatResponse::text))
            .unwrap_or_default();
        let pred = extract_tool_call(&response);
        records.push(SampleRecord {
            id: entry.id,
            extraction: None,
            tool_use: Some(grade_tool_use(pred.as_ref(), &sample.gold_call)),
        });
    }
    let report = aggregate(records, cfg.label())?;
    if let Some(dir) = &cfg.paths.output_dir {
        fs::create_dir_all(dir)?;
        write_report(dir, &report)?;
    }
    print!("{}", report.table());
    Ok(())
}

fn validate(cfg: &RunConfig, strict: bool) -> Result<bool> {
    let kg_path = cfg.paths.kg.as_ref().context("--kg is required")?;
    let ds_path = cfg.paths.dataset.as_ref().context("--dataset is required")?;
    let kg = KnowledgeGraph::load(&fs::read_to_string(kg_path)?)?;
    let samples = load_dataset(&fs::read_to_string(ds_path)?)?;
    let tools = match &cfg.paths.tools {
        Some(p) => Some(load_tools(&fs::read_to_string(p)?)?),
        None => None,
    };
    let summary = summarize(&samples, tools.as_deref());
    let report = validate_against_kg(&samples, &kg);
    let out = json!({
        "dataset": summary,
        "kg": kg.stats(),
        "validation": report,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(!strict || report.is_clean())
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = build_config(&cli.global)?;
    match cli.command {
        Command::Extract => {
            if !matches!(cfg.mode.kind, ModeKind::Extracted | ModeKind::Documents) {
                bail!("extract needs --mode extracted or documents");
            }
            let h = Harness::from_config(cfg.clone())?;
            finish_run(&cfg, &h, Stages { extraction: true, tool_use: false })?;
        }
        Command::Run => {
            let h = Harness::from_config(cfg.clone())?;
            finish_run(&cfg, &h, Stages::BOTH)?;
        }
        Command::Tooluse { calls } => grade_calls(&cfg, &calls)?,
        Command::Grade { run_dir } => {
            let report = regrade_dir(&run_dir)?;
            if let Some(dir) = &cfg.paths.output_dir {
                fs::create_dir_all(dir)?;
                write_report(dir, &report)?;
            }
            print!("{}", report.summary_json());
        }
        Command::Validate { strict } => return validate(&cfg, strict),
        Command::DocsBaseline { max_n } => {
            if max_n == 0 {
                bail!("--max-n must be at least 1");
            }
            let mut cfg = cfg;
            cfg.mode.kind = ModeKind::Documents;
            cfg.mode.n.get_or_insert(1);
            let h = Harness::from_config(cfg.clone())?;
            let series = h.docs_baseline(1..=max_n)?;
            let text = serde_json::to_string_pretty(&json!({"series": series}))? + "\n";
            if let Some(dir) = &cfg.paths.output_dir {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("docs_baseline.json"), &text)?;
            }
            print!("{text}");
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("kgetool: {e:#}");
            if e.downcast_ref::<HarnessError>().is_some_and(|h| matches!(h, HarnessError::Config(_))) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
