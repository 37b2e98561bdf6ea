mod config;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use tdeval::annotate::{self, AnnotationStore, StoreOptions};
use tdeval::client::{ChatBackend, HttpClient};
use tdeval::dataset::{self, EXPORT_FORMAT_VERSION};
use tdeval::metaeval::{self, AnnotatorScores, AverageMode, SubjectiveItem};
use tdeval::oracle::{self, OracleServer};
use tdeval::pipeline::{BatchPaths, FailurePolicy, Pipeline};
use tdeval::prompts::{SubjectiveKind, TemplateSet};
use tdeval::record::{read_dataset, read_lines, write_dataset, EvaluationRecord, Variant};

use config::{default_parallelism, EndpointArgs, FileConfig};

#[derive(Parser)]
#[command(name = "tdeval", version, about = "Task-decomposed text-to-image evaluation toolkit")]
struct Cli {
    /// TOML config file; flags and environment take precedence over it.
    #[arg(long, global = true, env = "TDEVAL_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    MeanThenCorrelate,
    MeanOfCorrelations,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Fine,
    Coarse,
}

#[derive(Clone, Copy, ValueEnum)]
enum StatsInput {
    Auto,
    Records,
    Samples,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate text-image pairs (a records file) against a chat endpoint.
    Evaluate {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// full, no_extraction, no_captioning, no_answering, merged_cag_es
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        parallelism: Option<usize>,
        /// skip_record, zero_score or halt
        #[arg(long)]
        failure_policy: Option<FailurePolicy>,
        #[arg(long)]
        retries: Option<u32>,
        /// Directory of template overrides (`<name>.md`).
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Run report path; defaults to `<out>.report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        evaluator: Option<String>,
        #[command(flatten)]
        endpoint: EndpointArgs,
    },
    /// Expand complete records into training samples.
    Expand {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score-rebalance then sub-task-rebalance a samples file.
    Rebalance {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the fine-tuning conversation export here.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Write the conversation export for a samples file.
    Export {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Shuffle seed; without it the input order is kept.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Counts and score histograms of a records or samples file.
    Stats {
        file: PathBuf,
        #[arg(long, value_enum, default_value = "auto")]
        input: StatsInput,
        #[arg(long)]
        json: bool,
    },
    /// Rank correlations between model scores and annotator scores.
    Metaeval {
        /// Records file with model overall scores.
        #[arg(long)]
        model: Option<PathBuf>,
        /// One records file per annotator.
        #[arg(long = "annotator", required = true)]
        annotators: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "mean-then-correlate")]
        mode: ModeArg,
        /// Compare each annotator with the others instead of a model.
        #[arg(long)]
        upper_bound: bool,
        #[arg(long)]
        json: bool,
    },
    /// Reference-guided scoring of generated explanations.
    Subjective {
        /// JSON lines of {id, question?, reference_explanation, generated_explanation}.
        #[arg(long)]
        items: PathBuf,
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long, default_value_t = 2)]
        retries: u32,
        #[arg(long)]
        templates: Option<PathBuf>,
        #[command(flatten)]
        endpoint: EndpointArgs,
    },
    /// Serve the annotation API for a benchmark directory.
    ServeAnnotator {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 8787)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Offer machine extractions as a starting point.
        #[arg(long)]
        prefill: bool,
        #[arg(long, env = "ANNOTATOR_TOKEN", hide_env_values = true)]
        token: Option<String>,
    },
    /// Serve the offline judge on the chat-completions wire format.
    OracleServe {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Also write a synthetic benchmark under this directory first.
        #[arg(long)]
        emit: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a synthetic benchmark: pairs.jsonl, scenes.jsonl and images/.
    OracleScenes {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

/// Writes through a temporary file so that failures leave no partial output.
fn write_atomic(path: &Path, body: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, body).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

fn seed_or_generate(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random::<u64>();
        println!("seed: {s}");
        s
    })
}

fn templates(dir: Option<&Path>) -> Result<TemplateSet> {
    match dir {
        Some(d) => TemplateSet::with_overrides(d).with_context(|| format!("templates in {}", d.display())),
        None => Ok(TemplateSet::builtin()),
    }
}

fn annotator_file(path: &Path) -> Result<AnnotatorScores> {
    let records = read_dataset(&read(path)?).with_context(|| path.display().to_string())?;
    let id = records
        .first()
        .map(|r| r.provenance.evaluator.clone())
        .filter(|e| !e.is_empty())
        .or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_default();
    Ok(annotate::annotator_scores(&id, &records))
}

fn model_scores(records: &[EvaluationRecord]) -> BTreeMap<String, f64> {
    records
        .iter()
        .filter(|r| r.failure.is_none())
        .filter_map(|r| r.overall_score().map(|s| (r.id.clone(), f64::from(s))))
        .collect()
}

async fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Evaluate {
            pairs,
            out,
            variant,
            parallelism,
            failure_policy,
            retries,
            templates: tdir,
            report,
            evaluator,
            endpoint,
        } => {
            let pairs = read_dataset(&read(&pairs)?).with_context(|| pairs.display().to_string())?;
            let endpoint = endpoint.merge(file.endpoint.clone());
            let client = HttpClient::new(endpoint.clone())?;
            let ledger = client.ledger();
            let mut config = file.pipeline.clone();
            if let Some(v) = variant {
                config.variant = v;
            }
            if let Some(p) = failure_policy {
                config.failure_policy = p;
            }
            if let Some(r) = retries {
                config.retry_on_parse_failure = r;
            }
            config.evaluator = evaluator.unwrap_or_else(|| endpoint.model_name.clone());
            let tset = templates(tdir.as_deref().or(file.templates.as_deref()))?;
            let parallelism = parallelism.or(file.parallelism).unwrap_or_else(|| default_parallelism(&endpoint));
            let backend: Arc<dyn ChatBackend> = Arc::new(client);
            let pipeline = Pipeline::new(config, tset, backend);
            let paths = BatchPaths::beside(&out);
            let mut run_report = pipeline.evaluate_batch(&pairs, parallelism, &paths).await?;
            run_report.usage = Some(ledger.snapshot());
            let report_path = report.unwrap_or_else(|| {
                let mut p = out.as_os_str().to_owned();
                p.push(".report.json");
                p.into()
            });
            write_atomic(&report_path, &serde_json::to_string_pretty(&run_report)?)?;
            println!(
                "ok {} zero_score {} refusal {} content_absence {} repetition {} malformed {} transport {} input {} resumed {}",
                run_report.ok,
                run_report.zero_score,
                run_report.refusal,
                run_report.content_absence,
                run_report.repetition,
                run_report.malformed,
                run_report.transport,
                run_report.input,
                run_report.resumed
            );
            if run_report.halted {
                bail!("halted: {}", run_report.errors.last().cloned().unwrap_or_default());
            }
        }
        Command::Expand { records, out } => {
            let records = read_dataset(&read(&records)?).with_context(|| records.display().to_string())?;
            let samples = dataset::expand_all(&records)?;
            write_atomic(&out, &dataset::write_samples(&samples))?;
            println!("{} samples from {} records", samples.len(), records.len());
        }
        Command::Rebalance { samples, out, seed, export } => {
            let samples = dataset::read_samples(&read(&samples)?).with_context(|| samples.display().to_string())?;
            let seed = seed_or_generate(seed);
            let (balanced, report) = dataset::rebalance_dataset(&samples, seed)?;
            for (group, plan) in &report.score_plans {
                println!("{group}: before {:?} target {} after {:?}", plan.bin_counts_before, plan.target_per_bin, plan.counts_after());
            }
            println!("sub-task factor {}", report.subtask_factor);
            write_atomic(&out, &dataset::write_samples(&balanced))?;
            if let Some(e) = export {
                write_atomic(&e, &dataset::export_conversations(&balanced, EXPORT_FORMAT_VERSION, Some(seed))?)?;
            }
        }
        Command::Export { samples, out, seed } => {
            let samples = dataset::read_samples(&read(&samples)?).with_context(|| samples.display().to_string())?;
            write_atomic(&out, &dataset::export_conversations(&samples, EXPORT_FORMAT_VERSION, seed)?)?;
        }
        Command::Stats { file: path, input, json } => {
            let text = read(&path)?;
            let stats = match input {
                StatsInput::Records => dataset::record_stats(&read_dataset(&text)?),
                StatsInput::Samples => dataset::sample_stats(&dataset::read_samples(&text)?),
                StatsInput::Auto => match read_dataset(&text) {
                    Ok(r) => dataset::record_stats(&r),
                    Err(_) => dataset::sample_stats(
                        &dataset::read_samples(&text).context("neither a records nor a samples file")?,
                    ),
                },
            };
            if json {
                println!("{}", serde_json::to_string_pretty(&stats)?);
            } else {
                print!("{}", stats.render());
            }
        }
        Command::Metaeval { model, annotators, mode, upper_bound, json } => {
            let anns: Vec<AnnotatorScores> = annotators.iter().map(|p| annotator_file(p)).collect::<Result<_>>()?;
            let mode = match mode {
                ModeArg::MeanThenCorrelate => AverageMode::MeanThenCorrelate,
                ModeArg::MeanOfCorrelations => AverageMode::MeanOfCorrelations,
            };
            let mut rows = Vec::new();
            if let Some(m) = &model {
                let records = read_dataset(&read(m)?)?;
                rows.push(("model".to_string(), metaeval::correlation_report(&model_scores(&records), &anns, mode)?));
            }
            if upper_bound {
                rows.push(("upper bound".to_string(), metaeval::upper_bound_report(&anns)?));
            }
            if rows.is_empty() {
                bail!("give --model, --upper-bound or both");
            }
            if json {
                let map: BTreeMap<_, _> = rows.into_iter().collect();
                println!("{}", serde_json::to_string_pretty(&map)?);
            } else {
                print!("{}", metaeval::format_table(&rows));
            }
        }
        Command::Subjective { items, kind, retries, templates: tdir, endpoint } => {
            let items: Vec<SubjectiveItem> = read_lines(&read(&items)?)?;
            let endpoint = endpoint.merge(file.endpoint.clone());
            let concurrency = endpoint.max_concurrency;
            let client = HttpClient::new(endpoint)?;
            let kind = match kind {
                KindArg::Fine => SubjectiveKind::Fine,
                KindArg::Coarse => SubjectiveKind::Coarse,
            };
            let tset = templates(tdir.as_deref().or(file.templates.as_deref()))?;
            let report = metaeval::subjective_eval(&client, &tset, &items, kind, retries, concurrency).await?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::ServeAnnotator { dir, port, host, prefill, token } => {
            let store = AnnotationStore::open(&dir, StoreOptions { prefill, token })?;
            let addr: SocketAddr = format!("{host}:{port}").parse()?;
            let (local, handle) = annotate::spawn(Arc::new(store), addr).await?;
            println!("annotator api on http://{local}/v1");
            handle.await?;
        }
        Command::OracleServe { port, host, emit, count, seed } => {
            if let Some(dir) = emit {
                emit_scenes(&dir, count, seed_or_generate(seed))?;
            }
            let addr: SocketAddr = format!("{host}:{port}").parse()?;
            let (local, handle) = OracleServer::default().spawn(addr).await?;
            println!("oracle endpoint on http://{local}/v1");
            handle.await?;
        }
        Command::OracleScenes { out, count, seed } => {
            emit_scenes(&out, count, seed_or_generate(seed))?;
        }
    }
    Ok(())
}

fn emit_scenes(dir: &Path, count: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
    let made = oracle::synthetic_pairs(seed, count, &dir.join("images"))?;
    let (records, scenes): (Vec<_>, Vec<_>) = made.into_iter().unzip();
    write_atomic(&dir.join("pairs.jsonl"), &write_dataset(&records))?;
    let lines: String = scenes.iter().map(|s| serde_json::to_string(s).expect("scenes serialize") + "\n").collect();
    write_atomic(&dir.join("scenes.jsonl"), &lines)?;
    println!("{count} pairs in {}", dir.display());
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let command = std::env::args().nth(1).unwrap_or_default();
    match run(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            let summary = serde_json::json!({"error": {"command": command, "message": e.to_string(), "causes": chain}});
            eprintln!("{summary}");
            ExitCode::FAILURE
        }
    }
}
