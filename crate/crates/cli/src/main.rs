mod analyze;
mod manifest;
mod sweep;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mmtb_core::analysis::AvgDefinition;
use mmtb_core::routing::{effective_schema, route_tools, scan_modalities, DEFAULT_SCAN_DEPTH};
use mmtb_core::task_model::{list_suite, verify_media_integrity};
use mmtb_core::validation::{certify, CertifyOptions};
use mmtb_core::verifier::score;
use mmtb_core::{load_task, HarnessVariant};

use manifest::{Overrides, RunManifest, RuntimeChoice};

#[derive(Parser)]
#[command(
    name = "mmtb",
    version,
    about = "Multimedia terminal-agent benchmark harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RuntimeArgs {
    /// process, docker or podman
    #[arg(long, default_value = "process")]
    runtime: String,
    /// Image root for the process runtime.
    #[arg(long)]
    images: Option<PathBuf>,
}

impl RuntimeArgs {
    fn build(&self) -> Result<Box<dyn mmtb_core::sandbox::Runtime>> {
        Ok(RuntimeChoice::parse(&self.runtime, self.images.clone())?.build())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every agent in a manifest over a suite.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        parallelism: Option<usize>,
        #[arg(long)]
        budget_seconds: Option<u64>,
        #[arg(long)]
        rates: Option<PathBuf>,
        /// scripted:<dir>, scripted:oracle, scripted:null, http or http:<base-url>
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        runtime: Option<String>,
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Show the modalities found in a workspace and the tools it routes to.
    Route {
        dir: PathBuf,
        #[arg(long, default_value = "MM")]
        harness: String,
        #[arg(long)]
        json: bool,
    },
    /// Run the certification checks on one task directory.
    Certify {
        task: PathBuf,
        #[command(flatten)]
        rt: RuntimeArgs,
        #[arg(long)]
        media_cache: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Score a workspace snapshot against a task's evaluator.
    Score {
        snapshot: PathBuf,
        task: PathBuf,
        #[command(flatten)]
        rt: RuntimeArgs,
    },
    /// Post-hoc analyses over results files.
    Analyze {
        #[command(subcommand)]
        kind: AnalyzeKind,
    },
    /// Load every task in a suite and check media integrity.
    ValidateSuite { suite: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum AvgArg {
    MeanOfRatios,
    RatioOfMeans,
}

#[derive(Subcommand)]
enum AnalyzeKind {
    Regime {
        #[arg(long = "results", required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        #[arg(long)]
        suite: Option<PathBuf>,
    },
    MatchedPairs {
        #[arg(long = "results", required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        partial: String,
        #[arg(long)]
        mm: String,
        #[arg(long)]
        suite: PathBuf,
        /// Run directory holding the trajectory logs.
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        patterns: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "mean-of-ratios")]
        avg: AvgArg,
    },
    Failures {
        #[arg(long = "results", required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        agent: String,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    Tags {
        #[arg(long)]
        suite: PathBuf,
    },
}

fn route(dir: &Path, harness: &str, json: bool) -> Result<ExitCode> {
    let variant: HarnessVariant = harness.parse()?;
    let modalities = scan_modalities(dir, DEFAULT_SCAN_DEPTH)?;
    let schema = effective_schema(variant, dir)?;
    let tools: Vec<&str> = schema.tools.iter().map(|t| t.name.as_str()).collect();
    if json {
        let v = serde_json::json!({
            "harness": variant.as_str(),
            "modalities": modalities,
            "routed": route_tools(&modalities),
            "tools": tools,
        });
        println!("{}", serde_json::to_string_pretty(&v)?);
    } else {
        let m: Vec<&str> = modalities.iter().map(|m| m.as_str()).collect();
        println!(
            "modalities: {}",
            if m.is_empty() {
                "none".to_string()
            } else {
                m.join(", ")
            }
        );
        println!("tools: {}", tools.join(", "));
    }
    Ok(ExitCode::SUCCESS)
}

fn validate_suite(suite: &Path) -> Result<ExitCode> {
    let specs = list_suite(suite)?;
    let mut bad = 0;
    for s in &specs {
        let report = verify_media_integrity(s, &s.workspace_seed);
        if report.passed() {
            println!("{}: ok ({} media file(s))", s.task_id, report.entries.len());
        } else {
            bad += 1;
            println!("{}: {} media mismatch(es)", s.task_id, report.mismatches());
            for e in report.entries.iter().filter(|e| !e.passed()) {
                eprintln!("  {}: {:?}", e.relative_path, e.failures);
            }
        }
    }
    println!("{} task(s), {bad} with problems", specs.len());
    Ok(if bad == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn real_main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            manifest,
            parallelism,
            budget_seconds,
            rates,
            backend,
            runtime,
            images,
            output,
        } => {
            let o = Overrides {
                parallelism,
                budget_seconds,
                rates,
                backend,
                runtime,
                images,
                output,
            };
            let m = RunManifest::load(&manifest, &o)?;
            let r = sweep::cmd_run(&m)?;
            println!(
                "run {}: {} trial(s) executed, {} resumed, {} failed",
                m.run_id, r.executed, r.resumed, r.failed
            );
            println!("{}", m.run_dir().join(sweep::SUMMARY_CSV).display());
            Ok(if r.failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Route { dir, harness, json } => route(&dir, &harness, json),
        Command::Certify {
            task,
            rt,
            media_cache,
            json,
        } => {
            let runtime = rt.build()?;
            let opts = CertifyOptions {
                media_cache,
                budget: None,
            };
            let report = certify(&task, runtime.as_ref(), &opts);
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
                eprint!("{}", report.summary());
            } else {
                print!("{}", report.summary());
            }
            Ok(if report.certified {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Score { snapshot, task, rt } => {
            let spec = load_task(&task)?;
            let runtime = rt.build()?;
            if !snapshot.is_dir() {
                anyhow::bail!("snapshot {} is not a directory", snapshot.display());
            }
            let s = score(&snapshot, &spec, runtime.as_ref())?;
            println!("{}", serde_json::to_string_pretty(&s)?);
            if let Some(r) = s.reason() {
                eprintln!("evaluator failure: {r}");
            }
            Ok(if s.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Analyze { kind } => {
            let out = match kind {
                AnalyzeKind::Regime {
                    results,
                    a,
                    b,
                    suite,
                } => analyze::regime(&results, &a, &b, suite.as_deref())?,
                AnalyzeKind::MatchedPairs {
                    results,
                    partial,
                    mm,
                    suite,
                    run_dir,
                    patterns,
                    avg,
                } => analyze::pairs(&analyze::PairArgs {
                    results: &results,
                    partial: &partial,
                    mm: &mm,
                    suite: &suite,
                    run_dir: &run_dir,
                    patterns: patterns.as_deref(),
                    avg: match avg {
                        AvgArg::MeanOfRatios => AvgDefinition::MeanOfRatios,
                        AvgArg::RatioOfMeans => AvgDefinition::RatioOfMeans,
                    },
                })?,
                AnalyzeKind::Failures {
                    results,
                    agent,
                    labels,
                    run_dir,
                } => analyze::failures(&results, &agent, labels.as_deref(), run_dir.as_deref())?,
                AnalyzeKind::Tags { suite } => analyze::tags(&suite)?,
            };
            print!("{out}");
            Ok(ExitCode::SUCCESS)
        }
        Command::ValidateSuite { suite } => validate_suite(&suite),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match real_main().context("mmtb") {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
