//! Command-line interface: staging, recommendation, end-to-end runs,
//! benchmark evaluation, synthetic generation, and report re-rendering.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. All randomness
//! flows through explicit `--seed` flags, so identical invocations produce
//! identical files.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::backend::{HttpBackend, ModelBackend, ScriptedBackend};
use crate::case::{load_cases, save_cases, Language};
use crate::eval::{build_report, rows_from_jsonl, run_eval, EvalConfig};
use crate::pipeline::{
    decide_case, render_staging, stage_case, ContextError, EngineChoice, PipelineContext,
    StageSource,
};
use crate::synth::{generate_suite, GenParams};

#[derive(Parser)]
#[command(
    name = "lungcds",
    about = "Lung cancer staging and treatment decision-support pipeline",
    version
)]
struct Cli {
    #[command(flatten)]
    data: DataPaths,
    #[command(subcommand)]
    command: Command,
}

/// Optional overrides for the shipped data files.
#[derive(Args)]
struct DataPaths {
    /// Staging rule file (TOML)
    #[arg(long, global = true)]
    rules: Option<PathBuf>,
    /// Stage-group table file (TOML)
    #[arg(long, global = true)]
    stage_table: Option<PathBuf>,
    /// Routing config file (TOML)
    #[arg(long, global = true)]
    routing: Option<PathBuf>,
    /// Directory with guideline subset files
    #[arg(long, global = true)]
    guidelines: Option<PathBuf>,
    /// Directory with prompt template overrides
    #[arg(long, global = true)]
    prompts: Option<PathBuf>,
    /// Directory with lexicon TSV files
    #[arg(long, global = true)]
    lexicon: Option<PathBuf>,
}

impl DataPaths {
    fn context(&self) -> Result<PipelineContext, ContextError> {
        PipelineContext::with_overrides(
            self.lexicon.as_deref(),
            self.rules.as_deref(),
            self.stage_table.as_deref(),
            self.routing.as_deref(),
            self.guidelines.as_deref(),
            self.prompts.as_deref(),
        )
    }
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum EngineArg {
    Rule,
    Agent,
}

impl From<EngineArg> for EngineChoice {
    fn from(value: EngineArg) -> Self {
        match value {
            EngineArg::Rule => EngineChoice::Rule,
            EngineArg::Agent => EngineChoice::Model,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum StageSourceArg {
    Gold,
    Predicted,
}

#[derive(Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum LangArg {
    Zh,
    En,
}

#[derive(Subcommand)]
enum Command {
    /// Stage every case in a file and print categories, overall stage, and
    /// potential shifts from uncertain findings
    Stage {
        /// Case file
        #[arg(long = "case")]
        case_file: PathBuf,
        #[arg(long, value_enum, default_value = "rule")]
        mode: EngineArg,
        /// Backend config file (TOML), required for --mode agent
        #[arg(long)]
        backend: Option<PathBuf>,
        /// Also write the full staging outcome as JSON lines
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recommend treatment for every case, taking the stage from the gold
    /// label or from the pipeline's own prediction
    Recommend {
        #[arg(long = "case")]
        case_file: PathBuf,
        #[arg(long, value_enum)]
        stage_source: StageSourceArg,
        #[arg(long, value_enum, default_value = "rule")]
        mode: EngineArg,
        #[arg(long)]
        backend: Option<PathBuf>,
    },
    /// Run the full pipeline (staging plus recommendation) on a case file
    E2e {
        #[arg(long = "cases")]
        case_file: PathBuf,
        #[arg(long, value_enum, default_value = "rule")]
        mode: EngineArg,
        #[arg(long)]
        backend: Option<PathBuf>,
    },
    /// Run a benchmark grid from a config file and write report artifacts
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate synthetic cases with known gold labels
    Gen {
        /// Number of cases
        #[arg(long)]
        n: u64,
        #[arg(long, default_value = "0")]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "zh")]
        lang: LangArg,
        /// Probability of injecting a stage-raising hedged finding
        #[arg(long, default_value = "0.0")]
        uncertainty: f64,
        /// Probability of dropping each non-imaging modality
        #[arg(long, default_value = "0.0")]
        dropout: f64,
        /// Add benign distractor findings
        #[arg(long)]
        distractors: bool,
    },
    /// Re-render report files from a cases.jsonl dump
    Report {
        /// Directory containing cases.jsonl
        #[arg(long = "in")]
        in_dir: PathBuf,
        /// Output directory (defaults to the input directory)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Backend config file: either `kind = "scripted"` with a script path or
/// `kind = "http"` with the connection fields.
fn load_backend(path: &Path) -> Result<Box<dyn ModelBackend>, String> {
    #[derive(serde::Deserialize)]
    #[serde(tag = "kind", rename_all = "snake_case")]
    enum Spec {
        Scripted {
            script: PathBuf,
        },
        Http {
            #[serde(flatten)]
            config: crate::backend::BackendConfig,
        },
    }
    let raw = std::fs::read_to_string(path).map_err(|e| format!("reading {}: {e}", path.display()))?;
    let spec: Spec = toml::from_str(&raw).map_err(|e| format!("parsing {}: {e}", path.display()))?;
    match spec {
        Spec::Scripted { script } => {
            let script = if script.is_absolute() {
                script
            } else {
                path.parent().unwrap_or(Path::new(".")).join(script)
            };
            Ok(Box::new(
                ScriptedBackend::from_file(&script).map_err(|e| e.to_string())?,
            ))
        }
        Spec::Http { config } => Ok(Box::new(HttpBackend::new(config).map_err(|e| e.to_string())?)),
    }
}

fn resolve_backend(
    mode: EngineArg,
    backend: &Option<PathBuf>,
) -> Result<Option<Box<dyn ModelBackend>>, String> {
    match (mode, backend) {
        (EngineArg::Agent, Some(path)) => Ok(Some(load_backend(path)?)),
        (EngineArg::Agent, None) => Err("--mode agent requires --backend <config-file>".into()),
        (EngineArg::Rule, _) => Ok(None),
    }
}

fn run_command(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Stage {
            case_file,
            mode,
            backend,
            out,
        } => {
            let ctx = cli.data.context().map_err(|e| e.to_string())?;
            let backend = resolve_backend(mode, &backend)?;
            let cases = load_cases(&case_file).map_err(|e| e.to_string())?;
            let mut json_lines = String::new();
            for case in &cases {
                let outcome = stage_case(
                    case,
                    &ctx,
                    mode.into(),
                    backend.as_deref(),
                    crate::backend::InputMode::TextOnly,
                )
                .map_err(|e| format!("case {}: {e}", case.id))?;
                print!("{}", render_staging(&case.id, &outcome));
                if out.is_some() {
                    let (t, n, m) = outcome.categories();
                    json_lines.push_str(
                        &serde_json::json!({
                            "case_id": case.id,
                            "t": t, "n": n, "m": m,
                            "stage": outcome.stage.to_string(),
                            "shifts": outcome.shifts,
                        })
                        .to_string(),
                    );
                    json_lines.push('\n');
                }
            }
            if let Some(path) = out {
                std::fs::write(path, json_lines).map_err(|e| e.to_string())?;
            }
            Ok(())
        }
        Command::Recommend {
            case_file,
            stage_source,
            mode,
            backend,
        } => {
            let ctx = cli.data.context().map_err(|e| e.to_string())?;
            let backend = resolve_backend(mode, &backend)?;
            let source = match stage_source {
                StageSourceArg::Gold => StageSource::Gold,
                StageSourceArg::Predicted => StageSource::Predicted,
            };
            let cases = load_cases(&case_file).map_err(|e| e.to_string())?;
            for case in &cases {
                let decision = decide_case(
                    case,
                    &ctx,
                    mode.into(),
                    backend.as_deref(),
                    source,
                    crate::backend::InputMode::TextOnly,
                )
                .map_err(|e| format!("case {}: {e}", case.id))?;
                println!(
                    "case {}: stage {} -> scenario {}",
                    case.id, decision.stage_used, decision.scenario
                );
                println!("{}", decision.recommendation);
            }
            Ok(())
        }
        Command::E2e {
            case_file,
            mode,
            backend,
        } => {
            let ctx = cli.data.context().map_err(|e| e.to_string())?;
            let backend = resolve_backend(mode, &backend)?;
            let cases = load_cases(&case_file).map_err(|e| e.to_string())?;
            for case in &cases {
                let decision = decide_case(
                    case,
                    &ctx,
                    mode.into(),
                    backend.as_deref(),
                    StageSource::Predicted,
                    crate::backend::InputMode::TextOnly,
                )
                .map_err(|e| format!("case {}: {e}", case.id))?;
                if let Some(staging) = &decision.staging {
                    print!("{}", render_staging(&case.id, staging));
                }
                println!("{}", decision.recommendation);
            }
            Ok(())
        }
        Command::Eval { config } => {
            let ctx = cli.data.context().map_err(|e| e.to_string())?;
            let (eval_config, base_dir) = EvalConfig::load(&config).map_err(|e| e.to_string())?;
            let rows = run_eval(&eval_config, &base_dir, &ctx).map_err(|e| e.to_string())?;
            let out_dir = if eval_config.out_dir.is_absolute() {
                eval_config.out_dir.clone()
            } else {
                base_dir.join(&eval_config.out_dir)
            };
            println!(
                "evaluated {} case-runs; reports written to {}",
                rows.len(),
                out_dir.display()
            );
            Ok(())
        }
        Command::Gen {
            n,
            seed,
            out,
            lang,
            uncertainty,
            dropout,
            distractors,
        } => {
            let params = GenParams {
                seed,
                language: match lang {
                    LangArg::Zh => Language::Zh,
                    LangArg::En => Language::En,
                },
                uncertainty_rate: uncertainty,
                modality_dropout_rate: dropout,
                distractors,
                ..GenParams::default()
            };
            params.validate()?;
            let cases = generate_suite(n, &params);
            save_cases(&cases, &out).map_err(|e| e.to_string())?;
            println!("wrote {} cases to {}", cases.len(), out.display());
            Ok(())
        }
        Command::Report { in_dir, out } => {
            let jsonl = std::fs::read_to_string(in_dir.join("cases.jsonl"))
                .map_err(|e| format!("reading cases.jsonl: {e}"))?;
            let rows = rows_from_jsonl(&jsonl).map_err(|e| e.to_string())?;
            let out_dir = out.unwrap_or(in_dir);
            let (md, csv) = build_report(&rows, None);
            std::fs::create_dir_all(&out_dir).map_err(|e| e.to_string())?;
            std::fs::write(out_dir.join("report.md"), md).map_err(|e| e.to_string())?;
            std::fs::write(out_dir.join("report.csv"), csv).map_err(|e| e.to_string())?;
            println!("re-rendered reports for {} rows in {}", rows.len(), out_dir.display());
            Ok(())
        }
    }
}

/// Entry point behind the thin binary. Returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run_command(cli) {
        Ok(()) => 0,
        Err(message) => {
            eprintln!("error: {message}");
            2
        }
    }
}
