//! Config-driven evaluation: a grid of (model, mode, task, language,
//! input-mode) runs over one case file, scored and rendered into report
//! files.
//!
//! Outputs under `out_dir`: `cases.jsonl` (per-case scores), `report.md` and
//! `report.csv` (grids), `win_rate.csv`, and a `transcripts/` tree with one
//! file per case. Two runs with identical inputs produce byte-identical
//! report files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::backend::{BackendConfig, HttpBackend, InputMode, ModelBackend, ScriptedBackend};
use crate::case::{load_cases, CaseError, Language, TaskId};
use crate::pipeline::PipelineContext;

use super::metrics::{win_rate_matrix, HashedNgramEmbedding, SimilarityScorer, WinRateMatrix};
use super::report::{build_report, rows_to_jsonl, CaseScoreRow};
use super::{run_task, score_outputs, RunConfig, RunMode};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read eval config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse eval config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Case(#[from] CaseError),
    #[error("backend setup failed: {0}")]
    Backend(String),
    #[error("metrics error: {0}")]
    Metrics(#[from] super::MetricsError),
    #[error("io error writing outputs: {0}")]
    Output(#[from] std::io::Error),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// Replay from a JSON rule file.
    Scripted { script: PathBuf },
    /// Live HTTP chat-completion service.
    Http {
        #[serde(flatten)]
        config: BackendConfig,
    },
}

impl BackendSpec {
    fn build(&self, base_dir: &Path) -> Result<Box<dyn ModelBackend>, EvalError> {
        match self {
            BackendSpec::Scripted { script } => {
                let path = if script.is_absolute() {
                    script.clone()
                } else {
                    base_dir.join(script)
                };
                Ok(Box::new(
                    ScriptedBackend::from_file(&path)
                        .map_err(|e| EvalError::Backend(e.to_string()))?,
                ))
            }
            BackendSpec::Http { config } => Ok(Box::new(
                HttpBackend::new(config.clone()).map_err(|e| EvalError::Backend(e.to_string()))?,
            )),
        }
    }
}

fn default_parallelism() -> usize {
    4
}

fn default_scorer() -> String {
    "embedding".to_string()
}

#[derive(Debug, Clone, Deserialize)]
pub struct WinRateSpec {
    pub task: TaskId,
    /// "precision" or "f1".
    pub metric: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct RunSpec {
    pub model: String,
    pub mode: RunMode,
    #[serde(default = "default_input_mode")]
    pub input_mode: String,
    pub language: Language,
    pub tasks: Vec<TaskId>,
    pub backend: BackendSpec,
}

fn default_input_mode() -> String {
    "text".to_string()
}

#[derive(Debug, Clone, Deserialize)]
pub struct EvalConfig {
    pub cases: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// "embedding" or "judge".
    #[serde(default = "default_scorer")]
    pub scorer: String,
    #[serde(default)]
    pub win_rate: Option<WinRateSpec>,
    pub judge: BackendSpec,
    #[serde(rename = "runs")]
    pub runs: Vec<RunSpec>,
}

impl EvalConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<(EvalConfig, PathBuf), EvalError> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: EvalConfig = toml::from_str(&raw)?;
        let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok((config, base_dir))
    }
}

fn parse_input_mode(s: &str) -> InputMode {
    match s {
        "image" => InputMode::ImageDirect,
        _ => InputMode::TextOnly,
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Run the configured grid and write all report artifacts. Returns the rows.
pub fn run_eval(
    config: &EvalConfig,
    base_dir: &Path,
    ctx: &PipelineContext,
) -> Result<Vec<CaseScoreRow>, EvalError> {
    let cases_path = if config.cases.is_absolute() {
        config.cases.clone()
    } else {
        base_dir.join(&config.cases)
    };
    let cases = load_cases(&cases_path)?;
    let judge = config.judge.build(base_dir)?;
    let embedding = HashedNgramEmbedding::default();

    let out_dir = if config.out_dir.is_absolute() {
        config.out_dir.clone()
    } else {
        base_dir.join(&config.out_dir)
    };
    std::fs::create_dir_all(out_dir.join("transcripts"))?;

    let mut all_rows: Vec<CaseScoreRow> = Vec::new();
    // Per (model-label, task): aligned per-case scores for win rates.
    let mut win_scores: BTreeMap<(String, TaskId), Vec<f64>> = BTreeMap::new();

    for run in &config.runs {
        let backend = run.backend.build(base_dir)?;
        let input_mode = parse_input_mode(&run.input_mode);
        for task in &run.tasks {
            let run_config = RunConfig {
                task: *task,
                mode: run.mode,
                input_mode,
                language: run.language,
                model_name: run.model.clone(),
                parallelism: config.parallelism,
            };
            let outputs = run_task(&cases, ctx, backend.as_ref(), &run_config);

            // Transcript tree: one JSONL file per case.
            let run_label = format!(
                "{}_{}_{}_{}_{}",
                sanitize(&run.model),
                match run.mode {
                    RunMode::Direct => "direct",
                    RunMode::Pipeline => "pipeline",
                },
                task,
                run.language,
                sanitize(&run.input_mode),
            );
            let tdir = out_dir.join("transcripts").join(&run_label);
            std::fs::create_dir_all(&tdir)?;
            for output in &outputs {
                let mut content = String::new();
                for entry in &output.transcript {
                    content.push_str(&serde_json::to_string(entry).expect("entry serializes"));
                    content.push('\n');
                }
                std::fs::write(tdir.join(format!("{}.jsonl", sanitize(&output.case_id))), content)?;
            }

            let scorer = match config.scorer.as_str() {
                "judge" => SimilarityScorer::Judge {
                    backend: judge.as_ref(),
                    prompts: &ctx.prompts,
                    language: run.language,
                },
                _ => SimilarityScorer::EmbeddingTokenF1(&embedding),
            };
            let rows = score_outputs(&cases, &outputs, ctx, &run_config, judge.as_ref(), &scorer);

            // Collect win-rate vectors: the scored metric per case, in case
            // order, unscored cases as zero.
            if let Some(spec) = &config.win_rate {
                if spec.task == *task {
                    let label = format!(
                        "{}{}",
                        run.model,
                        match run.mode {
                            RunMode::Direct => "",
                            RunMode::Pipeline => " + pipeline",
                        }
                    );
                    let vector: Vec<f64> = rows
                        .iter()
                        .map(|r| match spec.metric.as_str() {
                            "f1" => r.f1.unwrap_or(0.0),
                            _ => r.precision.unwrap_or(0.0),
                        })
                        .collect();
                    win_scores.insert((label, *task), vector);
                }
            }
            all_rows.extend(rows);
        }
    }

    let win = if win_scores.is_empty() {
        None
    } else {
        let flat: BTreeMap<String, Vec<f64>> = win_scores
            .into_iter()
            .map(|((label, _), v)| (label, v))
            .collect();
        Some(win_rate_matrix(&flat)?)
    };

    write_reports(&out_dir, &all_rows, win.as_ref())?;
    Ok(all_rows)
}

/// Write `cases.jsonl`, `report.md`, `report.csv` and `win_rate.csv`.
pub fn write_reports(
    out_dir: &Path,
    rows: &[CaseScoreRow],
    win: Option<&WinRateMatrix>,
) -> Result<(), EvalError> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("cases.jsonl"), rows_to_jsonl(rows))?;
    let (md, csv) = build_report(rows, win);
    std::fs::write(out_dir.join("report.md"), md)?;
    std::fs::write(out_dir.join("report.csv"), csv)?;
    if let Some(w) = win {
        let mut wcsv = String::from("model");
        for name in &w.names {
            wcsv.push(',');
            wcsv.push_str(name);
        }
        wcsv.push('\n');
        for (i, name) in w.names.iter().enumerate() {
            wcsv.push_str(name);
            for v in &w.values[i] {
                wcsv.push_str(&format!(",{v:.6}"));
            }
            wcsv.push('\n');
        }
        std::fs::write(out_dir.join("win_rate.csv"), wcsv)?;
    }
    Ok(())
}
