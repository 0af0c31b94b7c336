//! Three-task evaluation harness.
//!
//! Runs a case set through either the direct-prompt baseline (one monolithic
//! request per case) or the staged pipeline, in either language and input
//! mode, then scores the outputs: exact/per-component staging accuracy,
//! judge-scored reasoning quality and medication precision, similarity F1,
//! and pairwise win rates. Cases execute with bounded parallelism and
//! per-case isolation: a failed case is recorded and scored around, never
//! aborting the batch.

pub mod driver;
mod metrics;
mod report;

pub use driver::{run_eval, EvalConfig};
pub use metrics::{
    embedding_token_f1, judge_precision, judge_reasoning_quality, score_similarity_f1,
    score_staging_accuracy, win_rate_matrix, EmbeddingProvider, HashedNgramEmbedding,
    MetricsError, SimilarityScorer, StagingAccuracy, WinRateMatrix,
};
pub use report::{build_report, rows_from_jsonl, rows_to_jsonl, CaseScoreRow};

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate_stage, OverallStage};
use crate::backend::{
    parse_structured, FieldKind, FieldSpec, InputMode, Message, MessagePart, ModelBackend,
    ModelRequest, RecordingBackend, Role, StructSchema, TranscriptEntry,
};
use crate::case::{validate_case, CaseRecord, GoldStaging, Language, TaskId};
use crate::normalize::{image_parts, render_documents};
use crate::pipeline::{
    decide_case, gold_stage_string, stage_case, EngineChoice, PipelineContext, StageSource,
};
use crate::profile::ScenarioId;
use crate::staging::{MCategory, NCategory, TCategory};

/// Direct prompting (the single-request baseline) versus the staged pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Direct,
    Pipeline,
}

/// One evaluation run over a case set.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub task: TaskId,
    pub mode: RunMode,
    pub input_mode: InputMode,
    pub language: Language,
    pub model_name: String,
    pub parallelism: usize,
}

impl RunConfig {
    pub fn new(task: TaskId, mode: RunMode, language: Language) -> Self {
        RunConfig {
            task,
            mode,
            input_mode: InputMode::TextOnly,
            language,
            model_name: "model".into(),
            parallelism: 4,
        }
    }
}

/// Structured plan fields shared by both modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PlanOutput {
    pub strategy: String,
    pub core_regimen: Vec<String>,
    pub key_considerations: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl PlanOutput {
    /// The text handed to the medication-precision judge.
    pub fn render(&self) -> String {
        format!(
            "strategy: {}\ncore regimen: {}\nkey considerations: {}",
            self.strategy,
            self.core_regimen.join(", "),
            self.key_considerations
        )
    }
}

/// Output of one case under one run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutput {
    pub case_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<(TCategory, NCategory, MCategory)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_stage: Option<OverallStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<PlanOutput>,
    pub reasoning: String,
    pub transcript: Vec<TranscriptEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TaskOutput {
    fn errored(case_id: &str, transcript: Vec<TranscriptEntry>, error: String) -> Self {
        TaskOutput {
            case_id: case_id.to_string(),
            predicted: None,
            predicted_stage: None,
            plan: None,
            reasoning: String::new(),
            transcript,
            error: Some(error),
        }
    }
}

fn direct_staging_schema() -> StructSchema {
    let t: Vec<&str> = TCategory::ALL.iter().map(|c| c.as_str()).collect();
    let n: Vec<&str> = NCategory::ALL.iter().map(|c| c.as_str()).collect();
    let m: Vec<&str> = MCategory::ALL.iter().map(|c| c.as_str()).collect();
    StructSchema::new(vec![
        FieldSpec::required("t", FieldKind::String).one_of(&t),
        FieldSpec::required("n", FieldKind::String).one_of(&n),
        FieldSpec::required("m", FieldKind::String).one_of(&m),
        FieldSpec::optional("reasoning", FieldKind::String),
    ])
}

fn direct_plan_schema() -> StructSchema {
    StructSchema::new(vec![
        FieldSpec::required("strategy", FieldKind::String),
        FieldSpec::required("core_regimen", FieldKind::Array),
        FieldSpec::optional("key_considerations", FieldKind::String),
        FieldSpec::optional("reasoning", FieldKind::String),
    ])
}

fn direct_request(
    case: &CaseRecord,
    ctx: &PipelineContext,
    config: &RunConfig,
) -> Result<ModelRequest, String> {
    let rendered = render_documents(case, config.input_mode);
    let (template, tag) = match config.task {
        TaskId::TnmStaging => ("direct_staging", "direct-staging"),
        TaskId::TreatmentRecommendation => ("direct_treatment", "direct-treatment"),
        TaskId::EndToEnd => ("direct_e2e", "direct-e2e"),
    };
    let mut vars: Vec<(&str, String)> = vec![
        ("case_id", case.id.clone()),
        ("documents", rendered),
    ];
    if config.task == TaskId::TreatmentRecommendation {
        let gold = case
            .gold_staging
            .as_ref()
            .ok_or_else(|| format!("case {} lacks the gold stage to inject", case.id))?;
        vars.push(("gold_stage", gold_stage_string(gold, &ctx.table)));
    }
    let vars_ref: Vec<(&str, &str)> = vars.iter().map(|(k, v)| (*k, v.as_str())).collect();
    let prompt = ctx
        .prompts
        .render(template, config.language, &vars_ref)
        .map_err(|e| e.to_string())?;
    let mut parts = vec![MessagePart::Text { text: prompt }];
    if config.input_mode == InputMode::ImageDirect {
        parts.extend(image_parts(case));
    }
    Ok(ModelRequest {
        system_prompt: String::new(),
        messages: vec![Message {
            role: Role::User,
            parts,
        }],
        temperature: 0.0,
        max_output_tokens: 4096,
        tag: tag.into(),
    })
}

fn run_direct(
    case: &CaseRecord,
    ctx: &PipelineContext,
    backend: &dyn ModelBackend,
    config: &RunConfig,
) -> Result<TaskOutput, String> {
    let request = direct_request(case, ctx, config)?;
    let response = backend.complete(&request).map_err(|e| e.to_string())?;
    match config.task {
        TaskId::TnmStaging => {
            let value = parse_structured(&response.text, &direct_staging_schema())
                .map_err(|e| e.to_string())?;
            let t: TCategory = value["t"].as_str().unwrap_or_default().parse()?;
            let n: NCategory = value["n"].as_str().unwrap_or_default().parse()?;
            let m: MCategory = value["m"].as_str().unwrap_or_default().parse()?;
            Ok(TaskOutput {
                case_id: case.id.clone(),
                predicted: Some((t, n, m)),
                predicted_stage: Some(aggregate_stage(t, n, m, &ctx.table)),
                plan: None,
                reasoning: value["reasoning"].as_str().unwrap_or_default().to_string(),
                transcript: Vec::new(),
                error: None,
            })
        }
        TaskId::TreatmentRecommendation | TaskId::EndToEnd => {
            let value = parse_structured(&response.text, &direct_plan_schema())
                .map_err(|e| e.to_string())?;
            let plan = PlanOutput {
                strategy: value["strategy"].as_str().unwrap_or_default().to_string(),
                core_regimen: value["core_regimen"]
                    .as_array()
                    .into_iter()
                    .flatten()
                    .filter_map(|v| v.as_str().map(String::from))
                    .collect(),
                key_considerations: value["key_considerations"]
                    .as_str()
                    .unwrap_or_default()
                    .to_string(),
                scenario: None,
                warnings: Vec::new(),
            };
            Ok(TaskOutput {
                case_id: case.id.clone(),
                predicted: None,
                predicted_stage: None,
                plan: Some(plan),
                reasoning: value["reasoning"].as_str().unwrap_or_default().to_string(),
                transcript: Vec::new(),
                error: None,
            })
        }
    }
}

fn staging_reasoning(outcome: &crate::pipeline::StagingOutcome) -> String {
    let mut parts = Vec::new();
    for r in [&outcome.t, &outcome.n, &outcome.m] {
        let steps: Vec<String> = r.trace.iter().map(|s| s.rule.clone()).collect();
        parts.push(format!("{} {}: {}", r.dimension, r.category, steps.join("; ")));
    }
    parts.join("\n")
}

fn run_pipeline(
    case: &CaseRecord,
    ctx: &PipelineContext,
    backend: &dyn ModelBackend,
    config: &RunConfig,
) -> Result<TaskOutput, String> {
    match config.task {
        TaskId::TnmStaging => {
            let outcome = stage_case(
                case,
                ctx,
                EngineChoice::Model,
                Some(backend),
                config.input_mode,
            )
            .map_err(|e| e.to_string())?;
            let (t, n, m) = outcome.categories();
            Ok(TaskOutput {
                case_id: case.id.clone(),
                predicted: Some((t, n, m)),
                predicted_stage: Some(outcome.stage),
                plan: None,
                reasoning: staging_reasoning(&outcome),
                transcript: Vec::new(),
                error: None,
            })
        }
        TaskId::TreatmentRecommendation | TaskId::EndToEnd => {
            let stage_source = if config.task == TaskId::TreatmentRecommendation {
                StageSource::Gold
            } else {
                StageSource::Predicted
            };
            let decision = decide_case(
                case,
                ctx,
                EngineChoice::Model,
                Some(backend),
                stage_source,
                config.input_mode,
            )
            .map_err(|e| e.to_string())?;
            let rec = &decision.recommendation;
            Ok(TaskOutput {
                case_id: case.id.clone(),
                predicted: decision.staging.as_ref().map(|s| s.categories()),
                predicted_stage: Some(decision.stage_used),
                plan: Some(PlanOutput {
                    strategy: rec.strategy.clone(),
                    core_regimen: rec.core_regimen.clone(),
                    key_considerations: rec.key_considerations.clone(),
                    scenario: Some(rec.scenario),
                    warnings: rec.warnings.iter().map(|w| w.message.clone()).collect(),
                }),
                reasoning: rec.reasoning.clone(),
                transcript: Vec::new(),
                error: None,
            })
        }
    }
}

/// Run one task over a case set with bounded parallelism.
///
/// Each case gets its own transcript recorder around the shared backend, so
/// per-case transcripts stay ordered under concurrency. Per-case failures
/// (including validation failures) are captured in the output list.
pub fn run_task(
    cases: &[CaseRecord],
    ctx: &PipelineContext,
    backend: &dyn ModelBackend,
    config: &RunConfig,
) -> Vec<TaskOutput> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<TaskOutput>>> = Mutex::new(vec![None; cases.len()]);
    let workers = config.parallelism.clamp(1, 64).min(cases.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cases.len() {
                    break;
                }
                let case = &cases[i];
                let output = {
                    let issues = validate_case(case, config.task);
                    let recorder = RecordingBackend::new(backend);
                    if issues.is_empty() {
                        let run = match config.mode {
                            RunMode::Direct => run_direct(case, ctx, &recorder, config),
                            RunMode::Pipeline => run_pipeline(case, ctx, &recorder, config),
                        };
                        let transcript = recorder.into_transcript();
                        match run {
                            Ok(mut output) => {
                                output.transcript = transcript;
                                output
                            }
                            Err(e) => TaskOutput::errored(&case.id, transcript, e),
                        }
                    } else {
                        let msg = issues
                            .iter()
                            .map(|i| i.to_string())
                            .collect::<Vec<_>>()
                            .join("; ");
                        TaskOutput::errored(&case.id, Vec::new(), format!("invalid case: {msg}"))
                    }
                };
                results.lock().expect("results lock")[i] = Some(output);
            });
        }
    });

    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|o| o.expect("every case produced an output"))
        .collect()
}

// ---------------------------------------------------------------------------
// Scoring glue
// ---------------------------------------------------------------------------

/// The gold-injection strings for a case, as rendered into prompts by the
/// gold-stage path. The anti-leak scan searches requests for exactly these.
pub fn gold_leak_strings(gold: &GoldStaging, ctx: &PipelineContext) -> Vec<String> {
    vec![gold_stage_string(gold, &ctx.table)]
}

/// True when any request in the transcript contains a gold-injection string.
pub fn transcript_contains_gold(
    transcript: &[TranscriptEntry],
    gold: &GoldStaging,
    ctx: &PipelineContext,
) -> bool {
    let needles = gold_leak_strings(gold, ctx);
    transcript
        .iter()
        .any(|e| needles.iter().any(|n| e.request_text.contains(n)))
}

fn gold_plan_text(case: &CaseRecord) -> String {
    match &case.gold_treatment {
        Some(g) => format!(
            "strategy: {}\ncore regimen: {}\nkey considerations: {}",
            g.strategy,
            g.core_regimen.join(", "),
            g.key_considerations
        ),
        None => String::new(),
    }
}

fn gold_staging_text(case: &CaseRecord) -> String {
    match &case.gold_staging {
        Some(g) => format!("{} {} {}. {}", g.t, g.n, g.m, g.reasoning_evidence),
        None => String::new(),
    }
}

fn prediction_staging_text(output: &TaskOutput) -> String {
    match output.predicted {
        Some((t, n, m)) => format!("{t} {n} {m}. {}", output.reasoning),
        None => output.reasoning.clone(),
    }
}

/// Score a batch of task outputs into case rows.
///
/// Staging tasks score exact and per-component correctness plus judge RQ;
/// treatment tasks score judge precision plus similarity F1 on the
/// reasoning. Judge calls are serialized per case, in case order.
pub fn score_outputs(
    cases: &[CaseRecord],
    outputs: &[TaskOutput],
    ctx: &PipelineContext,
    config: &RunConfig,
    judge: &dyn ModelBackend,
    scorer: &SimilarityScorer<'_>,
) -> Vec<CaseScoreRow> {
    let mut rows = Vec::with_capacity(outputs.len());
    for (case, output) in cases.iter().zip(outputs) {
        let mut row = CaseScoreRow::empty(
            &config.model_name,
            config.mode,
            config.input_mode,
            config.task,
            config.language,
            &case.id,
        );
        row.error = output.error.clone();
        if output.error.is_some() {
            // Errored cases count as misses on accuracy-style metrics and
            // stay unscored on judge metrics.
            if config.task == TaskId::TnmStaging {
                row.exact = Some(false);
                row.t_correct = Some(false);
                row.n_correct = Some(false);
                row.m_correct = Some(false);
            } else {
                row.precision = Some(0.0);
            }
            rows.push(row);
            continue;
        }
        match config.task {
            TaskId::TnmStaging => {
                if let (Some(pred), Some(gold)) = (output.predicted, case.gold_staging.as_ref()) {
                    row.exact = Some(pred == (gold.t, gold.n, gold.m));
                    row.t_correct = Some(pred.0 == gold.t);
                    row.n_correct = Some(pred.1 == gold.n);
                    row.m_correct = Some(pred.2 == gold.m);
                }
                row.rq = judge_reasoning_quality(
                    &prediction_staging_text(output),
                    &gold_staging_text(case),
                    judge,
                    &ctx.prompts,
                    config.language,
                )
                .ok()
                .flatten();
            }
            TaskId::TreatmentRecommendation | TaskId::EndToEnd => {
                let pred_plan = output
                    .plan
                    .as_ref()
                    .map(|p| p.render())
                    .unwrap_or_default();
                row.precision = judge_precision(
                    &pred_plan,
                    &gold_plan_text(case),
                    judge,
                    &ctx.prompts,
                    config.language,
                )
                .ok()
                .flatten()
                .or(Some(0.0));
                let gold_reasoning = case
                    .gold_treatment
                    .as_ref()
                    .map(|g| g.reasoning.clone())
                    .unwrap_or_default();
                row.f1 = score_similarity_f1(&output.reasoning, &gold_reasoning, scorer)
                    .ok()
                    .flatten();
                row.f1_scorer = Some(scorer.label().to_string());
            }
        }
        rows.push(row);
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{scripted_backend, ScriptRule};
    use crate::synth::{generate_suite, GenParams};

    fn scripted_direct_staging(cases: &[CaseRecord]) -> Vec<ScriptRule> {
        cases
            .iter()
            .map(|c| {
                let g = c.gold_staging.as_ref().unwrap();
                ScriptRule::new(
                    "direct-staging",
                    serde_json::json!({
                        "t": g.t.as_str(), "n": g.n.as_str(), "m": g.m.as_str(),
                        "reasoning": "scripted echo"
                    })
                    .to_string(),
                )
                .containing(c.id.clone())
            })
            .collect()
    }

    #[test]
    fn direct_task_runs_one_request_per_case() {
        let cases = generate_suite(3, &GenParams::default());
        let ctx = PipelineContext::embedded();
        let backend = scripted_backend(scripted_direct_staging(&cases));
        let config = RunConfig::new(TaskId::TnmStaging, RunMode::Direct, Language::Zh);
        let outputs = run_task(&cases, &ctx, &backend, &config);
        assert_eq!(outputs.len(), 3);
        for (case, out) in cases.iter().zip(&outputs) {
            assert!(out.error.is_none(), "{:?}", out.error);
            assert_eq!(out.transcript.len(), 1, "direct mode is one request");
            let g = case.gold_staging.as_ref().unwrap();
            assert_eq!(out.predicted, Some((g.t, g.n, g.m)));
        }
    }

    #[test]
    fn failed_case_never_aborts_the_batch() {
        let cases = generate_suite(3, &GenParams::default());
        let ctx = PipelineContext::embedded();
        // Script only covers the first and third case.
        let rules = scripted_direct_staging(&cases)
            .into_iter()
            .enumerate()
            .filter(|(i, _)| *i != 1)
            .map(|(_, r)| r)
            .collect();
        let backend = scripted_backend(rules);
        let config = RunConfig::new(TaskId::TnmStaging, RunMode::Direct, Language::Zh);
        let outputs = run_task(&cases, &ctx, &backend, &config);
        assert!(outputs[0].error.is_none());
        assert!(outputs[1].error.is_some());
        assert!(outputs[2].error.is_none());
    }

    #[test]
    fn task2_transcripts_carry_gold_and_task3_never_do() {
        let params = GenParams { seed: 40, ..GenParams::default() };
        let cases = generate_suite(4, &params);
        let ctx = PipelineContext::embedded();

        // Direct mode: treatment prompts embed the gold string, e2e must not.
        let plan_reply = serde_json::json!({
            "strategy": "plan", "core_regimen": ["X"],
            "key_considerations": "none", "reasoning": "because"
        })
        .to_string();
        let t2_backend = scripted_backend(vec![ScriptRule::new("direct-treatment", plan_reply.clone()).sticky()]);
        let t2 = run_task(
            &cases,
            &ctx,
            &t2_backend,
            &RunConfig::new(TaskId::TreatmentRecommendation, RunMode::Direct, Language::Zh),
        );
        for (case, out) in cases.iter().zip(&t2) {
            assert!(out.error.is_none(), "{:?}", out.error);
            assert!(transcript_contains_gold(
                &out.transcript,
                case.gold_staging.as_ref().unwrap(),
                &ctx
            ));
        }

        let t3_backend = scripted_backend(vec![ScriptRule::new("direct-e2e", plan_reply).sticky()]);
        let t3 = run_task(
            &cases,
            &ctx,
            &t3_backend,
            &RunConfig::new(TaskId::EndToEnd, RunMode::Direct, Language::Zh),
        );
        for (case, out) in cases.iter().zip(&t3) {
            assert!(out.error.is_none());
            assert!(!transcript_contains_gold(
                &out.transcript,
                case.gold_staging.as_ref().unwrap(),
                &ctx
            ));
        }
    }
}
