//! End-to-end pipeline assembly: normalization → staging → aggregation →
//! profile → routing → recommendation.
//!
//! Every step runs in one of two engines: the deterministic rule path
//! (lexicon normalizer, rule stagers, first-eligible-regimen expert) or the
//! model path (backend agents at each node, deterministic aggregation and
//! routing in between). The treatment boundary can take its stage either
//! from the pipeline's own prediction or from the gold label — the task-2 /
//! task-3 distinction — and the gold path never reads predicted staging nor
//! vice versa.

use thiserror::Error;

use crate::aggregate::{
    aggregate_stage, project_uncertainty, OverallStage, PotentialShift, StageGroupTable,
    TableError,
};
use crate::backend::{InputMode, ModelBackend};
use crate::case::{CaseRecord, GoldStaging, Language};
use crate::normalize::{
    deterministic_normalize, dispatch_pools, normalize_reports, EvidencePools, Lexicon,
    LexiconError, NormalizeError, NormalizedCase,
};
use crate::profile::{
    check_missing_critical, extract_profile_lexicon, extract_profile_model, route_scenario,
    ProfileError, ProfileVector, RoutingConfig, RoutingConfigError, ScenarioId, Warning,
};
use crate::prompts::{PromptError, PromptLibrary};
use crate::staging::{
    stage_all, Engine, MCategory, NCategory, RuleFileError, StagingError, StagingRuleFile,
    SubStageResult, TCategory,
};
use crate::treatment::{
    embedded_guidelines, load_guidelines, recommend, recommend_rule_based, GuidelineError,
    GuidelineStore, TreatmentRecommendation,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Normalize(#[from] NormalizeError),
    #[error(transparent)]
    Staging(#[from] StagingError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Guideline(#[from] GuidelineError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("case {0} has no gold staging label to inject")]
    MissingGoldStage(String),
    #[error("model engine selected but no backend supplied")]
    MissingBackend,
}

#[derive(Debug, Error)]
pub enum ContextError {
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Rules(#[from] RuleFileError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Routing(#[from] RoutingConfigError),
    #[error(transparent)]
    Guidelines(#[from] GuidelineError),
    #[error(transparent)]
    Prompts(#[from] PromptError),
}

/// Shared immutable assets for a pipeline run.
pub struct PipelineContext {
    pub lexicon: Lexicon,
    pub rules: StagingRuleFile,
    pub table: StageGroupTable,
    pub routing: RoutingConfig,
    pub guidelines: GuidelineStore,
    pub prompts: PromptLibrary,
}

impl PipelineContext {
    /// All assets from the embedded data files.
    pub fn embedded() -> PipelineContext {
        PipelineContext {
            lexicon: Lexicon::embedded().clone(),
            rules: StagingRuleFile::embedded().clone(),
            table: StageGroupTable::embedded().clone(),
            routing: RoutingConfig::embedded().clone(),
            guidelines: embedded_guidelines().clone(),
            prompts: PromptLibrary::embedded(),
        }
    }

    /// Embedded assets with optional per-component file overrides.
    pub fn with_overrides(
        lexicon_dir: Option<&std::path::Path>,
        rules_path: Option<&std::path::Path>,
        table_path: Option<&std::path::Path>,
        routing_path: Option<&std::path::Path>,
        guidelines_dir: Option<&std::path::Path>,
        prompts_dir: Option<&std::path::Path>,
    ) -> Result<PipelineContext, ContextError> {
        Ok(PipelineContext {
            lexicon: match lexicon_dir {
                Some(d) => Lexicon::from_dir(d)?,
                None => Lexicon::embedded().clone(),
            },
            rules: match rules_path {
                Some(p) => StagingRuleFile::load(p)?,
                None => StagingRuleFile::embedded().clone(),
            },
            table: match table_path {
                Some(p) => StageGroupTable::load(p)?,
                None => StageGroupTable::embedded().clone(),
            },
            routing: match routing_path {
                Some(p) => RoutingConfig::load(p)?,
                None => RoutingConfig::embedded().clone(),
            },
            guidelines: match guidelines_dir {
                Some(d) => load_guidelines(d)?,
                None => embedded_guidelines().clone(),
            },
            prompts: match prompts_dir {
                Some(d) => PromptLibrary::with_overrides(d)?,
                None => PromptLibrary::embedded(),
            },
        })
    }
}

/// Engine selection for the perception/reasoning nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineChoice {
    Rule,
    Model,
}

/// Where the treatment boundary takes its stage from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSource {
    Predicted,
    Gold,
}

/// Full staging output for one case.
#[derive(Debug, Clone)]
pub struct StagingOutcome {
    pub normalized: NormalizedCase,
    pub pools: EvidencePools,
    pub t: SubStageResult,
    pub n: SubStageResult,
    pub m: SubStageResult,
    pub stage: OverallStage,
    pub shifts: Vec<PotentialShift>,
}

impl StagingOutcome {
    pub fn categories(&self) -> (TCategory, NCategory, MCategory) {
        (
            self.t.t_category().expect("T result carries a T category"),
            self.n.n_category().expect("N result carries an N category"),
            self.m.m_category().expect("M result carries an M category"),
        )
    }
}

/// Treatment decision output for one case.
#[derive(Debug, Clone)]
pub struct DecisionOutcome {
    pub staging: Option<StagingOutcome>,
    pub stage_used: OverallStage,
    pub profile: ProfileVector,
    pub scenario: ScenarioId,
    pub warnings: Vec<Warning>,
    pub recommendation: TreatmentRecommendation,
}

/// Canonical rendering of an injected gold stage. This exact format is what
/// the anti-leak transcript scan searches for; the predicted-stage rendering
/// deliberately differs so a correct prediction never looks like a leak.
pub fn gold_stage_string(gold: &GoldStaging, table: &StageGroupTable) -> String {
    let overall = aggregate_stage(gold.t, gold.n, gold.m, table);
    format!("{} {} {} (stage {})", gold.t, gold.n, gold.m, overall)
}

/// Rendering of pipeline-predicted staging for downstream prompts.
pub fn predicted_stage_string(
    t: TCategory,
    n: NCategory,
    m: MCategory,
    stage: OverallStage,
) -> String {
    format!("T={t}; N={n}; M={m}; overall={stage}")
}

fn normalize_case(
    case: &CaseRecord,
    ctx: &PipelineContext,
    engine: EngineChoice,
    backend: Option<&dyn ModelBackend>,
    language: Language,
    input_mode: InputMode,
) -> Result<NormalizedCase, PipelineError> {
    match engine {
        EngineChoice::Rule => Ok(deterministic_normalize(case, &ctx.lexicon)),
        EngineChoice::Model => {
            let backend = backend.ok_or(PipelineError::MissingBackend)?;
            Ok(normalize_reports(
                case,
                backend,
                &ctx.prompts,
                language,
                input_mode,
                &ctx.lexicon,
            )?)
        }
    }
}

/// Run normalization, dispatch, the three stagers, aggregation, and
/// uncertainty projection for one case.
pub fn stage_case(
    case: &CaseRecord,
    ctx: &PipelineContext,
    engine: EngineChoice,
    backend: Option<&dyn ModelBackend>,
    input_mode: InputMode,
) -> Result<StagingOutcome, PipelineError> {
    let language = case.language;
    let normalized = normalize_case(case, ctx, engine, backend, language, input_mode)?;
    let pools = dispatch_pools(&normalized.findings, normalized.primary_side);
    let staging_engine = match engine {
        EngineChoice::Rule => Engine::RuleBased,
        EngineChoice::Model => Engine::Model {
            backend: backend.ok_or(PipelineError::MissingBackend)?,
            prompts: &ctx.prompts,
            language,
            case_id: &case.id,
        },
    };
    let (t, n, m) = stage_all(&pools, &staging_engine, &ctx.rules)?;
    let categories = (
        t.t_category().expect("T category"),
        n.n_category().expect("N category"),
        m.m_category().expect("M category"),
    );
    let stage = aggregate_stage(categories.0, categories.1, categories.2, &ctx.table);
    // Projection always runs on the rule engine: it is the deterministic
    // replay of confirming each hedged finding.
    let shifts = project_uncertainty(&pools, categories, &ctx.rules, &ctx.table)?;
    Ok(StagingOutcome {
        normalized,
        pools,
        t,
        n,
        m,
        stage,
        shifts,
    })
}

/// Run the full decision pipeline for one case.
///
/// With `StageSource::Gold` the staging agents are skipped: the gold triple
/// enters at the routing boundary (and its canonical rendering enters the
/// prompts). With `StageSource::Predicted` the gold label is never read.
pub fn decide_case(
    case: &CaseRecord,
    ctx: &PipelineContext,
    engine: EngineChoice,
    backend: Option<&dyn ModelBackend>,
    stage_source: StageSource,
    input_mode: InputMode,
) -> Result<DecisionOutcome, PipelineError> {
    let language = case.language;
    let (staging, stage_used, m_category, pools, staging_summary) = match stage_source {
        StageSource::Predicted => {
            let outcome = stage_case(case, ctx, engine, backend, input_mode)?;
            let (t, n, m) = outcome.categories();
            let summary = predicted_stage_string(t, n, m, outcome.stage);
            let pools = outcome.pools.clone();
            (Some(outcome.clone()), outcome.stage, m, pools, summary)
        }
        StageSource::Gold => {
            let gold = case
                .gold_staging
                .as_ref()
                .ok_or_else(|| PipelineError::MissingGoldStage(case.id.clone()))?;
            let normalized = normalize_case(case, ctx, engine, backend, language, input_mode)?;
            let pools = dispatch_pools(&normalized.findings, normalized.primary_side);
            let stage = aggregate_stage(gold.t, gold.n, gold.m, &ctx.table);
            let summary = format!(
                "Confirmed stage (ground truth): {}",
                gold_stage_string(gold, &ctx.table)
            );
            (None, stage, gold.m, pools, summary)
        }
    };

    let profile = match engine {
        EngineChoice::Rule => extract_profile_lexicon(
            case,
            stage_used,
            m_category,
            &pools,
            &ctx.routing,
        ),
        EngineChoice::Model => extract_profile_model(
            case,
            stage_used,
            m_category,
            &staging_summary,
            &pools,
            backend.ok_or(PipelineError::MissingBackend)?,
            &ctx.prompts,
            language,
            input_mode,
            &ctx.routing,
        )?,
    };

    let scenario = route_scenario(&profile);
    let warnings = check_missing_critical(&profile, scenario, &ctx.routing);

    let recommendation = match engine {
        EngineChoice::Rule => {
            recommend_rule_based(&profile, scenario, &ctx.guidelines, &warnings)?
        }
        EngineChoice::Model => recommend(
            &profile,
            scenario,
            &ctx.guidelines,
            backend.ok_or(PipelineError::MissingBackend)?,
            &ctx.prompts,
            language,
            &case.id,
            &warnings,
        )?,
    };

    Ok(DecisionOutcome {
        staging,
        stage_used,
        profile,
        scenario,
        warnings,
        recommendation,
    })
}

/// Human-readable staging report for CLI output.
pub fn render_staging(case_id: &str, outcome: &StagingOutcome) -> String {
    let (t, n, m) = outcome.categories();
    let mut out = String::new();
    out.push_str(&format!(
        "case {case_id}: {t} {n} {m} -> stage {}\n",
        outcome.stage
    ));
    for r in [&outcome.t, &outcome.n, &outcome.m] {
        out.push_str(&format!(
            "  {}: {} ({} confirmed rule hits, {} uncertain)\n",
            r.dimension,
            r.category,
            r.trace.len(),
            r.uncertain.len()
        ));
    }
    if outcome.shifts.is_empty() {
        out.push_str("  potential shifts: none\n");
    } else {
        for s in &outcome.shifts {
            out.push_str(&format!(
                "  potential shift: if {} confirmed -> {} (stage {}), triggered by {}\n",
                s.dimension,
                s.assumed_category,
                s.projected_stage,
                s.triggering_findings
                    .iter()
                    .map(|f| f.site.as_str())
                    .collect::<Vec<_>>()
                    .join(" / ")
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case::{CaseDocument, Modality};

    fn ctx() -> PipelineContext {
        PipelineContext::embedded()
    }

    fn demo_case() -> CaseRecord {
        CaseRecord {
            id: "demo-1".into(),
            language: Language::Zh,
            documents: vec![
                CaseDocument::text_only(
                    Modality::Imaging,
                    "影像学检查。右肺上叶见肿物，最大径25mm。右肺门淋巴结肿大，考虑转移。对侧纵隔淋巴结肿大，性质待定。",
                ),
                CaseDocument::text_only(Modality::Clinical, "患者男，63岁。ECOG PS 1分。未行手术。未接受系统治疗。"),
                CaseDocument::text_only(Modality::Pathology, "（右肺上叶穿刺活检）腺癌。"),
                CaseDocument::text_only(Modality::Supplementary, "基因检测: 驱动基因均阴性。PD-L1 TPS 60%。"),
            ],
            gold_staging: Some(crate::case::GoldStaging {
                t: TCategory::T1c,
                n: NCategory::N1,
                m: MCategory::M0,
                reasoning_evidence: "25mm 原发灶; 同侧肺门淋巴结转移".into(),
                extra: serde_json::Map::new(),
            }),
            gold_treatment: None,
            extra: serde_json::Map::new(),
        }
    }

    #[test]
    fn rule_pipeline_stages_and_projects() {
        let outcome =
            stage_case(&demo_case(), &ctx(), EngineChoice::Rule, None, InputMode::TextOnly)
                .unwrap();
        let (t, n, m) = outcome.categories();
        assert_eq!(
            (t, n, m),
            (TCategory::T1c, NCategory::N1, MCategory::M0)
        );
        assert_eq!(outcome.stage, OverallStage::IIB);
        // The hedged contralateral mediastinal node projects an N3 upgrade.
        assert_eq!(outcome.shifts.len(), 1);
        assert_eq!(outcome.shifts[0].projected_stage, OverallStage::IIIB);
    }

    #[test]
    fn rule_decision_routes_and_grounds() {
        let decision = decide_case(
            &demo_case(),
            &ctx(),
            EngineChoice::Rule,
            None,
            StageSource::Predicted,
            InputMode::TextOnly,
        )
        .unwrap();
        // IIB, not resected, treatment-naive, no explicit surgical intent:
        // no codified pathway, so referral.
        assert_eq!(decision.scenario, crate::profile::ScenarioId::MdtReferral);
        assert!(decision.recommendation.core_regimen.is_empty());
    }

    #[test]
    fn gold_source_skips_staging_and_uses_gold_stage() {
        let decision = decide_case(
            &demo_case(),
            &ctx(),
            EngineChoice::Rule,
            None,
            StageSource::Gold,
            InputMode::TextOnly,
        )
        .unwrap();
        assert!(decision.staging.is_none());
        assert_eq!(decision.stage_used, OverallStage::IIB);
    }

    #[test]
    fn gold_source_without_label_errors() {
        let mut case = demo_case();
        case.gold_staging = None;
        let err = decide_case(
            &case,
            &ctx(),
            EngineChoice::Rule,
            None,
            StageSource::Gold,
            InputMode::TextOnly,
        )
        .unwrap_err();
        assert!(matches!(err, PipelineError::MissingGoldStage(_)));
    }

    #[test]
    fn stage_strings_use_distinct_formats() {
        let gold = crate::case::GoldStaging {
            t: TCategory::T1c,
            n: NCategory::N2,
            m: MCategory::M0,
            reasoning_evidence: String::new(),
            extra: serde_json::Map::new(),
        };
        let g = gold_stage_string(&gold, &ctx().table);
        let p = predicted_stage_string(
            TCategory::T1c,
            NCategory::N2,
            MCategory::M0,
            OverallStage::IIIA,
        );
        assert_eq!(g, "T1c N2 M0 (stage IIIA)");
        assert_eq!(p, "T=T1c; N=N2; M=M0; overall=IIIA");
        assert!(!p.contains(&g));
    }
}
