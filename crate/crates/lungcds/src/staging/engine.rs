//! The three staging engines and their concurrent execution.
//!
//! Rule-based stagers are pure functions over the evidence pools: max over
//! single-finding categorizations, confirmed evidence only, uncertainty
//! carried through untouched. Model-driven stagers prompt the backend with
//! the same rule tables and parse the structured reply into the identical
//! result shape.

use serde_json::Value;
use thiserror::Error;

use crate::backend::{
    parse_structured, BackendError, FieldKind, FieldSpec, ModelBackend, ModelRequest,
    StructSchema, StructuredError,
};
use crate::case::Language;
use crate::normalize::{
    m_pattern_key, station_key, tags, EvidencePools, NormalizedFinding,
};
use crate::prompts::{PromptError, PromptLibrary};

use super::rules::MPatternClass;
use super::{
    Dimension, MCategory, NCategory, StagingRuleFile, SubCategory, SubStageResult, TCategory,
    TraceStep,
};

#[derive(Debug, Error)]
pub enum StagingError {
    #[error("rule file gap: no mapping for {0:?}")]
    RuleFileGap(String),
    #[error("backend error while staging {dimension}: {source}")]
    Backend {
        dimension: Dimension,
        source: BackendError,
    },
    #[error("staging reply for {dimension} did not parse: {source}")]
    Parse {
        dimension: Dimension,
        source: StructuredError,
    },
    #[error("staging reply for {dimension} is unusable: {reason}")]
    BadReply { dimension: Dimension, reason: String },
    #[error("prompt error: {0}")]
    Prompt(#[from] PromptError),
    #[error("staging failed: {0}")]
    Dimensions(DimensionErrors),
}

/// Per-dimension error report for a failed concurrent run.
#[derive(Debug, Default)]
pub struct DimensionErrors {
    pub t: Option<String>,
    pub n: Option<String>,
    pub m: Option<String>,
}

impl std::fmt::Display for DimensionErrors {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        if let Some(e) = &self.t {
            parts.push(format!("T: {e}"));
        }
        if let Some(e) = &self.n {
            parts.push(format!("N: {e}"));
        }
        if let Some(e) = &self.m {
            parts.push(format!("M: {e}"));
        }
        write!(f, "{}", parts.join("; "))
    }
}

/// Staging engine selection.
pub enum Engine<'a> {
    RuleBased,
    Model {
        backend: &'a dyn ModelBackend,
        prompts: &'a PromptLibrary,
        language: Language,
        case_id: &'a str,
    },
}

fn split_confirmed(pool: &[NormalizedFinding]) -> (Vec<(usize, &NormalizedFinding)>, Vec<NormalizedFinding>) {
    let mut confirmed = Vec::new();
    let mut uncertain = Vec::new();
    for (i, f) in pool.iter().enumerate() {
        if f.certainty.is_confirmed() {
            confirmed.push((i, f));
        } else {
            uncertain.push(f.clone());
        }
    }
    (confirmed, uncertain)
}

/// Stage the primary-tumor dimension.
///
/// Rule engine: the category is the max of the size-derived category of every
/// confirmed lesion and the descriptor-derived minimums; empty or
/// unassessable confirmed evidence yields `Tx`.
pub fn stage_t(
    pool: &[NormalizedFinding],
    engine: &Engine<'_>,
    rules: &StagingRuleFile,
) -> Result<SubStageResult, StagingError> {
    match engine {
        Engine::RuleBased => stage_t_rule(pool, rules),
        Engine::Model { .. } => stage_model(Dimension::T, pool, engine, rules),
    }
}

fn stage_t_rule(
    pool: &[NormalizedFinding],
    rules: &StagingRuleFile,
) -> Result<SubStageResult, StagingError> {
    let (confirmed, uncertain) = split_confirmed(pool);
    let mut best: Option<TCategory> = None;
    let mut trace = Vec::new();
    for (idx, finding) in &confirmed {
        if let Some(size) = finding.size_mm {
            if let Some(cat) = rules.size_category(size) {
                trace.push(TraceStep {
                    rule: format!("t-size:{size}mm->{cat}"),
                    findings: vec![*idx],
                });
                best = Some(best.map_or(cat, |b| b.max(cat)));
            }
        }
        for tag in &finding.descriptors {
            if tags::ORGANIZATIONAL.contains(&tag.as_str()) {
                continue;
            }
            match rules.descriptor_minimum(tag) {
                Some(cat) => {
                    trace.push(TraceStep {
                        rule: format!("t-descriptor:{tag}->{cat}"),
                        findings: vec![*idx],
                    });
                    best = Some(best.map_or(cat, |b| b.max(cat)));
                }
                None => return Err(StagingError::RuleFileGap(tag.clone())),
            }
        }
    }
    let category = best.unwrap_or(TCategory::Tx);
    if best.is_none() {
        trace.push(TraceStep {
            rule: "t-unassessable:Tx".into(),
            findings: Vec::new(),
        });
    }
    Ok(SubStageResult {
        dimension: Dimension::T,
        category: SubCategory::T(category),
        uncertain,
        trace,
    })
}

/// Stage the regional-node dimension: max over confirmed stations; no
/// confirmed involvement is `N0`; explicitly unassessable nodes are `Nx`.
pub fn stage_n(
    pool: &[NormalizedFinding],
    engine: &Engine<'_>,
    rules: &StagingRuleFile,
) -> Result<SubStageResult, StagingError> {
    match engine {
        Engine::RuleBased => stage_n_rule(pool, rules),
        Engine::Model { .. } => stage_model(Dimension::N, pool, engine, rules),
    }
}

fn stage_n_rule(
    pool: &[NormalizedFinding],
    rules: &StagingRuleFile,
) -> Result<SubStageResult, StagingError> {
    let (confirmed, uncertain) = split_confirmed(pool);
    let mut best: Option<NCategory> = None;
    let mut unassessable = false;
    let mut trace = Vec::new();
    for (idx, finding) in &confirmed {
        if finding.has_descriptor(tags::UNASSESSABLE) {
            unassessable = true;
            trace.push(TraceStep {
                rule: "n-unassessable".into(),
                findings: vec![*idx],
            });
            continue;
        }
        let station =
            station_key(finding).ok_or_else(|| StagingError::RuleFileGap(finding.site.clone()))?;
        match rules.station_category(&station) {
            Some(cat) => {
                trace.push(TraceStep {
                    rule: format!("n-station:{station}->{cat}"),
                    findings: vec![*idx],
                });
                best = Some(best.map_or(cat, |b| b.max(cat)));
            }
            None => return Err(StagingError::RuleFileGap(station)),
        }
    }
    let category = best.unwrap_or(if unassessable { NCategory::Nx } else { NCategory::N0 });
    Ok(SubStageResult {
        dimension: Dimension::N,
        category: SubCategory::N(category),
        uncertain,
        trace,
    })
}

/// Stage the distant-metastasis dimension by hierarchical screening:
/// intrathoracic dissemination patterns trigger at least M1a, a single
/// confirmed extrathoracic lesion at least M1b, several M1c; the result is
/// the highest tier triggered.
pub fn stage_m(
    pool: &[NormalizedFinding],
    engine: &Engine<'_>,
    rules: &StagingRuleFile,
) -> Result<SubStageResult, StagingError> {
    match engine {
        Engine::RuleBased => stage_m_rule(pool, rules),
        Engine::Model { .. } => stage_model(Dimension::M, pool, engine, rules),
    }
}

fn stage_m_rule(
    pool: &[NormalizedFinding],
    rules: &StagingRuleFile,
) -> Result<SubStageResult, StagingError> {
    let (confirmed, uncertain) = split_confirmed(pool);
    let mut best = MCategory::M0;
    let mut lesions = 0u32;
    let mut trace = Vec::new();
    for (idx, finding) in &confirmed {
        let pattern =
            m_pattern_key(finding).ok_or_else(|| StagingError::RuleFileGap(finding.site.clone()))?;
        match rules.pattern_class(&pattern) {
            Some(MPatternClass::M1a) => {
                trace.push(TraceStep {
                    rule: format!("m-pattern:{pattern}->M1a"),
                    findings: vec![*idx],
                });
                best = best.max(MCategory::M1a);
            }
            Some(MPatternClass::Extrathoracic) => {
                let count = if finding.has_descriptor(tags::MULTIPLE_LESIONS) {
                    2
                } else {
                    1
                };
                trace.push(TraceStep {
                    rule: format!("m-extrathoracic:{pattern}(x{count})"),
                    findings: vec![*idx],
                });
                lesions += count;
            }
            None => return Err(StagingError::RuleFileGap(pattern)),
        }
    }
    match lesions {
        0 => {}
        1 => best = best.max(MCategory::M1b),
        _ => best = best.max(MCategory::M1c),
    }
    if lesions > 0 {
        trace.push(TraceStep {
            rule: format!("m-burden:{lesions} extrathoracic lesion(s)"),
            findings: Vec::new(),
        });
    }
    Ok(SubStageResult {
        dimension: Dimension::M,
        category: SubCategory::M(best),
        uncertain,
        trace,
    })
}

// ---------------------------------------------------------------------------
// Model-driven path
// ---------------------------------------------------------------------------

fn reply_schema(dimension: Dimension) -> StructSchema {
    let allowed: Vec<&str> = match dimension {
        Dimension::T => TCategory::ALL.iter().map(|c| c.as_str()).collect(),
        Dimension::N => NCategory::ALL.iter().map(|c| c.as_str()).collect(),
        Dimension::M => MCategory::ALL.iter().map(|c| c.as_str()).collect(),
    };
    StructSchema::new(vec![
        FieldSpec::required("category", FieldKind::String).one_of(&allowed),
        FieldSpec::optional("uncertain", FieldKind::Array),
        FieldSpec::optional("trace", FieldKind::Array),
    ])
}

fn template_name(dimension: Dimension) -> &'static str {
    match dimension {
        Dimension::T => "t_stage",
        Dimension::N => "n_stage",
        Dimension::M => "m_stage",
    }
}

fn tag_name(dimension: Dimension) -> &'static str {
    match dimension {
        Dimension::T => "t-stage",
        Dimension::N => "n-stage",
        Dimension::M => "m-stage",
    }
}

fn stage_model(
    dimension: Dimension,
    pool: &[NormalizedFinding],
    engine: &Engine<'_>,
    rules: &StagingRuleFile,
) -> Result<SubStageResult, StagingError> {
    let Engine::Model {
        backend,
        prompts,
        language,
        case_id,
    } = engine
    else {
        unreachable!("stage_model called with rule engine");
    };
    let findings_json = serde_json::to_string_pretty(
        &pool
            .iter()
            .enumerate()
            .map(|(i, f)| {
                serde_json::json!({
                    "index": i,
                    "site": f.site,
                    "laterality": f.laterality,
                    "size_mm": f.size_mm,
                    "descriptors": f.descriptors,
                    "certainty": f.certainty,
                })
            })
            .collect::<Vec<_>>(),
    )
    .expect("findings serialize");
    let prompt = prompts.render(
        template_name(dimension),
        *language,
        &[
            ("case_id", *case_id),
            ("findings", findings_json.as_str()),
            ("rules", rules.render_for_dimension(dimension).as_str()),
        ],
    )?;
    let request = ModelRequest::simple(tag_name(dimension), prompt);
    let response = backend
        .complete(&request)
        .map_err(|source| StagingError::Backend { dimension, source })?;
    let value = parse_structured(&response.text, &reply_schema(dimension))
        .map_err(|source| StagingError::Parse { dimension, source })?;
    parse_stage_reply(dimension, &value, pool)
}

/// Parse a model staging reply into the shared result shape. Uncertain
/// findings are referenced by index into the input pool.
pub fn parse_stage_reply(
    dimension: Dimension,
    value: &Value,
    pool: &[NormalizedFinding],
) -> Result<SubStageResult, StagingError> {
    let cat_str = value["category"].as_str().unwrap_or_default();
    let category = match dimension {
        Dimension::T => cat_str.parse::<TCategory>().map(SubCategory::T),
        Dimension::N => cat_str.parse::<NCategory>().map(SubCategory::N),
        Dimension::M => cat_str.parse::<MCategory>().map(SubCategory::M),
    }
    .map_err(|e| StagingError::BadReply {
        dimension,
        reason: e,
    })?;

    let mut uncertain = Vec::new();
    for idx in value["uncertain"].as_array().into_iter().flatten() {
        let i = idx.as_u64().ok_or_else(|| StagingError::BadReply {
            dimension,
            reason: "uncertain entries must be finding indices".into(),
        })? as usize;
        let f = pool.get(i).ok_or_else(|| StagingError::BadReply {
            dimension,
            reason: format!("uncertain index {i} out of range"),
        })?;
        uncertain.push(f.clone());
    }

    let mut trace = Vec::new();
    for step in value["trace"].as_array().into_iter().flatten() {
        let rule = step["rule"].as_str().unwrap_or("step").to_string();
        let findings = step["findings"]
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(|v| v.as_u64().map(|n| n as usize))
            .collect();
        trace.push(TraceStep { rule, findings });
    }

    Ok(SubStageResult {
        dimension,
        category,
        uncertain,
        trace,
    })
}

/// Run the three stagers with no shared mutable state. The output is
/// identical to sequential execution; a failure in any dimension aborts the
/// case with a per-dimension error report.
pub fn stage_all(
    pools: &EvidencePools,
    engine: &Engine<'_>,
    rules: &StagingRuleFile,
) -> Result<(SubStageResult, SubStageResult, SubStageResult), StagingError> {
    let (t, n, m) = std::thread::scope(|scope| {
        let t = scope.spawn(|| stage_t(&pools.e_t, engine, rules));
        let n = scope.spawn(|| stage_n(&pools.e_n, engine, rules));
        let m = scope.spawn(|| stage_m(&pools.e_m, engine, rules));
        (
            t.join().expect("T stager panicked"),
            n.join().expect("N stager panicked"),
            m.join().expect("M stager panicked"),
        )
    });
    match (t, n, m) {
        (Ok(t), Ok(n), Ok(m)) => Ok((t, n, m)),
        (t, n, m) => Err(StagingError::Dimensions(DimensionErrors {
            t: t.err().map(|e| e.to_string()),
            n: n.err().map(|e| e.to_string()),
            m: m.err().map(|e| e.to_string()),
        })),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{scripted_backend, ScriptRule};
    use crate::normalize::{dispatch_pools, Laterality, Side};

    fn rules() -> &'static StagingRuleFile {
        StagingRuleFile::embedded()
    }

    fn lesion(size: f64) -> NormalizedFinding {
        NormalizedFinding::new("right-upper-lobe", Laterality::Ipsilateral)
            .with_size(size)
            .with_descriptor(tags::PRIMARY_LESION)
    }

    #[test]
    fn t_from_size_alone() {
        let r = stage_t(&[lesion(25.0)], &Engine::RuleBased, rules()).unwrap();
        assert_eq!(r.category, SubCategory::T(TCategory::T1c));
    }

    #[test]
    fn empty_t_pool_is_tx() {
        let r = stage_t(&[], &Engine::RuleBased, rules()).unwrap();
        assert_eq!(r.category, SubCategory::T(TCategory::Tx));
    }

    #[test]
    fn descriptor_raises_small_lesion_to_t4() {
        let f = lesion(15.0).with_descriptor(tags::SEPARATE_NODULE_OTHER_IPSILATERAL_LOBE);
        let r = stage_t(&[f], &Engine::RuleBased, rules()).unwrap();
        assert_eq!(r.category, SubCategory::T(TCategory::T4));
    }

    #[test]
    fn uncertain_size_never_raises_t() {
        let confirmed = lesion(35.0);
        let hedged = NormalizedFinding::new("right-lower-lobe", Laterality::Ipsilateral)
            .with_size(80.0)
            .uncertain("可疑");
        let r = stage_t(&[confirmed, hedged], &Engine::RuleBased, rules()).unwrap();
        assert_eq!(r.category, SubCategory::T(TCategory::T2a));
        assert_eq!(r.uncertain.len(), 1);
        assert_eq!(r.uncertain[0].size_mm, Some(80.0));
    }

    #[test]
    fn unknown_descriptor_is_a_rule_file_gap() {
        let f = lesion(10.0).with_descriptor("made-up-descriptor");
        match stage_t(&[f], &Engine::RuleBased, rules()) {
            Err(StagingError::RuleFileGap(tag)) => assert_eq!(tag, "made-up-descriptor"),
            other => panic!("expected RuleFileGap, got {other:?}"),
        }
    }

    fn node(site: &str, lat: Laterality) -> NormalizedFinding {
        NormalizedFinding::new(site, lat)
    }

    #[test]
    fn single_hilar_station_is_n1() {
        let r = stage_n(
            &[node("right-hilar-nodes", Laterality::Ipsilateral)],
            &Engine::RuleBased,
            rules(),
        )
        .unwrap();
        assert_eq!(r.category, SubCategory::N(NCategory::N1));
    }

    #[test]
    fn no_nodes_is_n0() {
        let r = stage_n(&[], &Engine::RuleBased, rules()).unwrap();
        assert_eq!(r.category, SubCategory::N(NCategory::N0));
    }

    #[test]
    fn max_station_wins() {
        let r = stage_n(
            &[
                node("subcarinal-nodes", Laterality::Midline),
                node("right-supraclavicular-nodes", Laterality::Ipsilateral),
            ],
            &Engine::RuleBased,
            rules(),
        )
        .unwrap();
        assert_eq!(r.category, SubCategory::N(NCategory::N3));
    }

    #[test]
    fn only_uncertain_station_leaves_n0() {
        let r = stage_n(
            &[node("left-mediastinal-nodes", Laterality::Contralateral).uncertain("性质待定")],
            &Engine::RuleBased,
            rules(),
        )
        .unwrap();
        assert_eq!(r.category, SubCategory::N(NCategory::N0));
        assert_eq!(r.uncertain.len(), 1);
    }

    #[test]
    fn explicit_unassessable_nodes_are_nx() {
        let f = NormalizedFinding::new("mediastinal-nodes", Laterality::Unknown)
            .with_descriptor(tags::UNASSESSABLE);
        let r = stage_n(&[f], &Engine::RuleBased, rules()).unwrap();
        assert_eq!(r.category, SubCategory::N(NCategory::Nx));
    }

    #[test]
    fn m_tiers() {
        let m0 = stage_m(&[], &Engine::RuleBased, rules()).unwrap();
        assert_eq!(m0.category, SubCategory::M(MCategory::M0));

        let m1a = stage_m(
            &[NormalizedFinding::new("pleural-dissemination", Laterality::Midline)],
            &Engine::RuleBased,
            rules(),
        )
        .unwrap();
        assert_eq!(m1a.category, SubCategory::M(MCategory::M1a));

        let m1b = stage_m(
            &[NormalizedFinding::new("adrenal", Laterality::Unknown)],
            &Engine::RuleBased,
            rules(),
        )
        .unwrap();
        assert_eq!(m1b.category, SubCategory::M(MCategory::M1b));

        let m1c = stage_m(
            &[
                NormalizedFinding::new("bone", Laterality::Midline),
                NormalizedFinding::new("brain", Laterality::Midline),
            ],
            &Engine::RuleBased,
            rules(),
        )
        .unwrap();
        assert_eq!(m1c.category, SubCategory::M(MCategory::M1c));
    }

    #[test]
    fn multiple_lesions_in_one_organ_reach_m1c() {
        let f = NormalizedFinding::new("bone", Laterality::Midline)
            .with_descriptor(tags::MULTIPLE_LESIONS);
        let r = stage_m(&[f], &Engine::RuleBased, rules()).unwrap();
        assert_eq!(r.category, SubCategory::M(MCategory::M1c));
    }

    #[test]
    fn confirmed_only_property_spotcheck() {
        // Deleting uncertain findings never changes the rule-based category.
        let pool = vec![
            lesion(25.0),
            NormalizedFinding::new("right-lower-lobe", Laterality::Ipsilateral)
                .with_size(90.0)
                .uncertain("suspicious"),
        ];
        let with = stage_t(&pool, &Engine::RuleBased, rules()).unwrap();
        let without = stage_t(&pool[..1], &Engine::RuleBased, rules()).unwrap();
        assert_eq!(with.category, without.category);
    }

    #[test]
    fn concurrent_equals_sequential() {
        let findings = vec![
            lesion(42.0),
            node("right-hilar-nodes", Laterality::Ipsilateral),
            NormalizedFinding::new("liver", Laterality::Midline),
        ];
        let pools = dispatch_pools(&findings, Side::Right);
        let (t, n, m) = stage_all(&pools, &Engine::RuleBased, rules()).unwrap();
        let ts = stage_t(&pools.e_t, &Engine::RuleBased, rules()).unwrap();
        let ns = stage_n(&pools.e_n, &Engine::RuleBased, rules()).unwrap();
        let ms = stage_m(&pools.e_m, &Engine::RuleBased, rules()).unwrap();
        assert_eq!((t.category, n.category, m.category), (ts.category, ns.category, ms.category));
    }

    #[test]
    fn model_engine_parses_scripted_replies() {
        let backend = scripted_backend(vec![
            ScriptRule::new("t-stage", r#"The category follows. {"category": "T2a", "uncertain": [], "trace": [{"rule": "t-size", "findings": [0]}]}"#),
            ScriptRule::new("n-stage", r#"{"category": "N1", "uncertain": [0], "trace": []}"#),
            ScriptRule::new("m-stage", r#"{"category": "M0", "uncertain": [], "trace": []}"#),
        ]);
        let engine = Engine::Model {
            backend: &backend,
            prompts: &PromptLibrary::embedded(),
            language: Language::En,
            case_id: "c1",
        };
        let pools = dispatch_pools(
            &[
                lesion(35.0),
                node("right-hilar-nodes", Laterality::Ipsilateral).uncertain("suspicious"),
            ],
            Side::Right,
        );
        let (t, n, m) = stage_all(&pools, &engine, rules()).unwrap();
        assert_eq!(t.category, SubCategory::T(TCategory::T2a));
        assert_eq!(n.category, SubCategory::N(NCategory::N1));
        assert_eq!(n.uncertain.len(), 1);
        assert_eq!(m.category, SubCategory::M(MCategory::M0));
    }

    #[test]
    fn model_failure_names_the_dimension() {
        let backend = scripted_backend(vec![
            ScriptRule::new("t-stage", r#"{"category": "T1a"}"#),
            ScriptRule::new("n-stage", r#"{"category": "N0"}"#),
            // no m-stage rule: the M agent fails
        ]);
        let engine = Engine::Model {
            backend: &backend,
            prompts: &PromptLibrary::embedded(),
            language: Language::En,
            case_id: "c1",
        };
        let pools = dispatch_pools(&[lesion(9.0)], Side::Right);
        match stage_all(&pools, &engine, rules()) {
            Err(StagingError::Dimensions(report)) => {
                assert!(report.t.is_none());
                assert!(report.n.is_none());
                assert!(report.m.is_some());
            }
            other => panic!("expected Dimensions error, got {other:?}"),
        }
    }

    #[test]
    fn echoed_rule_trace_reproduces_category() {
        // Engine-shape equivalence: serialize the rule-based result as a
        // model reply and parse it back.
        let pool = vec![lesion(64.0)];
        let rule_result = stage_t(&pool, &Engine::RuleBased, rules()).unwrap();
        let reply = serde_json::json!({
            "category": rule_result.t_category().unwrap().as_str(),
            "uncertain": [],
            "trace": rule_result.trace.iter().map(|s| serde_json::json!({
                "rule": s.rule, "findings": s.findings,
            })).collect::<Vec<_>>(),
        })
        .to_string();
        let backend = scripted_backend(vec![ScriptRule::new("t-stage", reply)]);
        let engine = Engine::Model {
            backend: &backend,
            prompts: &PromptLibrary::embedded(),
            language: Language::Zh,
            case_id: "c1",
        };
        let model_result = stage_t(&pool, &engine, rules()).unwrap();
        assert_eq!(model_result.category, rule_result.category);
        assert_eq!(model_result.trace.len(), rule_result.trace.len());
    }
}
