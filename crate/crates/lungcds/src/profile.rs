//! Structured clinical profile extraction and deterministic scenario routing.
//!
//! The profile vector is the standardized decision-variable record that
//! drives triage: every field is filled only from evidence present in the
//! case, with `Unknown` for anything absent. Routing is a pure, total
//! decision function over the profile — eight scenarios, checked in priority
//! order, with multidisciplinary referral as the fallback. Each scenario
//! declares critical fields whose absence yields a pre-treatment evaluation
//! warning.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::aggregate::OverallStage;
use crate::backend::{
    parse_structured, BackendError, FieldKind, FieldSpec, InputMode, ModelBackend, ModelRequest,
    StructSchema, StructuredError,
};
use crate::case::{CaseRecord, Language};
use crate::normalize::{m_pattern_key, tags, EvidencePools};
use crate::prompts::{PromptError, PromptLibrary};
use crate::staging::MCategory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Histology {
    Adenocarcinoma,
    Squamous,
    Sclc,
    OtherNsclc,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DriverGene {
    #[serde(rename = "EGFR")]
    Egfr,
    #[serde(rename = "ALK")]
    Alk,
    #[serde(rename = "ROS1")]
    Ros1,
    #[serde(rename = "KRAS_G12C")]
    KrasG12c,
    #[serde(rename = "OTHER")]
    Other,
}

impl fmt::Display for DriverGene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DriverGene::Egfr => "EGFR",
            DriverGene::Alk => "ALK",
            DriverGene::Ros1 => "ROS1",
            DriverGene::KrasG12c => "KRAS_G12C",
            DriverGene::Other => "OTHER",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverStatus {
    Positive(DriverGene),
    Negative,
    Unknown,
}

/// PD-L1 expression bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PdL1 {
    #[serde(rename = "lt1")]
    LessThan1,
    #[serde(rename = "1to49")]
    From1To49,
    #[serde(rename = "ge50")]
    AtLeast50,
    #[serde(rename = "unknown")]
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriState {
    Yes,
    No,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetastaticBurden {
    None,
    Oligo,
    Wide,
    Unknown,
}

/// Performance status 0-4, or unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PsScore {
    Known(u8),
    #[serde(rename = "unknown")]
    Unknown,
}

impl PsScore {
    pub fn is_unknown(&self) -> bool {
        matches!(self, PsScore::Unknown)
            || matches!(self, PsScore::Known(v) if *v > 4)
    }
}

/// The standardized decision-variable record driving scenario routing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileVector {
    pub histology: Histology,
    pub driver_status: DriverStatus,
    pub pd_l1: PdL1,
    pub ps_score: PsScore,
    pub resection_done: TriState,
    /// 1 = treatment-naive for systemic therapy.
    pub treatment_line: u32,
    pub prior_regimens: Vec<String>,
    pub metastatic_burden: MetastaticBurden,
    pub stage: OverallStage,
    /// Explicit surgical-intent flag from the notes; absence means no.
    pub resectable_intent: TriState,
}

impl ProfileVector {
    /// A fully-unknown profile at the given stage.
    pub fn unknown_at(stage: OverallStage) -> Self {
        ProfileVector {
            histology: Histology::Unknown,
            driver_status: DriverStatus::Unknown,
            pd_l1: PdL1::Unknown,
            ps_score: PsScore::Unknown,
            resection_done: TriState::Unknown,
            treatment_line: 1,
            prior_regimens: Vec::new(),
            metastatic_burden: MetastaticBurden::Unknown,
            stage,
            resectable_intent: TriState::No,
        }
    }

    pub fn render(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }
}

/// The eight routing targets. `MdtReferral` is the total-function fallback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScenarioId {
    #[serde(rename = "postop-early-stage")]
    PostopEarlyStage,
    #[serde(rename = "neoadjuvant-resectable")]
    NeoadjuvantResectable,
    #[serde(rename = "adv-driver-neg-first-line")]
    AdvDriverNegFirstLine,
    #[serde(rename = "adv-driver-pos-first-line")]
    AdvDriverPosFirstLine,
    #[serde(rename = "adv-driver-neg-later-line")]
    AdvDriverNegLaterLine,
    #[serde(rename = "adv-driver-pos-later-line")]
    AdvDriverPosLaterLine,
    #[serde(rename = "oligometastatic")]
    Oligometastatic,
    #[serde(rename = "mdt-referral")]
    MdtReferral,
}

impl ScenarioId {
    pub const ALL: &'static [ScenarioId] = &[
        ScenarioId::PostopEarlyStage,
        ScenarioId::NeoadjuvantResectable,
        ScenarioId::AdvDriverNegFirstLine,
        ScenarioId::AdvDriverPosFirstLine,
        ScenarioId::AdvDriverNegLaterLine,
        ScenarioId::AdvDriverPosLaterLine,
        ScenarioId::Oligometastatic,
        ScenarioId::MdtReferral,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioId::PostopEarlyStage => "postop-early-stage",
            ScenarioId::NeoadjuvantResectable => "neoadjuvant-resectable",
            ScenarioId::AdvDriverNegFirstLine => "adv-driver-neg-first-line",
            ScenarioId::AdvDriverPosFirstLine => "adv-driver-pos-first-line",
            ScenarioId::AdvDriverNegLaterLine => "adv-driver-neg-later-line",
            ScenarioId::AdvDriverPosLaterLine => "adv-driver-pos-later-line",
            ScenarioId::Oligometastatic => "oligometastatic",
            ScenarioId::MdtReferral => "mdt-referral",
        }
    }

    /// The prompt template for this scenario's expert agent.
    pub fn template_name(self) -> &'static str {
        match self {
            ScenarioId::PostopEarlyStage => "expert_postop_early_stage",
            ScenarioId::NeoadjuvantResectable => "expert_neoadjuvant_resectable",
            ScenarioId::AdvDriverNegFirstLine => "expert_adv_driver_neg_first_line",
            ScenarioId::AdvDriverPosFirstLine => "expert_adv_driver_pos_first_line",
            ScenarioId::AdvDriverNegLaterLine => "expert_adv_driver_neg_later_line",
            ScenarioId::AdvDriverPosLaterLine => "expert_adv_driver_pos_later_line",
            ScenarioId::Oligometastatic => "expert_oligometastatic",
            ScenarioId::MdtReferral => "expert_mdt_referral",
        }
    }

    /// Scenarios that represent first-line systemic therapy.
    pub fn is_first_line(self) -> bool {
        matches!(
            self,
            ScenarioId::AdvDriverNegFirstLine
                | ScenarioId::AdvDriverPosFirstLine
                | ScenarioId::Oligometastatic
        )
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ScenarioId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ScenarioId::ALL
            .iter()
            .find(|v| v.as_str() == s)
            .copied()
            .ok_or_else(|| format!("unknown scenario {s:?}"))
    }
}

// ---------------------------------------------------------------------------
// Routing configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum RoutingConfigError {
    #[error("cannot read routing config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse routing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown profile field {0:?} in critical-field set")]
    UnknownField(String),
}

/// Reviewer-editable routing parameters: the oligometastatic thresholds and
/// the per-scenario critical-field sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub oligo_max_lesions: u32,
    pub oligo_max_organs: u32,
    /// Dissemination patterns (effusions, pleural spread) always count as
    /// wide disease when true.
    pub dissemination_is_wide: bool,
    pub critical_fields: std::collections::BTreeMap<ScenarioId, Vec<String>>,
}

pub const PROFILE_FIELDS: &[&str] = &[
    "histology",
    "driver_status",
    "pd_l1",
    "ps_score",
    "resection_done",
    "treatment_line",
    "prior_regimens",
    "metastatic_burden",
    "stage",
    "resectable_intent",
];

impl RoutingConfig {
    pub fn parse(raw: &str) -> Result<RoutingConfig, RoutingConfigError> {
        let cfg: RoutingConfig = toml::from_str(raw)?;
        for fields in cfg.critical_fields.values() {
            for f in fields {
                if !PROFILE_FIELDS.contains(&f.as_str()) {
                    return Err(RoutingConfigError::UnknownField(f.clone()));
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RoutingConfig, RoutingConfigError> {
        let raw = std::fs::read_to_string(path.as_ref()).map_err(|source| RoutingConfigError::Io {
            path: path.as_ref().display().to_string(),
            source,
        })?;
        RoutingConfig::parse(&raw)
    }

    pub fn embedded() -> &'static RoutingConfig {
        static EMBEDDED: std::sync::OnceLock<RoutingConfig> = std::sync::OnceLock::new();
        EMBEDDED.get_or_init(|| {
            RoutingConfig::parse(include_str!("../data/rules/routing.toml"))
                .expect("embedded routing config is valid")
        })
    }
}

// ---------------------------------------------------------------------------
// Routing
// ---------------------------------------------------------------------------

fn stage_in(stage: OverallStage, lo: OverallStage, hi: OverallStage) -> bool {
    match (stage.rank(), lo.rank(), hi.rank()) {
        (Some(s), Some(l), Some(h)) => l <= s && s <= h,
        _ => false,
    }
}

fn is_metastatic(stage: OverallStage) -> bool {
    matches!(stage, OverallStage::IVA | OverallStage::IVB)
}

/// The standalone predicate of each priority rule. Rules are written to be
/// mutually exclusive, so "first match" and "only match" coincide; the
/// exclusivity is property-tested over the full profile grid.
fn rule_predicate(rule: usize, p: &ProfileVector) -> bool {
    // The codified expert scenarios cover NSCLC only.
    let nsclc = p.histology != Histology::Sclc;
    match rule {
        // (1) Post-resection, non-metastatic disease.
        1 => nsclc && p.resection_done == TriState::Yes && stage_in(p.stage, OverallStage::Occult, OverallStage::IIIB),
        // (2) Resectable-intent preoperative path.
        2 => {
            nsclc
                && stage_in(p.stage, OverallStage::IIA, OverallStage::IIIB)
                && p.resection_done == TriState::No
                && p.treatment_line == 1
                && p.resectable_intent == TriState::Yes
        }
        // (3) Limited metastatic burden, treatment-naive.
        3 => {
            nsclc
                && is_metastatic(p.stage)
                && p.metastatic_burden == MetastaticBurden::Oligo
                && p.treatment_line == 1
        }
        // (4) Advanced disease, driver status known, not captured by (3).
        4..=7 => {
            let adv = nsclc
                && is_metastatic(p.stage)
                && !(p.metastatic_burden == MetastaticBurden::Oligo && p.treatment_line == 1);
            if !adv {
                return false;
            }
            let positive = matches!(p.driver_status, DriverStatus::Positive(_));
            let negative = p.driver_status == DriverStatus::Negative;
            let first = p.treatment_line == 1;
            match rule {
                4 => negative && first,
                5 => positive && first,
                6 => negative && !first,
                7 => positive && !first,
                _ => unreachable!(),
            }
        }
        _ => false,
    }
}

/// The priority rule (1-7) a profile matches, if any.
pub fn matched_rule(profile: &ProfileVector) -> Option<usize> {
    (1..=7).find(|&rule| rule_predicate(rule, profile))
}

/// All rules whose standalone predicate holds. The exclusivity property says
/// this never exceeds one element.
pub fn matching_rules(profile: &ProfileVector) -> Vec<usize> {
    (1..=7).filter(|&rule| rule_predicate(rule, profile)).collect()
}

/// Deterministic triage: map a profile to its clinical scenario.
///
/// Priority: post-resection, then the preoperative path, then
/// oligometastatic first line, then the four advanced scenarios by driver
/// status and line, and multidisciplinary referral for everything else
/// (indeterminate stage, small-cell histology, unresectable stage III
/// without metastasis, unknown driver status in stage IV, ...).
pub fn route_scenario(profile: &ProfileVector) -> ScenarioId {
    match matched_rule(profile) {
        Some(1) => ScenarioId::PostopEarlyStage,
        Some(2) => ScenarioId::NeoadjuvantResectable,
        Some(3) => ScenarioId::Oligometastatic,
        Some(4) => ScenarioId::AdvDriverNegFirstLine,
        Some(5) => ScenarioId::AdvDriverPosFirstLine,
        Some(6) => ScenarioId::AdvDriverNegLaterLine,
        Some(7) => ScenarioId::AdvDriverPosLaterLine,
        _ => ScenarioId::MdtReferral,
    }
}

/// A pre-treatment evaluation warning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warning {
    /// The profile field the warning is about, when field-specific.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub message: String,
}

fn field_is_unknown(profile: &ProfileVector, field: &str) -> bool {
    match field {
        "histology" => profile.histology == Histology::Unknown,
        "driver_status" => profile.driver_status == DriverStatus::Unknown,
        "pd_l1" => profile.pd_l1 == PdL1::Unknown,
        "ps_score" => profile.ps_score.is_unknown(),
        "resection_done" => profile.resection_done == TriState::Unknown,
        "metastatic_burden" => profile.metastatic_burden == MetastaticBurden::Unknown,
        "stage" => profile.stage == OverallStage::Indeterminate,
        "resectable_intent" => profile.resectable_intent == TriState::Unknown,
        _ => false,
    }
}

fn field_label(field: &str) -> &'static str {
    match field {
        "histology" => "histological subtype",
        "driver_status" => "driver gene status",
        "pd_l1" => "PD-L1 expression",
        "ps_score" => "performance status score",
        "resection_done" => "resection status",
        "metastatic_burden" => "metastatic burden",
        "stage" => "overall stage",
        "resectable_intent" => "surgical intent",
        _ => "clinical variable",
    }
}

/// Missing-value handling: each scenario declares critical fields; every
/// critical field still unknown yields one warning phrased as a
/// pre-treatment evaluation request. Referral always carries its rationale.
pub fn check_missing_critical(
    profile: &ProfileVector,
    scenario: ScenarioId,
    config: &RoutingConfig,
) -> Vec<Warning> {
    let mut warnings = Vec::new();
    if scenario == ScenarioId::MdtReferral {
        warnings.push(Warning {
            field: None,
            message: "No codified treatment pathway applies; refer to multidisciplinary review \
                      before any systemic therapy decision."
                .into(),
        });
    }
    if let Some(fields) = config.critical_fields.get(&scenario) {
        for field in fields {
            if field_is_unknown(profile, field) {
                warnings.push(Warning {
                    field: Some(field.clone()),
                    message: format!(
                        "Pre-treatment evaluation required: {} is not established; complete this \
                         assessment before finalizing the recommendation.",
                        field_label(field)
                    ),
                });
            }
        }
    }
    warnings
}

// ---------------------------------------------------------------------------
// Metastatic burden from the evidence pools
// ---------------------------------------------------------------------------

/// Derive the burden bucket from confirmed distant evidence: dissemination
/// patterns count as wide; otherwise at most `oligo_max_lesions` lesions
/// across at most `oligo_max_organs` organs is oligometastatic.
pub fn derive_burden(
    pools: &EvidencePools,
    m_category: MCategory,
    config: &RoutingConfig,
) -> MetastaticBurden {
    if m_category == MCategory::M0 {
        return MetastaticBurden::None;
    }
    let mut lesions = 0u32;
    let mut organs = std::collections::BTreeSet::new();
    for f in &pools.e_m {
        if !f.certainty.is_confirmed() {
            continue;
        }
        let Some(pattern) = m_pattern_key(f) else { continue };
        match pattern.as_str() {
            "pleural-dissemination" | "pericardial-dissemination" => {
                if config.dissemination_is_wide {
                    return MetastaticBurden::Wide;
                }
                lesions += 1;
                organs.insert(pattern);
            }
            _ => {
                lesions += if f.has_descriptor(tags::MULTIPLE_LESIONS) { 2 } else { 1 };
                organs.insert(pattern);
            }
        }
    }
    if lesions == 0 {
        // M1 category without visible distant evidence (e.g. gold-stage
        // substitution): burden cannot be derived.
        return MetastaticBurden::Unknown;
    }
    if lesions <= config.oligo_max_lesions && organs.len() as u32 <= config.oligo_max_organs {
        MetastaticBurden::Oligo
    } else {
        MetastaticBurden::Wide
    }
}

// ---------------------------------------------------------------------------
// Deterministic lexicon-based extraction
// ---------------------------------------------------------------------------

fn any_match(text: &str, patterns: &[&str]) -> bool {
    patterns.iter().any(|p| text.contains(p))
}

/// Deterministic profile extractor over the case text. The offline twin of
/// the model-driven path; fields without explicit evidence stay unknown.
pub fn extract_profile_lexicon(
    case: &CaseRecord,
    stage: OverallStage,
    m_category: MCategory,
    pools: &EvidencePools,
    config: &RoutingConfig,
) -> ProfileVector {
    let text = case.full_text();
    let lower = text.to_lowercase();

    let histology = if any_match(&lower, &["小细胞肺癌", "小细胞癌", "small cell lung cancer", "small-cell"]) {
        Histology::Sclc
    } else if any_match(&lower, &["腺癌", "adenocarcinoma"]) {
        Histology::Adenocarcinoma
    } else if any_match(&lower, &["鳞状细胞癌", "鳞癌", "squamous"]) {
        Histology::Squamous
    } else if any_match(&lower, &["大细胞癌", "非小细胞肺癌", "non-small cell", "nsclc"]) {
        Histology::OtherNsclc
    } else {
        Histology::Unknown
    };

    let driver_status = extract_driver(&lower);
    let pd_l1 = extract_pd_l1(&lower);
    let ps_score = extract_ps(&lower);

    let resection_done = if any_match(&lower, &["术后", "切除术", "已行手术", "lobectomy", "resection performed", "status post", "underwent resection", "underwent surgical"]) {
        TriState::Yes
    } else if any_match(&lower, &["未行手术", "未手术", "no surgery", "not operated", "no prior surgery"]) {
        TriState::No
    } else {
        TriState::Unknown
    };

    let (treatment_line, prior_regimens) = extract_line(&lower);

    let resectable_intent = if any_match(&lower, &["拟行手术", "拟行根治性手术", "计划手术", "planned for surgical resection", "surgical candidate", "resectable, surgery planned"]) {
        TriState::Yes
    } else {
        TriState::No
    };

    ProfileVector {
        histology,
        driver_status,
        pd_l1,
        ps_score,
        resection_done,
        treatment_line,
        prior_regimens,
        metastatic_burden: derive_burden(pools, m_category, config),
        stage,
        resectable_intent,
    }
}

fn extract_driver(lower: &str) -> DriverStatus {
    let genes = [
        ("egfr", DriverGene::Egfr),
        ("alk", DriverGene::Alk),
        ("ros1", DriverGene::Ros1),
        ("kras g12c", DriverGene::KrasG12c),
        ("kras-g12c", DriverGene::KrasG12c),
    ];
    let positive_markers = ["阳性", "突变", "mutation detected", "positive", "fusion detected", "rearrangement detected", "19del", "l858r"];
    for (name, gene) in genes {
        if let Some(pos) = lower.find(name) {
            let window = &lower[pos..lower.len().min(pos + 120)];
            if positive_markers.iter().any(|m| window.contains(m)) {
                return DriverStatus::Positive(gene);
            }
        }
    }
    if any_match(
        lower,
        &[
            "驱动基因均阴性",
            "驱动基因阴性",
            "未检出驱动基因",
            "no actionable driver",
            "driver negative",
            "all driver genes negative",
            "野生型",
            "wild-type",
            "wild type",
        ],
    ) {
        return DriverStatus::Negative;
    }
    DriverStatus::Unknown
}

fn extract_pd_l1(lower: &str) -> PdL1 {
    if !lower.contains("pd-l1") && !lower.contains("pd l1") {
        return PdL1::Unknown;
    }
    let re = regex::Regex::new(r"pd-?\s?l1[^0-9%<>≥]*(?:tps\s*)?(<\s*1|≥\s*50|>=\s*50|(\d+(?:\.\d+)?))\s*%").expect("pd-l1 regex");
    if let Some(cap) = re.captures(lower) {
        let token = cap.get(1).map(|m| m.as_str().trim()).unwrap_or("");
        if token.starts_with('<') {
            return PdL1::LessThan1;
        }
        if token.starts_with('≥') || token.starts_with(">=") {
            return PdL1::AtLeast50;
        }
        if let Some(num) = cap.get(2).and_then(|m| m.as_str().parse::<f64>().ok()) {
            return if num < 1.0 {
                PdL1::LessThan1
            } else if num < 50.0 {
                PdL1::From1To49
            } else {
                PdL1::AtLeast50
            };
        }
    }
    PdL1::Unknown
}

fn extract_ps(lower: &str) -> PsScore {
    let re = regex::Regex::new(r"(?:ecog(?:-ps)?|ps)\s*(?:评分)?[:：]?\s*([0-4])\s*分?").expect("ps regex");
    match re.captures(lower) {
        Some(cap) => PsScore::Known(cap[1].parse().expect("single digit")),
        None => PsScore::Unknown,
    }
}

fn extract_line(lower: &str) -> (u32, Vec<String>) {
    let mut prior = Vec::new();
    if any_match(lower, &["既往化疗", "既往接受含铂", "prior platinum", "prior chemotherapy", "previously received chemotherapy"]) {
        prior.push("platinum-doublet".to_string());
    }
    if any_match(lower, &["既往免疫治疗", "既往接受免疫", "prior immunotherapy", "previously received immunotherapy"]) {
        prior.push("immunotherapy".to_string());
    }
    if any_match(lower, &["既往靶向", "既往接受靶向", "prior targeted therapy", "previously received targeted"]) {
        prior.push("targeted-therapy".to_string());
    }
    if prior.is_empty() {
        (1, prior)
    } else {
        (prior.len() as u32 + 1, prior)
    }
}

// ---------------------------------------------------------------------------
// Model-driven extraction
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("backend error during profile extraction: {0}")]
    Backend(#[from] BackendError),
    #[error("profile reply did not parse: {0}")]
    Parse(#[from] StructuredError),
    #[error("prompt error: {0}")]
    Prompt(#[from] PromptError),
    #[error("profile reply is unusable: {0}")]
    BadReply(String),
}

fn profile_schema() -> StructSchema {
    StructSchema::new(vec![
        FieldSpec::required("histology", FieldKind::String)
            .one_of(&["adenocarcinoma", "squamous", "sclc", "other_nsclc", "unknown"]),
        FieldSpec::required("driver_status", FieldKind::Any),
        FieldSpec::required("pd_l1", FieldKind::String).one_of(&["lt1", "1to49", "ge50", "unknown"]),
        FieldSpec::required("ps_score", FieldKind::Any),
        FieldSpec::required("resection_done", FieldKind::String).one_of(&["yes", "no", "unknown"]),
        FieldSpec::required("treatment_line", FieldKind::Integer),
        FieldSpec::optional("prior_regimens", FieldKind::Array),
        FieldSpec::optional("resectable_intent", FieldKind::String).one_of(&["yes", "no", "unknown"]),
    ])
}

fn tri_state(v: &Value) -> TriState {
    match v.as_str() {
        Some("yes") => TriState::Yes,
        Some("no") => TriState::No,
        _ => TriState::Unknown,
    }
}

/// Model-driven profile extraction: prompt with the profile template plus
/// the documents and the upstream staging summary; parse and validate the
/// structured reply. Burden and stage always come from the upstream
/// pipeline, never the model.
#[allow(clippy::too_many_arguments)]
pub fn extract_profile_model(
    case: &CaseRecord,
    stage: OverallStage,
    m_category: MCategory,
    staging_summary: &str,
    pools: &EvidencePools,
    backend: &dyn ModelBackend,
    prompts: &PromptLibrary,
    language: Language,
    input_mode: InputMode,
    config: &RoutingConfig,
) -> Result<ProfileVector, ProfileError> {
    let rendered = crate::normalize::render_documents(case, input_mode);
    let prompt = prompts.render(
        "profile",
        language,
        &[
            ("case_id", case.id.as_str()),
            ("documents", rendered.as_str()),
            ("staging", staging_summary),
        ],
    )?;
    let response = backend.complete(&ModelRequest::simple("profile", prompt))?;
    let value = parse_structured(&response.text, &profile_schema())?;

    let histology = match value["histology"].as_str().unwrap_or("unknown") {
        "adenocarcinoma" => Histology::Adenocarcinoma,
        "squamous" => Histology::Squamous,
        "sclc" => Histology::Sclc,
        "other_nsclc" => Histology::OtherNsclc,
        _ => Histology::Unknown,
    };
    let driver_status = match &value["driver_status"] {
        Value::String(s) if s == "negative" => DriverStatus::Negative,
        Value::String(s) if s == "unknown" => DriverStatus::Unknown,
        Value::Object(map) => match map.get("positive").and_then(|g| g.as_str()) {
            Some("EGFR") => DriverStatus::Positive(DriverGene::Egfr),
            Some("ALK") => DriverStatus::Positive(DriverGene::Alk),
            Some("ROS1") => DriverStatus::Positive(DriverGene::Ros1),
            Some("KRAS_G12C") => DriverStatus::Positive(DriverGene::KrasG12c),
            Some("OTHER") => DriverStatus::Positive(DriverGene::Other),
            other => {
                return Err(ProfileError::BadReply(format!(
                    "unknown driver gene {other:?}"
                )))
            }
        },
        other => {
            return Err(ProfileError::BadReply(format!(
                "driver_status must be a status string or positive object, got {other}"
            )))
        }
    };
    let pd_l1 = match value["pd_l1"].as_str().unwrap_or("unknown") {
        "lt1" => PdL1::LessThan1,
        "1to49" => PdL1::From1To49,
        "ge50" => PdL1::AtLeast50,
        _ => PdL1::Unknown,
    };
    let ps_score = match &value["ps_score"] {
        Value::Number(n) => match n.as_u64() {
            Some(v @ 0..=4) => PsScore::Known(v as u8),
            _ => {
                return Err(ProfileError::BadReply(format!(
                    "ps_score {n} out of 0-4"
                )))
            }
        },
        _ => PsScore::Unknown,
    };
    let treatment_line = value["treatment_line"].as_u64().unwrap_or(1).max(1) as u32;
    let prior_regimens: Vec<String> = value["prior_regimens"]
        .as_array()
        .into_iter()
        .flatten()
        .filter_map(|v| v.as_str().map(String::from))
        .collect();
    if (treatment_line == 1) != prior_regimens.is_empty() {
        return Err(ProfileError::BadReply(
            "treatment_line 1 requires an empty prior-regimen list (and vice versa)".into(),
        ));
    }

    Ok(ProfileVector {
        histology,
        driver_status,
        pd_l1,
        ps_score,
        resection_done: tri_state(&value["resection_done"]),
        treatment_line,
        prior_regimens,
        metastatic_burden: derive_burden(pools, m_category, config),
        stage,
        resectable_intent: match value.get("resectable_intent") {
            Some(v) => match tri_state(v) {
                TriState::Yes => TriState::Yes,
                _ => TriState::No,
            },
            None => TriState::No,
        },
    })
}
