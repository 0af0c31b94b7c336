//! Scenario-specific treatment experts under locally injected guideline
//! subsets.
//!
//! Each scenario owns a small, reviewable subset file: constraint blocks
//! (rule text) plus a machine-readable regimen list with eligibility
//! predicates over the profile vector. The expert agent sees exactly one
//! subset; its reply is validated post-hoc — any drug outside the eligible
//! regimens is rejected, with one corrective retry before the case errors.
//!
//! The shipped subsets are illustrative test scaffolding, not clinical
//! content; see the repo README.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    parse_structured, BackendError, FieldKind, FieldSpec, ModelBackend, ModelRequest,
    StructSchema, StructuredError,
};
use crate::case::Language;
use crate::profile::{
    DriverGene, DriverStatus, Histology, MetastaticBurden, PdL1, ProfileVector, PsScore,
    ScenarioId, TriState, Warning, PROFILE_FIELDS,
};
use crate::prompts::{PromptError, PromptLibrary};

#[derive(Debug, Error)]
pub enum GuidelineError {
    #[error("missing guideline subset file for scenario {0}")]
    MissingScenarioFile(ScenarioId),
    #[error("bad predicate on field {field:?}: {reason}")]
    BadPredicate { field: String, reason: String },
    #[error("cannot read guideline file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse guideline file {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("recommended drug {0:?} is outside the eligible guideline subset")]
    ConstraintViolation(String),
    #[error("later-line recommendation consists solely of first-line-only regimens")]
    LineViolation,
    #[error("backend error from expert agent: {0}")]
    Backend(#[from] BackendError),
    #[error("expert reply did not parse: {0}")]
    ReplyParse(#[from] StructuredError),
    #[error("prompt error: {0}")]
    Prompt(#[from] PromptError),
}

// ---------------------------------------------------------------------------
// Eligibility predicates
// ---------------------------------------------------------------------------

/// Comparison operator in an eligibility predicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Le,
    Ge,
    Lt,
    Gt,
}

/// Eligibility predicate over profile fields; `and`/`or` with parentheses.
#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    True,
    Cmp {
        field: String,
        op: CmpOp,
        value: String,
    },
    And(Vec<Predicate>),
    Or(Vec<Predicate>),
}

impl Predicate {
    /// Parse a predicate like `driver == EGFR and stage >= IB`.
    pub fn parse(input: &str) -> Result<Predicate, GuidelineError> {
        let tokens = tokenize(input);
        let mut parser = PredParser { tokens, pos: 0 };
        let pred = parser.or_expr()?;
        if parser.pos != parser.tokens.len() {
            return Err(GuidelineError::BadPredicate {
                field: parser.tokens[parser.pos].clone(),
                reason: "trailing tokens".into(),
            });
        }
        pred.validate_fields()?;
        Ok(pred)
    }

    fn validate_fields(&self) -> Result<(), GuidelineError> {
        match self {
            Predicate::True => Ok(()),
            Predicate::Cmp { field, .. } => {
                let known = PROFILE_FIELDS.contains(&field.as_str())
                    || matches!(field.as_str(), "driver" | "ps" | "line" | "burden" | "resection");
                if known {
                    Ok(())
                } else {
                    Err(GuidelineError::BadPredicate {
                        field: field.clone(),
                        reason: "not a profile field".into(),
                    })
                }
            }
            Predicate::And(ps) | Predicate::Or(ps) => {
                ps.iter().try_for_each(|p| p.validate_fields())
            }
        }
    }

    pub fn eval(&self, profile: &ProfileVector) -> bool {
        match self {
            Predicate::True => true,
            Predicate::And(ps) => ps.iter().all(|p| p.eval(profile)),
            Predicate::Or(ps) => ps.iter().any(|p| p.eval(profile)),
            Predicate::Cmp { field, op, value } => eval_cmp(profile, field, *op, value),
        }
    }
}

fn tokenize(input: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    let mut chars = input.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            ' ' | '\t' | '\n' => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
            }
            '(' | ')' => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
                tokens.push(c.to_string());
            }
            '=' | '!' | '<' | '>' => {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
                let mut op = c.to_string();
                if chars.peek() == Some(&'=') {
                    op.push('=');
                    chars.next();
                }
                tokens.push(op);
            }
            _ => cur.push(c),
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

struct PredParser {
    tokens: Vec<String>,
    pos: usize,
}

impl PredParser {
    fn peek(&self) -> Option<&str> {
        self.tokens.get(self.pos).map(|s| s.as_str())
    }

    fn next(&mut self) -> Option<String> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn or_expr(&mut self) -> Result<Predicate, GuidelineError> {
        let mut parts = vec![self.and_expr()?];
        while self.peek() == Some("or") {
            self.next();
            parts.push(self.and_expr()?);
        }
        Ok(if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            Predicate::Or(parts)
        })
    }

    fn and_expr(&mut self) -> Result<Predicate, GuidelineError> {
        let mut parts = vec![self.atom()?];
        while self.peek() == Some("and") {
            self.next();
            parts.push(self.atom()?);
        }
        Ok(if parts.len() == 1 {
            parts.pop().unwrap()
        } else {
            Predicate::And(parts)
        })
    }

    fn atom(&mut self) -> Result<Predicate, GuidelineError> {
        match self.peek() {
            Some("(") => {
                self.next();
                let inner = self.or_expr()?;
                if self.next().as_deref() != Some(")") {
                    return Err(GuidelineError::BadPredicate {
                        field: String::new(),
                        reason: "unclosed parenthesis".into(),
                    });
                }
                Ok(inner)
            }
            Some("true") => {
                self.next();
                Ok(Predicate::True)
            }
            Some(_) => {
                let field = self.next().unwrap();
                let op = match self.next().as_deref() {
                    Some("==") => CmpOp::Eq,
                    Some("!=") => CmpOp::Ne,
                    Some("<=") => CmpOp::Le,
                    Some(">=") => CmpOp::Ge,
                    Some("<") => CmpOp::Lt,
                    Some(">") => CmpOp::Gt,
                    other => {
                        return Err(GuidelineError::BadPredicate {
                            field,
                            reason: format!("expected comparison operator, got {other:?}"),
                        })
                    }
                };
                let value = self.next().ok_or_else(|| GuidelineError::BadPredicate {
                    field: field.clone(),
                    reason: "missing comparison value".into(),
                })?;
                Ok(Predicate::Cmp { field, op, value })
            }
            None => Err(GuidelineError::BadPredicate {
                field: String::new(),
                reason: "empty predicate".into(),
            }),
        }
    }
}

fn cmp_ranks(a: u8, b: u8, op: CmpOp) -> bool {
    match op {
        CmpOp::Eq => a == b,
        CmpOp::Ne => a != b,
        CmpOp::Le => a <= b,
        CmpOp::Ge => a >= b,
        CmpOp::Lt => a < b,
        CmpOp::Gt => a > b,
    }
}

fn eval_cmp(profile: &ProfileVector, field: &str, op: CmpOp, value: &str) -> bool {
    let value_lower = value.to_ascii_lowercase();
    match field {
        "histology" => {
            let actual = match profile.histology {
                Histology::Adenocarcinoma => "adenocarcinoma",
                Histology::Squamous => "squamous",
                Histology::Sclc => "sclc",
                Histology::OtherNsclc => "other_nsclc",
                Histology::Unknown => "unknown",
            };
            apply_eq(actual, &value_lower, op)
        }
        "driver" | "driver_status" => {
            let actual = match profile.driver_status {
                DriverStatus::Positive(DriverGene::Egfr) => "egfr",
                DriverStatus::Positive(DriverGene::Alk) => "alk",
                DriverStatus::Positive(DriverGene::Ros1) => "ros1",
                DriverStatus::Positive(DriverGene::KrasG12c) => "kras_g12c",
                DriverStatus::Positive(DriverGene::Other) => "other",
                DriverStatus::Negative => "negative",
                DriverStatus::Unknown => "unknown",
            };
            match (&value_lower[..], op) {
                ("positive", CmpOp::Eq) => matches!(profile.driver_status, DriverStatus::Positive(_)),
                ("positive", CmpOp::Ne) => !matches!(profile.driver_status, DriverStatus::Positive(_)),
                _ => apply_eq(actual, &value_lower, op),
            }
        }
        "pd_l1" => {
            let rank = |v: &str| match v {
                "lt1" => Some(0u8),
                "1to49" => Some(1),
                "ge50" => Some(2),
                _ => None,
            };
            let actual = match profile.pd_l1 {
                PdL1::LessThan1 => "lt1",
                PdL1::From1To49 => "1to49",
                PdL1::AtLeast50 => "ge50",
                PdL1::Unknown => "unknown",
            };
            match (rank(actual), rank(&value_lower)) {
                (Some(a), Some(b)) => cmp_ranks(a, b, op),
                _ => apply_eq(actual, &value_lower, op),
            }
        }
        "ps" | "ps_score" => match (profile.ps_score, value_lower.parse::<u8>()) {
            (PsScore::Known(a), Ok(b)) => cmp_ranks(a, b, op),
            _ => matches!(op, CmpOp::Eq) && value_lower == "unknown" && profile.ps_score.is_unknown(),
        },
        "line" | "treatment_line" => match value_lower.parse::<u32>() {
            Ok(b) => {
                let a = profile.treatment_line;
                match op {
                    CmpOp::Eq => a == b,
                    CmpOp::Ne => a != b,
                    CmpOp::Le => a <= b,
                    CmpOp::Ge => a >= b,
                    CmpOp::Lt => a < b,
                    CmpOp::Gt => a > b,
                }
            }
            Err(_) => false,
        },
        "stage" => {
            let target: Result<crate::aggregate::OverallStage, _> = value.parse();
            match target {
                Ok(target) => match (profile.stage.rank(), target.rank()) {
                    (Some(a), Some(b)) => cmp_ranks(a, b, op),
                    _ => match op {
                        CmpOp::Eq => profile.stage == target,
                        CmpOp::Ne => profile.stage != target,
                        _ => false,
                    },
                },
                Err(_) => false,
            }
        }
        "burden" | "metastatic_burden" => {
            let actual = match profile.metastatic_burden {
                MetastaticBurden::None => "none",
                MetastaticBurden::Oligo => "oligo",
                MetastaticBurden::Wide => "wide",
                MetastaticBurden::Unknown => "unknown",
            };
            apply_eq(actual, &value_lower, op)
        }
        "resection" | "resection_done" => apply_eq(tri_str(profile.resection_done), &value_lower, op),
        "resectable_intent" => apply_eq(tri_str(profile.resectable_intent), &value_lower, op),
        "prior_regimens" => match op {
            // `prior_regimens == none` means an empty history.
            CmpOp::Eq => (value_lower == "none") == profile.prior_regimens.is_empty(),
            CmpOp::Ne => (value_lower == "none") != profile.prior_regimens.is_empty(),
            _ => false,
        },
        _ => false,
    }
}

fn tri_str(v: TriState) -> &'static str {
    match v {
        TriState::Yes => "yes",
        TriState::No => "no",
        TriState::Unknown => "unknown",
    }
}

fn apply_eq(actual: &str, value: &str, op: CmpOp) -> bool {
    match op {
        CmpOp::Eq => actual == value,
        CmpOp::Ne => actual != value,
        _ => false,
    }
}

// ---------------------------------------------------------------------------
// Guideline subsets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
struct RegimenRaw {
    name: String,
    drugs: Vec<String>,
    eligibility: String,
    #[serde(default)]
    first_line_only: bool,
}

#[derive(Debug, Clone, Deserialize)]
struct SubsetRaw {
    scenario: ScenarioId,
    #[serde(default)]
    sources: Vec<String>,
    constraints: Vec<String>,
    #[serde(default)]
    regimens: Vec<RegimenRaw>,
}

#[derive(Debug, Clone)]
pub struct Regimen {
    pub name: String,
    pub drugs: Vec<String>,
    pub eligibility: Predicate,
    pub first_line_only: bool,
}

/// The guideline subset injected into one scenario's expert agent.
#[derive(Debug, Clone)]
pub struct GuidelineSubset {
    pub scenario: ScenarioId,
    pub sources: Vec<String>,
    pub constraint_blocks: Vec<String>,
    pub allowed_regimens: Vec<Regimen>,
}

impl GuidelineSubset {
    fn from_raw(raw: SubsetRaw) -> Result<GuidelineSubset, GuidelineError> {
        let mut regimens = Vec::new();
        for r in raw.regimens {
            regimens.push(Regimen {
                eligibility: Predicate::parse(&r.eligibility)?,
                name: r.name,
                drugs: r.drugs,
                first_line_only: r.first_line_only,
            });
        }
        Ok(GuidelineSubset {
            scenario: raw.scenario,
            sources: raw.sources,
            constraint_blocks: raw.constraints,
            allowed_regimens: regimens,
        })
    }

    /// Regimens whose eligibility predicate the profile satisfies.
    pub fn eligible_regimens(&self, profile: &ProfileVector) -> Vec<&Regimen> {
        self.allowed_regimens
            .iter()
            .filter(|r| r.eligibility.eval(profile))
            .collect()
    }

    /// Render the constraint blocks and regimen catalog for the prompt.
    pub fn render_constraints(&self, profile: &ProfileVector) -> String {
        let mut out = String::new();
        for (i, block) in self.constraint_blocks.iter().enumerate() {
            out.push_str(&format!("[{i}] {block}\n"));
        }
        let eligible = self.eligible_regimens(profile);
        if !eligible.is_empty() {
            out.push_str("eligible regimens for this profile:\n");
            for r in eligible {
                out.push_str(&format!("  - {}: {}\n", r.name, r.drugs.join(", ")));
            }
        }
        out
    }
}

/// All eight subsets, keyed by scenario.
#[derive(Debug, Clone)]
pub struct GuidelineStore {
    map: BTreeMap<ScenarioId, GuidelineSubset>,
}

impl GuidelineStore {
    pub fn get(&self, scenario: ScenarioId) -> Result<&GuidelineSubset, GuidelineError> {
        self.map
            .get(&scenario)
            .ok_or(GuidelineError::MissingScenarioFile(scenario))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn from_parts(parts: Vec<(String, String)>) -> Result<GuidelineStore, GuidelineError> {
        let mut map = BTreeMap::new();
        for (path, content) in parts {
            let raw: SubsetRaw =
                toml::from_str(&content).map_err(|e| GuidelineError::Parse {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
            let subset = GuidelineSubset::from_raw(raw)?;
            map.insert(subset.scenario, subset);
        }
        for scenario in ScenarioId::ALL {
            if !map.contains_key(scenario) {
                return Err(GuidelineError::MissingScenarioFile(*scenario));
            }
        }
        // Every scenario except referral must offer regimens.
        for (scenario, subset) in &map {
            if *scenario != ScenarioId::MdtReferral && subset.allowed_regimens.is_empty() {
                return Err(GuidelineError::Parse {
                    path: scenario.as_str().to_string(),
                    reason: "allowed_regimens must be non-empty".into(),
                });
            }
        }
        Ok(GuidelineStore { map })
    }
}

/// Load one subset file per scenario (`<scenario>.toml`) from a directory.
pub fn load_guidelines(dir: impl AsRef<Path>) -> Result<GuidelineStore, GuidelineError> {
    let dir = dir.as_ref();
    let mut parts = Vec::new();
    for scenario in ScenarioId::ALL {
        let path = dir.join(format!("{}.toml", scenario.as_str()));
        if !path.exists() {
            return Err(GuidelineError::MissingScenarioFile(*scenario));
        }
        let content = std::fs::read_to_string(&path).map_err(|source| GuidelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        parts.push((path.display().to_string(), content));
    }
    GuidelineStore::from_parts(parts)
}

/// The subsets shipped with the crate.
pub fn embedded_guidelines() -> &'static GuidelineStore {
    static EMBEDDED: std::sync::OnceLock<GuidelineStore> = std::sync::OnceLock::new();
    EMBEDDED.get_or_init(|| {
        let parts = vec![
            ("postop-early-stage", include_str!("../data/guidelines/postop-early-stage.toml")),
            ("neoadjuvant-resectable", include_str!("../data/guidelines/neoadjuvant-resectable.toml")),
            ("adv-driver-neg-first-line", include_str!("../data/guidelines/adv-driver-neg-first-line.toml")),
            ("adv-driver-pos-first-line", include_str!("../data/guidelines/adv-driver-pos-first-line.toml")),
            ("adv-driver-neg-later-line", include_str!("../data/guidelines/adv-driver-neg-later-line.toml")),
            ("adv-driver-pos-later-line", include_str!("../data/guidelines/adv-driver-pos-later-line.toml")),
            ("oligometastatic", include_str!("../data/guidelines/oligometastatic.toml")),
            ("mdt-referral", include_str!("../data/guidelines/mdt-referral.toml")),
        ];
        GuidelineStore::from_parts(
            parts
                .into_iter()
                .map(|(n, c)| (n.to_string(), c.to_string()))
                .collect(),
        )
        .expect("embedded guideline subsets are valid")
    })
}

// ---------------------------------------------------------------------------
// Recommendation
// ---------------------------------------------------------------------------

/// The final treatment recommendation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentRecommendation {
    pub scenario: ScenarioId,
    pub strategy: String,
    pub core_regimen: Vec<String>,
    pub key_considerations: String,
    /// Pre-treatment evaluation warnings, prepended verbatim.
    pub warnings: Vec<Warning>,
    pub reasoning: String,
    /// Constraint-block indices the expert actually relied on.
    pub cited_blocks: Vec<usize>,
}

impl fmt::Display for TreatmentRecommendation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario: {}", self.scenario)?;
        for w in &self.warnings {
            writeln!(f, "warning: {}", w.message)?;
        }
        writeln!(f, "strategy: {}", self.strategy)?;
        writeln!(f, "core regimen: {}", self.core_regimen.join(", "))?;
        writeln!(f, "key considerations: {}", self.key_considerations)?;
        write!(f, "reasoning: {}", self.reasoning)
    }
}

fn normalize_drug(name: &str) -> String {
    name.trim().to_lowercase()
}

fn reply_schema() -> StructSchema {
    StructSchema::new(vec![
        FieldSpec::required("strategy", FieldKind::String),
        FieldSpec::required("core_regimen", FieldKind::Array),
        FieldSpec::optional("key_considerations", FieldKind::String),
        FieldSpec::optional("reasoning", FieldKind::String),
        FieldSpec::optional("cited_blocks", FieldKind::Array),
    ])
}

struct ValidatedReply {
    strategy: String,
    core_regimen: Vec<String>,
    key_considerations: String,
    reasoning: String,
    cited_blocks: Vec<usize>,
}

fn validate_reply(
    text: &str,
    subset: &GuidelineSubset,
    profile: &ProfileVector,
    scenario: ScenarioId,
) -> Result<ValidatedReply, GuidelineError> {
    let value = parse_structured(text, &reply_schema())?;
    let core_regimen: Vec<String> = value["core_regimen"]
        .as_array()
        .into_iter()
        .flatten()
        .filter_map(|v| v.as_str().map(|s| s.trim().to_string()))
        .filter(|s| !s.is_empty())
        .collect();

    let eligible = subset.eligible_regimens(profile);
    let allowed: BTreeSet<String> = eligible
        .iter()
        .flat_map(|r| r.drugs.iter())
        .map(|d| normalize_drug(d))
        .collect();
    for drug in &core_regimen {
        if !allowed.contains(&normalize_drug(drug)) {
            return Err(GuidelineError::ConstraintViolation(drug.clone()));
        }
    }

    // Line discipline: a later-line recommendation must not consist solely
    // of regimens marked first-line-only.
    let later_line = matches!(
        scenario,
        ScenarioId::AdvDriverNegLaterLine | ScenarioId::AdvDriverPosLaterLine
    );
    if later_line && !core_regimen.is_empty() {
        let all_first_line_only = core_regimen.iter().all(|drug| {
            let d = normalize_drug(drug);
            let carriers: Vec<&&Regimen> = eligible
                .iter()
                .filter(|r| r.drugs.iter().any(|x| normalize_drug(x) == d))
                .collect();
            !carriers.is_empty() && carriers.iter().all(|r| r.first_line_only)
        });
        if all_first_line_only {
            return Err(GuidelineError::LineViolation);
        }
    }

    let cited_blocks = value["cited_blocks"]
        .as_array()
        .into_iter()
        .flatten()
        .filter_map(|v| v.as_u64().map(|n| n as usize))
        .filter(|i| *i < subset.constraint_blocks.len())
        .collect();

    Ok(ValidatedReply {
        strategy: value["strategy"].as_str().unwrap_or_default().to_string(),
        core_regimen,
        key_considerations: value["key_considerations"]
            .as_str()
            .unwrap_or_default()
            .to_string(),
        reasoning: value["reasoning"].as_str().unwrap_or_default().to_string(),
        cited_blocks,
    })
}

fn render_warnings(warnings: &[Warning]) -> String {
    if warnings.is_empty() {
        "(none)".to_string()
    } else {
        warnings
            .iter()
            .map(|w| format!("- {}", w.message))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Generate the recommendation for a routed scenario via the expert agent.
///
/// The prompt contains exactly this scenario's constraint blocks. The parsed
/// reply is validated against the hard-constraint invariant; a violation
/// triggers one corrective retry with the violation appended, then errors.
/// `MdtReferral` produces a deterministic referral with an empty regimen.
#[allow(clippy::too_many_arguments)]
pub fn recommend(
    profile: &ProfileVector,
    scenario: ScenarioId,
    store: &GuidelineStore,
    backend: &dyn ModelBackend,
    prompts: &PromptLibrary,
    language: Language,
    case_id: &str,
    warnings: &[Warning],
) -> Result<TreatmentRecommendation, GuidelineError> {
    if scenario == ScenarioId::MdtReferral {
        return Ok(referral_recommendation(profile, warnings));
    }
    let subset = store.get(scenario)?;
    let constraints = subset.render_constraints(profile);
    let base_prompt = prompts.render(
        scenario.template_name(),
        language,
        &[
            ("case_id", case_id),
            ("profile", profile.render().as_str()),
            ("constraints", constraints.as_str()),
            ("warnings", render_warnings(warnings).as_str()),
        ],
    )?;

    let mut prompt = base_prompt.clone();
    let mut last_err: Option<GuidelineError> = None;
    for attempt in 0..2 {
        let tag = format!("expert-{}", scenario.as_str());
        let response = backend.complete(&ModelRequest::simple(tag, prompt.clone()))?;
        match validate_reply(&response.text, subset, profile, scenario) {
            Ok(reply) => {
                return Ok(TreatmentRecommendation {
                    scenario,
                    strategy: reply.strategy,
                    core_regimen: reply.core_regimen,
                    key_considerations: reply.key_considerations,
                    warnings: warnings.to_vec(),
                    reasoning: reply.reasoning,
                    cited_blocks: reply.cited_blocks,
                });
            }
            Err(e @ (GuidelineError::ConstraintViolation(_) | GuidelineError::LineViolation)) => {
                if attempt == 0 {
                    prompt = format!(
                        "{base_prompt}\n\nYour previous reply violated the guideline subset: {e}. \
                         Reply again using only drugs from the eligible regimens above."
                    );
                }
                last_err = Some(e);
            }
            Err(other) => return Err(other),
        }
    }
    Err(last_err.expect("retry loop sets the error"))
}

/// Deterministic referral output for cases outside every codified pathway.
fn referral_recommendation(
    profile: &ProfileVector,
    warnings: &[Warning],
) -> TreatmentRecommendation {
    TreatmentRecommendation {
        scenario: ScenarioId::MdtReferral,
        strategy: "Refer to multidisciplinary team review; no codified systemic pathway applies."
            .to_string(),
        core_regimen: Vec::new(),
        key_considerations: format!(
            "Stage {}; complete the outstanding evaluations before treatment selection.",
            profile.stage
        ),
        warnings: warnings.to_vec(),
        reasoning: "The profile matches none of the codified treatment scenarios, so the safe \
                    action is multidisciplinary review rather than an automated recommendation."
            .to_string(),
        cited_blocks: Vec::new(),
    }
}

/// Deterministic offline recommendation: the first eligible regimen, no
/// backend involved. Used by the rule-engine pipeline mode and the synthetic
/// gold-label generator.
pub fn recommend_rule_based(
    profile: &ProfileVector,
    scenario: ScenarioId,
    store: &GuidelineStore,
    warnings: &[Warning],
) -> Result<TreatmentRecommendation, GuidelineError> {
    if scenario == ScenarioId::MdtReferral {
        return Ok(referral_recommendation(profile, warnings));
    }
    let subset = store.get(scenario)?;
    let eligible = subset.eligible_regimens(profile);
    let pick = eligible.first();
    let (strategy, drugs, name) = match pick {
        Some(r) => (
            format!("Scenario {}: {}", scenario, r.name.replace('-', " ")),
            r.drugs.clone(),
            r.name.clone(),
        ),
        None => (
            format!(
                "Scenario {}: no regimen eligible for this profile; complete the missing \
                 evaluations first",
                scenario
            ),
            Vec::new(),
            "none".to_string(),
        ),
    };
    // Keep one canonical name per agent: the catalog lists each Latin name
    // followed by its CJK alias, so pure-CJK entries are alias spellings.
    let mut seen = BTreeSet::new();
    let mut core_regimen: Vec<String> = drugs
        .iter()
        .filter(|d| !d.chars().any(|c| ('\u{4e00}'..='\u{9fff}').contains(&c)))
        .filter(|d| seen.insert(normalize_drug(d)))
        .cloned()
        .collect();
    if core_regimen.is_empty() && !drugs.is_empty() {
        // All-CJK catalogs keep their spellings.
        let mut seen = BTreeSet::new();
        core_regimen = drugs
            .iter()
            .filter(|d| seen.insert(normalize_drug(d)))
            .cloned()
            .collect();
    }
    Ok(TreatmentRecommendation {
        scenario,
        strategy,
        core_regimen,
        key_considerations: warnings
            .iter()
            .map(|w| w.message.clone())
            .collect::<Vec<_>>()
            .join(" "),
        warnings: warnings.to_vec(),
        reasoning: format!(
            "Routed to {} and matched regimen {} under the injected guideline subset.",
            scenario, name
        ),
        cited_blocks: (0..subset.constraint_blocks.len().min(1)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::OverallStage;
    use crate::backend::{scripted_backend, ScriptRule};

    fn profile() -> ProfileVector {
        ProfileVector {
            histology: Histology::Adenocarcinoma,
            driver_status: DriverStatus::Negative,
            pd_l1: PdL1::AtLeast50,
            ps_score: PsScore::Known(1),
            resection_done: TriState::No,
            treatment_line: 1,
            prior_regimens: vec![],
            metastatic_burden: MetastaticBurden::Wide,
            stage: OverallStage::IVB,
            resectable_intent: TriState::No,
        }
    }

    #[test]
    fn embedded_store_has_all_eight_subsets() {
        let store = embedded_guidelines();
        assert_eq!(store.len(), 8);
        for scenario in ScenarioId::ALL {
            assert!(store.get(*scenario).is_ok());
        }
    }

    #[test]
    fn predicates_parse_and_evaluate() {
        let p = Predicate::parse("pd_l1 == ge50 and histology != squamous").unwrap();
        assert!(p.eval(&profile()));
        let p = Predicate::parse("driver == egfr or driver == alk").unwrap();
        assert!(!p.eval(&profile()));
        let p = Predicate::parse("stage >= IVA and line == 1").unwrap();
        assert!(p.eval(&profile()));
        let p = Predicate::parse("(ps <= 2) and burden == wide").unwrap();
        assert!(p.eval(&profile()));
    }

    #[test]
    fn unknown_field_is_bad_predicate() {
        match Predicate::parse("smoking == yes") {
            Err(GuidelineError::BadPredicate { field, .. }) => assert_eq!(field, "smoking"),
            other => panic!("expected BadPredicate, got {other:?}"),
        }
    }

    #[test]
    fn missing_scenario_file_is_loud() {
        let dir = tempfile::tempdir().unwrap();
        // Write all but one scenario file.
        for scenario in ScenarioId::ALL.iter().skip(1) {
            std::fs::write(
                dir.path().join(format!("{}.toml", scenario.as_str())),
                format!(
                    "scenario = \"{}\"\nconstraints = [\"X\"]\n[[regimens]]\nname = \"r\"\ndrugs = [\"d\"]\neligibility = \"true\"\n",
                    scenario.as_str()
                ),
            )
            .unwrap();
        }
        match load_guidelines(dir.path()) {
            Err(GuidelineError::MissingScenarioFile(s)) => {
                assert_eq!(s, ScenarioId::PostopEarlyStage)
            }
            other => panic!("expected MissingScenarioFile, got {other:?}"),
        }
    }

    fn expert_reply(drugs: &[&str]) -> String {
        serde_json::json!({
            "strategy": "systemic therapy",
            "core_regimen": drugs,
            "key_considerations": "monitor toxicity",
            "reasoning": "per injected subset",
            "cited_blocks": [0]
        })
        .to_string()
    }

    #[test]
    fn in_subset_reply_is_accepted() {
        let store = embedded_guidelines();
        let backend = scripted_backend(vec![ScriptRule::new(
            "expert-adv-driver-neg-first-line",
            expert_reply(&["pembrolizumab"]),
        )]);
        let rec = recommend(
            &profile(),
            ScenarioId::AdvDriverNegFirstLine,
            store,
            &backend,
            &PromptLibrary::embedded(),
            Language::En,
            "c1",
            &[],
        )
        .unwrap();
        assert_eq!(rec.core_regimen, vec!["pembrolizumab"]);
    }

    #[test]
    fn out_of_subset_drug_is_rejected_then_retry_accepted() {
        let store = embedded_guidelines();
        let backend = scripted_backend(vec![
            ScriptRule::new(
                "expert-adv-driver-neg-first-line",
                expert_reply(&["imaginariumab"]),
            ),
            ScriptRule::new(
                "expert-adv-driver-neg-first-line",
                expert_reply(&["pembrolizumab"]),
            ),
        ]);
        let rec = recommend(
            &profile(),
            ScenarioId::AdvDriverNegFirstLine,
            store,
            &backend,
            &PromptLibrary::embedded(),
            Language::En,
            "c1",
            &[],
        )
        .unwrap();
        assert_eq!(rec.core_regimen, vec!["pembrolizumab"]);
    }

    #[test]
    fn persistent_violation_errors() {
        let store = embedded_guidelines();
        let backend = scripted_backend(vec![
            ScriptRule::new(
                "expert-adv-driver-neg-first-line",
                expert_reply(&["imaginariumab"]),
            )
            .sticky(),
        ]);
        let err = recommend(
            &profile(),
            ScenarioId::AdvDriverNegFirstLine,
            store,
            &backend,
            &PromptLibrary::embedded(),
            Language::En,
            "c1",
            &[],
        )
        .unwrap_err();
        assert!(matches!(err, GuidelineError::ConstraintViolation(d) if d == "imaginariumab"));
    }

    #[test]
    fn eligibility_gates_drugs_not_just_subset_membership() {
        // Osimertinib is in the driver-positive subset but needs EGFR.
        let store = embedded_guidelines();
        let mut p = profile();
        p.driver_status = DriverStatus::Positive(DriverGene::Alk);
        let backend = scripted_backend(vec![ScriptRule::new(
            "expert-adv-driver-pos-first-line",
            expert_reply(&["osimertinib"]),
        )
        .sticky()]);
        let err = recommend(
            &p,
            ScenarioId::AdvDriverPosFirstLine,
            store,
            &backend,
            &PromptLibrary::embedded(),
            Language::En,
            "c1",
            &[],
        )
        .unwrap_err();
        assert!(matches!(err, GuidelineError::ConstraintViolation(_)));
    }

    #[test]
    fn later_line_rejects_first_line_only_regimens() {
        // A later-line subset whose only pembrolizumab carrier is marked
        // first-line-only must refuse a reply consisting solely of it.
        let dir = tempfile::tempdir().unwrap();
        for scenario in ScenarioId::ALL {
            let body = if *scenario == ScenarioId::AdvDriverNegLaterLine {
                "scenario = \"adv-driver-neg-later-line\"\nconstraints = [\"ADN2-T: test\"]\n\
                 [[regimens]]\nname = \"io-first-line\"\ndrugs = [\"pembrolizumab\"]\n\
                 eligibility = \"line >= 2\"\nfirst_line_only = true\n\
                 [[regimens]]\nname = \"docetaxel\"\ndrugs = [\"docetaxel\"]\n\
                 eligibility = \"line >= 2\"\n"
                    .to_string()
            } else {
                format!(
                    "scenario = \"{}\"\nconstraints = [\"X\"]\n{}",
                    scenario.as_str(),
                    if *scenario == ScenarioId::MdtReferral {
                        "regimens = []\n".to_string()
                    } else {
                        "[[regimens]]\nname = \"r\"\ndrugs = [\"d\"]\neligibility = \"true\"\n"
                            .to_string()
                    }
                )
            };
            std::fs::write(
                dir.path().join(format!("{}.toml", scenario.as_str())),
                body,
            )
            .unwrap();
        }
        let store = load_guidelines(dir.path()).unwrap();
        let mut p = profile();
        p.treatment_line = 2;
        p.prior_regimens = vec!["platinum-doublet".into()];
        let backend = scripted_backend(vec![ScriptRule::new(
            "expert-adv-driver-neg-later-line",
            expert_reply(&["pembrolizumab"]),
        )
        .sticky()]);
        let err = recommend(
            &p,
            ScenarioId::AdvDriverNegLaterLine,
            &store,
            &backend,
            &PromptLibrary::embedded(),
            Language::En,
            "c1",
            &[],
        )
        .unwrap_err();
        assert!(matches!(err, GuidelineError::LineViolation), "{err:?}");
        // A mixed reply that includes a non-first-line regimen passes.
        let backend = scripted_backend(vec![ScriptRule::new(
            "expert-adv-driver-neg-later-line",
            expert_reply(&["pembrolizumab", "docetaxel"]),
        )]);
        let rec = recommend(
            &p,
            ScenarioId::AdvDriverNegLaterLine,
            &store,
            &backend,
            &PromptLibrary::embedded(),
            Language::En,
            "c1",
            &[],
        )
        .unwrap();
        assert_eq!(rec.core_regimen.len(), 2);
    }

    #[test]
    fn referral_needs_no_backend_and_has_empty_regimen() {
        let store = embedded_guidelines();
        let backend = scripted_backend(vec![]);
        let warnings = vec![Warning {
            field: None,
            message: "No codified pathway.".into(),
        }];
        let rec = recommend(
            &profile(),
            ScenarioId::MdtReferral,
            store,
            &backend,
            &PromptLibrary::embedded(),
            Language::En,
            "c1",
            &warnings,
        )
        .unwrap();
        assert!(rec.core_regimen.is_empty());
        assert_eq!(rec.warnings, warnings);
    }

    #[test]
    fn rule_based_recommendation_is_grounded() {
        let store = embedded_guidelines();
        let rec =
            recommend_rule_based(&profile(), ScenarioId::AdvDriverNegFirstLine, store, &[]).unwrap();
        assert!(!rec.core_regimen.is_empty());
        let subset = store.get(ScenarioId::AdvDriverNegFirstLine).unwrap();
        let allowed: BTreeSet<String> = subset
            .eligible_regimens(&profile())
            .iter()
            .flat_map(|r| r.drugs.iter())
            .map(|d| normalize_drug(d))
            .collect();
        for d in &rec.core_regimen {
            assert!(allowed.contains(&normalize_drug(d)));
        }
    }
}
