//! Case data model, the on-disk case file format, validation, and core-subset
//! sampling.
//!
//! A case file is a single JSON document with a top-level `cases` array.
//! Unknown fields are preserved on round-trip so externally annotated files
//! survive a load/save cycle byte-compatibly at the value level.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::staging::{MCategory, NCategory, TCategory};

/// Report modality. Each value maps to a stable single-letter code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "C")]
    Clinical,
    #[serde(rename = "I")]
    Imaging,
    #[serde(rename = "P")]
    Pathology,
    #[serde(rename = "S")]
    Supplementary,
}

impl Modality {
    pub const ALL: [Modality; 4] = [
        Modality::Clinical,
        Modality::Imaging,
        Modality::Pathology,
        Modality::Supplementary,
    ];

    pub fn code(self) -> char {
        match self {
            Modality::Clinical => 'C',
            Modality::Imaging => 'I',
            Modality::Pathology => 'P',
            Modality::Supplementary => 'S',
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

/// Case language tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Language {
    #[serde(rename = "zh")]
    Zh,
    #[serde(rename = "en")]
    En,
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Language::Zh => write!(f, "zh"),
            Language::En => write!(f, "en"),
        }
    }
}

/// One report document. At least one of `text` / `image_refs` must be present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseDocument {
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub image_refs: Vec<String>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl CaseDocument {
    pub fn text_only(modality: Modality, text: impl Into<String>) -> Self {
        CaseDocument {
            modality,
            text: Some(text.into()),
            image_refs: Vec::new(),
            extra: serde_json::Map::new(),
        }
    }

    pub fn has_content(&self) -> bool {
        self.text.as_deref().is_some_and(|t| !t.trim().is_empty()) || !self.image_refs.is_empty()
    }
}

/// Expert-annotated staging label with its reasoning evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldStaging {
    pub t: TCategory,
    pub n: NCategory,
    pub m: MCategory,
    #[serde(default)]
    pub reasoning_evidence: String,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

/// Reference treatment plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldTreatment {
    pub strategy: String,
    pub core_regimen: Vec<String>,
    #[serde(default)]
    pub key_considerations: String,
    #[serde(default)]
    pub reasoning: String,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

/// One patient case. Immutable after load; safe to share across workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    pub language: Language,
    pub documents: Vec<CaseDocument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_staging: Option<GoldStaging>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_treatment: Option<GoldTreatment>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl CaseRecord {
    /// Concatenated text of all documents that carry text, in document order.
    pub fn full_text(&self) -> String {
        let mut out = String::new();
        for doc in &self.documents {
            if let Some(t) = &doc.text {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(t);
            }
        }
        out
    }

    pub fn document(&self, modality: Modality) -> Option<&CaseDocument> {
        self.documents.iter().find(|d| d.modality == modality)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
struct CaseFile {
    cases: Vec<CaseRecord>,
    #[serde(flatten)]
    extra: serde_json::Map<String, serde_json::Value>,
}

/// Evaluation task selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskId {
    /// Task 1: predict the TNM triple from the documents alone.
    #[serde(rename = "staging")]
    TnmStaging,
    /// Task 2: recommend treatment given the gold stage as input.
    #[serde(rename = "treatment")]
    TreatmentRecommendation,
    /// Task 3: recommend treatment from the documents alone.
    #[serde(rename = "e2e")]
    EndToEnd,
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskId::TnmStaging => write!(f, "staging"),
            TaskId::TreatmentRecommendation => write!(f, "treatment"),
            TaskId::EndToEnd => write!(f, "e2e"),
        }
    }
}

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("case file not found: {0}")]
    FileNotFound(String),
    #[error("malformed case file at line {line}: {reason}")]
    MalformedCaseFile { line: usize, reason: String },
    #[error("duplicate case id: {0}")]
    DuplicateCaseId(String),
    #[error("document {index} of case {case} has neither text nor image refs")]
    EmptyDocument { case: String, index: usize },
    #[error("requested subset of {requested} from only {available} cases")]
    SubsetTooLarge { requested: usize, available: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Load a case file. Order is preserved; ids must be unique.
pub fn load_cases(path: impl AsRef<Path>) -> Result<Vec<CaseRecord>, CaseError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(CaseError::FileNotFound(path.display().to_string()));
    }
    let raw = std::fs::read_to_string(path)?;
    parse_cases(&raw)
}

/// Parse case-file content from a string. Used by [`load_cases`] and tests.
pub fn parse_cases(raw: &str) -> Result<Vec<CaseRecord>, CaseError> {
    let file: CaseFile =
        serde_json::from_str(raw).map_err(|e| CaseError::MalformedCaseFile {
            line: e.line(),
            reason: e.to_string(),
        })?;
    let mut seen = BTreeSet::new();
    for case in &file.cases {
        if !seen.insert(case.id.clone()) {
            return Err(CaseError::DuplicateCaseId(case.id.clone()));
        }
        for (i, doc) in case.documents.iter().enumerate() {
            if !doc.has_content() {
                return Err(CaseError::EmptyDocument {
                    case: case.id.clone(),
                    index: i,
                });
            }
        }
    }
    Ok(file.cases)
}

/// Serialize cases back into the case-file format (pretty-printed JSON).
pub fn serialize_cases(cases: &[CaseRecord]) -> String {
    let file = CaseFile {
        cases: cases.to_vec(),
        extra: serde_json::Map::new(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("case records are serializable");
    s.push('\n');
    s
}

/// Write cases to `path` in the case-file format.
pub fn save_cases(cases: &[CaseRecord], path: impl AsRef<Path>) -> Result<(), CaseError> {
    std::fs::write(path, serialize_cases(cases))?;
    Ok(())
}

/// One validation problem found by [`validate_case`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValidationIssue {
    MissingGoldStaging,
    MissingGoldTreatment,
    EmptyDocument { index: usize },
    NoDocuments,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ValidationIssue::MissingGoldStaging => write!(f, "missing gold staging label"),
            ValidationIssue::MissingGoldTreatment => write!(f, "missing gold treatment label"),
            ValidationIssue::EmptyDocument { index } => {
                write!(f, "document {index} has no content")
            }
            ValidationIssue::NoDocuments => write!(f, "case has no documents"),
        }
    }
}

/// Check that a case carries what the given task needs. Issues are returned,
/// never thrown; an empty report means the case is usable.
///
/// Task 1 needs a gold staging label. Tasks 2 and 3 need a gold treatment
/// label, and Task 2 additionally needs gold staging because that stage is
/// injected into the prompt.
pub fn validate_case(case: &CaseRecord, task: TaskId) -> Vec<ValidationIssue> {
    let mut issues = Vec::new();
    match task {
        TaskId::TnmStaging => {
            if case.gold_staging.is_none() {
                issues.push(ValidationIssue::MissingGoldStaging);
            }
        }
        TaskId::TreatmentRecommendation => {
            if case.gold_treatment.is_none() {
                issues.push(ValidationIssue::MissingGoldTreatment);
            }
            if case.gold_staging.is_none() {
                issues.push(ValidationIssue::MissingGoldStaging);
            }
        }
        TaskId::EndToEnd => {
            if case.gold_treatment.is_none() {
                issues.push(ValidationIssue::MissingGoldTreatment);
            }
        }
    }
    if case.documents.is_empty() {
        issues.push(ValidationIssue::NoDocuments);
    }
    for (i, doc) in case.documents.iter().enumerate() {
        if !doc.has_content() {
            issues.push(ValidationIssue::EmptyDocument { index: i });
        }
    }
    issues
}

/// Draw `num_subsets` independent subsets of `subset_size` cases each.
///
/// Subsets are drawn without replacement internally and independently of each
/// other (a case may appear in several subsets). The draw is a pure function
/// of `(seed, cases, subset_size, num_subsets)`.
pub fn sample_core(
    cases: &[CaseRecord],
    seed: u64,
    subset_size: usize,
    num_subsets: usize,
) -> Result<Vec<Vec<CaseRecord>>, CaseError> {
    if subset_size > cases.len() {
        return Err(CaseError::SubsetTooLarge {
            requested: subset_size,
            available: cases.len(),
        });
    }
    let mut subsets = Vec::with_capacity(num_subsets);
    for k in 0..num_subsets {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64 + 1);
        let mut indices: Vec<usize> = (0..cases.len()).collect();
        indices.shuffle(&mut rng);
        indices.truncate(subset_size);
        subsets.push(indices.into_iter().map(|i| cases[i].clone()).collect());
    }
    Ok(subsets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_file() -> String {
        r#"{
          "cases": [
            {
              "id": "c1",
              "language": "zh",
              "documents": [
                {"modality": "C", "text": "clinical"},
                {"modality": "I", "text": "imaging"}
              ],
              "gold_staging": {"t": "T1a", "n": "N0", "m": "M0", "reasoning_evidence": "ev"}
            },
            {
              "id": "c2",
              "language": "en",
              "documents": [{"modality": "I", "text": "imaging only"}],
              "custom_annotation": {"difficulty": "easy"}
            },
            {
              "id": "c3",
              "language": "en",
              "documents": [{"modality": "I", "image_refs": ["img/p1.png"]}]
            }
          ]
        }"#
        .to_string()
    }

    #[test]
    fn load_preserves_order_and_count() {
        let cases = parse_cases(&sample_file()).unwrap();
        assert_eq!(cases.len(), 3);
        assert_eq!(cases[0].id, "c1");
        assert_eq!(cases[1].id, "c2");
        assert_eq!(cases[2].id, "c3");
    }

    #[test]
    fn missing_modalities_load_fine() {
        let cases = parse_cases(&sample_file()).unwrap();
        // c2 has no pathology document; that is a legal case.
        assert!(cases[1].document(Modality::Pathology).is_none());
        assert!(cases[1].document(Modality::Imaging).is_some());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let raw = r#"{"cases": [
            {"id": "c1", "language": "en", "documents": [{"modality": "I", "text": "a"}]},
            {"id": "c1", "language": "en", "documents": [{"modality": "I", "text": "b"}]}
        ]}"#;
        match parse_cases(raw) {
            Err(CaseError::DuplicateCaseId(id)) => assert_eq!(id, "c1"),
            other => panic!("expected DuplicateCaseId, got {other:?}"),
        }
    }

    #[test]
    fn malformed_file_reports_line() {
        let raw = "{\n  \"cases\": [\n    {\"id\": }\n  ]\n}";
        match parse_cases(raw) {
            Err(CaseError::MalformedCaseFile { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected MalformedCaseFile, got {other:?}"),
        }
    }

    #[test]
    fn unknown_fields_survive_round_trip() {
        let cases = parse_cases(&sample_file()).unwrap();
        let round = parse_cases(&serialize_cases(&cases)).unwrap();
        assert_eq!(cases, round);
        assert!(round[1].extra.contains_key("custom_annotation"));
    }

    #[test]
    fn validate_flags_missing_gold() {
        let cases = parse_cases(&sample_file()).unwrap();
        assert!(validate_case(&cases[0], TaskId::TnmStaging).is_empty());
        let issues = validate_case(&cases[1], TaskId::TreatmentRecommendation);
        assert!(issues.contains(&ValidationIssue::MissingGoldTreatment));
        let issues = validate_case(&cases[1], TaskId::TnmStaging);
        assert_eq!(issues, vec![ValidationIssue::MissingGoldStaging]);
    }

    #[test]
    fn validate_flags_empty_document() {
        let mut case = parse_cases(&sample_file()).unwrap().remove(0);
        case.documents.push(CaseDocument {
            modality: Modality::Supplementary,
            text: Some("   ".into()),
            image_refs: vec![],
            extra: serde_json::Map::new(),
        });
        let issues = validate_case(&case, TaskId::TnmStaging);
        assert_eq!(issues, vec![ValidationIssue::EmptyDocument { index: 2 }]);
    }

    fn dummy_cases(n: usize) -> Vec<CaseRecord> {
        (0..n)
            .map(|i| CaseRecord {
                id: format!("c{i}"),
                language: Language::En,
                documents: vec![CaseDocument::text_only(Modality::Imaging, "x")],
                gold_staging: None,
                gold_treatment: None,
                extra: serde_json::Map::new(),
            })
            .collect()
    }

    #[test]
    fn sample_core_is_deterministic_and_duplicate_free() {
        let cases = dummy_cases(50);
        let a = sample_core(&cases, 7, 10, 3).unwrap();
        let b = sample_core(&cases, 7, 10, 3).unwrap();
        assert_eq!(a, b);
        for subset in &a {
            assert_eq!(subset.len(), 10);
            let ids: BTreeSet<_> = subset.iter().map(|c| &c.id).collect();
            assert_eq!(ids.len(), 10, "intra-subset duplicates");
        }
        // Independent draws: different seeds move the subsets.
        let c = sample_core(&cases, 8, 10, 3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sample_core_rejects_oversized_subset() {
        let cases = dummy_cases(10);
        match sample_core(&cases, 1, 11, 1) {
            Err(CaseError::SubsetTooLarge { requested, available }) => {
                assert_eq!((requested, available), (11, 10));
            }
            other => panic!("expected SubsetTooLarge, got {other:?}"),
        }
    }
}
