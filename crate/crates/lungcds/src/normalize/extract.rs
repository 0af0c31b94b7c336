//! Report-to-findings extraction: a deterministic lexicon path and a
//! model-driven path behind the same output contract.
//!
//! Both paths guarantee the same postconditions: atomic sites (compounds are
//! re-split), laterality anchored against the primary side, hedged language
//! preserved as explicit uncertainty, and no staging judgment in any field.

use serde_json::Value;
use thiserror::Error;

use crate::backend::{
    parse_structured, BackendError, FieldKind, FieldSpec, InputMode, Message, MessagePart,
    ModelBackend, ModelRequest, Role, StructSchema, StructuredError,
};
use crate::case::{CaseRecord, Language};
use crate::prompts::{PromptError, PromptLibrary};

use super::lexicon::Lexicon;
use super::sites;
use super::split::split_composite_site;
use super::{tags, Certainty, Laterality, NormalizedFinding, Side, SourceSpan};

#[derive(Debug, Error)]
pub enum NormalizeError {
    #[error("backend error during normalization: {0}")]
    Backend(#[from] BackendError),
    #[error("normalization reply did not parse: {0}")]
    Parse(#[from] StructuredError),
    #[error("prompt error: {0}")]
    Prompt(#[from] PromptError),
    #[error("normalization reply is unusable: {0}")]
    BadReply(String),
    #[error("case has no document with content")]
    EmptyCase,
}

/// Result of normalizing one case: the findings plus the primary tumor side
/// they are anchored to.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedCase {
    pub findings: Vec<NormalizedFinding>,
    pub primary_side: Side,
}

// ---------------------------------------------------------------------------
// Deterministic path
// ---------------------------------------------------------------------------

/// Sentence segmentation with byte offsets. Breaks on CJK/ASCII terminators
/// and newlines, but not inside decimal numbers.
fn segments(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0usize;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let brk = match c {
            '。' | '；' | ';' | '\n' => true,
            '.' => {
                let prev_digit = text[..i]
                    .chars()
                    .next_back()
                    .is_some_and(|p| p.is_ascii_digit());
                let next_digit = chars
                    .peek()
                    .is_some_and(|(_, n)| n.is_ascii_digit());
                !(prev_digit && next_digit)
            }
            _ => false,
        };
        if brk {
            if i > start {
                out.push((start, i));
            }
            start = i + c.len_utf8();
        }
    }
    if text.len() > start {
        out.push((start, text.len()));
    }
    out
}

/// Largest size mentioned in a segment, converted to millimetres. Ranges
/// take their upper bound.
fn parse_size_mm(segment: &str) -> Option<f64> {
    let re = size_regex();
    let mut best: Option<f64> = None;
    for cap in re.captures_iter(segment) {
        let hi: f64 = cap
            .get(2)
            .or_else(|| cap.get(1))
            .and_then(|m| m.as_str().parse().ok())?;
        let unit = cap.get(3).map(|m| m.as_str()).unwrap_or("mm");
        let mm = match unit {
            "cm" | "CM" | "Cm" | "厘米" => hi * 10.0,
            _ => hi,
        };
        best = Some(best.map_or(mm, |b: f64| b.max(mm)));
    }
    best
}

fn size_regex() -> &'static regex::Regex {
    static RE: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| {
        regex::Regex::new(
            r"(\d+(?:\.\d+)?)(?:\s*[-–~—]\s*(\d+(?:\.\d+)?))?\s*(mm|cm|毫米|厘米)",
        )
        .expect("size regex compiles")
    })
}

const SIDE_PREFIX_WORDS: &[&str] = &[
    "双侧", "两侧", "左侧", "右侧", "同侧", "对侧", "左", "右", "bilateral ", "left ", "right ",
    "ipsilateral ", "contralateral ",
];

/// Extend a site-phrase start backwards over an immediately preceding side
/// or distributive modifier.
fn extend_over_modifier(segment: &str, start: usize) -> usize {
    let head = &segment[..start];
    for word in SIDE_PREFIX_WORDS {
        if let Some(stripped) = head.strip_suffix(word) {
            // One more pass picks up "bilateral " after e.g. "the ".
            let _ = stripped;
            return start - word.len();
        }
    }
    start
}

fn laterality_for_side(side: Side, primary: Side) -> Laterality {
    match (side, primary) {
        (Side::Unknown, _) | (_, Side::Unknown) => Laterality::Unknown,
        (s, p) if s == p => Laterality::Ipsilateral,
        _ => Laterality::Contralateral,
    }
}

/// Reconcile the split-step laterality with what the canonical site implies.
fn anchor(canonical: &str, split_laterality: Laterality, primary: Side) -> Laterality {
    if let Some(side) = sites::site_side(canonical) {
        return laterality_for_side(side, primary);
    }
    match sites::site_attributes(canonical) {
        Some(sites::SiteKind::RegionalNodes {
            family: sites::NodeFamily::Subcarinal,
            ..
        }) => Laterality::Midline,
        Some(sites::SiteKind::Organ { paired: false, .. }) => Laterality::Midline,
        Some(sites::SiteKind::DistantPattern(_)) => Laterality::Midline,
        _ => split_laterality,
    }
}

const MASS_MARKERS: &[&str] = &["肿物", "肿块", "mass", "tumor", "tumour"];

/// Canonical site for an atom: an already-canonical name stays as is,
/// otherwise the lexicon resolves it.
fn canonicalize(lexicon: &Lexicon, atom: &str) -> Option<String> {
    if sites::site_attributes(atom).is_some() {
        return Some(atom.to_string());
    }
    lexicon.canonical_site(atom).map(String::from)
}

/// Locate the primary lesion: the first lung-lobe mass with a size.
fn find_primary(case: &CaseRecord, lexicon: &Lexicon) -> Option<(usize, usize, String)> {
    for (doc_idx, doc) in case.documents.iter().enumerate() {
        let Some(text) = &doc.text else { continue };
        for (seg_start, seg_end) in segments(text) {
            let seg = &text[seg_start..seg_end];
            if lexicon.is_skip_segment(seg) {
                continue;
            }
            let lower = seg.to_lowercase();
            if !MASS_MARKERS.iter().any(|m| lower.contains(m)) || parse_size_mm(seg).is_none() {
                continue;
            }
            for hit in lexicon.site_hits(seg) {
                if matches!(
                    sites::site_attributes(&hit.canonical),
                    Some(sites::SiteKind::LungLobe { .. })
                ) {
                    return Some((doc_idx, seg_start, hit.canonical));
                }
            }
        }
    }
    None
}

/// Deterministic regex/lexicon normalizer. The offline twin of the
/// model-driven path, used for oracle testing and rule-engine runs.
pub fn deterministic_normalize(case: &CaseRecord, lexicon: &Lexicon) -> NormalizedCase {
    let primary = find_primary(case, lexicon);
    let primary_side = primary
        .as_ref()
        .and_then(|(_, _, canon)| sites::site_side(canon))
        .unwrap_or(Side::Unknown);

    let mut findings = Vec::new();
    for (doc_idx, doc) in case.documents.iter().enumerate() {
        let Some(text) = &doc.text else { continue };
        for (seg_start, seg_end) in segments(text) {
            let seg = &text[seg_start..seg_end];
            if lexicon.is_skip_segment(seg) {
                continue;
            }
            let hits = lexicon.site_hits(seg);
            if hits.is_empty() {
                continue;
            }
            let hedge = lexicon.hedge_in(seg);
            let descriptors = lexicon.descriptor_hits(seg);
            let size_mm = parse_size_mm(seg);

            let phrase_start = extend_over_modifier(seg, hits[0].start);
            let phrase_end = hits.last().map(|h| h.end).unwrap_or(seg.len());
            let phrase = &seg[phrase_start..phrase_end];
            let atoms = split_composite_site(phrase, primary_side);
            let single = atoms.len() == 1;

            let is_primary_segment = primary
                .as_ref()
                .is_some_and(|(d, s, _)| *d == doc_idx && *s == seg_start);

            for (k, (atom, split_lat)) in atoms.into_iter().enumerate() {
                let (site, laterality) = match canonicalize(lexicon, &atom) {
                    Some(canonical) => {
                        let lat = anchor(&canonical, split_lat, primary_side);
                        (canonical, lat)
                    }
                    None => (atom, split_lat),
                };
                let mut finding = NormalizedFinding {
                    site,
                    laterality,
                    size_mm: if single { size_mm } else { None },
                    descriptors: descriptors.clone(),
                    certainty: match &hedge {
                        Some(h) => Certainty::Uncertain(h.clone()),
                        None => Certainty::Confirmed,
                    },
                    source_span: SourceSpan {
                        doc: doc_idx,
                        start: seg_start,
                        end: seg_end,
                    },
                };
                if is_primary_segment && k == 0 {
                    finding.descriptors.insert(tags::PRIMARY_LESION.into());
                }
                findings.push(finding);
            }
        }
    }
    NormalizedCase {
        findings,
        primary_side,
    }
}

// ---------------------------------------------------------------------------
// Model-driven path
// ---------------------------------------------------------------------------

/// Render case documents for a prompt, numbering them by index.
pub fn render_documents(case: &CaseRecord, input_mode: InputMode) -> String {
    let mut out = String::new();
    for (i, doc) in case.documents.iter().enumerate() {
        out.push_str(&format!("--- document {i} [{}] ---\n", doc.modality));
        match input_mode {
            InputMode::TextOnly => {
                if let Some(text) = &doc.text {
                    out.push_str(text);
                } else {
                    out.push_str("(images only; not available in text mode)");
                }
            }
            InputMode::ImageDirect => {
                if doc.image_refs.is_empty() {
                    // Image mode still needs something: fall back to text.
                    out.push_str(doc.text.as_deref().unwrap_or("(no content)"));
                } else {
                    out.push_str("(attached as images)");
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Image parts for every document, in order, for `ImageDirect` requests.
pub fn image_parts(case: &CaseRecord) -> Vec<MessagePart> {
    case.documents
        .iter()
        .flat_map(|d| d.image_refs.iter())
        .map(|r| MessagePart::Image {
            image_ref: r.clone(),
        })
        .collect()
}

/// Build the extraction request for a case.
pub fn extraction_request(
    case: &CaseRecord,
    prompts: &PromptLibrary,
    language: Language,
    input_mode: InputMode,
) -> Result<ModelRequest, NormalizeError> {
    if !case.documents.iter().any(|d| d.has_content()) {
        return Err(NormalizeError::EmptyCase);
    }
    let rendered = render_documents(case, input_mode);
    let prompt = prompts.render(
        "extract",
        language,
        &[("case_id", case.id.as_str()), ("documents", rendered.as_str())],
    )?;
    let mut parts = vec![MessagePart::Text { text: prompt }];
    if input_mode == InputMode::ImageDirect {
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
        tag: "extract".into(),
    })
}

fn reply_schema() -> StructSchema {
    StructSchema::new(vec![
        FieldSpec::required("primary_side", FieldKind::String).one_of(&["left", "right", "unknown"]),
        FieldSpec::required("findings", FieldKind::Array),
    ])
}

fn parse_side(s: &str) -> Side {
    match s {
        "left" => Side::Left,
        "right" => Side::Right,
        _ => Side::Unknown,
    }
}

fn parse_laterality(s: &str) -> Laterality {
    match s {
        "ipsilateral" => Laterality::Ipsilateral,
        "contralateral" => Laterality::Contralateral,
        "midline" => Laterality::Midline,
        _ => Laterality::Unknown,
    }
}

fn staging_token(s: &str) -> bool {
    let b = s.as_bytes();
    b.len() >= 2
        && matches!(b[0], b'T' | b't' | b'N' | b'n' | b'M' | b'm')
        && (b[1].is_ascii_digit() || b[1] == b'x' || b[1] == b'X')
}

fn finding_from_value(v: &Value, case: &CaseRecord) -> Result<NormalizedFinding, NormalizeError> {
    let site = v["site"]
        .as_str()
        .ok_or_else(|| NormalizeError::BadReply("finding without site".into()))?
        .trim()
        .to_string();
    if site.is_empty() {
        return Err(NormalizeError::BadReply("empty finding site".into()));
    }
    let status = v["status"].as_str().unwrap_or("confirmed");
    let certainty = match status {
        "uncertain" => {
            let hedge = v["hedge"].as_str().map(str::trim).unwrap_or_default();
            if hedge.is_empty() {
                return Err(NormalizeError::BadReply(format!(
                    "uncertain finding {site:?} without its hedge phrase"
                )));
            }
            Certainty::Uncertain(hedge.to_string())
        }
        _ => Certainty::Confirmed,
    };
    let mut descriptors = std::collections::BTreeSet::new();
    if let Some(arr) = v["descriptors"].as_array() {
        for d in arr {
            if let Some(tag) = d.as_str() {
                if staging_token(tag) {
                    return Err(NormalizeError::BadReply(format!(
                        "premature staging judgment {tag:?} in descriptors"
                    )));
                }
                descriptors.insert(tag.to_string());
            }
        }
    }
    let doc = v["doc"].as_u64().unwrap_or(0) as usize;
    let start = v["start"].as_u64().unwrap_or(0) as usize;
    let end = v["end"].as_u64().unwrap_or(0) as usize;
    let valid_span = case.documents.get(doc).is_some_and(|d| {
        let len = d.text.as_deref().map(str::len).unwrap_or(0);
        start <= end && end <= len
    });
    if !valid_span {
        return Err(NormalizeError::BadReply(format!(
            "source span ({doc}, {start}..{end}) does not resolve inside the cited document"
        )));
    }
    Ok(NormalizedFinding {
        site,
        laterality: parse_laterality(v["laterality"].as_str().unwrap_or("unknown")),
        size_mm: v["size_mm"].as_f64(),
        descriptors,
        certainty,
        source_span: SourceSpan { doc, start, end },
    })
}

/// Model-driven normalization: prompt the backend with the extraction
/// template plus the documents, parse the structured reply, and re-split any
/// compound the model returned.
pub fn normalize_reports(
    case: &CaseRecord,
    backend: &dyn ModelBackend,
    prompts: &PromptLibrary,
    language: Language,
    input_mode: InputMode,
    lexicon: &Lexicon,
) -> Result<NormalizedCase, NormalizeError> {
    let request = extraction_request(case, prompts, language, input_mode)?;
    let response = backend.complete(&request)?;
    let value = parse_structured(&response.text, &reply_schema())?;

    let primary_side = parse_side(value["primary_side"].as_str().unwrap_or("unknown"));
    let mut findings = Vec::new();
    for raw in value["findings"].as_array().into_iter().flatten() {
        let parsed = finding_from_value(raw, case)?;
        // Post-hoc split: compounds the model failed to decouple are expanded
        // here, every atom inheriting the finding's attributes.
        let atoms = split_composite_site(&parsed.site, primary_side);
        for (atom, split_lat) in atoms {
            let (site, laterality) = match canonicalize(lexicon, &atom) {
                Some(canonical) => {
                    let lat = anchor(&canonical, split_lat, primary_side);
                    (canonical, lat)
                }
                None => (
                    atom,
                    if split_lat == Laterality::Unknown {
                        parsed.laterality
                    } else {
                        split_lat
                    },
                ),
            };
            let mut f = parsed.clone();
            f.site = site;
            f.laterality = laterality;
            findings.push(f);
        }
    }
    Ok(NormalizedCase {
        findings,
        primary_side,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{scripted_backend, ScriptRule};
    use crate::case::{CaseDocument, Modality};

    fn case_with_text(lang: Language, text: &str) -> CaseRecord {
        CaseRecord {
            id: "t1".into(),
            language: lang,
            documents: vec![CaseDocument::text_only(Modality::Imaging, text)],
            gold_staging: None,
            gold_treatment: None,
            extra: serde_json::Map::new(),
        }
    }

    #[test]
    fn chinese_primary_mass_with_cm_size() {
        let case = case_with_text(Language::Zh, "右肺上叶见肿物，最大径3.2cm，伴胸膜侵犯。");
        let out = deterministic_normalize(&case, Lexicon::embedded());
        assert_eq!(out.primary_side, Side::Right);
        assert_eq!(out.findings.len(), 1);
        let f = &out.findings[0];
        assert_eq!(f.site, "right-upper-lobe");
        assert_eq!(f.size_mm, Some(32.0));
        assert!(f.has_descriptor("visceral-pleural-invasion"));
        assert!(f.has_descriptor(tags::PRIMARY_LESION));
        assert_eq!(f.certainty, Certainty::Confirmed);
    }

    #[test]
    fn hedged_node_is_uncertain_with_verbatim_phrase() {
        let case = case_with_text(
            Language::Zh,
            "右肺上叶见肿物，最大径25mm。纵隔淋巴结肿大，性质待定。",
        );
        let out = deterministic_normalize(&case, Lexicon::embedded());
        assert_eq!(out.findings.len(), 2);
        let node = &out.findings[1];
        assert_eq!(node.site, "mediastinal-nodes");
        assert_eq!(node.certainty, Certainty::Uncertain("性质待定".into()));
    }

    #[test]
    fn compound_phrase_yields_four_atoms() {
        let case = case_with_text(
            Language::En,
            "Mass in the right upper lobe, maximum diameter 25 mm. Enlarged bilateral hilar and mediastinal lymph nodes, consistent with metastasis.",
        );
        let out = deterministic_normalize(&case, Lexicon::embedded());
        let nodes: Vec<_> = out
            .findings
            .iter()
            .filter(|f| f.site.contains("nodes"))
            .collect();
        assert_eq!(nodes.len(), 4, "{:#?}", out.findings);
        assert_eq!(nodes[0].site, "right-hilar-nodes");
        assert_eq!(nodes[0].laterality, Laterality::Ipsilateral);
        assert_eq!(nodes[1].site, "left-hilar-nodes");
        assert_eq!(nodes[1].laterality, Laterality::Contralateral);
        assert_eq!(nodes[2].site, "right-mediastinal-nodes");
        assert_eq!(nodes[3].site, "left-mediastinal-nodes");
    }

    #[test]
    fn benign_and_negated_segments_are_skipped() {
        let case = case_with_text(
            Language::Zh,
            "右肺上叶见肿物，最大径25mm。肝脏小囊肿。未见远处转移征象。",
        );
        let out = deterministic_normalize(&case, Lexicon::embedded());
        assert_eq!(out.findings.len(), 1);
    }

    #[test]
    fn size_range_takes_upper_bound() {
        assert_eq!(parse_size_mm("病灶3-4cm"), Some(40.0));
        assert_eq!(parse_size_mm("lesion 3–4 cm"), Some(40.0));
        assert_eq!(parse_size_mm("25 mm nodule"), Some(25.0));
        assert_eq!(parse_size_mm("no size here"), None);
    }

    #[test]
    fn model_path_resplits_compounds() {
        let reply = serde_json::json!({
            "primary_side": "right",
            "findings": [
                {"site": "right upper lobe", "laterality": "ipsilateral", "size_mm": 25.0,
                 "descriptors": ["primary-lesion"], "status": "confirmed",
                 "doc": 0, "start": 0, "end": 10},
                {"site": "bilateral hilar and mediastinal nodes", "laterality": "unknown",
                 "status": "uncertain", "hedge": "suspicious", "doc": 0, "start": 0, "end": 10}
            ]
        })
        .to_string();
        let backend = scripted_backend(vec![ScriptRule::new("extract", reply)]);
        let case = case_with_text(Language::En, "Mass in the right upper lobe, 25 mm.");
        let out = normalize_reports(
            &case,
            &backend,
            &PromptLibrary::embedded(),
            Language::En,
            InputMode::TextOnly,
            Lexicon::embedded(),
        )
        .unwrap();
        assert_eq!(out.primary_side, Side::Right);
        assert_eq!(out.findings.len(), 5);
        let uncertain = out
            .findings
            .iter()
            .filter(|f| !f.certainty.is_confirmed())
            .count();
        assert_eq!(uncertain, 4, "hedge preserved across re-split atoms");
    }

    #[test]
    fn model_path_rejects_staging_judgments() {
        let reply = serde_json::json!({
            "primary_side": "right",
            "findings": [
                {"site": "right upper lobe", "status": "confirmed",
                 "descriptors": ["T2a"], "doc": 0, "start": 0, "end": 5}
            ]
        })
        .to_string();
        let backend = scripted_backend(vec![ScriptRule::new("extract", reply)]);
        let case = case_with_text(Language::En, "Mass in the right upper lobe, 25 mm.");
        let err = normalize_reports(
            &case,
            &backend,
            &PromptLibrary::embedded(),
            Language::En,
            InputMode::TextOnly,
            Lexicon::embedded(),
        )
        .unwrap_err();
        assert!(matches!(err, NormalizeError::BadReply(_)));
    }
}
