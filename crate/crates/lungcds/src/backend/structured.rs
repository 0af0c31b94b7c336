//! Structured-output extraction from free-form completions.
//!
//! Models wrap their JSON in prose, code fences, or both. [`parse_structured`]
//! pulls the first structured block out of a completion, applies one bounded
//! repair pass (trailing commas, unquoted keys) to near-valid blocks, and
//! validates the result against a [`StructSchema`].

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    String,
    Number,
    Integer,
    Boolean,
    Array,
    Object,
    Any,
}

#[derive(Debug, Clone)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    pub required: bool,
    /// For string fields, the closed set of allowed values.
    pub allowed: Option<Vec<String>>,
}

impl FieldSpec {
    pub fn required(name: &str, kind: FieldKind) -> Self {
        FieldSpec {
            name: name.to_string(),
            kind,
            required: true,
            allowed: None,
        }
    }

    pub fn optional(name: &str, kind: FieldKind) -> Self {
        FieldSpec {
            name: name.to_string(),
            kind,
            required: false,
            allowed: None,
        }
    }

    pub fn one_of(mut self, values: &[&str]) -> Self {
        self.allowed = Some(values.iter().map(|s| s.to_string()).collect());
        self
    }
}

/// Required fields and value domains for one structured reply.
#[derive(Debug, Clone, Default)]
pub struct StructSchema {
    pub fields: Vec<FieldSpec>,
}

impl StructSchema {
    pub fn new(fields: Vec<FieldSpec>) -> Self {
        StructSchema { fields }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StructuredError {
    #[error("no structured block found in response")]
    NoStructuredBlock,
    #[error("schema violation on field {field:?}: {reason}")]
    SchemaViolation { field: String, reason: String },
}

/// Extract the first structured block from `text`, ignoring surrounding
/// prose, and validate it against `schema`.
///
/// Fenced blocks are preferred; otherwise every brace-balanced candidate is
/// tried left to right and the first that parses (after at most one repair
/// pass) wins. This is a pure function of its inputs.
pub fn parse_structured(text: &str, schema: &StructSchema) -> Result<Value, StructuredError> {
    let value = extract_value(text).ok_or(StructuredError::NoStructuredBlock)?;
    validate(&value, schema)?;
    Ok(value)
}

fn extract_value(text: &str) -> Option<Value> {
    for block in fenced_blocks(text) {
        if let Some(v) = parse_with_repair(block) {
            return Some(v);
        }
    }
    for candidate in brace_candidates(text) {
        if let Some(v) = parse_with_repair(candidate) {
            return Some(v);
        }
    }
    None
}

fn fenced_blocks(text: &str) -> Vec<&str> {
    let mut blocks = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        // Skip the info string ("json", "JSON", ...).
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
        let body = &after[body_start..];
        match body.find("```") {
            Some(close) => {
                blocks.push(body[..close].trim());
                rest = &body[close + 3..];
            }
            None => break,
        }
    }
    blocks
}

/// Brace-balanced candidate substrings, string-aware, leftmost first.
fn brace_candidates(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut candidates = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            if let Some(end) = balanced_end(text, i) {
                candidates.push(&text[i..=end]);
            }
        }
        i += 1;
    }
    candidates
}

fn balanced_end(text: &str, start: usize) -> Option<usize> {
    let bytes = text.as_bytes();
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn parse_with_repair(block: &str) -> Option<Value> {
    if let Ok(v) = serde_json::from_str::<Value>(block) {
        if v.is_object() || v.is_array() {
            return Some(v);
        }
        return None;
    }
    let repaired = repair_json(block);
    match serde_json::from_str::<Value>(&repaired) {
        Ok(v) if v.is_object() || v.is_array() => Some(v),
        _ => None,
    }
}

/// One bounded repair pass: strip trailing commas and quote bare keys.
fn repair_json(block: &str) -> String {
    let mut out = String::with_capacity(block.len() + 16);
    let bytes = block.as_bytes();
    let mut in_string = false;
    let mut escaped = false;
    let mut i = 0;
    while i < bytes.len() {
        let b = bytes[i];
        if in_string {
            out.push(b as char);
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            i += 1;
            continue;
        }
        match b {
            b'"' => {
                in_string = true;
                out.push('"');
                i += 1;
            }
            b',' => {
                // Trailing comma: next non-space byte closes a container.
                let mut j = i + 1;
                while j < bytes.len() && (bytes[j] as char).is_whitespace() {
                    j += 1;
                }
                if j < bytes.len() && (bytes[j] == b'}' || bytes[j] == b']') {
                    i += 1; // drop the comma
                } else {
                    out.push(',');
                    i += 1;
                }
            }
            _ => {
                // Bare key: identifier followed by a colon, directly after
                // '{' or ','.
                let prev_sig = out.trim_end().chars().last();
                let starts_ident =
                    (b as char).is_ascii_alphabetic() || b == b'_' || b == b'$';
                if starts_ident && matches!(prev_sig, Some('{') | Some(',')) {
                    let mut j = i;
                    while j < bytes.len()
                        && ((bytes[j] as char).is_ascii_alphanumeric()
                            || bytes[j] == b'_'
                            || bytes[j] == b'-'
                            || bytes[j] == b'$')
                    {
                        j += 1;
                    }
                    let mut k = j;
                    while k < bytes.len() && (bytes[k] as char).is_whitespace() {
                        k += 1;
                    }
                    if k < bytes.len() && bytes[k] == b':' {
                        out.push('"');
                        out.push_str(&block[i..j]);
                        out.push('"');
                        i = j;
                        continue;
                    }
                }
                out.push(b as char);
                i += 1;
            }
        }
    }
    out
}

fn kind_matches(value: &Value, kind: FieldKind) -> bool {
    match kind {
        FieldKind::String => value.is_string(),
        FieldKind::Number => value.is_number(),
        FieldKind::Integer => value.is_i64() || value.is_u64(),
        FieldKind::Boolean => value.is_boolean(),
        FieldKind::Array => value.is_array(),
        FieldKind::Object => value.is_object(),
        FieldKind::Any => true,
    }
}

fn validate(value: &Value, schema: &StructSchema) -> Result<(), StructuredError> {
    let obj = match value.as_object() {
        Some(o) => o,
        None => {
            if schema.fields.is_empty() {
                return Ok(());
            }
            return Err(StructuredError::SchemaViolation {
                field: String::new(),
                reason: "expected an object".into(),
            });
        }
    };
    for spec in &schema.fields {
        match obj.get(&spec.name) {
            None | Some(Value::Null) => {
                if spec.required {
                    return Err(StructuredError::SchemaViolation {
                        field: spec.name.clone(),
                        reason: "required field missing".into(),
                    });
                }
            }
            Some(v) => {
                if !kind_matches(v, spec.kind) {
                    return Err(StructuredError::SchemaViolation {
                        field: spec.name.clone(),
                        reason: format!("expected {:?}", spec.kind),
                    });
                }
                if let (Some(allowed), Some(s)) = (&spec.allowed, v.as_str()) {
                    if !allowed.iter().any(|a| a == s) {
                        return Err(StructuredError::SchemaViolation {
                            field: spec.name.clone(),
                            reason: format!("value {s:?} not in {allowed:?}"),
                        });
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn schema() -> StructSchema {
        StructSchema::new(vec![
            FieldSpec::required("t_stage", FieldKind::String).one_of(&["T1a", "T2a"]),
            FieldSpec::optional("note", FieldKind::String),
        ])
    }

    #[test]
    fn plain_block_parses() {
        let v = parse_structured(r#"{"t_stage": "T1a"}"#, &schema()).unwrap();
        assert_eq!(v["t_stage"], "T1a");
    }

    #[test]
    fn block_amid_prose_is_extracted() {
        let text = "Sure — here is my staging conclusion.\n\n```json\n{\"t_stage\": \"T2a\"}\n```\nLet me know.";
        let v = parse_structured(text, &schema()).unwrap();
        assert_eq!(v["t_stage"], "T2a");
    }

    #[test]
    fn bare_braces_amid_prose_are_extracted() {
        let text = "Reasoning first {not json} then {\"t_stage\": \"T1a\", \"note\": \"ok\"} done.";
        let v = parse_structured(text, &schema()).unwrap();
        assert_eq!(v["note"], "ok");
    }

    #[test]
    fn missing_required_field_is_schema_violation() {
        let err = parse_structured(r#"{"note": "no stage"}"#, &schema()).unwrap_err();
        assert_eq!(
            err,
            StructuredError::SchemaViolation {
                field: "t_stage".into(),
                reason: "required field missing".into()
            }
        );
    }

    #[test]
    fn no_block_is_reported() {
        let err = parse_structured("just prose, no json at all", &schema()).unwrap_err();
        assert_eq!(err, StructuredError::NoStructuredBlock);
    }

    #[test]
    fn repair_strips_trailing_commas_and_quotes_keys() {
        let text = r#"{t_stage: "T1a", note: "x",}"#;
        let v = parse_structured(text, &schema()).unwrap();
        assert_eq!(v, json!({"t_stage": "T1a", "note": "x"}));
    }

    #[test]
    fn value_domain_enforced() {
        let err = parse_structured(r#"{"t_stage": "T9"}"#, &schema()).unwrap_err();
        assert!(matches!(err, StructuredError::SchemaViolation { field, .. } if field == "t_stage"));
    }
}
