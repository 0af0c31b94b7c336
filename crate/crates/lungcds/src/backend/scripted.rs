//! Scripted replay backend for tests and offline runs.
//!
//! The script is an ordered rule list. A request is answered by the first
//! rule whose tag and content pattern match; non-sticky rules are consumed by
//! the match, so two sequential rules for the same tag replay in order.
//! Unmatched requests fail with `ScriptExhausted`. Every request is recorded
//! in a transcript, with appends serialized internally.

use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{
    BackendError, CallOutcome, ModelBackend, ModelRequest, ModelResponse, TranscriptEntry, Usage,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    /// Stage tag to match; `"*"` matches any tag.
    pub tag: String,
    /// Substring that must occur in the rendered request text; `None` matches
    /// any content.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    pub response: String,
    /// Sticky rules survive matches instead of being consumed.
    #[serde(default)]
    pub sticky: bool,
}

impl ScriptRule {
    pub fn new(tag: impl Into<String>, response: impl Into<String>) -> Self {
        ScriptRule {
            tag: tag.into(),
            contains: None,
            response: response.into(),
            sticky: false,
        }
    }

    pub fn containing(mut self, needle: impl Into<String>) -> Self {
        self.contains = Some(needle.into());
        self
    }

    pub fn sticky(mut self) -> Self {
        self.sticky = true;
        self
    }
}

struct RuleState {
    rule: ScriptRule,
    used: bool,
}

pub struct ScriptedBackend {
    rules: Mutex<Vec<RuleState>>,
    transcript: Mutex<Vec<TranscriptEntry>>,
}

/// Build a scripted backend from an ordered rule list.
pub fn scripted_backend(rules: Vec<ScriptRule>) -> ScriptedBackend {
    ScriptedBackend {
        rules: Mutex::new(rules.into_iter().map(|rule| RuleState { rule, used: false }).collect()),
        transcript: Mutex::new(Vec::new()),
    }
}

impl ScriptedBackend {
    /// Load a script from a JSON file (an array of rules).
    pub fn from_file(path: impl AsRef<Path>) -> Result<ScriptedBackend, BackendError> {
        let raw = std::fs::read_to_string(path.as_ref())
            .map_err(|e| BackendError::Transport(format!("reading script: {e}")))?;
        let rules: Vec<ScriptRule> = serde_json::from_str(&raw)
            .map_err(|e| BackendError::BadResponse(format!("parsing script: {e}")))?;
        Ok(scripted_backend(rules))
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.transcript.lock().expect("transcript lock").clone()
    }

    /// Dump the transcript as one JSON object per line.
    pub fn dump_transcript(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let entries = self.transcript();
        let mut out = String::new();
        for e in &entries {
            out.push_str(&serde_json::to_string(e).expect("transcript entry serializes"));
            out.push('\n');
        }
        std::fs::write(path, out)
    }

    /// Number of script rules not yet consumed.
    pub fn remaining_rules(&self) -> usize {
        self.rules
            .lock()
            .expect("rules lock")
            .iter()
            .filter(|r| !r.used || r.rule.sticky)
            .count()
    }
}

impl ModelBackend for ScriptedBackend {
    fn call(&self, request: &ModelRequest) -> Result<CallOutcome, BackendError> {
        request.validate()?;
        let text = request.rendered_text();
        let mut rules = self.rules.lock().expect("rules lock");
        let hit = rules.iter_mut().find(|state| {
            (!state.used || state.rule.sticky)
                && (state.rule.tag == "*" || state.rule.tag == request.tag)
                && state
                    .rule
                    .contains
                    .as_deref()
                    .is_none_or(|needle| text.contains(needle))
        });
        let result = match hit {
            Some(state) => {
                state.used = true;
                Ok(state.rule.response.clone())
            }
            None => Err(BackendError::ScriptExhausted {
                tag: request.tag.clone(),
            }),
        };
        drop(rules);

        self.transcript.lock().expect("transcript lock").push(TranscriptEntry {
            tag: request.tag.clone(),
            request_text: text.clone(),
            response_text: result.as_ref().ok().cloned(),
            retries: 0,
        });

        result.map(|response| CallOutcome {
            response: ModelResponse {
                usage: Usage {
                    prompt_tokens: (text.chars().count() / 4) as u64,
                    output_tokens: (response.chars().count() / 4) as u64,
                },
                latency_ms: 0,
                text: response,
            },
            retries: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn answers_by_tag() {
        let backend = scripted_backend(vec![ScriptRule::new("n-stage", "the N reply")]);
        let reply = backend
            .complete(&ModelRequest::simple("n-stage", "stage these nodes"))
            .unwrap();
        assert_eq!(reply.text, "the N reply");
    }

    #[test]
    fn unmatched_tag_exhausts() {
        let backend = scripted_backend(vec![ScriptRule::new("n-stage", "x")]);
        let err = backend
            .complete(&ModelRequest::simple("m-stage", "stage these lesions"))
            .unwrap_err();
        assert!(matches!(err, BackendError::ScriptExhausted { tag } if tag == "m-stage"));
    }

    #[test]
    fn sequential_rules_for_one_tag_replay_in_order() {
        let backend = scripted_backend(vec![
            ScriptRule::new("t-stage", "first"),
            ScriptRule::new("t-stage", "second"),
        ]);
        let req = ModelRequest::simple("t-stage", "go");
        assert_eq!(backend.complete(&req).unwrap().text, "first");
        assert_eq!(backend.complete(&req).unwrap().text, "second");
        assert!(backend.complete(&req).is_err());
    }

    #[test]
    fn content_pattern_selects_rule() {
        let backend = scripted_backend(vec![
            ScriptRule::new("extract", "for case a").containing("case-a"),
            ScriptRule::new("extract", "for case b").containing("case-b"),
        ]);
        let reply = backend
            .complete(&ModelRequest::simple("extract", "documents of case-b here"))
            .unwrap();
        assert_eq!(reply.text, "for case b");
    }

    #[test]
    fn transcript_replays_identically() {
        let run = || {
            let backend = scripted_backend(vec![
                ScriptRule::new("a", "ra").sticky(),
                ScriptRule::new("b", "rb"),
            ]);
            let _ = backend.complete(&ModelRequest::simple("a", "one"));
            let _ = backend.complete(&ModelRequest::simple("b", "two"));
            let _ = backend.complete(&ModelRequest::simple("a", "three"));
            backend.transcript()
        };
        assert_eq!(run(), run());
    }
}
