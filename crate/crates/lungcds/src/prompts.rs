//! Prompt template library.
//!
//! Templates are plain text files keyed by stage name and language
//! (`<name>.<lang>.txt`), with `{placeholder}` substitution. A full set ships
//! embedded; a directory can override any subset.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::case::Language;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("no template named {name:?} for language {lang}")]
    Missing { name: String, lang: Language },
    #[error("placeholder {placeholder:?} in template {name:?} was not supplied")]
    UnfilledPlaceholder { name: String, placeholder: String },
    #[error("io error reading prompts: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct PromptLibrary {
    templates: BTreeMap<(String, Language), String>,
}

macro_rules! embedded_templates {
    ($($name:literal),+ $(,)?) => {
        &[
            $(
                ($name, Language::En, include_str!(concat!("../data/prompts/", $name, ".en.txt"))),
                ($name, Language::Zh, include_str!(concat!("../data/prompts/", $name, ".zh.txt"))),
            )+
        ]
    };
}

static EMBEDDED: &[(&str, Language, &str)] = embedded_templates![
    "extract",
    "t_stage",
    "n_stage",
    "m_stage",
    "profile",
    "expert_postop_early_stage",
    "expert_neoadjuvant_resectable",
    "expert_adv_driver_neg_first_line",
    "expert_adv_driver_pos_first_line",
    "expert_adv_driver_neg_later_line",
    "expert_adv_driver_pos_later_line",
    "expert_oligometastatic",
    "expert_mdt_referral",
    "judge_rq",
    "judge_precision",
    "judge_similarity",
    "direct_staging",
    "direct_treatment",
    "direct_e2e",
];

impl PromptLibrary {
    /// The template set shipped with the crate.
    pub fn embedded() -> PromptLibrary {
        let templates = EMBEDDED
            .iter()
            .map(|(name, lang, text)| ((name.to_string(), *lang), text.to_string()))
            .collect();
        PromptLibrary { templates }
    }

    /// Embedded templates overridden by any `<name>.<lang>.txt` files found
    /// in `dir`.
    pub fn with_overrides(dir: impl AsRef<Path>) -> Result<PromptLibrary, PromptError> {
        let mut lib = PromptLibrary::embedded();
        for entry in std::fs::read_dir(dir.as_ref())? {
            let entry = entry?;
            let file_name = entry.file_name();
            let file_name = file_name.to_string_lossy();
            let Some(stem) = file_name.strip_suffix(".txt") else {
                continue;
            };
            let lang = if let Some(s) = stem.strip_suffix(".en") {
                Some((s.to_string(), Language::En))
            } else {
                stem.strip_suffix(".zh").map(|s| (s.to_string(), Language::Zh))
            };
            if let Some(key) = lang {
                lib.templates.insert(key, std::fs::read_to_string(entry.path())?);
            }
        }
        Ok(lib)
    }

    pub fn get(&self, name: &str, lang: Language) -> Result<&str, PromptError> {
        self.templates
            .get(&(name.to_string(), lang))
            .map(|s| s.as_str())
            .ok_or_else(|| PromptError::Missing {
                name: name.to_string(),
                lang,
            })
    }

    /// Render a template, substituting every `{key}` placeholder.
    pub fn render(
        &self,
        name: &str,
        lang: Language,
        vars: &[(&str, &str)],
    ) -> Result<String, PromptError> {
        let mut text = self.get(name, lang)?.to_string();
        for (key, value) in vars {
            text = text.replace(&format!("{{{key}}}"), value);
        }
        if let Some(open) = find_unfilled(&text) {
            return Err(PromptError::UnfilledPlaceholder {
                name: name.to_string(),
                placeholder: open,
            });
        }
        Ok(text)
    }
}

/// Detect a leftover `{identifier}` placeholder (JSON braces in examples use
/// quotes or whitespace inside, so a bare identifier between braces is safe
/// to treat as unfilled).
fn find_unfilled(text: &str) -> Option<String> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut j = i + 1;
            while j < bytes.len()
                && (bytes[j].is_ascii_alphanumeric() || bytes[j] == b'_')
            {
                j += 1;
            }
            if j > i + 1 && j < bytes.len() && bytes[j] == b'}' {
                return Some(text[i + 1..j].to_string());
            }
        }
        i += 1;
    }
    None
}
