//! The staging rule file: size thresholds, descriptor minimums, station and
//! pattern maps.
//!
//! Thresholds and mappings live in versioned data, not code, so a guideline
//! edition swap is a file swap. Loading validates the file against the
//! normalization vocabulary: every descriptor tag, station key and distant
//! pattern the normalizer can produce must have exactly one mapping entry.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::normalize::sites;

use super::{NCategory, TCategory};

#[derive(Debug, Error)]
pub enum RuleFileError {
    #[error("cannot read rule file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse rule file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("size thresholds are not strictly increasing at {category}")]
    NonIncreasingSizes { category: TCategory },
    #[error("size intervals must start at 0 and chain without gaps (offender: {category})")]
    BrokenSizeChain { category: TCategory },
    #[error("rule file gap: no mapping for {kind} {key:?}")]
    MissingMapping { kind: &'static str, key: String },
    #[error("unknown category {value:?} in {section}")]
    BadCategory { section: &'static str, value: String },
}

/// One half-open size interval `(above_mm, up_to_mm]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeInterval {
    pub category: TCategory,
    pub above_mm: f64,
    /// Absent means unbounded above.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub up_to_mm: Option<f64>,
}

/// Class of a distant pattern for the M stager.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MPatternClass {
    /// Intrathoracic dissemination: at least M1a on its own.
    M1a,
    /// Extrathoracic lesion: counted, one lesion M1b, several M1c.
    Extrathoracic,
}

#[derive(Debug, Clone, Deserialize)]
struct RuleFileRaw {
    version: String,
    t_size_mm: Vec<SizeInterval>,
    t_descriptors: BTreeMap<String, String>,
    n_stations: BTreeMap<String, String>,
    m_patterns: BTreeMap<String, MPatternClass>,
}

/// Parsed and validated staging rules.
#[derive(Debug, Clone, PartialEq)]
pub struct StagingRuleFile {
    pub version: String,
    size_intervals: Vec<SizeInterval>,
    t_descriptors: BTreeMap<String, TCategory>,
    n_stations: BTreeMap<String, NCategory>,
    m_patterns: BTreeMap<String, MPatternClass>,
}

impl StagingRuleFile {
    pub fn parse(raw: &str) -> Result<StagingRuleFile, RuleFileError> {
        let raw: RuleFileRaw = toml::from_str(raw)?;

        let mut t_descriptors = BTreeMap::new();
        for (key, value) in raw.t_descriptors {
            let cat = value.parse().map_err(|_| RuleFileError::BadCategory {
                section: "t_descriptors",
                value: value.clone(),
            })?;
            t_descriptors.insert(key, cat);
        }
        let mut n_stations = BTreeMap::new();
        for (key, value) in raw.n_stations {
            let cat = value.parse().map_err(|_| RuleFileError::BadCategory {
                section: "n_stations",
                value: value.clone(),
            })?;
            n_stations.insert(key, cat);
        }

        let file = StagingRuleFile {
            version: raw.version,
            size_intervals: raw.t_size_mm,
            t_descriptors,
            n_stations,
            m_patterns: raw.m_patterns,
        };
        file.validate()?;
        Ok(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<StagingRuleFile, RuleFileError> {
        let raw = std::fs::read_to_string(path.as_ref()).map_err(|source| RuleFileError::Io {
            path: path.as_ref().display().to_string(),
            source,
        })?;
        StagingRuleFile::parse(&raw)
    }

    /// The rule file shipped with the crate.
    pub fn embedded() -> &'static StagingRuleFile {
        static EMBEDDED: std::sync::OnceLock<StagingRuleFile> = std::sync::OnceLock::new();
        EMBEDDED.get_or_init(|| {
            StagingRuleFile::parse(include_str!("../../data/rules/staging_rules.toml"))
                .expect("embedded staging rules are valid")
        })
    }

    fn validate(&self) -> Result<(), RuleFileError> {
        // Size intervals: sorted by category, strictly increasing, gapless
        // chain from zero.
        let mut prev_hi = 0.0f64;
        let mut first = true;
        for (i, iv) in self.size_intervals.iter().enumerate() {
            if i > 0 && self.size_intervals[i - 1].category >= iv.category {
                return Err(RuleFileError::NonIncreasingSizes { category: iv.category });
            }
            if first {
                if iv.above_mm != 0.0 {
                    return Err(RuleFileError::BrokenSizeChain { category: iv.category });
                }
                first = false;
            } else if (iv.above_mm - prev_hi).abs() > f64::EPSILON {
                return Err(RuleFileError::BrokenSizeChain { category: iv.category });
            }
            match iv.up_to_mm {
                Some(hi) => {
                    if hi <= iv.above_mm {
                        return Err(RuleFileError::NonIncreasingSizes { category: iv.category });
                    }
                    prev_hi = hi;
                }
                None => {
                    if i + 1 != self.size_intervals.len() {
                        return Err(RuleFileError::BrokenSizeChain { category: iv.category });
                    }
                }
            }
        }

        // Vocabulary coverage: loud failure on any gap.
        for tag in sites::t_descriptor_vocabulary() {
            if !self.t_descriptors.contains_key(tag) {
                return Err(RuleFileError::MissingMapping {
                    kind: "descriptor",
                    key: tag.to_string(),
                });
            }
        }
        for station in sites::station_vocabulary() {
            if !self.n_stations.contains_key(station) {
                return Err(RuleFileError::MissingMapping {
                    kind: "station",
                    key: station.to_string(),
                });
            }
        }
        for pattern in sites::m_pattern_vocabulary() {
            if !self.m_patterns.contains_key(pattern) {
                return Err(RuleFileError::MissingMapping {
                    kind: "pattern",
                    key: pattern.to_string(),
                });
            }
        }
        Ok(())
    }

    /// T category for a confirmed maximum diameter.
    pub fn size_category(&self, size_mm: f64) -> Option<TCategory> {
        self.size_intervals
            .iter()
            .find(|iv| size_mm > iv.above_mm && iv.up_to_mm.is_none_or(|hi| size_mm <= hi))
            .map(|iv| iv.category)
    }

    pub fn descriptor_minimum(&self, tag: &str) -> Option<TCategory> {
        self.t_descriptors.get(tag).copied()
    }

    pub fn station_category(&self, station: &str) -> Option<NCategory> {
        self.n_stations.get(station).copied()
    }

    pub fn pattern_class(&self, pattern: &str) -> Option<MPatternClass> {
        self.m_patterns.get(pattern).copied()
    }

    pub fn size_intervals(&self) -> &[SizeInterval] {
        &self.size_intervals
    }

    /// Human-readable excerpt of the rules for one dimension, injected into
    /// the model-driven staging prompts.
    pub fn render_for_dimension(&self, dimension: super::Dimension) -> String {
        let mut out = String::new();
        match dimension {
            super::Dimension::T => {
                out.push_str("size of the largest confirmed lesion (mm):\n");
                for iv in &self.size_intervals {
                    match iv.up_to_mm {
                        Some(hi) => out.push_str(&format!(
                            "  {} < size <= {} -> {}\n",
                            iv.above_mm, hi, iv.category
                        )),
                        None => out.push_str(&format!("  size > {} -> {}\n", iv.above_mm, iv.category)),
                    }
                }
                out.push_str("descriptor minimums (take the max with the size category):\n");
                for (tag, cat) in &self.t_descriptors {
                    out.push_str(&format!("  {tag} -> at least {cat}\n"));
                }
            }
            super::Dimension::N => {
                out.push_str("station map (take the max over confirmed stations):\n");
                for (station, cat) in &self.n_stations {
                    out.push_str(&format!("  {station} -> {cat}\n"));
                }
            }
            super::Dimension::M => {
                out.push_str("pattern map:\n");
                for (pattern, class) in &self.m_patterns {
                    let text = match class {
                        MPatternClass::M1a => "intrathoracic dissemination -> at least M1a",
                        MPatternClass::Extrathoracic => {
                            "extrathoracic lesion -> counted (one: M1b, several: M1c)"
                        }
                    };
                    out.push_str(&format!("  {pattern}: {text}\n"));
                }
            }
        }
        out
    }
}
