//! Bilingual synonym/lexicon tables for the deterministic normalizer.
//!
//! Four editable TSV files back the lexicon: `sites.tsv` (raw term, canonical
//! site, language), `descriptors.tsv` (raw term, descriptor tag, language),
//! `hedges.tsv` (hedge phrase, language) and `benign.tsv` (segment-skip
//! markers: benign lesions, negations, and non-lesion contexts such as biopsy
//! or resection mentions). A copy of each ships embedded so the lexicon works
//! with no files on disk.

use std::path::Path;

use thiserror::Error;

use super::sites;

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("lexicon file {file} line {line}: expected {expected} tab-separated columns")]
    BadColumns {
        file: String,
        line: usize,
        expected: usize,
    },
    #[error("lexicon file {file} line {line}: unknown canonical site {site:?}")]
    UnknownCanonicalSite {
        file: String,
        line: usize,
        site: String,
    },
    #[error("io error reading {file}: {source}")]
    Io {
        file: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
struct Entry {
    raw: String,
    target: String,
}

#[derive(Debug, Clone)]
pub struct Lexicon {
    /// Sorted by raw length descending so longest-match wins.
    sites: Vec<Entry>,
    descriptors: Vec<Entry>,
    hedges: Vec<String>,
    skip_markers: Vec<String>,
}

/// One site mention located in a text segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiteHit {
    pub canonical: String,
    pub start: usize,
    pub end: usize,
}

fn ascii_lower(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii() { c.to_ascii_lowercase() } else { c })
        .collect()
}

fn parse_two_column(
    file: &str,
    content: &str,
    validate_site: bool,
) -> Result<Vec<Entry>, LexiconError> {
    let mut entries = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(LexiconError::BadColumns {
                file: file.to_string(),
                line: i + 1,
                expected: 3,
            });
        }
        if validate_site && sites::site_attributes(cols[1]).is_none() {
            return Err(LexiconError::UnknownCanonicalSite {
                file: file.to_string(),
                line: i + 1,
                site: cols[1].to_string(),
            });
        }
        entries.push(Entry {
            raw: ascii_lower(cols[0]),
            target: cols[1].to_string(),
        });
    }
    entries.sort_by_key(|e| std::cmp::Reverse(e.raw.len()));
    Ok(entries)
}

fn parse_phrase_list(file: &str, content: &str) -> Result<Vec<String>, LexiconError> {
    let mut phrases = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.is_empty() || cols.len() > 2 {
            return Err(LexiconError::BadColumns {
                file: file.to_string(),
                line: i + 1,
                expected: 2,
            });
        }
        phrases.push(ascii_lower(cols[0]));
    }
    phrases.sort_by_key(|p| std::cmp::Reverse(p.len()));
    Ok(phrases)
}

impl Lexicon {
    pub fn from_parts(
        sites_tsv: &str,
        descriptors_tsv: &str,
        hedges_tsv: &str,
        benign_tsv: &str,
    ) -> Result<Lexicon, LexiconError> {
        Ok(Lexicon {
            sites: parse_two_column("sites.tsv", sites_tsv, true)?,
            descriptors: parse_two_column("descriptors.tsv", descriptors_tsv, false)?,
            hedges: parse_phrase_list("hedges.tsv", hedges_tsv)?,
            skip_markers: parse_phrase_list("benign.tsv", benign_tsv)?,
        })
    }

    /// Load the four lexicon files from a directory.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Lexicon, LexiconError> {
        let dir = dir.as_ref();
        let read = |name: &str| -> Result<String, LexiconError> {
            std::fs::read_to_string(dir.join(name)).map_err(|source| LexiconError::Io {
                file: dir.join(name).display().to_string(),
                source,
            })
        };
        Lexicon::from_parts(
            &read("sites.tsv")?,
            &read("descriptors.tsv")?,
            &read("hedges.tsv")?,
            &read("benign.tsv")?,
        )
    }

    /// The lexicon shipped with the crate.
    pub fn embedded() -> &'static Lexicon {
        static EMBEDDED: std::sync::OnceLock<Lexicon> = std::sync::OnceLock::new();
        EMBEDDED.get_or_init(|| {
            Lexicon::from_parts(
                include_str!("../../data/lexicon/sites.tsv"),
                include_str!("../../data/lexicon/descriptors.tsv"),
                include_str!("../../data/lexicon/hedges.tsv"),
                include_str!("../../data/lexicon/benign.tsv"),
            )
            .expect("embedded lexicon is well-formed")
        })
    }

    /// Canonical site for an atomic site string: the longest raw term the
    /// lexicon knows that occurs inside it. `None` leaves the site unmatched.
    pub fn canonical_site(&self, atom: &str) -> Option<&str> {
        let lower = ascii_lower(atom);
        self.sites
            .iter()
            .find(|e| lower.contains(&e.raw))
            .map(|e| e.target.as_str())
    }

    /// All non-overlapping site mentions in a segment, leftmost-longest.
    pub fn site_hits(&self, segment: &str) -> Vec<SiteHit> {
        let lower = ascii_lower(segment);
        let mut candidates: Vec<SiteHit> = Vec::new();
        for entry in &self.sites {
            let mut from = 0;
            while let Some(pos) = lower[from..].find(&entry.raw) {
                let start = from + pos;
                candidates.push(SiteHit {
                    canonical: entry.target.clone(),
                    start,
                    end: start + entry.raw.len(),
                });
                from = start + entry.raw.len();
            }
        }
        candidates.sort_by(|a, b| {
            a.start
                .cmp(&b.start)
                .then((b.end - b.start).cmp(&(a.end - a.start)))
        });
        let mut hits: Vec<SiteHit> = Vec::new();
        for c in candidates {
            if hits.last().is_none_or(|h| c.start >= h.end) {
                hits.push(c);
            }
        }
        hits
    }

    /// Descriptor tags mentioned in a segment.
    pub fn descriptor_hits(&self, segment: &str) -> std::collections::BTreeSet<String> {
        let lower = ascii_lower(segment);
        self.descriptors
            .iter()
            .filter(|e| lower.contains(&e.raw))
            .map(|e| e.target.clone())
            .collect()
    }

    /// The longest hedge phrase in the segment, verbatim as matched.
    pub fn hedge_in(&self, segment: &str) -> Option<String> {
        let lower = ascii_lower(segment);
        self.hedges
            .iter()
            .find(|h| lower.contains(h.as_str()))
            .map(|h| {
                let pos = lower.find(h.as_str()).unwrap();
                segment[pos..pos + h.len()].to_string()
            })
    }

    /// True when the segment describes benign/negated/non-lesion content and
    /// must not yield findings.
    pub fn is_skip_segment(&self, segment: &str) -> bool {
        let lower = ascii_lower(segment);
        self.skip_markers.iter().any(|m| lower.contains(m.as_str()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedded_lexicon_loads() {
        let lex = Lexicon::embedded();
        assert!(lex.sites.len() > 30);
        assert!(!lex.hedges.is_empty());
    }

    #[test]
    fn longest_site_match_wins() {
        let lex = Lexicon::embedded();
        assert_eq!(
            lex.canonical_site("右肺门淋巴结"),
            Some("right-hilar-nodes")
        );
        assert_eq!(
            lex.canonical_site("right hilar lymph nodes"),
            Some("right-hilar-nodes")
        );
        // Bare family term still resolves, to the unsided canonical.
        assert_eq!(lex.canonical_site("hilar"), Some("hilar-nodes"));
    }

    #[test]
    fn compound_segment_yields_multiple_hits() {
        let lex = Lexicon::embedded();
        let hits = lex.site_hits("双侧肺门及纵隔淋巴结肿大");
        assert_eq!(hits.len(), 2, "{hits:?}");
        assert_eq!(hits[0].canonical, "hilar-nodes");
        assert_eq!(hits[1].canonical, "mediastinal-nodes");
    }

    #[test]
    fn hedge_is_verbatim() {
        let lex = Lexicon::embedded();
        assert_eq!(
            lex.hedge_in("纵隔淋巴结肿大，性质待定"),
            Some("性质待定".to_string())
        );
        assert_eq!(
            lex.hedge_in("Enlarged node, nature To Be Determined"),
            Some("nature To Be Determined".to_string())
        );
    }

    #[test]
    fn skip_markers_catch_benign_and_negation() {
        let lex = Lexicon::embedded();
        assert!(lex.is_skip_segment("肝脏小囊肿"));
        assert!(lex.is_skip_segment("未见远处转移征象"));
        assert!(lex.is_skip_segment("(右肺上叶活检) 腺癌"));
        assert!(!lex.is_skip_segment("肝脏见单发病灶，考虑转移"));
    }
}
