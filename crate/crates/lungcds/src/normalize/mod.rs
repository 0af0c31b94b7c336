//! Evidence normalization: atomic, laterality-anchored findings and their
//! dispatch into decoupled T/N/M evidence pools.
//!
//! Heterogeneous report text (model-extracted or parsed by the deterministic
//! lexicon path) is reduced to [`NormalizedFinding`] values. Composite
//! anatomical phrases are split into independent atoms, hedged language is
//! preserved as an explicit uncertainty flag, and every finding is anchored
//! relative to the primary tumor side before [`dispatch_pools`] routes it to
//! exactly one assessment pool.

mod extract;
mod lexicon;
pub mod sites;
mod split;

pub use extract::{
    deterministic_normalize, extraction_request, image_parts, normalize_reports,
    render_documents, NormalizeError, NormalizedCase,
};
pub use lexicon::{Lexicon, LexiconError};
pub use split::split_composite_site;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use sites::{SiteKind, NODE_FAMILY_HILAR, NODE_FAMILY_MEDIASTINAL, NODE_FAMILY_PERIBRONCHIAL};

/// Body side, used for the primary tumor and for sided anatomical sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
    Unknown,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
            Side::Unknown => Side::Unknown,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Side::Left => write!(f, "left"),
            Side::Right => write!(f, "right"),
            Side::Unknown => write!(f, "unknown"),
        }
    }
}

/// Laterality of a finding relative to the primary tumor side.
///
/// `Ipsilateral` / `Contralateral` are only assigned when the primary side is
/// known; otherwise sided findings stay `Unknown`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Laterality {
    Ipsilateral,
    Contralateral,
    Midline,
    Unknown,
}

impl fmt::Display for Laterality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Laterality::Ipsilateral => write!(f, "ipsilateral"),
            Laterality::Contralateral => write!(f, "contralateral"),
            Laterality::Midline => write!(f, "midline"),
            Laterality::Unknown => write!(f, "unknown"),
        }
    }
}

/// Whether a finding is confirmed or carries hedged language.
///
/// Uncertain findings keep the verbatim hedge phrase from the source text.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "hedge")]
pub enum Certainty {
    Confirmed,
    Uncertain(String),
}

impl Certainty {
    pub fn is_confirmed(&self) -> bool {
        matches!(self, Certainty::Confirmed)
    }
}

/// Location of a finding inside the source case: document index plus the
/// character range of the sentence it was extracted from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
pub struct SourceSpan {
    pub doc: usize,
    pub start: usize,
    pub end: usize,
}

/// One atomic, laterality-anchored clinical finding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedFinding {
    /// Canonical atomic site. Sites that fail lexicon lookup keep their raw
    /// string and end up in the unclassified list at dispatch.
    pub site: String,
    pub laterality: Laterality,
    /// Maximum reported diameter of the lesion, in millimetres.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub descriptors: BTreeSet<String>,
    pub certainty: Certainty,
    #[serde(default)]
    pub source_span: SourceSpan,
}

impl NormalizedFinding {
    pub fn new(site: impl Into<String>, laterality: Laterality) -> Self {
        NormalizedFinding {
            site: site.into(),
            laterality,
            size_mm: None,
            descriptors: BTreeSet::new(),
            certainty: Certainty::Confirmed,
            source_span: SourceSpan::default(),
        }
    }

    pub fn with_size(mut self, size_mm: f64) -> Self {
        self.size_mm = Some(size_mm);
        self
    }

    pub fn with_descriptor(mut self, tag: &str) -> Self {
        self.descriptors.insert(tag.to_string());
        self
    }

    pub fn uncertain(mut self, hedge: &str) -> Self {
        self.certainty = Certainty::Uncertain(hedge.to_string());
        self
    }

    pub fn has_descriptor(&self, tag: &str) -> bool {
        self.descriptors.contains(tag)
    }
}

/// Descriptor tags with structural meaning for dispatch and staging.
pub mod tags {
    pub const PRIMARY_LESION: &str = "primary-lesion";
    pub const MULTIPLE_LESIONS: &str = "multiple-lesions";
    pub const UNASSESSABLE: &str = "unassessable";
    pub const SEPARATE_NODULE_SAME_LOBE: &str = "separate-nodule-same-lobe";
    pub const SEPARATE_NODULE_OTHER_IPSILATERAL_LOBE: &str =
        "separate-nodule-other-ipsilateral-lobe";
    pub const CONTRALATERAL_LUNG_NODULE: &str = "contralateral-lung-nodule";
    /// Tags that organize findings without mapping to a staging rule.
    pub const ORGANIZATIONAL: &[&str] = &[PRIMARY_LESION, MULTIPLE_LESIONS, UNASSESSABLE];
}

/// The decoupled evidence pools produced by [`dispatch_pools`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidencePools {
    pub e_t: Vec<NormalizedFinding>,
    pub e_n: Vec<NormalizedFinding>,
    pub e_m: Vec<NormalizedFinding>,
    pub primary_side: Side,
    /// Findings whose site could not be routed. Kept, never silently dropped.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unclassified: Vec<NormalizedFinding>,
}

impl EvidencePools {
    pub fn total_findings(&self) -> usize {
        self.e_t.len() + self.e_n.len() + self.e_m.len() + self.unclassified.len()
    }

    pub fn uncertain_count(&self) -> usize {
        [&self.e_t, &self.e_n, &self.e_m, &self.unclassified]
            .iter()
            .flat_map(|p| p.iter())
            .filter(|f| !f.certainty.is_confirmed())
            .count()
    }
}

/// Regional nodal station key for a finding, or `None` when the finding is
/// not a regional station (and therefore belongs to the distant pool).
///
/// The regional vocabulary is the closed station list used for N staging:
/// ipsilateral peribronchial / hilar / mediastinal, subcarinal, contralateral
/// mediastinal / hilar, supraclavicular, plus side-unspecified variants of
/// the sided stations. Contralateral peribronchial nodes fall outside the
/// list and route to the distant pool as non-regional nodes.
pub fn station_key(finding: &NormalizedFinding) -> Option<String> {
    let attrs = sites::site_attributes(&finding.site)?;
    let SiteKind::RegionalNodes { family, .. } = attrs else {
        return None;
    };
    match family {
        sites::NodeFamily::Subcarinal => Some("subcarinal".into()),
        sites::NodeFamily::Supraclavicular => Some("supraclavicular".into()),
        sites::NodeFamily::Peribronchial
        | sites::NodeFamily::Hilar
        | sites::NodeFamily::Mediastinal => {
            let fam = match family {
                sites::NodeFamily::Peribronchial => NODE_FAMILY_PERIBRONCHIAL,
                sites::NodeFamily::Hilar => NODE_FAMILY_HILAR,
                _ => NODE_FAMILY_MEDIASTINAL,
            };
            match finding.laterality {
                Laterality::Ipsilateral => Some(format!("ipsilateral-{fam}")),
                Laterality::Contralateral if fam == NODE_FAMILY_PERIBRONCHIAL => None,
                Laterality::Contralateral => Some(format!("contralateral-{fam}")),
                Laterality::Midline | Laterality::Unknown => Some(format!("{fam}-unspecified")),
            }
        }
    }
}

/// Distant-pattern key for an `e_m` finding, used by the M stager.
pub fn m_pattern_key(finding: &NormalizedFinding) -> Option<String> {
    if finding.has_descriptor(tags::CONTRALATERAL_LUNG_NODULE) {
        return Some(tags::CONTRALATERAL_LUNG_NODULE.into());
    }
    match sites::site_attributes(&finding.site)? {
        SiteKind::DistantPattern(p) => Some(p.to_string()),
        SiteKind::Organ { name, .. } => Some(name.to_string()),
        SiteKind::NonRegionalNodes => Some("non-regional-node".into()),
        SiteKind::RegionalNodes { .. } => Some("non-regional-node".into()),
        _ => None,
    }
}

/// Route normalized findings into the T / N / M assessment pools.
///
/// Primary-lesion, local-invasion and intrapulmonary findings go to `e_t`;
/// regional nodal stations to `e_n`; distant patterns (contralateral lung,
/// pleural/pericardial dissemination, extrathoracic organs, non-regional
/// nodes) to `e_m`. Certainty flags pass through untouched. Separate lung
/// nodules are classified against the primary lobe and gain the matching
/// relational descriptor when the extraction did not already set one.
pub fn dispatch_pools(findings: &[NormalizedFinding], primary_side: Side) -> EvidencePools {
    let primary = findings.iter().find_map(|f| {
        if !f.has_descriptor(tags::PRIMARY_LESION) {
            return None;
        }
        match sites::site_attributes(&f.site) {
            Some(SiteKind::LungLobe { side, lobe }) => Some((side, lobe)),
            _ => None,
        }
    });
    // Fall back to the first lung-lobe finding with a size.
    let primary = primary.or_else(|| {
        findings.iter().find_map(|f| match sites::site_attributes(&f.site) {
            Some(SiteKind::LungLobe { side, lobe }) if f.size_mm.is_some() => Some((side, lobe)),
            _ => None,
        })
    });

    let mut pools = EvidencePools {
        e_t: Vec::new(),
        e_n: Vec::new(),
        e_m: Vec::new(),
        primary_side,
        unclassified: Vec::new(),
    };

    for f in findings {
        let mut f = f.clone();
        match sites::site_attributes(&f.site) {
            Some(SiteKind::LungLobe { side, lobe }) => {
                if f.has_descriptor(tags::PRIMARY_LESION) {
                    pools.e_t.push(f);
                    continue;
                }
                if f.has_descriptor(tags::CONTRALATERAL_LUNG_NODULE) {
                    pools.e_m.push(f);
                    continue;
                }
                if f.has_descriptor(tags::SEPARATE_NODULE_SAME_LOBE)
                    || f.has_descriptor(tags::SEPARATE_NODULE_OTHER_IPSILATERAL_LOBE)
                {
                    pools.e_t.push(f);
                    continue;
                }
                match primary {
                    Some((p_side, p_lobe)) => {
                        if side == p_side && lobe == p_lobe {
                            f.descriptors.insert(tags::SEPARATE_NODULE_SAME_LOBE.into());
                            pools.e_t.push(f);
                        } else if side == p_side {
                            f.descriptors
                                .insert(tags::SEPARATE_NODULE_OTHER_IPSILATERAL_LOBE.into());
                            pools.e_t.push(f);
                        } else {
                            f.descriptors.insert(tags::CONTRALATERAL_LUNG_NODULE.into());
                            pools.e_m.push(f);
                        }
                    }
                    // No primary located: treat the lone lung finding itself
                    // as primary-pool evidence.
                    None => pools.e_t.push(f),
                }
            }
            Some(SiteKind::RegionalNodes { .. }) => {
                if station_key(&f).is_some() {
                    pools.e_n.push(f);
                } else {
                    pools.e_m.push(f);
                }
            }
            Some(SiteKind::NonRegionalNodes)
            | Some(SiteKind::DistantPattern(_))
            | Some(SiteKind::Organ { .. }) => pools.e_m.push(f),
            Some(SiteKind::Structure(tag)) => {
                f.descriptors.insert(tag.to_string());
                pools.e_t.push(f);
            }
            None => pools.unclassified.push(f),
        }
    }
    pools
}
