//! Static attributes of canonical anatomical sites.
//!
//! The lexicon maps raw report terms to canonical site strings; this table
//! maps canonical strings to the structural facts dispatch and staging need:
//! lung lobe identity, regional node family and side, distant pattern class,
//! and organ pairedness.

use super::Side;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lobe {
    Upper,
    Middle,
    Lower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeFamily {
    Peribronchial,
    Hilar,
    Mediastinal,
    Subcarinal,
    Supraclavicular,
}

pub const NODE_FAMILY_PERIBRONCHIAL: &str = "peribronchial";
pub const NODE_FAMILY_HILAR: &str = "hilar";
pub const NODE_FAMILY_MEDIASTINAL: &str = "mediastinal";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteKind {
    LungLobe { side: Side, lobe: Lobe },
    RegionalNodes { family: NodeFamily, side: Option<Side> },
    NonRegionalNodes,
    /// Distant dissemination patterns that are M1a by themselves.
    DistantPattern(&'static str),
    Organ { name: &'static str, paired: bool },
    /// Locally invaded structure; routed to the T pool as a descriptor.
    Structure(&'static str),
}

pub const PLEURAL_DISSEMINATION: &str = "pleural-dissemination";
pub const PERICARDIAL_DISSEMINATION: &str = "pericardial-dissemination";

use Lobe::*;
use NodeFamily::*;
use SiteKind::*;

#[rustfmt::skip]
static SITE_TABLE: &[(&str, SiteKind)] = &[
    ("left-upper-lobe",  LungLobe { side: Side::Left,  lobe: Upper }),
    ("left-lower-lobe",  LungLobe { side: Side::Left,  lobe: Lower }),
    ("right-upper-lobe", LungLobe { side: Side::Right, lobe: Upper }),
    ("right-middle-lobe",LungLobe { side: Side::Right, lobe: Middle }),
    ("right-lower-lobe", LungLobe { side: Side::Right, lobe: Lower }),

    ("left-peribronchial-nodes",  RegionalNodes { family: Peribronchial, side: Some(Side::Left) }),
    ("right-peribronchial-nodes", RegionalNodes { family: Peribronchial, side: Some(Side::Right) }),
    ("peribronchial-nodes",       RegionalNodes { family: Peribronchial, side: None }),
    ("left-hilar-nodes",          RegionalNodes { family: Hilar, side: Some(Side::Left) }),
    ("right-hilar-nodes",         RegionalNodes { family: Hilar, side: Some(Side::Right) }),
    ("hilar-nodes",               RegionalNodes { family: Hilar, side: None }),
    ("left-mediastinal-nodes",    RegionalNodes { family: Mediastinal, side: Some(Side::Left) }),
    ("right-mediastinal-nodes",   RegionalNodes { family: Mediastinal, side: Some(Side::Right) }),
    ("mediastinal-nodes",         RegionalNodes { family: Mediastinal, side: None }),
    ("subcarinal-nodes",          RegionalNodes { family: Subcarinal, side: None }),
    ("left-supraclavicular-nodes",  RegionalNodes { family: Supraclavicular, side: Some(Side::Left) }),
    ("right-supraclavicular-nodes", RegionalNodes { family: Supraclavicular, side: Some(Side::Right) }),
    ("supraclavicular-nodes",       RegionalNodes { family: Supraclavicular, side: None }),

    ("cervical-nodes",        NonRegionalNodes),
    ("axillary-nodes",        NonRegionalNodes),
    ("retroperitoneal-nodes", NonRegionalNodes),
    ("abdominal-nodes",       NonRegionalNodes),
    ("inguinal-nodes",        NonRegionalNodes),

    ("pleural-dissemination",     DistantPattern(PLEURAL_DISSEMINATION)),
    ("pericardial-dissemination", DistantPattern(PERICARDIAL_DISSEMINATION)),

    ("liver",         Organ { name: "liver",   paired: false }),
    ("brain",         Organ { name: "brain",   paired: false }),
    ("bone",          Organ { name: "bone",    paired: false }),
    ("spleen",        Organ { name: "spleen",  paired: false }),
    ("adrenal",       Organ { name: "adrenal", paired: true }),
    ("left-adrenal",  Organ { name: "adrenal", paired: true }),
    ("right-adrenal", Organ { name: "adrenal", paired: true }),
    ("kidney",        Organ { name: "kidney",  paired: true }),
    ("left-kidney",   Organ { name: "kidney",  paired: true }),
    ("right-kidney",  Organ { name: "kidney",  paired: true }),

    ("chest-wall",  Structure("chest-wall")),
    ("mediastinum", Structure("mediastinum")),
    ("diaphragm",   Structure("diaphragm")),
];

pub fn site_attributes(canonical: &str) -> Option<SiteKind> {
    SITE_TABLE
        .iter()
        .find(|(name, _)| *name == canonical)
        .map(|(_, kind)| *kind)
}

/// All canonical site names, for lexicon validation.
pub fn canonical_sites() -> impl Iterator<Item = &'static str> {
    SITE_TABLE.iter().map(|(name, _)| *name)
}

/// The explicit side of a canonical site, when it encodes one.
pub fn site_side(canonical: &str) -> Option<Side> {
    match site_attributes(canonical)? {
        LungLobe { side, .. } => Some(side),
        RegionalNodes { side, .. } => side,
        Organ { .. } if canonical.starts_with("left-") => Some(Side::Left),
        Organ { .. } if canonical.starts_with("right-") => Some(Side::Right),
        _ => None,
    }
}

/// Distant-pattern keys that the staging rule file must cover.
pub fn m_pattern_vocabulary() -> Vec<&'static str> {
    let mut v = vec![
        PLEURAL_DISSEMINATION,
        PERICARDIAL_DISSEMINATION,
        "contralateral-lung-nodule",
        "non-regional-node",
    ];
    for (_, kind) in SITE_TABLE {
        if let Organ { name, .. } = kind {
            if !v.contains(name) {
                v.push(name);
            }
        }
    }
    v
}

/// Regional station keys that the staging rule file must cover.
pub fn station_vocabulary() -> Vec<&'static str> {
    vec![
        "ipsilateral-peribronchial",
        "ipsilateral-hilar",
        "ipsilateral-mediastinal",
        "subcarinal",
        "contralateral-mediastinal",
        "contralateral-hilar",
        "supraclavicular",
        "peribronchial-unspecified",
        "hilar-unspecified",
        "mediastinal-unspecified",
    ]
}

/// T descriptor tags that the staging rule file must cover.
pub fn t_descriptor_vocabulary() -> Vec<&'static str> {
    vec![
        "visceral-pleural-invasion",
        "main-bronchus",
        "obstructive-pneumonitis-or-atelectasis",
        "chest-wall",
        "parietal-pleura",
        "phrenic-nerve",
        "parietal-pericardium",
        "separate-nodule-same-lobe",
        "diaphragm",
        "mediastinum",
        "heart",
        "great-vessels",
        "trachea",
        "carina",
        "recurrent-laryngeal-nerve",
        "esophagus",
        "vertebral-body",
        "separate-nodule-other-ipsilateral-lobe",
    ]
}
