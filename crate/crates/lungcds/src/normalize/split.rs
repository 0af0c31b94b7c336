//! Composite anatomical site splitting.
//!
//! Compound phrases like "bilateral hilar and mediastinal nodes" collapse
//! several anatomical entities into one mention; staging them as a unit
//! invites cross-dimensional confusion. [`split_composite_site`] expands such
//! phrases into independent atoms, distributing side modifiers and node head
//! nouns across conjuncts, and anchors each atom relative to the primary
//! tumor side.

use super::{Laterality, Side};

/// Side modifier attached to one conjunct.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SideMod {
    Left,
    Right,
    Both,
    /// "ipsilateral" / "同侧"
    SamePrimary,
    /// "contralateral" / "对侧"
    OppositePrimary,
}

const CONJUNCTIONS: &[&str] = &[" and ", "及", "和", "与", "、", "，", ","];

/// Head nouns distributed from the last conjunct to earlier bare conjuncts,
/// so "hilar and mediastinal nodes" yields "hilar nodes" + "mediastinal nodes".
const NODE_HEADS: &[&str] = &["lymph nodes", "lymph node", "nodes", "node", "淋巴结"];

/// Terms that make an unsided atom midline rather than side-unknown:
/// midline stations and unpaired extrathoracic organs.
const MIDLINE_MARKERS: &[&str] = &[
    "subcarinal",
    "隆突下",
    "liver",
    "肝",
    "brain",
    "脑",
    "颅内",
    "bone",
    "骨",
    "spleen",
    "脾",
    "trachea",
    "气管",
    "esophagus",
    "食管",
];

fn strip_side_modifier(conjunct: &str) -> (Option<SideMod>, String) {
    let trimmed = conjunct.trim();
    let rules: &[(&str, SideMod)] = &[
        ("bilateral ", SideMod::Both),
        ("bilateral", SideMod::Both),
        ("双侧", SideMod::Both),
        ("两侧", SideMod::Both),
        ("left ", SideMod::Left),
        ("左侧", SideMod::Left),
        ("左", SideMod::Left),
        ("right ", SideMod::Right),
        ("右侧", SideMod::Right),
        ("右", SideMod::Right),
        ("ipsilateral ", SideMod::SamePrimary),
        ("同侧", SideMod::SamePrimary),
        ("contralateral ", SideMod::OppositePrimary),
        ("对侧", SideMod::OppositePrimary),
    ];
    let lower = trimmed.to_lowercase();
    for (prefix, m) in rules {
        if lower.starts_with(prefix) {
            let rest = trimmed[prefix.len()..].trim().to_string();
            if !rest.is_empty() {
                return (Some(*m), rest);
            }
        }
    }
    (None, trimmed.to_string())
}

fn contains_cjk(s: &str) -> bool {
    s.chars().any(|c| ('\u{4e00}'..='\u{9fff}').contains(&c))
}

fn join_side(side: Side, core: &str) -> String {
    if contains_cjk(core) {
        let word = if side == Side::Left { "左" } else { "右" };
        format!("{word}{core}")
    } else {
        let word = if side == Side::Left { "left" } else { "right" };
        format!("{word} {core}")
    }
}

fn laterality_for_side(side: Side, primary: Side) -> Laterality {
    match (side, primary) {
        (_, Side::Unknown) | (Side::Unknown, _) => Laterality::Unknown,
        (s, p) if s == p => Laterality::Ipsilateral,
        _ => Laterality::Contralateral,
    }
}

fn unsided_laterality(core: &str) -> Laterality {
    let lower = core.to_lowercase();
    if MIDLINE_MARKERS.iter().any(|m| lower.contains(m)) {
        Laterality::Midline
    } else {
        Laterality::Unknown
    }
}

fn smallest_split(phrase: &str) -> Vec<String> {
    let mut parts = vec![phrase.to_string()];
    for sep in CONJUNCTIONS {
        parts = parts
            .into_iter()
            .flat_map(|p| {
                p.split(sep)
                    .map(|s| s.trim().to_string())
                    .collect::<Vec<_>>()
            })
            .collect();
    }
    parts.into_iter().filter(|p| !p.is_empty()).collect()
}

/// Split a possibly-composite site phrase into atomic `(site, laterality)`
/// pairs, anchored relative to `primary_side`.
///
/// Distributive modifiers expand ("bilateral X" becomes one atom per side,
/// primary side first when known) and a leading modifier carries over to
/// later conjuncts that lack their own. An unsplittable phrase comes back as
/// a single atom with `Unknown` laterality. Ordering follows source order,
/// and re-splitting any output atom is a no-op.
pub fn split_composite_site(phrase: &str, primary_side: Side) -> Vec<(String, Laterality)> {
    let conjuncts = smallest_split(phrase);
    if conjuncts.is_empty() {
        return vec![(phrase.trim().to_string(), Laterality::Unknown)];
    }

    let mut parsed: Vec<(Option<SideMod>, String)> =
        conjuncts.iter().map(|c| strip_side_modifier(c)).collect();

    // Distribute the head noun of the final conjunct backwards.
    if let Some((_, last_core)) = parsed.last().cloned() {
        let lower_last = last_core.to_lowercase();
        if let Some(head) = NODE_HEADS.iter().find(|h| lower_last.ends_with(*h)) {
            let cjk = contains_cjk(&last_core);
            for (_, core) in parsed.iter_mut().take(conjuncts.len() - 1) {
                if !core.to_lowercase().contains(head) {
                    if cjk {
                        core.push_str(head);
                    } else {
                        core.push(' ');
                        core.push_str(head);
                    }
                }
            }
        }
    }

    // A modifier on the first conjunct distributes to bare later conjuncts.
    let lead = parsed.first().and_then(|(m, _)| *m);
    let mut atoms = Vec::new();
    for (modifier, core) in parsed {
        let effective = modifier.or(lead);
        match effective {
            Some(SideMod::Both) => {
                let first = if primary_side == Side::Left {
                    Side::Left
                } else {
                    Side::Right
                };
                for side in [first, first.opposite()] {
                    atoms.push((
                        join_side(side, &core),
                        laterality_for_side(side, primary_side),
                    ));
                }
            }
            Some(SideMod::Left) => {
                atoms.push((
                    join_side(Side::Left, &core),
                    laterality_for_side(Side::Left, primary_side),
                ));
            }
            Some(SideMod::Right) => {
                atoms.push((
                    join_side(Side::Right, &core),
                    laterality_for_side(Side::Right, primary_side),
                ));
            }
            Some(SideMod::SamePrimary) => match primary_side {
                Side::Unknown => atoms.push((
                    if contains_cjk(&core) {
                        format!("同侧{core}")
                    } else {
                        format!("ipsilateral {core}")
                    },
                    Laterality::Unknown,
                )),
                side => atoms.push((join_side(side, &core), Laterality::Ipsilateral)),
            },
            Some(SideMod::OppositePrimary) => match primary_side {
                Side::Unknown => atoms.push((
                    if contains_cjk(&core) {
                        format!("对侧{core}")
                    } else {
                        format!("contralateral {core}")
                    },
                    Laterality::Unknown,
                )),
                side => atoms.push((
                    join_side(side.opposite(), &core),
                    Laterality::Contralateral,
                )),
            },
            None => atoms.push((core.clone(), unsided_laterality(&core))),
        }
    }
    atoms
}
