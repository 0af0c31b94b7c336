//! Deterministic stage aggregation and uncertainty projection.
//!
//! The overall stage is a pure lookup in a total (T, N, M) table — no model
//! call ever sits on this path. The table is versioned data validated at
//! load: all 160 combinations present, every M1a/M1b cell in the IVA group
//! and every M1c cell IVB, and raising any single coordinate never lowers
//! the stage (unassessable `Indeterminate` cells excluded).
//!
//! Uncertainty projection replays each hedged finding as if confirmed,
//! re-stages only its own dimension with the rule engine, re-aggregates, and
//! reports the stage shift that confirmation would cause.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::normalize::{Certainty, EvidencePools, NormalizedFinding};
use crate::staging::{
    stage_m, stage_n, stage_t, Dimension, Engine, MCategory, NCategory, StagingError,
    StagingRuleFile, SubCategory, TCategory,
};

/// Overall stage group. Totally ordered except `Indeterminate`, which is
/// excluded from comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OverallStage {
    Occult,
    IA1,
    IA2,
    IA3,
    IB,
    IIA,
    IIB,
    IIIA,
    IIIB,
    IIIC,
    IVA,
    IVB,
    Indeterminate,
}

impl OverallStage {
    pub const ORDERED: &'static [OverallStage] = &[
        OverallStage::Occult,
        OverallStage::IA1,
        OverallStage::IA2,
        OverallStage::IA3,
        OverallStage::IB,
        OverallStage::IIA,
        OverallStage::IIB,
        OverallStage::IIIA,
        OverallStage::IIIB,
        OverallStage::IIIC,
        OverallStage::IVA,
        OverallStage::IVB,
    ];

    /// Position in the total order; `None` for `Indeterminate`.
    pub fn rank(self) -> Option<u8> {
        Self::ORDERED.iter().position(|s| *s == self).map(|i| i as u8)
    }

    /// `true` when both stages are comparable and `self` is strictly above
    /// `other`.
    pub fn is_above(self, other: OverallStage) -> bool {
        matches!((self.rank(), other.rank()), (Some(a), Some(b)) if a > b)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OverallStage::Occult => "Occult",
            OverallStage::IA1 => "IA1",
            OverallStage::IA2 => "IA2",
            OverallStage::IA3 => "IA3",
            OverallStage::IB => "IB",
            OverallStage::IIA => "IIA",
            OverallStage::IIB => "IIB",
            OverallStage::IIIA => "IIIA",
            OverallStage::IIIB => "IIIB",
            OverallStage::IIIC => "IIIC",
            OverallStage::IVA => "IVA",
            OverallStage::IVB => "IVB",
            OverallStage::Indeterminate => "Indeterminate",
        }
    }
}

impl fmt::Display for OverallStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OverallStage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        for stage in Self::ORDERED {
            if stage.as_str() == s {
                return Ok(*stage);
            }
        }
        if s == "Indeterminate" {
            return Ok(OverallStage::Indeterminate);
        }
        Err(format!("unknown overall stage {s:?}"))
    }
}

#[derive(Debug, Error)]
pub enum TableError {
    #[error("cannot read stage table {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse stage table: {0}")]
    Parse(String),
    #[error("incomplete stage table: {missing} combinations absent (first: {first})")]
    IncompleteTable { missing: usize, first: String },
    #[error("duplicate stage table row for {0}")]
    DuplicateRow(String),
    #[error("non-monotone stage table: {witness}")]
    NonMonotoneTable { witness: String },
    #[error("M1 row {row} must map into the IV group, found {found}")]
    BadMetastaticGroup { row: String, found: OverallStage },
}

/// Total mapping (T, N, M) -> overall stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageGroupTable {
    pub version: String,
    map: BTreeMap<(TCategory, NCategory, MCategory), OverallStage>,
}

#[derive(Debug, Deserialize)]
struct TableRaw {
    version: String,
    rows: Vec<(String, String, String, String)>,
}

impl StageGroupTable {
    pub fn parse(raw: &str) -> Result<StageGroupTable, TableError> {
        let raw: TableRaw = toml::from_str(raw).map_err(|e| TableError::Parse(e.to_string()))?;
        let mut map = BTreeMap::new();
        for (t, n, m, stage) in &raw.rows {
            let key = (
                t.parse::<TCategory>().map_err(TableError::Parse)?,
                n.parse::<NCategory>().map_err(TableError::Parse)?,
                m.parse::<MCategory>().map_err(TableError::Parse)?,
            );
            let stage = stage.parse::<OverallStage>().map_err(TableError::Parse)?;
            if map.insert(key, stage).is_some() {
                return Err(TableError::DuplicateRow(format!(
                    "({} {} {})",
                    key.0, key.1, key.2
                )));
            }
        }
        let table = StageGroupTable {
            version: raw.version,
            map,
        };
        table.validate()?;
        Ok(table)
    }

    /// Load and validate a table file; any gap or invariant violation fails
    /// the load loudly.
    pub fn load(path: impl AsRef<Path>) -> Result<StageGroupTable, TableError> {
        let raw = std::fs::read_to_string(path.as_ref()).map_err(|source| TableError::Io {
            path: path.as_ref().display().to_string(),
            source,
        })?;
        StageGroupTable::parse(&raw)
    }

    /// The table shipped with the crate.
    pub fn embedded() -> &'static StageGroupTable {
        static EMBEDDED: std::sync::OnceLock<StageGroupTable> = std::sync::OnceLock::new();
        EMBEDDED.get_or_init(|| {
            StageGroupTable::parse(include_str!("../data/rules/stage_groups.toml"))
                .expect("embedded stage table is valid")
        })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn validate(&self) -> Result<(), TableError> {
        // Totality over all 160 combinations.
        let mut missing = Vec::new();
        for &t in TCategory::ALL {
            for &n in NCategory::ALL {
                for &m in MCategory::ALL {
                    if !self.map.contains_key(&(t, n, m)) {
                        missing.push(format!("({t} {n} {m})"));
                    }
                }
            }
        }
        if !missing.is_empty() {
            return Err(TableError::IncompleteTable {
                missing: missing.len(),
                first: missing[0].clone(),
            });
        }

        // Metastatic group: M1a/M1b cells are IVA, M1c cells IVB.
        for (&(t, n, m), &stage) in &self.map {
            let expected = match m {
                MCategory::M0 => None,
                MCategory::M1a | MCategory::M1b => Some(OverallStage::IVA),
                MCategory::M1c => Some(OverallStage::IVB),
            };
            if let Some(expected) = expected {
                if stage != expected {
                    return Err(TableError::BadMetastaticGroup {
                        row: format!("({t} {n} {m})"),
                        found: stage,
                    });
                }
            }
        }

        // Coordinate monotonicity, Indeterminate cells excluded.
        let witness = |a: (TCategory, NCategory, MCategory),
                       b: (TCategory, NCategory, MCategory),
                       sa: OverallStage,
                       sb: OverallStage| {
            format!(
                "({} {} {})->{sa} vs ({} {} {})->{sb}",
                a.0, a.1, a.2, b.0, b.1, b.2
            )
        };
        for (&key, &stage) in &self.map {
            let Some(rank) = stage.rank() else { continue };
            let mut neighbours = Vec::new();
            let (t, n, m) = key;
            if let Some(&t2) = TCategory::ALL.get(t as usize + 1) {
                neighbours.push((t2, n, m));
            }
            if let Some(&n2) = NCategory::ALL.get(n as usize + 1) {
                neighbours.push((t, n2, m));
            }
            if let Some(&m2) = MCategory::ALL.get(m as usize + 1) {
                neighbours.push((t, n, m2));
            }
            for nb in neighbours {
                let next = self.map[&nb];
                if let Some(next_rank) = next.rank() {
                    if next_rank < rank {
                        return Err(TableError::NonMonotoneTable {
                            witness: witness(key, nb, stage, next),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// Pure table lookup of the overall stage for a (T, N, M) triple.
pub fn aggregate_stage(
    t: TCategory,
    n: NCategory,
    m: MCategory,
    table: &StageGroupTable,
) -> OverallStage {
    table.map[&(t, n, m)]
}

/// The stage shift that confirming one (or several equivalent) uncertain
/// findings would cause.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialShift {
    pub dimension: Dimension,
    /// The sub-stage the dimension would reach if the finding were confirmed.
    pub assumed_category: SubCategory,
    pub projected_stage: OverallStage,
    /// Every uncertain finding whose confirmation produces exactly this
    /// shift. Equivalent shifts are merged, source order preserved.
    pub triggering_findings: Vec<NormalizedFinding>,
}

/// Project each uncertain finding independently: assume it confirmed,
/// re-stage only its dimension with the rule engine, re-aggregate, and emit
/// a shift when the projected stage is above the base stage (or becomes
/// `Indeterminate` from a comparable base).
pub fn project_uncertainty(
    pools: &EvidencePools,
    base: (TCategory, NCategory, MCategory),
    rules: &StagingRuleFile,
    table: &StageGroupTable,
) -> Result<Vec<PotentialShift>, StagingError> {
    let base_stage = aggregate_stage(base.0, base.1, base.2, table);
    let mut shifts: Vec<PotentialShift> = Vec::new();

    let dims: [(Dimension, &Vec<NormalizedFinding>); 3] = [
        (Dimension::T, &pools.e_t),
        (Dimension::N, &pools.e_n),
        (Dimension::M, &pools.e_m),
    ];
    for (dimension, pool) in dims {
        for (idx, finding) in pool.iter().enumerate() {
            if finding.certainty.is_confirmed() {
                continue;
            }
            let mut flipped: Vec<NormalizedFinding> = pool.clone();
            flipped[idx].certainty = Certainty::Confirmed;

            let (assumed_category, triple) = match dimension {
                Dimension::T => {
                    let r = stage_t(&flipped, &Engine::RuleBased, rules)?;
                    let c = r.t_category().expect("T stager returns a T category");
                    (SubCategory::T(c), (c, base.1, base.2))
                }
                Dimension::N => {
                    let r = stage_n(&flipped, &Engine::RuleBased, rules)?;
                    let c = r.n_category().expect("N stager returns an N category");
                    (SubCategory::N(c), (base.0, c, base.2))
                }
                Dimension::M => {
                    let r = stage_m(&flipped, &Engine::RuleBased, rules)?;
                    let c = r.m_category().expect("M stager returns an M category");
                    (SubCategory::M(c), (base.0, base.1, c))
                }
            };
            let projected = aggregate_stage(triple.0, triple.1, triple.2, table);
            let emit = projected.is_above(base_stage)
                || (projected == OverallStage::Indeterminate
                    && base_stage != OverallStage::Indeterminate);
            if !emit {
                continue;
            }
            match shifts.iter_mut().find(|s| {
                s.dimension == dimension
                    && s.assumed_category == assumed_category
                    && s.projected_stage == projected
            }) {
                Some(existing) => existing.triggering_findings.push(finding.clone()),
                None => shifts.push(PotentialShift {
                    dimension,
                    assumed_category,
                    projected_stage: projected,
                    triggering_findings: vec![finding.clone()],
                }),
            }
        }
    }
    Ok(shifts)
}
