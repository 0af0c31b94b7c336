//! Dimension-isolated TNM staging.
//!
//! Three stagers — one per dimension — each run either as a deterministic
//! rule engine or as a model-driven agent constrained to the same rule file.
//! A category is always computed from confirmed evidence only; uncertain
//! findings ride along in the result for downstream projection.

mod engine;
mod rules;

pub use engine::{stage_all, stage_m, stage_n, stage_t, DimensionErrors, Engine, StagingError};
pub use rules::{RuleFileError, StagingRuleFile};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::normalize::NormalizedFinding;

macro_rules! category_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(concat!("unknown ", stringify!($name), " {:?}"), other)),
                }
            }
        }
    };
}

category_enum! {
    /// Primary tumor category. The order is the max-combination order; `Tx`
    /// sorts lowest because it is unassessable, not small.
    TCategory {
        Tx => "Tx", T1a => "T1a", T1b => "T1b", T1c => "T1c",
        T2a => "T2a", T2b => "T2b", T3 => "T3", T4 => "T4",
    }
}

category_enum! {
    /// Regional node category.
    NCategory {
        Nx => "Nx", N0 => "N0", N1 => "N1", N2 => "N2", N3 => "N3",
    }
}

category_enum! {
    /// Distant metastasis category.
    MCategory {
        M0 => "M0", M1a => "M1a", M1b => "M1b", M1c => "M1c",
    }
}

/// Staging dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dimension {
    T,
    N,
    M,
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dimension::T => write!(f, "T"),
            Dimension::N => write!(f, "N"),
            Dimension::M => write!(f, "M"),
        }
    }
}

/// A category in any dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubCategory {
    T(TCategory),
    N(NCategory),
    M(MCategory),
}

impl fmt::Display for SubCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubCategory::T(c) => c.fmt(f),
            SubCategory::N(c) => c.fmt(f),
            SubCategory::M(c) => c.fmt(f),
        }
    }
}

/// One step of a staging trace: the rule that fired and the indices of the
/// findings that matched it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub rule: String,
    #[serde(default)]
    pub findings: Vec<usize>,
}

/// Output of one staging dimension: the category computed from confirmed
/// evidence, the set of uncertain findings excluded from it, and the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubStageResult {
    pub dimension: Dimension,
    pub category: SubCategory,
    pub uncertain: Vec<NormalizedFinding>,
    pub trace: Vec<TraceStep>,
}

impl SubStageResult {
    pub fn t_category(&self) -> Option<TCategory> {
        match self.category {
            SubCategory::T(c) => Some(c),
            _ => None,
        }
    }

    pub fn n_category(&self) -> Option<NCategory> {
        match self.category {
            SubCategory::N(c) => Some(c),
            _ => None,
        }
    }

    pub fn m_category(&self) -> Option<MCategory> {
        match self.category {
            SubCategory::M(c) => Some(c),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn category_order_matches_the_max_combination_order() {
        assert!(TCategory::Tx < TCategory::T1a);
        assert!(TCategory::T1c < TCategory::T2a);
        assert!(TCategory::T3 < TCategory::T4);
        assert!(NCategory::Nx < NCategory::N0);
        assert!(NCategory::N2 < NCategory::N3);
        assert!(MCategory::M0 < MCategory::M1a);
        assert!(MCategory::M1b < MCategory::M1c);
    }

    #[test]
    fn categories_round_trip_through_strings() {
        for t in TCategory::ALL {
            assert_eq!(t.as_str().parse::<TCategory>().unwrap(), *t);
        }
        for n in NCategory::ALL {
            assert_eq!(n.as_str().parse::<NCategory>().unwrap(), *n);
        }
        for m in MCategory::ALL {
            assert_eq!(m.as_str().parse::<MCategory>().unwrap(), *m);
        }
        assert!("T9".parse::<TCategory>().is_err());
    }
}
