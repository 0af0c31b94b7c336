//! Clinical decision-support pipeline for lung cancer.
//!
//! The crate decomposes the decision workflow into stages with strict
//! boundaries:
//!
//! 1. **Evidence normalization** ([`normalize`]) — heterogeneous report text is
//!    turned into atomic, laterality-anchored findings and dispatched into
//!    separate T/N/M evidence pools.
//! 2. **Decoupled TNM staging** ([`staging`]) — three dimension-isolated
//!    stagers (rule engine or model-driven) assign a category per dimension
//!    from confirmed evidence only, carrying uncertain findings alongside.
//! 3. **Deterministic aggregation** ([`aggregate`]) — a total stage-group
//!    table maps the (T, N, M) triple to an overall stage, and an uncertainty
//!    projection reports how confirming each hedged finding would shift it.
//! 4. **Scenario routing and treatment** ([`profile`], [`treatment`]) — a
//!    structured profile vector drives a deterministic triage to one clinical
//!    scenario, whose expert agent recommends therapy under a locally injected
//!    guideline subset enforced as a hard constraint.
//!
//! Around the pipeline sit a uniform chat-completion [`backend`] contract
//! (live HTTP or scripted replay), a three-task evaluation harness with
//! LLM-as-judge metrics ([`eval`]), a synthetic case generator with known
//! gold labels ([`synth`]), and a thin [`cli`].
//!
//! The staging thresholds, station maps, stage-group matrix, routing table
//! and guideline subsets are versioned data files under `data/`, not code;
//! see the repo README for formats. The shipped guideline subsets are test
//! scaffolding, not clinical advice.

pub mod aggregate;
pub mod backend;
pub mod case;
pub mod cli;
pub mod eval;
pub mod normalize;
pub mod pipeline;
pub mod profile;
pub mod prompts;
pub mod staging;
pub mod synth;
pub mod treatment;

pub use aggregate::{aggregate_stage, project_uncertainty, OverallStage, StageGroupTable};
pub use case::{CaseDocument, CaseRecord, GoldStaging, GoldTreatment, Language, Modality};
pub use normalize::{dispatch_pools, split_composite_site, EvidencePools, NormalizedFinding};
pub use staging::{MCategory, NCategory, StagingRuleFile, SubStageResult, TCategory};
