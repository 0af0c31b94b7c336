//! Scenario routing and guideline-constrained recommendation: build profile
//! vectors, route them through the deterministic triage, and show the expert
//! agent's hard-constraint enforcement rejecting an out-of-subset drug.
//!
//! ```sh
//! cargo run --example route_and_recommend
//! ```

use lungcds::aggregate::OverallStage;
use lungcds::backend::{scripted_backend, ScriptRule};
use lungcds::profile::{
    check_missing_critical, route_scenario, DriverGene, DriverStatus, Histology,
    MetastaticBurden, PdL1, ProfileVector, PsScore, RoutingConfig, ScenarioId, TriState,
};
use lungcds::prompts::PromptLibrary;
use lungcds::treatment::{embedded_guidelines, recommend, recommend_rule_based, GuidelineError};

fn profile(stage: OverallStage) -> ProfileVector {
    ProfileVector {
        histology: Histology::Adenocarcinoma,
        driver_status: DriverStatus::Negative,
        pd_l1: PdL1::AtLeast50,
        ps_score: PsScore::Known(1),
        resection_done: TriState::No,
        treatment_line: 1,
        prior_regimens: vec![],
        metastatic_burden: MetastaticBurden::Wide,
        stage,
        resectable_intent: TriState::No,
    }
}

fn main() -> anyhow::Result<()> {
    let routing = RoutingConfig::embedded();
    let store = embedded_guidelines();

    // A few profiles through the triage.
    let mut egfr = profile(OverallStage::IVB);
    egfr.driver_status = DriverStatus::Positive(DriverGene::Egfr);
    let mut postop = profile(OverallStage::IB);
    postop.resection_done = TriState::Yes;
    postop.metastatic_burden = MetastaticBurden::None;
    let mut unknown_pdl1 = profile(OverallStage::IVA);
    unknown_pdl1.pd_l1 = PdL1::Unknown;

    for (label, p) in [
        ("driver-negative IVB", profile(OverallStage::IVB)),
        ("EGFR-positive IVB", egfr),
        ("post-resection IB", postop),
        ("IVA with unknown PD-L1", unknown_pdl1.clone()),
        ("indeterminate stage", profile(OverallStage::Indeterminate)),
    ] {
        let scenario = route_scenario(&p);
        let warnings = check_missing_critical(&p, scenario, routing);
        println!("{label}: -> {scenario} ({} warnings)", warnings.len());
        let rec = recommend_rule_based(&p, scenario, store, &warnings)?;
        println!("  offline recommendation: [{}]", rec.core_regimen.join(", "));
    }

    // Hard-constraint enforcement: the first scripted reply names a drug
    // outside the injected subset and is rejected; the retry is accepted.
    let reply = |drug: &str| {
        serde_json::json!({
            "strategy": "first-line systemic therapy",
            "core_regimen": [drug],
            "key_considerations": "per guideline subset",
            "reasoning": "scripted expert",
            "cited_blocks": [1],
        })
        .to_string()
    };
    let backend = scripted_backend(vec![
        ScriptRule::new("expert-adv-driver-neg-first-line", reply("imaginariumab")),
        ScriptRule::new("expert-adv-driver-neg-first-line", reply("pembrolizumab")),
    ]);
    let p = profile(OverallStage::IVB);
    let rec = recommend(
        &p,
        ScenarioId::AdvDriverNegFirstLine,
        store,
        &backend,
        &PromptLibrary::embedded(),
        lungcds::case::Language::En,
        "demo-case",
        &[],
    )?;
    println!(
        "\nconstraint enforcement: first reply rejected, retry accepted -> [{}]",
        rec.core_regimen.join(", ")
    );

    // And a persistent violation errors out.
    let stubborn = scripted_backend(vec![ScriptRule::new(
        "expert-adv-driver-neg-first-line",
        reply("imaginariumab"),
    )
    .sticky()]);
    match recommend(
        &p,
        ScenarioId::AdvDriverNegFirstLine,
        store,
        &stubborn,
        &PromptLibrary::embedded(),
        lungcds::case::Language::En,
        "demo-case",
        &[],
    ) {
        Err(GuidelineError::ConstraintViolation(drug)) => {
            println!("persistent violation rejected: {drug:?}");
        }
        other => anyhow::bail!("expected a constraint violation, got {other:?}"),
    }
    Ok(())
}
