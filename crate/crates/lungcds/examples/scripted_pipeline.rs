//! Run the full model-driven pipeline against a scripted backend: every
//! agent call (extraction, three stagers, profile, expert) is answered from
//! a replay script, exercising the same request/parse machinery a live
//! backend would.
//!
//! ```sh
//! cargo run --example scripted_pipeline
//! ```

use lungcds::backend::{scripted_backend, InputMode};
use lungcds::pipeline::{decide_case, EngineChoice, PipelineContext, StageSource};
use lungcds::synth::{generate_suite, replay_script, GenParams};

fn main() -> anyhow::Result<()> {
    let ctx = PipelineContext::embedded();
    let cases = generate_suite(
        4,
        &GenParams {
            seed: 14,
            uncertainty_rate: 0.4,
            ..GenParams::default()
        },
    );
    let backend = scripted_backend(replay_script(&cases, &ctx));

    for case in &cases {
        let decision = decide_case(
            case,
            &ctx,
            EngineChoice::Model,
            Some(&backend),
            StageSource::Predicted,
            InputMode::TextOnly,
        )?;
        println!(
            "case {}: stage {} -> scenario {}",
            case.id, decision.stage_used, decision.scenario
        );
        if let Some(staging) = &decision.staging {
            for shift in &staging.shifts {
                println!(
                    "  if {} confirmed -> {} (stage {})",
                    shift.triggering_findings[0].site, shift.assumed_category, shift.projected_stage
                );
            }
        }
        println!(
            "  regimen: [{}]\n",
            decision.recommendation.core_regimen.join(", ")
        );
    }
    println!(
        "backend transcript recorded {} requests",
        backend.transcript().len()
    );
    Ok(())
}
