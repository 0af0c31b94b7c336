//! Stage cases with the deterministic rule engine: normalization, dispatch
//! into T/N/M pools, dimension-isolated staging, table aggregation, and
//! uncertainty projection.
//!
//! ```sh
//! cargo run --example stage_rule_engine
//! ```

use lungcds::backend::InputMode;
use lungcds::pipeline::{render_staging, stage_case, EngineChoice, PipelineContext};
use lungcds::synth::{generate_suite, gold_triple, GenParams};

fn main() -> anyhow::Result<()> {
    let ctx = PipelineContext::embedded();
    let params = GenParams {
        seed: 9,
        uncertainty_rate: 0.6,
        ..GenParams::default()
    };
    let cases = generate_suite(6, &params);

    for case in &cases {
        let outcome = stage_case(case, &ctx, EngineChoice::Rule, None, InputMode::TextOnly)?;
        print!("{}", render_staging(&case.id, &outcome));
        let gold = gold_triple(case);
        let got = outcome.categories();
        println!(
            "  gold: {} {} {} -> {}\n",
            gold.0,
            gold.1,
            gold.2,
            if got == gold { "recovered exactly" } else { "MISMATCH" }
        );
    }
    Ok(())
}
