//! The three-task evaluation harness end to end: direct-prompt baseline and
//! staged pipeline over the same scripted backend, scored and rendered into
//! the report grid.
//!
//! ```sh
//! cargo run --example evaluate
//! ```

use std::collections::BTreeMap;

use lungcds::backend::scripted_backend;
use lungcds::case::{Language, TaskId};
use lungcds::eval::{
    build_report, run_task, score_outputs, win_rate_matrix, HashedNgramEmbedding, RunConfig,
    RunMode, SimilarityScorer,
};
use lungcds::pipeline::PipelineContext;
use lungcds::synth::{generate_suite, judge_script, replay_script, GenParams};

fn main() -> anyhow::Result<()> {
    let ctx = PipelineContext::embedded();
    let cases = generate_suite(
        8,
        &GenParams {
            seed: 77,
            uncertainty_rate: 0.25,
            ..GenParams::default()
        },
    );
    let judge = scripted_backend(judge_script());
    let embedding = HashedNgramEmbedding::default();
    let scorer = SimilarityScorer::EmbeddingTokenF1(&embedding);

    let mut rows = Vec::new();
    let mut e2e_precision: BTreeMap<String, Vec<f64>> = BTreeMap::new();

    for mode in [RunMode::Direct, RunMode::Pipeline] {
        for task in [TaskId::TnmStaging, TaskId::TreatmentRecommendation, TaskId::EndToEnd] {
            let backend = scripted_backend(replay_script(&cases, &ctx));
            let config = RunConfig {
                model_name: "replay-model".into(),
                ..RunConfig::new(task, mode, Language::Zh)
            };
            let outputs = run_task(&cases, &ctx, &backend, &config);
            let scored = score_outputs(&cases, &outputs, &ctx, &config, &judge, &scorer);
            if task == TaskId::EndToEnd {
                let label = match mode {
                    RunMode::Direct => "replay-model".to_string(),
                    RunMode::Pipeline => "replay-model + pipeline".to_string(),
                };
                e2e_precision.insert(
                    label,
                    scored.iter().map(|r| r.precision.unwrap_or(0.0)).collect(),
                );
            }
            rows.extend(scored);
        }
    }

    let win = win_rate_matrix(&e2e_precision)?;
    let (md, csv) = build_report(&rows, Some(&win));
    println!("{md}");
    println!("--- csv ({} lines) ---", csv.lines().count());
    Ok(())
}
