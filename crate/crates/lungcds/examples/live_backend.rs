//! Template for running the pipeline against a live chat-completion service.
//!
//! Point it at an endpoint with:
//!
//! ```sh
//! export LUNGCDS_API_KEY=...
//! LUNGCDS_ENDPOINT=https://api.example.com/v1/chat/completions \
//! LUNGCDS_MODEL=some-model \
//! cargo run --example live_backend
//! ```
//!
//! Without an endpoint configured it explains what it needs and exits.

use lungcds::backend::{BackendConfig, HttpBackend, InputMode};
use lungcds::pipeline::{decide_case, render_staging, EngineChoice, PipelineContext, StageSource};
use lungcds::synth::{generate_case, GenParams};

fn main() -> anyhow::Result<()> {
    let Ok(endpoint) = std::env::var("LUNGCDS_ENDPOINT") else {
        eprintln!(
            "no LUNGCDS_ENDPOINT set; this example needs a live chat-completion endpoint.\n\
             Set LUNGCDS_ENDPOINT, LUNGCDS_MODEL and LUNGCDS_API_KEY, then re-run.\n\
             For an offline demonstration of the same pipeline, run:\n\
                 cargo run --example scripted_pipeline"
        );
        return Ok(());
    };
    let model = std::env::var("LUNGCDS_MODEL").unwrap_or_else(|_| "default".to_string());

    let backend = HttpBackend::new(BackendConfig {
        endpoint_url: endpoint,
        model_name: model,
        api_key_env_var: "LUNGCDS_API_KEY".to_string(),
        timeout_ms: 120_000,
        max_retries: 3,
    })?;

    let ctx = PipelineContext::embedded();
    let case = generate_case(&GenParams { seed: 1, ..GenParams::default() }, 0);
    println!("running case {} against the live backend...", case.id);

    let decision = decide_case(
        &case,
        &ctx,
        EngineChoice::Model,
        Some(&backend),
        StageSource::Predicted,
        InputMode::TextOnly,
    )?;
    if let Some(staging) = &decision.staging {
        print!("{}", render_staging(&case.id, staging));
    }
    println!("{}", decision.recommendation);
    Ok(())
}
