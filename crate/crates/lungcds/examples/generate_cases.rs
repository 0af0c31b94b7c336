//! Generate a synthetic case corpus with known gold labels and write it as a
//! case file.
//!
//! ```sh
//! cargo run --example generate_cases
//! ```

use lungcds::case::{save_cases, validate_case, TaskId};
use lungcds::synth::{generate_suite, GenParams};

fn main() -> anyhow::Result<()> {
    let params = GenParams {
        seed: 42,
        uncertainty_rate: 0.3,
        modality_dropout_rate: 0.15,
        ..GenParams::default()
    };
    params.validate().map_err(anyhow::Error::msg)?;

    let cases = generate_suite(25, &params);
    for case in &cases {
        let issues = validate_case(case, TaskId::TnmStaging);
        anyhow::ensure!(issues.is_empty(), "case {} invalid: {issues:?}", case.id);
    }

    let out = std::env::temp_dir().join("lungcds_demo_cases.json");
    save_cases(&cases, &out)?;
    println!("wrote {} cases to {}", cases.len(), out.display());

    let sample = &cases[0];
    let gold = sample.gold_staging.as_ref().unwrap();
    println!(
        "\nsample case {} ({} documents), gold {} {} {}",
        sample.id,
        sample.documents.len(),
        gold.t,
        gold.n,
        gold.m
    );
    for doc in &sample.documents {
        println!("--- [{}] {}", doc.modality, doc.text.as_deref().unwrap_or("(images)"));
    }
    Ok(())
}
