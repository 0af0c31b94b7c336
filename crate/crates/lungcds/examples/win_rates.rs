//! Pairwise win-rate matrix over per-case score vectors.
//!
//! ```sh
//! cargo run --example win_rates
//! ```

use std::collections::BTreeMap;

use lungcds::eval::win_rate_matrix;

fn main() -> anyhow::Result<()> {
    // Per-case end-to-end precision for three systems over the same cases.
    let mut scores = BTreeMap::new();
    scores.insert(
        "baseline".to_string(),
        vec![33.3, 50.0, 0.0, 66.7, 25.0, 50.0],
    );
    scores.insert(
        "baseline + pipeline".to_string(),
        vec![66.7, 50.0, 33.3, 66.7, 75.0, 100.0],
    );
    scores.insert(
        "other-model".to_string(),
        vec![50.0, 25.0, 33.3, 33.3, 50.0, 66.7],
    );

    let w = win_rate_matrix(&scores)?;
    print!("{:24}", "");
    for name in &w.names {
        print!("{name:>22}");
    }
    println!();
    for (i, name) in w.names.iter().enumerate() {
        print!("{name:24}");
        for v in &w.values[i] {
            print!("{v:>22.3}");
        }
        println!();
    }

    // Complementarity holds by construction.
    for i in 0..w.names.len() {
        for j in 0..w.names.len() {
            if i != j {
                assert!((w.values[i][j] + w.values[j][i] - 1.0).abs() < 1e-9);
            }
        }
    }
    println!("\nW[a][b] + W[b][a] = 1 for all pairs; diagonal 0.5");
    Ok(())
}
