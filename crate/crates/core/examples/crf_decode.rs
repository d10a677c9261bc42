//! Constrained CRF decoding checked against exhaustive enumeration.
//!
//! `cargo run --release --example crf_decode`

use melseg::crf::{run_oracle, CrfScores, Legality};
use melseg::tensor::Tensor;

fn main() -> anyhow::Result<()> {
    // ascend labels 0..=4 with phrases of at least two notes
    let legality = Legality::ascend(4, 2)?;
    let scores = CrfScores::from_legality(&legality);
    // emissions that would like two boundaries in a row
    let emissions = Tensor::from_rows(&[
        vec![0.0, 2.0, 0.0, 0.0, 0.0],
        vec![0.0, 2.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 1.0, 0.5, 0.0],
    ])?;
    let best = scores.viterbi(&emissions)?;
    println!("viterbi path {:?} score {:.3}", best.labels, best.score);
    println!("legal: {}", legality.is_legal(&best.labels));
    println!("log Z {:.6}", scores.log_partition(&emissions)?);
    let (brute_z, brute_best) = scores.brute_force(&emissions)?;
    println!("brute force: log Z {brute_z:.6}, best {:?}", brute_best.labels);

    let report = run_oracle(200, 0, 8, 6)?;
    println!(
        "oracle over {} instances: max |dlogZ| {:.2e}, max |dViterbi| {:.2e}, illegal paths {}",
        report.trials, report.max_log_z_error, report.max_viterbi_error, report.illegal_paths
    );
    Ok(())
}
