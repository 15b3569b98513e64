//! Inputs shared by the benchmarks.

use tsr_core::synth::{generate_table, SynthConfig};
use tsr_core::TokenSeq;

/// A synthetic table structure with roughly `rows × cols` cells.
pub fn table(rows: usize, cols: usize, seed: u64) -> TokenSeq {
    use rand::SeedableRng;
    let cfg = SynthConfig { min_rows: rows, max_rows: rows, min_cols: cols, max_cols: cols, span_prob: 0.15, ..SynthConfig::default() };
    generate_table(&cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed)).1
}
