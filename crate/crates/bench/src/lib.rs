//! Benchmarks live in `benches/`; this crate only holds shared fixtures.

use gems_core::Matrix;

/// Deterministic, well-conditioned-enough dense matrix without an RNG.
pub fn fixture(rows: usize, cols: usize, salt: u64) -> Matrix {
    Matrix::from_fn(rows, cols, |i, j| {
        let x = (i * 7919 + j * 104_729) as f64 + salt as f64 * 0.618;
        (x * 0.001).sin() + 0.5 * (x * 0.37).cos()
    })
}
