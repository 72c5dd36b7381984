//! Checks shared by the focused integration tests and the acceptance
//! target. Each check returns `Ok(summary)` or `Err(reason)`.
#![allow(dead_code)]

pub mod cli;
pub mod grad;
pub mod oracle;
pub mod roll;
pub mod stream;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use polarbev::Tensor;

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Uniform magnitude in `[lo, 1)` with a random sign.
pub fn away_from_zero(rng: &mut ChaCha8Rng, lo: f64) -> f64 {
    let m = rng.gen_range(lo..1.0);
    if rng.gen_bool(0.5) {
        m
    } else {
        -m
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Relative difference with a tiny floor so two vanishing values agree.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-10)
}

/// Prints one acceptance line and returns whether the check passed.
pub fn report(id: usize, name: &str, result: &Check) -> bool {
    match result {
        Ok(s) => println!("criterion {id} [{name}]: PASS ({s})"),
        Err(s) => println!("criterion {id} [{name}]: FAIL ({s})"),
    }
    result.is_ok()
}
