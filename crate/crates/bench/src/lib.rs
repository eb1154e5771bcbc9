//! Fixtures shared by the benchmarks.

use adaptcat_core::bank::{generate_bank, BankSpec, ItemBank};
use adaptcat_core::simlab::simulate_examinee_response;
use adaptcat_core::{Model, Response};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn bank(model: Model, n_items: usize) -> ItemBank {
    generate_bank(&BankSpec::new(model, n_items, 17)).expect("fixture bank")
}

/// Simulated answers from an examinee at `theta` to the first `n` items.
pub fn answers(bank: &ItemBank, n: usize, theta: f64) -> Vec<Response> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    bank.items
        .iter()
        .take(n)
        .map(|it| simulate_examinee_response(it, theta, &mut rng))
        .collect()
}
