//! Fixtures shared by the benchmarks.

use rshift::pointsim::sim_poisson;
use rshift::rng::rng_from_seed;
use rshift::{PointPattern, Window};

pub fn unit_square() -> Window {
    Window::new(0.0, 0.0, 1.0, 1.0).expect("valid window")
}

/// Two independent Poisson patterns of the given intensity on the unit square.
pub fn poisson_pair(intensity: f64, seed: u64) -> (PointPattern, PointPattern) {
    let w = unit_square();
    let mut rng = rng_from_seed(seed);
    let a = sim_poisson(intensity, &w, &mut rng).expect("positive intensity");
    let b = sim_poisson(intensity, &w, &mut rng).expect("positive intensity");
    (a, b)
}

/// `n` curves of length `k` with a mild trend in the index.
pub fn synthetic_curves(n: usize, k: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            (0..k)
                .map(|j| ((i * 7919 + j * 104_729) % 1000) as f64 / 1000.0 + j as f64 * 0.01)
                .collect()
        })
        .collect()
}
