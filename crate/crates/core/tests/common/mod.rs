//! Shared helpers for the integration suites: independent oracles and
//! random-object generators. The oracles are deliberately separate from
//! the library code paths they check.

use framecal_core::{BlochParams, DensityMatrix, Matrix4c};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Closed-form spectrum of a Bell-diagonal parameter set (a = b = 0,
/// c = diag(c1, c2, c3)), obtained by diagonalizing in the Bell basis:
/// the four Bell vectors are eigenvectors with these eigenvalues.
pub fn bell_diagonal_spectrum(c: [f64; 3]) -> [f64; 4] {
    let [c1, c2, c3] = c;
    let mut eigs = [
        (1.0 - c1 - c2 - c3) / 4.0,
        (1.0 - c1 + c2 + c3) / 4.0,
        (1.0 + c1 - c2 + c3) / 4.0,
        (1.0 + c1 + c2 - c3) / 4.0,
    ];
    eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eigs
}

/// Random normalized two-qubit state vector (Gaussian amplitudes).
pub fn random_pure_vector(rng: &mut ChaCha8Rng) -> [Complex64; 4] {
    let mut v = [Complex64::new(0.0, 0.0); 4];
    loop {
        let mut norm_sq = 0.0;
        for entry in v.iter_mut() {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *entry = Complex64::new(re, im);
            norm_sq += entry.norm_sqr();
        }
        if norm_sq > 1e-12 {
            let scale = 1.0 / norm_sq.sqrt();
            for entry in v.iter_mut() {
                *entry *= scale;
            }
            return v;
        }
    }
}

/// Random valid state: a random pure state mixed with white noise,
/// ρ = w·|ψ⟩⟨ψ| + (1−w)·I/4 with w uniform. Spans separable and
/// entangled states.
pub fn random_valid_state(rng: &mut ChaCha8Rng) -> BlochParams {
    let v = random_pure_vector(rng);
    let w: f64 = rng.gen();
    let pure = Matrix4c::outer(&v);
    let mixed = pure.scale(w).add(&Matrix4c::identity().scale((1.0 - w) / 4.0));
    DensityMatrix::from_entries(mixed)
        .expect("mixture is Hermitian with unit trace")
        .to_bloch()
        .expect("valid state has bounded Bloch entries")
}

/// Random proper rotation (det = +1) from a random unit quaternion.
pub fn random_proper_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let mut q = [0.0f64; 4];
    loop {
        let mut norm_sq = 0.0;
        for entry in q.iter_mut() {
            *entry = rng.sample(StandardNormal);
            norm_sq += *entry * *entry;
        }
        if norm_sq > 1e-12 {
            let scale = 1.0 / norm_sq.sqrt();
            for entry in q.iter_mut() {
                *entry *= scale;
            }
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}
