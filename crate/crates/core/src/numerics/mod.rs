//! Dense linear algebra, seeded randomness, Adam and gradient checking.

pub mod adam;
pub mod gradcheck;
pub mod matrix;

pub use adam::{adam_step, adam_step_slice, AdamHyper, AdamState, DEFAULT_LR};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport};
pub use matrix::{cosine, dot, l1_norm, l2_norm, matmul, matmul_nt, matmul_tn, Matrix, Real};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Rng64 = ChaCha8Rng;

/// SplitMix64 finalizer; spreads (seed, stream) pairs over the seed space.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent deterministic generator for `(seed, stream)`.
pub fn seeded_rng(seed: u64, stream: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, stream))
}

/// A point drawn uniformly from the unit sphere in `dim` dimensions.
pub fn unit_sphere<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = l2_norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}
