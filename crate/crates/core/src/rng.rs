//! Named random sub-streams derived from one root seed.
//!
//! Every consumer of randomness (environment generation, training, evaluation,
//! task perturbation) draws from its own ChaCha stream keyed by `(root, name,
//! index)`, so changing how one stage consumes randomness never perturbs the
//! others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed for the sub-stream `name[index]` of `root`.
pub fn substream_seed(root: u64, name: &str, index: u64) -> u64 {
    splitmix(splitmix(root ^ fnv1a(name)).wrapping_add(index))
}

pub fn substream(root: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(substream_seed(root, name, index))
}

pub fn from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Standard normal draw via Box-Muller; keeps the dependency surface to `rand`.
pub fn normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        if u1 > f64::MIN_POSITIVE {
            let u2: f64 = rng.gen();
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Uniformly distributed unit vector in `dim` dimensions.
pub fn unit_vector<R: rand::Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        let n = crate::linalg::norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}
