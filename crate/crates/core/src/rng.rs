//! Seed derivation. Every random stream in a run is derived from one root
//! seed and a purpose tag, so adding a new consumer never shifts another's
//! draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type LabRng = ChaCha8Rng;

pub fn derive_seed(root: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(tag.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

pub fn stream(root: u64, tag: &str) -> LabRng {
    LabRng::seed_from_u64(derive_seed(root, tag))
}

/// Uniform draw in the open interval (0, 1).
pub fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return u;
        }
    }
}

/// Standard normal draw (Box-Muller, one branch).
pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1 = open_unit(rng);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_split_streams() {
        assert_eq!(derive_seed(7, "corpus"), derive_seed(7, "corpus"));
        assert_ne!(derive_seed(7, "corpus"), derive_seed(7, "init"));
        assert_ne!(derive_seed(7, "corpus"), derive_seed(8, "corpus"));
    }

    #[test]
    fn normal_moments() {
        let mut rng = stream(1, "normal");
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| std_normal(&mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }
}
