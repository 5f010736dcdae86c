//! Seed derivation and the few samplers the simulator needs beyond `rand_distr`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

/// Purpose tags so that each consumer of randomness owns an independent stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Fleet = 1,
    Losses = 2,
    Budget = 3,
    Selection = 4,
    Optimizer = 5,
    Scheduler = 6,
    Probing = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: Stream, index: u64) -> u64 {
    let a = splitmix64(master ^ 0x5EED_0000_0000_0000);
    let b = splitmix64(a ^ (stream as u64).wrapping_mul(0xA24B_AED4_963E_E407));
    splitmix64(b ^ index.wrapping_mul(0x9FB2_1C65_1E98_DF25))
}

pub fn stream_rng(master: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}

/// Natural log of a Gamma(shape, 1) draw.
///
/// Tiny shapes underflow a direct draw to zero, so shapes below one use
/// `G(a) = G(a + 1) * U^(1/a)` evaluated in log space.
fn ln_gamma_draw<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape >= 1.0 {
        let g = Gamma::new(shape, 1.0).expect("shape is positive").sample(rng);
        return g.max(f64::MIN_POSITIVE).ln();
    }
    let g = Gamma::new(shape + 1.0, 1.0)
        .expect("shape is positive")
        .sample(rng)
        .max(f64::MIN_POSITIVE);
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    g.ln() + u.ln() / shape
}

/// Draws from Dir(alpha). Components with `alpha == 0` stay exactly zero.
///
/// Panics if every component is zero or any is negative or non-finite.
pub fn dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    assert!(
        alpha.iter().all(|a| a.is_finite() && *a >= 0.0) && alpha.iter().any(|a| *a > 0.0),
        "Dirichlet concentrations must be finite, nonnegative and not all zero"
    );
    let logs: Vec<f64> = alpha
        .iter()
        .map(|&a| {
            if a > 0.0 {
                ln_gamma_draw(a, rng)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}

/// Splits `total` into integer parts proportional to `weights` (largest remainder,
/// ties to the lower index).
pub fn apportion(total: u64, weights: &[f64]) -> Vec<u64> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut parts: Vec<u64> = exact.iter().map(|e| e.floor() as u64).collect();
    let assigned: u64 = parts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned) as usize) {
        parts[i] += 1;
    }
    parts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_distinct_and_stable() {
        let a = derive_seed(7, Stream::Fleet, 0);
        assert_eq!(a, derive_seed(7, Stream::Fleet, 0));
        assert_ne!(a, derive_seed(7, Stream::Losses, 0));
        assert_ne!(a, derive_seed(7, Stream::Fleet, 1));
        assert_ne!(a, derive_seed(8, Stream::Fleet, 0));
    }

    #[test]
    fn dirichlet_is_on_the_simplex_even_for_tiny_concentration() {
        let mut rng = stream_rng(1, Stream::Fleet, 0);
        for &alpha in &[1e-3, 0.1, 1.0, 1e6] {
            let p = dirichlet(&[alpha; 10], &mut rng);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|x| *x >= 0.0 && x.is_finite()));
        }
    }

    #[test]
    fn dirichlet_keeps_zero_components_at_zero() {
        let mut rng = stream_rng(2, Stream::Probing, 0);
        let p = dirichlet(&[0.0, 2.0, 0.0, 3.0], &mut rng);
        assert_eq!(p[0], 0.0);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn apportion_preserves_total() {
        assert_eq!(apportion(10, &[0.25, 0.25, 0.5]), vec![3, 2, 5]);
        assert_eq!(apportion(7, &[1.0, 0.0, 1.0]).iter().sum::<u64>(), 7);
        assert_eq!(apportion(5, &[0.0, 0.0]), vec![0, 0]);
    }
}
