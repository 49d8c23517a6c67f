//! Seeded measurement noise with one independent substream per agent, step
//! and quantity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::domain::AgentId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamKind {
    Generation,
    Demand,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Generator for one (agent, step, quantity) draw. Independent of the order
/// in which agents or steps are visited.
pub fn substream(seed: u64, agent: &AgentId, step_start: i64, kind: StreamKind) -> ChaCha8Rng {
    let kind = match kind {
        StreamKind::Generation => 1u64,
        StreamKind::Demand => 2u64,
    };
    let mut h = splitmix(seed);
    for part in [fnv1a(agent.as_str().as_bytes()), step_start as u64, kind] {
        h = splitmix(h ^ part);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// `max(0, forecast·(1 + ε))` with `ε ~ Normal(0, sigma_rel)`.
pub fn realize(forecast: f64, sigma_rel: f64, rng: &mut impl Rng) -> f64 {
    if sigma_rel <= 0.0 || forecast <= 0.0 {
        return forecast.max(0.0);
    }
    let eps = Normal::new(0.0, sigma_rel).expect("finite sigma").sample(rng);
    (forecast * (1.0 + eps)).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_and_zero_forecast() {
        let mut rng = substream(1, &"a".into(), 0, StreamKind::Generation);
        assert_eq!(realize(1.25, 0.0, &mut rng), 1.25);
        assert_eq!(realize(0.0, 0.5, &mut rng), 0.0);
    }

    #[test]
    fn deterministic_per_key() {
        let draw = |seed, agent: &str, t, k| realize(1.0, 0.2, &mut substream(seed, &agent.into(), t, k));
        assert_eq!(draw(42, "A", 30, StreamKind::Generation), draw(42, "A", 30, StreamKind::Generation));
        assert_ne!(draw(42, "A", 30, StreamKind::Generation), draw(42, "A", 35, StreamKind::Generation));
        assert_ne!(draw(42, "A", 30, StreamKind::Generation), draw(42, "B", 30, StreamKind::Generation));
        assert_ne!(draw(42, "A", 30, StreamKind::Generation), draw(42, "A", 30, StreamKind::Demand));
        assert_ne!(draw(42, "A", 30, StreamKind::Generation), draw(7, "A", 30, StreamKind::Generation));
    }

    #[test]
    fn never_negative() {
        for t in 0..500 {
            let mut rng = substream(3, &"x".into(), t * 5, StreamKind::Demand);
            assert!(realize(1.0, 2.0, &mut rng) >= 0.0);
        }
    }

    #[test]
    fn relative_spread_matches_sigma() {
        let n = 4000;
        let xs: Vec<f64> = (0..n).map(|t| realize(2.0, 0.1, &mut substream(9, &"s".into(), t * 5, StreamKind::Generation))).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!((mean - 2.0).abs() < 0.02, "{mean}");
        assert!((sd - 0.2).abs() < 0.02, "{sd}");
    }
}
