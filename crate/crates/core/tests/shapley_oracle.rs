mod common;

use common::{random_positions, shapley_oracle};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use strata_core::coop::{form_coalition, shapley_allocate, CoalitionGame, VppPosition};
use strata_core::domain::{Layer, MarketSlot, VppId};

fn slot() -> MarketSlot {
    MarketSlot::new(Layer::L3, 40).unwrap()
}

fn positions(d: &[f64], s: &[f64]) -> Vec<VppPosition> {
    (0..d.len())
        .map(|i| {
            let id = VppId::new(format!("v{i}"));
            if d[i] > 0.0 {
                VppPosition::deficit(id, slot(), d[i])
            } else {
                VppPosition::surplus(id, slot(), s[i])
            }
        })
        .collect()
}

fn ids(n: usize) -> Vec<VppId> {
    (0..n).map(|i| VppId::new(format!("v{i}"))).collect()
}

/// Random monotone game: v(S) is a sum of nonnegative per-player weights
/// plus pairwise synergies.
fn monotone_game(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    use rand::Rng;
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0..20) as f64 / 4.0).collect();
    let syn: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.gen_range(0..8) as f64 / 4.0).collect()).collect();
    (0..1usize << n)
        .map(|m| {
            let mut v = 0.0;
            for i in 0..n {
                if m >> i & 1 == 1 {
                    v += w[i];
                    for j in i + 1..n {
                        if m >> j & 1 == 1 {
                            v += syn[i][j];
                        }
                    }
                }
            }
            v
        })
        .collect()
}

#[test]
fn worked_three_player_example() {
    let game = form_coalition(&positions(&[2.0, 0.0, 0.0], &[0.0, 1.0, 1.0]), 1.0).unwrap().unwrap();
    let phi = shapley_allocate(&game).unwrap().phi;
    let got: Vec<f64> = ids(3).iter().map(|v| phi[v]).collect();
    assert_eq!(got, vec![1.0, 0.5, 0.5]);
}

#[test]
fn subset_formula_matches_orderings_up_to_six() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for n in 2..=6 {
        for _ in 0..40 {
            let (d, s) = random_positions(&mut rng, n);
            let Some(game) = form_coalition(&positions(&d, &s), 0.36).unwrap() else { continue };
            let phi = shapley_allocate(&game).unwrap().phi;
            // players without a position never enter the game
            let oracle = shapley_oracle(&d, &s, 0.36);
            for (i, id) in ids(n).iter().enumerate() {
                let got = phi.get(id).copied().unwrap_or(0.0);
                assert!((got - oracle[i]).abs() <= 1e-12, "n={n} {id}: {got} vs {}", oracle[i]);
            }
        }
    }
}

#[test]
fn symmetric_players_share_equally() {
    let game = form_coalition(&positions(&[1.5, 1.5, 0.0], &[0.0, 0.0, 2.0]), 0.5).unwrap().unwrap();
    let phi = shapley_allocate(&game).unwrap().phi;
    assert!((phi[&VppId::from("v0")] - phi[&VppId::from("v1")]).abs() <= 1e-12);
}

#[test]
fn dummy_gets_nothing_on_random_games() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in 2..=6 {
        let mut values = monotone_game(&mut rng, n);
        // make the last player a null player
        let last = 1usize << (n - 1);
        for m in 0..1usize << n {
            if m & last != 0 {
                values[m] = values[m & !last];
            }
        }
        let game = CoalitionGame::from_values(ids(n), values).unwrap();
        let phi = shapley_allocate(&game).unwrap().phi;
        assert!(phi[&ids(n)[n - 1]].abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn additivity(seed in any::<u64>(), n in 2usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = monotone_game(&mut rng, n);
        let b = monotone_game(&mut rng, n);
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let phi = |v: Vec<f64>| shapley_allocate(&CoalitionGame::from_values(ids(n), v).unwrap()).unwrap().phi;
        let (pa, pb, ps) = (phi(a), phi(b), phi(sum));
        for id in ids(n) {
            prop_assert!((pa[&id] + pb[&id] - ps[&id]).abs() <= 1e-9);
        }
    }

    #[test]
    fn efficient_and_individually_rational(seed in any::<u64>(), n in 2usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, s) = random_positions(&mut rng, n);
        if let Some(game) = form_coalition(&positions(&d, &s), 1.0).unwrap() {
            let alloc = shapley_allocate(&game).unwrap();
            prop_assert!((alloc.total() - game.grand_value()).abs() <= 1e-9);
            // singletons are worth zero, so nobody is allocated less
            for x in alloc.phi.values() {
                prop_assert!(*x >= -1e-12);
            }
        }
    }
}
