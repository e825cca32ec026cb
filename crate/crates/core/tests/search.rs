use bvae_ood::hpo::expected_improvement;
use bvae_ood::{search, SearchConfig, SearchMode, SearchSpace};
use proptest::prelude::*;

fn bo(budget: usize, early_stop: usize, seed: u64) -> SearchConfig {
    SearchConfig {
        mode: SearchMode::Bo,
        budget,
        init: 5,
        early_stop,
        seed,
        record_wall_time: false,
    }
}

fn grid() -> SearchConfig {
    SearchConfig {
        mode: SearchMode::Grid,
        ..Default::default()
    }
}

/// Concave bowl centred at grid indices `(ci, cj)` with axis weights.
fn bowl(
    space: &SearchSpace,
    ci: usize,
    cj: usize,
    wn: f64,
    wb: f64,
) -> impl Fn(usize, f64) -> bvae_ood::Result<f64> + '_ {
    move |n, beta| {
        let i = space.n_candidates().iter().position(|&c| c == n).unwrap() as f64;
        let j = space.beta_candidates().iter().position(|&c| c == beta).unwrap() as f64;
        Ok(-(wn * (i - ci as f64).powi(2) + wb * (j - cj as f64).powi(2)))
    }
}

fn seven_by_seven() -> SearchSpace {
    SearchSpace::new(vec![2, 4, 8, 16, 24, 32, 64], vec![0.25, 0.5, 1.0, 1.5, 2.0, 4.0, 8.0]).unwrap()
}

/// The budget alone bounds the run here; early stopping is exercised below.
#[test]
fn bo_finds_unimodal_optimum_at_half_budget() {
    let space = seven_by_seven();
    for (ci, cj, wn, wb) in [(3, 3, 1.0, 1.0), (1, 5, 1.0, 3.0), (5, 2, 4.0, 1.0), (0, 6, 1.0, 1.0)] {
        let f = bowl(&space, ci, cj, wn, wb);
        let truth = search(&space, &grid(), &f).unwrap();
        let hits = (0..100)
            .filter(|&seed| {
                let out = search(&space, &bo(space.len() / 2, 0, seed), &f).unwrap();
                (out.best_n, out.best_beta) == (truth.best_n, truth.best_beta)
            })
            .count();
        assert!(hits >= 95, "optimum at ({ci}, {cj}): {hits}/100");
    }
}

#[test]
fn bo_with_early_stop_beats_grid_on_six_by_six() {
    let space = SearchSpace::new(vec![5, 10, 20, 30, 40, 50], vec![0.5, 1.0, 1.4, 2.0, 3.0, 4.0]).unwrap();
    let f = |n: usize, beta: f64| Ok(-((n as f64 - 30.0).powi(2) + 100.0 * (beta - 1.4f64).powi(2)));
    let truth = search(&space, &grid(), f).unwrap();
    assert_eq!((truth.best_n, truth.best_beta), (30, 1.4));
    let hits = (0..100)
        .filter(|&seed| {
            let out = search(&space, &bo(20, 3, seed), f).unwrap();
            (out.best_n, out.best_beta) == (30, 1.4) && out.explored.len() < truth.explored.len()
        })
        .count();
    assert!(hits >= 95, "{hits}/100");
}

#[test]
fn every_mode_is_reproducible() {
    let space = seven_by_seven();
    let f = bowl(&space, 2, 4, 1.0, 1.0);
    for mode in [SearchMode::Bo, SearchMode::Grid, SearchMode::Random] {
        let config = SearchConfig {
            mode,
            budget: 12,
            seed: 4,
            record_wall_time: false,
            ..Default::default()
        };
        let a = search(&space, &config, &f).unwrap();
        let b = search(&space, &config, &f).unwrap();
        assert_eq!(a.explored, b.explored, "{mode:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ei_is_nonnegative(mean in -1e3f64..1e3, std in 0.0f64..1e2, best in -1e3f64..1e3) {
        prop_assert!(expected_improvement(mean, std, best) >= 0.0);
    }

    #[test]
    fn grid_returns_brute_force_argmax(values in prop::collection::vec(-100.0f64..100.0, 25)) {
        let space = SearchSpace::new(vec![1, 2, 3, 4, 5], vec![0.5, 1.0, 1.5, 2.0, 2.5]).unwrap();
        let f = |n: usize, b: f64| Ok(values[(n - 1) * 5 + ((b / 0.5) as usize - 1)]);
        let out = search(&space, &grid(), f).unwrap();
        let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(out.best_mig, best);
        prop_assert_eq!(out.explored.len(), 25);
    }

    #[test]
    fn bo_never_revisits(values in prop::collection::vec(-100.0f64..100.0, 25), seed: u64, budget in 6usize..=25) {
        let space = SearchSpace::new(vec![1, 2, 3, 4, 5], vec![0.5, 1.0, 1.5, 2.0, 2.5]).unwrap();
        let f = |n: usize, b: f64| Ok(values[(n - 1) * 5 + ((b / 0.5) as usize - 1)]);
        let out = search(&space, &bo(budget, 3, seed), f).unwrap();
        let mut seen: Vec<(usize, u64)> = out.explored.trials().iter().map(|t| (t.n, t.beta.to_bits())).collect();
        let len = seen.len();
        prop_assert!(len <= budget);
        seen.sort();
        seen.dedup();
        prop_assert_eq!(seen.len(), len);
    }
}
