//! Closed forms and oracles for the scalar statistics: KL, ELBO weighting,
//! reparameterized sampling, Welford, conformal p-values, martingale, CUSUM.

use bvae_ood::bvae::{elbo_loss, kl_normal, kl_per_latent, reparameterize};
use bvae_ood::monitor::{cusum_step, icp_pvalue, log_martingale};
use bvae_ood::{LatentStats, WelfordState};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn kl_oracle(mu: f64, log_var: f64) -> f64 {
    let var = log_var.exp();
    0.5 * (mu * mu + var - var.ln() - 1.0)
}

/// `∫₀¹ ε^W · exp((ε−1)·Σ ln p) dε` by the midpoint rule, accumulated in log space.
fn martingale_oracle(window: &[f64], steps: usize) -> f64 {
    let w = window.len() as f64;
    let s: f64 = window.iter().map(|p| p.ln()).sum();
    let h = 1.0 / steps as f64;
    let logs: Vec<f64> = (0..steps)
        .map(|i| {
            let e = (i as f64 + 0.5) * h;
            w * e.ln() + (e - 1.0) * s
        })
        .collect();
    let peak = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    peak + logs.iter().map(|l| (l - peak).exp()).sum::<f64>().ln() + h.ln()
}

#[test]
fn kl_fixed_points() {
    assert_eq!(kl_normal(0.0, 0.0), 0.0);
    assert_eq!(kl_normal(1.0, 0.0), 0.5);
    assert_eq!(kl_normal(-1.0, 0.0), 0.5);
}

#[test]
fn reparameterized_moments() {
    let stats = LatentStats::new(vec![1.5, -0.5], vec![0.0, (0.25f64).ln()]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 100_000;
    let mut sums = [[0.0; 2]; 2];
    for _ in 0..n {
        let noise: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z = reparameterize(&stats, &noise).unwrap();
        for j in 0..2 {
            sums[j][0] += z[j];
            sums[j][1] += z[j] * z[j];
        }
    }
    let expected = [(1.5, 1.0), (-0.5, 0.25)];
    for j in 0..2 {
        let mean = sums[j][0] / n as f64;
        let var = sums[j][1] / n as f64 - mean * mean;
        // ~5 standard errors at 1e5 draws
        assert!((mean - expected[j].0).abs() < 0.02, "latent {j} mean {mean}");
        assert!(
            (var - expected[j].1).abs() < 0.03 * expected[j].1.max(0.5),
            "latent {j} var {var}"
        );
    }
}

#[test]
fn all_ones_window_has_closed_form() {
    for w in [1usize, 5, 20, 50] {
        let got = log_martingale(&vec![1.0; w]).unwrap();
        assert!((got + ((w + 1) as f64).ln()).abs() < 1e-6, "W={w}: {got}");
    }
}

#[test]
fn pvalue_extremes() {
    let scores = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(icp_pvalue(&scores, 100.0), 0.2);
    assert_eq!(icp_pvalue(&scores, -100.0), 1.0);
    // ties count as at least as nonconforming
    assert_eq!(icp_pvalue(&scores, 3.0), 0.6);
}

proptest! {
    #[test]
    fn kl_matches_oracle_and_is_nonnegative(mu in -20.0f64..20.0, log_var in -10.0f64..10.0) {
        let got = kl_per_latent(&LatentStats::new(vec![mu], vec![log_var]).unwrap())[0];
        let want = kl_oracle(mu, log_var);
        prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
        prop_assert!(got >= -1e-12);
    }

    #[test]
    fn elbo_kl_term_is_the_latent_sum(
        mus in prop::collection::vec(-3.0f64..3.0, 1..6),
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lvs: Vec<f64> = mus.iter().map(|_| rng.random_range(-3.0..3.0)).collect();
        let stats = LatentStats::new(mus, lvs).unwrap();
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..=1.0)).collect();
        let recon: Vec<f64> = (0..8).map(|_| rng.random_range(0.05..0.95)).collect();
        let terms = elbo_loss(&x, &recon, &stats, 1.0).unwrap();
        prop_assert_eq!(terms.kl, kl_per_latent(&stats).iter().sum::<f64>());
    }

    #[test]
    fn kl_weight_grows_with_beta(b1 in 0.0f64..8.0, b2 in 0.0f64..8.0, mu in -2.0f64..2.0, lv in -2.0f64..2.0) {
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        let stats = LatentStats::new(vec![mu, 0.3], vec![lv, -0.2]).unwrap();
        let x = [0.0, 1.0, 0.5, 0.25];
        let recon = [0.1, 0.8, 0.4, 0.3];
        let a = elbo_loss(&x, &recon, &stats, lo).unwrap();
        let b = elbo_loss(&x, &recon, &stats, hi).unwrap();
        prop_assert_eq!(a.recon, b.recon);
        prop_assert!(b.total - b.recon >= a.total - a.recon);
    }

    #[test]
    fn welford_matches_two_pass_in_any_order(
        xs in prop::collection::vec(-1e3f64..1e3, 2..200),
        offset in -1e6f64..1e6,
        seed: u64,
    ) {
        let data: Vec<f64> = xs.iter().map(|x| x + offset).collect();
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let two_pass = data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let run = |d: &[f64]| {
            let mut s = WelfordState::new(1);
            for &x in d {
                s.update(&[x]).unwrap();
            }
            s.variance().unwrap()[0]
        };
        let single = run(&data);
        let tol = 1e-9 * two_pass.max(1e-6);
        prop_assert!((single - two_pass).abs() <= tol, "{} vs {}", single, two_pass);
        let mut shuffled = data.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!((run(&shuffled) - single).abs() <= tol);
    }

    #[test]
    fn pvalues_stay_in_range(
        mut scores in prop::collection::vec(-50.0f64..50.0, 1..100),
        alpha in -100.0f64..100.0,
    ) {
        scores.sort_by(f64::total_cmp);
        let p = icp_pvalue(&scores, alpha);
        prop_assert!(p >= 1.0 / (scores.len() + 1) as f64);
        prop_assert!(p <= 1.0);
    }

    #[test]
    fn cusum_is_nonnegative_and_climbs_above_drift(
        xs in prop::collection::vec(-50.0f64..50.0, 1..100),
        omega in 0.1f64..20.0,
    ) {
        let mut s = 0.0;
        for &x in &xs {
            let next = cusum_step(s, x, omega);
            prop_assert!(next >= 0.0);
            if x > omega {
                prop_assert!(next >= s);
            }
            s = next;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn martingale_matches_fine_quadrature(ps in prop::collection::vec(1e-3f64..=1.0, 1..25)) {
        let got = log_martingale(&ps).unwrap();
        let want = martingale_oracle(&ps, 200_000);
        prop_assert!((got - want).abs() < 1e-6, "{} vs {}", got, want);
    }
}
