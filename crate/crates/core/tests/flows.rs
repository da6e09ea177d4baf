mod common;

use common::{normalization, numeric_log_det, worst_log_det_error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sfmeta::task_inference::*;

#[test]
fn log_det_matches_numeric_jacobian() {
    let worst = worst_log_det_error(1000, 1);
    assert!(worst < 1e-6, "worst log-det error {worst:e}");
}

#[test]
fn three_dim_single_layer_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let chain = FlowChain::random(3, 1, 1.0, &mut rng);
    let z = [0.3, -0.2, 1.1];
    let (_, ld) = chain.forward(&z).unwrap();
    assert!((ld - numeric_log_det(&chain, &z, 1e-6)).abs() < 1e-6);
}

#[test]
fn flowed_density_integrates_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let chain = FlowChain::random(2, 3, 0.7, &mut rng);
        let z = normalization(&chain, 100_000, &mut rng);
        assert!((z - 1.0).abs() < 0.02, "normalization {z}");
    }
}

#[test]
fn layers_invert_by_root_finding() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for trial in 0..1000 {
        let d = 2 + trial % 4;
        let chain = FlowChain::random(d, 1 + trial % 5, 1.5, &mut rng);
        let z0: Vec<f64> = (0..d).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let (zk, _) = chain.forward(&z0).unwrap();
        let back = chain.inverse(&zk);
        for (a, b) in back.iter().zip(&z0) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-8, "worst reconstruction error {worst:e}");
}

#[test]
fn constrained_direction_keeps_invertibility() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let layer = PlanarFlow::random(3, 3.0, &mut rng);
        let wu: f64 = layer
            .w
            .data()
            .iter()
            .zip(layer.u_hat())
            .map(|(w, u)| w * u)
            .sum();
        assert!(wu >= -1.0 - 1e-12);
    }
}

#[test]
fn sample_histogram_matches_change_of_variables() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let chain = FlowChain::random(2, 3, 0.8, &mut rng);
    let n = 100_000;
    let (lo, hi, bins) = (-4.0, 4.0, 50usize);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins * bins];
    for _ in 0..n {
        let z0 = [rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)];
        let (z, _) = chain.forward(&z0).unwrap();
        let (i, j) = (((z[0] - lo) / width).floor(), ((z[1] - lo) / width).floor());
        if (0.0..bins as f64).contains(&i) && (0.0..bins as f64).contains(&j) {
            counts[i as usize * bins + j as usize] += 1;
        }
    }
    // Bin mass from the analytic density with a 4x4 midpoint rule.
    let sub = 4;
    let mut tv = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let mut mass = 0.0;
            for a in 0..sub {
                for b in 0..sub {
                    let x = lo + (i as f64 + (a as f64 + 0.5) / sub as f64) * width;
                    let y = lo + (j as f64 + (b as f64 + 0.5) / sub as f64) * width;
                    let ld = chain.log_density_at(&[0.0, 0.0], &[0.0, 0.0], &[x, y]).unwrap();
                    mass += ld.exp();
                }
            }
            mass *= width * width / (sub * sub) as f64;
            tv += (mass - counts[i * bins + j] as f64 / n as f64).abs();
        }
    }
    let tv = 0.5 * tv;
    assert!(tv < 0.05, "total variation {tv}");
}

#[test]
fn identity_flow_kl_estimate_is_unbiased() {
    // Base equals prior: the single-sample estimate is zero in expectation.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let chain = FlowChain::new(vec![PlanarFlow::identity(2)]);
    let n = 10_000;
    let mut total = 0.0;
    for _ in 0..n {
        let z0 = [rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)];
        let (zk, _) = chain.forward(&z0).unwrap();
        let lq = chain.log_density(&[0.0, 0.0], &[0.0, 0.0], &z0).unwrap();
        total += lq - standard_normal_log_density(&zk);
    }
    assert!((total / n as f64).abs() < 0.02);
}

#[test]
fn longer_flows_fit_a_bimodal_target_no_worse() {
    let target = GaussianMixture::bimodal(3.0, 0.5);
    let cfg = FlowFitConfig::default();
    let fits: Vec<FlowFit> = [0, 1, 3, 5]
        .iter()
        .map(|&k| fit_flow(&target, k, &cfg, 7).unwrap())
        .collect();
    for pair in fits.windows(2) {
        assert!(pair[1].forward_kl <= pair[0].forward_kl, "{} then {}", pair[0].forward_kl, pair[1].forward_kl);
        assert!(pair[1].reverse_kl <= pair[0].reverse_kl);
    }
}

#[test]
fn a_gaussian_target_is_fitted_without_flows() {
    let target = GaussianMixture {
        means: vec![vec![1.0, -0.5]],
        std: 0.7,
    };
    let fit = fit_flow(&target, 0, &FlowFitConfig::default(), 3).unwrap();
    assert!(fit.reverse_kl.abs() < 1e-3, "{}", fit.reverse_kl);
    assert!((fit.mu[0] - 1.0).abs() < 0.05 && (fit.mu[1] + 0.5).abs() < 0.05, "{:?}", fit.mu);
}

#[test]
fn mixture_density_integrates_to_one() {
    let target = GaussianMixture::bimodal(3.0, 0.5);
    let h = 0.05;
    let mut total = 0.0;
    for i in 0..200 {
        for j in 0..120 {
            let z = [-5.0 + (i as f64 + 0.5) * h, -3.0 + (j as f64 + 0.5) * h];
            total += target.log_density(&z).exp() * h * h;
        }
    }
    assert!((total - 1.0).abs() < 1e-6, "{total}");
}
