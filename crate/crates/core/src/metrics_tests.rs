use super::*;
use crate::detection::DetLosses;
use crate::gradcheck::{check, GradCheckOptions};
use crate::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn cube(h: usize, w: usize, b: usize, seed: u64) -> HsiCube<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    HsiCube::new(h, w, b, (0..h * w * b).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn map_cube(c: &HsiCube<f64>, f: impl Fn(usize, f64) -> f64) -> HsiCube<f64> {
    let data = c.data().iter().enumerate().map(|(i, &v)| f(i, v)).collect();
    HsiCube::new(c.height(), c.width(), c.bands(), data).unwrap()
}

#[test]
fn charbonnier_floor_and_limit() {
    let x = cube(4, 5, 3, 1);
    assert!((charbonnier(&x, &x, 1e-3).unwrap() - 1e-3).abs() < 1e-18);
    let y = cube(4, 5, 3, 2);
    let mae: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 60.0;
    assert!((charbonnier(&x, &y, 1e-9).unwrap() - mae).abs() < 1e-9);

    let mut tape = Tape::new();
    let a = tape.constant(x.to_tensor());
    let b = tape.constant(y.to_tensor());
    let v = tape.charbonnier(a, b, 1e-3).unwrap();
    assert!((tape.value(v).item().unwrap() - charbonnier(&x, &y, 1e-3).unwrap()).abs() < 1e-15);
}

#[test]
fn charbonnier_gradient() {
    let x = cube(3, 3, 2, 3).to_tensor();
    let y = cube(3, 3, 2, 4).to_tensor();
    let opts = GradCheckOptions { points: 18, floor: 1e-6, ..GradCheckOptions::default() };
    let r = check("charbonnier", &[x, y], &[0, 1], opts, |t, v| t.charbonnier(v[0], v[1], 1e-3)).unwrap();
    assert!(r.passes(1e-6), "{r:?}");
}

#[test]
fn total_loss_is_additive() {
    let mut tape = Tape::<f64>::new();
    let mut s = |v: f64| tape.constant(Tensor::scalar(v));
    let det = DetLosses { reg: s(0.3), cls: s(1.25), ctr: s(0.6) };
    let recon = s(0.07);
    for lambda in [0.0, 1.0, 5.0] {
        let (total, r) = total_loss(&mut tape, &det, recon, lambda).unwrap();
        let direct = 0.3 + 1.25 + 0.6 + lambda * 0.07;
        assert!((tape.value(total).item().unwrap() - direct).abs() < 1e-12);
        assert!((r.total - (r.reg + r.cls + r.ctr + r.lambda * r.recon)).abs() < 1e-6);
        assert_eq!(r.lambda, lambda);
    }
    let (total, _) = total_loss(&mut tape, &det, recon, 0.0).unwrap();
    assert!((tape.value(total).item().unwrap() - 2.15).abs() < 1e-12);
}

#[test]
fn identical_cubes_hit_the_ideal_values() {
    let x = cube(16, 12, 3, 5);
    assert_eq!(psnr(&x, &x, 1.0).unwrap(), PSNR_CAP);
    assert_eq!(ssim(&x, &x).unwrap(), 1.0);
    let s = sam(&x, &x).unwrap();
    assert!(s.degrees < 1e-12);
    assert_eq!(s.excluded, 0);
}

#[test]
fn constant_offset_gives_twenty_db() {
    let x = map_cube(&cube(8, 8, 4, 6), |_, v| v * 0.8);
    let y = map_cube(&x, |_, v| v + 0.1);
    assert!((psnr(&y, &x, 1.0).unwrap() - 20.0).abs() < 1e-9);
}

#[test]
fn psnr_averages_bands() {
    // band 0 off by 0.1 (20 dB), band 1 exact (capped)
    let x = cube(4, 4, 2, 7);
    let y = map_cube(&x, |i, v| if i % 2 == 0 { v + 0.1 } else { v });
    assert!((psnr(&y, &x, 1.0).unwrap() - 60.0).abs() < 1e-9);
}

#[test]
fn orthogonal_spectra_are_ninety_degrees() {
    let a = HsiCube::new(1, 1, 2, vec![1.0, 0.0]).unwrap();
    let b = HsiCube::new(1, 1, 2, vec![0.0, 1.0]).unwrap();
    assert!((sam(&a, &b).unwrap().degrees - 90.0).abs() < 1e-12);
    let z = HsiCube::new(1, 2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
    let w = HsiCube::new(1, 2, 2, vec![1.0, 0.0, 2.0, 2.0]).unwrap();
    let r = sam(&z, &w).unwrap();
    assert_eq!(r.excluded, 1);
    assert!(r.degrees.abs() < 1e-12);
}

/// Direct SSIM of two tiny images whose window covers the whole image.
#[test]
fn ssim_matches_single_window_formula() {
    let x = cube(11, 11, 1, 8);
    let y = cube(11, 11, 1, 9);
    let g = gaussian_window(11, 1.5);
    assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let wmean = |a: &[f64]| a.iter().zip(&g).map(|(v, w)| v * w).sum::<f64>();
    let (xs, ys) = (x.data(), y.data());
    let (mx, my) = (wmean(xs), wmean(ys));
    let vx = xs.iter().zip(&g).map(|(v, w)| w * (v - mx).powi(2)).sum::<f64>();
    let vy = ys.iter().zip(&g).map(|(v, w)| w * (v - my).powi(2)).sum::<f64>();
    let cov = xs.iter().zip(ys).zip(&g).map(|((a, b), w)| w * (a - mx) * (b - my)).sum::<f64>();
    let want = (2.0 * mx * my + 1e-4) * (2.0 * cov + 9e-4) / ((mx * mx + my * my + 1e-4) * (vx + vy + 9e-4));
    assert!((ssim(&x, &y).unwrap() - want).abs() < 1e-12);
}

#[test]
fn ssim_handles_small_images_and_rejects_mismatch() {
    let x = cube(4, 6, 2, 10);
    let y = cube(4, 6, 2, 11);
    let v = ssim(&x, &y).unwrap();
    assert!((-1.0..=1.0).contains(&v));
    assert!(ssim(&x, &cube(4, 6, 3, 1)).is_err());
    assert!(psnr(&x, &cube(6, 4, 2, 1), 1.0).is_err());
}

#[test]
fn psnr_falls_as_noise_grows() {
    for seed in 0..3 {
        let x = cube(16, 16, 4, 20 + seed);
        let mut last = f64::INFINITY;
        for sigma in [0.005, 0.01, 0.02, 0.05, 0.1] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = Normal::new(0.0, 1.0).unwrap();
            // a shared unit-noise draw scaled by sigma keeps the comparison monotone
            let draws: Vec<f64> = (0..x.data().len()).map(|_| n.sample(&mut rng)).collect();
            let noisy = map_cube(&x, |i, v| v + sigma * draws[i]);
            let p = psnr(&noisy, &x, 1.0).unwrap();
            assert!(p < last, "sigma {sigma}: {p} >= {last}");
            last = p;
        }
    }
}

#[test]
fn metric_rows_are_tab_separated() {
    let x = cube(12, 12, 2, 30);
    let row = MetricRow::compute("scene_0001", &x, &x).unwrap();
    assert_eq!(row.to_string(), "scene_0001\t100.0000\t1.00000\t0.0000");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sam_ignores_positive_pixel_scaling(seed in 0u64..1000) {
        let x = cube(3, 4, 5, seed);
        let y = cube(3, 4, 5, seed + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let scales: Vec<f64> = (0..12).map(|_| rng.gen_range(0.1..10.0)).collect();
        let xs = map_cube(&x, |i, v| v * scales[i / 5]);
        let a = sam(&x, &y).unwrap().degrees;
        let b = sam(&xs, &y).unwrap().degrees;
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn ssim_is_symmetric(seed in 0u64..1000) {
        let x = cube(12, 13, 2, seed);
        let y = cube(12, 13, 2, seed + 7);
        prop_assert_eq!(ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        prop_assert_eq!(ssim(&x, &x).unwrap(), 1.0);
    }
}
