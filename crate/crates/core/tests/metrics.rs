use chromabench::colorspace::{ColorImage, Space};
use chromabench::image_io::write_image;
use chromabench::losses::{FeatureExtractor, LpipsWeights};
use chromabench::metrics::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(w: usize, h: usize, seed: u64) -> ColorImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * w * h).map(|_| rng.gen::<f64>()).collect();
    ColorImage::new(Space::Rgb, w, h, data).unwrap()
}

fn random_psd(d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
    b.transpose() * b
}

fn stats1(mu: f64, var: f64) -> GaussianStats {
    GaussianStats { mu: DVector::from_element(1, mu), sigma: DMatrix::from_element(1, 1, var) }
}

#[test]
fn psnr_examples() {
    // max u = 1 and per-value error 0.1 everywhere: mse 0.01
    let u = [1.0, 0.5, 0.2, 0.0];
    let v: Vec<f64> = u.iter().map(|x| x + 0.1).collect();
    assert!((psnr(&u, &v).unwrap() - 20.0).abs() < 1e-9);
    let w: Vec<f64> = u.iter().map(|x| x - 1.0).collect();
    assert!(psnr(&u, &w).unwrap().abs() < 1e-12);
    let half: Vec<f64> = u.iter().map(|x| x + 0.05).collect();
    let gain = psnr(&u, &half).unwrap() - psnr(&u, &v).unwrap();
    assert!((gain - 10.0 * 4f64.log10()).abs() < 1e-9);
    assert!((gain - 6.0206).abs() < 1e-4);
}

#[test]
fn ssim_examples() {
    for seed in 0..5 {
        let u = random_image(8, 6, seed);
        assert_eq!(ssim(&u, &u, SsimMode::Global).unwrap(), 1.0);
        assert_eq!(ssim(&u, &u, SsimMode::Gaussian).unwrap(), 1.0);
    }
    let black = ColorImage::filled(Space::Rgb, 4, 4, [0.0; 3]).unwrap();
    let white = ColorImage::filled(Space::Rgb, 4, 4, [1.0; 3]).unwrap();
    let c1 = 0.01f64 * 0.01;
    let s = ssim(&black, &white, SsimMode::Global).unwrap();
    assert!((s - c1 / (1.0 + c1)).abs() < 1e-12, "{s}");
}

#[test]
fn ssim_is_bounded_on_random_pairs() {
    for seed in 0..100 {
        let u = random_image(6, 5, 2 * seed);
        let v = random_image(6, 5, 2 * seed + 1);
        for mode in [SsimMode::Global, SsimMode::Gaussian] {
            assert!(ssim(&u, &v, mode).unwrap().abs() <= 1.0);
        }
    }
}

#[test]
fn gaussian_stats_examples() {
    let same = vec![vec![1.0, 2.0, 3.0]; 4];
    let s = gaussian_stats(&same).unwrap();
    assert_eq!(s.sigma, DMatrix::zeros(3, 3));
    let s = gaussian_stats(&[vec![0.0], vec![2.0]]).unwrap();
    assert_eq!(s.mu[0], 1.0);
    assert_eq!(s.sigma[(0, 0)], 2.0);
    assert!(matches!(gaussian_stats(&[vec![1.0]]), Err(MetricError::TooFewSamples(1))));
}

#[test]
fn gaussian_stats_ignore_sample_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut feats: Vec<Vec<f64>> = (0..10).map(|_| (0..4).map(|_| rng.gen()).collect()).collect();
    let a = gaussian_stats(&feats).unwrap();
    feats.reverse();
    let b = gaussian_stats(&feats).unwrap();
    assert!((a.mu - b.mu).abs().max() < 1e-12);
    assert!((a.sigma - b.sigma).abs().max() < 1e-12);
}

#[test]
fn matrix_sqrt_examples() {
    let id = DMatrix::<f64>::identity(3, 3);
    assert!((matrix_sqrt_psd(&id).unwrap() - &id).abs().max() < 1e-12);
    let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
    let s = matrix_sqrt_psd(&d).unwrap();
    assert!((s - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))).abs().max() < 1e-12);
    for seed in 0..10 {
        let a = random_psd(6, seed);
        let s = matrix_sqrt_psd(&a).unwrap();
        assert!((&s * &s - &a).norm() / a.norm() < 1e-5);
    }
}

#[test]
fn matrix_sqrt_recovers_psd_root() {
    for seed in 0..10 {
        let s = random_psd(5, 100 + seed);
        let back = matrix_sqrt_psd(&(&s * &s)).unwrap();
        assert!((&back - &s).norm() / s.norm() < 1e-5);
    }
}

#[test]
fn frechet_one_dimensional_cases() {
    assert!(frechet_distance(&stats1(0.3, 2.0), &stats1(0.3, 2.0)).unwrap().abs() <= 1e-8);
    let unit = GaussianStats { mu: DVector::from_vec(vec![1.0, 0.0]), sigma: DMatrix::identity(2, 2) };
    let origin = GaussianStats { mu: DVector::zeros(2), sigma: DMatrix::identity(2, 2) };
    assert!((frechet_distance(&unit, &origin).unwrap() - 1.0).abs() <= 1e-8);
    assert!((frechet_distance(&stats1(0.0, 1.0), &stats1(0.0, 4.0)).unwrap() - 1.0).abs() <= 1e-8);
    assert!(frechet_distance(&stats1(0.0, 1.0), &origin).is_err());
}

#[test]
fn frechet_on_random_psd_pairs() {
    for seed in 0..10 {
        let r = GaussianStats { mu: DVector::from_fn(4, |i, _| i as f64 * 0.1), sigma: random_psd(4, seed) };
        let g = GaussianStats { mu: DVector::from_fn(4, |i, _| 0.2 - i as f64 * 0.05), sigma: random_psd(4, seed + 50) };
        let (a, b) = (frechet_distance(&r, &g).unwrap(), frechet_distance(&g, &r).unwrap());
        assert!((a - b).abs() < 1e-8 * a.max(1.0), "{a} vs {b}");
        assert!(a > 1e-8);
        assert!(frechet_distance(&r, &r).unwrap().abs() < 1e-8);
    }
}

fn write_set(dir: &std::path::Path, seeds: &[u64], names: &[&str]) {
    for (s, n) in seeds.iter().zip(names) {
        // quantize through the 8-bit file format
        write_image(&dir.join(format!("{n}.ppm")), &random_image(12, 10, *s)).unwrap();
    }
}

#[test]
fn evaluate_identical_dirs_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    write_set(dir.path(), &[1, 2, 3], &["a", "b", "c"]);
    let phi = FeatureExtractor::default();
    let w = LpipsWeights::for_extractor(&phi);
    let report = evaluate_dirs(dir.path(), dir.path(), &phi, &w, EvalOptions::default()).unwrap();
    assert_eq!(report.rows.len(), 3);
    for row in &report.rows {
        let m = row.result.as_ref().unwrap();
        assert_eq!((m.l1, m.l2, m.lpips, m.ssim), (0.0, 0.0, 0.0, 1.0));
        assert_eq!(m.psnr, f64::INFINITY);
    }
    assert_eq!(report.frechet, Some(0.0));
    let csv = report.to_csv();
    assert!(csv.starts_with("id,L1,L2,PSNR,SSIM,LPIPS\na,0,0,inf,1.00000000,0\n"), "{csv}");
    assert!(csv.ends_with("FID,0\n"));
}

#[test]
fn mismatched_row_is_flagged_and_excluded() {
    let truth = tempfile::tempdir().unwrap();
    let pred = tempfile::tempdir().unwrap();
    write_set(truth.path(), &[1, 2, 3], &["a", "b", "c"]);
    write_set(pred.path(), &[4, 5], &["a", "c"]);
    write_image(&pred.path().join("b.ppm"), &random_image(8, 8, 6)).unwrap();
    let phi = FeatureExtractor::default();
    let w = LpipsWeights::for_extractor(&phi);
    let report = evaluate_dirs(truth.path(), pred.path(), &phi, &w, EvalOptions::default()).unwrap();
    let ids: Vec<&str> = report.rows.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, ["a", "b", "c"]);
    assert!(report.rows[1].result.is_err());
    let agg = report.aggregate().unwrap();
    let (a, c) = (report.rows[0].result.as_ref().unwrap(), report.rows[2].result.as_ref().unwrap());
    assert!((agg.l1 - (a.l1 + c.l1) / 2.0).abs() < 1e-15);
    assert!(report.frechet.is_some());
    assert_eq!(report.flagged().count(), 1);
    // deterministic across runs
    let again = evaluate_dirs(truth.path(), pred.path(), &phi, &w, EvalOptions::default()).unwrap();
    assert_eq!(again.to_csv(), report.to_csv());
}

proptest! {
    #[test]
    fn psnr_decreases_with_mse(e1 in 1e-4f64..0.5, factor in 1.01f64..10.0) {
        let u = [1.0, 0.3, 0.6];
        let a: Vec<f64> = u.iter().map(|x| x + e1).collect();
        let b: Vec<f64> = u.iter().map(|x| x + e1 * factor).collect();
        prop_assert!(psnr(&u, &a).unwrap() > psnr(&u, &b).unwrap());
    }
}
