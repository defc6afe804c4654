//! End-to-end acceptance criteria, one verdict line each.
//!
//! Run with `cargo test -p chromabench-core --test acceptance`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use chromabench::colorspace::{
    convert_px, gray_to_lightness, jacobian, rgb_to_lab_px, rgb_to_yuv_px, ColorImage, Space, WhitePoint, LAB_S0,
    LAB_T0,
};
use chromabench::image_io::read_image;
use chromabench::losses::{FeatureExtractor, LpipsWeights};
use chromabench::metrics::{
    evaluate_dirs, frechet_distance, psnr, ssim, EvalOptions, GaussianStats, SsimMode,
};
use chromabench::pipeline::verify::{gradcheck_suite, objective_check};
use chromabench::pipeline::{colorize, train, wall_free_log, LossKind, Preset, Strategy, TrainConfig, TrainOutcome};
use chromabench::tensor::gradcheck::random_uniform;
use chromabench::tensor::{BnMode, Graph};
use chromabench::unet::{forward, UNetConfig, UNetWeights};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn random_colors(n: usize, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()
}

fn round_trips() -> Verdict {
    let start = Instant::now();
    let wp = WhitePoint::default();
    let (mut yuv, mut lab) = (0.0f64, 0.0f64);
    for p in random_colors(10_000, 1) {
        for (space, worst) in [(Space::Yuv, &mut yuv), (Space::Lab, &mut lab)] {
            let q = convert_px(Space::Rgb, space, p, &wp).unwrap();
            let back = convert_px(space, Space::Rgb, q, &wp).unwrap();
            for c in 0..3 {
                *worst = worst.max((back[c] - p[c]).abs());
            }
        }
    }
    let t = start.elapsed();
    verdict(
        yuv < 1e-5 && lab < 1e-4 && within(t, 1.0),
        format!("rgb-yuv-rgb {yuv:.2e} (< 1e-5), rgb-lab-rgb {lab:.2e} (< 1e-4), {t:.2?} (< 1 s)"),
    )
}

fn anchors() -> Verdict {
    let wp = WhitePoint::default();
    let white = rgb_to_lab_px([1.0; 3], &wp);
    let black = rgb_to_lab_px([0.0; 3], &wp);
    let blue = rgb_to_yuv_px([0.0, 0.0, 1.0]);
    let dist = |a: [f64; 3], b: [f64; 3]| (0..3).map(|c| (a[c] - b[c]).abs()).fold(0.0, f64::max);
    let blue32 = blue.map(|v| v as f32);
    let expect32 = [0.114f32, 0.436, -0.10001];
    let ok = dist(white, [100.0, 0.0, 0.0]) < 1e-3 && dist(black, [0.0; 3]) < 1e-3 && blue32 == expect32;
    verdict(ok, format!("white {white:.6?}, black {black:.6?}, blue yuv {blue32:?} (expect {expect32:?} as f32)"))
}

/// Central-difference Jacobian of a pixel conversion.
fn numeric_jacobian(from: Space, to: Space, p: [f64; 3], wp: &WhitePoint) -> [[f64; 3]; 3] {
    let h = 1e-6 * p.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut j = [[0.0; 3]; 3];
    for k in 0..3 {
        let (mut a, mut b) = (p, p);
        a[k] += h;
        b[k] -= h;
        let (fa, fb) = (convert_px(from, to, a, wp).unwrap(), convert_px(from, to, b, wp).unwrap());
        for r in 0..3 {
            j[r][k] = (fa[r] - fb[r]) / (2.0 * h);
        }
    }
    j
}

/// Keeps Lab's piecewise branch away from the FD stencil.
fn clear_of_threshold(rgb: [f64; 3], wp: &WhitePoint) -> bool {
    let xyz = convert_px(Space::Rgb, Space::Xyz, rgb, wp).unwrap();
    let t = [xyz[0] / wp.as_array()[0], xyz[1] / wp.as_array()[1], xyz[2] / wp.as_array()[2]];
    t.iter().all(|v| (v - LAB_T0).abs() > 1e-3 && (v.cbrt() - LAB_S0).abs() > 1e-3)
}

fn jacobians() -> Verdict {
    let start = Instant::now();
    let wp = WhitePoint::default();
    let mut worst = 0.0f64;
    let points: Vec<[f64; 3]> = random_colors(1000, 2)
        .into_iter()
        .map(|p| p.map(|v| 0.02 + 0.96 * v))
        .filter(|p| clear_of_threshold(*p, &wp))
        .take(100)
        .collect();
    for rgb in &points {
        for space in [Space::Yuv, Space::Lab] {
            let q = convert_px(Space::Rgb, space, *rgb, &wp).unwrap();
            for (from, to, p) in [(Space::Rgb, space, *rgb), (space, Space::Rgb, q)] {
                let a = jacobian(from, to, p, &wp).unwrap();
                let n = numeric_jacobian(from, to, p, &wp);
                let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
                for r in 0..3 {
                    for c in 0..3 {
                        worst = worst.max((a[r][c] - n[r][c]).abs() / scale);
                    }
                }
            }
        }
    }
    let t = start.elapsed();
    verdict(
        points.len() == 100 && worst < 1e-4 && within(t, 5.0),
        format!("{} points, max relative error {worst:.2e} (< 1e-4), {t:.2?} (< 5 s)", points.len()),
    )
}

fn autodiff() -> Verdict {
    let start = Instant::now();
    let entries = gradcheck_suite(None).unwrap();
    let failed: Vec<String> =
        entries.iter().filter(|e| !e.check.passed()).map(|e| format!("{}/{}", e.module, e.check.name)).collect();
    let worst = entries.iter().map(|e| e.check.max_rel_error).fold(0.0, f64::max);
    let t = start.elapsed();
    verdict(
        failed.is_empty() && within(t, 60.0),
        format!("{} checks, max relative error {worst:.2e} (< 1e-3), failed {failed:?}, {t:.2?} (< 60 s)", entries.len()),
    )
}

fn architecture() -> Verdict {
    let start = Instant::now();
    let table = [
        ("conv1+pool", 64, 128),
        ("conv2+pool", 128, 64),
        ("conv3+pool", 256, 32),
        ("conv4+pool", 512, 16),
        ("conv5+up1", 512, 32),
        ("fuse1", 512, 32),
        ("conv6+up2", 256, 64),
        ("fuse2", 256, 64),
        ("conv7+up3", 128, 128),
        ("fuse3", 128, 128),
        ("conv8+up4", 64, 256),
        ("fuse4", 64, 256),
        ("conv9", 64, 256),
        ("conv10", 2, 256),
    ];
    let mut mismatches = Vec::new();
    let full = UNetWeights::build(UNetConfig::full(2), 0).unwrap();
    let mut g = Graph::<f32>::new();
    let bound = full.bind(&mut g, false);
    let x = g.constant(random_uniform(&[1, 3, 256, 256], 0.0, 1.0, 3).cast());
    let pass = forward(&mut g, &full, &bound, x, BnMode::Eval).unwrap();
    for (row, c, s) in table {
        let found = pass.trace.iter().find(|(n, _)| *n == row).map(|(_, shape)| shape.clone());
        if found.as_deref() != Some(&[1, c, s, s][..]) {
            mismatches.push(format!("{row}: {found:?}"));
        }
    }
    let desk = UNetWeights::build(UNetConfig::desk(2), 0).unwrap();
    let out = desk.infer(&random_uniform(&[1, 3, 64, 64], 0.0, 1.0, 4).cast()).unwrap();
    let t = start.elapsed();
    verdict(
        mismatches.is_empty() && out.shape() == [1, 2, 64, 64] && within(t, 30.0),
        format!(
            "{} rows at 256x256 (mismatches {mismatches:?}), desk output {:?}, {t:.2?} (< 30 s)",
            table.len(),
            out.shape()
        ),
    )
}

fn labrgb_gradient() -> Verdict {
    let start = Instant::now();
    let check = objective_check(Strategy::LabRgb, LossKind::L2, 0).unwrap();
    let t = start.elapsed();
    verdict(
        check.passed() && within(t, 10.0),
        format!("{} elements, max relative error {:.2e} (< 1e-3), {t:.2?} (< 10 s)", check.checked, check.max_rel_error),
    )
}

fn desk_config(strategy: Strategy, out: &Path) -> TrainConfig {
    TrainConfig {
        strategy,
        dataset: fixtures().join("color"),
        out_dir: out.to_path_buf(),
        ..TrainConfig::preset(Preset::Desk)
    }
}

struct DeskRun {
    strategy: Strategy,
    outcome: TrainOutcome,
    elapsed: Duration,
}

fn desk_training(root: &Path) -> (Verdict, Vec<DeskRun>) {
    let mut runs = Vec::new();
    let mut lines = Vec::new();
    let mut ok = true;
    for strategy in Strategy::ALL {
        let start = Instant::now();
        let outcome = match train(&desk_config(strategy, &root.join(strategy.name()))) {
            Ok(o) => o,
            Err(e) => {
                ok = false;
                lines.push(format!("{strategy} failed: {e}"));
                continue;
            }
        };
        let elapsed = start.elapsed();
        let (first, last) = (outcome.records[0].loss, outcome.records.last().unwrap().loss);
        let ratio = last / first;
        ok &= outcome.records.len() == 2000 && ratio < 0.1 && within(elapsed, 600.0);
        lines.push(format!("{strategy} {ratio:.4} in {:.0} s", elapsed.as_secs_f64()));
        runs.push(DeskRun { strategy, outcome, elapsed });
    }
    (verdict(ok, format!("final/step-1 loss after 2000 steps (< 0.1, < 600 s each): {}", lines.join(", "))), runs)
}

fn determinism(root: &Path, runs: &[DeskRun]) -> Verdict {
    let Some(first) = runs.iter().find(|r| r.strategy == Strategy::Lab) else {
        return verdict(false, "no completed lab run to compare".into());
    };
    let cfg = desk_config(Strategy::Lab, &root.join("lab-repeat"));
    debug_assert_eq!(cfg.strategy, TrainConfig::preset(Preset::Desk).strategy);
    let second = match train(&cfg) {
        Ok(o) => o,
        Err(e) => return verdict(false, format!("second run failed: {e}")),
    };
    let read = |p: &Path| std::fs::read(p).unwrap();
    let text = |p: &Path| wall_free_log(&String::from_utf8(read(p)).unwrap());
    let same_log = text(&first.outcome.loss_log) == text(&second.loss_log);
    let same_ckpt = read(&first.outcome.final_checkpoint) == read(&second.final_checkpoint);
    let cadence: Vec<String> = (1..4).map(|k| format!("step_{:06}.cbck", 500 * k)).collect();
    let same_cadence = cadence.iter().all(|name| {
        read(&first.outcome.final_checkpoint.with_file_name(name)) == read(&second.final_checkpoint.with_file_name(name))
    });
    verdict(
        same_log && same_ckpt && same_cadence,
        format!(
            "loss logs identical: {same_log}, final checkpoints identical: {same_ckpt}, \
             intermediate checkpoints identical: {same_cadence} (first run {:.0} s)",
            first.elapsed.as_secs_f64()
        ),
    )
}

fn metric_identities() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let u: Vec<f64> = (0..3 * 24 * 20).map(|_| rng.gen()).collect();
    let img = ColorImage::new(Space::Rgb, 24, 20, u.clone()).unwrap();
    let s_global = ssim(&img, &img, SsimMode::Global).unwrap();
    let s_gauss = ssim(&img, &img, SsimMode::Gaussian).unwrap();
    let v: Vec<f64> = u.iter().map(|x| (x + 0.1).min(1.0)).collect();
    let half: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + (b - a) / 2.0).collect();
    let gain = psnr(&u, &half).unwrap() - psnr(&u, &v).unwrap();
    let stats = |mu: &[f64], sigma: &[f64], d: usize| GaussianStats {
        mu: DVector::from_column_slice(mu),
        sigma: DMatrix::from_column_slice(d, d, sigma),
    };
    let f_same = frechet_distance(&stats(&[0.3], &[2.0], 1), &stats(&[0.3], &[2.0], 1)).unwrap();
    let eye = [1.0, 0.0, 0.0, 1.0];
    let f_shift = frechet_distance(&stats(&[0.0, 0.0], &eye, 2), &stats(&[1.0, 0.0], &eye, 2)).unwrap();
    let f_scale = frechet_distance(&stats(&[0.0], &[1.0], 1), &stats(&[0.0], &[4.0], 1)).unwrap();
    let phi = FeatureExtractor::default();
    let report = evaluate_dirs(
        &fixtures().join("color"),
        &fixtures().join("color"),
        &phi,
        &LpipsWeights::for_extractor(&phi),
        EvalOptions::default(),
    )
    .unwrap();
    let perfect = report.rows.len() == 8
        && report.frechet.is_some_and(|f| f.abs() < 1e-8)
        && report.rows.iter().all(|r| {
            r.result.as_ref().is_ok_and(|m| {
                m.l1 == 0.0 && m.l2 == 0.0 && m.lpips == 0.0 && m.ssim == 1.0 && m.psnr == f64::INFINITY
            })
        });
    let t = start.elapsed();
    let ok = s_global == 1.0
        && s_gauss == 1.0
        && (gain - 10.0 * 4f64.log10()).abs() < 1e-9
        && f_same.abs() < 1e-8
        && (f_shift - 1.0).abs() < 1e-8
        && (f_scale - 1.0).abs() < 1e-8
        && perfect
        && within(t, 10.0);
    verdict(
        ok,
        format!(
            "ssim(u,u) {s_global}/{s_gauss}, psnr gain {gain:.6} dB, frechet {f_same:.1e}/{f_shift}/{f_scale}, \
             self-evaluation perfect: {perfect}, {t:.2?} (< 10 s)"
        ),
    )
}

fn luminance_preservation(runs: &[DeskRun]) -> Verdict {
    let grays: Vec<ColorImage> = (0..5).map(|i| read_image(&fixtures().join(format!("gray/gray{i}.pgm"))).unwrap()).collect();
    let wp = WhitePoint::default();
    let mut lines = Vec::new();
    let mut ok = true;
    let chroma: Vec<&DeskRun> = runs.iter().filter(|r| r.strategy != Strategy::Rgb).collect();
    for run in &chroma {
        let mut worst = 0.0f64;
        for gray in &grays {
            let out = colorize(&run.outcome.weights, run.strategy, gray).unwrap();
            for i in 0..gray.pixel_count() {
                let g = gray.data()[i];
                let p = out.unclipped.pixel(i);
                let err = match run.strategy.chroma_space() {
                    Some(Space::Lab) => (rgb_to_lab_px(p, &wp)[0] - gray_to_lightness(g)).abs(),
                    _ => (rgb_to_yuv_px(p)[0] - g).abs(),
                };
                worst = worst.max(err);
            }
        }
        ok &= worst < 1e-4;
        lines.push(format!("{} {worst:.2e}", run.strategy));
    }
    ok &= chroma.len() == 3;
    verdict(ok, format!("max |L(pre-clip) - input L| on 5 images (< 1e-4): {}", lines.join(", ")))
}

fn main() -> ExitCode {
    let root = tempfile::tempdir().unwrap();
    let mut verdicts = vec![round_trips(), anchors(), jacobians(), autodiff(), architecture(), labrgb_gradient()];
    let (training, runs) = desk_training(root.path());
    verdicts.push(training);
    verdicts.push(metric_identities());
    verdicts.push(determinism(root.path(), &runs));
    verdicts.push(luminance_preservation(&runs));
    let names = [
        "color round trips",
        "conversion anchors",
        "conversion jacobians",
        "autodiff suite",
        "architecture contract",
        "labrgb differentiability",
        "desk-scale training",
        "metric identities",
        "determinism",
        "luminance preservation",
    ];
    for (i, (name, v)) in names.iter().zip(&verdicts).enumerate() {
        println!("criterion {:>2} {} {name}: {}", i + 1, if v.passed { "PASS" } else { "FAIL" }, v.detail);
    }
    let failed = verdicts.iter().filter(|v| !v.passed).count();
    println!("acceptance: {} of {} criteria passed", verdicts.len() - failed, verdicts.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
