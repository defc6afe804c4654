//! Finite-difference verification of every differentiable operation.
//!
//! Each check compares the analytic gradient of a scalar built from small
//! random tensors with central differences. Fixtures containing kinks (ReLU,
//! absolute value, clipping, max-pool ties) are drawn until every recorded
//! value sits at least [`KINK_MARGIN`] away from a non-differentiable point.

use super::{objective, LossKind, Perceptual, Strategy};
use crate::colorspace::{convert_var, rgb_to_lab_px, rgb_to_xyz_px, rgb_to_yuv_px, Space, WhitePoint};
use crate::losses::{feature_loss, lpips, mae, mae_coupled, mse_mean, mse_sum, FeatureExtractor, LossError, LpipsWeights};
use crate::tensor::gradcheck::{
    check_gradients, random_away_from_zero, random_distinct, random_projection, random_uniform, GradCheck,
};
use crate::tensor::{BnMode, ClampGrad, Graph, Result, Tensor, TensorError, Var};

/// Minimum distance between a fixture's recorded values and any kink.
pub const KINK_MARGIN: f64 = 1e-2;
const FIXTURE_ATTEMPTS: u64 = 500;

pub const MODULES: [&str; 4] = ["tensor", "colorspace", "losses", "pipeline"];

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub module: &'static str,
    pub check: GradCheck,
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;
type Inputs = Box<dyn Fn(u64) -> Vec<Tensor<f64>>>;

fn loss_err(e: LossError) -> TensorError {
    match e {
        LossError::Tensor(t) => t,
        other => TensorError::Contract(other.to_string()),
    }
}

/// Draws fixtures from `inputs(seed)` until the graph clears [`KINK_MARGIN`].
fn qualified(name: &str, inputs: impl Fn(u64) -> Vec<Tensor<f64>>, build: &Build) -> Result<GradCheck> {
    let mut last = None;
    for seed in 0..FIXTURE_ATTEMPTS {
        let report = check_gradients(name, &inputs(seed), build)?;
        if report.kink_margin >= KINK_MARGIN {
            return Ok(report);
        }
        last = Some(report);
    }
    // report the closest fixture; its margin shows why it may fail
    Ok(last.expect("at least one attempt"))
}

fn tensor_checks() -> Result<Vec<GradCheck>> {
    let pair = |s: u64| vec![random_uniform(&[2, 3, 3, 4], -1.0, 1.0, 2 * s), random_uniform(&[2, 3, 3, 4], -1.0, 1.0, 2 * s + 1)];
    let away = |s: u64| vec![random_away_from_zero(&[2, 3, 3, 4], 0.05, 2 * s), random_away_from_zero(&[2, 3, 3, 4], 0.05, 2 * s + 1)];
    let conv = |s: u64| {
        vec![
            random_uniform(&[2, 2, 5, 5], -1.0, 1.0, 3 * s),
            random_uniform(&[3, 2, 3, 3], -0.5, 0.5, 3 * s + 1),
            random_uniform(&[3], -0.2, 0.2, 3 * s + 2),
        ]
    };
    let convt = |s: u64| {
        vec![
            random_uniform(&[1, 2, 3, 3], -1.0, 1.0, 3 * s),
            random_uniform(&[2, 3, 4, 4], -0.5, 0.5, 3 * s + 1),
            random_uniform(&[3], -0.2, 0.2, 3 * s + 2),
        ]
    };
    let bn = |s: u64| {
        vec![
            random_uniform(&[2, 3, 4, 4], -1.0, 1.0, 3 * s),
            random_uniform(&[3], 0.5, 1.5, 3 * s + 1),
            random_uniform(&[3], -0.5, 0.5, 3 * s + 2),
        ]
    };
    let unit = |s: u64| vec![random_uniform(&[2, 3, 3, 4], 0.05, 0.95, s)];
    let table: Vec<(&str, Inputs, Build)> = vec![
        ("conv2d", Box::new(conv), Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            random_projection(g, y, 1)
        })),
        ("conv2d_strided", Box::new(conv), Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            random_projection(g, y, 2)
        })),
        ("conv_transpose2d", Box::new(convt), Box::new(|g, v| {
            let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2)?;
            random_projection(g, y, 3)
        })),
        ("maxpool2d", Box::new(|s| vec![random_distinct(&[2, 3, 4, 6], 0.05, s)]), Box::new(|g, v| {
            let y = g.maxpool2d(v[0], 2)?;
            random_projection(g, y, 4)
        })),
        ("batchnorm2d_train", Box::new(bn), Box::new(|g, v| {
            let (y, _) = g.batchnorm2d(v[0], v[1], v[2], &[0.0; 3], &[1.0; 3], BnMode::Train, 1e-5)?;
            random_projection(g, y, 5)
        })),
        ("batchnorm2d_eval", Box::new(bn), Box::new(|g, v| {
            let (y, _) = g.batchnorm2d(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], BnMode::Eval, 1e-5)?;
            random_projection(g, y, 6)
        })),
        ("relu", Box::new(away), Box::new(|g, v| {
            let y = g.relu(v[0]);
            random_projection(g, y, 7)
        })),
        ("clamp01", Box::new(|s| vec![random_uniform(&[2, 3, 3, 4], -0.5, 1.5, s)]), Box::new(|g, v| {
            let y = g.clamp01(v[0], ClampGrad::Interior);
            random_projection(g, y, 8)
        })),
        ("concat_channels", Box::new(pair), Box::new(|g, v| {
            let y = g.concat_channels(v[0], v[1])?;
            random_projection(g, y, 9)
        })),
        ("add", Box::new(pair), Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            random_projection(g, y, 10)
        })),
        ("sub", Box::new(pair), Box::new(|g, v| {
            let y = g.sub(v[0], v[1])?;
            random_projection(g, y, 11)
        })),
        ("mul", Box::new(pair), Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            random_projection(g, y, 12)
        })),
        ("scale", Box::new(pair), Box::new(|g, v| {
            let y = g.scale(v[0], -1.75);
            random_projection(g, y, 13)
        })),
        ("channel_affine", Box::new(pair), Box::new(|g, v| {
            let y = g.channel_affine(v[0], &[2.0, -1.0, 0.5], &[0.1, 0.2, 0.3])?;
            random_projection(g, y, 14)
        })),
        ("sum", Box::new(pair), Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            Ok(g.sum(y))
        })),
        ("mean", Box::new(pair), Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            Ok(g.mean(y))
        })),
        ("sum_squares", Box::new(pair), Box::new(|g, v| Ok(g.sum_squares(v[0])))),
        ("abs", Box::new(away), Box::new(|g, v| {
            let y = g.abs(v[0]);
            random_projection(g, y, 15)
        })),
        ("pixel_norm", Box::new(away), Box::new(|g, v| {
            let y = g.pixel_norm(v[0])?;
            random_projection(g, y, 16)
        })),
        ("unit_normalize_channels", Box::new(away), Box::new(|g, v| {
            let y = g.unit_normalize_channels(v[0], 1e-10)?;
            random_projection(g, y, 17)
        })),
        ("global_avg_pool", Box::new(pair), Box::new(|g, v| {
            let y = g.global_avg_pool(v[0])?;
            random_projection(g, y, 18)
        })),
        ("pixel_map3", Box::new(unit), Box::new(move |g, v| {
            let y = convert_var(g, v[0], Space::Rgb, Space::Lab, &WhitePoint::default())
                .map_err(|e| TensorError::Contract(e.to_string()))?;
            random_projection(g, y, 19)
        })),
    ];
    table.iter().map(|(name, inputs, build)| qualified(name, inputs, build)).collect()
}

fn colorspace_checks() -> Result<Vec<GradCheck>> {
    let wp = WhitePoint::default();
    let pairs = [
        (Space::Rgb, Space::Yuv),
        (Space::Yuv, Space::Rgb),
        (Space::Rgb, Space::Xyz),
        (Space::Xyz, Space::Rgb),
        (Space::Rgb, Space::Lab),
        (Space::Lab, Space::Rgb),
        (Space::Xyz, Space::Lab),
        (Space::Lab, Space::Xyz),
    ];
    let mut out = Vec::new();
    for (from, to) in pairs {
        // in-gamut RGB points, expressed in the source space
        let inputs = move |s: u64| {
            let rgb = random_uniform(&[1, 3, 2, 3], 0.1, 0.9, 100 + s);
            let p = 6;
            let mut data = vec![0.0; 3 * p];
            for i in 0..p {
                let px = [rgb.data()[i], rgb.data()[p + i], rgb.data()[2 * p + i]];
                let v = match from {
                    Space::Rgb => px,
                    Space::Yuv => rgb_to_yuv_px(px),
                    Space::Xyz => rgb_to_xyz_px(px),
                    _ => rgb_to_lab_px(px, &wp),
                };
                for c in 0..3 {
                    data[c * p + i] = v[c];
                }
            }
            vec![Tensor::new(vec![1, 3, 2, 3], data).expect("finite")]
        };
        let build: Build = Box::new(move |g, v| {
            let y = convert_var(g, v[0], from, to, &wp).map_err(|e| TensorError::Contract(e.to_string()))?;
            random_projection(g, y, 20)
        });
        out.push(qualified(&format!("convert {from}->{to}"), inputs, &build)?);
    }
    Ok(out)
}

fn loss_checks() -> Result<Vec<GradCheck>> {
    let phi = FeatureExtractor::default();
    let w = LpipsWeights::for_extractor(&phi);
    let inputs = |s: u64| vec![random_uniform(&[1, 3, 4, 4], 0.0, 1.0, 3 * s), random_uniform(&[1, 3, 4, 4], 0.0, 1.0, 3 * s + 1)];
    let mut table: Vec<(String, Build)> = vec![
        ("mse_sum".into(), Box::new(|g, v| mse_sum(g, v[0], v[1]).map_err(loss_err))),
        ("mse_mean".into(), Box::new(|g, v| mse_mean(g, v[0], v[1]).map_err(loss_err))),
        ("mae".into(), Box::new(|g, v| mae(g, v[0], v[1]).map_err(loss_err))),
        ("mae_coupled".into(), Box::new(|g, v| mae_coupled(g, v[0], v[1]).map_err(loss_err))),
    ];
    for layer in 0..phi.layer_count() {
        let phi = phi.clone();
        table.push((
            format!("feature_loss layer {layer}"),
            Box::new(move |g, v| feature_loss(g, v[0], v[1], &phi, layer).map_err(loss_err)),
        ));
    }
    table.push(("lpips".into(), Box::new(move |g, v| lpips(g, v[0], v[1], &phi, &w).map_err(loss_err))));
    table.iter().map(|(name, build)| qualified(name, inputs, build)).collect()
}

/// Gradient of one strategy's loss with respect to the network output on a 4x4 image.
pub fn objective_check(strategy: Strategy, loss: LossKind, seed: u64) -> Result<GradCheck> {
    let perceptual = Perceptual::default();
    let c = strategy.out_channels();
    let inputs = move |s: u64| {
        let s = seed + s;
        let out = if strategy == Strategy::Rgb {
            random_uniform(&[1, 3, 4, 4], 0.0, 1.0, 4 * s)
        } else {
            random_uniform(&[1, c, 4, 4], -0.3, 0.3, 4 * s)
        };
        vec![out]
    };
    let constants = move |s: u64| {
        let s = seed + s;
        let lum = random_uniform(&[1, 1, 4, 4], 0.3, 0.8, 4 * s + 1);
        let target = random_uniform(&[1, strategy.target_channels(), 4, 4], -0.5, 0.5, 4 * s + 2);
        let rgb = random_uniform(&[1, 3, 4, 4], 0.0, 1.0, 4 * s + 3);
        (lum, target, rgb)
    };
    let name = format!("objective {strategy} {loss}");
    let mut last = None;
    for s in 0..FIXTURE_ATTEMPTS {
        let (lum, target, rgb) = constants(s);
        let p = perceptual.clone();
        let build = move |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
            let l = g.constant(lum.clone());
            let t = g.constant(target.clone());
            let r = g.constant(rgb.clone());
            objective(g, strategy, loss, &p, v[0], l, t, r).map_err(|e| TensorError::Contract(e.to_string()))
        };
        let report = check_gradients(&name, &inputs(s), build)?;
        if report.kink_margin >= KINK_MARGIN {
            return Ok(report);
        }
        last = Some(report);
    }
    Ok(last.expect("at least one attempt"))
}

fn pipeline_checks() -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for strategy in Strategy::ALL {
        for loss in [LossKind::L2, LossKind::Lpips] {
            out.push(objective_check(strategy, loss, 0)?);
        }
    }
    Ok(out)
}

/// Runs the checks of one module, or of all modules when `module` is `None`.
pub fn gradcheck_suite(module: Option<&str>) -> Result<Vec<SuiteEntry>> {
    let selected: Vec<&'static str> = match module {
        None => MODULES.to_vec(),
        Some(m) => {
            let found = MODULES
                .iter()
                .find(|x| **x == m)
                .ok_or_else(|| TensorError::Config(format!("unknown module {m:?} (one of {})", MODULES.join(", "))))?;
            vec![*found]
        }
    };
    let mut out = Vec::new();
    for m in selected {
        let checks = match m {
            "tensor" => tensor_checks()?,
            "colorspace" => colorspace_checks()?,
            "losses" => loss_checks()?,
            _ => pipeline_checks()?,
        };
        out.extend(checks.into_iter().map(|check| SuiteEntry { module: m, check }));
    }
    Ok(out)
}
