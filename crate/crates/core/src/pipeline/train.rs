//! Optimizer steps and the checkpointed training loop.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::data::encode_resized;
use super::{
    objective, resize_to_min_side, scan_dataset, Batch, LossKind, Perceptual, PipelineError, Result, Strategy,
    TrainConfig,
};
use crate::colorspace::ColorImage;
use crate::image_io::{atomic_write, read_rgb};
use crate::tensor::{AdamState, BnMode, Graph, Tensor, TensorError};
use crate::unet::{forward, UNetWeights};

pub const LOSS_LOG_HEADER: &str = "step,loss,wall_ms";

/// Above this many images, resized originals are not kept in memory.
const RESIZE_CACHE_LIMIT: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// The L2 loss on raw (unnormalized) chrominance, for chrominance strategies.
    pub raw_loss: Option<f64>,
}

pub struct Trainer {
    cfg: TrainConfig,
    pub weights: UNetWeights,
    pub opt: AdamState<f32>,
    step: u64,
    perceptual: Perceptual,
}

impl Trainer {
    /// Fresh weights initialized from `cfg.seed`.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut weights = UNetWeights::build(cfg.network(), cfg.seed)?;
        cfg.strategy.label(&mut weights);
        Self::from_weights(cfg, weights)
    }

    pub fn from_weights(cfg: TrainConfig, mut weights: UNetWeights) -> Result<Self> {
        cfg.validate()?;
        if *weights.config() != cfg.network() {
            return Err(PipelineError::Config(format!(
                "weights built for {:?}, configuration needs {:?}",
                weights.config(),
                cfg.network()
            )));
        }
        cfg.strategy.label(&mut weights);
        let opt = AdamState::new(cfg.lr);
        Ok(Self { cfg, weights, opt, step: 0, perceptual: Perceptual::default() })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Completed optimizer steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One forward/backward pass and Adam update.
    ///
    /// On a non-finite loss or gradient nothing is modified.
    pub fn step(&mut self, batch: &Batch) -> Result<StepOutcome> {
        let step = self.step + 1;
        let mut g = Graph::<f32>::new();
        let bound = self.weights.bind(&mut g, true);
        let x = g.constant(batch.input.clone());
        let pass = forward(&mut g, &self.weights, &bound, x, BnMode::Train)?;
        let lum = g.constant(batch.lum.clone());
        let target = g.constant(batch.target.clone());
        let rgb = g.constant(batch.rgb.clone());
        let loss =
            objective(&mut g, self.cfg.strategy, self.cfg.loss, &self.perceptual, pass.output, lum, target, rgb)?;
        let value = f64::from(g.value(loss).item()?);
        if !value.is_finite() {
            return Err(PipelineError::NonFiniteLoss { step });
        }
        let raw_loss = self.raw_loss(g.value(pass.output), &batch.target);
        let vars: Vec<_> = bound.trainable().collect();
        let mut grads = g.backward(loss)?;
        let mut params = self.weights.trainable_mut();
        for (p, v) in params.iter_mut().zip(&vars) {
            let grad = grads.take(*v).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; p.numel()]);
            p.set_grad(grad)?;
        }
        let applied = self.opt.step(&mut params);
        for p in params.iter_mut() {
            p.clear_grad();
        }
        match applied {
            Ok(()) => {}
            Err(TensorError::NonFinite(_)) => return Err(PipelineError::NonFiniteLoss { step }),
            Err(e) => return Err(e.into()),
        }
        self.weights.update_running_stats(&pass.batch_stats)?;
        self.step = step;
        if let Some(raw) = raw_loss {
            log::debug!("step {step}: loss {value}, raw-scale chrominance loss {raw}");
        }
        Ok(StepOutcome { loss: value, raw_loss })
    }

    fn raw_loss(&self, out: &Tensor<f32>, target: &Tensor<f32>) -> Option<f64> {
        if self.cfg.loss != LossKind::L2 || self.cfg.strategy.rgb_loss() {
            return None;
        }
        let scale = self.cfg.strategy.chroma_scale()?;
        let [n, c, h, w] = out.dims4().ok()?;
        let plane = h * w;
        let mut total = 0.0;
        for (i, (a, b)) in out.data().iter().zip(target.data()).enumerate() {
            let s = scale[(i / plane) % c];
            total += (s * (f64::from(*a) - f64::from(*b))).powi(2);
        }
        debug_assert_eq!(out.numel(), n * c * plane);
        Some(total)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub wall_ms: u128,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub weights: UNetWeights,
    pub records: Vec<LossRecord>,
    pub final_checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

fn render_log(records: &[LossRecord]) -> String {
    let mut out = format!("{LOSS_LOG_HEADER}\n");
    for r in records {
        writeln!(out, "{},{},{}", r.step, r.loss, r.wall_ms).expect("string write");
    }
    out
}

/// The loss log with the wall-clock column removed.
pub fn wall_free_log(text: &str) -> String {
    text.lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head)).collect::<Vec<_>>().join("\n")
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    atomic_write(path, bytes).map_err(|source| PipelineError::Io { path: path.into(), source })
}

fn save(w: &UNetWeights, path: &Path) -> Result<()> {
    write(path, &w.to_bytes())
}

/// Trains from scratch per `cfg`, writing into `cfg.out_dir`:
/// `config.toml`, `loss.csv`, `step_NNNNNN.cbck` at the cadence and `final.cbck`.
///
/// A non-finite loss stops training; the last good weights go to `last_good.cbck`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = scan_dataset(&cfg.dataset, cfg.gray_tolerance)?;
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out).map_err(|source| PipelineError::Io { path: out.clone(), source })?;
    write(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    let side = cfg.crop_size;
    let load = |path: &Path| -> Result<ColorImage> { resize_to_min_side(&read_rgb(path)?, side) };
    let cache: Vec<ColorImage> = if dataset.len() <= RESIZE_CACHE_LIMIT {
        dataset.entries.iter().map(|(_, p)| load(p)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut trainer = Trainer::new(cfg.clone())?;
    let n = dataset.len() as u64;
    let b = cfg.batch_size as u64;
    let log_path = out.join("loss.csv");
    let mut records = Vec::with_capacity(cfg.steps as usize);
    let start = Instant::now();
    for t in 0..cfg.steps {
        let mut samples = Vec::with_capacity(cfg.batch_size);
        for k in 0..b {
            let c = t * b + k;
            let (index, epoch) = (c % n, c / n);
            let (id, path) = &dataset.entries[index as usize];
            let loaded;
            let img = match cache.get(index as usize) {
                Some(img) => img,
                None => {
                    loaded = load(path)?;
                    &loaded
                }
            };
            samples.push(encode_resized(img, id, cfg.strategy, side, cfg.seed, index, epoch)?);
        }
        let batch = Batch::new(&samples)?;
        let outcome = match trainer.step(&batch) {
            Ok(o) => o,
            Err(e @ PipelineError::NonFiniteLoss { .. }) => {
                log::error!("{e}");
                save(&trainer.weights, &out.join("last_good.cbck"))?;
                write(&log_path, render_log(&records).as_bytes())?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        records.push(LossRecord { step: t + 1, loss: outcome.loss, wall_ms: start.elapsed().as_millis() });
        let step = t + 1;
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps {
            save(&trainer.weights, &out.join(format!("step_{step:06}.cbck")))?;
            write(&log_path, render_log(&records).as_bytes())?;
        }
        if step == 1 || step % 100 == 0 {
            log::info!("step {step}/{}: loss {}", cfg.steps, outcome.loss);
        }
    }
    let final_checkpoint = out.join("final.cbck");
    save(&trainer.weights, &final_checkpoint)?;
    write(&log_path, render_log(&records).as_bytes())?;
    Ok(TrainOutcome { weights: trainer.weights, records, final_checkpoint, loss_log: log_path })
}

impl Strategy {
    /// L2 target channels of the strategy.
    pub fn target_channels(self) -> usize {
        if self.rgb_loss() {
            3
        } else {
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wall_column_is_stripped() {
        let recs = [LossRecord { step: 1, loss: 0.5, wall_ms: 12 }, LossRecord { step: 2, loss: 0.25, wall_ms: 30 }];
        let log = render_log(&recs);
        assert_eq!(log, "step,loss,wall_ms\n1,0.5,12\n2,0.25,30\n");
        assert_eq!(wall_free_log(&log), "step,loss\n1,0.5\n2,0.25");
    }
}
