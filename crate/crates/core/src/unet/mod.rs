//! Five-stage convolutional encoder-decoder with skip fusion.
//!
//! Every stage of the encoder is a block of two (3x3 convolution, batch norm,
//! ReLU) layers followed by 2x2 max pooling. The decoder upsamples with 4x4
//! stride-2 transpose convolutions, concatenates the matching encoder feature
//! map and fuses it back to the decoder width with a 1x1 convolution. The
//! head is one more block at full resolution and a bare 3x3 convolution with
//! linear output.
//!
//! Block convolutions carry no bias: the batch-norm shift that follows
//! subsumes it.

mod checkpoint;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{BatchStats, BnMode, Graph, Real, Tensor, TensorError, Var};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Error)]
pub enum UNetError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("bad checkpoint: magic {found:?} is not CBCK")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("checkpoint shape table mismatch: {0}")]
    ShapeMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("cannot access {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, UNetError>;

/// Number of resolution stages; four poolings separate them.
pub const STAGES: usize = 5;
/// Input spatial sizes must be multiples of this.
pub const SIZE_MULTIPLE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub base_width: usize,
    pub stages: usize,
    pub input_channels: usize,
    pub out_channels: usize,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl UNetConfig {
    pub fn new(base_width: usize, out_channels: usize) -> Self {
        Self { base_width, stages: STAGES, input_channels: 3, out_channels, bn_momentum: 0.1, bn_epsilon: 1e-5 }
    }

    /// Full-size network: 64 channels in the first stage.
    pub fn full(out_channels: usize) -> Self {
        Self::new(64, out_channels)
    }

    /// Desk-scale network: 8 channels in the first stage.
    pub fn desk(out_channels: usize) -> Self {
        Self::new(8, out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(UNetError::Config("base_width must be >= 1".into()));
        }
        if self.stages != STAGES {
            return Err(UNetError::Config(format!("stages must be {STAGES}, got {}", self.stages)));
        }
        if self.input_channels != 3 {
            return Err(UNetError::Config(format!("input_channels must be 3, got {}", self.input_channels)));
        }
        if !matches!(self.out_channels, 2 | 3) {
            return Err(UNetError::Config(format!("out_channels must be 2 or 3, got {}", self.out_channels)));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(UNetError::Config(format!("bn_momentum must be in (0, 1], got {}", self.bn_momentum)));
        }
        if !(self.bn_epsilon > 0.0 && self.bn_epsilon.is_finite()) {
            return Err(UNetError::Config(format!("bn_epsilon must be positive, got {}", self.bn_epsilon)));
        }
        Ok(())
    }

    /// Channel widths of the five stages; the last stage keeps the fourth's width.
    pub fn widths(&self) -> [usize; STAGES] {
        let b = self.base_width;
        [b, 2 * b, 4 * b, 8 * b, 8 * b]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    BnScale,
    BnShift,
    BnRunningMean,
    BnRunningVar,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::BnRunningMean | ParamRole::BnRunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    /// He-normal fan-in for weights; unused otherwise.
    pub fan_in: usize,
}

/// One recorded step of the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layer {
    /// Two conv-BN-ReLU layers; `first` indexes the first layer's weight.
    Block { first: usize },
    Pool,
    Up { weight: usize },
    Fuse { weight: usize, skip: usize },
    Head { weight: usize },
    /// Keeps the current map as skip input `slot`.
    Save { slot: usize },
    Trace(&'static str),
}

struct Layout {
    params: Vec<ParamSpec>,
    program: Vec<Layer>,
}

fn layout(cfg: &UNetConfig) -> Layout {
    let [s1, s2, s3, s4, s5] = cfg.widths();
    let mut params = Vec::new();
    let mut program = Vec::new();
    fn add(params: &mut Vec<ParamSpec>, name: String, shape: Vec<usize>, role: ParamRole, fan_in: usize) -> usize {
        params.push(ParamSpec { name, shape, role, fan_in });
        params.len() - 1
    }
    fn block(params: &mut Vec<ParamSpec>, program: &mut Vec<Layer>, name: &str, ci: usize, co: usize) {
        let first = params.len();
        for (j, cin) in [(1, ci), (2, co)] {
            let p = format!("{name}.{j}");
            add(params, format!("{p}.weight"), vec![co, cin, 3, 3], ParamRole::ConvWeight, cin * 9);
            add(params, format!("{p}.bn.scale"), vec![co], ParamRole::BnScale, 0);
            add(params, format!("{p}.bn.shift"), vec![co], ParamRole::BnShift, 0);
            add(params, format!("{p}.bn.running_mean"), vec![co], ParamRole::BnRunningMean, 0);
            add(params, format!("{p}.bn.running_var"), vec![co], ParamRole::BnRunningVar, 0);
        }
        program.push(Layer::Block { first });
    }
    let encoder = [(3, s1), (s1, s2), (s2, s3), (s3, s4)];
    let pooled = ["conv1+pool", "conv2+pool", "conv3+pool", "conv4+pool"];
    for (i, ((ci, co), row)) in encoder.into_iter().zip(pooled).enumerate() {
        block(&mut params, &mut program, &format!("conv{}", i + 1), ci, co);
        program.push(Layer::Save { slot: i });
        program.push(Layer::Pool);
        program.push(Layer::Trace(row));
    }
    block(&mut params, &mut program, "conv5", s4, s5);
    // (upsampled width, skip width, next block output, next block name)
    let decoder = [
        (s5, s4, Some((s3, "conv6")), "conv5+up1"),
        (s3, s3, Some((s2, "conv7")), "conv6+up2"),
        (s2, s2, Some((s1, "conv8")), "conv7+up3"),
        (s1, s1, None, "conv8+up4"),
    ];
    for (i, (width, skip, next, row)) in decoder.into_iter().enumerate() {
        let n = i + 1;
        // transpose weights are [Cin, Cout, 4, 4]; each output sees Cin * 4 taps
        let weight = add(&mut params, format!("up{n}.weight"), vec![width, width, 4, 4], ParamRole::ConvWeight, width * 4);
        add(&mut params, format!("up{n}.bias"), vec![width], ParamRole::ConvBias, 0);
        program.push(Layer::Up { weight });
        program.push(Layer::Trace(row));
        let fw = add(
            &mut params,
            format!("fuse{n}.weight"),
            vec![width, width + skip, 1, 1],
            ParamRole::ConvWeight,
            width + skip,
        );
        add(&mut params, format!("fuse{n}.bias"), vec![width], ParamRole::ConvBias, 0);
        program.push(Layer::Fuse { weight: fw, skip: STAGES - 2 - i });
        program.push(Layer::Trace(["fuse1", "fuse2", "fuse3", "fuse4"][i]));
        match next {
            Some((co, name)) => block(&mut params, &mut program, name, width, co),
            None => {
                block(&mut params, &mut program, "conv9", width, s1);
                program.push(Layer::Trace("conv9"));
            }
        }
    }
    let weight = add(&mut params, "conv10.weight".into(), vec![cfg.out_channels, s1, 3, 3], ParamRole::ConvWeight, s1 * 9);
    add(&mut params, "conv10.bias".into(), vec![cfg.out_channels], ParamRole::ConvBias, 0);
    program.push(Layer::Head { weight });
    program.push(Layer::Trace("conv10"));
    Layout { params, program }
}

/// Parameter layout (names, shapes, roles) in checkpoint order.
pub fn parameter_specs(cfg: &UNetConfig) -> Vec<ParamSpec> {
    layout(cfg).params
}

/// Network weights, batch-norm buffers and free-form string labels.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetWeights {
    config: UNetConfig,
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor<f32>>,
    /// Carried through checkpoints verbatim.
    pub labels: BTreeMap<String, String>,
}

impl UNetWeights {
    /// He-normal convolution weights, zero biases, unit BN scale, zero BN shift.
    pub fn build(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let specs = parameter_specs(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = specs
            .iter()
            .map(|s| match s.role {
                ParamRole::ConvWeight => {
                    let normal = Normal::new(0.0, (2.0 / s.fan_in as f64).sqrt()).expect("positive std");
                    Tensor::from_fn(s.shape.clone(), |_| normal.sample(&mut rng) as f32)
                }
                ParamRole::BnScale | ParamRole::BnRunningVar => Tensor::full(s.shape.clone(), 1.0),
                ParamRole::ConvBias | ParamRole::BnShift | ParamRole::BnRunningMean => {
                    Tensor::zeros(s.shape.clone())
                }
            })
            .collect();
        Ok(Self { config, specs, tensors, labels: BTreeMap::new() })
    }

    /// Assembles weights from tensors in layout order, checking every shape.
    pub fn from_tensors(config: UNetConfig, tensors: Vec<Tensor<f32>>) -> Result<Self> {
        config.validate()?;
        let specs = parameter_specs(&config);
        if specs.len() != tensors.len() {
            return Err(UNetError::ShapeMismatch(format!(
                "configuration needs {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.shape != t.shape() {
                return Err(UNetError::ShapeMismatch(format!(
                    "{}: expected {:?}, got {:?}",
                    s.name,
                    s.shape,
                    t.shape()
                )));
            }
        }
        Ok(Self { config, specs, tensors, labels: BTreeMap::new() })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.index_of(name).map(|i| &mut self.tensors[i])
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Trainable tensors in layout order (the order optimizer state follows).
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        self.specs.iter().zip(self.tensors.iter_mut()).filter(|(s, _)| s.role.trainable()).map(|(_, t)| t).collect()
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.specs.iter().filter(|s| s.role.trainable()).map(|s| s.name.as_str())
    }

    /// Records every trainable tensor on `g`, as a parameter or as a constant.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> BoundWeights {
        let vars = self
            .specs
            .iter()
            .zip(&self.tensors)
            .map(|(s, t)| {
                s.role.trainable().then(|| {
                    let t = t.cast::<T>();
                    if trainable {
                        g.param(t)
                    } else {
                        g.constant(t)
                    }
                })
            })
            .collect();
        BoundWeights { vars }
    }

    /// Exponential running-stat update from one train-mode pass.
    ///
    /// `stats` is in batch-norm order, as returned by [`forward`].
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        let means: Vec<usize> =
            self.specs.iter().enumerate().filter(|(_, s)| s.role == ParamRole::BnRunningMean).map(|(i, _)| i).collect();
        if means.len() != stats.len() {
            return Err(UNetError::Config(format!(
                "{} batch-norm layers, {} statistics",
                means.len(),
                stats.len()
            )));
        }
        let m = self.config.bn_momentum;
        for (&i, st) in means.iter().zip(stats) {
            // the running variance follows its mean
            for (idx, batch) in [(i, &st.mean), (i + 1, &st.var)] {
                let buf = self.tensors[idx].data_mut();
                if buf.len() != batch.len() {
                    return Err(UNetError::Config(format!("{}: statistic length mismatch", self.specs[idx].name)));
                }
                for (r, &b) in buf.iter_mut().zip(batch) {
                    *r = ((1.0 - m) * f64::from(*r) + m * b) as f32;
                }
            }
        }
        Ok(())
    }

    /// Copies every encoder tensor (`conv1`..`conv5`, BN buffers included) from `donor`.
    ///
    /// Returns the number of tensors copied. Nothing is copied unless every shape matches.
    pub fn import_encoder(&mut self, donor: &UNetWeights) -> Result<usize> {
        let encoder = |name: &str| (1..=STAGES).any(|i| name.starts_with(&format!("conv{i}.")));
        let mut plan = Vec::new();
        for (i, s) in self.specs.iter().enumerate().filter(|(_, s)| encoder(&s.name)) {
            let src = donor
                .tensor(&s.name)
                .ok_or_else(|| UNetError::ShapeMismatch(format!("donor has no {}", s.name)))?;
            if src.shape() != s.shape {
                return Err(UNetError::ShapeMismatch(format!(
                    "{}: expected {:?}, donor has {:?}",
                    s.name,
                    s.shape,
                    src.shape()
                )));
            }
            plan.push((i, src.clone()));
        }
        let n = plan.len();
        for (i, t) in plan {
            self.tensors[i] = t;
        }
        Ok(n)
    }

    /// Eval-mode inference on a `[N, 3, H, W]` batch.
    pub fn infer(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let pass = forward(&mut g, self, &bound, xv, BnMode::Eval)?;
        Ok(g.value(pass.output).clone())
    }
}

/// Graph handles for the trainable tensors of one [`UNetWeights`].
#[derive(Debug, Clone)]
pub struct BoundWeights {
    vars: Vec<Option<Var>>,
}

impl BoundWeights {
    /// Handles of the trainable tensors, in layout order.
    pub fn trainable(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().flatten().copied()
    }

    fn get(&self, i: usize) -> Var {
        self.vars[i].expect("trainable tensor bound")
    }
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: Var,
    /// Named output shapes, one row per architecture stage.
    pub trace: Vec<(&'static str, Vec<usize>)>,
    /// Batch statistics of every batch norm, in layout order (train mode only).
    pub batch_stats: Vec<BatchStats>,
}

/// Runs the network on `x` (`[N, 3, H, W]`, H and W multiples of 16).
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    w: &UNetWeights,
    bound: &BoundWeights,
    x: Var,
    mode: BnMode,
) -> Result<ForwardPass> {
    let [_, c, h, wd] = g.value(x).dims4()?;
    if c != w.config.input_channels {
        return Err(TensorError::Dimension(format!(
            "network expects {} input channels, got {c}",
            w.config.input_channels
        ))
        .into());
    }
    if h % SIZE_MULTIPLE != 0 || wd % SIZE_MULTIPLE != 0 {
        return Err(TensorError::Dimension(format!(
            "input {h}x{wd} is not a multiple of {SIZE_MULTIPLE} in both dimensions"
        ))
        .into());
    }
    let eps = w.config.bn_epsilon;
    let buffer = |i: usize| -> Vec<T> { w.tensors[i].data().iter().map(|&v| T::from_f64(f64::from(v))).collect() };
    let mut cur = x;
    let mut skips = [None; STAGES - 1];
    let mut trace = vec![("input", g.value(x).shape().to_vec())];
    let mut batch_stats = Vec::new();
    for layer in layout(&w.config).program {
        cur = match layer {
            Layer::Block { first } => {
                for base in [first, first + 5] {
                    let y = g.conv2d(cur, bound.get(base), None, 1, 1)?;
                    let (rm, rv) = (buffer(base + 3), buffer(base + 4));
                    let (y, st) = g.batchnorm2d(y, bound.get(base + 1), bound.get(base + 2), &rm, &rv, mode, eps)?;
                    batch_stats.extend(st);
                    cur = g.relu(y);
                }
                cur
            }
            Layer::Pool => g.maxpool2d(cur, 2)?,
            Layer::Up { weight } => g.conv_transpose2d(cur, bound.get(weight), Some(bound.get(weight + 1)), 2)?,
            Layer::Fuse { weight, skip } => {
                let s = skips[skip].expect("skip saved before use");
                let cat = g.concat_channels(cur, s)?;
                g.conv2d(cat, bound.get(weight), Some(bound.get(weight + 1)), 1, 0)?
            }
            Layer::Head { weight } => g.conv2d(cur, bound.get(weight), Some(bound.get(weight + 1)), 1, 1)?,
            Layer::Save { slot } => {
                skips[slot] = Some(cur);
                cur
            }
            Layer::Trace(name) => {
                trace.push((name, g.value(cur).shape().to_vec()));
                cur
            }
        };
    }
    Ok(ForwardPass { output: cur, trace, batch_stats })
}
