//! Fixed convolutional feature extractor and per-channel LPIPS weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LossError, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

pub const DEFAULT_EXTRACTOR_SEED: u64 = 1729;
pub const DEFAULT_EXTRACTOR_CHANNELS: [usize; 3] = [8, 16, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayer {
    /// `[Cout, Cin, k, k]`, never trained.
    pub weight: Tensor<f64>,
    pub stride: usize,
    pub pad: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    layers: Vec<FeatureLayer>,
    seed: Option<u64>,
}

impl FeatureExtractor {
    pub fn new(layers: Vec<FeatureLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(LossError::Extractor("at least one layer required".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            let out = pair[0].weight.shape()[0];
            let inp = pair[1].weight.shape()[1];
            if out != inp {
                return Err(LossError::Extractor(format!(
                    "layer {i} emits {out} channels but layer {} expects {inp}",
                    i + 1
                )));
            }
        }
        for layer in &layers {
            if layer.weight.shape().len() != 4 || layer.stride == 0 {
                return Err(LossError::Extractor("layer weights must be [Cout,Cin,k,k] with stride >= 1".into()));
            }
        }
        Ok(Self { layers, seed: None })
    }

    /// 3x3, stride 2, pad 1, ReLU layers with fan-in scaled normal weights.
    pub fn random(seed: u64, in_channels: usize, widths: &[usize]) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prev = in_channels;
        let mut layers = Vec::with_capacity(widths.len());
        for &width in widths {
            let fan_in = (prev * 9) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let weight = Tensor::from_fn(vec![width, prev, 3, 3], |_| normal.sample(&mut rng));
            layers.push(FeatureLayer { weight, stride: 2, pad: 1, activation: Activation::Relu });
            prev = width;
        }
        let mut ex = Self::new(layers)?;
        ex.seed = Some(seed);
        Ok(ex)
    }

    /// A single 1x1 identity layer over `channels` channels.
    pub fn identity(channels: usize) -> Self {
        let weight = Tensor::from_fn(vec![channels, channels, 1, 1], |i| {
            if i / channels == i % channels {
                1.0
            } else {
                0.0
            }
        });
        let layer = FeatureLayer { weight, stride: 1, pad: 0, activation: Activation::Identity };
        Self { layers: vec![layer], seed: None }
    }

    pub fn layers(&self) -> &[FeatureLayer] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn channels(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.weight.shape()[0]).collect()
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].weight.shape()[1]
    }

    /// Records every layer's output for a `[N, Cin, H, W]` input.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Vec<Var>> {
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            let w = g.constant(layer.weight.cast());
            h = g.conv2d(h, w, None, layer.stride, layer.pad)?;
            if layer.activation == Activation::Relu {
                h = g.relu(h);
            }
            outs.push(h);
        }
        Ok(outs)
    }

    /// One-line description for report metadata.
    pub fn describe(&self) -> String {
        let widths: Vec<String> = self.channels().iter().map(usize::to_string).collect();
        match self.seed {
            Some(s) => format!("random-conv seed={s} channels={}", widths.join("/")),
            None => format!("custom channels={}", widths.join("/")),
        }
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::random(DEFAULT_EXTRACTOR_SEED, 3, &DEFAULT_EXTRACTOR_CHANNELS).expect("valid default layers")
    }
}

/// Nonnegative per-channel weights, one vector per extractor layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LpipsWeights {
    layers: Vec<Vec<f64>>,
}

impl LpipsWeights {
    pub fn new(layers: Vec<Vec<f64>>) -> Result<Self> {
        if layers.iter().flatten().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(LossError::WeightMismatch("LPIPS weights must be finite and nonnegative".into()));
        }
        Ok(Self { layers })
    }

    pub fn ones(channels: &[usize]) -> Self {
        Self { layers: channels.iter().map(|&c| vec![1.0; c]).collect() }
    }

    pub fn for_extractor(phi: &FeatureExtractor) -> Self {
        Self::ones(&phi.channels())
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn check_channels(&self, channels: &[usize]) -> Result<()> {
        let have: Vec<usize> = self.layers.iter().map(Vec::len).collect();
        if have != channels {
            return Err(LossError::WeightMismatch(format!(
                "weights have lengths {have:?}, features have channels {channels:?}"
            )));
        }
        Ok(())
    }
}
