//! Network A and Network B, declared as layer lists and materialized into
//! [`NetworkModel`]s.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::{Activation, ConvBlock, DecayGroup, Dropout, FullyConnected, Layer, MaxPool, MfmProbe, Param, ParamRef, Pass};
use crate::rng::Rng;
use crate::tensor::{Scalar, Shape, Tensor};

/// Side of the square grayscale crop the networks consume.
pub const INPUT_SIZE: usize = 128;
/// Width of the fc1 face representation.
pub const EMBEDDING_DIM: usize = 256;
/// Identities in the training corpus the classifier is sized for by default.
pub const DEFAULT_CLASSES: usize = 10_575;
pub const DEFAULT_DROPOUT: f64 = 0.7;
/// Standard deviation of the Gaussian used for fully-connected weights.
pub const FC_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArchName {
    A,
    B,
}

impl fmt::Display for ArchName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchName::A => "A",
            ArchName::B => "B",
        })
    }
}

impl FromStr for ArchName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(ArchName::A),
            "B" | "b" => Ok(ArchName::B),
            other => Err(Error::invalid("architecture", format!("unknown architecture {other:?} (expected A or B)"))),
        }
    }
}

/// Architecture choice plus the overrides that may be applied to it.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub arch: ArchName,
    pub num_classes: usize,
    /// Multiplier on every convolution's channel count (1.0 = full size).
    pub width: f64,
    /// Put an activation after the 1×1 layers of network B.
    pub nin_mfm: bool,
    /// Activation of the main convolution blocks. `Relu` is the comparison
    /// variant; `Mfm` is the default.
    pub activation: Activation,
}

impl ArchConfig {
    pub fn new(arch: ArchName) -> Self {
        Self {
            arch,
            num_classes: DEFAULT_CLASSES,
            width: 1.0,
            nin_mfm: false,
            activation: Activation::Mfm,
        }
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn with_width(mut self, width: f64) -> Self {
        self.width = width;
        self
    }

    fn channels(&self, full: usize) -> usize {
        ((full as f64 * self.width).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        name: String,
        kernel: usize,
        stride: usize,
        pad: usize,
        out_channels: usize,
        activation: Activation,
    },
    Pool {
        name: String,
        kernel: usize,
        stride: usize,
    },
    Fc {
        name: String,
        outputs: usize,
        lr_mult: f64,
        decay: DecayGroup,
    },
    Dropout {
        name: String,
        ratio: f64,
    },
}

/// Declarative layer list for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub config: ArchConfig,
    /// Per-item input extents `(1, C, H, W)`.
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

fn conv(name: &str, kernel: usize, pad: usize, out_channels: usize, activation: Activation) -> LayerSpec {
    LayerSpec::Conv {
        name: name.to_string(),
        kernel,
        stride: 1,
        pad,
        out_channels,
        activation,
    }
}

fn pool(name: &str) -> LayerSpec {
    LayerSpec::Pool {
        name: name.to_string(),
        kernel: 2,
        stride: 2,
    }
}

fn head(config: &ArchConfig) -> [LayerSpec; 3] {
    [
        LayerSpec::Fc {
            name: "fc1".into(),
            outputs: EMBEDDING_DIM,
            lr_mult: 1.0,
            decay: DecayGroup::Standard,
        },
        LayerSpec::Dropout {
            name: "drop1".into(),
            ratio: DEFAULT_DROPOUT,
        },
        LayerSpec::Fc {
            name: "fc2".into(),
            outputs: config.num_classes,
            lr_mult: 1.0,
            decay: DecayGroup::Classifier,
        },
    ]
}

impl ArchSpec {
    pub fn from_config(config: ArchConfig) -> Result<Self> {
        if config.num_classes == 0 {
            return Err(Error::invalid("architecture", "class count must be positive"));
        }
        if !(config.width.is_finite() && config.width > 0.0) {
            return Err(Error::invalid("architecture", format!("width multiplier {} must be positive", config.width)));
        }
        if config.activation == Activation::Identity {
            return Err(Error::invalid("architecture", "main convolutions need a nonlinearity"));
        }
        let act = config.activation;
        let ch = |c| config.channels(c);
        let mut layers = match config.arch {
            ArchName::A => vec![
                conv("conv1", 9, 0, ch(48), act),
                pool("pool1"),
                conv("conv2", 5, 0, ch(96), act),
                pool("pool2"),
                conv("conv3", 5, 0, ch(128), act),
                pool("pool3"),
                conv("conv4", 4, 0, ch(192), act),
                pool("pool4"),
            ],
            ArchName::B => {
                let nin = if config.nin_mfm { act } else { Activation::Identity };
                let mut layers = vec![conv("conv1", 5, 2, ch(48), act), pool("pool1")];
                // (stage, channels entering the stage, channels leaving it)
                for (stage, c_in, c_out) in [(2, 48, 96), (3, 96, 192), (4, 192, 128), (5, 128, 128)] {
                    layers.push(conv(&format!("conv{stage}_a"), 1, 0, ch(c_in), nin));
                    layers.push(conv(&format!("conv{stage}"), 3, 1, ch(c_out), act));
                    layers.push(pool(&format!("pool{stage}")));
                }
                layers
            }
        };
        layers.extend(head(&config));
        Ok(Self {
            config,
            input: Shape::new(1, 1, INPUT_SIZE, INPUT_SIZE),
            layers,
        })
    }

    pub fn network_a() -> Self {
        Self::from_config(ArchConfig::new(ArchName::A)).expect("default config is valid")
    }

    pub fn network_b() -> Self {
        Self::from_config(ArchConfig::new(ArchName::B)).expect("default config is valid")
    }

    /// Materializes the layers with zero parameters, checking that every
    /// layer fits the shape flowing into it.
    pub fn materialize<T: Scalar>(&self) -> Result<Vec<Layer<T>>> {
        let mut shape = self.input;
        let mut layers = Vec::with_capacity(self.layers.len());
        for spec in &self.layers {
            let layer = match spec {
                LayerSpec::Conv {
                    name,
                    kernel,
                    stride,
                    pad,
                    out_channels,
                    activation,
                } => Layer::Conv(ConvBlock::new(name.clone(), shape.c, *out_channels, *kernel, *stride, *pad, *activation)),
                LayerSpec::Pool { name, kernel, stride } => Layer::Pool(MaxPool::new(name.clone(), *kernel, *stride)),
                LayerSpec::Fc {
                    name,
                    outputs,
                    lr_mult,
                    decay,
                } => {
                    let mut fc = FullyConnected::new(name.clone(), shape.item_len(), *outputs);
                    fc.lr_mult = *lr_mult;
                    fc.decay = *decay;
                    Layer::Fc(fc)
                }
                LayerSpec::Dropout { name, ratio } => Layer::Dropout(Dropout::new(name.clone(), *ratio)),
            };
            shape = layer.output_shape(shape)?;
            layers.push(layer);
        }
        Ok(layers)
    }

    /// Parameter count per parameter-bearing unit, in the given convention.
    pub fn count_parameters(&self, convention: CountConvention) -> ParamCount {
        let mut rows = Vec::new();
        let mut shape = self.input;
        for spec in &self.layers {
            match spec {
                LayerSpec::Conv {
                    name,
                    kernel,
                    stride,
                    pad,
                    out_channels,
                    activation,
                } => {
                    let units = activation.units();
                    let (k, c_in, c_out) = (*kernel as u64, shape.c as u64, *out_channels as u64);
                    let per_unit = match convention {
                        CountConvention::Compact => k * k * c_out,
                        CountConvention::True => k * k * c_in * c_out + c_out,
                    };
                    if units == 1 {
                        rows.push((name.clone(), per_unit));
                    } else {
                        rows.extend((1..=units).map(|i| (format!("{name}_{i}"), per_unit)));
                    }
                    let h = crate::tensor::conv_out_extent(shape.h, *kernel, *stride, *pad).unwrap_or(0);
                    let w = crate::tensor::conv_out_extent(shape.w, *kernel, *stride, *pad).unwrap_or(0);
                    shape = Shape::new(shape.n, *out_channels, h, w);
                }
                LayerSpec::Pool { kernel, stride, .. } => {
                    shape.h = crate::tensor::pool_out_extent(shape.h, *kernel, *stride).unwrap_or(0);
                    shape.w = crate::tensor::pool_out_extent(shape.w, *kernel, *stride).unwrap_or(0);
                }
                LayerSpec::Fc { name, outputs, .. } => {
                    let (d, m) = (shape.item_len() as u64, *outputs as u64);
                    let n = match convention {
                        CountConvention::Compact => d * m,
                        CountConvention::True => d * m + m,
                    };
                    rows.push((name.clone(), n));
                    shape = Shape::new(shape.n, *outputs, 1, 1);
                }
                LayerSpec::Dropout { .. } => {}
            }
        }
        let total = rows.iter().map(|(_, n)| n).sum();
        ParamCount { rows, total }
    }
}

/// How parameters are tallied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountConvention {
    /// `kH·kW·outC` per convolution unit and `in·out` per fully-connected
    /// layer: input channels and biases are not counted.
    Compact,
    /// Every stored weight and bias.
    True,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub rows: Vec<(String, u64)>,
    pub total: u64,
}

impl ParamCount {
    pub fn get(&self, name: &str) -> Option<u64> {
        self.rows.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// A materialized network: layer list, parameters and solver state.
#[derive(Debug, Clone)]
pub struct NetworkModel<T: Scalar = f32> {
    spec: ArchSpec,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> NetworkModel<T> {
    pub fn build(spec: ArchSpec) -> Result<Self> {
        let layers = spec.materialize()?;
        Ok(Self { spec, layers })
    }

    pub fn from_config(config: ArchConfig) -> Result<Self> {
        Self::build(ArchSpec::from_config(config)?)
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn config(&self) -> &ArchConfig {
        &self.spec.config
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        Shape { n: batch, ..self.spec.input }
    }

    pub fn num_classes(&self) -> usize {
        self.spec.config.num_classes
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        let want = self.input_shape(s.n);
        if s != want {
            return Err(Error::invalid("network input", format!("expected {want}, got {s}")));
        }
        Ok(())
    }

    /// Forward through every layer to the classifier logits `(N, K, 1, 1)`.
    pub fn forward(&mut self, x: &Tensor<T>, pass: &mut Pass<'_>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h, pass)?;
        }
        Ok(h)
    }

    /// Backward from the logits gradient; returns the input gradient.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad_logits.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    /// Evaluation-mode logits without touching any cache.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.infer(&h)?;
        }
        Ok(h)
    }

    /// fc1 activations `(N, 256, 1, 1)`: the face representation.
    pub fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.infer(&h)?;
            if layer.name() == "fc1" {
                return Ok(h);
            }
        }
        Err(Error::invalid("embed", "network has no fc1 layer"))
    }

    /// Output shape of every named row, inferred without computing.
    pub fn shape_trace(&self, batch: usize) -> Result<Vec<(String, Shape)>> {
        let mut shape = self.input_shape(batch);
        let mut rows = Vec::new();
        for layer in &self.layers {
            rows.extend(layer.trace(shape)?);
            shape = layer.output_shape(shape)?;
        }
        Ok(rows)
    }

    /// Runs an evaluation forward pass and records the shape of every
    /// intermediate tensor it actually produced.
    pub fn forward_trace(&self, x: &Tensor<T>) -> Result<Vec<(String, Shape)>> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut rows = Vec::new();
        for layer in &self.layers {
            let input = h.shape();
            h = layer.infer(&h)?;
            let layer_rows = layer.trace(input)?;
            debug_assert!(layer_rows.iter().all(|(_, s)| *s == h.shape()));
            rows.extend(layer_rows.into_iter().map(|(name, _)| (name, h.shape())));
        }
        Ok(rows)
    }

    pub fn params(&self) -> Vec<(String, &Param<T>)> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<ParamRef<'_, T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.param.grad.fill(T::zero());
        }
    }

    pub fn clear_caches(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }

    pub fn set_dropout_ratio(&mut self, ratio: f64) {
        for layer in &mut self.layers {
            if let Layer::Dropout(d) = layer {
                d.ratio = ratio;
            }
        }
    }

    /// Turns recording of MFM outputs and input gradients on or off.
    pub fn set_mfm_probe(&mut self, on: bool) {
        for layer in &mut self.layers {
            if let Layer::Conv(c) = layer {
                c.set_probe(on && c.activation == Activation::Mfm);
            }
        }
    }

    /// Probe contents by activation name (`mfm1`, ...).
    pub fn mfm_probes(&self) -> Vec<(&str, &MfmProbe<T>)> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(c) => c.probe().map(|p| (c.activation_name.as_deref().unwrap_or(&c.name), p)),
                _ => None,
            })
            .collect()
    }

    pub fn count_parameters(&self, convention: CountConvention) -> ParamCount {
        self.spec.count_parameters(convention)
    }

    /// Same network at another precision.
    pub fn cast<U: Scalar>(&self) -> NetworkModel<U> {
        let mut out = NetworkModel::<U>::build(self.spec.clone()).expect("spec already validated");
        for ((_, src), dst) in self.params().into_iter().zip(out.params_mut()) {
            *dst.param = src.cast();
        }
        out
    }

    /// Draws fresh weights: convolutions uniform in `±sqrt(3 / fan_in)`,
    /// fully-connected layers Gaussian with σ = 0.01, biases zero. Clears
    /// gradients and momentum.
    pub fn init_weights(&mut self, rng: &mut Rng) {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(block) => {
                    for unit in &mut block.units {
                        let s = unit.weight.value.shape();
                        let bound = xavier_bound(s.c * s.h * s.w);
                        unit.weight.value.data_mut().iter_mut().for_each(|w| {
                            *w = T::from_f64_lossy(rng.uniform_range(-bound, bound));
                        });
                        unit.bias.value.fill(T::zero());
                    }
                }
                Layer::Fc(fc) => {
                    fc.weight.value.data_mut().iter_mut().for_each(|w| {
                        *w = T::from_f64_lossy(rng.gaussian(0.0, FC_INIT_STD));
                    });
                    fc.bias.value.fill(T::zero());
                }
                Layer::Pool(_) | Layer::Dropout(_) => {}
            }
        }
        for p in self.params_mut() {
            p.param.grad.fill(T::zero());
            p.param.momentum.fill(T::zero());
        }
    }
}

/// Half-width of the uniform initialization range for a given fan-in.
pub fn xavier_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

pub fn build_network_a() -> NetworkModel<f32> {
    NetworkModel::build(ArchSpec::network_a()).expect("network A is consistent")
}

pub fn build_network_b() -> NetworkModel<f32> {
    NetworkModel::build(ArchSpec::network_b()).expect("network B is consistent")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_names_parse() {
        assert_eq!("A".parse::<ArchName>().unwrap(), ArchName::A);
        assert_eq!("b".parse::<ArchName>().unwrap(), ArchName::B);
        assert!("C".parse::<ArchName>().is_err());
    }

    #[test]
    fn network_a_shapes() {
        let m = build_network_a();
        let trace = m.shape_trace(1).unwrap();
        let get = |n: &str| trace.iter().find(|(name, _)| name == n).unwrap().1;
        assert_eq!(get("conv1_1"), Shape::new(1, 48, 120, 120));
        assert_eq!(get("pool4"), Shape::new(1, 192, 5, 5));
        assert_eq!(get("fc1"), Shape::new(1, 256, 1, 1));
        assert_eq!(get("fc2"), Shape::new(1, DEFAULT_CLASSES, 1, 1));
        let trace2 = m.shape_trace(2).unwrap();
        assert!(trace2.iter().all(|(_, s)| s.n == 2));
    }

    #[test]
    fn network_b_shapes() {
        let m = build_network_b();
        let trace = m.shape_trace(1).unwrap();
        let get = |n: &str| trace.iter().find(|(name, _)| name == n).unwrap().1;
        assert_eq!(get("conv1_1"), Shape::new(1, 48, 128, 128));
        assert_eq!(get("conv3_a"), Shape::new(1, 96, 32, 32));
        assert_eq!(get("pool5"), Shape::new(1, 128, 4, 4));
        assert!(trace.iter().all(|(n, _)| n != "mfm2_a"));
    }

    #[test]
    fn nin_activation_flag() {
        let mut cfg = ArchConfig::new(ArchName::B);
        cfg.nin_mfm = true;
        let m = NetworkModel::<f32>::from_config(cfg).unwrap();
        let names: Vec<_> = m.shape_trace(1).unwrap().into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().any(|n| n == "mfm2_a"));
        assert!(names.iter().any(|n| n == "conv2_a_2"));
    }

    #[test]
    fn true_count_of_network_a() {
        let count = ArchSpec::network_a().count_parameters(CountConvention::True);
        // Weights only, summed by hand over the layer list.
        let weights: u64 = 81 * 96 + 25 * 48 * 192 + 25 * 96 * 256 + 16 * 128 * 384 + 4800 * 256 + 256 * 10_575;
        assert_eq!(weights, 5_575_008);
        let biases: u64 = 2 * (48 + 96 + 128 + 192) + 256 + 10_575;
        assert_eq!(count.total, weights + biases);
    }

    #[test]
    fn init_bounds_and_determinism() {
        let mut m = NetworkModel::<f32>::from_config(ArchConfig::new(ArchName::A).with_classes(10)).unwrap();
        m.init_weights(&mut Rng::new(1));
        let bound = xavier_bound(81);
        assert!((bound - 0.19245).abs() < 1e-4);
        let params = m.params();
        let (_, w) = params.iter().find(|(n, _)| n == "conv1_1.weight").unwrap();
        assert!(w.value.data().iter().all(|&v| (v as f64).abs() < bound));
        assert!(params.iter().filter(|(n, _)| n.ends_with(".bias")).all(|(_, p)| p.value.data().iter().all(|&v| v == 0.0)));
        let mut again = NetworkModel::<f32>::from_config(ArchConfig::new(ArchName::A).with_classes(10)).unwrap();
        again.init_weights(&mut Rng::new(1));
        for ((_, a), (_, b)) in m.params().iter().zip(again.params()) {
            assert_eq!(a.value.data(), b.value.data());
        }
    }

    #[test]
    fn width_multiplier_shrinks_channels() {
        let m = NetworkModel::<f32>::from_config(ArchConfig::new(ArchName::A).with_width(0.125).with_classes(16)).unwrap();
        let trace = m.shape_trace(1).unwrap();
        let pool4 = trace.iter().find(|(n, _)| n == "pool4").unwrap().1;
        assert_eq!(pool4, Shape::new(1, 24, 5, 5));
        assert!(NetworkModel::<f32>::from_config(ArchConfig::new(ArchName::A).with_width(0.0)).is_err());
    }

    #[test]
    fn embedding_of_zero_model_is_zero() {
        let m = NetworkModel::<f32>::from_config(ArchConfig::new(ArchName::B).with_width(0.25).with_classes(4)).unwrap();
        let e = m.embed(&Tensor::zeros(m.input_shape(1))).unwrap();
        assert_eq!(e.shape(), Shape::new(1, 256, 1, 1));
        assert!(e.data().iter().all(|&v| v == 0.0));
        assert!(m.embed(&Tensor::zeros(Shape::new(1, 1, 64, 64))).is_err());
    }
}
