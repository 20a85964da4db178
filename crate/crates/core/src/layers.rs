//! Layers with explicit forward/backward passes.
//!
//! Every convolution block owns one or two convolution units. With the
//! Max-Feature-Map activation the two units see the same input, their outputs
//! are concatenated into a `2n`-channel tensor and reduced to `n` channels by
//! an elementwise maximum over the two halves.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{self, Scalar, Shape, Tensor};

/// Whether a forward pass is for training (dropout active, caches kept) or
/// for evaluation.
pub enum Pass<'a> {
    Train(&'a mut Rng),
    Eval,
}

impl Pass<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Pass::Train(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    /// Max-Feature-Map over two convolution units.
    Mfm,
    Relu,
    /// No nonlinearity (the 1×1 network-in-network layers).
    Identity,
}

impl Activation {
    /// Number of convolution units a block with this activation needs.
    pub fn units(self) -> usize {
        match self {
            Activation::Mfm => 2,
            Activation::Relu | Activation::Identity => 1,
        }
    }
}

/// Which weight-decay coefficient of the solver applies to a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DecayGroup {
    Standard,
    /// The classifier feeding the loss, regularized more strongly.
    Classifier,
}

/// Elementwise max over the two channel halves: `f[k] = max(C[k], C[k+n])`.
pub fn mfm_forward<T: Scalar>(c: &Tensor<T>) -> Result<Tensor<T>> {
    let s = c.shape();
    if s.c % 2 != 0 {
        return Err(Error::invalid("mfm_forward", format!("channel count {} is odd", s.c)));
    }
    let half = s.c / 2 * s.plane();
    let mut out = Tensor::zeros(Shape { c: s.c / 2, ..s });
    for n in 0..s.n {
        let (a, b) = c.item(n).split_at(half);
        for ((o, &x), &y) in out.item_mut(n).iter_mut().zip(a).zip(b) {
            *o = if x >= y { x } else { y };
        }
    }
    Ok(out)
}

/// Routes each upstream value to the half that won the forward max; ties go
/// to the first half. The losing position receives zero.
pub fn mfm_backward<T: Scalar>(c: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let s = c.shape();
    if s.c % 2 != 0 {
        return Err(Error::invalid("mfm_backward", format!("channel count {} is odd", s.c)));
    }
    let expected = Shape { c: s.c / 2, ..s };
    if upstream.shape() != expected {
        return Err(Error::invalid(
            "mfm_backward",
            format!("upstream shape {} does not match {}", upstream.shape(), expected),
        ));
    }
    let half = s.c / 2 * s.plane();
    let mut grad = Tensor::zeros(s);
    for n in 0..s.n {
        let (a, b) = c.item(n).split_at(half);
        let up = upstream.item(n);
        let (ga, gb) = grad.item_mut(n).split_at_mut(half);
        for i in 0..half {
            if a[i] >= b[i] {
                ga[i] = up[i];
            } else {
                gb[i] = up[i];
            }
        }
    }
    Ok(grad)
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes upstream where `x > 0`; the subgradient at 0 is taken as 0.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != upstream.shape() {
        return Err(Error::invalid("relu_backward", "upstream shape differs from input"));
    }
    let mut g = upstream.clone();
    for (g, &v) in g.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    Ok(g)
}

fn check_dropout_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::invalid("dropout", format!("ratio {ratio} outside [0, 1)")));
    }
    Ok(())
}

/// Inverted-dropout mask: each entry is 0 with probability `ratio`, otherwise
/// `1 / (1 - ratio)`.
pub fn dropout_mask<T: Scalar>(len: usize, ratio: f64, rng: &mut Rng) -> Result<Vec<T>> {
    check_dropout_ratio(ratio)?;
    let keep = T::from_f64_lossy(1.0 / (1.0 - ratio));
    Ok((0..len)
        .map(|_| if rng.uniform() < ratio { T::zero() } else { keep })
        .collect())
}

/// Dropout as a pure function. In training mode returns the mask that was
/// applied so the caller can route the gradient through it.
pub fn dropout<T: Scalar>(x: &Tensor<T>, ratio: f64, pass: &mut Pass<'_>) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    check_dropout_ratio(ratio)?;
    match pass {
        Pass::Eval => Ok((x.clone(), None)),
        Pass::Train(rng) => {
            let mask = dropout_mask(x.len(), ratio, rng)?;
            Ok((apply_mask(x, &mask), Some(mask)))
        }
    }
}

fn apply_mask<T: Scalar>(x: &Tensor<T>, mask: &[T]) -> Tensor<T> {
    let mut out = x.clone();
    out.data_mut().iter_mut().zip(mask).for_each(|(v, &m)| *v *= m);
    out
}

/// Numerically stable softmax cross-entropy for one example.
///
/// Returns `(-log softmax(logits)[label], softmax(logits) - onehot(label))`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        return Err(Error::invalid(
            "softmax_cross_entropy",
            format!("label {label} out of range for {} classes", logits.len()),
        ));
    }
    let max = logits.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut probs: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum = probs.iter().fold(T::zero(), |s, &p| s + p);
    let loss = sum.ln() - (logits[label] - max);
    probs.iter_mut().for_each(|p| *p /= sum);
    probs[label] -= T::one();
    Ok((loss, probs))
}

/// Mean softmax loss over a batch of logits `(N, K, 1, 1)` and its gradient.
pub fn softmax_loss_batch<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let n = logits.shape().n;
    if labels.len() != n {
        return Err(Error::shape("softmax_loss_batch", "label count", n, labels.len()));
    }
    let scale = T::from_f64_lossy(1.0 / n as f64);
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let (loss, g) = softmax_cross_entropy(logits.item(i), label)?;
        total += loss.to_f64_lossy();
        grad.item_mut(i).iter_mut().zip(g).for_each(|(d, v)| *d = v * scale);
    }
    Ok((total / n as f64, grad))
}

/// A parameter block with its gradient and momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub momentum: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::new(Tensor::zeros(shape))
    }

    pub fn new(value: Tensor<T>) -> Self {
        let shape = value.shape();
        Self {
            value,
            grad: Tensor::zeros(shape),
            momentum: Tensor::zeros(shape),
        }
    }

    fn accumulate(&mut self, g: &[T]) {
        self.grad.data_mut().iter_mut().zip(g).for_each(|(a, &b)| *a += b);
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            value: self.value.cast(),
            grad: self.grad.cast(),
            momentum: self.momentum.cast(),
        }
    }
}

/// Parameter block plus the solver policy that applies to it.
pub struct ParamRef<'a, T: Scalar> {
    pub name: String,
    pub param: &'a mut Param<T>,
    pub lr_mult: f64,
    pub decay: DecayGroup,
}

/// One convolution: weights `(outC, inC, kH, kW)` and bias `(1, outC, 1, 1)`.
#[derive(Debug, Clone)]
pub struct ConvUnit<T: Scalar> {
    pub name: String,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> ConvUnit<T> {
    pub fn new(name: impl Into<String>, in_c: usize, out_c: usize, kernel: usize) -> Self {
        Self {
            name: name.into(),
            weight: Param::zeros(Shape::new(out_c, in_c, kernel, kernel)),
            bias: Param::zeros(Shape::new(1, out_c, 1, 1)),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape().n
    }
}

#[derive(Debug, Clone)]
struct ConvCache<T: Scalar> {
    input: Tensor<T>,
    /// Concatenated unit outputs before the activation.
    pre_activation: Tensor<T>,
}

/// Values and gradients seen at an MFM activation, kept when probing is on.
#[derive(Debug, Clone, Default)]
pub struct MfmProbe<T: Scalar> {
    pub outputs: Option<Tensor<T>>,
    pub input_grads: Option<Tensor<T>>,
}

/// Convolution units sharing one input followed by an activation.
#[derive(Debug, Clone)]
pub struct ConvBlock<T: Scalar> {
    pub name: String,
    /// Name of the activation row (e.g. `mfm1`), if the block has one.
    pub activation_name: Option<String>,
    pub units: Vec<ConvUnit<T>>,
    pub stride: usize,
    pub pad: usize,
    pub activation: Activation,
    pub lr_mult: f64,
    cache: Option<ConvCache<T>>,
    probe: Option<MfmProbe<T>>,
}

impl<T: Scalar> ConvBlock<T> {
    pub fn new(
        name: impl Into<String>,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        activation: Activation,
    ) -> Self {
        let name = name.into();
        let units = match activation.units() {
            1 => vec![ConvUnit::new(name.clone(), in_c, out_c, kernel)],
            n => (1..=n)
                .map(|i| ConvUnit::new(format!("{name}_{i}"), in_c, out_c, kernel))
                .collect(),
        };
        let activation_name = match activation {
            Activation::Mfm => Some(name.replacen("conv", "mfm", 1)),
            Activation::Relu => Some(name.replacen("conv", "relu", 1)),
            Activation::Identity => None,
        };
        Self {
            name,
            activation_name,
            units,
            stride,
            pad,
            activation,
            lr_mult: 1.0,
            cache: None,
            probe: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.units[0].weight.value.shape().c
    }

    pub fn kernel(&self) -> usize {
        self.units[0].weight.value.shape().h
    }

    /// Channels after the activation.
    pub fn out_channels(&self) -> usize {
        self.units[0].out_channels()
    }

    pub fn set_probe(&mut self, on: bool) {
        self.probe = on.then(MfmProbe::default);
    }

    pub fn probe(&self) -> Option<&MfmProbe<T>> {
        self.probe.as_ref()
    }

    /// All units' filters stacked along the output-channel axis.
    fn stacked(&self) -> (Cow<'_, Tensor<T>>, Cow<'_, [T]>) {
        if let [unit] = self.units.as_slice() {
            return (Cow::Borrowed(&unit.weight.value), Cow::Borrowed(unit.bias.value.data()));
        }
        let ws = self.units[0].weight.value.shape();
        let mut weights = Vec::with_capacity(ws.len() * self.units.len());
        let mut bias = Vec::with_capacity(ws.n * self.units.len());
        for unit in &self.units {
            weights.extend_from_slice(unit.weight.value.data());
            bias.extend_from_slice(unit.bias.value.data());
        }
        let shape = Shape { n: ws.n * self.units.len(), ..ws };
        let weights = Tensor::from_vec(shape, weights).expect("unit shapes agree");
        (Cow::Owned(weights), Cow::Owned(bias))
    }

    fn pre_activation(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (w, b) = self.stacked();
        tensor::conv2d(x, &w, &b, self.stride, self.pad)
    }

    fn activate(&self, c: &Tensor<T>) -> Result<Tensor<T>> {
        match self.activation {
            Activation::Mfm => mfm_forward(c),
            Activation::Relu => Ok(relu_forward(c)),
            Activation::Identity => Ok(c.clone()),
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.pre_activation(x)?;
        match self.activation {
            Activation::Identity => Ok(c),
            _ => self.activate(&c),
        }
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.pre_activation(x)?;
        let out = self.activate(&c)?;
        if let Some(probe) = self.probe.as_mut() {
            probe.outputs = Some(out.clone());
        }
        self.cache = Some(ConvCache {
            input: x.clone(),
            pre_activation: c,
        });
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid("conv backward", format!("{}: no cached forward", self.name)))?;
        let d_pre = match self.activation {
            Activation::Mfm => mfm_backward(&cache.pre_activation, upstream)?,
            Activation::Relu => relu_backward(&cache.pre_activation, upstream)?,
            Activation::Identity => upstream.clone(),
        };
        if let Some(probe) = self.probe.as_mut() {
            probe.input_grads = Some(d_pre.clone());
        }
        let (w, _) = self.stacked();
        let (d_input, d_weights, d_bias) = tensor::conv2d_backward(&cache.input, &w, &d_pre, self.stride, self.pad)?;
        drop(w);
        let per_w = self.units[0].weight.value.len();
        let per_b = self.units[0].out_channels();
        for (i, unit) in self.units.iter_mut().enumerate() {
            unit.weight.accumulate(&d_weights.data()[i * per_w..(i + 1) * per_w]);
            unit.bias.accumulate(&d_bias[i * per_b..(i + 1) * per_b]);
        }
        Ok(d_input)
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_channels() {
            return Err(Error::shape("conv2d", "input channels", self.in_channels(), input.c));
        }
        let k = self.kernel();
        let h = tensor::conv_out_extent(input.h, k, self.stride, self.pad);
        let w = tensor::conv_out_extent(input.w, k, self.stride, self.pad);
        match (h, w) {
            (Some(h), Some(w)) => Ok(Shape::new(input.n, self.out_channels(), h, w)),
            _ => Err(Error::invalid("conv2d", format!("{}: kernel {k} does not fit input {input}", self.name))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MaxPool {
    pub name: String,
    pub kernel: usize,
    pub stride: usize,
    cache: Option<(Shape, Vec<usize>)>,
}

impl MaxPool {
    pub fn new(name: impl Into<String>, kernel: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            kernel,
            stride,
            cache: None,
        }
    }

    fn output_shape(&self, input: Shape) -> Result<Shape> {
        let h = tensor::pool_out_extent(input.h, self.kernel, self.stride);
        let w = tensor::pool_out_extent(input.w, self.kernel, self.stride);
        match (h, w) {
            (Some(h), Some(w)) => Ok(Shape { h, w, ..input }),
            _ => Err(Error::invalid("max_pool2d", format!("{}: window does not fit input {input}", self.name))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FullyConnected<T: Scalar> {
    pub name: String,
    /// `(D, M, 1, 1)`.
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub lr_mult: f64,
    pub decay: DecayGroup,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> FullyConnected<T> {
    pub fn new(name: impl Into<String>, inputs: usize, outputs: usize) -> Self {
        Self {
            name: name.into(),
            weight: Param::zeros(Shape::new(inputs, outputs, 1, 1)),
            bias: Param::zeros(Shape::new(1, outputs, 1, 1)),
            lr_mult: 1.0,
            decay: DecayGroup::Standard,
            cache: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape().n
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape().c
    }
}

#[derive(Debug, Clone)]
pub struct Dropout<T: Scalar> {
    pub name: String,
    pub ratio: f64,
    mask: Option<Vec<T>>,
    frozen: bool,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(name: impl Into<String>, ratio: f64) -> Self {
        Self {
            name: name.into(),
            ratio,
            mask: None,
            frozen: false,
        }
    }

    /// Keeps reusing the current mask for later training passes instead of
    /// drawing a new one. Used to make the layer a fixed function for
    /// finite-difference checks.
    pub fn freeze_mask(&mut self, mask: Vec<T>) {
        self.mask = Some(mask);
        self.frozen = true;
    }

    fn forward(&mut self, x: &Tensor<T>, pass: &mut Pass<'_>) -> Result<Tensor<T>> {
        check_dropout_ratio(self.ratio)?;
        if self.frozen && pass.is_train() {
            let mask = self.mask.as_ref().expect("frozen dropout has a mask");
            if mask.len() != x.len() {
                return Err(Error::shape("dropout", "frozen mask length", mask.len(), x.len()));
            }
            return Ok(apply_mask(x, mask));
        }
        let (out, mask) = dropout(x, self.ratio, pass)?;
        self.mask = mask;
        Ok(out)
    }

    fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        match self.mask.as_ref() {
            Some(m) => Ok(apply_mask(upstream, m)),
            None => Ok(upstream.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Layer<T: Scalar> {
    Conv(ConvBlock<T>),
    Pool(MaxPool),
    Fc(FullyConnected<T>),
    Dropout(Dropout<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn name(&self) -> &str {
        match self {
            Layer::Conv(l) => &l.name,
            Layer::Pool(l) => &l.name,
            Layer::Fc(l) => &l.name,
            Layer::Dropout(l) => &l.name,
        }
    }

    /// Training-capable forward pass; caches what `backward` needs.
    pub fn forward(&mut self, x: &Tensor<T>, pass: &mut Pass<'_>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::Pool(l) => {
                let (out, argmax) = tensor::max_pool2d(x, l.kernel, l.stride)?;
                l.cache = Some((x.shape(), argmax));
                Ok(out)
            }
            Layer::Fc(l) => {
                let out = tensor::fully_connected(x, &l.weight.value, l.bias.value.data())?;
                l.cache = Some(x.clone());
                Ok(out)
            }
            Layer::Dropout(l) => l.forward(x, pass),
        }
    }

    /// Stateless evaluation-mode forward pass.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.infer(x),
            Layer::Pool(l) => Ok(tensor::max_pool2d(x, l.kernel, l.stride)?.0),
            Layer::Fc(l) => tensor::fully_connected(x, &l.weight.value, l.bias.value.data()),
            Layer::Dropout(_) => Ok(x.clone()),
        }
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, upstream: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.backward(upstream),
            Layer::Pool(l) => {
                let (shape, argmax) = l
                    .cache
                    .take()
                    .ok_or_else(|| Error::invalid("pool backward", format!("{}: no cached forward", l.name)))?;
                tensor::max_pool2d_backward(shape, &argmax, upstream)
            }
            Layer::Fc(l) => {
                let input = l
                    .cache
                    .take()
                    .ok_or_else(|| Error::invalid("fc backward", format!("{}: no cached forward", l.name)))?;
                let (d_input, d_w, d_b) = tensor::fully_connected_backward(&input, &l.weight.value, upstream)?;
                l.weight.accumulate(d_w.data());
                l.bias.accumulate(&d_b);
                Ok(d_input)
            }
            Layer::Dropout(l) => l.backward(upstream),
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match self {
            Layer::Conv(l) => l.output_shape(input),
            Layer::Pool(l) => l.output_shape(input),
            Layer::Fc(l) => {
                if input.item_len() != l.inputs() {
                    return Err(Error::shape("fully_connected", "flattened input length", l.inputs(), input.item_len()));
                }
                Ok(Shape::new(input.n, l.outputs(), 1, 1))
            }
            Layer::Dropout(_) => Ok(input),
        }
    }

    /// Named output shapes this layer contributes to an architecture trace:
    /// one row per convolution unit, then the activation row.
    pub fn trace(&self, input: Shape) -> Result<Vec<(String, Shape)>> {
        let out = self.output_shape(input)?;
        Ok(match self {
            Layer::Conv(l) => {
                let mut rows: Vec<(String, Shape)> = l.units.iter().map(|u| (u.name.clone(), out)).collect();
                if let Some(act) = &l.activation_name {
                    rows.push((act.clone(), out));
                }
                rows
            }
            _ => vec![(self.name().to_string(), out)],
        })
    }

    /// Parameter blocks with their solver policy, in a fixed order.
    pub fn params_mut(&mut self) -> Vec<ParamRef<'_, T>> {
        match self {
            Layer::Conv(l) => {
                let lr_mult = l.lr_mult;
                l.units
                    .iter_mut()
                    .flat_map(|u| {
                        let ConvUnit { name, weight, bias } = u;
                        [
                            ParamRef {
                                name: format!("{name}.weight"),
                                param: weight,
                                lr_mult,
                                decay: DecayGroup::Standard,
                            },
                            ParamRef {
                                name: format!("{name}.bias"),
                                param: bias,
                                lr_mult,
                                decay: DecayGroup::Standard,
                            },
                        ]
                    })
                    .collect()
            }
            Layer::Fc(l) => vec![
                ParamRef {
                    name: format!("{}.weight", l.name),
                    param: &mut l.weight,
                    lr_mult: l.lr_mult,
                    decay: l.decay,
                },
                ParamRef {
                    name: format!("{}.bias", l.name),
                    param: &mut l.bias,
                    lr_mult: l.lr_mult,
                    decay: l.decay,
                },
            ],
            Layer::Pool(_) | Layer::Dropout(_) => Vec::new(),
        }
    }

    /// Parameter blocks by name, in the same order as [`Layer::params_mut`].
    pub fn params(&self) -> Vec<(String, &Param<T>)> {
        match self {
            Layer::Conv(l) => l
                .units
                .iter()
                .flat_map(|u| [(format!("{}.weight", u.name), &u.weight), (format!("{}.bias", u.name), &u.bias)])
                .collect(),
            Layer::Fc(l) => vec![(format!("{}.weight", l.name), &l.weight), (format!("{}.bias", l.name), &l.bias)],
            Layer::Pool(_) | Layer::Dropout(_) => Vec::new(),
        }
    }

    /// Drops any cached forward state.
    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv(l) => l.cache = None,
            Layer::Pool(l) => l.cache = None,
            Layer::Fc(l) => l.cache = None,
            Layer::Dropout(l) => {
                if !l.frozen {
                    l.mask = None
                }
            }
        }
    }
}
