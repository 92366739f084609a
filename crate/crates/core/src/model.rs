//! Encoder-decoder fully convolutional network.
//!
//! Layout for `S` scales with `c_s = base · 2^s` channels:
//!
//! * encoder block `s`: residual unit (two 3×3 conv + ReLU, shortcut that is
//!   identity or a 1×1 projection when channel counts differ) followed by a
//!   2×2 stride-2 convolution to `2·c_s` channels;
//! * bridge: residual unit at `base · 2^S` channels, no resampling;
//! * decoder block `s`: 2×2 stride-2 transposed convolution to `c_s`
//!   channels, concatenation with the encoder output at scale `s`, then two
//!   3×3 conv + ReLU back to `c_s` channels;
//! * head: 1×1 convolution to two classes and a per-pixel softmax.
//!
//! Inverted dropout follows every residual and fusion unit in training mode.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotation::{LabelMap, WeightMap};
use crate::error::{Error, Result};
use crate::loss::{data_loss_and_grad, softmax};
use crate::raster::{reflect_index, RgbImage};
use crate::stain::StainReference;
use crate::tensor::{conv_backward, conv_forward, deconv_backward, deconv_forward, ConvGeometry, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub scales: usize,
    pub dropout_rate: f64,
    pub num_classes: usize,
    pub input_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { base_channels: 32, scales: 4, dropout_rate: 0.1, num_classes: 2, input_channels: 3 }
    }
}

impl NetworkConfig {
    pub fn tiny() -> Self {
        Self { base_channels: 4, scales: 2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be >= 1".into()));
        }
        if self.scales == 0 || self.scales > 8 {
            return Err(Error::Config(format!("scales must lie in 1..=8, got {}", self.scales)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate)));
        }
        if self.num_classes != 2 {
            return Err(Error::Config("the detector is a two-class network".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Spatial dimensions must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.scales
    }

    pub fn channels_at(&self, scale: usize) -> usize {
        self.base_channels << scale
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv3x3,
    Conv1x1,
    Down2x2,
    Up2x2,
}

impl LayerKind {
    fn geometry(self) -> ConvGeometry {
        match self {
            Self::Conv3x3 => ConvGeometry { kernel: 3, stride: 1, pad: 1 },
            Self::Conv1x1 => ConvGeometry { kernel: 1, stride: 1, pad: 0 },
            Self::Down2x2 | Self::Up2x2 => ConvGeometry { kernel: 2, stride: 2, pad: 0 },
        }
    }

    fn taps(self) -> usize {
        let k = self.geometry().kernel;
        k * k
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerSpec {
    pub fn weight_len(&self) -> usize {
        self.in_channels * self.out_channels * self.kind.taps()
    }

    /// Inputs feeding one output value. A 2×2 stride-2 transposed
    /// convolution touches a single input position per channel.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Up2x2 => self.in_channels,
            k => self.in_channels * k.taps(),
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderIdx {
    conv1: usize,
    conv2: usize,
    proj: Option<usize>,
    down: usize,
}

#[derive(Clone, Debug)]
struct DecoderIdx {
    up: usize,
    fuse1: usize,
    fuse2: usize,
}

#[derive(Clone, Debug)]
struct Plan {
    encoders: Vec<EncoderIdx>,
    bridge: (usize, usize),
    /// Indexed by scale.
    decoders: Vec<DecoderIdx>,
    head: usize,
}

fn build_plan(config: &NetworkConfig) -> (Vec<LayerSpec>, Plan) {
    let mut specs = Vec::new();
    let mut push = |name: String, kind, cin, cout| {
        specs.push(LayerSpec { name, kind, in_channels: cin, out_channels: cout });
        specs.len() - 1
    };
    let mut encoders = Vec::new();
    let mut cin = config.input_channels;
    for s in 0..config.scales {
        let c = config.channels_at(s);
        let conv1 = push(format!("enc{s}.conv1"), LayerKind::Conv3x3, cin, c);
        let conv2 = push(format!("enc{s}.conv2"), LayerKind::Conv3x3, c, c);
        let proj = (cin != c).then(|| push(format!("enc{s}.proj"), LayerKind::Conv1x1, cin, c));
        let down = push(format!("enc{s}.down"), LayerKind::Down2x2, c, 2 * c);
        encoders.push(EncoderIdx { conv1, conv2, proj, down });
        cin = 2 * c;
    }
    let bridge = (
        push("bridge.conv1".into(), LayerKind::Conv3x3, cin, cin),
        push("bridge.conv2".into(), LayerKind::Conv3x3, cin, cin),
    );
    let mut decoders = Vec::with_capacity(config.scales);
    for s in (0..config.scales).rev() {
        let c = config.channels_at(s);
        let up = push(format!("dec{s}.up"), LayerKind::Up2x2, 2 * c, c);
        let fuse1 = push(format!("dec{s}.fuse1"), LayerKind::Conv3x3, 2 * c, c);
        let fuse2 = push(format!("dec{s}.fuse2"), LayerKind::Conv3x3, c, c);
        decoders.push(DecoderIdx { up, fuse1, fuse2 });
    }
    decoders.reverse();
    let head = push("head".into(), LayerKind::Conv1x1, config.base_channels, config.num_classes);
    (specs, Plan { encoders, bridge, decoders, head })
}

/// Ordered layer manifest for a configuration.
pub fn layer_specs(config: &NetworkConfig) -> Vec<LayerSpec> {
    build_plan(config).0
}

pub fn parameter_count(config: &NetworkConfig) -> usize {
    layer_specs(config).iter().map(|s| s.weight_len() + s.out_channels).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Everything stored alongside the weights in a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model_id: Option<String>,
    pub parent_id: Option<String>,
    pub epoch: usize,
    pub threshold: f32,
    pub stain: Option<StainReference>,
}

impl Default for ModelMeta {
    fn default() -> Self {
        Self { model_id: None, parent_id: None, epoch: 0, threshold: 0.5, stain: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub config: NetworkConfig,
    pub layers: Vec<Layer<T>>,
    pub meta: ModelMeta,
}

/// He-normal initialisation: kernels `N(0, 2/fan_in)`, zero biases.
pub fn init_params<T: Scalar>(config: &NetworkConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = layer_specs(config)
        .into_iter()
        .map(|spec| {
            let std = (2.0 / spec.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let weight = (0..spec.weight_len()).map(|_| T::from_f64(normal.sample(&mut rng))).collect();
            let bias = vec![T::zero(); spec.out_channels];
            Layer { spec, weight, bias }
        })
        .collect();
    Ok(ModelParams { config: *config, layers, meta: ModelMeta::default() })
}

impl<T: Scalar> ModelParams<T> {
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect();
        ModelParams {
            config: self.config,
            layers: self
                .layers
                .iter()
                .map(|l| Layer { spec: l.spec.clone(), weight: conv(&l.weight), bias: conv(&l.bias) })
                .collect(),
            meta: self.meta.clone(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// `Σ‖kernel‖²` over all layers, biases excluded.
    pub fn kernel_sq_norm(&self) -> f64 {
        self.layers.iter().flat_map(|l| &l.weight).map(|w| w.as_f64().powi(2)).sum()
    }

    /// Largest absolute difference between corresponding parameters.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .flat_map(|(a, b)| a.weight.iter().zip(&b.weight).chain(a.bias.iter().zip(&b.bias)))
            .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Check that the layer list matches the configuration.
    pub fn validate(&self) -> Result<()> {
        self.check_structure().map(|_| ())
    }

    fn check_structure(&self) -> Result<Plan> {
        let (specs, plan) = build_plan(&self.config);
        if specs.len() != self.layers.len()
            || specs.iter().zip(&self.layers).any(|(s, l)| {
                *s != l.spec || l.weight.len() != s.weight_len() || l.bias.len() != s.out_channels
            })
        {
            return Err(Error::Shape("layer list does not match the network configuration".into()));
        }
        Ok(plan)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Gradients aligned with [`ModelParams::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b))
            .map(|v| v.as_f64().abs())
            .fold(0.0, f64::max)
    }
}

struct ResidualCache<T> {
    input: Tensor<T>,
    hidden: Tensor<T>,
    output: Tensor<T>,
    mask: Option<Vec<T>>,
}

struct DecoderCache<T> {
    up_input: Tensor<T>,
    fused_input: Tensor<T>,
    hidden: Tensor<T>,
    output: Tensor<T>,
    mask: Option<Vec<T>>,
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache<T> {
    encoders: Vec<ResidualCache<T>>,
    bridge: ResidualCache<T>,
    decoders: Vec<DecoderCache<T>>,
    head_input: Tensor<T>,
    pub logits: Tensor<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Sign pattern of every ReLU in the network, in a fixed order. Two
    /// parameter settings with equal patterns lie on the same smooth piece
    /// of the loss surface.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        let mut push = |t: &Tensor<T>| out.extend(t.data.iter().map(|&v| v > T::zero()));
        for c in self.encoders.iter().chain(std::iter::once(&self.bridge)) {
            push(&c.hidden);
            push(&c.output);
        }
        for c in &self.decoders {
            push(&c.hidden);
            push(&c.output);
        }
        out
    }
}

struct Ctx<'a, T, R> {
    params: &'a ModelParams<T>,
    mode: Mode,
    rng: &'a mut R,
}

impl<T: Scalar, R: Rng> Ctx<'_, T, R> {
    fn conv(&self, idx: usize, x: &Tensor<T>) -> Tensor<T> {
        let l = &self.params.layers[idx];
        conv_forward(x, &l.weight, &l.bias, l.spec.out_channels, l.spec.kind.geometry())
    }

    fn dropout(&mut self, t: &mut Tensor<T>) -> Option<Vec<T>> {
        let rate = self.params.config.dropout_rate;
        if self.mode == Mode::Eval || rate == 0.0 {
            return None;
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..t.data.len())
            .map(|_| if self.rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        t.data.iter_mut().zip(&mask).for_each(|(v, &m)| *v = *v * m);
        Some(mask)
    }

    fn residual(&mut self, x: Tensor<T>, conv1: usize, conv2: usize, proj: Option<usize>) -> ResidualCache<T> {
        let mut hidden = self.conv(conv1, &x);
        hidden.relu_inplace();
        let mut out = self.conv(conv2, &hidden);
        match proj {
            Some(p) => out.add_assign(&self.conv(p, &x)),
            None => out.add_assign(&x),
        }
        out.relu_inplace();
        let mask = self.dropout(&mut out);
        ResidualCache { input: x, hidden, output: out, mask }
    }
}

/// Map an RGB image to the network's input range `[-0.5, 0.5]`.
pub fn image_tensor<T: Scalar>(image: &RgbImage) -> Tensor<T> {
    let (h, w) = (image.height(), image.width());
    let plane = h * w;
    let mut data = vec![T::zero(); 3 * plane];
    for (i, px) in image.pixels().enumerate() {
        for k in 0..3 {
            data[k * plane + i] = T::from_f64(px[k] as f64 / 255.0 - 0.5);
        }
    }
    Tensor::from_vec(3, h, w, data)
}

fn check_input<T: Scalar>(params: &ModelParams<T>, input: &Tensor<T>) -> Result<Plan> {
    let plan = params.check_structure()?;
    let m = params.config.size_multiple();
    if input.channels != params.config.input_channels || input.height % m != 0 || input.width % m != 0 || input.height == 0 || input.width == 0 {
        return Err(Error::Shape(format!(
            "input {}x{}x{} must have {} channels and spatial dims divisible by {m}",
            input.channels, input.height, input.width, params.config.input_channels
        )));
    }
    Ok(plan)
}

/// Forward pass keeping the activations needed by [`backward`].
pub fn forward_with_cache<T: Scalar, R: Rng>(
    params: &ModelParams<T>,
    input: &Tensor<T>,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardCache<T>> {
    let plan = check_input(params, input)?;
    let mut ctx = Ctx { params, mode, rng };
    let mut x = input.clone();
    let mut encoders: Vec<ResidualCache<T>> = Vec::with_capacity(plan.encoders.len());
    for e in &plan.encoders {
        let cache = ctx.residual(x, e.conv1, e.conv2, e.proj);
        x = ctx.conv(e.down, &cache.output);
        encoders.push(cache);
    }
    let bridge = ctx.residual(x, plan.bridge.0, plan.bridge.1, None);
    let mut y = bridge.output.clone();
    let mut decoders: Vec<DecoderCache<T>> = Vec::with_capacity(plan.decoders.len());
    for (s, d) in plan.decoders.iter().enumerate().rev() {
        let up_input = y;
        let l = &params.layers[d.up];
        let up = deconv_forward(&up_input, &l.weight, &l.bias, l.spec.out_channels);
        let fused_input = up.concat(&encoders[s].output);
        let mut hidden = ctx.conv(d.fuse1, &fused_input);
        hidden.relu_inplace();
        let mut out = ctx.conv(d.fuse2, &hidden);
        out.relu_inplace();
        let mask = ctx.dropout(&mut out);
        y = out.clone();
        decoders.push(DecoderCache { up_input, fused_input, hidden, output: out, mask });
    }
    // pushed deepest scale first; index by scale instead
    decoders.reverse();
    let logits = ctx.conv(plan.head, &y);
    Ok(ForwardCache { encoders, bridge, decoders, head_input: y, logits })
}

/// Per-pixel class probabilities, `2 × H × W`.
pub fn forward<T: Scalar, R: Rng>(params: &ModelParams<T>, input: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<Tensor<T>> {
    Ok(softmax(&forward_with_cache(params, input, mode, rng)?.logits))
}

/// Eval-mode forward pass; needs no randomness.
pub fn forward_eval<T: Scalar>(params: &ModelParams<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    forward(params, input, Mode::Eval, &mut NoRng)
}

/// Rng for code paths that never draw (eval mode).
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("eval mode draws no random numbers")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("eval mode draws no random numbers")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("eval mode draws no random numbers")
    }
    fn try_fill_bytes(&mut self, _: &mut [u8]) -> std::result::Result<(), rand::Error> {
        unreachable!("eval mode draws no random numbers")
    }
}

fn apply_mask<T: Scalar>(t: &mut Tensor<T>, mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        t.data.iter_mut().zip(m).for_each(|(v, &k)| *v = *v * k);
    }
}

/// Zero the gradient wherever the ReLU output is not positive. Cached
/// outputs may be dropout-masked; dropped units already carry zero gradient.
fn relu_grad<T: Scalar>(grad: &mut Tensor<T>, activation: &Tensor<T>) {
    grad.data.iter_mut().zip(&activation.data).for_each(|(g, &a)| {
        if a <= T::zero() {
            *g = T::zero()
        }
    });
}

fn residual_backward<T: Scalar>(
    params: &ModelParams<T>,
    grads: &mut [(Vec<T>, Vec<T>)],
    cache: &ResidualCache<T>,
    (conv1, conv2, proj): (usize, usize, Option<usize>),
    mut dy: Tensor<T>,
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    apply_mask(&mut dy, &cache.mask);
    relu_grad(&mut dy, &cache.output);
    let geo = LayerKind::Conv3x3.geometry();
    let (dh, dw2, db2) = conv_backward(&cache.hidden, &params.layers[conv2].weight, &dy, geo, true);
    grads[conv2] = (dw2, db2);
    let mut dh = dh.expect("requested");
    relu_grad(&mut dh, &cache.hidden);
    let (dx, dw1, db1) = conv_backward(&cache.input, &params.layers[conv1].weight, &dh, geo, need_input_grad);
    grads[conv1] = (dw1, db1);
    let shortcut = match proj {
        Some(p) => {
            let (dxp, dwp, dbp) =
                conv_backward(&cache.input, &params.layers[p].weight, &dy, LayerKind::Conv1x1.geometry(), need_input_grad);
            grads[p] = (dwp, dbp);
            dxp
        }
        None => need_input_grad.then_some(dy),
    };
    match (dx, shortcut) {
        (Some(mut a), Some(b)) => {
            a.add_assign(&b);
            Some(a)
        }
        _ => None,
    }
}

/// Total loss split into its parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub data: f64,
    pub l2: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.data + self.l2
    }
}

/// Exact gradients of `data_loss + weight_decay · Σ‖kernel‖²` for the patch
/// whose activations are in `cache`.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    labels: &LabelMap,
    weights: &WeightMap,
    weight_decay: f64,
) -> Result<(LossParts, Gradients<T>)> {
    let (_, plan) = build_plan(&params.config);
    let (data, dlogits) = data_loss_and_grad(&cache.logits, labels, weights)?;
    let mut grads: Vec<(Vec<T>, Vec<T>)> = vec![(Vec::new(), Vec::new()); params.layers.len()];

    let head = &params.layers[plan.head];
    let (dy, dw, db) = conv_backward(&cache.head_input, &head.weight, &dlogits, head.spec.kind.geometry(), true);
    grads[plan.head] = (dw, db);
    let mut dy = dy.expect("requested");

    let mut dskips: Vec<Option<Tensor<T>>> = vec![None; plan.decoders.len()];
    for (s, d) in plan.decoders.iter().enumerate() {
        let c = &cache.decoders[s];
        apply_mask(&mut dy, &c.mask);
        relu_grad(&mut dy, &c.output);
        let geo = LayerKind::Conv3x3.geometry();
        let (dh, dw2, db2) = conv_backward(&c.hidden, &params.layers[d.fuse2].weight, &dy, geo, true);
        grads[d.fuse2] = (dw2, db2);
        let mut dh = dh.expect("requested");
        relu_grad(&mut dh, &c.hidden);
        let (dcat, dw1, db1) = conv_backward(&c.fused_input, &params.layers[d.fuse1].weight, &dh, geo, true);
        grads[d.fuse1] = (dw1, db1);
        let up_channels = params.layers[d.up].spec.out_channels;
        let (dup, dskip) = dcat.expect("requested").split(up_channels);
        dskips[s] = Some(dskip);
        let (dprev, dwu, dbu) = deconv_backward(&c.up_input, &params.layers[d.up].weight, &dup);
        grads[d.up] = (dwu, dbu);
        dy = dprev;
    }

    let mut dx = residual_backward(params, &mut grads, &cache.bridge, (plan.bridge.0, plan.bridge.1, None), dy, true)
        .expect("requested");

    for (s, e) in plan.encoders.iter().enumerate().rev() {
        let c = &cache.encoders[s];
        let (dout, dwd, dbd) =
            conv_backward(&c.output, &params.layers[e.down].weight, &dx, LayerKind::Down2x2.geometry(), true);
        grads[e.down] = (dwd, dbd);
        let mut dout = dout.expect("requested");
        dout.add_assign(dskips[s].as_ref().expect("decoder visited every scale"));
        match residual_backward(params, &mut grads, c, (e.conv1, e.conv2, e.proj), dout, s > 0) {
            Some(next) => dx = next,
            None => break,
        }
    }

    let decay = T::from_f64(2.0 * weight_decay);
    for (g, layer) in grads.iter_mut().zip(&params.layers) {
        g.0.iter_mut().zip(&layer.weight).for_each(|(gw, &w)| *gw = *gw + decay * w);
    }
    let l2 = weight_decay * params.kernel_sq_norm();
    Ok((LossParts { data, l2 }, Gradients { layers: grads }))
}

/// Forward and backward on one patch.
pub fn loss_and_gradients<T: Scalar, R: Rng>(
    params: &ModelParams<T>,
    input: &Tensor<T>,
    labels: &LabelMap,
    weights: &WeightMap,
    mode: Mode,
    rng: &mut R,
    weight_decay: f64,
) -> Result<(LossParts, Gradients<T>)> {
    let cache = forward_with_cache(params, input, mode, rng)?;
    backward(params, &cache, labels, weights, weight_decay)
}

/// Lymphocyte-class probability for every pixel of a field of view.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        crate::raster::check_dims(height, width)?;
        if values.len() != height * width || values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("probabilities must be one value in [0, 1] per pixel".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Result<Self> {
        let values = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::new(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn save_png(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let bytes: Vec<u8> = self.values.iter().map(|p| (p * 255.0).round() as u8).collect();
        crate::raster::save_gray(path, self.height, self.width, &bytes)
    }
}

/// Eval-mode prediction on an image of any size: the image is mirrored
/// out to the next multiple of `2^scales` and the output cropped back.
pub fn predict<T: Scalar>(params: &ModelParams<T>, image: &RgbImage) -> Result<ProbabilityMap> {
    let m = params.config.size_multiple();
    let (h, w) = (image.height(), image.width());
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let input = if (ph, pw) == (h, w) {
        image_tensor(image)
    } else {
        let mut padded = RgbImage::new(ph, pw)?;
        for r in 0..ph {
            for c in 0..pw {
                padded.set(r, c, image.get(reflect_index(r as i64, h), reflect_index(c as i64, w)));
            }
        }
        image_tensor(&padded)
    };
    let probs = forward_eval(params, &input)?;
    let plane = ph * pw;
    let mut values = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            values.push(probs.data[plane + r * pw + c].as_f64().clamp(0.0, 1.0) as f32);
        }
    }
    ProbabilityMap::new(h, w, values)
}
