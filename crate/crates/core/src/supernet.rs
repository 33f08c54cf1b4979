//! EDSR-style toy supernet with per-layer activation bit widths.
//!
//! Layout: a full-precision head conv (3 -> C), `num_blocks` residual
//! blocks of `conv -> relu -> conv` plus skip, and a full-precision tail
//! (conv C -> C*s^2, pixel shuffle, conv C -> 3). The activation entering
//! every body conv is fake-quantized and the body weights are quantized at
//! a fixed width, so the network has `2 * num_blocks` quantized layers and
//! every bit configuration shares one weight set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::bitops::{self, BitConfig, CostReport, LayerGeometry};
use crate::error::{CabmError, Result};
use crate::quant::{self, FULL_PRECISION_BITS};
use crate::tensor::{ConvSpec, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupernetSpec {
    pub num_blocks: usize,
    pub channels: usize,
    pub scale: usize,
    pub candidate_bits: Vec<u32>,
    pub weight_bit: u32,
}

impl Default for SupernetSpec {
    fn default() -> Self {
        SupernetSpec {
            num_blocks: 4,
            channels: 16,
            scale: 4,
            candidate_bits: vec![4, 6, 8],
            weight_bit: 8,
        }
    }
}

impl SupernetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.channels == 0 {
            return Err(CabmError::invalid("num_blocks and channels must be positive"));
        }
        if self.scale != 2 && self.scale != 4 {
            return Err(CabmError::invalid(format!("scale must be 2 or 4, got {}", self.scale)));
        }
        if self.candidate_bits.is_empty()
            || self.candidate_bits.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(CabmError::invalid(
                "candidate bits must be non-empty and strictly increasing",
            ));
        }
        for &b in &self.candidate_bits {
            quant::step_size(1.0, b)?;
        }
        quant::WeightQuantSpec::new(self.weight_bit)?;
        Ok(())
    }

    pub fn quantized_layers(&self) -> usize {
        2 * self.num_blocks
    }
}

/// Statistics of the activation entering one quantized layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerStats {
    pub stddev: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T: Real = f32> {
    pub spec: ConvSpec,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ConvLayer<T> {
    fn init(spec: ConvSpec, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
        let bound = gain * (3.0 / fan_in).sqrt();
        let weight = Tensor::from_fn(spec.weight_shape(), |_| {
            T::from_f64_lossy(rng.gen_range(-bound..bound))
        });
        ConvLayer {
            spec,
            weight,
            bias: Tensor::zeros([1, spec.out_channels, 1, 1]),
        }
    }

    fn cast<U: Real>(&self) -> ConvLayer<U> {
        ConvLayer {
            spec: self.spec,
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Decides how the activation entering each quantized layer is quantized.
pub trait ActivationQuantizer<T: Real> {
    fn quantize(&mut self, g: &mut Graph<T>, layer: usize, x: Var, alpha: Var) -> Result<Var>;

    /// Whether the body weights of `layer` bypass weight quantization.
    fn full_precision(&self, _layer: usize) -> bool {
        false
    }
}

/// Leaves every activation and weight unquantized.
pub struct FullPrecision;

impl<T: Real> ActivationQuantizer<T> for FullPrecision {
    fn quantize(&mut self, _g: &mut Graph<T>, _layer: usize, x: Var, _alpha: Var) -> Result<Var> {
        Ok(x)
    }

    fn full_precision(&self, _layer: usize) -> bool {
        true
    }
}

/// Fixed bit widths, either one config for the whole batch or one per sample.
pub struct FixedBits {
    /// `per_layer[l][n]` is the width for layer `l` and sample `n`.
    per_layer: Vec<Vec<u32>>,
    stats: Vec<LayerStats>,
}

impl FixedBits {
    pub fn new(config: &BitConfig) -> Self {
        FixedBits {
            per_layer: config.bits().iter().map(|&b| vec![b]).collect(),
            stats: Vec::new(),
        }
    }

    pub fn per_sample(configs: &[BitConfig]) -> Result<Self> {
        let layers = configs.first().map(|c| c.len()).unwrap_or(0);
        if configs.iter().any(|c| c.len() != layers) {
            return Err(CabmError::shape("FixedBits", "configs differ in length"));
        }
        Ok(FixedBits {
            per_layer: (0..layers)
                .map(|l| configs.iter().map(|c| c.bits()[l]).collect())
                .collect(),
            stats: Vec::new(),
        })
    }

    pub fn layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn into_stats(self) -> Vec<LayerStats> {
        self.stats
    }
}

impl<T: Real> ActivationQuantizer<T> for FixedBits {
    fn quantize(&mut self, g: &mut Graph<T>, layer: usize, x: Var, alpha: Var) -> Result<Var> {
        self.stats.push(LayerStats {
            stddev: stddev(g.value(x).data()),
        });
        g.fake_quant(x, alpha, &self.per_layer[layer])
    }

    fn full_precision(&self, layer: usize) -> bool {
        self.per_layer[layer].iter().all(|&b| b == FULL_PRECISION_BITS)
    }
}

/// Records each quantized layer's input without quantizing it.
struct Recorder {
    activations: Vec<Vec<f32>>,
}

impl<T: Real> ActivationQuantizer<T> for Recorder {
    fn quantize(&mut self, g: &mut Graph<T>, _layer: usize, x: Var, _alpha: Var) -> Result<Var> {
        self.activations
            .push(g.value(x).data().iter().map(|v| v.as_f64() as f32).collect());
        Ok(x)
    }

    fn full_precision(&self, _layer: usize) -> bool {
        true
    }
}

/// Population standard deviation.
pub fn stddev<T: Real>(values: &[T]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    (values.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Output of [`Supernet::forward_graph`].
pub struct ForwardTrace {
    pub output: Var,
    /// Parameter leaves in [`Supernet::params`] order.
    pub params: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Supernet<T: Real = f32> {
    spec: SupernetSpec,
    head: ConvLayer<T>,
    body: Vec<ConvLayer<T>>,
    upsample: ConvLayer<T>,
    tail: ConvLayer<T>,
    alphas: Vec<Tensor<T>>,
}

impl<T: Real> Supernet<T> {
    /// Deterministically initialised network.
    pub fn build(spec: SupernetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = spec.channels;
        let head = ConvLayer::init(ConvSpec::same(3, c, 3)?, 1.0, &mut rng);
        let mut body = Vec::with_capacity(spec.quantized_layers());
        for _ in 0..spec.num_blocks {
            body.push(ConvLayer::init(ConvSpec::same(c, c, 3)?, 1.0, &mut rng));
            body.push(ConvLayer::init(ConvSpec::same(c, c, 3)?, 0.1, &mut rng));
        }
        let s2 = spec.scale * spec.scale;
        let upsample = ConvLayer::init(ConvSpec::same(c, c * s2, 3)?, 1.0, &mut rng);
        let tail = ConvLayer::init(ConvSpec::same(c, 3, 3)?, 1.0, &mut rng);
        let alphas = vec![Tensor::scalar(T::one()); spec.quantized_layers()];
        Ok(Supernet {
            spec,
            head,
            body,
            upsample,
            tail,
            alphas,
        })
    }

    pub fn spec(&self) -> &SupernetSpec {
        &self.spec
    }

    pub fn quantized_layers(&self) -> usize {
        self.spec.quantized_layers()
    }

    pub fn scale(&self) -> usize {
        self.spec.scale
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.alphas.iter().map(|a| a.data()[0].as_f64()).collect()
    }

    pub fn set_alpha(&mut self, layer: usize, alpha: f64) -> Result<()> {
        quant::step_size(alpha, 2)?;
        let slot = self
            .alphas
            .get_mut(layer)
            .ok_or_else(|| CabmError::invalid(format!("no quantized layer {layer}")))?;
        *slot = Tensor::scalar(T::from_f64_lossy(alpha));
        Ok(())
    }

    pub fn body_layer(&self, i: usize) -> &ConvLayer<T> {
        &self.body[i]
    }

    pub fn body_layer_mut(&mut self, i: usize) -> &mut ConvLayer<T> {
        &mut self.body[i]
    }

    pub fn cast<U: Real>(&self) -> Supernet<U> {
        Supernet {
            spec: self.spec.clone(),
            head: self.head.cast(),
            body: self.body.iter().map(|l| l.cast()).collect(),
            upsample: self.upsample.cast(),
            tail: self.tail.cast(),
            alphas: self.alphas.iter().map(|a| a.cast()).collect(),
        }
    }

    /// Parameter names, in [`Supernet::params`] order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["head.weight".to_string(), "head.bias".to_string()];
        for i in 0..self.body.len() {
            names.push(format!("body.{i}.weight"));
            names.push(format!("body.{i}.bias"));
        }
        names.extend(
            ["upsample.weight", "upsample.bias", "tail.weight", "tail.bias"].map(String::from),
        );
        names.extend((0..self.alphas.len()).map(|i| format!("alpha.{i}")));
        names
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.head.weight, &self.head.bias];
        for l in &self.body {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.extend([
            &self.upsample.weight,
            &self.upsample.bias,
            &self.tail.weight,
            &self.tail.bias,
        ]);
        out.extend(self.alphas.iter());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.head.weight, &mut self.head.bias];
        for l in &mut self.body {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.extend([
            &mut self.upsample.weight,
            &mut self.upsample.bias,
            &mut self.tail.weight,
            &mut self.tail.bias,
        ]);
        out.extend(self.alphas.iter_mut());
        out
    }

    /// Index of the first alpha in [`Supernet::params`].
    pub fn alpha_param_offset(&self) -> usize {
        2 + 2 * self.body.len() + 4
    }

    /// Replaces every parameter; shapes must match.
    pub fn load_params(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        let slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(CabmError::Checkpoint(format!(
                "expected {} parameters, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (slot, v) in slots.into_iter().zip(values) {
            if slot.shape() != v.shape() {
                return Err(CabmError::Checkpoint(format!(
                    "parameter shape {:?} vs {:?}",
                    slot.shape(),
                    v.shape()
                )));
            }
            *slot = v;
        }
        Ok(())
    }

    /// Records the forward pass for input `x` onto `g`.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        x: Var,
        quantizer: &mut dyn ActivationQuantizer<T>,
    ) -> Result<ForwardTrace> {
        let [_, c, _, _] = g.value(x).shape();
        if c != 3 {
            return Err(CabmError::shape("supernet", format!("expected 3 channels, got {c}")));
        }
        let params: Vec<Var> = self.params().into_iter().map(|t| g.leaf(t.clone())).collect();
        let alpha0 = self.alpha_param_offset();
        let mut h = g.conv2d(x, params[0], params[1], self.head.spec)?;
        for b in 0..self.spec.num_blocks {
            let mut y = h;
            for j in 0..2 {
                let l = 2 * b + j;
                let a = quantizer.quantize(g, l, y, params[alpha0 + l])?;
                let w = if quantizer.full_precision(l) {
                    params[2 + 2 * l]
                } else {
                    g.weight_quant(params[2 + 2 * l], self.spec.weight_bit)?
                };
                y = g.conv2d(a, w, params[3 + 2 * l], self.body[l].spec)?;
                if j == 0 {
                    y = g.relu(y)?;
                }
            }
            h = g.add(h, y)?;
        }
        let t = 2 + 2 * self.body.len();
        let u = g.conv2d(h, params[t], params[t + 1], self.upsample.spec)?;
        let s = g.pixel_shuffle(u, self.spec.scale)?;
        let output = g.conv2d(s, params[t + 2], params[t + 3], self.tail.spec)?;
        Ok(ForwardTrace { output, params })
    }

    pub fn forward_with(
        &self,
        lr: &Tensor<T>,
        quantizer: &mut dyn ActivationQuantizer<T>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.leaf(lr.clone());
        let trace = self.forward_graph(&mut g, x, quantizer)?;
        Ok(g.value(trace.output).clone())
    }

    /// Inference with one bit per quantized layer; also returns the input
    /// standard deviation of each quantized layer.
    pub fn forward_with_bits(
        &self,
        lr: &Tensor<T>,
        config: &BitConfig,
    ) -> Result<(Tensor<T>, Vec<LayerStats>)> {
        self.check_config(config)?;
        let mut q = FixedBits::new(config);
        let out = self.forward_with(lr, &mut q)?;
        Ok((out, q.into_stats()))
    }

    pub fn forward_full_precision(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_with(lr, &mut FullPrecision)
    }

    pub fn check_config(&self, config: &BitConfig) -> Result<()> {
        if config.len() != self.quantized_layers() {
            return Err(CabmError::shape(
                "bit config",
                format!(
                    "{} bits for {} quantized layers",
                    config.len(),
                    self.quantized_layers()
                ),
            ));
        }
        for &b in config.bits() {
            if b != FULL_PRECISION_BITS && !self.spec.candidate_bits.contains(&b) {
                return Err(CabmError::invalid(format!("bit {b} is not a candidate")));
            }
        }
        Ok(())
    }

    /// Sets every clamp bound from the 99.9th percentile of its layer's
    /// full-precision input over `batch`.
    pub fn calibrate_alphas(&mut self, batch: &Tensor<T>) -> Result<Vec<f64>> {
        let mut rec = Recorder {
            activations: Vec::new(),
        };
        self.forward_with(batch, &mut rec)?;
        let alphas: Vec<f64> = rec.activations.iter().map(|a| quant::init_alpha(a)).collect();
        for (l, &a) in alphas.iter().enumerate() {
            self.set_alpha(l, a)?;
        }
        Ok(alphas)
    }

    /// Convolution geometry for an LR input of `h x w`.
    pub fn layout(&self, h: usize, w: usize) -> Vec<LayerGeometry> {
        let s = self.spec.scale;
        let geom = |name: String, spec: ConvSpec, oh, ow, quantized| LayerGeometry {
            name,
            spec,
            out_h: oh,
            out_w: ow,
            quantized,
        };
        let mut out = vec![geom("head".into(), self.head.spec, h, w, false)];
        for (i, l) in self.body.iter().enumerate() {
            out.push(geom(format!("body.{i}"), l.spec, h, w, true));
        }
        out.push(geom("upsample".into(), self.upsample.spec, h, w, false));
        out.push(geom("tail".into(), self.tail.spec, h * s, w * s, false));
        out
    }

    pub fn cost(&self, config: &BitConfig, h: usize, w: usize) -> Result<CostReport> {
        bitops::network_bitops(&self.layout(h, w), config, self.spec.weight_bit)
    }
}

/// Mean absolute difference between two same-shape tensors.
pub fn l1_loss<T: Real>(sr: &Tensor<T>, hr: &Tensor<T>) -> Result<f64> {
    sr.require_same_shape(hr, "l1_loss")?;
    Ok(crate::autograd::mean_abs_diff(sr, hr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv2d, pixel_shuffle};

    fn small_spec(scale: usize) -> SupernetSpec {
        SupernetSpec {
            num_blocks: 2,
            channels: 4,
            scale,
            ..SupernetSpec::default()
        }
    }

    fn input(seed: u64, h: usize, w: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([1, 3, h, w], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn build_properties() {
        let net = Supernet::<f32>::build(SupernetSpec::default(), 1).unwrap();
        assert_eq!(net.quantized_layers(), 8);
        let again = Supernet::<f32>::build(SupernetSpec::default(), 1).unwrap();
        assert_eq!(net, again);
        let out = net.forward_full_precision(&input(0, 24, 24)).unwrap();
        assert_eq!(out.shape(), [1, 3, 96, 96]);
        assert!(Supernet::<f32>::build(SupernetSpec { scale: 3, ..small_spec(2) }, 0).is_err());
    }

    #[test]
    fn sentinel_config_is_full_precision() {
        let mut net = Supernet::<f32>::build(small_spec(2), 2).unwrap();
        let x = input(1, 8, 8);
        net.calibrate_alphas(&x).unwrap();
        let (a, stats) = net.forward_with_bits(&x, &BitConfig::uniform(32, 4)).unwrap();
        let b = net.forward_full_precision(&x).unwrap();
        assert_eq!(a.max_abs_diff(&b).unwrap(), 0.0);
        assert_eq!(stats.len(), 4);
        assert!(stats.iter().all(|s| s.stddev >= 0.0));
    }

    #[test]
    fn zero_input_same_across_configs() {
        let mut net = Supernet::<f32>::build(small_spec(2), 3).unwrap();
        for l in 0..4 {
            net.set_alpha(l, 0.5 + l as f64 * 0.1).unwrap();
        }
        // Biases after the body keep the output non-trivial while every
        // quantized activation stays at zero.
        net.upsample.bias = Tensor::from_fn([1, 16, 1, 1], |[_, c, _, _]| 0.01 * c as f32);
        net.tail.bias = Tensor::from_vec([1, 3, 1, 1], vec![0.1, -0.2, 0.3]).unwrap();
        let x = Tensor::zeros([1, 3, 6, 6]);
        let fp = net.forward_full_precision(&x).unwrap();
        assert!(fp.data().iter().any(|&v| v != 0.0));
        for cfg in [[4, 4, 4, 4], [6, 6, 6, 6], [8, 8, 8, 8], [4, 8, 6, 4]] {
            let out = net.forward_with_bits(&x, &BitConfig::new(cfg.to_vec())).unwrap().0;
            assert_eq!(out, fp);
        }
    }

    #[test]
    fn zero_body_reduces_to_head_and_tail() {
        let mut net = Supernet::<f32>::build(small_spec(2), 4).unwrap();
        for l in &mut net.body {
            l.weight = Tensor::zeros(l.weight.shape());
        }
        let x = input(5, 6, 7);
        let h = conv2d(&x, &net.head.weight, net.head.bias.data(), &net.head.spec).unwrap();
        let u = conv2d(&h, &net.upsample.weight, net.upsample.bias.data(), &net.upsample.spec)
            .unwrap();
        let s = pixel_shuffle(&u, 2).unwrap();
        let expected = conv2d(&s, &net.tail.weight, net.tail.bias.data(), &net.tail.spec).unwrap();
        for cfg in [BitConfig::uniform(4, 4), BitConfig::uniform(8, 4), BitConfig::uniform(32, 4)] {
            let (out, _) = net.forward_with_bits(&x, &cfg).unwrap();
            assert_eq!(out, expected);
        }
    }

    #[test]
    fn weight_sharing_and_order_independence() {
        let mut net = Supernet::<f32>::build(small_spec(2), 6).unwrap();
        let x = input(7, 8, 8);
        net.calibrate_alphas(&x).unwrap();
        let before = net.clone();
        let c4 = BitConfig::uniform(4, 4);
        let c8 = BitConfig::uniform(8, 4);
        let a1 = net.forward_with_bits(&x, &c4).unwrap().0;
        let b1 = net.forward_with_bits(&x, &c8).unwrap().0;
        let b2 = net.forward_with_bits(&x, &c8).unwrap().0;
        let a2 = net.forward_with_bits(&x, &c4).unwrap().0;
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_ne!(a1, b1);
        assert_eq!(net, before);
    }

    #[test]
    fn config_length_checked() {
        let net = Supernet::<f32>::build(small_spec(2), 0).unwrap();
        let x = input(0, 4, 4);
        assert!(net.forward_with_bits(&x, &BitConfig::uniform(8, 3)).is_err());
        assert!(net.forward_with_bits(&x, &BitConfig::uniform(5, 4)).is_err());
    }

    #[test]
    fn l1_examples() {
        let a = Tensor::from_vec([1, 1, 1, 2], vec![0.0f32, 1.0]).unwrap();
        let b = Tensor::from_vec([1, 1, 1, 2], vec![1.0f32, 1.0]).unwrap();
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_loss(&a, &b).unwrap(), 0.5);
        let shifted = a.map(|v| v + 0.25);
        assert!((l1_loss(&shifted, &a).unwrap() - 0.25).abs() < 1e-7);
        assert!(l1_loss(&a, &Tensor::zeros([1, 1, 2, 1])).is_err());
    }

    #[test]
    fn layout_matches_forward() {
        let net = Supernet::<f32>::build(small_spec(4), 0).unwrap();
        let layout = net.layout(5, 6);
        assert_eq!(layout.iter().filter(|l| l.quantized).count(), 4);
        assert_eq!(layout.last().unwrap().out_h, 20);
        let cost = net.cost(&BitConfig::uniform(8, 4), 5, 6).unwrap();
        assert_eq!(cost.fab, 8.0);
    }
}
