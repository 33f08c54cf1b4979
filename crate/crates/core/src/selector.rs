//! Per-layer MLP bit selectors.
//!
//! Each quantized layer owns a `2 -> hidden -> K` MLP fed with the standard
//! deviation of the layer's input feature and the patch edge score. During
//! training the K quantized branches are blended with the softmax weights;
//! at inference the argmax branch is taken.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{softmax_row, Graph, Var};
use crate::bitops::BitConfig;
use crate::edge::{self, EdgeScore};
use crate::error::{CabmError, Result};
use crate::supernet::{stddev, ActivationQuantizer, Supernet};
use crate::tensor::{self, ConvSpec, Real, Tensor};

pub const DEFAULT_HIDDEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct SelectorMlp {
    pub w1: Tensor<f32>,
    pub b1: Tensor<f32>,
    pub w2: Tensor<f32>,
    pub b2: Tensor<f32>,
}

impl SelectorMlp {
    fn new(hidden: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (3.0f64 / 2.0).sqrt();
        SelectorMlp {
            w1: Tensor::from_fn([hidden, 2, 1, 1], |_| rng.gen_range(-bound..bound) as f32),
            b1: Tensor::from_fn([1, hidden, 1, 1], |_| rng.gen_range(-0.5..0.5) as f32),
            w2: Tensor::zeros([k, hidden, 1, 1]),
            b2: Tensor::zeros([1, k, 1, 1]),
        }
    }

    fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }

    fn k(&self) -> usize {
        self.w2.shape()[0]
    }

    fn specs(&self) -> Result<(ConvSpec, ConvSpec)> {
        Ok((
            ConvSpec::new(2, self.hidden(), 1, 1, 0)?,
            ConvSpec::new(self.hidden(), self.k(), 1, 1, 0)?,
        ))
    }

    /// Raw logits for one `(stddev, edge)` input.
    pub fn logits(&self, stddev: f64, edge: f64) -> Result<Vec<f64>> {
        let (s1, s2) = self.specs()?;
        let x = Tensor::from_vec([1, 2, 1, 1], vec![stddev as f32, edge as f32])?;
        let h = tensor::relu(&tensor::conv2d(&x, &self.w1, self.b1.data(), &s1)?);
        let out = tensor::conv2d(&h, &self.w2, self.b2.data(), &s2)?;
        Ok(out.data().iter().map(|&v| v as f64).collect())
    }
}

/// Softmax probabilities of one selector.
pub fn selector_forward(mlp: &SelectorMlp, stddev: f64, edge: EdgeScore) -> Result<Vec<f64>> {
    Ok(softmax_row(&mlp.logits(stddev, edge.value())?))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One selector per quantized layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectorBank {
    mlps: Vec<SelectorMlp>,
    candidate_bits: Vec<u32>,
    precision: f64,
}

impl SelectorBank {
    /// Random first layer, zero output layer: every selector starts uniform.
    pub fn new(
        layers: usize,
        candidate_bits: &[u32],
        hidden: usize,
        precision: f64,
        seed: u64,
    ) -> Result<Self> {
        if candidate_bits.is_empty() || hidden == 0 || layers == 0 {
            return Err(CabmError::invalid("selector bank needs layers, bits and hidden units"));
        }
        EdgeScore::from_steps(0, precision)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(SelectorBank {
            mlps: (0..layers)
                .map(|_| SelectorMlp::new(hidden, candidate_bits.len(), &mut rng))
                .collect(),
            candidate_bits: candidate_bits.to_vec(),
            precision,
        })
    }

    pub fn for_net(net: &Supernet, precision: f64, seed: u64) -> Result<Self> {
        Self::new(
            net.quantized_layers(),
            &net.spec().candidate_bits,
            DEFAULT_HIDDEN,
            precision,
            seed,
        )
    }

    pub fn layers(&self) -> usize {
        self.mlps.len()
    }

    pub fn mlp(&self, layer: usize) -> &SelectorMlp {
        &self.mlps[layer]
    }

    pub fn mlp_mut(&mut self, layer: usize) -> &mut SelectorMlp {
        &mut self.mlps[layer]
    }

    pub fn candidate_bits(&self) -> &[u32] {
        &self.candidate_bits
    }

    pub fn precision(&self) -> f64 {
        self.precision
    }

    pub fn hidden(&self) -> usize {
        self.mlps[0].hidden()
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.mlps.len())
            .flat_map(|l| ["w1", "b1", "w2", "b2"].map(|p| format!("selector.{l}.{p}")))
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor<f32>> {
        self.mlps
            .iter()
            .flat_map(|m| [&m.w1, &m.b1, &m.w2, &m.b2])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        self.mlps
            .iter_mut()
            .flat_map(|m| [&mut m.w1, &mut m.b1, &mut m.w2, &mut m.b2])
            .collect()
    }

    pub fn load_params(&mut self, values: Vec<Tensor<f32>>) -> Result<()> {
        let slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(CabmError::Checkpoint("selector parameter count".into()));
        }
        for (slot, v) in slots.into_iter().zip(values) {
            if slot.shape() != v.shape() {
                return Err(CabmError::Checkpoint("selector parameter shape".into()));
            }
            *slot = v;
        }
        Ok(())
    }

    pub fn probabilities(&self, layer: usize, stddev: f64, edge: EdgeScore) -> Result<Vec<f64>> {
        selector_forward(&self.mlps[layer], stddev, edge)
    }
}

fn selector_inputs(x: &Tensor<f32>, edges: &[f64]) -> Result<Tensor<f32>> {
    let n = x.shape()[0];
    if edges.len() != n {
        return Err(CabmError::shape("selector", "one edge score per sample"));
    }
    let mut data = Vec::with_capacity(2 * n);
    for (i, e) in edges.iter().enumerate() {
        data.push(stddev(x.sample(i)) as f32);
        data.push(*e as f32);
    }
    Tensor::from_vec([n, 2, 1, 1], data)
}

/// Training-time quantizer: softmax-weighted blend of all candidate branches.
pub struct SoftSelector<'a> {
    bank: &'a SelectorBank,
    edges: Vec<f64>,
    params: Vec<Var>,
    /// Probability node of each layer, in call order.
    pub probs: Vec<Var>,
}

impl<'a> SoftSelector<'a> {
    /// Registers the bank's parameters on `g` as leaves.
    pub fn new(g: &mut Graph<f32>, bank: &'a SelectorBank, edges: Vec<f64>) -> Self {
        let params = bank.params().into_iter().map(|t| g.leaf(t.clone())).collect();
        SoftSelector {
            bank,
            edges,
            params,
            probs: Vec::new(),
        }
    }

    /// Parameter leaves in [`SelectorBank::params`] order.
    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }
}

impl ActivationQuantizer<f32> for SoftSelector<'_> {
    fn quantize(&mut self, g: &mut Graph<f32>, layer: usize, x: Var, alpha: Var) -> Result<Var> {
        let mlp = &self.bank.mlps[layer];
        let (s1, s2) = mlp.specs()?;
        let inp = g.leaf(selector_inputs(g.value(x), &self.edges)?);
        let p = &self.params[4 * layer..4 * layer + 4];
        let h = g.conv2d(inp, p[0], p[1], s1)?;
        let h = g.relu(h)?;
        let logits = g.conv2d(h, p[2], p[3], s2)?;
        let probs = g.softmax(logits)?;
        self.probs.push(probs);
        let branches = self
            .bank
            .candidate_bits
            .iter()
            .map(|&b| g.fake_quant(x, alpha, &[b]))
            .collect::<Result<Vec<_>>>()?;
        g.mix(probs, &branches)
    }
}

/// Inference-time quantizer: argmax branch per sample, recorded per layer.
pub struct HardSelector<'a> {
    bank: &'a SelectorBank,
    edges: Vec<EdgeScore>,
    chosen: Vec<Vec<u32>>,
}

impl<'a> HardSelector<'a> {
    pub fn new(bank: &'a SelectorBank, edges: Vec<EdgeScore>) -> Self {
        HardSelector {
            bank,
            edges,
            chosen: Vec::new(),
        }
    }

    /// Chosen configuration of every sample.
    pub fn configs(&self) -> Vec<BitConfig> {
        (0..self.edges.len())
            .map(|n| BitConfig::new(self.chosen.iter().map(|layer| layer[n]).collect()))
            .collect()
    }
}

impl<T: Real> ActivationQuantizer<T> for HardSelector<'_> {
    fn quantize(&mut self, g: &mut Graph<T>, layer: usize, x: Var, alpha: Var) -> Result<Var> {
        let xv = g.value(x);
        let n = xv.shape()[0];
        if n != self.edges.len() {
            return Err(CabmError::shape("selector", "one edge score per sample"));
        }
        let bits = (0..n)
            .map(|i| {
                let p = self.bank.probabilities(layer, stddev(xv.sample(i)), self.edges[i])?;
                Ok(self.bank.candidate_bits[argmax(&p)])
            })
            .collect::<Result<Vec<u32>>>()?;
        let out = g.fake_quant(x, alpha, &bits)?;
        self.chosen.push(bits);
        Ok(out)
    }
}

/// Selector-chosen configurations and SR outputs for a batch of LR patches.
pub fn select_bits_batch(
    net: &Supernet,
    bank: &SelectorBank,
    patches: &Tensor<f32>,
) -> Result<(Vec<BitConfig>, Tensor<f32>)> {
    if bank.layers() != net.quantized_layers() {
        return Err(CabmError::shape("select_bits", "selector count vs quantized layers"));
    }
    let edges = edge::edge_scores(patches, bank.precision)?;
    let mut q = HardSelector::new(bank, edges);
    let out = net.forward_with(patches, &mut q)?;
    Ok((q.configs(), out))
}

/// Selector-chosen configuration for one `(1, 3, H, W)` LR patch.
pub fn select_bits(net: &Supernet, bank: &SelectorBank, patch: &Tensor<f32>) -> Result<BitConfig> {
    if patch.shape()[0] != 1 {
        return Err(CabmError::shape("select_bits", "expects one patch"));
    }
    let (mut configs, _) = select_bits_batch(net, bank, patch)?;
    Ok(configs.remove(0))
}
