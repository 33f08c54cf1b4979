//! Supernet training, BitOPs-weighted subnet sampling and LUT fine-tuning.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::bitops::BitConfig;
use crate::data::PatchDataset;
use crate::error::{CabmError, Result};
use crate::lut::EdgeToBitLut;
use crate::selector::{SelectorBank, SoftSelector};
use crate::supernet::{ActivationQuantizer, FixedBits, Supernet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimisation schedule shared by every training routine.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Cosine decay of the step size to zero over the run.
    pub cosine: bool,
    /// Weight of the normalised BitOPs penalty.
    pub lambda: f64,
    /// Selector step size relative to `lr`.
    pub selector_lr_scale: f64,
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            optimizer: OptimizerKind::Sgd { momentum: 0.9 },
            cosine: true,
            lambda: 0.05,
            selector_lr_scale: 1.0,
            seed: 0,
        }
    }
}

impl Schedule {
    fn lr_at(&self, step: usize, total: usize) -> f64 {
        if !self.cosine || total == 0 {
            return self.lr;
        }
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
    }
}

/// First-order optimiser with per-parameter state.
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Applies one update. Missing gradients leave the parameter untouched.
    pub fn step(&mut self, params: Vec<&mut Tensor<f32>>, grads: &[Option<Vec<f32>>], lr: f64) {
        if self.m.len() != params.len() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    for ((w, &gi), mi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()) {
                        *mi = momentum * *mi + gi as f64;
                        *w -= (lr * *mi) as f32;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.t as i32);
                    let c2 = 1.0 - beta2.powi(self.t as i32);
                    for (((w, &gi), mi), vi) in
                        p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        let gi = gi as f64;
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *w -= (lr * (*mi / c1) / ((*vi / c2).sqrt() + eps)) as f32;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossPoint {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub l1: f64,
    pub penalty: f64,
}

/// Per-step loss curve.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub points: Vec<LossPoint>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,epoch,lr,loss,l1,penalty\n");
        for p in &self.points {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                p.step, p.epoch, p.lr, p.loss, p.l1, p.penalty
            );
        }
        s
    }

    /// Mean total loss of the given epoch.
    pub fn epoch_mean(&self, epoch: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .points
            .iter()
            .filter(|p| p.epoch == epoch)
            .map(|p| p.loss)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn epochs(&self) -> usize {
        self.points.last().map(|p| p.epoch + 1).unwrap_or(0)
    }
}

const MIN_ALPHA: f32 = 1e-3;

fn clamp_alphas(net: &mut Supernet) {
    let off = net.alpha_param_offset();
    for p in net.params_mut().into_iter().skip(off) {
        let v = &mut p.data_mut()[0];
        *v = v.max(MIN_ALPHA);
    }
}

fn collect_grads(g: &Graph<f32>, vars: &[Var]) -> Vec<Option<Vec<f32>>> {
    vars.iter().map(|&v| g.grad(v).map(|s| s.to_vec())).collect()
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(CabmError::Diverged {
            step,
            detail: format!("loss became {loss}"),
        })
    }
}

/// Generic l1 training loop; `quantizer_for` builds the per-batch quantizer.
fn train_l1<F>(
    net: &mut Supernet,
    data: &PatchDataset,
    sched: &Schedule,
    mut quantizer_for: F,
) -> Result<TrainLog>
where
    F: FnMut(&[usize], &mut ChaCha8Rng) -> Result<Box<dyn ActivationQuantizer<f32>>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let steps_per_epoch = data.len().div_ceil(sched.batch_size.max(1));
    let total = steps_per_epoch * sched.epochs;
    let mut opt = Optimizer::new(sched.optimizer);
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..sched.epochs {
        for idx in data.epoch_batches(sched.batch_size, &mut rng) {
            let (lr_b, hr_b, _) = data.batch(&idx)?;
            let mut q = quantizer_for(&idx, &mut rng)?;
            let mut g = Graph::new();
            let x = g.leaf(lr_b);
            let trace = net.forward_graph(&mut g, x, q.as_mut())?;
            let loss = g.l1_loss(trace.output, &hr_b)?;
            let lv = g.value(loss).data()[0] as f64;
            check_finite(lv, step)?;
            g.backward(loss)?;
            let grads = collect_grads(&g, &trace.params);
            let lr = sched.lr_at(step, total);
            opt.step(net.params_mut(), &grads, lr);
            clamp_alphas(net);
            log.points.push(LossPoint {
                step,
                epoch,
                lr,
                loss: lv,
                l1: lv,
                penalty: 0.0,
            });
            step += 1;
        }
    }
    Ok(log)
}

/// Trains shared weights under one fixed configuration (e.g. all 8-bit).
pub fn train_fixed(
    net: &mut Supernet,
    data: &PatchDataset,
    sched: &Schedule,
    config: &BitConfig,
) -> Result<TrainLog> {
    net.check_config(config)?;
    let config = config.clone();
    train_l1(net, data, sched, move |_, _| Ok(Box::new(FixedBits::new(&config))))
}

/// Joint training of shared weights, clamp bounds and selectors.
///
/// Loss is `l1(SR, HR) + lambda * E_p[BitOPs] / BitOPs(all max-bit)`, where
/// the expectation uses each selector's softmax over the candidate widths.
pub fn train_supernet(
    net: &mut Supernet,
    selectors: &mut SelectorBank,
    data: &PatchDataset,
    sched: &Schedule,
) -> Result<TrainLog> {
    if selectors.layers() != net.quantized_layers() {
        return Err(CabmError::shape("train_supernet", "selector count vs quantized layers"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let steps_per_epoch = data.len().div_ceil(sched.batch_size.max(1));
    let total = steps_per_epoch * sched.epochs;
    let mut net_opt = Optimizer::new(sched.optimizer);
    let mut sel_opt = Optimizer::new(sched.optimizer);
    let mut log = TrainLog::default();

    let (ph, pw) = {
        let s = data.lr[0].shape();
        (s[2], s[3])
    };
    let cands = net.spec().candidate_bits.clone();
    let max_bit = *cands.last().expect("validated non-empty");
    let layout = net.layout(ph, pw);
    let macs: Vec<f64> = layout
        .iter()
        .filter(|l| l.quantized)
        .map(|l| crate::bitops::layer_macs(&l.spec, l.out_h, l.out_w) as f64)
        .collect();
    let w_bit = net.spec().weight_bit as f64;
    let norm: f64 = macs.iter().map(|m| m * max_bit as f64 * w_bit).sum();

    let mut step = 0;
    for epoch in 0..sched.epochs {
        for idx in data.epoch_batches(sched.batch_size, &mut rng) {
            let (lr_b, hr_b, edges) = data.batch(&idx)?;
            let n = idx.len();
            let mut g = Graph::new();
            let x = g.leaf(lr_b);
            let mut q = SoftSelector::new(&mut g, selectors, edges.iter().map(|e| e.value()).collect());
            let trace = net.forward_graph(&mut g, x, &mut q)?;
            let l1 = g.l1_loss(trace.output, &hr_b)?;
            let mut loss = l1;
            let mut penalty_terms = Vec::new();
            if sched.lambda != 0.0 {
                for (l, &p) in q.probs.iter().enumerate() {
                    let coeffs: Vec<f32> = (0..n)
                        .flat_map(|_| cands.iter())
                        .map(|&b| (sched.lambda * macs[l] * b as f64 * w_bit / (norm * n as f64)) as f32)
                        .collect();
                    penalty_terms.push(g.dot(p, coeffs)?);
                }
                for t in penalty_terms {
                    loss = g.add(loss, t)?;
                }
            }
            let sel_vars = q.param_vars().to_vec();
            let lv = g.value(loss).data()[0] as f64;
            let l1v = g.value(l1).data()[0] as f64;
            check_finite(lv, step)?;
            g.backward(loss)?;
            let lr = sched.lr_at(step, total);
            net_opt.step(net.params_mut(), &collect_grads(&g, &trace.params), lr);
            sel_opt.step(
                selectors.params_mut(),
                &collect_grads(&g, &sel_vars),
                lr * sched.selector_lr_scale,
            );
            clamp_alphas(net);
            log.points.push(LossPoint {
                step,
                epoch,
                lr,
                loss: lv,
                l1: l1v,
                penalty: lv - l1v,
            });
            step += 1;
        }
    }
    Ok(log)
}

/// Every configuration over `candidates` for `layers` layers, in
/// lexicographic order.
pub fn enumerate_configs(candidates: &[u32], layers: usize) -> Vec<BitConfig> {
    let mut out = vec![Vec::new()];
    for _ in 0..layers {
        out = out
            .into_iter()
            .flat_map(|prefix: Vec<u32>| {
                candidates.iter().map(move |&b| {
                    let mut p = prefix.clone();
                    p.push(b);
                    p
                })
            })
            .collect();
    }
    out.into_iter().map(BitConfig::new).collect()
}

/// Subnets bucketed into easy / medium / hard by BitOPs.
#[derive(Clone, Debug, PartialEq)]
pub struct DifficultyLevels {
    pub buckets: [Vec<(BitConfig, f64)>; 3],
}

impl DifficultyLevels {
    /// Splits at the 1/3 and 2/3 quantiles of the BitOPs distribution:
    /// easy `< t1`, medium `[t1, t2)`, hard `>= t2`.
    pub fn by_terciles(mut records: Vec<(BitConfig, f64)>) -> Result<Self> {
        if records.is_empty() {
            return Err(CabmError::invalid("no subnets to bucket"));
        }
        records.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        let n = records.len();
        let t1 = records[n / 3].1;
        let t2 = records[(2 * n) / 3].1;
        let mut buckets: [Vec<(BitConfig, f64)>; 3] = Default::default();
        for r in records {
            let m = if r.1 < t1 {
                0
            } else if r.1 < t2 {
                1
            } else {
                2
            };
            buckets[m].push(r);
        }
        Ok(DifficultyLevels { buckets })
    }

    pub fn from_buckets(buckets: [Vec<(BitConfig, f64)>; 3]) -> Self {
        DifficultyLevels { buckets }
    }

    /// All configurations of `net`, costed at an LR patch of `h x w`.
    pub fn for_net(net: &Supernet, h: usize, w: usize) -> Result<Self> {
        let configs = enumerate_configs(&net.spec().candidate_bits, net.quantized_layers());
        let records = configs
            .into_iter()
            .map(|c| {
                let cost = net.cost(&c, h, w)?.total_bitops;
                Ok((c, cost))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::by_terciles(records)
    }
}

/// Level probabilities `N_m * sum_k BitOPs_k^2`, normalised over the levels.
pub fn level_probabilities(levels: &DifficultyLevels) -> Result<[f64; 3]> {
    let weights: Vec<f64> = levels
        .buckets
        .iter()
        .map(|b| b.len() as f64 * b.iter().map(|(_, c)| c * c).sum::<f64>())
        .collect();
    let total: f64 = weights.iter().sum();
    if levels.buckets.iter().all(|b| b.is_empty()) || !(total > 0.0) {
        return Err(CabmError::invalid("all difficulty levels are empty"));
    }
    Ok([weights[0] / total, weights[1] / total, weights[2] / total])
}

/// Draws a level by its probability, then a configuration uniformly in it.
pub struct LevelSampler<'a> {
    levels: &'a DifficultyLevels,
    probs: [f64; 3],
}

impl<'a> LevelSampler<'a> {
    pub fn new(levels: &'a DifficultyLevels) -> Result<Self> {
        Ok(LevelSampler {
            probs: level_probabilities(levels)?,
            levels,
        })
    }

    pub fn probabilities(&self) -> [f64; 3] {
        self.probs
    }

    pub fn sample_level(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (m, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc && !self.levels.buckets[m].is_empty() {
                return m;
            }
        }
        (0..3)
            .rev()
            .find(|&m| !self.levels.buckets[m].is_empty())
            .expect("at least one bucket is non-empty")
    }

    pub fn sample(&self, rng: &mut impl Rng) -> &'a BitConfig {
        let bucket = &self.levels.buckets[self.sample_level(rng)];
        &bucket[rng.gen_range(0..bucket.len())].0
    }
}

/// How subnets are drawn per step in [`train_with_sampling`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubnetSampling {
    /// Uniform over all configurations.
    Uniform,
    /// Level by BitOPs-weighted probability, then uniform within the level.
    BitOps,
}

/// Trains shared weights on one sampled subnet per step.
pub fn train_with_sampling(
    net: &mut Supernet,
    data: &PatchDataset,
    levels: &DifficultyLevels,
    sampling: SubnetSampling,
    sched: &Schedule,
) -> Result<TrainLog> {
    let sampler = LevelSampler::new(levels)?;
    let all: Vec<&BitConfig> = levels.buckets.iter().flatten().map(|(c, _)| c).collect();
    train_l1(net, data, sched, |_, rng| {
        let cfg = match sampling {
            SubnetSampling::Uniform => all[rng.gen_range(0..all.len())],
            SubnetSampling::BitOps => sampler.sample(rng),
        };
        Ok(Box::new(FixedBits::new(cfg)))
    })
}

/// BitOPs-weighted subnet sampling.
pub fn train_with_bitops_sampling(
    net: &mut Supernet,
    data: &PatchDataset,
    levels: &DifficultyLevels,
    sched: &Schedule,
) -> Result<TrainLog> {
    train_with_sampling(net, data, levels, SubnetSampling::BitOps, sched)
}

/// Fine-tunes shared weights with each patch quantized by its LUT entry.
pub fn finetune_cabm(
    net: &mut Supernet,
    lut: &EdgeToBitLut,
    data: &PatchDataset,
    sched: &Schedule,
) -> Result<TrainLog> {
    if lut.layers() != net.quantized_layers() {
        return Err(CabmError::shape("finetune_cabm", "LUT layers vs quantized layers"));
    }
    let configs: Vec<BitConfig> = data.edges.iter().map(|e| lut.lookup(*e).clone()).collect();
    train_l1(net, data, sched, |idx, _| {
        let batch: Vec<BitConfig> = idx.iter().map(|&i| configs[i].clone()).collect();
        Ok(Box::new(FixedBits::per_sample(&batch)?))
    })
}
