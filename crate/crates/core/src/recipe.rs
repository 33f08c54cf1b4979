//! The full training and evaluation flow at toy scale.
//!
//! 1. Build the network, calibrate clamp bounds and warm it up with every
//!    body layer fixed at the largest candidate width.
//! 2. Jointly train weights, clamp bounds and selectors.
//! 3. Record the selectors' choices on the training patches and build a LUT.
//! 4. Fine-tune the weights under the LUT configurations.
//!
//! The fixed-width baseline continues the warm-up for as many epochs as
//! steps 2 and 4 together use.

use crate::bitops::BitConfig;
use crate::config::RunConfig;
use crate::data::{crop_to_multiple, downsample, synth_images, PatchDataset, SynthKind};
use crate::error::Result;
use crate::lut::{build_lut, collect_records, BitRecord, EdgeToBitLut};
use crate::pipeline::{run_sr_with, BitSource, EvalResult, EvalSummary};
use crate::selector::SelectorBank;
use crate::supernet::Supernet;
use crate::tensor::Tensor;
use crate::train::{finetune_cabm, train_fixed, train_supernet, TrainLog};

/// Warm-up: build, calibrate and train at the largest candidate width.
pub fn pretrain(cfg: &RunConfig, data: &PatchDataset) -> Result<(Supernet, TrainLog)> {
    let mut net = Supernet::build(cfg.model.clone(), cfg.seed)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let (lr, _, _) = data.batch(&all)?;
    net.calibrate_alphas(&lr)?;
    let top = top_config(&net);
    let log = train_fixed(&mut net, data, &cfg.pretrain.to_schedule(cfg.seed)?, &top)?;
    Ok((net, log))
}

/// Every quantized layer at the largest candidate width.
pub fn top_config(net: &Supernet) -> BitConfig {
    let top = *net.spec().candidate_bits.last().expect("validated non-empty");
    BitConfig::uniform(top, net.quantized_layers())
}

/// All artefacts of one run.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub baseline: Supernet,
    /// Jointly trained network, before fine-tuning.
    pub supernet: Supernet,
    pub selectors: SelectorBank,
    pub records: Vec<BitRecord>,
    pub lut: EdgeToBitLut,
    pub finetuned: Supernet,
    pub logs: Logs,
}

#[derive(Clone, Debug, Default)]
pub struct Logs {
    pub pretrain: TrainLog,
    pub baseline: TrainLog,
    pub supernet: TrainLog,
    pub finetune: TrainLog,
}

pub fn run(cfg: &RunConfig) -> Result<Artifacts> {
    let data = cfg.dataset()?;
    let (warm, pretrain_log) = pretrain(cfg, &data)?;
    log::info!("warm-up done: {} patches, {} steps", data.len(), pretrain_log.points.len());

    let mut baseline = warm.clone();
    let extra = cfg.train.epochs + cfg.finetune.epochs;
    let mut base_sched = cfg.pretrain.to_schedule(cfg.seed.wrapping_add(1))?;
    base_sched.epochs = extra;
    let baseline_log = train_fixed(&mut baseline, &data, &base_sched, &top_config(&warm))?;

    let mut supernet = warm;
    let mut selectors = SelectorBank::for_net(&supernet, cfg.precision, cfg.seed.wrapping_add(2))?;
    let supernet_log = train_supernet(
        &mut supernet,
        &mut selectors,
        &data,
        &cfg.train.to_schedule(cfg.seed.wrapping_add(1))?,
    )?;
    log::info!("joint training done");

    let records = collect_records(&supernet, &selectors, &data.lr)?;
    let lut = build_lut(&records, &cfg.lut_params()?)?;
    let mut finetuned = supernet.clone();
    let finetune_log = finetune_cabm(
        &mut finetuned,
        &lut,
        &data,
        &cfg.finetune.to_schedule(cfg.seed.wrapping_add(3))?,
    )?;
    Ok(Artifacts {
        baseline,
        supernet,
        selectors,
        records,
        lut,
        finetuned,
        logs: Logs {
            pretrain: pretrain_log,
            baseline: baseline_log,
            supernet: supernet_log,
            finetune: finetune_log,
        },
    })
}

/// A held-out synthetic image with its family.
#[derive(Clone, Debug)]
pub struct HeldOut {
    pub kind: SynthKind,
    pub lr: Tensor<f32>,
    pub hr: Tensor<f32>,
}

pub fn held_out(count: usize, size: usize, scale: usize, seed: u64) -> Result<Vec<HeldOut>> {
    synth_images(count, size, seed)
        .into_iter()
        .map(|(kind, img)| {
            let hr = crop_to_multiple(&img, scale);
            Ok(HeldOut {
                kind,
                lr: downsample(&hr, scale)?,
                hr,
            })
        })
        .collect()
}

/// Averages over held-out images plus the mean FAB of patches from smooth
/// and from textured families.
#[derive(Clone, Debug, PartialEq)]
pub struct HeldOutEval {
    pub summary: EvalSummary,
    pub smooth_fab: f64,
    pub textured_fab: f64,
    pub results: Vec<EvalResult>,
}

pub fn evaluate_held_out(
    images: &[HeldOut],
    net: &Supernet,
    source: BitSource<'_>,
    patch: usize,
) -> Result<HeldOutEval> {
    let results = images
        .iter()
        .map(|h| run_sr_with(&h.lr, net, source, Some(&h.hr), patch).map(|r| r.1))
        .collect::<Result<Vec<_>>>()?;
    let (mut smooth, mut textured) = (Vec::new(), Vec::new());
    for (h, r) in images.iter().zip(&results) {
        let bucket = if h.kind.is_smooth() { &mut smooth } else { &mut textured };
        bucket.extend(r.per_patch.iter().map(|p| p.config.fab()));
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(HeldOutEval {
        summary: EvalSummary::from_results(&results),
        smooth_fab: mean(&smooth),
        textured_fab: mean(&textured),
        results,
    })
}
