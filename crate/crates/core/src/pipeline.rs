//! Patch-wise super-resolution: split, score, choose bits, run, merge.

use std::fmt::Write as _;

use crate::bitops::BitConfig;
use crate::edge::{self, reflect_index, EdgeScore};
use crate::error::{CabmError, Result};
use crate::lut::EdgeToBitLut;
use crate::metrics;
use crate::quant::FULL_PRECISION_BITS;
use crate::selector::{select_bits, SelectorBank};
use crate::supernet::Supernet;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_PATCH: usize = 96;

/// Non-overlapping tiling of a reflect-padded image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub height: usize,
    pub width: usize,
    /// Padding added below and to the right.
    pub pad_bottom: usize,
    pub pad_right: usize,
    /// Top-left corners, row-major.
    pub positions: Vec<(usize, usize)>,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || height == 0 || width == 0 {
            return Err(CabmError::invalid("image and patch sizes must be positive"));
        }
        let rows = height.div_ceil(patch_size);
        let cols = width.div_ceil(patch_size);
        let positions = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r * patch_size, c * patch_size)))
            .collect();
        Ok(PatchGrid {
            patch_size,
            height,
            width,
            pad_bottom: rows * patch_size - height,
            pad_right: cols * patch_size - width,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Splits a `(1, C, H, W)` image into `size x size` patches.
pub fn split_patches<T: Real>(image: &Tensor<T>, size: usize) -> Result<(PatchGrid, Vec<Tensor<T>>)> {
    let [n, c, h, w] = image.shape();
    if n != 1 {
        return Err(CabmError::shape("split_patches", format!("expected one image, got {n}")));
    }
    let grid = PatchGrid::new(h, w, size)?;
    let patches = grid
        .positions
        .iter()
        .map(|&(r0, c0)| {
            Tensor::from_fn([1, c, size, size], |[_, ch, y, x]| {
                image.at(
                    0,
                    ch,
                    reflect_index((r0 + y) as isize, h),
                    reflect_index((c0 + x) as isize, w),
                )
            })
        })
        .collect();
    Ok((grid, patches))
}

/// Reassembles patches that were upscaled by `scale` and crops the padding.
pub fn merge_patches<T: Real>(grid: &PatchGrid, patches: &[Tensor<T>], scale: usize) -> Result<Tensor<T>> {
    if patches.len() != grid.len() {
        return Err(CabmError::shape(
            "merge_patches",
            format!("{} patches for a grid of {}", patches.len(), grid.len()),
        ));
    }
    if scale == 0 {
        return Err(CabmError::invalid("scale must be positive"));
    }
    let ps = grid.patch_size * scale;
    let c = patches.first().map(|p| p.shape()[1]).unwrap_or(0);
    for p in patches {
        if p.shape() != [1, c, ps, ps] {
            return Err(CabmError::shape(
                "merge_patches",
                format!("patch {:?}, expected {:?}", p.shape(), [1, c, ps, ps]),
            ));
        }
    }
    let (oh, ow) = (grid.height * scale, grid.width * scale);
    let mut out = Tensor::zeros([1, c, oh, ow]);
    for (p, &(r0, c0)) in patches.iter().zip(&grid.positions) {
        let (r0, c0) = (r0 * scale, c0 * scale);
        for ch in 0..c {
            for y in 0..ps.min(oh.saturating_sub(r0)) {
                for x in 0..ps.min(ow.saturating_sub(c0)) {
                    out.set(0, ch, r0 + y, c0 + x, p.at(0, ch, y, x));
                }
            }
        }
    }
    Ok(out)
}

/// How each patch gets its bit configuration.
#[derive(Clone, Copy, Debug)]
pub enum BitSource<'a> {
    Lut(&'a EdgeToBitLut),
    Selectors(&'a SelectorBank),
    Fixed(&'a BitConfig),
    FullPrecision,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchResult {
    pub row: usize,
    pub col: usize,
    pub edge: EdgeScore,
    /// LUT subinterval, 0 when no LUT was used.
    pub r: usize,
    pub config: BitConfig,
    pub bitops: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    /// Present when a reference image was given.
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub fab: f64,
    pub total_bitops: f64,
    pub per_patch: Vec<PatchResult>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalResult {
    /// One-row CSV: `psnr,ssim,fab,total_bitops,patches`.
    pub fn summary_csv(&self) -> String {
        format!(
            "psnr,ssim,fab,total_bitops,patches\n{},{},{},{},{}\n",
            opt(self.psnr),
            opt(self.ssim),
            self.fab,
            self.total_bitops,
            self.per_patch.len()
        )
    }

    /// Per-patch CSV: `row,col,edge,r,bitops,b1,...,bL`.
    pub fn patches_csv(&self) -> String {
        let layers = self.per_patch.first().map(|p| p.config.len()).unwrap_or(0);
        let mut s = String::from("row,col,edge,r,bitops");
        for i in 1..=layers {
            let _ = write!(s, ",b{i}");
        }
        s.push('\n');
        for p in &self.per_patch {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                p.row,
                p.col,
                p.edge.value(),
                p.r,
                p.bitops,
                p.config
            );
        }
        s
    }
}

/// Super-resolves `image` patch by patch with configurations from `source`.
/// Output is clamped to `[0, 1]`. Quality metrics are filled when `hr` is
/// given.
pub fn run_sr_with(
    image: &Tensor<f32>,
    net: &Supernet,
    source: BitSource<'_>,
    hr: Option<&Tensor<f32>>,
    patch_size: usize,
) -> Result<(Tensor<f32>, EvalResult)> {
    let layers = net.quantized_layers();
    let precision = match source {
        BitSource::Lut(lut) => {
            if lut.layers() != layers {
                return Err(CabmError::shape(
                    "run_sr",
                    format!("LUT has {} layers, network has {layers}", lut.layers()),
                ));
            }
            lut.precision()
        }
        BitSource::Selectors(bank) => bank.precision(),
        _ => edge::DEFAULT_PRECISION,
    };
    let (grid, patches) = split_patches(image, patch_size)?;
    let mut outputs = Vec::with_capacity(patches.len());
    let mut per_patch = Vec::with_capacity(patches.len());
    for (patch, &(row, col)) in patches.iter().zip(&grid.positions) {
        let edge = edge::edge_score(patch, precision)?;
        let (r, config) = match source {
            BitSource::Lut(lut) => {
                let r = lut.index_of(edge);
                (r, lut.entry(r).clone())
            }
            BitSource::Selectors(bank) => (0, select_bits(net, bank, patch)?),
            BitSource::Fixed(cfg) => (0, cfg.clone()),
            BitSource::FullPrecision => (0, BitConfig::uniform(FULL_PRECISION_BITS, layers)),
        };
        let (out, _) = net.forward_with_bits(patch, &config)?;
        let bitops = net.cost(&config, patch_size, patch_size)?.total_bitops;
        outputs.push(out.map(|v| v.clamp(0.0, 1.0)));
        per_patch.push(PatchResult {
            row,
            col,
            edge,
            r,
            config,
            bitops,
        });
    }
    let sr = merge_patches(&grid, &outputs, net.scale())?;
    let fab = per_patch.iter().map(|p| p.config.fab()).sum::<f64>() / per_patch.len() as f64;
    let total_bitops = per_patch.iter().map(|p| p.bitops).sum();
    let (psnr, ssim) = match hr {
        Some(hr) => (
            Some(metrics::psnr(&sr, hr, 1.0)?),
            Some(metrics::ssim(&sr, hr, 1.0)?),
        ),
        None => (None, None),
    };
    Ok((
        sr,
        EvalResult {
            psnr,
            ssim,
            fab,
            total_bitops,
            per_patch,
        },
    ))
}

/// [`run_sr_with`] driven by a LUT at the default patch size.
pub fn run_sr(
    image: &Tensor<f32>,
    net: &Supernet,
    lut: &EdgeToBitLut,
    hr: Option<&Tensor<f32>>,
) -> Result<(Tensor<f32>, EvalResult)> {
    run_sr_with(image, net, BitSource::Lut(lut), hr, DEFAULT_PATCH)
}

/// Averages of several evaluations, for table rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalSummary {
    pub images: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub fab: f64,
    pub bitops: f64,
}

impl EvalSummary {
    pub fn from_results(results: &[EvalResult]) -> Self {
        let n = results.len().max(1) as f64;
        EvalSummary {
            images: results.len(),
            psnr: results.iter().filter_map(|r| r.psnr).sum::<f64>() / n,
            ssim: results.iter().filter_map(|r| r.ssim).sum::<f64>() / n,
            fab: results.iter().map(|r| r.fab).sum::<f64>() / n,
            bitops: results.iter().map(|r| r.total_bitops).sum::<f64>() / n,
        }
    }
}

/// Runs each `(lr, hr)` pair through [`run_sr_with`] and averages.
pub fn evaluate(
    pairs: &[(Tensor<f32>, Tensor<f32>)],
    net: &Supernet,
    source: BitSource<'_>,
    patch_size: usize,
) -> Result<(EvalSummary, Vec<EvalResult>)> {
    let results = pairs
        .iter()
        .map(|(lr, hr)| run_sr_with(lr, net, source, Some(hr), patch_size).map(|r| r.1))
        .collect::<Result<Vec<_>>>()?;
    Ok((EvalSummary::from_results(&results), results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supernet::SupernetSpec;

    fn ramp(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| (c * 1000 + y * w + x) as f32)
    }

    #[test]
    fn split_counts_and_padding() {
        let (g, p) = split_patches(&ramp(192, 192), 96).unwrap();
        assert_eq!((p.len(), g.pad_bottom), (4, 0));
        let (g, p) = split_patches(&ramp(100, 100), 96).unwrap();
        assert_eq!((p.len(), g.pad_bottom, g.pad_right), (4, 92, 92));
        let (_, p) = split_patches(&ramp(7, 11), 4).unwrap();
        assert_eq!(p.len(), 2 * 3);
        // Reflected padding mirrors the last rows.
        let (_, p) = split_patches(&ramp(5, 4), 4).unwrap();
        assert_eq!(p[1].at(0, 0, 1, 0), ramp(5, 4).at(0, 0, 3, 0));
    }

    #[test]
    fn merge_inverts_split() {
        for (h, w, s) in [(1, 1, 3), (9, 5, 4), (16, 16, 8), (13, 30, 7)] {
            let img = ramp(h, w);
            let (g, p) = split_patches(&img, s).unwrap();
            assert_eq!(merge_patches(&g, &p, 1).unwrap(), img);
        }
        let (g, p) = split_patches(&ramp(4, 4), 2).unwrap();
        assert!(merge_patches(&g, &p[..3], 1).is_err());
    }

    #[test]
    fn block_constant_merge() {
        let grid = PatchGrid::new(4, 4, 2).unwrap();
        let patches: Vec<Tensor<f32>> = (0..4)
            .map(|i| Tensor::full([1, 1, 4, 4], (i % 2) as f32))
            .collect();
        let out = merge_patches(&grid, &patches, 2).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let want = ((y / 4) * 2 + x / 4) % 2;
                assert_eq!(out.at(0, 0, y, x), want as f32);
            }
        }
    }

    #[test]
    fn uniform_lut_matches_fixed_config() {
        let spec = SupernetSpec {
            num_blocks: 1,
            channels: 4,
            scale: 2,
            ..SupernetSpec::default()
        };
        let net = Supernet::build(spec, 3).unwrap();
        let cfg = BitConfig::uniform(6, 2);
        let lut = EdgeToBitLut::from_entries(
            0.01,
            vec![cfg.clone(); 5],
            crate::lut::Strategy::S1,
            10,
            2,
        )
        .unwrap();
        let img = Tensor::from_fn([1, 3, 10, 9], |[_, c, y, x]| {
            ((c + y * 3 + x * 7) % 11) as f32 / 11.0
        });
        let (a, ra) = run_sr_with(&img, &net, BitSource::Lut(&lut), None, 8).unwrap();
        let (b, rb) = run_sr_with(&img, &net, BitSource::Fixed(&cfg), None, 8).unwrap();
        assert_eq!(a, b);
        assert_eq!((ra.fab, ra.total_bitops), (rb.fab, rb.total_bitops));
        assert_eq!(a.shape(), [1, 3, 20, 18]);

        let flat = Tensor::full([1, 3, 8, 8], 0.5f32);
        let (_, rf) = run_sr_with(&flat, &net, BitSource::Lut(&lut), None, 8).unwrap();
        assert!(rf.per_patch.iter().all(|p| p.r == 1));
        assert_eq!(rf.fab, lut.entry(1).fab());

        let bad = EdgeToBitLut::from_entries(0.01, vec![BitConfig::uniform(6, 3)], crate::lut::Strategy::S1, 0, 0)
            .unwrap();
        assert!(run_sr(&img, &net, &bad, None).is_err());
    }
}
