//! Synthetic toy images and LR/HR patch datasets.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::edge::{self, EdgeScore};
use crate::error::{CabmError, Result};
use crate::tensor::Tensor;

/// Content families of the synthetic generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Flat,
    Gradient,
    Checkerboard,
    Blobs,
    Noise,
    Stripes,
}

impl SynthKind {
    pub const ALL: [SynthKind; 6] = [
        SynthKind::Flat,
        SynthKind::Gradient,
        SynthKind::Checkerboard,
        SynthKind::Blobs,
        SynthKind::Noise,
        SynthKind::Stripes,
    ];

    /// Whether the family is dominated by low-frequency content.
    pub fn is_smooth(self) -> bool {
        matches!(self, SynthKind::Flat | SynthKind::Gradient | SynthKind::Blobs)
    }
}

fn color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)]
}

/// One `(1, 3, h, w)` image in `[0, 1]`.
pub fn synth_image(kind: SynthKind, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let c0 = color(rng);
    let c1 = color(rng);
    let field: Box<dyn Fn(f64, f64) -> f64> = match kind {
        SynthKind::Flat => Box::new(|_, _| 0.0),
        SynthKind::Gradient => {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let (dy, dx) = (theta.sin(), theta.cos());
            let norm = (h + w) as f64;
            Box::new(move |y, x| 0.5 + (y * dy + x * dx) / norm)
        }
        SynthKind::Checkerboard => {
            let cell = rng.gen_range(3..7) as f64;
            let (oy, ox) = (rng.gen_range(0.0..cell), rng.gen_range(0.0..cell));
            Box::new(move |y, x| {
                let parity = ((y + oy) / cell).floor() as i64 + ((x + ox) / cell).floor() as i64;
                (parity.rem_euclid(2)) as f64
            })
        }
        SynthKind::Blobs => {
            let blobs: Vec<(f64, f64, f64, f64)> = (0..rng.gen_range(2..5))
                .map(|_| {
                    (
                        rng.gen_range(0.0..h as f64),
                        rng.gen_range(0.0..w as f64),
                        rng.gen_range(0.15..0.35) * h.min(w) as f64,
                        rng.gen_range(0.4..1.0),
                    )
                })
                .collect();
            Box::new(move |y, x| {
                blobs
                    .iter()
                    .map(|(cy, cx, r, a)| a * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * r * r)).exp())
                    .sum::<f64>()
                    .min(1.0)
            })
        }
        SynthKind::Noise => {
            let waves: Vec<(f64, f64, f64)> = (0..12)
                .map(|_| {
                    let f: f64 = rng.gen_range(0.25..1.2);
                    let t: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    (f * t.cos(), f * t.sin(), rng.gen_range(0.0..std::f64::consts::TAU))
                })
                .collect();
            Box::new(move |y, x| {
                let s: f64 = waves.iter().map(|(fy, fx, p)| (fy * y + fx * x + p).sin()).sum();
                (0.5 + s / 8.0).clamp(0.0, 1.0)
            })
        }
        SynthKind::Stripes => {
            let period = rng.gen_range(4.0..9.0);
            let t: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let (dy, dx) = (t.sin(), t.cos());
            Box::new(move |y, x| {
                0.5 + 0.5 * ((y * dy + x * dx) * std::f64::consts::TAU / period).sin()
            })
        }
    };
    Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        let t = field(y as f64, x as f64).clamp(0.0, 1.0);
        (c0[c] * (1.0 - t) + c1[c] * t) as f32
    })
}

/// Image whose left half is smooth and right half textured.
pub fn mixed_scene(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let smooth = synth_image(SynthKind::Gradient, h, w, rng);
    let textured = synth_image(SynthKind::Checkerboard, h, w, rng);
    Tensor::from_fn([1, 3, h, w], |[_, c, y, x]| {
        if x < w / 2 {
            smooth.at(0, c, y, x)
        } else {
            textured.at(0, c, y, x)
        }
    })
}

/// Box-filter downsampling by an integer factor; trailing rows and columns
/// that do not fill a full box are dropped.
pub fn downsample(hr: &Tensor<f32>, scale: usize) -> Result<Tensor<f32>> {
    let [n, c, h, w] = hr.shape();
    if scale == 0 || h < scale || w < scale {
        return Err(CabmError::invalid(format!("cannot downsample {h}x{w} by {scale}")));
    }
    let (lh, lw) = (h / scale, w / scale);
    let inv = 1.0 / (scale * scale) as f64;
    Ok(Tensor::from_fn([n, c, lh, lw], |[ni, ci, y, x]| {
        let mut s = 0.0f64;
        for dy in 0..scale {
            for dx in 0..scale {
                s += hr.at(ni, ci, y * scale + dy, x * scale + dx) as f64;
            }
        }
        (s * inv) as f32
    }))
}

/// Crops `hr` so both sides are multiples of `scale`.
pub fn crop_to_multiple(hr: &Tensor<f32>, scale: usize) -> Tensor<f32> {
    let [n, c, h, w] = hr.shape();
    let (ch, cw) = (h - h % scale, w - w % scale);
    Tensor::from_fn([n, c, ch, cw], |[ni, ci, y, x]| hr.at(ni, ci, y, x))
}

fn crop(t: &Tensor<f32>, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<f32> {
    let c = t.shape()[1];
    Tensor::from_fn([1, c, h, w], |[_, ci, y, x]| t.at(0, ci, y0 + y, x0 + x))
}

/// Paired LR/HR training patches with precomputed LR edge scores.
#[derive(Clone, Debug)]
pub struct PatchDataset {
    pub lr: Vec<Tensor<f32>>,
    pub hr: Vec<Tensor<f32>>,
    pub edges: Vec<EdgeScore>,
    pub scale: usize,
}

/// Parameters of the synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub images: usize,
    pub hr_size: usize,
    pub scale: usize,
    pub lr_patch: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            images: 48,
            hr_size: 48,
            scale: 2,
            lr_patch: 12,
            seed: 7,
        }
    }
}

/// `count` HR images cycling through every synthetic family.
pub fn synth_images(count: usize, size: usize, seed: u64) -> Vec<(SynthKind, Tensor<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let kind = SynthKind::ALL[i % SynthKind::ALL.len()];
            (kind, synth_image(kind, size, size, &mut rng))
        })
        .collect()
}

impl PatchDataset {
    /// Non-overlapping patches cut from each HR image and its downsampled LR.
    pub fn from_images(
        images: &[Tensor<f32>],
        scale: usize,
        lr_patch: usize,
        precision: f64,
    ) -> Result<Self> {
        if lr_patch == 0 {
            return Err(CabmError::invalid("patch size must be positive"));
        }
        let mut ds = PatchDataset {
            lr: Vec::new(),
            hr: Vec::new(),
            edges: Vec::new(),
            scale,
        };
        for img in images {
            let hr = crop_to_multiple(img, scale);
            let lr = downsample(&hr, scale)?;
            let [_, _, lh, lw] = lr.shape();
            for py in 0..lh / lr_patch {
                for px in 0..lw / lr_patch {
                    let lp = crop(&lr, py * lr_patch, px * lr_patch, lr_patch, lr_patch);
                    let hp = crop(
                        &hr,
                        py * lr_patch * scale,
                        px * lr_patch * scale,
                        lr_patch * scale,
                        lr_patch * scale,
                    );
                    ds.edges.push(edge::edge_score(&lp, precision)?);
                    ds.lr.push(lp);
                    ds.hr.push(hp);
                }
            }
        }
        if ds.lr.is_empty() {
            return Err(CabmError::invalid("images too small to yield any patch"));
        }
        Ok(ds)
    }

    pub fn synthetic(cfg: &SynthConfig, precision: f64) -> Result<Self> {
        let images: Vec<Tensor<f32>> = synth_images(cfg.images, cfg.hr_size, cfg.seed)
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        Self::from_images(&images, cfg.scale, cfg.lr_patch, precision)
    }

    pub fn len(&self) -> usize {
        self.lr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lr.is_empty()
    }

    /// Stacked LR batch, HR batch and edge values for `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>, Vec<EdgeScore>)> {
        let lr: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.lr[i]).collect();
        let hr: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.hr[i]).collect();
        Ok((
            Tensor::stack(&lr)?,
            Tensor::stack(&hr)?,
            indices.iter().map(|&i| self.edges[i]).collect(),
        ))
    }

    /// Shuffled mini-batches covering every sample once.
    pub fn epoch_batches(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        idx.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }
}
