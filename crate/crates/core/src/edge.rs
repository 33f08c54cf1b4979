//! Laplacian edge scores of LR patches.

use serde::{Deserialize, Serialize};

use crate::error::{CabmError, Result};
use crate::tensor::{Real, Tensor};

/// Default score precision.
pub const DEFAULT_PRECISION: f64 = 0.01;

/// BT.601 luma weights.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// A non-negative edge score stored as an integer count of precision steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeScore {
    steps: u64,
    precision: f64,
}

impl EdgeScore {
    pub fn from_steps(steps: u64, precision: f64) -> Result<Self> {
        check_precision(precision)?;
        Ok(EdgeScore { steps, precision })
    }

    /// Rounds a raw non-negative score to the nearest multiple of `precision`.
    pub fn quantize(raw: f64, precision: f64) -> Result<Self> {
        check_precision(precision)?;
        if !(raw >= 0.0) || !raw.is_finite() {
            return Err(CabmError::invalid(format!("edge score must be >= 0, got {raw}")));
        }
        Ok(EdgeScore {
            steps: (raw / precision).round() as u64,
            precision,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn precision(&self) -> f64 {
        self.precision
    }

    pub fn value(&self) -> f64 {
        self.steps as f64 * self.precision
    }
}

fn check_precision(precision: f64) -> Result<()> {
    if precision > 0.0 && precision.is_finite() {
        Ok(())
    } else {
        Err(CabmError::invalid(format!("precision F must be positive, got {precision}")))
    }
}

/// Converts RGB to single-channel luma; single-channel input passes through.
pub fn to_luminance<T: Real>(rgb: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = rgb.shape();
    match c {
        1 => Ok(rgb.clone()),
        3 => Ok(Tensor::from_fn([n, 1, h, w], |[ni, _, y, x]| {
            let v: f64 = (0..3).map(|ci| LUMA[ci] * rgb.at(ni, ci, y, x).as_f64()).sum();
            T::from_f64_lossy(v)
        })),
        _ => Err(CabmError::shape(
            "to_luminance",
            format!("expected 1 or 3 channels, got {c}"),
        )),
    }
}

/// Mirror index without repeating the edge sample; valid for any offset.
#[inline]
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// 4-neighbour Laplacian `[[0,1,0],[1,-4,1],[0,1,0]]` with reflect padding.
pub fn laplacian_response<T: Real>(gray: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = gray.shape();
    if c != 1 {
        return Err(CabmError::shape("laplacian_response", "expects one channel"));
    }
    Ok(Tensor::from_fn([n, 1, h, w], |[ni, _, y, x]| {
        let (yi, xi) = (y as isize, x as isize);
        let px = |dy: isize, dx: isize| {
            gray.at(ni, 0, reflect_index(yi + dy, h), reflect_index(xi + dx, w)).as_f64()
        };
        let v = px(-1, 0) + px(1, 0) + px(0, -1) + px(0, 1) - 4.0 * px(0, 0);
        T::from_f64_lossy(v)
    }))
}

/// Mean absolute Laplacian response of each sample's luminance, unrounded.
pub fn raw_edge_scores<T: Real>(patches: &Tensor<T>) -> Result<Vec<f64>> {
    let lap = laplacian_response(&to_luminance(patches)?)?;
    let n = lap.shape()[0];
    Ok((0..n)
        .map(|i| {
            let s = lap.sample(i);
            s.iter().map(|v| v.as_f64().abs()).sum::<f64>() / s.len().max(1) as f64
        })
        .collect())
}

/// Edge score of a single `(1, C, H, W)` patch at precision `precision`.
pub fn edge_score<T: Real>(patch: &Tensor<T>, precision: f64) -> Result<EdgeScore> {
    if patch.shape()[0] != 1 {
        return Err(CabmError::shape("edge_score", "expects a single patch"));
    }
    EdgeScore::quantize(raw_edge_scores(patch)?[0], precision)
}

/// Edge scores of every sample in a batch.
pub fn edge_scores<T: Real>(patches: &Tensor<T>, precision: f64) -> Result<Vec<EdgeScore>> {
    raw_edge_scores(patches)?
        .into_iter()
        .map(|r| EdgeScore::quantize(r, precision))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn impulse(size: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros([1, 1, size, size]);
        t.set(0, 0, size / 2, size / 2, 1.0);
        t
    }

    #[test]
    fn luminance() {
        let white = Tensor::<f64>::full([1, 3, 2, 2], 1.0);
        let l = to_luminance(&white).unwrap();
        assert!(l.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        let red = Tensor::<f64>::from_fn([1, 3, 1, 1], |[_, c, _, _]| if c == 0 { 1.0 } else { 0.0 });
        assert!((to_luminance(&red).unwrap().data()[0] - 0.299).abs() < 1e-12);
        let gray = Tensor::<f64>::full([1, 1, 3, 3], 0.4);
        assert_eq!(to_luminance(&gray).unwrap(), gray);
        assert!(to_luminance(&Tensor::<f64>::zeros([1, 2, 2, 2])).is_err());
    }

    #[test]
    fn laplacian_cases() {
        let c = Tensor::<f64>::full([1, 1, 5, 5], 0.3);
        assert!(laplacian_response(&c).unwrap().data().iter().all(|&v| v.abs() < 1e-12));
        let ramp = Tensor::from_fn([1, 1, 6, 6], |[_, _, y, x]| 0.1 * x as f64 + 0.05 * y as f64);
        let r = laplacian_response(&ramp).unwrap();
        for y in 1..5 {
            for x in 1..5 {
                assert!(r.at(0, 0, y, x).abs() < 1e-12);
            }
        }
        let r = laplacian_response(&impulse(5)).unwrap();
        assert_eq!(r.at(0, 0, 2, 2), -4.0);
        for (y, x) in [(1, 2), (3, 2), (2, 1), (2, 3)] {
            assert_eq!(r.at(0, 0, y, x), 1.0);
        }
    }

    #[test]
    fn score_examples() {
        let c = Tensor::<f64>::full([1, 3, 8, 8], 0.7);
        assert_eq!(edge_score(&c, 0.01).unwrap().steps(), 0);
        let s = edge_score(&impulse(5), 0.01).unwrap();
        assert_eq!(s.steps(), 32);
        assert!((s.value() - 0.32).abs() < 1e-12);
    }

    #[test]
    fn score_symmetries() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let p = Tensor::<f64>::from_fn([1, 1, 7, 7], |_| rng.gen_range(0.0..1.0));
            let flip = Tensor::from_fn([1, 1, 7, 7], |[_, _, y, x]| p.at(0, 0, y, 6 - x));
            let vflip = Tensor::from_fn([1, 1, 7, 7], |[_, _, y, x]| p.at(0, 0, 6 - y, x));
            let rot = Tensor::from_fn([1, 1, 7, 7], |[_, _, y, x]| p.at(0, 0, x, 6 - y));
            let raw = |t: &Tensor<f64>| raw_edge_scores(t).unwrap()[0];
            let base = raw(&p);
            for t in [&flip, &vflip, &rot] {
                assert!((raw(t) - base).abs() < 1e-12);
                assert_eq!(edge_score(t, 0.01).unwrap(), edge_score(&p, 0.01).unwrap());
            }
        }
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(-7, 3), 1);
        assert_eq!(reflect_index(12, 1), 0);
        for i in -20..20 {
            assert!(reflect_index(i, 4) < 4);
        }
    }

    #[test]
    fn bad_precision() {
        assert!(EdgeScore::quantize(0.1, 0.0).is_err());
        assert!(EdgeScore::quantize(-0.1, 0.01).is_err());
    }
}
