//! Symmetric fake quantization.
//!
//! Activations are clamped to `[-alpha, alpha]` with a learnable bound,
//! divided by the step `alpha / (2^(n-1) - 1)`, rounded half away from zero
//! and rescaled. Weights use the same grid with `alpha = max|w|` and a bit
//! width fixed for the whole network. Bit width 32 bypasses quantization.

use crate::error::{CabmError, Result};
use crate::tensor::{Real, Tensor};

/// Bit width that means "do not quantize".
pub const FULL_PRECISION_BITS: u32 = 32;

/// Largest bit width accepted for an actual quantization grid.
pub const MAX_GRID_BITS: u32 = 16;

/// Quantization step `alpha / (2^(n-1) - 1)`.
pub fn step_size(alpha: f64, n: u32) -> Result<f64> {
    if n < 2 {
        return Err(CabmError::invalid(format!("bit width must be >= 2, got {n}")));
    }
    if n > MAX_GRID_BITS && n != FULL_PRECISION_BITS {
        return Err(CabmError::invalid(format!("unsupported bit width {n}")));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(CabmError::invalid(format!("alpha must be positive, got {alpha}")));
    }
    Ok(alpha / levels(n) as f64)
}

/// Largest grid index `2^(n-1) - 1`.
#[inline]
pub fn levels(n: u32) -> i64 {
    (1i64 << (n - 1)) - 1
}

/// Per-layer activation quantization state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantParams {
    alpha: f64,
    bit: u32,
}

impl QuantParams {
    pub fn new(alpha: f64, bit: u32) -> Result<Self> {
        step_size(alpha, bit)?;
        Ok(QuantParams { alpha, bit })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn bit(&self) -> u32 {
        self.bit
    }

    pub fn is_full_precision(&self) -> bool {
        self.bit == FULL_PRECISION_BITS
    }

    pub fn step(&self) -> f64 {
        self.alpha / levels(self.bit) as f64
    }
}

/// Quantizes one value. `alpha` and `bit` are assumed valid.
#[inline]
pub fn quantize_scalar(x: f64, alpha: f64, bit: u32) -> f64 {
    if bit == FULL_PRECISION_BITS {
        return x;
    }
    let m = levels(bit) as f64;
    let s = alpha / m;
    let k = (x.clamp(-alpha, alpha) / s).round().clamp(-m, m);
    k * s
}

pub fn quantize_activation<T: Real>(x: &Tensor<T>, q: &QuantParams) -> Tensor<T> {
    if q.is_full_precision() {
        return x.clone();
    }
    x.map(|v| T::from_f64_lossy(quantize_scalar(v.as_f64(), q.alpha, q.bit)))
}

/// Fixed-width symmetric weight quantization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WeightQuantSpec {
    pub bit: u32,
}

impl WeightQuantSpec {
    pub fn new(bit: u32) -> Result<Self> {
        step_size(1.0, bit)?;
        Ok(WeightQuantSpec { bit })
    }
}

impl Default for WeightQuantSpec {
    fn default() -> Self {
        WeightQuantSpec { bit: 8 }
    }
}

/// Per-tensor symmetric quantization with `alpha = max|w|`.
pub fn quantize_weight<T: Real>(w: &Tensor<T>, spec: WeightQuantSpec) -> Tensor<T> {
    if spec.bit == FULL_PRECISION_BITS {
        return w.clone();
    }
    let alpha = w.data().iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max);
    if alpha == 0.0 {
        return w.clone();
    }
    w.map(|v| T::from_f64_lossy(quantize_scalar(v.as_f64(), alpha, spec.bit)))
}

/// Straight-through gradients of [`quantize_activation`].
///
/// Rounding is treated as identity. Inside `(-alpha, alpha)` the upstream
/// gradient flows to `x`; saturated elements instead contribute
/// `sign(x) * upstream` to the bound.
pub fn ste_backward<T: Real>(
    upstream: &[T],
    x: &Tensor<T>,
    q: &QuantParams,
) -> Result<(Tensor<T>, f64)> {
    if upstream.len() != x.numel() {
        return Err(CabmError::shape("ste_backward", "upstream length"));
    }
    let mut grad_x = Vec::with_capacity(upstream.len());
    let mut grad_alpha = 0.0;
    for (&g, &v) in upstream.iter().zip(x.data()) {
        let (gx, ga) = ste_element(g.as_f64(), v.as_f64(), q.alpha, q.bit);
        grad_x.push(T::from_f64_lossy(gx));
        grad_alpha += ga;
    }
    Ok((Tensor::from_vec(x.shape(), grad_x)?, grad_alpha))
}

#[inline]
pub(crate) fn ste_element(g: f64, x: f64, alpha: f64, bit: u32) -> (f64, f64) {
    if bit == FULL_PRECISION_BITS {
        (g, 0.0)
    } else if x.abs() < alpha {
        (g, 0.0)
    } else {
        (0.0, g * x.signum())
    }
}

/// Percentile (0..=100) of absolute values, nearest-rank.
pub fn abs_percentile(values: &[f32], pct: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut abs: Vec<f64> = values.iter().map(|v| (*v as f64).abs()).collect();
    abs.sort_by(f64::total_cmp);
    // Tolerance keeps exact ranks such as 99.9% of 1000 from rounding up.
    let rank = ((pct / 100.0) * abs.len() as f64 - 1e-9).ceil() as usize;
    abs[rank.clamp(1, abs.len()) - 1]
}

/// Initial clamp bound from a calibration activation: the 99.9th percentile
/// of absolute values, floored so the bound stays strictly positive.
pub fn init_alpha(values: &[f32]) -> f64 {
    abs_percentile(values, 99.9).max(1e-3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn step_sizes() {
        assert!((step_size(1.0, 8).unwrap() - 1.0 / 127.0).abs() < 1e-15);
        assert_eq!(step_size(1.0, 2).unwrap(), 1.0);
        assert!((step_size(2.0, 4).unwrap() - 0.285_714_285_714).abs() < 1e-9);
        assert!(step_size(1.0, 1).is_err());
        assert!(step_size(0.0, 4).is_err());
        assert!(QuantParams::new(-1.0, 4).is_err());
    }

    #[test]
    fn activation_examples() {
        for &(a, n) in &[(1.0, 4), (0.3, 8), (2.0, 6)] {
            assert_eq!(quantize_scalar(0.0, a, n), 0.0);
            assert_eq!(quantize_scalar(5.0 * a, a, n), a);
        }
        // 0.5 / (1/7) = 3.5 rounds away from zero to 4.
        assert!((quantize_scalar(0.5, 1.0, 4) - 4.0 / 7.0).abs() < 1e-12);
        assert!((quantize_scalar(-0.5, 1.0, 4) + 4.0 / 7.0).abs() < 1e-12);
        let x = Tensor::from_vec([1, 1, 1, 3], vec![0.0f32, 5.0, 0.5]).unwrap();
        let q = quantize_activation(&x, &QuantParams::new(1.0, 4).unwrap());
        assert_eq!(q.data()[1], 1.0);
        let fp = quantize_activation(&x, &QuantParams::new(1.0, 32).unwrap());
        assert_eq!(fp, x);
    }

    #[test]
    fn weight_examples() {
        let z = Tensor::<f32>::zeros([1, 1, 2, 2]);
        assert_eq!(quantize_weight(&z, WeightQuantSpec::default()), z);
        let w = Tensor::from_vec([1, 1, 1, 2], vec![-1.0f32, 1.0]).unwrap();
        assert_eq!(quantize_weight(&w, WeightQuantSpec { bit: 8 }).data(), &[-1.0, 1.0]);
        let w = Tensor::from_vec([1, 1, 1, 3], vec![0.3f64, -0.6, 0.9]).unwrap();
        let q = quantize_weight(&w, WeightQuantSpec { bit: 4 });
        let s = 0.9 / 7.0;
        // 0.3/s = 2.333 -> 2, -0.6/s = -4.667 -> -5, 0.9/s = 7.
        let expected = [2.0 * s, -5.0 * s, 7.0 * s];
        for (a, b) in q.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ste_cases() {
        let q = QuantParams::new(1.0, 4).unwrap();
        let x = Tensor::from_vec([1, 1, 1, 3], vec![0.2f64, -0.9, 0.0]).unwrap();
        let (gx, ga) = ste_backward(&[1.5, -2.0, 0.5], &x, &q).unwrap();
        assert_eq!(gx.data(), &[1.5, -2.0, 0.5]);
        assert_eq!(ga, 0.0);
        let x = Tensor::from_vec([1, 1, 1, 2], vec![2.0f64, -2.0]).unwrap();
        let (gx, ga) = ste_backward(&[0.7, 0.3], &x, &q).unwrap();
        assert_eq!(gx.data(), &[0.0, 0.0]);
        assert!((ga - (0.7 - 0.3)).abs() < 1e-15);
    }

    #[test]
    fn ste_alpha_matches_finite_difference_of_clamp() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let alpha = rng.gen_range(0.2..1.5);
            let x = Tensor::<f64>::from_fn([1, 1, 4, 4], |_| rng.gen_range(-2.0..2.0));
            let up: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let q = QuantParams::new(alpha, 6).unwrap();
            let (_, ga) = ste_backward(&up, &x, &q).unwrap();
            // With rounding passed straight through, the dequantized output is clamp(x).
            let surrogate = |a: f64| -> f64 {
                x.data()
                    .iter()
                    .zip(&up)
                    .map(|(v, g)| g * v.clamp(-a, a))
                    .sum()
            };
            let eps = 1e-6;
            let fd = (surrogate(alpha + eps) - surrogate(alpha - eps)) / (2.0 * eps);
            assert!((fd - ga).abs() < 1e-3, "fd {fd} vs analytic {ga}");
        }
    }

    #[test]
    fn percentile_init() {
        let v: Vec<f32> = (1..=1000).map(|i| i as f32).collect();
        assert_eq!(abs_percentile(&v, 99.9), 999.0);
        assert_eq!(abs_percentile(&v, 100.0), 1000.0);
        assert!(init_alpha(&[0.0; 8]) > 0.0);
    }

    proptest! {
        #[test]
        fn quantizer_properties(x in -4.0f64..4.0, y in -4.0f64..4.0, alpha in 0.01f64..3.0, bi in 0usize..3) {
            let n = [4u32, 6, 8][bi];
            let s = step_size(alpha, n).unwrap();
            let qx = quantize_scalar(x, alpha, n);
            if x.abs() <= alpha {
                prop_assert!((qx - x).abs() <= s / 2.0 + 1e-6);
            }
            prop_assert_eq!(quantize_scalar(qx, alpha, n), qx);
            prop_assert_eq!(quantize_scalar(-x, alpha, n), -qx);
            let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
            prop_assert!(quantize_scalar(lo, alpha, n) <= quantize_scalar(hi, alpha, n));
            let k = qx / s;
            prop_assert!((k - k.round()).abs() < 1e-6);
            prop_assert!(k.round().abs() <= levels(n) as f64);
        }
    }
}
