//! Analytic cost model: MACs, BitOPs and feature average bit (FAB).
//!
//! BitOPs of a layer are `MACs * activation_bit * weight_bit`. Layers that
//! are never quantized (head and tail) are always counted at 32 x 32, and a
//! quantized layer running at the 32-bit sentinel is counted at 32 x 32 as
//! well, since both its activations and weights are then full precision.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CabmError, Result};
use crate::quant::FULL_PRECISION_BITS;
use crate::tensor::ConvSpec;

/// Activation bit widths, one per quantized layer.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BitConfig(Vec<u32>);

impl BitConfig {
    pub fn new(bits: Vec<u32>) -> Self {
        BitConfig(bits)
    }

    pub fn uniform(bit: u32, layers: usize) -> Self {
        BitConfig(vec![bit; layers])
    }

    pub fn bits(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Mean activation bit width.
    pub fn fab(&self) -> f64 {
        if self.0.is_empty() {
            return 0.0;
        }
        self.0.iter().map(|&b| b as f64).sum::<f64>() / self.0.len() as f64
    }

    pub fn check_candidates(&self, candidates: &[u32]) -> Result<()> {
        match self.0.iter().find(|b| !candidates.contains(b)) {
            Some(b) => Err(CabmError::invalid(format!(
                "bit {b} not in candidate set {candidates:?}"
            ))),
            None => Ok(()),
        }
    }
}

impl fmt::Display for BitConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, b) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

impl FromStr for BitConfig {
    type Err = CabmError;

    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<u32>()
                    .map_err(|e| CabmError::invalid(format!("bad bit width {t:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BitConfig(bits))
    }
}

/// Mean of per-patch FABs.
pub fn mean_fab<'a>(configs: impl IntoIterator<Item = &'a BitConfig>) -> f64 {
    let (sum, n) = configs
        .into_iter()
        .fold((0.0, 0usize), |(s, n), c| (s + c.fab(), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn layer_macs(spec: &ConvSpec, out_h: usize, out_w: usize) -> u64 {
    (spec.in_channels * spec.out_channels * spec.kernel * spec.kernel) as u64
        * (out_h * out_w) as u64
}

pub fn layer_bitops(macs: u64, a_bit: u32, w_bit: u32) -> f64 {
    macs as f64 * a_bit as f64 * w_bit as f64
}

/// One convolution of a network as seen by the cost model.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGeometry {
    pub name: String,
    pub spec: ConvSpec,
    pub out_h: usize,
    pub out_w: usize,
    pub quantized: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerCost {
    pub name: String,
    pub macs: u64,
    pub a_bit: u32,
    pub w_bit: u32,
    pub bitops: f64,
    pub quantized: bool,
}

/// Cost of one network evaluation under a bit configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub total_bitops: f64,
    pub fab: f64,
    pub per_layer: Vec<LayerCost>,
}

impl CostReport {
    /// BitOPs of the quantized layers only.
    pub fn quantized_bitops(&self) -> f64 {
        self.per_layer
            .iter()
            .filter(|l| l.quantized)
            .map(|l| l.bitops)
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,macs,a_bit,w_bit,bitops\n");
        for l in &self.per_layer {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                l.name, l.macs, l.a_bit, l.w_bit, l.bitops
            ));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<10} {:>12} {:>6} {:>6} {:>16}\n",
            "layer", "macs", "a_bit", "w_bit", "bitops"
        );
        for l in &self.per_layer {
            s.push_str(&format!(
                "{:<10} {:>12} {:>6} {:>6} {:>16.0}\n",
                l.name, l.macs, l.a_bit, l.w_bit, l.bitops
            ));
        }
        s.push_str(&format!(
            "total {:.4} GBitOPs, FAB {:.3}\n",
            self.total_bitops / 1e9,
            self.fab
        ));
        s
    }
}

pub fn network_bitops(
    layout: &[LayerGeometry],
    config: &BitConfig,
    weight_bit: u32,
) -> Result<CostReport> {
    let quantized = layout.iter().filter(|l| l.quantized).count();
    if quantized != config.len() {
        return Err(CabmError::shape(
            "network_bitops",
            format!("config has {} bits for {quantized} quantized layers", config.len()),
        ));
    }
    let mut bits = config.bits().iter();
    let per_layer: Vec<LayerCost> = layout
        .iter()
        .map(|l| {
            let macs = layer_macs(&l.spec, l.out_h, l.out_w);
            let (a_bit, w_bit) = if l.quantized {
                let a = *bits.next().expect("length checked above");
                if a == FULL_PRECISION_BITS {
                    (FULL_PRECISION_BITS, FULL_PRECISION_BITS)
                } else {
                    (a, weight_bit)
                }
            } else {
                (FULL_PRECISION_BITS, FULL_PRECISION_BITS)
            };
            LayerCost {
                name: l.name.clone(),
                macs,
                a_bit,
                w_bit,
                bitops: layer_bitops(macs, a_bit, w_bit),
                quantized: l.quantized,
            }
        })
        .collect();
    Ok(CostReport {
        total_bitops: per_layer.iter().map(|l| l.bitops).sum(),
        fab: config.fab(),
        per_layer,
    })
}
