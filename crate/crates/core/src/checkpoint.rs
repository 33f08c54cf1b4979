//! JSON checkpoints holding a supernet and, optionally, its selectors.
//!
//! Floats are written in shortest round-trip form, so save/load is exact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CabmError, Result};
use crate::selector::SelectorBank;
use crate::supernet::{Supernet, SupernetSpec};
use crate::tensor::Tensor;

const FORMAT: &str = "cabm-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: [usize; 4],
    data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SelectorState {
    candidate_bits: Vec<u32>,
    hidden: usize,
    precision: f64,
    params: Vec<NamedTensor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    spec: SupernetSpec,
    params: Vec<NamedTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    selectors: Option<SelectorState>,
}

fn named(names: Vec<String>, tensors: Vec<&Tensor<f32>>) -> Vec<NamedTensor> {
    names
        .into_iter()
        .zip(tensors)
        .map(|(name, t)| NamedTensor {
            name,
            shape: t.shape(),
            data: t.data().to_vec(),
        })
        .collect()
}

fn unnamed(expected: &[String], entries: Vec<NamedTensor>) -> Result<Vec<Tensor<f32>>> {
    if expected.len() != entries.len() {
        return Err(CabmError::Checkpoint(format!(
            "expected {} tensors, found {}",
            expected.len(),
            entries.len()
        )));
    }
    expected
        .iter()
        .zip(entries)
        .map(|(want, e)| {
            if *want != e.name {
                return Err(CabmError::Checkpoint(format!(
                    "expected tensor {want:?}, found {:?}",
                    e.name
                )));
            }
            Tensor::from_vec(e.shape, e.data)
                .map_err(|err| CabmError::Checkpoint(format!("{}: {err}", e.name)))
        })
        .collect()
}

/// A network with optional selectors.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: Supernet,
    pub selectors: Option<SelectorBank>,
}

impl Checkpoint {
    pub fn new(net: Supernet, selectors: Option<SelectorBank>) -> Self {
        Checkpoint { net, selectors }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            format: FORMAT.into(),
            version: VERSION,
            spec: self.net.spec().clone(),
            params: named(self.net.param_names(), self.net.params()),
            selectors: self.selectors.as_ref().map(|b| SelectorState {
                candidate_bits: b.candidate_bits().to_vec(),
                hidden: b.hidden(),
                precision: b.precision(),
                params: named(b.param_names(), b.params()),
            }),
        };
        serde_json::to_string(&file).map_err(|e| CabmError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| CabmError::Checkpoint(e.to_string()))?;
        if file.format != FORMAT {
            return Err(CabmError::Checkpoint(format!("unknown format {:?}", file.format)));
        }
        if file.version != VERSION {
            return Err(CabmError::Checkpoint(format!("unsupported version {}", file.version)));
        }
        let mut net = Supernet::build(file.spec, 0)?;
        let values = unnamed(&net.param_names(), file.params)?;
        net.load_params(values)?;
        let selectors = match file.selectors {
            None => None,
            Some(s) => {
                let mut bank = SelectorBank::new(
                    net.quantized_layers(),
                    &s.candidate_bits,
                    s.hidden,
                    s.precision,
                    0,
                )?;
                let values = unnamed(&bank.param_names(), s.params)?;
                bank.load_params(values)?;
                Some(bank)
            }
        };
        Ok(Checkpoint { net, selectors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
