//! Python bindings for the `cabm` crate.
//!
//! Tensors cross the boundary as a `(shape, flat data)` pair wrapped in
//! [`PyTensor`]; no array library is required on the Python side.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use cabm::lut::{self, Beta, LutParams};
use cabm::pipeline::{self, BitSource};
use cabm::{metrics, BitConfig, BitRecord, CabmError, EdgeScore, EdgeToBitLut, Strategy, Supernet, SupernetSpec};

fn err(e: CabmError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Dense `(N, C, H, W)` f32 tensor.
#[pyclass(name = "Tensor", module = "cabm_py", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: cabm::Tensor<f32>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: [usize; 4], data: Vec<f32>) -> PyResult<Self> {
        cabm::Tensor::from_vec(shape, data).map(|inner| PyTensor { inner }).map_err(err)
    }

    #[staticmethod]
    fn zeros(shape: [usize; 4]) -> Self {
        PyTensor {
            inner: cabm::Tensor::zeros(shape),
        }
    }

    #[getter]
    fn shape(&self) -> [usize; 4] {
        self.inner.shape()
    }

    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Per-layer activation widths.
#[pyclass(name = "BitConfig", module = "cabm_py", eq, from_py_object)]
#[derive(Clone, PartialEq)]
pub struct PyBitConfig {
    inner: BitConfig,
}

#[pymethods]
impl PyBitConfig {
    #[new]
    fn new(bits: Vec<u32>) -> Self {
        PyBitConfig {
            inner: BitConfig::new(bits),
        }
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        text.parse::<BitConfig>().map(|inner| PyBitConfig { inner }).map_err(err)
    }

    #[getter]
    fn bits(&self) -> Vec<u32> {
        self.inner.bits().to_vec()
    }

    fn fab(&self) -> f64 {
        self.inner.fab()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __str__(&self) -> String {
        self.inner.to_string()
    }

    fn __repr__(&self) -> String {
        format!("BitConfig({})", self.inner)
    }
}

/// Edge score stored as an integer count of precision steps.
#[pyclass(name = "EdgeScore", module = "cabm_py", from_py_object)]
#[derive(Clone, Copy)]
pub struct PyEdgeScore {
    inner: EdgeScore,
}

#[pymethods]
impl PyEdgeScore {
    #[new]
    #[pyo3(signature = (value, precision = cabm::edge::DEFAULT_PRECISION))]
    fn new(value: f64, precision: f64) -> PyResult<Self> {
        EdgeScore::quantize(value, precision).map(|inner| PyEdgeScore { inner }).map_err(err)
    }

    #[getter]
    fn value(&self) -> f64 {
        self.inner.value()
    }

    #[getter]
    fn steps(&self) -> u64 {
        self.inner.steps()
    }

    #[getter]
    fn precision(&self) -> f64 {
        self.inner.precision()
    }

    fn __repr__(&self) -> String {
        format!("EdgeScore({})", self.inner.value())
    }
}

/// Edge score of one `(1, 3, H, W)` patch.
#[pyfunction]
#[pyo3(signature = (patch, precision = cabm::edge::DEFAULT_PRECISION))]
fn edge_score(patch: &PyTensor, precision: f64) -> PyResult<PyEdgeScore> {
    cabm::edge::edge_score(&patch.inner, precision)
        .map(|inner| PyEdgeScore { inner })
        .map_err(err)
}

#[pyfunction]
fn quantize(x: f64, alpha: f64, bits: u32) -> f64 {
    cabm::quant::quantize_scalar(x, alpha, bits)
}

#[pyfunction]
#[pyo3(signature = (a, b, peak = 1.0))]
fn psnr(a: &PyTensor, b: &PyTensor, peak: f64) -> PyResult<f64> {
    metrics::psnr(&a.inner, &b.inner, peak).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a, b, peak = 1.0))]
fn ssim(a: &PyTensor, b: &PyTensor, peak: f64) -> PyResult<f64> {
    metrics::ssim(&a.inner, &b.inner, peak).map_err(err)
}

/// Edge-to-bit lookup table.
#[pyclass(name = "Lut", module = "cabm_py", from_py_object)]
#[derive(Clone)]
pub struct PyLut {
    inner: EdgeToBitLut,
}

#[pymethods]
impl PyLut {
    /// Builds a table from `(edge, bits, bitops)` records.
    #[staticmethod]
    #[pyo3(signature = (records, strategy = "S1", precision = cabm::edge::DEFAULT_PRECISION, de = 10, beta = "auto", seed = 0))]
    fn build(
        records: Vec<(f64, Vec<u32>, f64)>,
        strategy: &str,
        precision: f64,
        de: u32,
        beta: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let records = records
            .into_iter()
            .map(|(edge, bits, bitops)| {
                Ok(BitRecord {
                    edge: EdgeScore::quantize(edge, precision)?,
                    config: BitConfig::new(bits),
                    bitops,
                })
            })
            .collect::<cabm::Result<Vec<_>>>()
            .map_err(err)?;
        let params = LutParams {
            strategy: strategy.parse::<Strategy>().map_err(err)?,
            precision,
            de,
            beta: beta.parse::<Beta>().map_err(err)?,
            seed,
        };
        lut::build_lut(&records, &params).map(|inner| PyLut { inner }).map_err(err)
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        EdgeToBitLut::parse(text).map(|inner| PyLut { inner }).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        EdgeToBitLut::load(path).map(|inner| PyLut { inner }).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    /// Subinterval index (1-based) of an edge value.
    fn index_of(&self, edge: f64) -> PyResult<usize> {
        let e = EdgeScore::quantize(edge, self.inner.precision()).map_err(err)?;
        Ok(self.inner.index_of(e))
    }

    fn lookup(&self, edge: f64) -> PyResult<PyBitConfig> {
        let e = EdgeScore::quantize(edge, self.inner.precision()).map_err(err)?;
        Ok(PyBitConfig {
            inner: self.inner.lookup(e).clone(),
        })
    }

    fn entries(&self) -> Vec<PyBitConfig> {
        self.inner
            .entries()
            .iter()
            .map(|c| PyBitConfig { inner: c.clone() })
            .collect()
    }

    #[getter]
    fn num_subintervals(&self) -> usize {
        self.inner.num_subintervals()
    }

    #[getter]
    fn layers(&self) -> usize {
        self.inner.layers()
    }

    #[getter]
    fn strategy(&self) -> String {
        self.inner.strategy().to_string()
    }

    fn __len__(&self) -> usize {
        self.inner.num_subintervals()
    }
}

/// Residual SR network with switchable activation widths.
#[pyclass(name = "Supernet", module = "cabm_py", from_py_object)]
#[derive(Clone)]
pub struct PySupernet {
    inner: Supernet,
}

#[pymethods]
impl PySupernet {
    #[new]
    #[pyo3(signature = (num_blocks = 2, channels = 16, scale = 2, candidate_bits = vec![4, 6, 8], weight_bit = 8, seed = 0))]
    fn new(
        num_blocks: usize,
        channels: usize,
        scale: usize,
        candidate_bits: Vec<u32>,
        weight_bit: u32,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = SupernetSpec {
            num_blocks,
            channels,
            scale,
            candidate_bits,
            weight_bit,
        };
        Supernet::build(spec, seed).map(|inner| PySupernet { inner }).map_err(err)
    }

    /// Loads the network from a JSON checkpoint.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        cabm::checkpoint::Checkpoint::load(path)
            .map(|ck| PySupernet { inner: ck.net })
            .map_err(err)
    }

    #[getter]
    fn quantized_layers(&self) -> usize {
        self.inner.quantized_layers()
    }

    #[getter]
    fn scale(&self) -> usize {
        self.inner.scale()
    }

    /// Forward pass with `config`; full precision when omitted.
    #[pyo3(signature = (lr, config = None))]
    fn forward(&self, lr: &PyTensor, config: Option<&PyBitConfig>) -> PyResult<PyTensor> {
        let out = match config {
            Some(c) => self.inner.forward_with_bits(&lr.inner, &c.inner).map(|r| r.0),
            None => self
                .inner
                .forward_with(&lr.inner, &mut cabm::supernet::FullPrecision),
        };
        out.map(|inner| PyTensor { inner }).map_err(err)
    }

    /// Total BitOPs and FAB for one `h x w` input.
    fn bitops(&self, config: &PyBitConfig, h: usize, w: usize) -> PyResult<(f64, f64)> {
        let r = self.inner.cost(&config.inner, h, w).map_err(err)?;
        Ok((r.total_bitops, r.fab))
    }
}

/// Per-patch SR driven by a LUT. Returns the SR image and a summary dict
/// (`psnr` and `ssim` are `None` without a reference).
#[pyfunction]
#[pyo3(signature = (image, net, lut, reference = None, patch_size = pipeline::DEFAULT_PATCH))]
fn run_sr<'py>(
    py: Python<'py>,
    image: &PyTensor,
    net: &PySupernet,
    lut: &PyLut,
    reference: Option<&PyTensor>,
    patch_size: usize,
) -> PyResult<(PyTensor, Bound<'py, pyo3::types::PyDict>)> {
    let (sr, result) = pipeline::run_sr_with(
        &image.inner,
        &net.inner,
        BitSource::Lut(&lut.inner),
        reference.map(|r| &r.inner),
        patch_size,
    )
    .map_err(err)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("psnr", result.psnr)?;
    d.set_item("ssim", result.ssim)?;
    d.set_item("fab", result.fab)?;
    d.set_item("total_bitops", result.total_bitops)?;
    let patches: Vec<(usize, usize, f64, usize, Vec<u32>, f64)> = result
        .per_patch
        .iter()
        .map(|p| (p.row, p.col, p.edge.value(), p.r, p.config.bits().to_vec(), p.bitops))
        .collect();
    d.set_item("patches", patches)?;
    Ok((PyTensor { inner: sr }, d))
}

#[pymodule]
fn cabm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyBitConfig>()?;
    m.add_class::<PyEdgeScore>()?;
    m.add_class::<PyLut>()?;
    m.add_class::<PySupernet>()?;
    m.add_function(wrap_pyfunction!(edge_score, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(run_sr, m)?)?;
    Ok(())
}
