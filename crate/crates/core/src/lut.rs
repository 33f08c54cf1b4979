//! Edge-to-bit lookup tables.
//!
//! The edge-score axis `[0, max(E)]` is split into
//! `R = ceil((10 * max(E) + F) / (5 * F))` subintervals
//! `s_r = [F(r-1)/2, F(5r-1)/10]`. Subintervals above the index threshold
//! `beta` are widened by `de` precision steps on both sides. Each
//! subinterval keeps one configuration chosen from the selector records
//! that fall inside its (widened) range: minimum BitOPs (S1), maximum BitOPs
//! (S2) or a seeded random pick (S3). Subintervals without records copy the
//! nearest non-empty subinterval, lower index on ties.
//!
//! Bounds are kept exactly as integer multiples of `F / 10`.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bitops::BitConfig;
use crate::edge::EdgeScore;
use crate::error::{CabmError, Result};
use crate::quant::{self, FULL_PRECISION_BITS};
use crate::selector::{select_bits_batch, SelectorBank};
use crate::supernet::Supernet;
use crate::tensor::Tensor;

/// Per-subinterval selection rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Minimum BitOPs.
    S1,
    /// Maximum BitOPs.
    S2,
    /// Uniformly random under a seed.
    S3,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::S1 => "S1",
            Strategy::S2 => "S2",
            Strategy::S3 => "S3",
        })
    }
}

impl FromStr for Strategy {
    type Err = CabmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "S1" | "MIN" => Ok(Strategy::S1),
            "S2" | "MAX" => Ok(Strategy::S2),
            "S3" | "RANDOM" => Ok(Strategy::S3),
            other => Err(CabmError::invalid(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Expansion threshold: subintervals with index `> beta` are widened.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Beta {
    /// `round(0.45 * R)`.
    Auto,
    Index(usize),
}

impl Beta {
    pub fn resolve(self, r_count: usize) -> usize {
        match self {
            Beta::Auto => (0.45 * r_count as f64).round() as usize,
            Beta::Index(b) => b,
        }
    }
}

impl FromStr for Beta {
    type Err = CabmError;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("auto") {
            return Ok(Beta::Auto);
        }
        s.trim()
            .parse()
            .map(Beta::Index)
            .map_err(|e| CabmError::invalid(format!("bad beta {s:?}: {e}")))
    }
}

/// One selector observation: a patch's edge score, the configuration the
/// selectors chose for it, and that configuration's BitOPs.
#[derive(Clone, Debug, PartialEq)]
pub struct BitRecord {
    pub edge: EdgeScore,
    pub config: BitConfig,
    pub bitops: f64,
}

fn check_precision(precision: f64) -> Result<()> {
    EdgeScore::from_steps(0, precision).map(|_| ())
}

/// Number of subintervals covering `[0, max_e]`.
pub fn num_subintervals(max_e: f64, precision: f64) -> Result<usize> {
    check_precision(precision)?;
    if !(max_e >= 0.0) || !max_e.is_finite() {
        return Err(CabmError::invalid(format!("max edge score must be >= 0, got {max_e}")));
    }
    let r = (10.0 * max_e + precision) / (5.0 * precision);
    // Absorb rounding noise when the formula lands on an integer.
    Ok(((r - 1e-9).ceil() as usize).max(1))
}

/// Bounds of one subinterval, in units of `F / 10`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Subinterval {
    pub index: usize,
    pub lo_tenths: i64,
    pub hi_tenths: i64,
    pub expanded_lo_tenths: i64,
    pub expanded_hi_tenths: i64,
}

impl Subinterval {
    pub fn lo(&self, precision: f64) -> f64 {
        precision * (self.index - 1) as f64 / 2.0
    }

    pub fn hi(&self, precision: f64) -> f64 {
        precision * (5 * self.index - 1) as f64 / 10.0
    }

    pub fn expanded_lo(&self, precision: f64) -> f64 {
        self.lo(precision) - (self.lo_tenths - self.expanded_lo_tenths) as f64 / 10.0 * precision
    }

    pub fn expanded_hi(&self, precision: f64) -> f64 {
        self.hi(precision) + (self.expanded_hi_tenths - self.hi_tenths) as f64 / 10.0 * precision
    }

    /// Whether a score of `steps` precision steps lies in the base interval.
    pub fn contains_steps(&self, steps: u64) -> bool {
        let t = 10 * steps as i64;
        self.lo_tenths <= t && t <= self.hi_tenths
    }

    pub fn expanded_contains_steps(&self, steps: u64) -> bool {
        let t = 10 * steps as i64;
        self.expanded_lo_tenths <= t && t <= self.expanded_hi_tenths
    }
}

/// Base and expanded bounds of subinterval `r` (1-based).
pub fn subinterval_bounds(r: usize, precision: f64, de: u32, beta: usize) -> Result<Subinterval> {
    check_precision(precision)?;
    if r < 1 {
        return Err(CabmError::invalid("subinterval index starts at 1"));
    }
    let lo = 5 * (r as i64 - 1);
    let hi = 5 * r as i64 - 1;
    let pad = if r > beta { 10 * de as i64 } else { 0 };
    Ok(Subinterval {
        index: r,
        lo_tenths: lo,
        hi_tenths: hi,
        expanded_lo_tenths: lo - pad,
        expanded_hi_tenths: hi + pad,
    })
}

/// Subinterval index of a raw score. Scores in the gaps between base
/// intervals go to the nearest interval, the lower one on exact ties;
/// the result is clamped to `[1, r_count]`.
pub fn subinterval_index(e: f64, precision: f64, r_count: usize) -> usize {
    let r_count = r_count.max(1);
    if !(e > 0.0) {
        return 1;
    }
    let mut t = 2.0 * e / precision;
    if (t - t.round()).abs() < 1e-9 {
        t = t.round();
    }
    let base = t.floor();
    // Within [lo(r), lo(r+1)) the base interval covers 0.8 of the span.
    let r = base as usize + 1 + usize::from(t - base > 0.9 + 1e-12);
    r.clamp(1, r_count)
}

/// Subinterval index of a score stored on the `precision` grid.
pub fn subinterval_index_steps(steps: u64, r_count: usize) -> usize {
    (2 * steps as usize + 1).clamp(1, r_count.max(1))
}

/// A built table: one configuration per subinterval.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeToBitLut {
    precision: f64,
    entries: Vec<BitConfig>,
    layers: usize,
    strategy: Strategy,
    de: u32,
    beta: usize,
}

/// What happened in one subinterval during [`build_lut_detailed`].
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Records inside the (expanded) subinterval.
    pub candidates: usize,
    /// Subinterval whose choice was used (itself unless filled).
    pub source: usize,
    pub bitops: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LutBuild {
    pub lut: EdgeToBitLut,
    pub selections: Vec<Selection>,
}

/// Parameters of [`build_lut`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LutParams {
    pub strategy: Strategy,
    pub precision: f64,
    pub de: u32,
    pub beta: Beta,
    pub seed: u64,
}

impl Default for LutParams {
    fn default() -> Self {
        LutParams {
            strategy: Strategy::S1,
            precision: crate::edge::DEFAULT_PRECISION,
            de: 10,
            beta: Beta::Auto,
            seed: 0,
        }
    }
}

fn record_steps(r: &BitRecord, precision: f64) -> Result<u64> {
    if r.edge.precision() == precision {
        Ok(r.edge.steps())
    } else {
        Ok(EdgeScore::quantize(r.edge.value(), precision)?.steps())
    }
}

pub fn build_lut(records: &[BitRecord], params: &LutParams) -> Result<EdgeToBitLut> {
    Ok(build_lut_detailed(records, params)?.lut)
}

pub fn build_lut_detailed(records: &[BitRecord], params: &LutParams) -> Result<LutBuild> {
    let LutParams {
        strategy,
        precision,
        de,
        beta,
        seed,
    } = *params;
    check_precision(precision)?;
    let first = records
        .first()
        .ok_or_else(|| CabmError::invalid("cannot build a LUT from zero records"))?;
    let layers = first.config.len();
    if records.iter().any(|r| r.config.len() != layers) {
        return Err(CabmError::invalid("records disagree on configuration length"));
    }

    // Canonical order makes the build independent of record order.
    let mut sorted: Vec<(u64, &BitRecord)> = records
        .iter()
        .map(|r| Ok((record_steps(r, precision)?, r)))
        .collect::<Result<_>>()?;
    sorted.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then_with(|| a.1.config.cmp(&b.1.config))
            .then_with(|| a.1.bitops.total_cmp(&b.1.bitops))
    });
    let max_steps = sorted.last().map(|s| s.0).unwrap_or(0);
    let r_count = num_subintervals(max_steps as f64 * precision, precision)?;
    let beta_idx = beta.resolve(r_count);
    let tenths: Vec<i64> = sorted.iter().map(|s| 10 * s.0 as i64).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<Option<(&BitRecord, usize)>> = Vec::with_capacity(r_count);
    for r in 1..=r_count {
        let sub = subinterval_bounds(r, precision, de, beta_idx)?;
        let start = tenths.partition_point(|&t| t < sub.expanded_lo_tenths);
        let end = tenths.partition_point(|&t| t <= sub.expanded_hi_tenths);
        let cands = &sorted[start..end];
        let pick = match strategy {
            _ if cands.is_empty() => None,
            Strategy::S1 => cands
                .iter()
                .min_by(|a, b| {
                    a.1.bitops
                        .total_cmp(&b.1.bitops)
                        .then_with(|| a.1.config.cmp(&b.1.config))
                })
                .map(|c| c.1),
            Strategy::S2 => cands
                .iter()
                .min_by(|a, b| {
                    b.1.bitops
                        .total_cmp(&a.1.bitops)
                        .then_with(|| a.1.config.cmp(&b.1.config))
                })
                .map(|c| c.1),
            Strategy::S3 => Some(cands[rng.gen_range(0..cands.len())].1),
        };
        chosen.push(pick.map(|p| (p, cands.len())));
    }

    let filled: Vec<usize> = nearest_filled(&chosen.iter().map(|c| c.is_some()).collect::<Vec<_>>());
    let mut entries = Vec::with_capacity(r_count);
    let mut selections = Vec::with_capacity(r_count);
    for (i, &src) in filled.iter().enumerate() {
        let (rec, _) = chosen[src].expect("source is non-empty");
        entries.push(rec.config.clone());
        selections.push(Selection {
            candidates: chosen[i].map(|c| c.1).unwrap_or(0),
            source: src + 1,
            bitops: rec.bitops,
        });
    }
    Ok(LutBuild {
        lut: EdgeToBitLut {
            precision,
            entries,
            layers,
            strategy,
            de,
            beta: beta_idx,
        },
        selections,
    })
}

/// For every slot, the index of the nearest occupied slot (lower on ties).
fn nearest_filled(occupied: &[bool]) -> Vec<usize> {
    let n = occupied.len();
    let mut prev = vec![None; n];
    let mut last = None;
    for i in 0..n {
        if occupied[i] {
            last = Some(i);
        }
        prev[i] = last;
    }
    let mut next = None;
    let mut out = vec![0; n];
    for i in (0..n).rev() {
        if occupied[i] {
            next = Some(i);
        }
        out[i] = match (prev[i], next) {
            (Some(p), Some(q)) => {
                if i - p <= q - i {
                    p
                } else {
                    q
                }
            }
            (Some(p), None) => p,
            (None, Some(q)) => q,
            (None, None) => unreachable!("at least one record exists"),
        };
    }
    out
}

const HEADER_TAG: &str = "CABM-LUT v1";

/// Decimals that print every bound (a multiple of `F / 10`) exactly.
fn bound_digits(precision: f64) -> usize {
    let d = (0..=12)
        .find(|&d| {
            let v = precision * 10f64.powi(d);
            (v - v.round()).abs() <= 1e-9 * v.abs().max(1.0)
        })
        .unwrap_or(12);
    d as usize + 1
}

impl EdgeToBitLut {
    /// A table with explicit entries.
    pub fn from_entries(
        precision: f64,
        entries: Vec<BitConfig>,
        strategy: Strategy,
        de: u32,
        beta: usize,
    ) -> Result<Self> {
        check_precision(precision)?;
        let layers = entries
            .first()
            .map(|c| c.len())
            .ok_or_else(|| CabmError::invalid("a LUT needs at least one entry"))?;
        if entries.iter().any(|e| e.len() != layers) {
            return Err(CabmError::invalid("LUT entries differ in length"));
        }
        Ok(EdgeToBitLut {
            precision,
            entries,
            layers,
            strategy,
            de,
            beta,
        })
    }

    pub fn precision(&self) -> f64 {
        self.precision
    }

    pub fn num_subintervals(&self) -> usize {
        self.entries.len()
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn de(&self) -> u32 {
        self.de
    }

    pub fn beta(&self) -> usize {
        self.beta
    }

    pub fn entries(&self) -> &[BitConfig] {
        &self.entries
    }

    /// Entry for subinterval `r` (1-based).
    pub fn entry(&self, r: usize) -> &BitConfig {
        &self.entries[r - 1]
    }

    pub fn index_of(&self, e: EdgeScore) -> usize {
        if e.precision() == self.precision {
            subinterval_index_steps(e.steps(), self.entries.len())
        } else {
            subinterval_index(e.value(), self.precision, self.entries.len())
        }
    }

    pub fn lookup(&self, e: EdgeScore) -> &BitConfig {
        self.entry(self.index_of(e))
    }

    pub fn lookup_value(&self, e: f64) -> &BitConfig {
        self.entry(subinterval_index(e, self.precision, self.entries.len()))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{HEADER_TAG}; F={}; R={}; layers={}; strategy={}; de={}; beta={}\n",
            self.precision,
            self.entries.len(),
            self.layers,
            self.strategy,
            self.de,
            self.beta
        );
        let digits = bound_digits(self.precision);
        for (i, cfg) in self.entries.iter().enumerate() {
            let r = i + 1;
            let _ = writeln!(
                s,
                "{r} {:.d$} {:.d$} {cfg}",
                self.precision * (r - 1) as f64 / 2.0,
                self.precision * (5 * r - 1) as f64 / 10.0,
                d = digits
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| CabmError::parse(1, "empty LUT file"))?;
        let mut fields = header.split(';').map(str::trim);
        if fields.next() != Some(HEADER_TAG) {
            return Err(CabmError::parse(1, format!("expected header tag {HEADER_TAG:?}")));
        }
        let mut get = |key: &str| -> Result<String> {
            let f = fields
                .next()
                .ok_or_else(|| CabmError::parse(1, format!("missing header field {key}")))?;
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| CabmError::parse(1, format!("malformed header field {f:?}")))?;
            if k.trim() != key {
                return Err(CabmError::parse(1, format!("expected {key}, found {k:?}")));
            }
            Ok(v.trim().to_string())
        };
        let num = |key: &str, v: String| -> Result<usize> {
            v.parse()
                .map_err(|e| CabmError::parse(1, format!("bad {key} {v:?}: {e}")))
        };
        let precision: f64 = get("F")?
            .parse()
            .map_err(|e| CabmError::parse(1, format!("bad F: {e}")))?;
        check_precision(precision).map_err(|e| CabmError::parse(1, e.to_string()))?;
        let r_count = num("R", get("R")?)?;
        let layers = num("layers", get("layers")?)?;
        let strategy: Strategy = get("strategy")?
            .parse()
            .map_err(|e: CabmError| CabmError::parse(1, e.to_string()))?;
        let de = num("de", get("de")?)? as u32;
        let beta = num("beta", get("beta")?)?;
        if r_count == 0 || layers == 0 {
            return Err(CabmError::parse(1, "R and layers must be positive"));
        }

        let mut entries = Vec::with_capacity(r_count);
        for (i, line) in lines {
            let ln = i + 1;
            let r = entries.len() + 1;
            if r > r_count {
                return Err(CabmError::parse(ln, format!("more than R={r_count} entries")));
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(CabmError::parse(ln, "expected `r lo hi b1,...,bL`"));
            }
            let idx: usize = parts[0]
                .parse()
                .map_err(|e| CabmError::parse(ln, format!("bad index: {e}")))?;
            if idx != r {
                return Err(CabmError::parse(ln, format!("expected index {r}, found {idx}")));
            }
            let lo: f64 = parts[1]
                .parse()
                .map_err(|e| CabmError::parse(ln, format!("bad lo: {e}")))?;
            let hi: f64 = parts[2]
                .parse()
                .map_err(|e| CabmError::parse(ln, format!("bad hi: {e}")))?;
            let want_lo = precision * (r - 1) as f64 / 2.0;
            let want_hi = precision * (5 * r - 1) as f64 / 10.0;
            let tol = precision * 1e-3;
            if (lo - want_lo).abs() > tol || (hi - want_hi).abs() > tol {
                return Err(CabmError::parse(
                    ln,
                    format!("bounds [{lo}, {hi}] do not match F={precision} (expected [{want_lo}, {want_hi}])"),
                ));
            }
            let cfg: BitConfig = parts[3]
                .parse()
                .map_err(|e: CabmError| CabmError::parse(ln, e.to_string()))?;
            if cfg.len() != layers {
                return Err(CabmError::parse(
                    ln,
                    format!("{} bits but header says layers={layers}", cfg.len()),
                ));
            }
            for &b in cfg.bits() {
                if b != FULL_PRECISION_BITS && quant::step_size(1.0, b).is_err() {
                    return Err(CabmError::parse(ln, format!("invalid bit width {b}")));
                }
            }
            entries.push(cfg);
        }
        if entries.len() != r_count {
            return Err(CabmError::parse(
                text.lines().count(),
                format!("expected {r_count} entries, found {}", entries.len()),
            ));
        }
        Ok(EdgeToBitLut {
            precision,
            entries,
            layers,
            strategy,
            de,
            beta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// Runs the selectors over `patches` and records edge score, chosen
/// configuration and its BitOPs for each.
pub fn collect_records(
    net: &Supernet,
    selectors: &SelectorBank,
    patches: &[Tensor<f32>],
) -> Result<Vec<BitRecord>> {
    if patches.is_empty() {
        return Err(CabmError::invalid("no patches to collect records from"));
    }
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(32) {
        let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
        let same_shape = refs.iter().all(|t| t.shape() == refs[0].shape());
        let groups: Vec<Vec<&Tensor<f32>>> = if same_shape {
            vec![refs]
        } else {
            refs.into_iter().map(|t| vec![t]).collect()
        };
        for group in groups {
            let batch = Tensor::stack(&group)?;
            let edges = crate::edge::edge_scores(&batch, selectors.precision())?;
            let (configs, _) = select_bits_batch(net, selectors, &batch)?;
            let [_, _, h, w] = batch.shape();
            for (edge, config) in edges.into_iter().zip(configs) {
                let bitops = net.cost(&config, h, w)?.total_bitops;
                out.push(BitRecord {
                    edge,
                    config,
                    bitops,
                });
            }
        }
    }
    Ok(out)
}

/// CSV with header `edge,bitops,b1,...,bL`.
pub fn records_to_csv(records: &[BitRecord]) -> String {
    let layers = records.first().map(|r| r.config.len()).unwrap_or(0);
    let mut s = String::from("edge,bitops");
    for i in 1..=layers {
        let _ = write!(s, ",b{i}");
    }
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{},{},{}", r.edge.value(), r.bitops, r.config);
    }
    s
}

pub fn records_from_csv(text: &str, precision: f64) -> Result<Vec<BitRecord>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| CabmError::parse(1, "empty records file"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "edge" || cols[1] != "bitops" {
        return Err(CabmError::parse(1, "expected header `edge,bitops,b1,...`"));
    }
    for (i, c) in cols[2..].iter().enumerate() {
        if *c != format!("b{}", i + 1) {
            return Err(CabmError::parse(1, format!("unexpected column {c:?}")));
        }
    }
    let layers = cols.len() - 2;
    let mut out = Vec::new();
    for (i, line) in lines {
        let ln = i + 1;
        let vals: Vec<&str> = line.split(',').map(str::trim).collect();
        if vals.len() != layers + 2 {
            return Err(CabmError::parse(ln, format!("expected {} columns", layers + 2)));
        }
        let e: f64 = vals[0]
            .parse()
            .map_err(|err| CabmError::parse(ln, format!("bad edge: {err}")))?;
        let bitops: f64 = vals[1]
            .parse()
            .map_err(|err| CabmError::parse(ln, format!("bad bitops: {err}")))?;
        let config: BitConfig = vals[2..]
            .join(",")
            .parse()
            .map_err(|err: CabmError| CabmError::parse(ln, err.to_string()))?;
        let edge =
            EdgeScore::quantize(e, precision).map_err(|err| CabmError::parse(ln, err.to_string()))?;
        out.push(BitRecord {
            edge,
            config,
            bitops,
        });
    }
    Ok(out)
}
