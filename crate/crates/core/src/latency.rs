//! Differentiable runtime predictor driven by a per-layer latency table.
//!
//! Per layer, with indicator values `e3`, `e6`, `k5`:
//!
//! ```text
//! R_e = e3 · (R[5x5,e3] + e6 · (R[5x5,e6] − R[5x5,e3]))
//! R   = ρ · R_e + R_e · (1 − ρ) · k5,        ρ = R[3x3,e6] / R[5x5,e6]
//! ```
//!
//! The network total is the sum over searchable layers plus a fixed overhead
//! for the stem and head. The 3×3-e3 runtime is never looked up; it is
//! approximated as `ρ · R[5x5,e3]`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::superkernel::{Gates, LayerChoice};

/// Profiled runtimes of one searchable layer, in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLatency {
    pub r5x5_e3_ms: f64,
    pub r5x5_e6_ms: f64,
    pub r3x3_e6_ms: f64,
    /// Only used to measure the error of the 3×3-e3 approximation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r3x3_e3_ms: Option<f64>,
}

impl LayerLatency {
    /// `R[3x3,e6] / R[5x5,e6]`.
    pub fn kernel_ratio(&self) -> f64 {
        self.r3x3_e6_ms / self.r5x5_e6_ms
    }

    /// The predictor's value for a hard choice.
    pub fn predicted(&self, choice: LayerChoice) -> f64 {
        match choice {
            LayerChoice::Skip => 0.0,
            LayerChoice::MbConv { kernel: 5, expansion: 6 } => self.r5x5_e6_ms,
            LayerChoice::MbConv { kernel: 5, .. } => self.r5x5_e3_ms,
            LayerChoice::MbConv { expansion: 6, .. } => self.r3x3_e6_ms,
            LayerChoice::MbConv { .. } => self.kernel_ratio() * self.r5x5_e3_ms,
        }
    }

    /// What a device with this profile would take, using the measured 3×3-e3
    /// runtime when the table has one.
    pub fn actual(&self, choice: LayerChoice) -> f64 {
        match choice {
            LayerChoice::Skip => 0.0,
            LayerChoice::MbConv { kernel: 5, expansion: 6 } => self.r5x5_e6_ms,
            LayerChoice::MbConv { kernel: 5, .. } => self.r5x5_e3_ms,
            LayerChoice::MbConv { expansion: 6, .. } => self.r3x3_e6_ms,
            LayerChoice::MbConv { .. } => self.r3x3_e3_ms.unwrap_or(self.kernel_ratio() * self.r5x5_e3_ms),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    pub device_label: String,
    /// Runtime of everything that is not searched (stem, head).
    #[serde(default)]
    pub fixed_overhead_ms: f64,
    pub layers: Vec<LayerLatency>,
}

impl LatencyTable {
    /// Hard errors for non-positive or non-finite entries; returns warnings
    /// for rows where a larger operation is recorded as cheaper.
    pub fn validate(&self) -> Result<Vec<String>> {
        if !(self.fixed_overhead_ms >= 0.0 && self.fixed_overhead_ms.is_finite()) {
            return Err(Error::InvalidLatencyTable(format!(
                "fixed_overhead_ms must be finite and >= 0, got {}",
                self.fixed_overhead_ms
            )));
        }
        let mut warnings = Vec::new();
        for (i, row) in self.layers.iter().enumerate() {
            let entries = [
                Some(("r5x5_e3_ms", row.r5x5_e3_ms)),
                Some(("r5x5_e6_ms", row.r5x5_e6_ms)),
                Some(("r3x3_e6_ms", row.r3x3_e6_ms)),
                row.r3x3_e3_ms.map(|v| ("r3x3_e3_ms", v)),
            ];
            for (name, v) in entries.into_iter().flatten() {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::InvalidLatencyTable(format!("layer {i}: {name} = {v} must be positive")));
                }
            }
            if row.r5x5_e6_ms < row.r5x5_e3_ms {
                warnings.push(format!("layer {i}: 5x5-e6 is cheaper than 5x5-e3"));
            }
            if row.r5x5_e6_ms < row.r3x3_e6_ms {
                warnings.push(format!("layer {i}: 5x5-e6 is cheaper than 3x3-e6"));
            }
        }
        Ok(warnings)
    }

    pub fn from_json(text: &str) -> Result<(Self, Vec<String>)> {
        let table: Self = serde_json::from_str(text)?;
        let warnings = table.validate()?;
        Ok((table, warnings))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Vec<String>)> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Loads and checks the row count against the architecture.
    pub fn load_for(path: impl AsRef<Path>, searchable_layers: usize) -> Result<(Self, Vec<String>)> {
        let (table, warnings) = Self::load(path)?;
        table.check_layer_count(searchable_layers)?;
        Ok((table, warnings))
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_pretty()?)?;
        Ok(())
    }

    /// SHA-256 of the compact serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("latency table serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn check_layer_count(&self, searchable_layers: usize) -> Result<()> {
        if self.layers.len() != searchable_layers {
            return Err(Error::LayerCountMismatch { expected: searchable_layers, found: self.layers.len() });
        }
        Ok(())
    }

    /// Hard-decision prediction for a whole architecture.
    pub fn predict(&self, choices: &[LayerChoice]) -> Result<f64> {
        self.check_layer_count(choices.len())?;
        let layers: f64 = self.layers.iter().zip(choices).map(|(r, &c)| r.predicted(c)).sum();
        Ok(layers + self.fixed_overhead_ms)
    }
}

/// `(1 − s) · a + s · b`, exact at `s ∈ {0, 1}`.
fn lerp<T: Scalar>(g: &mut Graph<T>, s: Var, a: f64, b: f64) -> Result<Var> {
    let from = g.affine(s, T::from_f64_lossy(-a), T::from_f64_lossy(a));
    let to = g.affine(s, T::from_f64_lossy(b), T::zero());
    g.add(from, to)
}

fn check_row(row: &LayerLatency) -> Result<()> {
    if !(row.r5x5_e6_ms > 0.0) {
        return Err(Error::InvalidLatencyTable("r5x5_e6_ms must be positive".into()));
    }
    Ok(())
}

/// `R_e = e3 · (R[5x5,e3] + e6 · (R[5x5,e6] − R[5x5,e3]))`, evaluated as
/// `e3 · ((1 − e6) · R[5x5,e3] + e6 · R[5x5,e6])`.
pub fn layer_runtime_e<T: Scalar>(g: &mut Graph<T>, e3: Var, e6: Var, row: &LayerLatency) -> Result<Var> {
    let inner = lerp(g, e6, row.r5x5_e3_ms, row.r5x5_e6_ms)?;
    g.mul(e3, inner)
}

/// `R = R_e · (ρ + (1 − ρ) · k5)` with `ρ = R[3x3,e6] / R[5x5,e6]`.
///
/// Expanded over the four table corners,
/// `e3 · ((1 − k5) · ((1 − e6) · ρ·R[5x5,e3] + e6 · R[3x3,e6]) + k5 · ((1 − e6) · R[5x5,e3] + e6 · R[5x5,e6]))`,
/// which is the same polynomial but returns each table entry bit-exactly
/// when the gates are hard.
pub fn layer_runtime<T: Scalar>(g: &mut Graph<T>, e3: Var, e6: Var, k5: Var, row: &LayerLatency) -> Result<Var> {
    check_row(row)?;
    let small = lerp(g, e6, row.kernel_ratio() * row.r5x5_e3_ms, row.r3x3_e6_ms)?;
    let large = lerp(g, e6, row.r5x5_e3_ms, row.r5x5_e6_ms)?;
    let keep_small = g.affine(k5, -T::one(), T::one());
    let a = g.mul(keep_small, small)?;
    let b = g.mul(k5, large)?;
    let mixed = g.add(a, b)?;
    g.mul(e3, mixed)
}

/// Sum of per-layer runtimes plus the table's fixed overhead.
pub fn total_runtime<T: Scalar>(g: &mut Graph<T>, gates: &[Gates], lut: &LatencyTable) -> Result<Var> {
    lut.check_layer_count(gates.len())?;
    let mut terms = Vec::with_capacity(gates.len());
    for (gate, row) in gates.iter().zip(&lut.layers) {
        terms.push(layer_runtime(g, gate.e3, gate.e6, gate.k5, row)?);
    }
    let overhead = T::from_f64_lossy(lut.fixed_overhead_ms);
    match terms.is_empty() {
        true => Ok(g.scalar(overhead)),
        false => {
            let sum = g.sum_scalars(&terms)?;
            Ok(g.affine(sum, T::one(), overhead))
        }
    }
}

/// Outcome of checking the predictor against synthetic measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub samples: usize,
    pub noise_sigma_ms: f64,
    pub seed: u64,
    pub rmse_ms: f64,
    /// Mean of `|predicted − measured| / measured`.
    pub mean_rel_error: f64,
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "samples={} noise_sigma_ms={} rmse_ms={:.6} mean_rel_error={:.6} ({:.3}%)",
            self.samples,
            self.noise_sigma_ms,
            self.rmse_ms,
            self.mean_rel_error,
            100.0 * self.mean_rel_error
        )
    }
}

/// Samples `n_samples` uniformly random hard architectures, "measures" each
/// as its true table sum plus Gaussian noise, and compares the predictor.
///
/// `skip_allowed` restricts which layers may draw the skip option; `None`
/// lets every layer skip.
pub fn validate_runtime_model(
    lut: &LatencyTable,
    n_samples: usize,
    noise_sigma: f64,
    seed: u64,
    skip_allowed: Option<&[bool]>,
) -> Result<ValidationReport> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise_sigma must be finite and >= 0, got {noise_sigma}")));
    }
    if let Some(mask) = skip_allowed {
        lut.check_layer_count(mask.len())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma).expect("validated sigma");
    let candidates: Vec<Vec<LayerChoice>> =
        (0..lut.layers.len()).map(|i| LayerChoice::candidates(skip_allowed.is_none_or(|m| m[i]))).collect();

    let (mut sq, mut rel) = (0.0, 0.0);
    for _ in 0..n_samples {
        let arch: Vec<LayerChoice> = candidates.iter().map(|c| c[rng.random_range(0..c.len())]).collect();
        let predicted = lut.predict(&arch)?;
        let actual: f64 = lut.layers.iter().zip(&arch).map(|(r, &c)| r.actual(c)).sum::<f64>() + lut.fixed_overhead_ms;
        let measured = actual + noise.sample(&mut rng);
        let err = predicted - measured;
        sq += err * err;
        rel += err.abs() / measured.abs();
    }
    let n = n_samples as f64;
    Ok(ValidationReport {
        samples: n_samples,
        noise_sigma_ms: noise_sigma,
        seed,
        rmse_ms: (sq / n).sqrt(),
        mean_rel_error: rel / n,
    })
}

/// Geometry of one searchable layer, enough to estimate its cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerGeometry {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
}

impl LayerGeometry {
    /// Multiply-accumulates of MBConv-k×k-e on this layer.
    pub fn macs(&self, kernel: usize, expansion: usize) -> f64 {
        let mid = (expansion * self.cin) as f64;
        let (oh, ow) = ((self.height - 1) / self.stride + 1, (self.width - 1) / self.stride + 1);
        let expand = (self.height * self.width) as f64 * self.cin as f64 * mid;
        let depthwise = (oh * ow) as f64 * mid * (kernel * kernel) as f64;
        let project = (oh * ow) as f64 * mid * self.cout as f64;
        expand + depthwise + project
    }
}

/// Parameters of the synthetic device used to fabricate latency tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDevice {
    pub device_label: String,
    pub fixed_overhead_ms: f64,
    /// Per-operation launch cost.
    pub base_ms: f64,
    pub ms_per_mac: f64,
    /// Each entry is scaled by a uniform factor in `[1 − jitter, 1 + jitter]`.
    pub jitter: f64,
}

impl Default for SynthDevice {
    fn default() -> Self {
        Self {
            device_label: "synthetic-mac-model".to_string(),
            fixed_overhead_ms: 0.5,
            base_ms: 0.05,
            ms_per_mac: 2e-5,
            jitter: 0.1,
        }
    }
}

/// Fabricates a plausible latency table: cost proportional to MACs, jittered,
/// then repaired so the larger operations are never cheaper.
pub fn synthesize_table(geometry: &[LayerGeometry], device: &SynthDevice, seed: u64) -> Result<LatencyTable> {
    if !(0.0..1.0).contains(&device.jitter) {
        return Err(Error::InvalidArgument("jitter must lie in [0, 1)".into()));
    }
    if !(device.base_ms >= 0.0 && device.ms_per_mac > 0.0) {
        return Err(Error::InvalidArgument("device costs must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |geo: &LayerGeometry, k: usize, e: usize| {
        let factor = 1.0 + device.jitter * (2.0 * rng.random::<f64>() - 1.0);
        (device.base_ms + device.ms_per_mac * geo.macs(k, e)) * factor
    };
    let layers = geometry
        .iter()
        .map(|geo| {
            let r33 = draw(geo, 3, 3);
            let r53 = draw(geo, 5, 3).max(r33);
            let r36 = draw(geo, 3, 6).max(r33);
            let r56 = draw(geo, 5, 6).max(r53).max(r36);
            LayerLatency { r5x5_e3_ms: r53, r5x5_e6_ms: r56, r3x3_e6_ms: r36, r3x3_e3_ms: Some(r33) }
        })
        .collect();
    let table =
        LatencyTable { device_label: device.device_label.clone(), fixed_overhead_ms: device.fixed_overhead_ms, layers };
    table.validate()?;
    Ok(table)
}
