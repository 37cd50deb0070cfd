use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::latency::LatencyTable;
use crate::search::{nas_loss, NasLoss};
use crate::space::{Supernet, SupernetVars};
use crate::superkernel::GateMode;
use crate::tensor::Tensor;

/// A loss value plus a fingerprint of the ReLU sign pattern that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub value: f64,
    pub signature: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSettings {
    pub h: f64,
    pub tolerance: f64,
    /// Absolute differences at or below this always pass.
    pub abs_floor: f64,
    /// Checks a seeded random subset of each larger tensor when set.
    pub max_coords_per_param: Option<usize>,
    pub sample_seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self { h: 1e-5, tolerance: 1e-4, abs_floor: 1e-8, max_coords_per_param: None, sample_seed: 0 }
    }
}

impl GradCheckSettings {
    fn validate(&self) -> Result<()> {
        check_step(self.h)?;
        if !(self.tolerance > 0.0 && self.abs_floor >= 0.0) {
            return Err(Error::InvalidArgument("tolerance must be positive and abs_floor >= 0".into()));
        }
        Ok(())
    }

    /// `|a − n| / max(|a|, |n|, abs_floor / tolerance)`, so that the error is
    /// within tolerance exactly when the relative or the absolute test passes.
    pub fn error(&self, analytic: f64, numeric: f64) -> f64 {
        let scale = analytic.abs().max(numeric.abs()).max(self.abs_floor / self.tolerance);
        (analytic - numeric).abs() / scale
    }
}

fn check_step(h: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidArgument(format!("step h = {h} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss(v))
    }
}

/// Central differences `(f(x + h) − f(x − h)) / 2h` for every coordinate.
pub fn finite_difference_grad(
    mut f: impl FnMut(&[Tensor<f64>]) -> Result<f64>,
    params: &[Tensor<f64>],
    h: f64,
) -> Result<Vec<Tensor<f64>>> {
    check_step(h)?;
    finite(f(params)?)?;
    let mut work = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Tensor::zeros(params[p].shape());
        for i in 0..params[p].len() {
            let x = params[p].data()[i];
            work[p].data_mut()[i] = x + h;
            let plus = finite(f(&work)?)?;
            work[p].data_mut()[i] = x - h;
            let minus = finite(f(&work)?)?;
            work[p].data_mut()[i] = x;
            grad.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        grads.push(grad);
    }
    Ok(grads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose ±h probes crossed a ReLU kink.
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailingCoordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub precision: String,
    pub tolerance: f64,
    pub abs_floor: f64,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub params: Vec<ParamReport>,
    pub failing: Vec<FailingCoordinate>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "gradcheck {}: max_rel_error={:.3e} tolerance={:.0e} abs_floor={:.0e} h={:.0e} precision={}",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tolerance,
            self.abs_floor,
            self.h,
            self.precision
        )?;
        writeln!(f, "checked={} skipped_at_kinks={}", self.checked, self.skipped)?;
        for p in &self.params {
            writeln!(
                f,
                "  {:<24} checked={:<6} skipped={:<4} max_rel_error={:.3e}",
                p.name, p.checked, p.skipped, p.max_rel_error
            )?;
        }
        for c in &self.failing {
            writeln!(
                f,
                "  FAIL {}[{}]: analytic={:.10e} numeric={:.10e} rel_error={:.3e}",
                c.param, c.index, c.analytic, c.numeric, c.rel_error
            )?;
        }
        Ok(())
    }
}

/// Compares `analytic` gradients with central differences of `f`.
///
/// A coordinate is skipped when either probe changes the ReLU sign pattern:
/// there the loss is not differentiable along that axis and the difference
/// quotient straddles two linear pieces.
pub fn check_gradients(
    mut f: impl FnMut(&[Tensor<f64>]) -> Result<Probe>,
    params: &[Tensor<f64>],
    names: &[String],
    analytic: &[Tensor<f64>],
    settings: &GradCheckSettings,
) -> Result<GradCheckReport> {
    settings.validate()?;
    if params.len() != analytic.len() || params.len() != names.len() {
        return Err(Error::InvalidArgument("params, names and gradients differ in length".into()));
    }
    let base = f(params)?;
    finite(base.value)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.sample_seed);
    let mut work = params.to_vec();
    let (mut reports, mut failing) = (Vec::new(), Vec::new());
    for p in 0..params.len() {
        if analytic[p].shape() != params[p].shape() {
            return Err(Error::ShapeMismatch {
                op: "gradcheck",
                detail: format!("{}: gradient {:?} vs param {:?}", names[p], analytic[p].shape(), params[p].shape()),
            });
        }
        let n = params[p].len();
        let mut coords: Vec<usize> = match settings.max_coords_per_param {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        coords.sort_unstable();
        let mut report = ParamReport { name: names[p].clone(), checked: 0, skipped: 0, max_rel_error: 0.0 };
        for i in coords {
            let x = params[p].data()[i];
            work[p].data_mut()[i] = x + settings.h;
            let plus = f(&work)?;
            work[p].data_mut()[i] = x - settings.h;
            let minus = f(&work)?;
            work[p].data_mut()[i] = x;
            if plus.signature != base.signature || minus.signature != base.signature {
                report.skipped += 1;
                continue;
            }
            let numeric = (finite(plus.value)? - finite(minus.value)?) / (2.0 * settings.h);
            let a = analytic[p].data()[i];
            let err = settings.error(a, numeric);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(err);
            if !(err <= settings.tolerance) {
                failing.push(FailingCoordinate {
                    param: names[p].clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: err,
                });
            }
        }
        reports.push(report);
    }
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        h: settings.h,
        precision: "f64".into(),
        tolerance: settings.tolerance,
        abs_floor: settings.abs_floor,
        max_rel_error,
        checked: reports.iter().map(|r| r.checked).sum(),
        skipped: reports.iter().map(|r| r.skipped).sum(),
        passed: failing.is_empty() && max_rel_error <= settings.tolerance,
        params: reports,
        failing,
    })
}

/// Gradient check of the full search objective with every gate relaxed to
/// its sigmoid, over all supernet parameters.
pub fn gradcheck_nas_loss(
    supernet: &Supernet<f64>,
    images: &Tensor<f64>,
    labels: &[usize],
    lut: &LatencyTable,
    lambda: f64,
    settings: &GradCheckSettings,
) -> Result<GradCheckReport> {
    let evaluate = |net: &Supernet<f64>| -> Result<(Graph<f64>, SupernetVars, NasLoss)> {
        let mut g = Graph::new();
        let vars = net.bind(&mut g);
        let x = g.constant(images.clone());
        let out = nas_loss(&mut g, net, &vars, x, labels, lut, lambda, GateMode::Relaxed)?;
        Ok((g, vars, out))
    };
    let (mut g, vars, out) = evaluate(supernet)?;
    g.backward(out.loss)?;
    let named = supernet.named_params();
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let params: Vec<Tensor<f64>> = named.iter().map(|(_, t)| (*t).clone()).collect();
    let analytic: Vec<Tensor<f64>> = vars
        .all()
        .into_iter()
        .zip(&names)
        .map(|(v, name)| g.grad(v).cloned().ok_or_else(|| Error::InvalidArgument(format!("no gradient for {name}"))))
        .collect::<Result<_>>()?;
    let mut scratch = supernet.clone();
    check_gradients(
        |ps| {
            for ((_, slot), p) in scratch.params_mut().into_iter().zip(ps) {
                slot.data_mut().copy_from_slice(p.data());
            }
            let (g, _, out) = evaluate(&scratch)?;
            Ok(Probe { value: g.item(out.loss), signature: g.activation_signature() })
        },
        &params,
        &names,
        &analytic,
        settings,
    )
}
