//! Searchable MBConv layer whose candidate operations are weight subsets of
//! one 5×5, 6×-expansion depthwise superkernel.
//!
//! Three gates decide which subset is used:
//!
//! * `k5`: keep the outer ring of the 5×5 kernel (otherwise only its 3×3 core
//!   is live),
//! * `e3`: keep the first half of the expanded channels (otherwise the whole
//!   depthwise kernel is zero and the layer reduces to its residual),
//! * `e6`: keep the second half of the expanded channels.
//!
//! Each gate compares the squared norm of its weight group against a
//! trainable threshold. The forward value is the hard indicator; gradients
//! are those of a sigmoid of `(norm - threshold) / temperature`.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SUPER_KERNEL: usize = 5;
pub const MAX_EXPANSION: usize = 6;

/// How indicator gates are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateMode {
    /// Hard 0/1 forward, sigmoid gradient (straight-through).
    #[default]
    Ste,
    /// Sigmoid forward and backward. The loss becomes a smooth function of
    /// every weight and threshold, which is what finite differences need.
    Relaxed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Threshold,
}

/// Discrete per-layer operation.
///
/// Serialized as `{"skip":true}` or `{"k":5,"e":6}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "LayerEntry", into = "LayerEntry")]
pub enum LayerChoice {
    Skip,
    MbConv { kernel: usize, expansion: usize },
}

impl LayerChoice {
    /// Candidates in a fixed order: skip (when allowed), 3×3-3, 3×3-6, 5×5-3, 5×5-6.
    pub fn candidates(skip_allowed: bool) -> Vec<LayerChoice> {
        let mut out = Vec::with_capacity(5);
        if skip_allowed {
            out.push(LayerChoice::Skip);
        }
        for kernel in [3, 5] {
            for expansion in [3, 6] {
                out.push(LayerChoice::MbConv { kernel, expansion });
            }
        }
        out
    }

    pub fn label(&self) -> String {
        match self {
            LayerChoice::Skip => "s".to_string(),
            LayerChoice::MbConv { kernel, expansion } => format!("{kernel}x{kernel}e{expansion}"),
        }
    }

    pub fn is_skip(&self) -> bool {
        matches!(self, LayerChoice::Skip)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    skip: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    e: Option<usize>,
}

impl TryFrom<LayerEntry> for LayerChoice {
    type Error = String;

    fn try_from(entry: LayerEntry) -> std::result::Result<Self, String> {
        match (entry.skip, entry.k, entry.e) {
            (Some(true), None, None) => Ok(LayerChoice::Skip),
            (None, Some(kernel @ (3 | 5)), Some(expansion @ (3 | 6))) => Ok(LayerChoice::MbConv { kernel, expansion }),
            (None, Some(k), Some(e)) => Err(format!("unsupported layer k={k} e={e}")),
            _ => Err("layer entry must be {\"skip\":true} or {\"k\":3|5,\"e\":3|6}".into()),
        }
    }
}

impl From<LayerChoice> for LayerEntry {
    fn from(choice: LayerChoice) -> Self {
        match choice {
            LayerChoice::Skip => LayerEntry { skip: Some(true), k: None, e: None },
            LayerChoice::MbConv { kernel, expansion } => LayerEntry { skip: None, k: Some(kernel), e: Some(expansion) },
        }
    }
}

impl fmt::Display for LayerChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Comma-joined labels, e.g. `s,3x3e3,5x5e6`.
pub fn decision_string(choices: &[LayerChoice]) -> String {
    choices.iter().map(LayerChoice::label).collect::<Vec<_>>().join(",")
}

/// Hard outcome of the three gates of one layer.
///
/// Canonical form: a skipped layer has all three flags false, so the five
/// valid triples correspond one-to-one to the [`LayerChoice`] candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct DecisionTriple {
    pub use_k5: bool,
    pub use_e3_or_more: bool,
    pub use_e6: bool,
}

impl DecisionTriple {
    pub const SKIP: DecisionTriple = DecisionTriple { use_k5: false, use_e3_or_more: false, use_e6: false };

    /// Canonicalises raw gate outcomes (`e6` without `e3` is a skip).
    pub fn from_gates(k5: bool, e3: bool, e6: bool) -> Self {
        if !e3 {
            return Self::SKIP;
        }
        Self { use_k5: k5, use_e3_or_more: true, use_e6: e6 }
    }

    pub fn choice(&self) -> LayerChoice {
        if !self.use_e3_or_more {
            return LayerChoice::Skip;
        }
        LayerChoice::MbConv { kernel: if self.use_k5 { 5 } else { 3 }, expansion: if self.use_e6 { 6 } else { 3 } }
    }

    pub fn from_choice(choice: LayerChoice) -> Self {
        match choice {
            LayerChoice::Skip => Self::SKIP,
            LayerChoice::MbConv { kernel, expansion } => {
                Self { use_k5: kernel == 5, use_e3_or_more: true, use_e6: expansion == 6 }
            }
        }
    }
}

/// One searchable MBConv layer.
///
/// Expansion `Cin → 6·Cin` (1×1, per-channel scale and bias, ReLU), depthwise
/// conv with the gated 5×5 superkernel (ReLU), linear projection
/// `6·Cin → Cout`, plus identity residual when the layer may be skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperkernelLayer<T> {
    pub expand_w: Tensor<T>,
    pub expand_scale: Tensor<T>,
    pub expand_bias: Tensor<T>,
    pub dw_super: Tensor<T>,
    pub project_w: Tensor<T>,
    pub t_k5: Tensor<T>,
    pub t_e3: Tensor<T>,
    pub t_e6: Tensor<T>,
    temperature: T,
    pub stride: usize,
    pub skip_allowed: bool,
    cin: usize,
    cout: usize,
}

/// Initial weight scales for a freshly built layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerInit {
    /// Expected squared norm of the 5×5 shell at initialisation. The
    /// depthwise entries are drawn with the matching standard deviation, so
    /// the gate statistics start near the sigmoid's sensitive range whatever
    /// the channel count.
    pub shell_norm: f64,
    /// Starting value of all three thresholds.
    pub threshold: f64,
}

impl LayerInit {
    /// Entry standard deviation giving `E‖shell‖² = shell_norm` for `wide` channels.
    pub fn depthwise_std(&self, wide: usize) -> f64 {
        let shell = (SUPER_KERNEL * SUPER_KERNEL - 9) * wide;
        (self.shell_norm / shell as f64).sqrt()
    }
}

impl Default for LayerInit {
    fn default() -> Self {
        Self { shell_norm: 2.0, threshold: 0.0 }
    }
}

pub const PARAM_NAMES: [&str; 8] =
    ["expand_w", "expand_scale", "expand_bias", "dw_super", "project_w", "t_k5", "t_e3", "t_e6"];

impl<T: Scalar> SuperkernelLayer<T> {
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        stride: usize,
        skip_allowed: bool,
        init: LayerInit,
        rng: &mut R,
    ) -> Result<Self> {
        if cin == 0 || cout == 0 {
            return Err(Error::InvalidConfig("layer channel counts must be positive".into()));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::InvalidConfig(format!("stride {stride} not in {{1, 2}}")));
        }
        if skip_allowed && (stride != 1 || cin != cout) {
            return Err(Error::InvalidConfig(format!(
                "skip requires stride 1 and Cin = Cout (stride {stride}, {cin} -> {cout})"
            )));
        }
        let wide = MAX_EXPANSION * cin;
        let t0 = Tensor::scalar(T::from_f64_lossy(init.threshold));
        Ok(Self {
            expand_w: Tensor::randn(&[cin, wide], (2.0 / cin as f64).sqrt(), rng),
            expand_scale: Tensor::ones(&[wide]),
            expand_bias: Tensor::zeros(&[wide]),
            dw_super: Tensor::randn(&[SUPER_KERNEL, SUPER_KERNEL, wide], init.depthwise_std(wide), rng),
            project_w: Tensor::randn(&[wide, cout], (1.0 / wide as f64).sqrt(), rng),
            t_k5: t0.clone(),
            t_e3: t0.clone(),
            t_e6: t0,
            temperature: T::one(),
            stride,
            skip_allowed,
            cin,
            cout,
        })
    }

    pub fn cin(&self) -> usize {
        self.cin
    }

    /// Sigmoid sharpness of the gates' surrogate gradient.
    pub fn temperature(&self) -> T {
        self.temperature
    }

    pub fn set_temperature(&mut self, temperature: T) -> Result<()> {
        if !(temperature > T::zero()) {
            return Err(Error::NonPositiveTemperature(temperature.to_f64_lossy()));
        }
        self.temperature = temperature;
        Ok(())
    }

    /// Sets all three thresholds to `value`.
    pub fn set_thresholds(&mut self, value: T) {
        for t in [&mut self.t_k5, &mut self.t_e3, &mut self.t_e6] {
            *t = Tensor::scalar(value);
        }
    }

    pub fn cout(&self) -> usize {
        self.cout
    }

    /// `6·Cin`, the superkernel's channel count.
    pub fn wide_channels(&self) -> usize {
        MAX_EXPANSION * self.cin
    }

    /// Checks the structural invariants after e.g. loading weights.
    pub fn validate(&self) -> Result<()> {
        let wide = self.wide_channels();
        let checks: [(&str, &Tensor<T>, Vec<usize>); 8] = [
            ("expand_w", &self.expand_w, vec![self.cin, wide]),
            ("expand_scale", &self.expand_scale, vec![wide]),
            ("expand_bias", &self.expand_bias, vec![wide]),
            ("dw_super", &self.dw_super, vec![SUPER_KERNEL, SUPER_KERNEL, wide]),
            ("project_w", &self.project_w, vec![wide, self.cout]),
            ("t_k5", &self.t_k5, vec![]),
            ("t_e3", &self.t_e3, vec![]),
            ("t_e6", &self.t_e6, vec![]),
        ];
        for (name, t, shape) in checks {
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "superkernel layer",
                    detail: format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
                });
            }
        }
        if self.temperature <= T::zero() {
            return Err(Error::NonPositiveTemperature(self.temperature.to_f64_lossy()));
        }
        Ok(())
    }

    /// Parameters in [`PARAM_NAMES`] order.
    pub fn params(&self) -> [&Tensor<T>; 8] {
        [
            &self.expand_w,
            &self.expand_scale,
            &self.expand_bias,
            &self.dw_super,
            &self.project_w,
            &self.t_k5,
            &self.t_e3,
            &self.t_e6,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor<T>; 8] {
        [
            &mut self.expand_w,
            &mut self.expand_scale,
            &mut self.expand_bias,
            &mut self.dw_super,
            &mut self.project_w,
            &mut self.t_k5,
            &mut self.t_e3,
            &mut self.t_e6,
        ]
    }

    pub fn param_kinds() -> [ParamKind; 8] {
        use ParamKind::*;
        [Weight, Weight, Weight, Weight, Weight, Threshold, Threshold, Threshold]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Records every parameter as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> LayerVars {
        LayerVars {
            expand_w: g.param(self.expand_w.clone()),
            expand_scale: g.param(self.expand_scale.clone()),
            expand_bias: g.param(self.expand_bias.clone()),
            dw_super: g.param(self.dw_super.clone()),
            project_w: g.param(self.project_w.clone()),
            t_k5: g.param(self.t_k5.clone()),
            t_e3: g.param(self.t_e3.clone()),
            t_e6: g.param(self.t_e6.clone()),
        }
    }
}

/// Graph handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub expand_w: Var,
    pub expand_scale: Var,
    pub expand_bias: Var,
    pub dw_super: Var,
    pub project_w: Var,
    pub t_k5: Var,
    pub t_e3: Var,
    pub t_e6: Var,
}

impl LayerVars {
    pub fn all(&self) -> [Var; 8] {
        [
            self.expand_w,
            self.expand_scale,
            self.expand_bias,
            self.dw_super,
            self.project_w,
            self.t_k5,
            self.t_e3,
            self.t_e6,
        ]
    }
}

/// Indicator outputs of one layer (scalar vars, hard-valued under [`GateMode::Ste`]).
#[derive(Debug, Clone, Copy)]
pub struct Gates {
    pub k5: Var,
    pub e3: Var,
    pub e6: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    pub out: Var,
    pub gates: Gates,
}

/// `‖w‖²` of a weight group.
pub fn group_lasso_sq<T: Scalar>(g: &mut Graph<T>, w_subset: Var) -> Result<Var> {
    if g.value(w_subset).is_empty() {
        return Err(Error::EmptySubset);
    }
    Ok(g.sum_squares(w_subset))
}

/// `1(x > t)` forward. Under [`GateMode::Ste`] the value is
/// `hard + (soft - stop_gradient(soft))`, so gradients are those of
/// `soft = σ((x - t) / temperature)` while the forward value stays exactly
/// 0 or 1. Ties (`x == t`) evaluate to 0.
pub fn indicator_ste<T: Scalar>(g: &mut Graph<T>, x: Var, t: Var, temperature: T, mode: GateMode) -> Result<Var> {
    if !(temperature > T::zero()) {
        return Err(Error::NonPositiveTemperature(temperature.to_f64_lossy()));
    }
    let diff = g.sub(x, t)?;
    let z = g.affine(diff, T::one() / temperature, T::zero());
    let soft = g.sigmoid(z);
    match mode {
        GateMode::Relaxed => Ok(soft),
        GateMode::Ste => {
            let hard = if g.item(x) > g.item(t) { T::one() } else { T::zero() };
            let hard = g.scalar(hard);
            let frozen = g.stop_gradient(soft);
            let delta = g.sub(soft, frozen)?;
            g.add(hard, delta)
        }
    }
}

/// 1 on the inner 3×3 core of a 5×5×C kernel, 0 on the outer ring.
pub fn core_mask<T: Scalar>(channels: usize) -> Tensor<T> {
    Tensor::from_fn(&[SUPER_KERNEL, SUPER_KERNEL, channels], |idx| {
        let pos = idx / channels;
        let (i, j) = (pos / SUPER_KERNEL, pos % SUPER_KERNEL);
        if (1..=3).contains(&i) && (1..=3).contains(&j) {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// Complement of [`core_mask`].
pub fn shell_mask<T: Scalar>(channels: usize) -> Tensor<T> {
    core_mask::<T>(channels).map(|v| T::one() - v)
}

/// 1 on the first (`upper = false`) or second half of the channel axis.
pub fn channel_half_mask<T: Scalar>(shape: &[usize], upper: bool) -> Result<Tensor<T>> {
    let c = *shape.last().unwrap_or(&0);
    if c % 2 != 0 {
        return Err(Error::OddChannelCount(c));
    }
    Ok(Tensor::from_fn(shape, |idx| if (idx % c >= c / 2) == upper { T::one() } else { T::zero() }))
}

/// Kernel-size decision: `w_k = w_3x3 + 1(‖shell‖² > t_k5) · shell`.
///
/// Returns the effective kernel and the gate.
pub fn effective_kernel<T: Scalar>(
    g: &mut Graph<T>,
    dw_super: Var,
    t_k5: Var,
    temperature: T,
    mode: GateMode,
) -> Result<(Var, Var)> {
    let shape = g.value(dw_super).shape().to_vec();
    match shape[..] {
        [SUPER_KERNEL, SUPER_KERNEL, _] => {}
        _ => {
            return Err(Error::ShapeMismatch { op: "effective_kernel", detail: format!("superkernel shape {shape:?}") })
        }
    }
    let c = shape[2];
    let core_m = g.constant(core_mask(c));
    let shell_m = g.constant(shell_mask(c));
    let core = g.mul(dw_super, core_m)?;
    let shell = g.mul(dw_super, shell_m)?;
    let norm = group_lasso_sq(g, shell)?;
    let gate = indicator_ste(g, norm, t_k5, temperature, mode)?;
    let gated = g.scale(shell, gate)?;
    Ok((g.add(core, gated)?, gate))
}

/// Expansion and skip decision on the effective kernel:
/// `w = 1(‖w_lo‖² > t_e3) · (w_lo + 1(‖w_hi‖² > t_e6) · w_hi)`, where `w_lo` is
/// the first half of the channels. When `skip_allowed` is false the outer
/// gate is the constant 1.
///
/// Returns `(w, e3, e6)`.
pub fn effective_channels<T: Scalar>(
    g: &mut Graph<T>,
    w_k: Var,
    t_e3: Var,
    t_e6: Var,
    temperature: T,
    mode: GateMode,
    skip_allowed: bool,
) -> Result<(Var, Var, Var)> {
    let shape = g.value(w_k).shape().to_vec();
    let lo_m = g.constant(channel_half_mask(&shape, false)?);
    let hi_m = g.constant(channel_half_mask(&shape, true)?);
    let lo = g.mul(w_k, lo_m)?;
    let hi = g.mul(w_k, hi_m)?;
    let e3 = if skip_allowed {
        let n3 = group_lasso_sq(g, lo)?;
        indicator_ste(g, n3, t_e3, temperature, mode)?
    } else {
        g.scalar(T::one())
    };
    let n6 = group_lasso_sq(g, hi)?;
    let e6 = indicator_ste(g, n6, t_e6, temperature, mode)?;
    let hi_gated = g.scale(hi, e6)?;
    let inner = g.add(lo, hi_gated)?;
    Ok((g.scale(inner, e3)?, e3, e6))
}

/// Forward pass of one searchable layer.
pub fn mbconv_forward<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    layer: &SuperkernelLayer<T>,
    vars: &LayerVars,
    mode: GateMode,
) -> Result<LayerOutput> {
    let xc = *g.value(x).shape().last().unwrap_or(&0);
    if xc != layer.cin() {
        return Err(Error::ShapeMismatch {
            op: "mbconv_forward",
            detail: format!("input has {xc} channels, layer expects {}", layer.cin()),
        });
    }
    let h = g.pointwise_conv(x, vars.expand_w)?;
    let h = g.channel_affine(h, vars.expand_scale, vars.expand_bias)?;
    let h = g.relu(h);

    let (w_k, k5) = effective_kernel(g, vars.dw_super, vars.t_k5, layer.temperature, mode)?;
    let (w, e3, e6) = effective_channels(g, w_k, vars.t_e3, vars.t_e6, layer.temperature, mode, layer.skip_allowed)?;
    let d = g.depthwise_conv(h, w, layer.stride)?;
    let d = g.relu(d);
    let p = g.pointwise_conv(d, vars.project_w)?;
    let out = if layer.skip_allowed { g.add(p, x)? } else { p };
    Ok(LayerOutput { out, gates: Gates { k5, e3, e6 } })
}

/// Hard gate outcomes for the layer's current weights and thresholds.
///
/// Uses the same gate computation as the forward pass, so a network
/// materialised from these decisions reproduces the supernet exactly.
pub fn decide<T: Scalar>(layer: &SuperkernelLayer<T>) -> DecisionTriple {
    let mut g = Graph::new();
    let dw = g.constant(layer.dw_super.clone());
    let (t_k5, t_e3, t_e6) =
        (g.constant(layer.t_k5.clone()), g.constant(layer.t_e3.clone()), g.constant(layer.t_e6.clone()));
    let gates = (|| -> Result<(T, T, T)> {
        let (w_k, k5) = effective_kernel(&mut g, dw, t_k5, layer.temperature, GateMode::Ste)?;
        let (_, e3, e6) =
            effective_channels(&mut g, w_k, t_e3, t_e6, layer.temperature, GateMode::Ste, layer.skip_allowed)?;
        Ok((g.item(k5), g.item(e3), g.item(e6)))
    })()
    .expect("a validated layer has well-formed gate inputs");
    let on = |v: T| v > T::from_f64_lossy(0.5);
    DecisionTriple::from_gates(on(gates.0), on(gates.1), on(gates.2))
}
