//! Macro-architecture of the searchable network, derived architectures, and
//! their serialized forms.
//!
//! A network is a 3×3 stem (conv, per-channel scale and bias, ReLU), a chain
//! of blocks of searchable layers, and a head (global mean pool, dense).
//! The first layer of every block changes channels or stride and can never
//! be skipped; the remaining layers keep shape and may be skipped.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::latency::LayerGeometry;
use crate::scalar::Scalar;
use crate::superkernel::{
    decide, decision_string, mbconv_forward, GateMode, Gates, LayerChoice, LayerInit, LayerVars, ParamKind,
    SuperkernelLayer, MAX_EXPANSION, PARAM_NAMES, SUPER_KERNEL,
};
use crate::tensor::Tensor;

/// Version tag written into every artifact file.
pub const SCHEMA_VERSION: u32 = 1;

const STEM_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub num_layers: usize,
    pub out_channels: usize,
    pub first_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacroArchConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    pub stem_channels: usize,
    pub blocks: Vec<BlockConfig>,
    pub num_classes: usize,
    pub seed: u64,
    #[serde(default)]
    pub layer_init: LayerInit,
}

/// Resolved shape of one searchable layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub skip_allowed: bool,
    /// Spatial size of the layer's input.
    pub height: usize,
    pub width: usize,
}

impl LayerSpec {
    pub fn geometry(&self) -> LayerGeometry {
        LayerGeometry { cin: self.cin, cout: self.cout, stride: self.stride, height: self.height, width: self.width }
    }
}

impl MacroArchConfig {
    /// Two blocks of two layers on 8×8×2 inputs, four channels throughout.
    pub fn toy(seed: u64) -> Self {
        Self {
            input_height: 8,
            input_width: 8,
            input_channels: 2,
            stem_channels: 4,
            blocks: vec![
                BlockConfig { num_layers: 2, out_channels: 4, first_stride: 1 },
                BlockConfig { num_layers: 2, out_channels: 4, first_stride: 1 },
            ],
            num_classes: 2,
            seed,
            layer_init: LayerInit::default(),
        }
    }

    /// Default desk-scale space: 28×28×1 inputs, a 4-channel block and a
    /// strided 8-channel block of two layers each.
    pub fn desk(seed: u64) -> Self {
        Self {
            input_height: 28,
            input_width: 28,
            input_channels: 1,
            blocks: vec![
                BlockConfig { num_layers: 2, out_channels: 4, first_stride: 1 },
                BlockConfig { num_layers: 2, out_channels: 8, first_stride: 2 },
            ],
            ..Self::toy(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_height", self.input_height),
            ("input_width", self.input_width),
            ("input_channels", self.input_channels),
            ("stem_channels", self.stem_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be at least 2".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.num_layers == 0 || b.out_channels == 0 {
                return Err(Error::InvalidConfig(format!("block {i} must have layers and channels")));
            }
            if !(b.first_stride == 1 || b.first_stride == 2) {
                return Err(Error::InvalidConfig(format!(
                    "block {i}: first_stride {} not in {{1, 2}}",
                    b.first_stride
                )));
            }
        }
        if !(self.layer_init.shell_norm >= 0.0
            && self.layer_init.shell_norm.is_finite()
            && self.layer_init.threshold.is_finite())
        {
            return Err(Error::InvalidConfig("layer_init values out of range".into()));
        }
        Ok(())
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let (mut c, mut h, mut w) = (self.stem_channels, self.input_height, self.input_width);
        for block in &self.blocks {
            for j in 0..block.num_layers {
                let stride = if j == 0 { block.first_stride } else { 1 };
                specs.push(LayerSpec {
                    cin: c,
                    cout: block.out_channels,
                    stride,
                    skip_allowed: j > 0,
                    height: h,
                    width: w,
                });
                c = block.out_channels;
                h = (h - 1) / stride + 1;
                w = (w - 1) / stride + 1;
            }
        }
        specs
    }

    pub fn searchable_layers(&self) -> usize {
        self.blocks.iter().map(|b| b.num_layers).sum()
    }

    pub fn skip_mask(&self) -> Vec<bool> {
        self.layer_specs().iter().map(|s| s.skip_allowed).collect()
    }

    pub fn geometry(&self) -> Vec<LayerGeometry> {
        self.layer_specs().iter().map(LayerSpec::geometry).collect()
    }

    /// Channels entering the head.
    pub fn final_channels(&self) -> usize {
        self.blocks.last().map_or(self.stem_channels, |b| b.out_channels)
    }

    fn stem_and_head_params(&self) -> usize {
        let s = self.stem_channels;
        STEM_KERNEL * STEM_KERNEL * self.input_channels * s
            + 2 * s
            + self.final_channels() * self.num_classes
            + self.num_classes
    }

    /// Closed-form trainable-parameter count of the supernet.
    pub fn supernet_param_count(&self) -> usize {
        let layers: usize = self
            .layer_specs()
            .iter()
            .map(|l| {
                let wide = MAX_EXPANSION * l.cin;
                l.cin * wide + 2 * wide + SUPER_KERNEL * SUPER_KERNEL * wide + wide * l.cout + 3
            })
            .sum();
        self.stem_and_head_params() + layers
    }

    /// Closed-form parameter count of a fixed network with the given choices.
    pub fn fixed_param_count(&self, choices: &[LayerChoice]) -> Result<usize> {
        let specs = self.layer_specs();
        if specs.len() != choices.len() {
            return Err(Error::LayerCountMismatch { expected: specs.len(), found: choices.len() });
        }
        let layers: usize = specs
            .iter()
            .zip(choices)
            .map(|(l, c)| match *c {
                LayerChoice::Skip => 0,
                LayerChoice::MbConv { kernel, expansion } => {
                    let mid = expansion * l.cin;
                    l.cin * mid + 2 * mid + kernel * kernel * mid + mid * l.cout
                }
            })
            .sum();
        Ok(self.stem_and_head_params() + layers)
    }

    pub fn hash(&self) -> String {
        canonical_hash(self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let config: Self = read_json(path)?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }
}

/// SHA-256 (hex) of the compact JSON form.
pub fn canonical_hash<S: Serialize>(value: &S) -> String {
    let compact = serde_json::to_string(value).expect("artifact types serialize");
    hex::encode(Sha256::digest(compact.as_bytes()))
}

/// Pretty JSON with a trailing newline; the on-disk form of every artifact.
pub fn to_canonical_json<S: Serialize>(value: &S) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

pub(crate) fn write_json<S: Serialize>(path: impl AsRef<Path>, value: &S) -> Result<()> {
    std::fs::write(path, to_canonical_json(value)?)?;
    Ok(())
}

pub(crate) fn read_json<D: DeserializeOwned>(path: impl AsRef<Path>) -> Result<D> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))
}

/// 3×3 conv, per-channel scale and bias, ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Stem<T> {
    pub w: Tensor<T>,
    pub scale: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Global mean pool followed by a dense classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Stem<T> {
    fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (STEM_KERNEL * STEM_KERNEL * cin) as f64;
        Self {
            w: Tensor::randn(&[STEM_KERNEL, STEM_KERNEL, cin, cout], (2.0 / fan_in).sqrt(), rng),
            scale: Tensor::ones(&[cout]),
            bias: Tensor::zeros(&[cout]),
        }
    }

    fn bind(&self, g: &mut Graph<T>) -> [Var; 3] {
        [g.param(self.w.clone()), g.param(self.scale.clone()), g.param(self.bias.clone())]
    }

    fn params_mut(&mut self) -> [&mut Tensor<T>; 3] {
        [&mut self.w, &mut self.scale, &mut self.bias]
    }
}

fn stem_forward<T: Scalar>(g: &mut Graph<T>, x: Var, vars: &[Var; 3]) -> Result<Var> {
    let h = g.conv2d(x, vars[0], 1)?;
    let h = g.channel_affine(h, vars[1], vars[2])?;
    Ok(g.relu(h))
}

impl<T: Scalar> Head<T> {
    fn new(c: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { w: Tensor::randn(&[c, classes], (1.0 / c as f64).sqrt(), rng), b: Tensor::zeros(&[classes]) }
    }

    fn bind(&self, g: &mut Graph<T>) -> [Var; 2] {
        [g.param(self.w.clone()), g.param(self.b.clone())]
    }

    fn params_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.w, &mut self.b]
    }
}

fn head_forward<T: Scalar>(g: &mut Graph<T>, x: Var, vars: &[Var; 2]) -> Result<Var> {
    let pooled = g.global_mean_pool(x)?;
    g.dense(pooled, vars[0], vars[1])
}

fn check_input(config: &MacroArchConfig, shape: &[usize]) -> Result<()> {
    let expected = [config.input_height, config.input_width, config.input_channels];
    if shape.len() != 4 || shape[1..] != expected {
        return Err(Error::ShapeMismatch {
            op: "network input",
            detail: format!("got {shape:?}, expected [N, {}, {}, {}]", expected[0], expected[1], expected[2]),
        });
    }
    Ok(())
}

/// The searchable network.
#[derive(Debug, Clone, PartialEq)]
pub struct Supernet<T> {
    config: MacroArchConfig,
    pub stem: Stem<T>,
    pub layers: Vec<SuperkernelLayer<T>>,
    pub head: Head<T>,
}

#[derive(Debug, Clone)]
pub struct SupernetVars {
    pub stem: [Var; 3],
    pub layers: Vec<LayerVars>,
    pub head: [Var; 2],
}

impl SupernetVars {
    /// Every parameter handle, in [`Supernet::params_mut`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = self.stem.to_vec();
        out.extend(self.layers.iter().flat_map(|l| l.all()));
        out.extend(self.head);
        out
    }
}

#[derive(Debug, Clone)]
pub struct SupernetOutput {
    pub logits: Var,
    pub gates: Vec<Gates>,
}

/// Builds a freshly initialised supernet; identical configs give identical weights.
pub fn build_supernet<T: Scalar>(config: &MacroArchConfig) -> Result<Supernet<T>> {
    Supernet::build(config)
}

impl<T: Scalar> Supernet<T> {
    pub fn build(config: &MacroArchConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let stem = Stem::new(config.input_channels, config.stem_channels, &mut rng);
        let layers = config
            .layer_specs()
            .iter()
            .map(|s| SuperkernelLayer::new(s.cin, s.cout, s.stride, s.skip_allowed, config.layer_init, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Head::new(config.final_channels(), config.num_classes, &mut rng);
        Ok(Self { config: config.clone(), stem, layers, head })
    }

    pub fn config(&self) -> &MacroArchConfig {
        &self.config
    }

    pub fn searchable_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn set_temperature(&mut self, temperature: T) -> Result<()> {
        self.layers.iter_mut().try_for_each(|l| l.set_temperature(temperature))
    }

    pub fn set_thresholds(&mut self, value: T) {
        self.layers.iter_mut().for_each(|l| l.set_thresholds(value));
    }

    pub fn bind(&self, g: &mut Graph<T>) -> SupernetVars {
        SupernetVars {
            stem: self.stem.bind(g),
            layers: self.layers.iter().map(|l| l.bind(g)).collect(),
            head: self.head.bind(g),
        }
    }

    /// Logits and the per-layer gates. `x` is `[N, H, W, C]`.
    pub fn forward(&self, g: &mut Graph<T>, vars: &SupernetVars, x: Var, mode: GateMode) -> Result<SupernetOutput> {
        check_input(&self.config, g.value(x).shape())?;
        let mut h = stem_forward(g, x, &vars.stem)?;
        let mut gates = Vec::with_capacity(self.layers.len());
        for (layer, lv) in self.layers.iter().zip(&vars.layers) {
            let out = mbconv_forward(g, h, layer, lv, mode)?;
            gates.push(out.gates);
            h = out.out;
        }
        Ok(SupernetOutput { logits: head_forward(g, h, &vars.head)?, gates })
    }

    /// Mutable parameters with their kinds, in a fixed order.
    pub fn params_mut(&mut self) -> Vec<(ParamKind, &mut Tensor<T>)> {
        let mut out: Vec<(ParamKind, &mut Tensor<T>)> =
            self.stem.params_mut().into_iter().map(|t| (ParamKind::Weight, t)).collect();
        let kinds = SuperkernelLayer::<T>::param_kinds();
        for layer in &mut self.layers {
            out.extend(kinds.into_iter().zip(layer.params_mut()));
        }
        out.extend(self.head.params_mut().into_iter().map(|t| (ParamKind::Weight, t)));
        out
    }

    /// `(name, tensor)` pairs in [`Supernet::params_mut`] order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("stem.w".to_string(), &self.stem.w),
            ("stem.scale".to_string(), &self.stem.scale),
            ("stem.bias".to_string(), &self.stem.bias),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in PARAM_NAMES.iter().zip(layer.params()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("head.w".to_string(), &self.head.w));
        out.push(("head.b".to_string(), &self.head.b));
        out
    }

    /// Trainable parameters, counted from the tensors themselves.
    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Hard per-layer decisions for the current weights and thresholds.
    pub fn decisions(&self) -> Vec<LayerChoice> {
        self.layers.iter().map(|l| decide(l).choice()).collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: SCHEMA_VERSION,
            config_hash: self.config.hash(),
            num_layers: self.layers.len(),
            temperature: self.layers.first().map_or(1.0, |l| l.temperature().to_f64_lossy()),
            params: self
                .named_params()
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().iter().map(|v| v.to_f64_lossy()).collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds a supernet for `config` and overwrites its weights from `ckpt`.
    pub fn from_checkpoint(config: &MacroArchConfig, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.version != SCHEMA_VERSION {
            return Err(Error::Malformed(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        if ckpt.num_layers != config.searchable_layers() {
            return Err(Error::LayerCountMismatch { expected: config.searchable_layers(), found: ckpt.num_layers });
        }
        if ckpt.config_hash != config.hash() {
            return Err(Error::InvalidConfig("checkpoint was written for a different config".into()));
        }
        let mut net = Self::build(config)?;
        let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
        if names.len() != ckpt.params.len() {
            return Err(Error::Malformed(format!(
                "checkpoint has {} tensors, network has {}",
                ckpt.params.len(),
                names.len()
            )));
        }
        for (((_, slot), name), stored) in net.params_mut().into_iter().zip(&names).zip(&ckpt.params) {
            if &stored.name != name || stored.shape != slot.shape() {
                return Err(Error::Malformed(format!(
                    "tensor {} {:?} does not match {name} {:?}",
                    stored.name,
                    stored.shape,
                    slot.shape()
                )));
            }
            let data = stored.data.iter().map(|&v| T::from_f64_lossy(v)).collect();
            *slot = Tensor::new(stored.shape.clone(), data)?;
        }
        net.set_temperature(T::from_f64_lossy(ckpt.temperature))?;
        Ok(net)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Supernet weights. Values are stored as f64 whatever the run's precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub num_layers: usize,
    pub temperature: f64,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub config_hash: String,
    pub lut_hash: String,
    pub lambda: f64,
    pub seed: u64,
    pub search_steps: usize,
}

/// Discrete outcome of a search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerivedArchitecture {
    pub version: u32,
    pub config: MacroArchConfig,
    pub layers: Vec<LayerChoice>,
    pub provenance: Provenance,
}

impl DerivedArchitecture {
    pub fn new(config: MacroArchConfig, layers: Vec<LayerChoice>, provenance: Provenance) -> Result<Self> {
        let arch = Self { version: SCHEMA_VERSION, config, layers, provenance };
        arch.validate()?;
        Ok(arch)
    }

    /// Entry count, skip placement and the recorded config hash.
    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(Error::Malformed(format!("unsupported architecture version {}", self.version)));
        }
        self.config.validate()?;
        let mask = self.config.skip_mask();
        if mask.len() != self.layers.len() {
            return Err(Error::LayerCountMismatch { expected: mask.len(), found: self.layers.len() });
        }
        if let Some(i) = self.layers.iter().zip(&mask).position(|(c, &ok)| c.is_skip() && !ok) {
            return Err(Error::InvalidConfig(format!("layer {i} cannot be skipped")));
        }
        if self.provenance.config_hash != self.config.hash() {
            return Err(Error::Malformed("provenance config_hash does not match config".into()));
        }
        Ok(())
    }

    pub fn decision_string(&self) -> String {
        decision_string(&self.layers)
    }

    pub fn to_json(&self) -> Result<String> {
        to_canonical_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let arch: Self = serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let arch: Self = read_json(path)?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn hash(&self) -> String {
        canonical_hash(self)
    }
}

/// Hard decisions of every layer, with provenance filled from the supernet's
/// config. The caller supplies the search-run fields.
pub fn derive_architecture<T: Scalar>(
    supernet: &Supernet<T>,
    lut_hash: &str,
    lambda: f64,
    seed: u64,
    search_steps: usize,
) -> Result<DerivedArchitecture> {
    let config = supernet.config().clone();
    let provenance =
        Provenance { config_hash: config.hash(), lut_hash: lut_hash.to_string(), lambda, seed, search_steps };
    DerivedArchitecture::new(config, supernet.decisions(), provenance)
}

/// Plain MBConv layer with a fixed kernel size and expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactMbConv<T> {
    pub kernel: usize,
    pub expansion: usize,
    pub stride: usize,
    pub residual: bool,
    pub expand_w: Tensor<T>,
    pub expand_scale: Tensor<T>,
    pub expand_bias: Tensor<T>,
    pub dw: Tensor<T>,
    pub project_w: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CompactLayer<T> {
    Identity,
    MbConv(CompactMbConv<T>),
}

impl<T: Scalar> CompactMbConv<T> {
    /// Copies the weight subset that `kernel`/`expansion` select.
    fn slice_from(layer: &SuperkernelLayer<T>, kernel: usize, expansion: usize) -> Self {
        let (cin, cout, wide) = (layer.cin(), layer.cout(), layer.wide_channels());
        let mid = expansion * cin;
        let off = (SUPER_KERNEL - kernel) / 2;
        let ew = layer.expand_w.data();
        let dw = layer.dw_super.data();
        let pw = layer.project_w.data();
        Self {
            kernel,
            expansion,
            stride: layer.stride,
            residual: layer.skip_allowed,
            expand_w: Tensor::from_fn(&[cin, mid], |i| ew[(i / mid) * wide + i % mid]),
            expand_scale: Tensor::from_fn(&[mid], |i| layer.expand_scale.data()[i]),
            expand_bias: Tensor::from_fn(&[mid], |i| layer.expand_bias.data()[i]),
            dw: Tensor::from_fn(&[kernel, kernel, mid], |i| {
                let (r, rest) = (i / (kernel * mid), i % (kernel * mid));
                let (c, ch) = (rest / mid, rest % mid);
                dw[((r + off) * SUPER_KERNEL + c + off) * wide + ch]
            }),
            project_w: Tensor::from_fn(&[mid, cout], |i| pw[i]),
        }
    }

    fn params_mut(&mut self) -> [&mut Tensor<T>; 5] {
        [&mut self.expand_w, &mut self.expand_scale, &mut self.expand_bias, &mut self.dw, &mut self.project_w]
    }

    fn params(&self) -> [&Tensor<T>; 5] {
        [&self.expand_w, &self.expand_scale, &self.expand_bias, &self.dw, &self.project_w]
    }
}

/// Retrainable network built from a derived architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactNetwork<T> {
    config: MacroArchConfig,
    pub stem: Stem<T>,
    pub layers: Vec<CompactLayer<T>>,
    pub head: Head<T>,
}

#[derive(Debug, Clone)]
pub struct CompactVars {
    pub stem: [Var; 3],
    pub layers: Vec<Option<[Var; 5]>>,
    pub head: [Var; 2],
}

impl CompactVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = self.stem.to_vec();
        out.extend(self.layers.iter().flatten().flatten());
        out.extend(self.head);
        out
    }
}

/// Slices the supernet's weights into a plain network realising `derived`.
pub fn materialize<T: Scalar>(derived: &DerivedArchitecture, supernet: &Supernet<T>) -> Result<CompactNetwork<T>> {
    derived.validate()?;
    if derived.config != *supernet.config() {
        return Err(Error::InvalidConfig("derived architecture was built for a different config".into()));
    }
    let layers = derived
        .layers
        .iter()
        .zip(&supernet.layers)
        .map(|(choice, layer)| match *choice {
            LayerChoice::Skip => CompactLayer::Identity,
            LayerChoice::MbConv { kernel, expansion } => {
                CompactLayer::MbConv(CompactMbConv::slice_from(layer, kernel, expansion))
            }
        })
        .collect();
    Ok(CompactNetwork {
        config: supernet.config().clone(),
        stem: supernet.stem.clone(),
        layers,
        head: supernet.head.clone(),
    })
}

impl<T: Scalar> CompactNetwork<T> {
    pub fn config(&self) -> &MacroArchConfig {
        &self.config
    }

    pub fn choices(&self) -> Vec<LayerChoice> {
        self.layers
            .iter()
            .map(|l| match l {
                CompactLayer::Identity => LayerChoice::Skip,
                CompactLayer::MbConv(m) => LayerChoice::MbConv { kernel: m.kernel, expansion: m.expansion },
            })
            .collect()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> CompactVars {
        CompactVars {
            stem: self.stem.bind(g),
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    CompactLayer::Identity => None,
                    CompactLayer::MbConv(m) => Some(m.params().map(|t| g.param(t.clone()))),
                })
                .collect(),
            head: self.head.bind(g),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, vars: &CompactVars, x: Var) -> Result<Var> {
        check_input(&self.config, g.value(x).shape())?;
        let mut h = stem_forward(g, x, &vars.stem)?;
        for (layer, lv) in self.layers.iter().zip(&vars.layers) {
            let (CompactLayer::MbConv(m), Some(v)) = (layer, lv) else {
                continue;
            };
            let e = g.pointwise_conv(h, v[0])?;
            let e = g.channel_affine(e, v[1], v[2])?;
            let e = g.relu(e);
            let d = g.depthwise_conv(e, v[3], m.stride)?;
            let d = g.relu(d);
            let p = g.pointwise_conv(d, v[4])?;
            h = if m.residual { g.add(p, h)? } else { p };
        }
        head_forward(g, h, &vars.head)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self.stem.params_mut().into_iter().collect();
        for layer in &mut self.layers {
            if let CompactLayer::MbConv(m) = layer {
                out.extend(m.params_mut());
            }
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        let stem = self.stem.w.len() + self.stem.scale.len() + self.stem.bias.len();
        let layers: usize = self
            .layers
            .iter()
            .map(|l| match l {
                CompactLayer::Identity => 0,
                CompactLayer::MbConv(m) => m.params().iter().map(|t| t.len()).sum(),
            })
            .sum();
        stem + layers + self.head.w.len() + self.head.b.len()
    }
}

#[cfg(test)]
mod tests;
