use crate::error::{Error, Result};
use crate::space::Supernet;
use crate::superkernel::DecisionTriple;
use crate::tensor::Tensor;

/// Feature map in NHWC order.
#[derive(Debug, Clone)]
struct Map {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    v: Vec<f64>,
}

impl Map {
    fn at(&self, n: usize, y: isize, x: isize, c: usize) -> f64 {
        if y < 0 || x < 0 || y as usize >= self.h || x as usize >= self.w {
            return 0.0;
        }
        self.v[((n * self.h + y as usize) * self.w + x as usize) * self.c + c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceLayer {
    Identity,
    MbConv {
        kernel: usize,
        stride: usize,
        residual: bool,
        cin: usize,
        mid: usize,
        cout: usize,
        /// `[cin][mid]`
        expand_w: Vec<f64>,
        scale: Vec<f64>,
        bias: Vec<f64>,
        /// `[kernel][kernel][mid]`
        dw: Vec<f64>,
        /// `[mid][cout]`
        project_w: Vec<f64>,
    },
}

/// A fixed network assembled from explicit copies of the selected weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceNetwork {
    height: usize,
    width: usize,
    in_channels: usize,
    stem_channels: usize,
    stem_w: Vec<f64>,
    stem_scale: Vec<f64>,
    stem_bias: Vec<f64>,
    pub layers: Vec<ReferenceLayer>,
    classes: usize,
    head_w: Vec<f64>,
    head_b: Vec<f64>,
}

/// Copies the weight subset that each decision selects: the inner 3×3 of
/// the depthwise kernel unless `use_k5`, the first half of the expanded
/// channels unless `use_e6`, and nothing for a skipped layer.
pub fn build_sliced_reference(arch: &[DecisionTriple], supernet: &Supernet<f64>) -> Result<ReferenceNetwork> {
    if arch.len() != supernet.layers.len() {
        return Err(Error::LayerCountMismatch { expected: supernet.layers.len(), found: arch.len() });
    }
    let mut layers = Vec::with_capacity(arch.len());
    for (i, (d, layer)) in arch.iter().zip(&supernet.layers).enumerate() {
        if !d.use_e3_or_more {
            if !layer.skip_allowed {
                return Err(Error::InvalidArgument(format!("layer {i} cannot be skipped")));
            }
            layers.push(ReferenceLayer::Identity);
            continue;
        }
        let (cin, cout) = (layer.cin(), layer.cout());
        let wide = 6 * cin;
        let mid = if d.use_e6 { wide } else { 3 * cin };
        let kernel = if d.use_k5 { 5 } else { 3 };
        let off = (5 - kernel) / 2;
        let mut expand_w = Vec::with_capacity(cin * mid);
        for ci in 0..cin {
            for m in 0..mid {
                expand_w.push(layer.expand_w.data()[ci * wide + m]);
            }
        }
        let mut dw = Vec::with_capacity(kernel * kernel * mid);
        for r in 0..kernel {
            for c in 0..kernel {
                for m in 0..mid {
                    dw.push(layer.dw_super.data()[((r + off) * 5 + c + off) * wide + m]);
                }
            }
        }
        let mut project_w = Vec::with_capacity(mid * cout);
        for m in 0..mid {
            for co in 0..cout {
                project_w.push(layer.project_w.data()[m * cout + co]);
            }
        }
        layers.push(ReferenceLayer::MbConv {
            kernel,
            stride: layer.stride,
            residual: layer.skip_allowed,
            cin,
            mid,
            cout,
            expand_w,
            scale: layer.expand_scale.data()[..mid].to_vec(),
            bias: layer.expand_bias.data()[..mid].to_vec(),
            dw,
            project_w,
        });
    }
    let config = supernet.config();
    Ok(ReferenceNetwork {
        height: config.input_height,
        width: config.input_width,
        in_channels: config.input_channels,
        stem_channels: config.stem_channels,
        stem_w: supernet.stem.w.data().to_vec(),
        stem_scale: supernet.stem.scale.data().to_vec(),
        stem_bias: supernet.stem.bias.data().to_vec(),
        layers,
        classes: config.num_classes,
        head_w: supernet.head.w.data().to_vec(),
        head_b: supernet.head.b.data().to_vec(),
    })
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

impl ReferenceNetwork {
    /// Logits `[N, classes]` for images `[N, H, W, C]`.
    pub fn forward(&self, images: &Tensor<f64>) -> Result<Tensor<f64>> {
        let s = images.shape();
        if s.len() != 4 || s[1..] != [self.height, self.width, self.in_channels] {
            return Err(Error::ShapeMismatch { op: "reference forward", detail: format!("input {s:?}") });
        }
        let x = Map { n: s[0], h: s[1], w: s[2], c: s[3], v: images.data().to_vec() };

        // Stem: 3×3 conv with one pixel of zero padding, affine, ReLU.
        let sc = self.stem_channels;
        let mut h = Map { n: x.n, h: x.h, w: x.w, c: sc, v: vec![0.0; x.n * x.h * x.w * sc] };
        for n in 0..x.n {
            for y in 0..x.h {
                for xx in 0..x.w {
                    for co in 0..sc {
                        let mut acc = 0.0;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                for ci in 0..x.c {
                                    let w = self.stem_w[((ky * 3 + kx) * x.c + ci) * sc + co];
                                    acc += w * x.at(n, y as isize + ky as isize - 1, xx as isize + kx as isize - 1, ci);
                                }
                            }
                        }
                        let idx = ((n * x.h + y) * x.w + xx) * sc + co;
                        h.v[idx] = relu(acc * self.stem_scale[co] + self.stem_bias[co]);
                    }
                }
            }
        }

        for layer in &self.layers {
            if let ReferenceLayer::MbConv { .. } = layer {
                h = self.mbconv(layer, &h);
            }
        }

        // Head: spatial mean, then dense.
        let mut logits = vec![0.0; h.n * self.classes];
        let area = (h.h * h.w) as f64;
        for n in 0..h.n {
            let mut pooled = vec![0.0; h.c];
            for y in 0..h.h {
                for xx in 0..h.w {
                    for c in 0..h.c {
                        pooled[c] += h.v[((n * h.h + y) * h.w + xx) * h.c + c];
                    }
                }
            }
            for k in 0..self.classes {
                let mut acc = self.head_b[k];
                for c in 0..h.c {
                    acc += pooled[c] / area * self.head_w[c * self.classes + k];
                }
                logits[n * self.classes + k] = acc;
            }
        }
        Tensor::new(vec![h.n, self.classes], logits)
    }

    fn mbconv(&self, layer: &ReferenceLayer, x: &Map) -> Map {
        let ReferenceLayer::MbConv { kernel, stride, residual, cin, mid, cout, expand_w, scale, bias, dw, project_w } =
            layer
        else {
            return x.clone();
        };
        let (k, st, cin, mid, cout) = (*kernel, *stride, *cin, *mid, *cout);
        let mut e = Map { n: x.n, h: x.h, w: x.w, c: mid, v: vec![0.0; x.n * x.h * x.w * mid] };
        for p in 0..x.n * x.h * x.w {
            for m in 0..mid {
                let mut acc = 0.0;
                for ci in 0..cin {
                    acc += x.v[p * cin + ci] * expand_w[ci * mid + m];
                }
                e.v[p * mid + m] = relu(acc * scale[m] + bias[m]);
            }
        }
        let pad = (k as isize - 1) / 2;
        let (oh, ow) = ((x.h - 1) / st + 1, (x.w - 1) / st + 1);
        let mut d = Map { n: x.n, h: oh, w: ow, c: mid, v: vec![0.0; x.n * oh * ow * mid] };
        for n in 0..x.n {
            for y in 0..oh {
                for xx in 0..ow {
                    for m in 0..mid {
                        let mut acc = 0.0;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * st) as isize + ky as isize - pad;
                                let ix = (xx * st) as isize + kx as isize - pad;
                                acc += dw[(ky * k + kx) * mid + m] * e.at(n, iy, ix, m);
                            }
                        }
                        d.v[((n * oh + y) * ow + xx) * mid + m] = relu(acc);
                    }
                }
            }
        }
        let mut out = Map { n: x.n, h: oh, w: ow, c: cout, v: vec![0.0; x.n * oh * ow * cout] };
        for p in 0..x.n * oh * ow {
            for co in 0..cout {
                let mut acc = 0.0;
                for m in 0..mid {
                    acc += d.v[p * mid + m] * project_w[m * cout + co];
                }
                out.v[p * cout + co] = if *residual { acc + x.v[p * cin + co] } else { acc };
            }
        }
        out
    }
}
