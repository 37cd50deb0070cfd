//! Synthetic two-class image sets small enough to search on a laptop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Horizontal distance between the two impulses of a wide-field sample.
pub const PAIR_SPAN: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Channel 0 is shifted by `±signal` everywhere; linearly separable from
    /// the per-channel means.
    ChannelMean,
    /// Pairs of `±signal` impulses [`PAIR_SPAN`] columns apart, one pair per
    /// chosen row. Class 1 when the signs within every pair agree. The pooled
    /// response of any feature that sees only one impulse at a time cannot
    /// separate the classes.
    WideField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub train_size: usize,
    pub test_size: usize,
    #[serde(default = "default_signal")]
    pub signal: f64,
    /// Impulse pairs per wide-field image, each on its own row.
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
}

fn default_signal() -> f64 {
    1.0
}

fn default_pairs() -> usize {
    1
}

impl DatasetSpec {
    pub fn channel_mean(height: usize, width: usize, channels: usize) -> Self {
        Self {
            kind: DatasetKind::ChannelMean,
            height,
            width,
            channels,
            train_size: 256,
            test_size: 256,
            signal: 1.0,
            pairs: 1,
            noise: 0.5,
        }
    }

    pub fn wide_field(height: usize, width: usize, channels: usize) -> Self {
        Self {
            kind: DatasetKind::WideField,
            height,
            width,
            channels,
            train_size: 512,
            test_size: 256,
            signal: 2.0,
            pairs: height,
            noise: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::InvalidConfig("dataset dimensions must be positive".into()));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::InvalidConfig("dataset splits must be non-empty".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite() && self.signal.is_finite()) {
            return Err(Error::InvalidConfig("noise must be finite and >= 0".into()));
        }
        if self.kind == DatasetKind::WideField {
            if self.width <= PAIR_SPAN {
                return Err(Error::InvalidConfig(format!("wide_field needs width > {PAIR_SPAN}, got {}", self.width)));
            }
            if self.pairs == 0 || self.pairs > self.height {
                return Err(Error::InvalidConfig(format!("wide_field pairs must be in 1..={}", self.height)));
            }
        }
        Ok(())
    }
}

/// Images `[N, H, W, C]` with labels in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        2
    }

    /// Copies the selected samples into a batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let shape = self.images.shape();
        let per = shape[1..].iter().product::<usize>();
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        let mut batch_shape = shape.to_vec();
        batch_shape[0] = indices.len();
        let images = Tensor::new(batch_shape, data).expect("gathered length matches shape");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Consecutive, unshuffled batches covering every sample once.
    pub fn chunks(&self, batch_size: usize) -> impl Iterator<Item = (Tensor<T>, Vec<usize>)> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        let size = batch_size.max(1);
        (0..self.len().div_ceil(size)).map(move |b| {
            let end = ((b + 1) * size).min(idx.len());
            self.gather(&idx[b * size..end])
        })
    }
}

/// Endless stream of shuffled mini-batches; reshuffles at every epoch.
#[derive(Debug, Clone)]
pub struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > len {
            return Err(Error::InvalidConfig(format!("batch_size {batch_size} must be in 1..={len}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Ok(Self { order, pos: 0, batch_size, rng })
    }

    pub fn next_indices(&mut self) -> &[usize] {
        if self.pos + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let start = self.pos;
        self.pos += self.batch_size;
        &self.order[start..self.pos]
    }

    pub fn next_batch<T: Scalar>(&mut self, data: &Dataset<T>) -> (Tensor<T>, Vec<usize>) {
        let idx = self.next_indices().to_vec();
        data.gather(&idx)
    }
}

/// Generates `(train, test)` splits; identical for identical arguments.
pub fn toy_dataset<T: Scalar>(spec: &DatasetSpec, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = generate(spec, spec.train_size, &mut rng);
    let test = generate(spec, spec.test_size, &mut rng);
    Ok((train, test))
}

fn generate<T: Scalar>(spec: &DatasetSpec, n: usize, rng: &mut ChaCha8Rng) -> Dataset<T> {
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let per = h * w * c;
    let noise = Normal::new(0.0, spec.noise).expect("validated noise");
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..2usize);
        let mut img: Vec<f64> = (0..per).map(|_| noise.sample(rng)).collect();
        match spec.kind {
            DatasetKind::ChannelMean => {
                let shift = if label == 1 { spec.signal } else { -spec.signal };
                for px in img.chunks_mut(c) {
                    px[0] += shift;
                }
            }
            DatasetKind::WideField => {
                // Keep a margin so that edge padding treats both impulses alike.
                let slack = w - 1 - PAIR_SPAN;
                let margin = (slack / 2).min(3);
                let mut rows: Vec<usize> = (0..h).collect();
                rows.shuffle(rng);
                for &row in &rows[..spec.pairs] {
                    let col = rng.random_range(margin..=slack - margin);
                    let first = if rng.random_bool(0.5) { spec.signal } else { -spec.signal };
                    let second = if label == 1 { first } else { -first };
                    img[(row * w + col) * c] += first;
                    img[(row * w + col + PAIR_SPAN) * c] += second;
                }
            }
        }
        data.extend(img.into_iter().map(T::from_f64_lossy));
        labels.push(label);
    }
    Dataset { images: Tensor::new(vec![n, h, w, c], data).expect("generated length matches shape"), labels }
}
