//! Synthetic datasets, labeled-subset sampling, augmentation and batching.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Features with optional labels and the mask of rows whose labels may be
/// used for supervision. Grid data is stored flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Option<Vec<usize>>,
    labeled_mask: Vec<bool>,
    num_classes: usize,
    split: Split,
    grid: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(
        features: Tensor,
        labels: Option<Vec<usize>>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if features.rank() != 2 {
            return Err(Error::invalid(format!(
                "features must be N×D, got {:?}",
                features.shape()
            )));
        }
        let n = features.rows();
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "dataset labels",
                    lhs: features.shape().to_vec(),
                    rhs: vec![l.len()],
                });
            }
            if let Some(&bad) = l.iter().find(|&&y| y >= num_classes) {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    num_classes,
                });
            }
        }
        let labeled_mask = vec![labels.is_some(); n];
        Ok(Dataset {
            features,
            labels,
            labeled_mask,
            num_classes,
            split,
            grid: None,
        })
    }

    /// Rows with `None` are unlabeled; their label slots hold class 0 and
    /// are excluded by `labeled_mask`.
    pub fn partially_labeled(
        features: Tensor,
        labels: &[Option<usize>],
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if labels.iter().all(Option::is_none) {
            return Self::new(features, None, num_classes, split);
        }
        let filled = labels.iter().map(|l| l.unwrap_or(0)).collect();
        let mut d = Self::new(features, Some(filled), num_classes, split)?;
        d.labeled_mask = labels.iter().map(Option::is_some).collect();
        Ok(d)
    }

    pub fn with_grid(mut self, h: usize, w: usize) -> Result<Self> {
        if h * w != self.dim() {
            return Err(Error::invalid(format!(
                "grid {h}×{w} does not match feature dimension {}",
                self.dim()
            )));
        }
        self.grid = Some((h, w));
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// Label slots for every row; only rows under `labeled_mask` carry a
    /// supervised label.
    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn labeled_mask(&self) -> &[bool] {
        &self.labeled_mask
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labeled_mask[i]).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn grid(&self) -> Option<(usize, usize)> {
        self.grid
    }

    pub fn with_features(&self, features: Tensor) -> Result<Self> {
        if features.rows() != self.len() || features.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "replace features",
                lhs: self.features.shape().to_vec(),
                rhs: features.shape().to_vec(),
            });
        }
        let mut d = self.clone();
        if d.grid.is_some() && features.shape()[1] != self.dim() {
            d.grid = None;
        }
        d.features = features;
        Ok(d)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Drops the labels (the unlabeled view used by consistency costs).
    pub fn without_labels(&self) -> Self {
        let mut d = self.clone();
        d.labels = None;
        d.labeled_mask = vec![false; d.len()];
        d
    }

    pub fn class_counts(&self, indices: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        if let Some(l) = &self.labels {
            for &i in indices {
                c[l[i]] += 1;
            }
        }
        c
    }
}

fn check_size(n: usize, k: usize) -> Result<()> {
    if n < 2 * k {
        return Err(Error::invalid(format!(
            "need at least {} samples for {k} classes, got {n}",
            2 * k
        )));
    }
    Ok(())
}

fn check_noise(noise: f64) -> Result<()> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::invalid(format!("noise sigma must be >= 0, got {noise}")));
    }
    Ok(())
}

fn gaussian(r: &mut SeededRng) -> f64 {
    r.sample(rand_distr::StandardNormal)
}

/// Two interleaving unit half-circles; class 0 is the upper moon.
pub fn gen_two_moons(n: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    check_size(n, 2)?;
    check_noise(noise_sigma)?;
    let mut r = rng::rng(seed);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let t = r.random_range(0.0..std::f64::consts::PI);
        let (x0, x1) = if y == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        data.push(x0 + noise_sigma * gaussian(&mut r));
        data.push(x1 + noise_sigma * gaussian(&mut r));
        labels.push(y);
    }
    Dataset::new(Tensor::new(vec![n, 2], data)?, Some(labels), 2, Split::Train)
}

/// Concentric circles of radius 1 (class 0) and 0.5 (class 1).
pub fn gen_circles(n: usize, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    check_size(n, 2)?;
    check_noise(noise_sigma)?;
    let mut r = rng::rng(seed);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let radius = if y == 0 { 1.0 } else { 0.5 };
        let t = r.random_range(0.0..std::f64::consts::TAU);
        data.push(radius * t.cos() + noise_sigma * gaussian(&mut r));
        data.push(radius * t.sin() + noise_sigma * gaussian(&mut r));
        labels.push(y);
    }
    Dataset::new(Tensor::new(vec![n, 2], data)?, Some(labels), 2, Split::Train)
}

/// Largest number of classes [`gen_grid_patterns`] can draw.
pub const MAX_GLYPHS: usize = 8;

/// Binary template for glyph `k` on a `size × size` canvas.
pub fn glyph(k: usize, size: usize) -> Vec<bool> {
    let c = size as isize / 2;
    let lo = 1isize;
    let hi = size as isize - 2;
    let inside = |v: isize| v >= lo && v <= hi;
    let mut img = vec![false; size * size];
    for i in 0..size as isize {
        for j in 0..size as isize {
            let on = match k {
                0 => (i == c || i == c - 1) && inside(j),
                1 => (j == c || j == c - 1) && inside(i),
                2 => i == j && inside(i),
                3 => i + j == size as isize - 1 && inside(i),
                4 => (i == lo || i == hi || j == lo || j == hi) && inside(i) && inside(j),
                5 => ((i == c || i == c - 1) && inside(j)) || ((j == c || j == c - 1) && inside(i)),
                6 => (c - 2..=c + 1).contains(&i) && (c - 2..=c + 1).contains(&j),
                _ => (i == j || i + j == size as isize - 1) && inside(i),
            };
            img[i as usize * size + j as usize] = on;
        }
    }
    img
}

/// Bilinear sample of `img` at `(y, x)`, replicating edge pixels.
fn bilinear(img: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |i: usize, j: usize| img[i * w + j];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// `size × size` images in [0, 1]: a class glyph translated by a continuous
/// offset in [-1, 1]² (bilinear, edges replicated), drawn with a random
/// foreground intensity in [0.6, 0.9] over a 0.1 background, plus Gaussian
/// pixel noise clamped to the unit interval.
pub fn gen_grid_patterns(
    n: usize,
    size: usize,
    num_classes: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(2..=MAX_GLYPHS).contains(&num_classes) {
        return Err(Error::invalid(format!(
            "grid patterns support 2..={MAX_GLYPHS} classes, got {num_classes}"
        )));
    }
    if size < 6 {
        return Err(Error::invalid(format!("grid size must be >= 6, got {size}")));
    }
    check_size(n, num_classes)?;
    check_noise(noise_sigma)?;
    let templates: Vec<Vec<bool>> = (0..num_classes).map(|k| glyph(k, size)).collect();
    let mut r = rng::rng(seed);
    let d = size * size;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % num_classes;
        let dy: f64 = r.random_range(-1.0..=1.0);
        let dx: f64 = r.random_range(-1.0..=1.0);
        let fg: f64 = r.random_range(0.6..=0.9);
        let base: Vec<f64> = templates[y]
            .iter()
            .map(|&on| if on { fg } else { 0.1 })
            .collect();
        for pi in 0..size {
            for pj in 0..size {
                let v = bilinear(&base, size, size, pi as f64 - dy, pj as f64 - dx);
                data.push((v + noise_sigma * gaussian(&mut r)).clamp(0.0, 1.0));
            }
        }
        labels.push(y);
    }
    Dataset::new(Tensor::new(vec![n, d], data)?, Some(labels), num_classes, Split::Train)?
        .with_grid(size, size)
}

/// Per-dimension affine standardization fitted on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor) -> Self {
        let (n, d) = (x.rows(), x.row_len());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.row_len() != self.mean.len() {
            return Err(Error::ShapeMismatch {
                op: "standardize",
                lhs: x.shape().to_vec(),
                rhs: vec![self.mean.len()],
            });
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for ((v, m), s) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

/// Embeds point data in `dim` dimensions with a fixed seeded linear map.
pub fn lift_features(x: &Tensor, dim: usize, seed: u64) -> Result<Tensor> {
    let d = x.row_len();
    if dim < d {
        return Err(Error::invalid(format!("cannot lift {d}-D data to {dim} dimensions")));
    }
    let w = rng::normal_tensor(vec![d, dim], &mut rng::rng(seed)).scale(1.0 / (d as f64).sqrt());
    x.matmul(&w)
}

/// Class-balanced random labeled subset; all rows stay as the unlabeled pool.
pub fn subsample_labels(dataset: &Dataset, n_labeled: usize, seed: u64) -> Result<Dataset> {
    let labels = dataset.labels().ok_or(Error::Unlabeled)?;
    let n = dataset.len();
    if n_labeled > n {
        return Err(Error::invalid(format!(
            "cannot label {n_labeled} of {n} samples"
        )));
    }
    let k = dataset.num_classes();
    let mut r = rng::rng(seed);
    let mut mask = vec![false; n];
    for class in 0..k {
        let quota = n_labeled / k + usize::from(class < n_labeled % k);
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        if members.len() < quota {
            return Err(Error::invalid(format!(
                "class {class} has {} samples, {quota} labels requested",
                members.len()
            )));
        }
        let order = rng::permutation(members.len(), &mut r);
        for &j in &order[..quota] {
            mask[members[j]] = true;
        }
    }
    let mut d = dataset.clone();
    d.labeled_mask = mask;
    Ok(d)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Maximum absolute integer shift per axis; 0 disables translation.
    #[serde(default)]
    pub translate: usize,
    /// Horizontal flip with probability 1/2.
    #[serde(default)]
    pub flip: bool,
}

impl AugmentConfig {
    pub fn is_noop(&self) -> bool {
        self.translate == 0 && !self.flip
    }
}

/// Shifts an image by `(dy, dx)`, replicating edge pixels.
pub fn translate_image(img: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> Vec<f64> {
    let clampi = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h as isize {
        for j in 0..w as isize {
            out.push(img[clampi(i - dy, h) * w + clampi(j - dx, w)]);
        }
    }
    out
}

pub fn flip_horizontal(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        out.extend(img[i * w..(i + 1) * w].iter().rev());
    }
    out
}

/// Independent random translation and optional flip per sample.
pub fn augment(
    batch: &Tensor,
    grid: Option<(usize, usize)>,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<Tensor> {
    if cfg.is_noop() {
        return Ok(batch.clone());
    }
    let (h, w) = grid.ok_or_else(|| Error::invalid("translation and flips need grid-shaped data"))?;
    if batch.row_len() != h * w {
        return Err(Error::ShapeMismatch {
            op: "augment",
            lhs: batch.shape().to_vec(),
            rhs: vec![h, w],
        });
    }
    let t = cfg.translate as isize;
    let mut r = rng::rng(seed);
    let mut out = batch.clone();
    for i in 0..out.rows() {
        let dy = r.random_range(-(t as i64)..=t as i64) as isize;
        let dx = r.random_range(-(t as i64)..=t as i64) as isize;
        let mut img = translate_image(batch.row(i), h, w, dy, dx);
        if cfg.flip && r.random_bool(0.5) {
            img = flip_horizontal(&img, h, w);
        }
        out.row_mut(i).copy_from_slice(&img);
    }
    Ok(out)
}

/// One epoch of shuffled index batches; the final batch may be short.
pub fn batches(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    labeled_only: bool,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    let pool = pool(dataset, labeled_only);
    let order = rng::permutation(pool.len(), &mut rng::rng(seed));
    Ok(order
        .chunks(batch_size)
        .map(|c| c.iter().map(|&j| pool[j]).collect())
        .collect())
}

fn pool(dataset: &Dataset, labeled_only: bool) -> Vec<usize> {
    if labeled_only {
        dataset.labeled_indices()
    } else {
        (0..dataset.len()).collect()
    }
}

/// Endless stream of full batches drawn from successive reshuffled epochs.
#[derive(Clone, Debug)]
pub struct BatchStream {
    pool: Vec<usize>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    queue: Vec<usize>,
}

impl BatchStream {
    pub fn new(dataset: &Dataset, batch_size: usize, seed: u64, labeled_only: bool) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        let pool = pool(dataset, labeled_only);
        if pool.is_empty() {
            return Err(Error::invalid("batch stream over an empty pool"));
        }
        Ok(BatchStream {
            pool,
            batch_size,
            seed,
            epoch: 0,
            queue: Vec::new(),
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch_size);
        while out.len() < self.batch_size {
            if self.queue.is_empty() {
                let order = rng::permutation(
                    self.pool.len(),
                    &mut rng::rng(rng::derive_index(self.seed, self.epoch)),
                );
                self.epoch += 1;
                self.queue = order.into_iter().rev().map(|j| self.pool[j]).collect();
            }
            out.push(self.queue.pop().expect("refilled above"));
        }
        out
    }
}

impl Iterator for BatchStream {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}
