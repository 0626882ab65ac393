//! Synthetic datasets, the `LDSET` file format, and deterministic view
//! augmentation.
//!
//! Every random draw comes from a ChaCha stream keyed by the run seed and
//! selected by a counter tuple (purpose, epoch, instance, view), so any view
//! can be regenerated on its own, in any order, on any thread.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LDSET_MAGIC: &[u8; 5] = b"LDSET";
pub const LDSET_VERSION: u32 = 1;

/// Minimum pairwise angle between synthetic class means.
pub const MIN_MEAN_ANGLE: f64 = std::f64::consts::FRAC_PI_4;
const MEAN_RETRIES: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
enum Purpose {
    Means = 1,
    Samples = 2,
    QueryView = 3,
    KeyView = 4,
    Shuffle = 5,
    QueueFill = 6,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent ChaCha stream for `(seed, purpose, a, b, c)`.
fn stream(seed: u64, purpose: Purpose, a: u64, b: u64, c: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = [purpose as u64, a, b, c]
        .into_iter()
        .fold(0u64, |h, x| splitmix(h ^ splitmix(x)));
    rng.set_stream(id);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub per_class: usize,
    pub d_in: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            per_class: 200,
            d_in: 32,
            spread: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config("data.n_classes", "need at least 2 classes"));
        }
        if self.per_class < 1 {
            return Err(Error::config("data.per_class", "need at least 1 sample per class"));
        }
        if self.d_in == 0 {
            return Err(Error::config("data.d_in", "must be positive"));
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return Err(Error::config("data.spread", "must be positive"));
        }
        Ok(())
    }
}

/// Where a dataset came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DatasetMeta {
    Synthetic { spec: SyntheticSpec, draw: u64 },
    File { path: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Tensor,
    labels: Vec<u32>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(samples: Tensor, labels: Vec<u32>, meta: DatasetMeta) -> Result<Self> {
        let (n, _) = samples.dims2()?;
        if labels.len() != n {
            return Err(Error::dim("dataset", format!("{} labels for {n} samples", labels.len())));
        }
        Ok(Self { samples, labels, meta })
    }

    /// The unlabeled view used by pre-training.
    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    /// Class ids, for evaluation only.
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.samples.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m as usize + 1)
    }

    /// Per-class split: the first `⌊count·train_fraction⌋` samples of each
    /// class (in file order) train, the rest test.
    pub fn split(&self, train_fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::config("split", "train fraction must lie in [0, 1]"));
        }
        let labels: Vec<usize> = self.labels.iter().map(|&l| l as usize).collect();
        let (train_idx, test_idx) = crate::eval::stratified_split(&labels, train_fraction);
        Ok((self.subset(&train_idx)?, self.subset(&test_idx)?))
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.samples.select_rows(idx)?,
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.meta.clone(),
        )
    }

    /// Writes the little-endian `LDSET` format (samples narrowed to `f32`).
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let (n, d) = self.samples.dims2()?;
        w.write_all(LDSET_MAGIC)?;
        w.write_all(&LDSET_VERSION.to_le_bytes())?;
        w.write_all(&(n as u64).to_le_bytes())?;
        w.write_all(&(d as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(n * d * 4 + n * 4);
        for &x in self.samples.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        for &l in &self.labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read, path: &str) -> Result<Dataset> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != LDSET_MAGIC {
            return Err(Error::Format(format!("{path}: bad dataset magic")));
        }
        let version = read_u32(&mut r)?;
        if version != LDSET_VERSION {
            return Err(Error::Format(format!("{path}: unsupported dataset version {version}")));
        }
        let n = read_u64(&mut r)? as usize;
        let d = read_u64(&mut r)? as usize;
        let count = n
            .checked_mul(d)
            .filter(|&c| c <= 1 << 30 && n <= 1 << 30)
            .ok_or_else(|| Error::Format(format!("{path}: implausible size {n}×{d}")))?;
        let mut raw = vec![0u8; count * 4];
        r.read_exact(&mut raw)?;
        let samples: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
            .collect();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let labels = raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        Dataset::new(
            Tensor::matrix(n, d, samples)?,
            labels,
            DatasetMeta::File { path: path.to_string() },
        )
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Dataset> {
        let f = std::fs::File::open(path)?;
        Dataset::read_from(std::io::BufReader::new(f), &path.display().to_string())
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit class means with pairwise angle at least [`MIN_MEAN_ANGLE`].
pub fn class_means(spec: &SyntheticSpec) -> Result<Tensor> {
    spec.validate()?;
    let mut rng = stream(spec.seed, Purpose::Means, 0, 0, 0);
    let max_cos = MIN_MEAN_ANGLE.cos();
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(spec.n_classes);
    for c in 0..spec.n_classes {
        let mut accepted = false;
        for _ in 0..MEAN_RETRIES {
            let cand = unit_gaussian(&mut rng, spec.d_in);
            let ok = means
                .iter()
                .all(|m| m.iter().zip(&cand).map(|(a, b)| a * b).sum::<f64>() <= max_cos);
            if ok {
                means.push(cand);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::Generation(format!(
                "could not place class mean {c} of {} in {} dimensions with angle ≥ {:.3} rad",
                spec.n_classes, spec.d_in, MIN_MEAN_ANGLE
            )));
        }
    }
    Tensor::from_rows(&means)
}

/// Draw 0 of [`gen_synthetic_draw`].
pub fn gen_synthetic(n_classes: usize, per_class: usize, d_in: usize, spread: f64, seed: u64) -> Result<Dataset> {
    gen_synthetic_draw(
        &SyntheticSpec {
            n_classes,
            per_class,
            d_in,
            spread,
            seed,
        },
        0,
    )
}

/// Samples `mean + N(0, spread²)` around fixed class means; different `draw`
/// values give independent samples from the same classes. Sample `i` has
/// class `i mod n_classes`.
pub fn gen_synthetic_draw(spec: &SyntheticSpec, draw: u64) -> Result<Dataset> {
    let means = class_means(spec)?;
    let n = spec.n_classes * spec.per_class;
    let mut rng = stream(spec.seed, Purpose::Samples, draw, 0, 0);
    let mut data = Vec::with_capacity(n * spec.d_in);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.n_classes;
        for &m in means.row(c) {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(m + spec.spread * z);
        }
        labels.push(c as u32);
    }
    Dataset::new(
        Tensor::matrix(n, spec.d_in, data)?,
        labels,
        DatasetMeta::Synthetic { spec: spec.clone(), draw },
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub noise_sigma: f64,
    pub mask_frac: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            noise_sigma: 0.1,
            mask_frac: 0.2,
            scale_lo: 0.8,
            scale_hi: 1.2,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            mask_frac: 0.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("augment.noise_sigma", "must be ≥ 0"));
        }
        if !(0.0..=1.0).contains(&self.mask_frac) {
            return Err(Error::config("augment.mask_frac", "must lie in [0, 1]"));
        }
        if !(self.scale_lo <= self.scale_hi) || !self.scale_lo.is_finite() || !self.scale_hi.is_finite() {
            return Err(Error::config("augment.scale", "need finite scale_lo ≤ scale_hi"));
        }
        Ok(())
    }
}

/// Scale jitter, then additive Gaussian noise, then coordinate masking.
pub fn augment(x: &[f64], p: &AugmentPolicy, rng: &mut impl Rng) -> Vec<f64> {
    let scale = if p.scale_lo < p.scale_hi {
        rng.random_range(p.scale_lo..p.scale_hi)
    } else {
        p.scale_lo
    };
    x.iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            let mut out = v * scale + p.noise_sigma * z;
            if rng.random::<f64>() < p.mask_frac {
                out = 0.0;
            }
            out
        })
        .collect()
}

/// Produces the `M − 1` query views and the key view of one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSampler {
    pub seed: u64,
    pub policy: AugmentPolicy,
}

/// Raw (pre-encoder) views of one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct RawViews {
    /// `(M−1)×d_in`
    pub queries: Tensor,
    pub key: Vec<f64>,
}

impl ViewSampler {
    pub fn new(seed: u64, policy: AugmentPolicy) -> Result<Self> {
        policy.validate()?;
        Ok(Self { seed, policy })
    }

    /// Query view `view` of `instance` in `epoch`. Does not depend on `M`.
    pub fn query_view(&self, x: &[f64], epoch: u64, instance: u64, view: u64) -> Vec<f64> {
        let mut rng = stream(self.seed, Purpose::QueryView, epoch, instance, view);
        augment(x, &self.policy, &mut rng)
    }

    pub fn key_view(&self, x: &[f64], epoch: u64, instance: u64) -> Vec<f64> {
        let mut rng = stream(self.seed, Purpose::KeyView, epoch, instance, 0);
        augment(x, &self.policy, &mut rng)
    }

    /// Augmentation `index` used to pre-fill the negative queue.
    pub fn fill_view(&self, x: &[f64], index: u64) -> Vec<f64> {
        let mut rng = stream(self.seed, Purpose::QueueFill, index, 0, 0);
        augment(x, &self.policy, &mut rng)
    }

    pub fn make_views(&self, x: &[f64], m: usize, epoch: u64, instance: u64) -> Result<RawViews> {
        if m < 2 {
            return Err(Error::config("M", format!("need at least 2 views, got {m}")));
        }
        let rows: Vec<Vec<f64>> = (0..m as u64 - 1)
            .map(|v| self.query_view(x, epoch, instance, v))
            .collect();
        Ok(RawViews {
            queries: Tensor::from_rows(&rows)?,
            key: self.key_view(x, epoch, instance),
        })
    }
}

/// Deterministic permutation of `0..n` for `epoch`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, Purpose::Shuffle, epoch, 0, 0);
    idx.shuffle(&mut rng);
    idx
}
