//! Evaluation on frozen encoders: a linear probe, held-out nuclear-norm
//! statistics, and per-query gradient norms of the instance loss.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{AugmentPolicy, ViewSampler};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::losses::{lorac_instance_loss, PriorConfig};
use crate::svd::nuclear_norm;
use crate::tensor::{matmul_at_into, Tensor};
use crate::trainer::cosine_lr;

pub const DEFAULT_V: usize = 32;
pub const HISTOGRAM_BINS: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Fraction of each class used for training; the rest is the test split.
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 2.0,
            train_fraction: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_classes: usize,
    pub iterations: usize,
}

/// Multinomial logistic regression with bias, trained by full-batch gradient
/// descent from zero under a cosine learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    /// `d × C`.
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl LinearClassifier {
    pub fn fit(x: &Tensor, y: &[usize], n_classes: usize, cfg: &ProbeConfig) -> Result<Self> {
        let (n, d) = x.dims2()?;
        if y.len() != n || n == 0 {
            return Err(Error::dim("linear_probe", format!("{} labels for {n} samples", y.len())));
        }
        // Step size scaled by a rotation-invariant curvature proxy.
        let mean_sq = x.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
        let base = cfg.lr / mean_sq.max(1.0);
        let mut w = Tensor::zeros(&[d, n_classes]);
        let mut b = vec![0.0; n_classes];
        let mut resid = Tensor::zeros(&[n, n_classes]);
        for it in 0..cfg.iterations {
            let lr = cosine_lr(it as u64, cfg.iterations as u64, base, 0.0);
            let probs = softmax_rows(&logits(x, &w, &b)?);
            resid.data_mut().copy_from_slice(probs.data());
            for (i, &c) in y.iter().enumerate() {
                resid.row_mut(i)[c] -= 1.0;
            }
            let mut gw = vec![0.0; d * n_classes];
            matmul_at_into(x.data(), resid.data(), &mut gw, n, d, n_classes);
            let scale = lr / n as f64;
            for (wv, g) in w.data_mut().iter_mut().zip(&gw) {
                *wv -= scale * g;
            }
            for c in 0..n_classes {
                let g: f64 = (0..n).map(|i| resid.at(i, c)).sum();
                b[c] -= scale * g;
            }
        }
        Ok(Self { weight: w, bias: b })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let l = logits(x, &self.weight, &self.bias)?;
        Ok((0..l.rows())
            .map(|i| {
                l.row(i)
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Tensor, y: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        Ok(pred.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len().max(1) as f64)
    }
}

fn logits(x: &Tensor, w: &Tensor, b: &[f64]) -> Result<Tensor> {
    let mut l = x.matmul(w)?;
    for i in 0..l.rows() {
        l.row_mut(i).iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
    }
    Ok(l)
}

fn softmax_rows(l: &Tensor) -> Tensor {
    let mut p = l.clone();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    p
}

/// Per-class split: the first `⌊train_fraction · count⌋` samples of each
/// class train, the rest test.
pub fn stratified_split(labels: &[usize], train_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in classes {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let cut = (idx.len() as f64 * train_fraction).floor() as usize;
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Splits `features` per class, fits on the train part and reports test
/// accuracy.
pub fn linear_probe(features: &Tensor, labels: &[usize], cfg: &ProbeConfig) -> Result<ProbeResult> {
    let (train, test) = stratified_split(labels, cfg.train_fraction);
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    linear_probe_split(
        &features.select_rows(&train)?,
        &pick(&train),
        &features.select_rows(&test)?,
        &pick(&test),
        cfg,
    )
}

pub fn linear_probe_split(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let distinct: BTreeSet<usize> = train_y.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Contract(format!(
            "probe needs at least 2 classes in the train split, found {}",
            distinct.len()
        )));
    }
    if test_y.is_empty() {
        return Err(Error::Contract("probe test split is empty".into()));
    }
    if train_x.cols() != test_x.cols() {
        return Err(Error::dim("linear_probe", "train and test feature widths differ"));
    }
    let n_classes = train_y.iter().chain(test_y).max().map_or(0, |m| m + 1);
    let clf = LinearClassifier::fit(train_x, train_y, n_classes, cfg)?;
    Ok(ProbeResult {
        accuracy: clf.accuracy(test_x, test_y)?,
        train_accuracy: clf.accuracy(train_x, train_y)?,
        n_train: train_y.len(),
        n_test: test_y.len(),
        n_classes,
        iterations: cfg.iterations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Uniform bins over `[lo, hi]`; values outside are clamped to the edge bins.
    pub fn build(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0u64; bins];
        let width = (hi - lo) / bins as f64;
        for &v in values {
            let b = if width > 0.0 { ((v - lo) / width).floor() } else { 0.0 };
            counts[(b.max(0.0) as usize).min(bins - 1)] += 1;
        }
        Self { lo, hi, counts }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QHatStats {
    pub per_instance_norms: Vec<f64>,
    pub v: usize,
    pub histogram: Histogram,
    pub mean: f64,
    pub std: f64,
}

#[derive(Serialize)]
struct QHatSummary<'a> {
    v: usize,
    n: usize,
    mean: f64,
    std: f64,
    min: f64,
    max: f64,
    histogram: &'a Histogram,
}

impl QHatStats {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("instance_id,nuc_norm\n");
        for (i, v) in self.per_instance_norms.iter().enumerate() {
            s.push_str(&format!("{i},{v}\n"));
        }
        s
    }

    pub fn summary_json(&self) -> String {
        let n = &self.per_instance_norms;
        let summary = QHatSummary {
            v: self.v,
            n: n.len(),
            mean: self.mean,
            std: self.std,
            min: n.iter().cloned().fold(f64::INFINITY, f64::min),
            max: n.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            histogram: &self.histogram,
        };
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    }
}

/// `‖Q̂ᵢ‖*` for each row of `samples`, where `Q̂ᵢ` stacks the query-encoder
/// embeddings of `V` fresh augmentations.
pub fn qhat_stats(
    encoder: &EncoderParams,
    samples: &Tensor,
    v: usize,
    policy: &AugmentPolicy,
    seed: u64,
) -> Result<QHatStats> {
    if v < 2 {
        return Err(Error::config("V", format!("need at least 2 augmentations, got {v}")));
    }
    let sampler = ViewSampler::new(seed, *policy)?;
    let mut norms = Vec::with_capacity(samples.rows());
    for i in 0..samples.rows() {
        let rows: Vec<Vec<f64>> = (0..v as u64)
            .map(|j| sampler.query_view(samples.row(i), 0, i as u64, j))
            .collect();
        let q = encoder.embed(&Tensor::from_rows(&rows)?)?;
        norms.push(nuclear_norm(&q)?);
    }
    let n = norms.len().max(1) as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let std = (norms.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(QHatStats {
        histogram: Histogram::build(&norms, (v as f64).sqrt(), v as f64, HISTOGRAM_BINS),
        per_instance_norms: norms,
        v,
        mean,
        std,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StationarityReport {
    /// `∂Lᵢ/∂q_m`, one row per query.
    pub grads: Tensor,
    pub norms: Vec<f64>,
}

/// Gradient of the instance loss with respect to each query row.
pub fn grad_stationarity_report(
    queries: &Tensor,
    k_pos: &Tensor,
    negs: &Tensor,
    cfg: &PriorConfig,
) -> Result<StationarityReport> {
    let tape = Tape::new();
    let q = tape.leaf(queries.clone());
    let out = lorac_instance_loss(&q, k_pos, negs, cfg)?;
    let grads = tape.backward(&out.loss)?.wrt(&q);
    Ok(StationarityReport {
        norms: grads.row_norms(),
        grads,
    })
}
