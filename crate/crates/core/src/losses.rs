//! Contrastive losses with a low-rank prior over multi-view feature matrices.
//!
//! For one instance with queries `q₁ … q_{M−1}`, positive key `k⁺` and
//! negatives `k⁻₁ … k⁻_K`, the prior `h(Q) = exp(−r)` multiplies the
//! positive-pair likelihood ratio. Every loss here is evaluated in the
//! shifted-logits form
//!
//! ```text
//! logits_m = [ (qₘ·k⁺ − τ·r) / τ,  qₘ·k⁻₁ / τ, …, qₘ·k⁻_K / τ ]
//! L        = mean_m  cross_entropy(logits_m, class 0)
//! ```
//!
//! which is algebraically the ratio form and never overflows.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_TAU: f64 = 0.2;
pub const DEFAULT_SIGMA2: f64 = 2.0;
pub const DEFAULT_MARGIN: f64 = 3.0;

pub fn default_c_o() -> f64 {
    5f64.sqrt()
}

/// Which hypothesis `h(·)` is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// `r = ‖Q‖* / (M β τ)`
    Laplace,
    /// `r = (‖Q‖* − c_o)² / (σ² M τ)`
    Gaussian,
    /// `r = (‖Q‖* − c_o)² / (M β τ)`
    ShiftedGaussian,
    /// `r = c / (M β τ)`; the nuclear norm is replaced by a constant.
    MarginConstant,
    /// `r = 0`
    None,
}

impl PriorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PriorKind::Laplace => "laplace",
            PriorKind::Gaussian => "gaussian",
            PriorKind::ShiftedGaussian => "shifted_gaussian",
            PriorKind::MarginConstant => "margin_constant",
            PriorKind::None => "none",
        }
    }
}

impl fmt::Display for PriorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "laplace" => PriorKind::Laplace,
            "gaussian" => PriorKind::Gaussian,
            "shifted_gaussian" => PriorKind::ShiftedGaussian,
            "margin_constant" => PriorKind::MarginConstant,
            "none" => PriorKind::None,
            other => {
                return Err(Error::config(
                    "prior.kind",
                    format!(
                        "unknown kind `{other}` (laplace | gaussian | shifted_gaussian | margin_constant | none)"
                    ),
                ))
            }
        })
    }
}

/// Prior hypothesis and its hyperparameters.
///
/// `beta = ∞` switches the prior off for every kind, so `kind = none` and
/// `beta = ∞` give identical losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub kind: PriorKind,
    pub beta: f64,
    pub sigma2: f64,
    pub c_o: f64,
    pub c: f64,
    pub tau: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            kind: PriorKind::Laplace,
            beta: 2.0,
            sigma2: DEFAULT_SIGMA2,
            c_o: default_c_o(),
            c: DEFAULT_MARGIN,
            tau: DEFAULT_TAU,
        }
    }
}

impl PriorConfig {
    pub fn none(tau: f64) -> Self {
        Self {
            kind: PriorKind::None,
            tau,
            ..Self::default()
        }
    }

    pub fn laplace(beta: f64, tau: f64) -> Self {
        Self {
            kind: PriorKind::Laplace,
            beta,
            tau,
            ..Self::default()
        }
    }

    pub fn with_beta(self, beta: f64) -> Self {
        Self { beta, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config("prior.tau", format!("must be positive and finite, got {}", self.tau)));
        }
        if self.kind == PriorKind::None {
            return Ok(());
        }
        if !(self.beta > 0.0) {
            return Err(Error::config("prior.beta", format!("must be > 0 or inf, got {}", self.beta)));
        }
        match self.kind {
            PriorKind::Gaussian if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) => {
                Err(Error::config("prior.sigma2", format!("must be positive, got {}", self.sigma2)))
            }
            PriorKind::Gaussian | PriorKind::ShiftedGaussian if !(self.c_o >= 0.0 && self.c_o.is_finite()) => {
                Err(Error::config("prior.c_o", format!("must be finite and ≥ 0, got {}", self.c_o)))
            }
            PriorKind::MarginConstant if !self.c.is_finite() => {
                Err(Error::config("prior.c", "must be finite"))
            }
            _ => Ok(()),
        }
    }

    /// True when the penalty is identically zero.
    pub fn is_off(&self) -> bool {
        self.kind == PriorKind::None || self.beta == f64::INFINITY
    }

    /// `r = −log h` for a matrix with nuclear norm `nuc`, where `rows` is the
    /// dimensional normaliser (`M` for `Q`, `N(M−1)` for the batchwise `P`).
    pub fn penalty_from_norm(&self, nuc: f64, rows: usize) -> f64 {
        if self.is_off() {
            return 0.0;
        }
        let m = rows as f64;
        match self.kind {
            PriorKind::Laplace => nuc / (m * self.beta * self.tau),
            PriorKind::Gaussian => (nuc - self.c_o).powi(2) / (self.sigma2 * m * self.tau),
            PriorKind::ShiftedGaussian => (nuc - self.c_o).powi(2) / (m * self.beta * self.tau),
            PriorKind::MarginConstant => self.c / (m * self.beta * self.tau),
            PriorKind::None => 0.0,
        }
    }

    /// Differentiable `r` given the nuclear norm as a tape scalar.
    fn penalty_var<'t>(&self, tape: &'t Tape, nuc: &Var<'t>, rows: usize) -> Option<Var<'t>> {
        if self.is_off() {
            return None;
        }
        let m = rows as f64;
        Some(match self.kind {
            PriorKind::Laplace => nuc.scale(1.0 / (m * self.beta * self.tau)),
            PriorKind::Gaussian | PriorKind::ShiftedGaussian => {
                let scale = if self.kind == PriorKind::Gaussian {
                    self.sigma2 * m * self.tau
                } else {
                    m * self.beta * self.tau
                };
                let shifted = nuc
                    .add_scalar(&tape.constant(Tensor::scalar(-self.c_o)))
                    .expect("scalar operands");
                shifted.square().scale(1.0 / scale)
            }
            PriorKind::MarginConstant => tape.constant(Tensor::scalar(self.penalty_from_norm(0.0, rows))),
            PriorKind::None => unreachable!("handled by is_off"),
        })
    }
}

/// `M×d` stack `[q₁; …; q_{M−1}; k⁺]` with the key row detached.
#[derive(Clone, Debug)]
pub struct QMatrix<'t> {
    rows: Var<'t>,
}

impl<'t> QMatrix<'t> {
    pub fn var(&self) -> &Var<'t> {
        &self.rows
    }

    pub fn m(&self) -> usize {
        self.rows.value().rows()
    }
}

/// Builds `Q` from tape-attached queries and a plain-value positive key.
pub fn build_q<'t>(queries: &Var<'t>, k_pos: &Tensor) -> Result<QMatrix<'t>> {
    let (_, d) = queries.value().dims2()?;
    if k_pos.len() != d {
        return Err(Error::dim("build_q", format!("key of {} for queries of width {d}", k_pos.len())));
    }
    let tape = tape_of(queries);
    let key_row = tape.constant(k_pos.clone().reshape(&[1, d])?);
    Ok(QMatrix {
        rows: Var::concat_rows(&[queries.clone(), key_row])?,
    })
}

fn tape_of<'t>(v: &Var<'t>) -> &'t Tape {
    v.tape()
}

/// `r = −log h(Q)` on the tape, plus the nuclear norm value.
pub fn prior_log_penalty<'t>(q: &QMatrix<'t>, cfg: &PriorConfig) -> Result<Penalty<'t>> {
    cfg.validate()?;
    let tape = tape_of(&q.rows);
    let nuc = q.rows.nuclear_norm()?;
    let nuc_value = nuc.item();
    let r = cfg
        .penalty_var(tape, &nuc, q.m())
        .unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    Ok(Penalty { r, nuc_norm: nuc_value })
}

#[derive(Clone, Debug)]
pub struct Penalty<'t> {
    pub r: Var<'t>,
    pub nuc_norm: f64,
}

/// Mean over query rows of the shifted-logits cross entropy.
///
/// `shift` is `r`; the positive logit becomes `(q·k⁺ − τ r)/τ`.
fn shifted_contrastive<'t>(
    queries: &Var<'t>,
    k_pos: &Tensor,
    negs_t: &Var<'t>,
    shift: Option<&Var<'t>>,
    tau: f64,
) -> Result<Var<'t>> {
    let tape = tape_of(queries);
    let (n, d) = queries.value().dims2()?;
    if k_pos.len() != d {
        return Err(Error::dim("contrastive", format!("key of {} for width {d}", k_pos.len())));
    }
    if negs_t.value().rows() != d {
        return Err(Error::dim("contrastive", format!("negatives of width {} for width {d}", negs_t.value().rows())));
    }
    let key_col = tape.constant(k_pos.clone().reshape(&[d, 1])?);
    let mut pos = queries.matmul(&key_col)?;
    if let Some(r) = shift {
        pos = pos.add_scalar(&r.scale(-tau))?;
    }
    let logits = if negs_t.value().cols() == 0 {
        pos
    } else {
        Var::concat_cols(&[pos, queries.matmul(negs_t)?])?
    };
    logits.scale(1.0 / tau).softmax_cross_entropy(&vec![0; n])
}

fn negatives_t<'t>(tape: &'t Tape, negs: &Tensor) -> Result<Var<'t>> {
    if negs.rank() != 2 {
        return Err(Error::dim("negatives", format!("expected K×d, got {:?}", negs.shape())));
    }
    Ok(tape.constant(negs.transpose()?))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::config("tau", format!("must be positive, got {tau}")))
    }
}

/// InfoNCE for one query: `−log softmax([q·k⁺, q·k⁻₁, …]/τ)[0]`.
pub fn info_nce<'t>(q: &Var<'t>, k_pos: &Tensor, negs: &Tensor, tau: f64) -> Result<Var<'t>> {
    check_tau(tau)?;
    let d = q.value().len();
    let q_row = if q.value().rank() == 2 { q.clone() } else { q.reshape(&[1, d])? };
    if q_row.value().rows() != 1 {
        return Err(Error::dim("info_nce", format!("single query expected, got {:?}", q.shape())));
    }
    let negs_t = negatives_t(tape_of(q), negs)?;
    shifted_contrastive(&q_row, k_pos, &negs_t, None, tau)
}

/// Result of an instance or batch loss.
#[derive(Clone, Debug)]
pub struct LossOutput<'t> {
    pub loss: Var<'t>,
    /// `‖Q‖*` per instance (one entry, the shared `‖P‖*`, for the batchwise loss).
    pub nuc_norms: Vec<f64>,
}

fn check_views(queries: &Var<'_>) -> Result<()> {
    let (m1, _) = queries.value().dims2()?;
    if m1 == 0 {
        return Err(Error::Contract("an instance needs at least one query view (M ≥ 2)".into()));
    }
    Ok(())
}

/// Per-instance low-rank contrastive loss.
pub fn lorac_instance_loss<'t>(
    queries: &Var<'t>,
    k_pos: &Tensor,
    negs: &Tensor,
    cfg: &PriorConfig,
) -> Result<LossOutput<'t>> {
    cfg.validate()?;
    check_views(queries)?;
    let negs_t = negatives_t(tape_of(queries), negs)?;
    instance_with(queries, k_pos, &negs_t, cfg, None)
}

fn select_views<'t>(queries: &Var<'t>, subset: &[usize]) -> Result<Var<'t>> {
    let m1 = queries.value().rows();
    if subset.is_empty() || subset.iter().any(|&i| i >= m1) {
        return Err(Error::config("q_view_subset", format!("indices must be a non-empty subset of 0..{m1}")));
    }
    let rows = subset
        .iter()
        .map(|&i| queries.slice_rows(i, 1))
        .collect::<Result<Vec<_>>>()?;
    Var::concat_rows(&rows)
}

fn instance_with<'t>(
    queries: &Var<'t>,
    k_pos: &Tensor,
    negs_t: &Var<'t>,
    cfg: &PriorConfig,
    subset: Option<&[usize]>,
) -> Result<LossOutput<'t>> {
    let q = match subset {
        Some(s) => build_q(&select_views(queries, s)?, k_pos)?,
        None => build_q(queries, k_pos)?,
    };
    let penalty = prior_log_penalty(&q, cfg)?;
    let shift = (!cfg.is_off()).then_some(&penalty.r);
    let loss = shifted_contrastive(queries, k_pos, negs_t, shift, cfg.tau)?;
    Ok(LossOutput {
        loss,
        nuc_norms: vec![penalty.nuc_norm],
    })
}

/// Views of one instance: tape-attached queries and a detached key.
#[derive(Clone, Debug)]
pub struct InstanceViews<'t> {
    pub queries: Var<'t>,
    pub k_pos: Tensor,
}

#[derive(Clone, Debug)]
pub struct Batch<'t> {
    pub instances: Vec<InstanceViews<'t>>,
    /// `K×d`, detached.
    pub negatives: Tensor,
}

impl<'t> Batch<'t> {
    fn validate(&self) -> Result<(usize, usize)> {
        let first = self
            .instances
            .first()
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        let shape = first.queries.value().dims2()?;
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.queries.value().dims2()? != shape {
                return Err(Error::dim("batch", format!("instance {i} has shape {:?}, expected {shape:?}", inst.queries.shape())));
            }
        }
        check_views(&first.queries)?;
        Ok(shape)
    }
}

/// Mean of per-instance losses.
pub fn lorac_batch_loss<'t>(batch: &Batch<'t>, cfg: &PriorConfig) -> Result<LossOutput<'t>> {
    lorac_batch_loss_with(batch, cfg, None)
}

/// [`lorac_batch_loss`] where only the query views listed in `q_view_subset`
/// enter `Q`; every query view still contributes a contrastive term.
pub fn lorac_batch_loss_with<'t>(
    batch: &Batch<'t>,
    cfg: &PriorConfig,
    q_view_subset: Option<&[usize]>,
) -> Result<LossOutput<'t>> {
    cfg.validate()?;
    batch.validate()?;
    let tape = tape_of(&batch.instances[0].queries);
    let negs_t = negatives_t(tape, &batch.negatives)?;
    let mut losses = Vec::with_capacity(batch.instances.len());
    let mut norms = Vec::with_capacity(batch.instances.len());
    for inst in &batch.instances {
        let out = instance_with(&inst.queries, &inst.k_pos, &negs_t, cfg, q_view_subset)?;
        losses.push(out.loss.reshape(&[1, 1])?);
        norms.extend(out.nuc_norms);
    }
    let loss = Var::concat_rows(&losses)?.mean();
    Ok(LossOutput { loss, nuc_norms: norms })
}

/// `(M−1)N × d` stack of per-instance centred queries `qₘ − μᵢ`.
#[derive(Clone, Debug)]
pub struct PMatrix<'t> {
    rows: Var<'t>,
    pub instances: usize,
    pub views: usize,
}

impl<'t> PMatrix<'t> {
    pub fn var(&self) -> &Var<'t> {
        &self.rows
    }
}

pub fn build_p<'t>(batch: &Batch<'t>) -> Result<PMatrix<'t>> {
    let (views, _) = batch.validate()?;
    let tape = tape_of(&batch.instances[0].queries);
    // I − 11ᵀ/(M−1)
    let inv = 1.0 / views as f64;
    let mut c = Tensor::full(&[views, views], -inv);
    for i in 0..views {
        c.set(i, i, 1.0 - inv);
    }
    let center = tape.constant(c);
    let blocks = batch
        .instances
        .iter()
        .map(|inst| center.matmul(&inst.queries))
        .collect::<Result<Vec<_>>>()?;
    Ok(PMatrix {
        rows: Var::concat_rows(&blocks)?,
        instances: batch.instances.len(),
        views,
    })
}

/// Batchwise variant: one shared prior on the centred-view matrix `P`,
/// normalised by `N(M−1)`.
pub fn lorac_bs_loss<'t>(batch: &Batch<'t>, cfg: &PriorConfig) -> Result<LossOutput<'t>> {
    cfg.validate()?;
    let p = build_p(batch)?;
    let tape = tape_of(&batch.instances[0].queries);
    let nuc = p.rows.nuclear_norm()?;
    let nuc_value = nuc.item();
    let r = cfg.penalty_var(tape, &nuc, p.instances * p.views);
    let negs_t = negatives_t(tape, &batch.negatives)?;
    let mut losses = Vec::with_capacity(batch.instances.len());
    for inst in &batch.instances {
        let l = shifted_contrastive(&inst.queries, &inst.k_pos, &negs_t, r.as_ref(), cfg.tau)?;
        losses.push(l.reshape(&[1, 1])?);
    }
    let loss = Var::concat_rows(&losses)?.mean();
    Ok(LossOutput {
        loss,
        nuc_norms: vec![nuc_value],
    })
}

/// Evaluates the instance loss on plain values.
pub fn instance_loss_value(queries: &Tensor, k_pos: &Tensor, negs: &Tensor, cfg: &PriorConfig) -> Result<f64> {
    let tape = Tape::new();
    let q = tape.constant(queries.clone());
    Ok(lorac_instance_loss(&q, k_pos, negs, cfg)?.loss.item())
}

/// Largest disagreement between three evaluations of the instance loss:
/// the ratio form, the `log(1 + Σⱼ exp(Δⱼ/τ + r))` rewrite, and the
/// shifted-logits form used for training.
pub fn rewrite_consistency(queries: &Tensor, k_pos: &Tensor, negs: &Tensor, cfg: &PriorConfig) -> Result<f64> {
    cfg.validate()?;
    let (m1, d) = queries.dims2()?;
    if k_pos.len() != d || negs.cols() != d {
        return Err(Error::dim("rewrite_consistency", "width mismatch"));
    }
    let mut q_rows: Vec<&[f64]> = (0..m1).map(|i| queries.row(i)).collect();
    q_rows.push(k_pos.data());
    let nuc = crate::svd::nuclear_norm(&Tensor::from_rows(&q_rows)?)?;
    let r = cfg.penalty_from_norm(nuc, m1 + 1);
    let h = (-r).exp();
    let tau = cfg.tau;
    let dotp = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let mut ratio = 0.0;
    let mut rewrite = 0.0;
    for m in 0..m1 {
        let qm = queries.row(m);
        let s_pos = dotp(qm, k_pos.data());
        let num = (s_pos / tau).exp() * h;
        let neg_sum: f64 = (0..negs.rows()).map(|j| (dotp(qm, negs.row(j)) / tau).exp()).sum();
        ratio += -(num / (num + neg_sum)).ln();
        let inner: f64 = (0..negs.rows())
            .map(|j| ((dotp(qm, negs.row(j)) - s_pos) / tau + r).exp())
            .sum();
        rewrite += inner.ln_1p();
    }
    ratio /= m1 as f64;
    rewrite /= m1 as f64;
    let logits = instance_loss_value(queries, k_pos, negs, cfg)?;
    Ok([(ratio - rewrite).abs(), (ratio - logits).abs(), (rewrite - logits).abs()]
        .into_iter()
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(rows: &[&[f64]]) -> Tensor {
        let r: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                r.iter().map(|x| x / n).collect()
            })
            .collect();
        Tensor::from_rows(&r).unwrap()
    }

    #[test]
    fn info_nce_without_negatives_is_zero() {
        let tape = Tape::new();
        let q = tape.leaf(Tensor::vector(vec![1.0, 0.0]));
        let negs = Tensor::zeros(&[0, 2]);
        let l = info_nce(&q, &Tensor::vector(vec![0.0, 1.0]), &negs, 0.2).unwrap();
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn info_nce_uniform_similarities() {
        let tape = Tape::new();
        let q = tape.leaf(Tensor::vector(vec![1.0, 0.0, 0.0, 0.0]));
        let k = Tensor::vector(vec![0.0, 1.0, 0.0, 0.0]);
        let negs = unit_rows(&[&[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0, 0.0, 1.0], &[0.0, 1.0, 1.0, 0.0]]);
        let l = info_nce(&q, &k, &negs, 0.2).unwrap();
        assert!((l.item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn info_nce_scalar_case() {
        let tape = Tape::new();
        let q = tape.leaf(Tensor::vector(vec![1.0, 0.0]));
        let l = info_nce(&q, &Tensor::vector(vec![1.0, 0.0]), &unit_rows(&[&[0.0, 1.0]]), 0.2).unwrap();
        let expect = (-5f64).exp().ln_1p();
        assert!((l.item() - expect).abs() < 1e-15);
        assert!((l.item() - 0.006_715_348_489_118_068).abs() < 1e-15);
    }

    #[test]
    fn tau_must_be_positive() {
        let tape = Tape::new();
        let q = tape.leaf(Tensor::vector(vec![1.0, 0.0]));
        let negs = unit_rows(&[&[0.0, 1.0]]);
        assert!(matches!(info_nce(&q, &Tensor::vector(vec![1.0, 0.0]), &negs, 0.0), Err(Error::Config { .. })));
    }

    #[test]
    fn penalty_values() {
        let cfg = PriorConfig::laplace(1.0, 0.2);
        assert!((cfg.penalty_from_norm(2.0, 4) - 2.5).abs() < 1e-15);
        assert_eq!(PriorConfig::none(0.2).penalty_from_norm(3.0, 4), 0.0);
        let sg = PriorConfig {
            kind: PriorKind::ShiftedGaussian,
            c_o: 2.0,
            ..PriorConfig::default()
        };
        assert_eq!(sg.penalty_from_norm(2.0, 4), 0.0);
        assert_eq!(PriorConfig::laplace(f64::INFINITY, 0.2).penalty_from_norm(3.0, 4), 0.0);
    }

    #[test]
    fn invalid_beta_rejected() {
        assert!(PriorConfig::laplace(0.0, 0.2).validate().is_err());
        assert!(PriorConfig::laplace(-1.0, 0.2).validate().is_err());
        assert!(PriorConfig::laplace(f64::INFINITY, 0.2).validate().is_ok());
        assert!(PriorConfig { beta: 0.0, ..PriorConfig::none(0.2) }.validate().is_ok());
    }

    #[test]
    fn prior_kind_parses() {
        for k in [
            PriorKind::Laplace,
            PriorKind::Gaussian,
            PriorKind::ShiftedGaussian,
            PriorKind::MarginConstant,
            PriorKind::None,
        ] {
            assert_eq!(k.as_str().parse::<PriorKind>().unwrap(), k);
        }
        assert!("student_t".parse::<PriorKind>().is_err());
    }

    #[test]
    fn build_q_detaches_key() {
        let tape = Tape::new();
        let q = tape.leaf(unit_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]));
        let key = Tensor::vector(vec![0.0, 0.0, 1.0]);
        let qm = build_q(&q, &key).unwrap();
        assert_eq!(qm.var().shape(), &[3, 3]);
        let n = qm.var().nuclear_norm().unwrap();
        assert!((n.item() - 3.0).abs() < 1e-12);
        let g = tape.backward(&n).unwrap();
        // Only the query rows carry gradient.
        assert_eq!(g.wrt(&q).shape(), &[2, 3]);
    }

    #[test]
    fn empty_batch_is_a_contract_error() {
        let batch = Batch {
            instances: vec![],
            negatives: Tensor::zeros(&[1, 2]),
        };
        assert!(matches!(lorac_batch_loss(&batch, &PriorConfig::none(0.2)), Err(Error::Contract(_))));
    }
}
