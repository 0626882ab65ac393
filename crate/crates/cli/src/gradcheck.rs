//! Central-difference gradient checks for the nuclear norm, the losses and
//! the encoder.

use lorac::autodiff::Fault;
use lorac::encoder::{BoundEncoder, EncoderConfig, EncoderParams};
use lorac::losses::{
    info_nce, lorac_batch_loss, lorac_bs_loss, lorac_instance_loss, Batch, InstanceViews, PriorConfig, PriorKind,
};
use lorac::{svd, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Entries smaller than this fraction of the largest gradient entry are
/// compared on that absolute scale instead of their own; central differences
/// cannot resolve them to `REL_TOL` relatively.
pub const REL_FLOOR_FRACTION: f64 = 1e-2;
/// Absolute denominator floor.
pub const REL_FLOOR: f64 = 1e-8;
/// Required relative spacing of singular values in nuclear-norm checks.
const MIN_SV_GAP: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Matrix shapes for the nuclear-norm checks.
    pub sizes: Vec<(usize, usize)>,
    /// Random matrices per nuclear-norm shape.
    pub trials: usize,
    pub fault: Option<Fault>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sizes: vec![(4, 8), (8, 32)],
            trials: 20,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    /// Gradient entries compared.
    pub entries: usize,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// `max_i |a_i − f_i| / max(|a_i|, |f_i|, floor)` where
/// `floor = max(REL_FLOOR, REL_FLOOR_FRACTION · max_j |f_j|)`.
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let scale = numeric.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (REL_FLOOR_FRACTION * scale).max(REL_FLOOR);
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function, one coordinate at a time.
pub fn central_diff(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + h;
        let fp = f(&xp);
        xp.data_mut()[i] = orig - h;
        let fm = f(&xp);
        xp.data_mut()[i] = orig;
        g.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    g
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).expect("shape matches")
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = gaussian(rng, &[rows, cols]);
    for i in 0..rows {
        let r = t.row_mut(i);
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter_mut().for_each(|v| *v /= n);
    }
    t
}

/// A Gaussian matrix whose singular values are pairwise separated.
pub fn distinct_sv_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor {
    loop {
        let a = gaussian(rng, &[m, n]);
        let s = svd(&a).expect("finite input").s;
        let top = s[0];
        let separated = s.windows(2).all(|w| w[0] - w[1] > MIN_SV_GAP * top) && s[s.len() - 1] > MIN_SV_GAP * top;
        if separated {
            return a;
        }
    }
}

struct Suite {
    fault: Option<Fault>,
    rng: ChaCha8Rng,
}

impl Suite {
    fn tape(&self) -> Tape {
        self.fault.map_or_else(Tape::new, Tape::with_fault)
    }

    /// Compares the tape gradient of `f` at `x` with central differences.
    fn compare(&self, x: &Tensor, f: &dyn for<'t> Fn(&Var<'t>) -> lorac::Result<Var<'t>>) -> lorac::Result<(usize, f64)> {
        let tape = self.tape();
        let xv = tape.leaf(x.clone());
        let y = f(&xv)?;
        let analytic = tape.backward(&y)?.wrt(&xv);
        let numeric = central_diff(x, FD_STEP, |xp| {
            let t = Tape::new();
            f(&t.constant(xp.clone())).map(|v| v.item()).unwrap_or(f64::NAN)
        });
        Ok((x.len(), max_rel_err(&analytic, &numeric)))
    }
}

fn weighted_sum<'t>(v: &Var<'t>, w: &Tensor) -> lorac::Result<Var<'t>> {
    v.mul(&v.tape().constant(w.clone())).map(|p| p.sum())
}

fn record(checks: &mut Vec<Check>, name: impl Into<String>, results: &[(usize, f64)]) {
    checks.push(Check {
        name: name.into(),
        entries: results.iter().map(|r| r.0).sum(),
        max_rel_err: results.iter().map(|r| r.1).fold(0.0, f64::max),
        tol: REL_TOL,
    });
}

pub fn run_suite(cfg: &SuiteConfig) -> lorac::Result<Vec<Check>> {
    let mut s = Suite {
        fault: cfg.fault,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let mut checks = Vec::new();

    for &(m, n) in &cfg.sizes {
        let mut res = Vec::with_capacity(cfg.trials);
        for _ in 0..cfg.trials {
            let a = distinct_sv_matrix(&mut s.rng, m, n);
            res.push(s.compare(&a, &|x| x.nuclear_norm())?);
        }
        record(&mut checks, format!("nuclear_norm {m}x{n}"), &res);
    }

    let a = gaussian(&mut s.rng, &[3, 4]);
    let b = gaussian(&mut s.rng, &[4, 5]);
    let w = gaussian(&mut s.rng, &[3, 5]);
    let lhs = s.compare(&a, &|x| weighted_sum(&x.matmul(&x.tape().constant(b.clone()))?, &w))?;
    let rhs = s.compare(&b, &|x| weighted_sum(&x.tape().constant(a.clone()).matmul(x)?, &w))?;
    record(&mut checks, "matmul", &[lhs, rhs]);

    let x = gaussian(&mut s.rng, &[4, 6]);
    let w = gaussian(&mut s.rng, &[4, 6]);
    let r = s.compare(&x, &|v| weighted_sum(&v.l2_normalize_rows()?, &w))?;
    record(&mut checks, "l2_normalize_rows", &[r]);

    let (m1, d, k) = (5, 8, 16);
    let k_pos = Tensor::vector(unit_rows(&mut s.rng, 1, d).into_data());
    let negs = unit_rows(&mut s.rng, k, d);
    let q1 = unit_rows(&mut s.rng, 1, d);
    let r = s.compare(&q1, &|v| info_nce(v, &k_pos, &negs, 0.2))?;
    record(&mut checks, "info_nce", &[r]);

    let queries = unit_rows(&mut s.rng, m1, d);
    for kind in [
        PriorKind::Laplace,
        PriorKind::Gaussian,
        PriorKind::ShiftedGaussian,
        PriorKind::MarginConstant,
        PriorKind::None,
    ] {
        let prior = PriorConfig {
            kind,
            beta: 2.0,
            c_o: 1.5,
            ..PriorConfig::default()
        };
        let r = s.compare(&queries, &|v| Ok(lorac_instance_loss(v, &k_pos, &negs, &prior)?.loss))?;
        record(&mut checks, format!("lorac_instance {kind}"), &[r]);
    }

    let (n_inst, views) = (3, 3);
    let stacked = unit_rows(&mut s.rng, n_inst * views, d);
    let keys = unit_rows(&mut s.rng, n_inst, d);
    let prior = PriorConfig::laplace(0.5, 0.2);
    for (name, shared) in [("lorac_batch", false), ("lorac_bs", true)] {
        let r = s.compare(&stacked, &|v| {
            let b = Batch {
                instances: (0..n_inst)
                    .map(|i| {
                        Ok(InstanceViews {
                            queries: v.slice_rows(i * views, views)?,
                            k_pos: Tensor::vector(keys.row(i).to_vec()),
                        })
                    })
                    .collect::<lorac::Result<Vec<_>>>()?,
                negatives: negs.clone(),
            };
            let out = if shared { lorac_bs_loss(&b, &prior)? } else { lorac_batch_loss(&b, &prior)? };
            Ok(out.loss)
        })?;
        record(&mut checks, name, &[r]);
    }

    let enc_cfg = EncoderConfig {
        d_in: 5,
        hidden: vec![7, 6],
        d_out: 4,
        init_seed: cfg.seed,
    };
    let params = EncoderParams::init(&enc_cfg);
    let probe = EncoderProbe {
        x: gaussian(&mut s.rng, &[6, 5]),
        keys: unit_rows(&mut s.rng, 2, 4),
        negs: unit_rows(&mut s.rng, 8, 4),
        prior: PriorConfig::laplace(1.0, 0.2),
    };
    let tape = s.tape();
    let bound = params.bind(&tape);
    let loss = probe.loss(&bound)?;
    let analytic = bound.gradients(&tape.backward(&loss)?);
    let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let mut res = Vec::new();
    for (idx, t) in tensors.iter().enumerate() {
        let numeric = central_diff(t, FD_STEP, |tp| {
            let mut ts = tensors.clone();
            ts[idx] = tp.clone();
            let p = EncoderParams::from_tensors(ts).expect("shapes unchanged");
            let tape = Tape::new();
            probe.loss(&p.bind(&tape)).map(|l| l.item()).unwrap_or(f64::NAN)
        });
        res.push((t.len(), max_rel_err(&analytic[idx], &numeric)));
    }
    record(&mut checks, "encoder + lorac_batch", &res);
    Ok(checks)
}

/// Batch loss of two instances (three query views each) through an encoder.
struct EncoderProbe {
    x: Tensor,
    keys: Tensor,
    negs: Tensor,
    prior: PriorConfig,
}

impl EncoderProbe {
    fn loss<'t>(&self, bound: &BoundEncoder<'t>) -> lorac::Result<Var<'t>> {
        let tape = bound.params()[0].tape();
        let emb = bound.forward(&tape.constant(self.x.clone()))?;
        let b = Batch {
            instances: (0..2)
                .map(|i| {
                    Ok(InstanceViews {
                        queries: emb.slice_rows(3 * i, 3)?,
                        k_pos: Tensor::vector(self.keys.row(i).to_vec()),
                    })
                })
                .collect::<lorac::Result<Vec<_>>>()?,
            negatives: self.negs.clone(),
        };
        Ok(lorac_batch_loss(&b, &self.prior)?.loss)
    }
}

pub fn format_table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:width$}  {:>7}  {:>12}  {:>8}  status\n", "check", "entries", "max_rel_err", "tol");
    for c in checks {
        out.push_str(&format!(
            "{:width$}  {:>7}  {:>12.3e}  {:>8.0e}  {}\n",
            c.name,
            c.entries,
            c.max_rel_err,
            c.tol,
            if c.passed() { "PASS" } else { "FAIL" }
        ));
    }
    out
}
