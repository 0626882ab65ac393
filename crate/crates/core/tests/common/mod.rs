#![allow(dead_code)]

use lorac::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = gaussian(rng, rows, cols);
    for i in 0..rows {
        let r = t.row_mut(i);
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.iter_mut().for_each(|v| *v /= n);
    }
    t
}

pub fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
    Tensor::vector(unit_rows(rng, 1, d).into_data())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn central_diff(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let o = xp.data()[i];
        xp.data_mut()[i] = o + h;
        let fp = f(&xp);
        xp.data_mut()[i] = o - h;
        let fm = f(&xp);
        xp.data_mut()[i] = o;
        g.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Per-entry relative error, with entries below 1% of the largest numeric
/// entry compared on that scale.
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let scale = numeric.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-2 * scale).max(1e-8);
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Eigenvalues of a symmetric matrix by cyclic two-sided Jacobi rotations.
pub fn sym_eigenvalues(a: &Tensor) -> Vec<f64> {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i][i]).collect()
}

/// `Σ √λ(AᵀA)`, computed without any SVD.
pub fn nuclear_norm_oracle(a: &Tensor) -> f64 {
    let (m, n) = (a.rows(), a.cols());
    let gram = if n <= m {
        a.transpose().unwrap().matmul(a).unwrap()
    } else {
        a.matmul(&a.transpose().unwrap()).unwrap()
    };
    sym_eigenvalues(&gram).into_iter().map(|l| l.max(0.0).sqrt()).sum()
}

/// `−log softmax(logits)[0]` with a max shift.
pub fn xent0(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    m + z.ln() - logits[0]
}
