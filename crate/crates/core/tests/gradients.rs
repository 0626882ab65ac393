mod common;

use common::*;
use lorac::encoder::{EncoderConfig, EncoderParams};
use lorac::eval::grad_stationarity_report;
use lorac::losses::{instance_loss_value, lorac_instance_loss, PriorConfig};
use lorac::{svd, Tape, Tensor};
use proptest::prelude::*;

const H: f64 = 1e-5;

#[test]
fn matmul_matches_finite_differences() {
    let mut r = rng(1);
    let (a, b, w) = (gaussian(&mut r, 3, 4), gaussian(&mut r, 4, 2), gaussian(&mut r, 3, 2));
    let value = |a: &Tensor| a.matmul(&b).unwrap().zip_map(&w, |x, y| x * y).unwrap().sum();
    let tape = Tape::new();
    let av = tape.leaf(a.clone());
    let y = av
        .matmul(&tape.constant(b.clone()))
        .unwrap()
        .mul(&tape.constant(w.clone()))
        .unwrap()
        .sum();
    let g = tape.backward(&y).unwrap().wrt(&av);
    assert!(max_rel_err(&g, &central_diff(&a, H, value)) < 1e-6);
}

#[test]
fn normalize_matches_finite_differences() {
    let mut r = rng(2);
    let (x, w) = (gaussian(&mut r, 5, 3), gaussian(&mut r, 5, 3));
    let value = |x: &Tensor| {
        let mut n = x.clone();
        for i in 0..n.rows() {
            let s = dot(x.row(i), x.row(i)).sqrt();
            n.row_mut(i).iter_mut().for_each(|v| *v /= s);
        }
        n.zip_map(&w, |a, b| a * b).unwrap().sum()
    };
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = xv.l2_normalize_rows().unwrap().mul(&tape.constant(w.clone())).unwrap().sum();
    let g = tape.backward(&y).unwrap().wrt(&xv);
    assert!(max_rel_err(&g, &central_diff(&x, H, value)) < 1e-6);
}

#[test]
fn nuclear_norm_gradient_is_u_vt_and_matches_fd() {
    let mut r = rng(3);
    for (m, n) in [(4, 8), (8, 32), (6, 3)] {
        let a = gaussian(&mut r, m, n);
        let tape = Tape::new();
        let av = tape.leaf(a.clone());
        let y = av.nuclear_norm().unwrap();
        assert!((y.item() - nuclear_norm_oracle(&a)).abs() < 1e-9 * y.item());
        let g = tape.backward(&y).unwrap().wrt(&av);
        let fd = central_diff(&a, H, nuclear_norm_oracle);
        assert!(max_rel_err(&g, &fd) < 1e-4, "{m}x{n}");
    }
}

#[test]
fn encoder_matches_finite_differences() {
    let cfg = EncoderConfig {
        d_in: 4,
        hidden: vec![6, 5],
        d_out: 3,
        init_seed: 11,
    };
    let params = EncoderParams::init(&cfg);
    let mut r = rng(4);
    let (x, w) = (gaussian(&mut r, 5, 4), gaussian(&mut r, 5, 3));
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let y = bound
        .forward(&tape.constant(x.clone()))
        .unwrap()
        .mul(&tape.constant(w.clone()))
        .unwrap()
        .sum();
    let grads = bound.gradients(&tape.backward(&y).unwrap());
    let tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    for (i, t) in tensors.iter().enumerate() {
        let fd = central_diff(t, H, |tp| {
            let mut ts = tensors.clone();
            ts[i] = tp.clone();
            let e = EncoderParams::from_tensors(ts).unwrap().embed(&x).unwrap();
            e.zip_map(&w, |a, b| a * b).unwrap().sum()
        });
        assert!(max_rel_err(&grads[i], &fd) < 1e-4, "tensor {i}");
    }
}

/// Closed-form query gradient of the mean instance loss for the Laplace
/// prior, assembled from `UVᵀ` of `Q = [queries; k⁺]`.
fn laplace_query_gradient(queries: &Tensor, k_pos: &Tensor, negs: &Tensor, beta: f64, tau: f64) -> Tensor {
    let (m1, d) = (queries.rows(), queries.cols());
    let m = (m1 + 1) as f64;
    let mut q_rows: Vec<Vec<f64>> = (0..m1).map(|i| queries.row(i).to_vec()).collect();
    q_rows.push(k_pos.data().to_vec());
    let q = Tensor::from_rows(&q_rows).unwrap();
    let f = svd(&q).unwrap();
    let uvt = f.u.matmul(&f.v.transpose().unwrap()).unwrap();
    let nuc: f64 = f.s.iter().sum();
    let r = nuc / (m * beta * tau);

    // Probabilities of the shifted-logit softmax per query.
    let mut p_pos = vec![0.0; m1];
    let mut p_neg = vec![vec![0.0; negs.rows()]; m1];
    for i in 0..m1 {
        let qi = queries.row(i);
        let mut logits = vec![(dot(qi, k_pos.data()) - tau * r) / tau];
        logits.extend((0..negs.rows()).map(|j| dot(qi, negs.row(j)) / tau));
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        p_pos[i] = (logits[0] - mx).exp() / z;
        for j in 0..negs.rows() {
            p_neg[i][j] = (logits[j + 1] - mx).exp() / z;
        }
    }
    // Every term depends on q_m through r.
    let through_r: f64 = p_pos.iter().map(|p| 1.0 - p).sum();
    let mut g = Tensor::zeros(&[m1, d]);
    for i in 0..m1 {
        for c in 0..d {
            let mut v = -(1.0 - p_pos[i]) * k_pos.data()[c] / tau;
            for j in 0..negs.rows() {
                v += p_neg[i][j] * negs.at(j, c) / tau;
            }
            v += through_r * uvt.at(i, c) / (m * beta * tau);
            g.set(i, c, v / m1 as f64);
        }
    }
    g
}

#[test]
fn query_gradient_decomposes_through_u_vt() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let queries = unit_rows(&mut r, 5, 8);
        let k_pos = unit_vec(&mut r, 8);
        let negs = unit_rows(&mut r, 12, 8);
        let cfg = PriorConfig::laplace(0.7, 0.2);
        let auto = grad_stationarity_report(&queries, &k_pos, &negs, &cfg).unwrap().grads;
        let closed = laplace_query_gradient(&queries, &k_pos, &negs, 0.7, 0.2);
        assert!(auto.max_abs_diff(&closed) < 1e-10, "seed {seed}: {}", auto.max_abs_diff(&closed));
    }
}

#[test]
fn prior_gradient_is_additive() {
    // laplace − none, minus the prior-only finite difference, is zero
    // once the shift is moved out of the softmax: compare each side with FD.
    let mut r = rng(5);
    let queries = unit_rows(&mut r, 4, 6);
    let k_pos = unit_vec(&mut r, 6);
    let negs = unit_rows(&mut r, 9, 6);
    for kind_cfg in [PriorConfig::laplace(1.5, 0.2), PriorConfig::none(0.2)] {
        let auto = grad_stationarity_report(&queries, &k_pos, &negs, &kind_cfg).unwrap().grads;
        let fd = central_diff(&queries, H, |q| instance_loss_value(q, &k_pos, &negs, &kind_cfg).unwrap());
        assert!(max_rel_err(&auto, &fd) < 1e-4);
    }
    let with = grad_stationarity_report(&queries, &k_pos, &negs, &PriorConfig::laplace(1.5, 0.2)).unwrap().grads;
    let without = grad_stationarity_report(&queries, &k_pos, &negs, &PriorConfig::none(0.2)).unwrap().grads;
    let diff = with.zip_map(&without, |a, b| a - b).unwrap();
    let diff_fd = central_diff(&queries, H, |q| {
        instance_loss_value(q, &k_pos, &negs, &PriorConfig::laplace(1.5, 0.2)).unwrap()
            - instance_loss_value(q, &k_pos, &negs, &PriorConfig::none(0.2)).unwrap()
    });
    assert!(max_rel_err(&diff, &diff_fd) < 1e-4);
    assert!(diff.frobenius_norm() > 1e-6);
}

#[test]
fn identical_key_and_negative_is_stationary() {
    let mut r = rng(6);
    let k = unit_vec(&mut r, 8);
    let negs = Tensor::matrix(1, 8, k.data().to_vec()).unwrap();
    let queries = unit_rows(&mut r, 5, 8);
    let rep = grad_stationarity_report(&queries, &k, &negs, &PriorConfig::none(0.2)).unwrap();
    assert!(rep.norms.iter().all(|&n| n < 1e-9), "{:?}", rep.norms);
}

#[test]
fn autodiff_loss_gradient_matches_fd_for_every_kind() {
    use lorac::losses::PriorKind::*;
    let mut r = rng(7);
    let queries = unit_rows(&mut r, 3, 5);
    let k_pos = unit_vec(&mut r, 5);
    let negs = unit_rows(&mut r, 6, 5);
    for kind in [Laplace, Gaussian, ShiftedGaussian, MarginConstant, None] {
        let cfg = PriorConfig {
            kind,
            beta: 0.8,
            c_o: 1.2,
            ..PriorConfig::default()
        };
        let tape = Tape::new();
        let q = tape.leaf(queries.clone());
        let l = lorac_instance_loss(&q, &k_pos, &negs, &cfg).unwrap().loss;
        let g = tape.backward(&l).unwrap().wrt(&q);
        let fd = central_diff(&queries, H, |qq| instance_loss_value(qq, &k_pos, &negs, &cfg).unwrap());
        assert!(max_rel_err(&g, &fd) < 1e-4, "{kind}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nuclear_norm_dominates_frobenius(seed in any::<u64>(), m in 1usize..7, n in 1usize..7) {
        let a = gaussian(&mut rng(seed), m, n);
        let nuc = lorac::svd::nuclear_norm(&a).unwrap();
        prop_assert!(nuc >= a.frobenius_norm() * (1.0 - 1e-12));
    }

    #[test]
    fn rank_one_nuclear_equals_frobenius(seed in any::<u64>(), m in 1usize..7, n in 1usize..7) {
        let mut r = rng(seed);
        let (u, v) = (gaussian(&mut r, m, 1), gaussian(&mut r, 1, n));
        let a = u.matmul(&v).unwrap();
        let nuc = lorac::svd::nuclear_norm(&a).unwrap();
        prop_assert!((nuc - a.frobenius_norm()).abs() <= 1e-10 * a.frobenius_norm().max(1.0));
    }

    #[test]
    fn unit_rows_bound_nuclear_norm(seed in any::<u64>(), m in 1usize..9, d in 8usize..16) {
        let q = unit_rows(&mut rng(seed), m, d);
        let nuc = lorac::svd::nuclear_norm(&q).unwrap();
        let mf = m as f64;
        prop_assert!(nuc >= mf.sqrt() - 1e-9 && nuc <= mf + 1e-9);
    }
}
