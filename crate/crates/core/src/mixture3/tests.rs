use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::model::{LinearTransition, Variant};
use crate::rng::seeded;

fn randn(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let e: f64 = StandardNormal.sample(rng);
        scale * e
    })
}

fn random_m3(seed: u64, variant: Variant, k: usize, d: usize, n: usize) -> Mixture3Params {
    let mut rng = seeded(seed);
    let transition = TransitionFamily::init(&mut rng, variant, k, d);
    Mixture3Params {
        prior_logits: randn(&mut rng, 1, k, 0.5),
        latent_prior: randn(&mut rng, k, d, 1.0),
        dynamics: (0..k)
            .map(|_| Matrix::identity(d).scale(0.7).add(&randn(&mut rng, d, d, 0.2)).unwrap())
            .collect(),
        offsets: randn(&mut rng, k, d, 0.3),
        emission: randn(&mut rng, n, d, 1.0),
        emission_noise: Matrix::from_fn(1, n, |_, _| rng.random_range(0.1..0.5)),
        latent_noise: Matrix::zeros(k, d),
        transition,
        temperature: 0.99,
    }
}

fn to_dm(m: &Matrix) -> DMatrix<f64> {
    m.to_nalgebra()
}

#[test]
fn orthonormal_projection_with_transposed_dynamics_gives_identity() {
    let mut p = crate::model::GdmParams::init(
        &mut seeded(1),
        &[ObsSeries::new(randn(&mut seeded(2), 50, 4, 1.0), None).unwrap()],
        3,
        2,
        Variant::Linear,
        0.99,
    )
    .unwrap();
    // PCA rows are orthonormal.
    p.dynamics = vec![p.proj.transpose(); 3];
    let m = to_mixture3(&p).unwrap();
    for a in &m.dynamics {
        assert!(a.max_abs_diff(&Matrix::identity(2)) < 1e-12);
    }
    assert!(m.offsets.data().iter().all(|&v| v == 0.0));
    assert!(m.emission.max_abs_diff(&p.proj.transpose()) < 1e-12);
}

#[test]
fn rank_deficient_projection_is_rejected() {
    let g = to_gdm(&random_m3(3, Variant::Linear, 2, 2, 4)).unwrap();
    let mut p = g.clone();
    p.proj = Matrix::from_rows(&[vec![1.0, 2.0, 0.0, 1.0], vec![2.0, 4.0, 0.0, 2.0]]).unwrap();
    match to_mixture3(&p) {
        Err(GdmError::RankDeficient { condition, .. }) => assert!(condition > 1e12),
        other => panic!("{other:?}"),
    }
    let mut m = random_m3(3, Variant::Linear, 2, 2, 4);
    m.emission = Matrix::from_fn(4, 2, |i, _| i as f64);
    assert!(matches!(to_gdm(&m), Err(GdmError::RankDeficient { .. })));
}

#[test]
fn orthonormal_emission_with_identity_dynamics() {
    let mut m = random_m3(4, Variant::Linear, 2, 2, 3);
    let q = to_dm(&randn(&mut seeded(5), 3, 2, 1.0)).qr().q();
    m.emission = Matrix::from_nalgebra(&q);
    m.dynamics = vec![Matrix::identity(2); 2];
    m.offsets = Matrix::zeros(2, 2);
    let g = to_gdm(&m).unwrap();
    for s in &g.dynamics {
        assert!(s.max_abs_diff(&m.emission) < 1e-12);
    }
    assert!(g.proj.max_abs_diff(&m.emission.transpose()) < 1e-12);
    assert!(g.offsets.data().iter().all(|v| v.abs() < 1e-15));
    // Noise surrogate: Q + C F Q F^T C^T on the diagonal (identity dynamics).
    let qd = DMatrix::from_diagonal(&DVector::from_row_slice(m.emission_noise.data()));
    let proj = &q * q.transpose();
    let corr = &proj * &qd * proj.transpose();
    for j in 0..3 {
        let want = m.emission_noise[(0, j)] + corr[(j, j)];
        assert!((g.obs_noise[(0, j)].powi(2) - want).abs() < 1e-12);
    }
}

#[test]
fn latent_step_cases() {
    let mut m = random_m3(6, Variant::Linear, 3, 2, 4);
    let x = [0.5, -1.5];
    let got = m.latent_step(&[0.0, 1.0, 0.0], Some(&x)).unwrap();
    let a = &m.dynamics[1];
    for i in 0..2 {
        let want = a[(i, 0)] * x[0] + a[(i, 1)] * x[1] + m.offsets[(1, i)];
        assert!((got[i] - want).abs() < 1e-15);
    }
    m.dynamics = vec![Matrix::identity(2); 3];
    m.offsets = Matrix::zeros(3, 2);
    assert_eq!(m.latent_step(&[0.2, 0.3, 0.5], Some(&x)).unwrap(), x.to_vec());
    assert!(m.latent_step(&[0.5, 0.5], Some(&x)).is_err());
    assert!(m.latent_step(&[0.2, 0.3, 0.5], Some(&[1.0])).is_err());
}

/// Dense precision from the factor quadratic forms, stacked independently.
fn dense_reference(factors: &[PairwiseFactor], nodes: &[NodePotential]) -> (DMatrix<f64>, DVector<f64>) {
    let t_len = nodes.len();
    let d = nodes[0].m.len();
    let mut j = DMatrix::zeros(t_len * d, t_len * d);
    let mut h = DVector::zeros(t_len * d);
    for (t, node) in nodes.iter().enumerate() {
        let ri = DMatrix::from_diagonal(&DVector::from_iterator(d, node.r.iter().map(|r| 1.0 / r)));
        let m = DVector::from_row_slice(&node.m);
        j.view_mut((t * d, t * d), (d, d)).add_assign(&ri);
        h.rows_mut(t * d, d).add_assign(&(&ri * m));
    }
    for (t, f) in factors.iter().enumerate() {
        // Residual x_{t+1} - A x_t - b = G [x_t; x_{t+1}] - b with G = [-A, I].
        let mut g = DMatrix::zeros(d, 2 * d);
        g.view_mut((0, 0), (d, d)).copy_from(&(-to_dm(&f.a)));
        g.view_mut((0, d), (d, d)).copy_from(&DMatrix::identity(d, d));
        let qi = DMatrix::from_diagonal(&DVector::from_iterator(d, f.q.iter().map(|q| 1.0 / q)));
        let b = DVector::from_row_slice(&f.b);
        j.view_mut((t * d, t * d), (2 * d, 2 * d)).add_assign(&(g.transpose() * &qi * &g));
        h.rows_mut(t * d, 2 * d).add_assign(&(g.transpose() * &qi * b));
    }
    (j, h)
}

use std::ops::AddAssign;

fn random_blocks(rng: &mut impl Rng, t_len: usize, d: usize, var: f64) -> (Vec<PairwiseFactor>, Vec<NodePotential>) {
    let factors = (1..t_len)
        .map(|_| PairwiseFactor {
            a: randn(rng, d, d, 0.6),
            b: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            q: (0..d).map(|_| var * rng.random_range(0.5..1.5)).collect(),
        })
        .collect();
    let nodes = (0..t_len)
        .map(|_| NodePotential {
            m: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            r: (0..d).map(|_| var * rng.random_range(0.5..1.5)).collect(),
        })
        .collect();
    (factors, nodes)
}

fn flatten(m: &Matrix) -> DVector<f64> {
    DVector::from_row_slice(m.data())
}

#[test]
fn single_step_precision_is_node_precision() {
    let nodes = [NodePotential { m: vec![1.0, -2.0], r: vec![0.5, 4.0] }];
    let g = BlockTriGaussian::assemble(&[], &nodes).unwrap();
    assert_eq!(g.diag[0], Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.25]]).unwrap());
    assert_eq!(g.h.data(), &[2.0, -0.5]);
    assert!(g.mean().unwrap().max_abs_diff(&Matrix::row_vector(&[1.0, -2.0])) < 1e-15);
}

#[test]
fn zero_transitions_decouple_blocks() {
    let mut rng = seeded(7);
    let (mut factors, nodes) = random_blocks(&mut rng, 4, 2, 1.0);
    for f in factors.iter_mut() {
        f.a = Matrix::zeros(2, 2);
    }
    let g = BlockTriGaussian::assemble(&factors, &nodes).unwrap();
    assert!(g.upper.iter().all(|u| u.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn assembly_matches_dense_product_of_factors() {
    let mut rng = seeded(8);
    let (factors, nodes) = random_blocks(&mut rng, 3, 2, 1.0);
    let g = BlockTriGaussian::assemble(&factors, &nodes).unwrap();
    let (j, h) = dense_reference(&factors, &nodes);
    assert!((to_dm(&g.dense_precision()) - &j).amax() < 1e-10);
    assert!((flatten(&g.h) - h).amax() < 1e-10);
}

#[test]
fn non_positive_variances_rejected() {
    let mut rng = seeded(9);
    let (mut factors, mut nodes) = random_blocks(&mut rng, 3, 2, 1.0);
    nodes[1].r[0] = 0.0;
    assert!(matches!(
        BlockTriGaussian::assemble(&factors, &nodes),
        Err(GdmError::NotPositiveDefinite(_))
    ));
    nodes[1].r[0] = 1.0;
    factors[0].q[1] = -1.0;
    assert!(matches!(
        BlockTriGaussian::assemble(&factors, &nodes),
        Err(GdmError::NotPositiveDefinite(_))
    ));
    let mut g = BlockTriGaussian::assemble(&factors[..0], &nodes[..1]).unwrap();
    g.diag[0] = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
    assert!(matches!(g.cholesky(), Err(GdmError::NotPositiveDefinite(_))));
}

#[test]
fn zero_potential_has_zero_mean() {
    let mut rng = seeded(10);
    let (mut factors, mut nodes) = random_blocks(&mut rng, 5, 3, 1.0);
    factors.iter_mut().for_each(|f| f.b = vec![0.0; 3]);
    nodes.iter_mut().for_each(|n| n.m = vec![0.0; 3]);
    let g = BlockTriGaussian::assemble(&factors, &nodes).unwrap();
    assert!(g.mean().unwrap().data().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn sample_covariance_matches_dense_inverse() {
    let mut rng = seeded(11);
    let (factors, nodes) = random_blocks(&mut rng, 3, 2, 0.3);
    let g = BlockTriGaussian::assemble(&factors, &nodes).unwrap();
    let (j, h) = dense_reference(&factors, &nodes);
    let cov = j.clone().try_inverse().unwrap();
    let mean = j.lu().solve(&h).unwrap();
    assert!((flatten(&g.mean().unwrap()) - &mean).amax() < 1e-10);

    let draws = 100_000;
    let mut acc = DMatrix::<f64>::zeros(6, 6);
    let mut sum = DVector::<f64>::zeros(6);
    for _ in 0..draws {
        let (x, _, _) = g.sample(&mut rng).unwrap();
        let v = flatten(&x);
        sum += &v;
        acc += &v * v.transpose();
    }
    let m = sum / draws as f64;
    let sample_cov = acc / draws as f64 - &m * m.transpose();
    let err = (sample_cov - &cov).norm();
    assert!(err < 0.02, "Frobenius error {err}");
}

#[test]
fn log_density_matches_dense_gaussian() {
    let mut rng = seeded(12);
    let (factors, nodes) = random_blocks(&mut rng, 4, 2, 1.0);
    let g = BlockTriGaussian::assemble(&factors, &nodes).unwrap();
    let (j, h) = dense_reference(&factors, &nodes);
    let mean = j.clone().lu().solve(&h).unwrap();
    let eta = randn(&mut rng, 4, 2, 1.0);
    let (x, _, log_q) = g.sample_with_noise(&eta).unwrap();
    let dev = flatten(&x) - &mean;
    let dense = -0.5 * 8.0 * (2.0 * std::f64::consts::PI).ln() + 0.5 * j.determinant().ln()
        - 0.5 * (dev.transpose() * &j * &dev)[(0, 0)];
    assert!((log_q - dense).abs() < 1e-9);
    assert!((g.log_density(&x).unwrap() - dense).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn block_solver_agrees_with_dense(seed in 0u64..10_000, t_len in 1usize..=10, d in 1usize..=3) {
        prop_assume!(t_len * d <= 30);
        let mut rng = seeded(seed);
        let (factors, nodes) = random_blocks(&mut rng, t_len, d, 1.0);
        let g = BlockTriGaussian::assemble(&factors, &nodes).unwrap();
        let (j, h) = dense_reference(&factors, &nodes);
        prop_assert!((to_dm(&g.dense_precision()) - &j).amax() < 1e-10);
        let mean = j.clone().lu().solve(&h).unwrap();
        prop_assert!((flatten(&g.mean().unwrap()) - &mean).amax() < 1e-9);
        // The sample deviation solves L^T dev = eta, so J dev = L eta.
        let eta = randn(&mut rng, t_len, d, 1.0);
        let (x, _, _) = g.sample_with_noise(&eta).unwrap();
        let dev = flatten(&x) - &mean;
        let l = j.clone().cholesky().unwrap().l();
        let lhs = l.transpose() * &dev;
        prop_assert!((lhs - flatten(&eta)).amax() < 1e-8);
    }

    #[test]
    fn round_trip_recovers_dynamics(seed in 0u64..10_000, vi in 0usize..3) {
        let variant = [Variant::Linear, Variant::StickyLinear, Variant::Recurrent][vi];
        let m = random_m3(seed, variant, 3, 2, 5);
        let back = to_mixture3(&to_gdm(&m).unwrap()).unwrap();
        for (a, b) in m.dynamics.iter().zip(&back.dynamics) {
            prop_assert!(a.max_abs_diff(b) < 1e-9);
        }
        prop_assert!(m.offsets.max_abs_diff(&back.offsets) < 1e-9);
        prop_assert!(m.latent_prior.max_abs_diff(&back.latent_prior) < 1e-9);
        prop_assert!(m.emission.max_abs_diff(&back.emission) < 1e-9);
    }

    #[test]
    fn noiseless_systems_share_mean_trajectories(seed in 0u64..10_000, vi in 0usize..3) {
        let variant = [Variant::Linear, Variant::StickyLinear, Variant::Recurrent][vi];
        let mut m = random_m3(seed, variant, 3, 2, 5);
        m.emission_noise = Matrix::filled(1, 5, 1e-24);
        let g = to_gdm(&m).unwrap();
        let (z3, x3, _) = m.simulate(&mut seeded(seed), 40).unwrap();
        let (z2, y2) = g.simulate(&mut seeded(seed), 40).unwrap();
        prop_assert!(z3.z.max_abs_diff(&z2.z) < 1e-8);
        for t in 0..40 {
            let prev = if t == 0 { None } else { Some(y2.y.row(t - 1)) };
            let gdm_mean = g.observation_mean(z2.z.row(t), prev).unwrap();
            let m3_mean = m.emission_mean(x3.row(t)).unwrap();
            for j in 0..5 {
                prop_assert!((gdm_mean[j] - m3_mean[j]).abs() < 1e-8, "t={} j={}", t, j);
            }
        }
    }

    #[test]
    fn affine_reparameterization_leaves_observations_unchanged(seed in 0u64..10_000, vi in 0usize..3) {
        let variant = [Variant::Linear, Variant::StickyLinear, Variant::Recurrent][vi];
        let m = random_m3(seed, variant, 3, 2, 4);
        let mut rng = seeded(seed + 1);
        let mmat = Matrix::identity(2).scale(1.5).add(&randn(&mut rng, 2, 2, 0.5)).unwrap();
        prop_assume!(mmat.condition_number() < 1e3);
        let r = m.reparameterize(&mmat).unwrap();
        let (_, xa, ya) = m.simulate(&mut seeded(seed), 30).unwrap();
        let (_, xb, yb) = r.simulate(&mut seeded(seed), 30).unwrap();
        prop_assert!(ya.y.max_abs_diff(&yb.y) < 1e-8);
        prop_assert!(xb.max_abs_diff(&xa.matmul(&mmat.transpose()).unwrap()) < 1e-8);
    }
}

#[test]
fn non_diagonal_reparameterization_of_latent_noise_rejected() {
    let mut m = random_m3(13, Variant::Linear, 2, 2, 3);
    m.latent_noise = Matrix::filled(2, 2, 0.1);
    let rot = Matrix::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
    assert!(m.reparameterize(&rot).is_err());
    let scaled = m.reparameterize(&Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
    assert!((scaled.latent_noise[(0, 0)] - 0.4).abs() < 1e-15);
}

/// Exact `log p(y)` of a linear-Gaussian system with a known state path,
/// from the dense joint covariance of the observations.
fn dense_log_marginal(m: &Mixture3Params, path: &[usize], y: &Matrix) -> f64 {
    let (d, n, t_len) = (m.d(), m.n(), y.rows());
    let diag = |v: &[f64]| DMatrix::from_diagonal(&DVector::from_row_slice(v));
    let mut means: Vec<DVector<f64>> = Vec::new();
    let mut covs: Vec<DMatrix<f64>> = Vec::new();
    // trans[t] = A_{path[t]} (maps x_{t-1} to x_t)
    for t in 0..t_len {
        let k = path[t];
        let q = diag(m.latent_noise.row(k));
        if t == 0 {
            means.push(DVector::from_row_slice(m.latent_prior.row(k)));
            covs.push(q);
        } else {
            let a = to_dm(&m.dynamics[k]);
            means.push(&a * &means[t - 1] + DVector::from_row_slice(m.offsets.row(k)));
            covs.push(&a * &covs[t - 1] * a.transpose() + q);
        }
    }
    // Cross covariances Cov(x_t, x_s) = A_t ... A_{s+1} P_s for t > s.
    let mut sx = DMatrix::zeros(t_len * d, t_len * d);
    for s in 0..t_len {
        let mut block = covs[s].clone();
        sx.view_mut((s * d, s * d), (d, d)).copy_from(&block);
        for t in s + 1..t_len {
            block = to_dm(&m.dynamics[path[t]]) * block;
            sx.view_mut((t * d, s * d), (d, d)).copy_from(&block);
            sx.view_mut((s * d, t * d), (d, d)).copy_from(&block.transpose());
        }
    }
    let c = to_dm(&m.emission);
    let mut cb = DMatrix::zeros(t_len * n, t_len * d);
    let mut mean_y = DVector::zeros(t_len * n);
    for t in 0..t_len {
        cb.view_mut((t * n, t * d), (n, d)).copy_from(&c);
        mean_y.rows_mut(t * n, n).copy_from(&(&c * &means[t]));
    }
    let mut sy = &cb * sx * cb.transpose();
    for t in 0..t_len {
        for j in 0..n {
            sy[(t * n + j, t * n + j)] += m.emission_noise[(0, j)];
        }
    }
    let dev = flatten(y) - mean_y;
    let chol = sy.cholesky().unwrap();
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let quad = dev.dot(&chol.solve(&dev));
    -0.5 * ((t_len * n) as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
}

fn single_state_instance() -> (Mixture3Params, ObsSeries) {
    let mut rng = seeded(14);
    let q = to_dm(&randn(&mut rng, 4, 2, 1.0)).qr().q();
    // Orthogonal columns of different lengths keep C^T C diagonal.
    let c = Matrix::from_nalgebra(&q).matmul(&Matrix::from_rows(&[vec![1.5, 0.0], vec![0.0, 0.8]]).unwrap()).unwrap();
    let m = Mixture3Params {
        prior_logits: Matrix::zeros(1, 1),
        latent_prior: Matrix::row_vector(&[0.5, -1.0]),
        dynamics: vec![Matrix::from_rows(&[vec![0.9, 0.2], vec![-0.2, 0.9]]).unwrap()],
        offsets: Matrix::row_vector(&[0.1, 0.05]),
        emission: c,
        emission_noise: Matrix::filled(1, 4, 0.2),
        latent_noise: Matrix::row_vector(&[0.05, 0.1]),
        transition: TransitionFamily::Linear(LinearTransition {
            weights: Matrix::zeros(1, 2),
            bias: Matrix::zeros(1, 1),
        }),
        temperature: 0.99,
    };
    let (_, _, y) = m.simulate(&mut seeded(15), 10).unwrap();
    (m, y)
}

#[test]
fn single_state_bound_reaches_exact_likelihood() {
    let (m, y) = single_state_instance();
    let exact = dense_log_marginal(&m, &[0; 10], &y.y);

    // Optimal node potentials: the emission term at every step, plus the
    // prior of x_1 at the first.
    let c = to_dm(&m.emission);
    let qy = 0.2;
    let ctc = c.transpose() * &c / qy;
    let mut means = Matrix::zeros(10, 2);
    let mut vars = Matrix::zeros(10, 2);
    for t in 0..10 {
        let cty = c.transpose() * DVector::from_row_slice(y.y.row(t)) / qy;
        for j in 0..2 {
            let mut prec = ctc[(j, j)];
            let mut lin = cty[j];
            if t == 0 {
                prec += 1.0 / m.latent_noise[(0, j)];
                lin += m.latent_prior[(0, j)] / m.latent_noise[(0, j)];
            }
            vars[(t, j)] = 1.0 / prec;
            means[(t, j)] = lin / prec;
        }
    }
    assert!(ctc[(0, 1)].abs() < 1e-12);
    let qz = StatePosterior3 {
        prior_logits: Matrix::zeros(1, 1),
        transition: m.transition.clone(),
    };
    let qx = LatentPosterior3 { node_means: means, node_vars: vars };
    let mut rng = seeded(16);
    for _ in 0..20 {
        let b = elbo3(&m, &qz, &qx, &y, &mut rng).unwrap();
        assert!((b.total() - exact).abs() < 0.1, "{} vs {exact}", b.total());
    }
}

#[test]
fn bound_is_deterministic_and_validates() {
    let (mut m, y) = single_state_instance();
    let qz = StatePosterior3 {
        prior_logits: Matrix::zeros(1, 1),
        transition: m.transition.clone(),
    };
    let qx = LatentPosterior3 {
        node_means: Matrix::zeros(10, 2),
        node_vars: Matrix::filled(10, 2, 1.0),
    };
    let a = elbo3(&m, &qz, &qx, &y, &mut seeded(3)).unwrap();
    let b = elbo3(&m, &qz, &qx, &y, &mut seeded(3)).unwrap();
    assert_eq!(a, b);
    m.latent_noise = Matrix::zeros(1, 2);
    assert!(matches!(elbo3(&m, &qz, &qx, &y, &mut seeded(3)), Err(GdmError::NotPositiveDefinite(_))));
}

#[test]
fn bound_stays_below_enumerated_marginal() {
    // Two states whose switching depends only on the previous state, so the
    // discrete-limit marginal is a sum over the 16 state paths.
    let mut m = random_m3(17, Variant::StickyLinear, 2, 2, 3);
    m.temperature = 0.05;
    m.latent_noise = Matrix::filled(2, 2, 0.05);
    m.prior_logits = Matrix::row_vector(&[0.3, -0.3]);
    let gamma = 0.6;
    let r = [0.5, -0.2];
    m.transition = TransitionFamily::StickyLinear {
        linear: LinearTransition {
            weights: Matrix::zeros(2, 2),
            bias: Matrix::row_vector(&r),
        },
        stickiness: gamma,
    };
    let t_len = 4;
    let (_, _, y) = m.simulate(&mut seeded(18), t_len).unwrap();

    let log_softmax = |l: [f64; 2]| {
        let lse = crate::diffmath::logsumexp(&l);
        [l[0] - lse, l[1] - lse]
    };
    let mut terms = Vec::new();
    for code in 0..16usize {
        let path: Vec<usize> = (0..t_len).map(|t| (code >> t) & 1).collect();
        let mut lp = log_softmax([0.3, -0.3])[path[0]];
        for t in 1..t_len {
            let prev = path[t - 1];
            let l = [
                (1.0 - gamma) * r[0] + gamma * (prev == 0) as u8 as f64,
                (1.0 - gamma) * r[1] + gamma * (prev == 1) as u8 as f64,
            ];
            lp += log_softmax(l)[path[t]];
        }
        terms.push(lp + dense_log_marginal(&m, &path, &y.y));
    }
    let log_marginal = crate::diffmath::logsumexp(&terms);

    let qz = StatePosterior3 {
        prior_logits: m.prior_logits.clone(),
        transition: m.transition.clone(),
    };
    let f = m.emission.pseudo_inverse("C").unwrap();
    let qx = LatentPosterior3 {
        node_means: y.y.matmul(&f.transpose()).unwrap(),
        node_vars: Matrix::filled(t_len, 2, 0.1),
    };
    let mut rng = seeded(19);
    let reps = 4000;
    let vals: Vec<f64> = (0..reps).map(|_| elbo3(&m, &qz, &qx, &y, &mut rng).unwrap().total()).collect();
    let mean = vals.iter().sum::<f64>() / reps as f64;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
    let se = sd / (reps as f64).sqrt();
    assert!(mean <= log_marginal + 3.0 * se, "bound {mean} (se {se}) vs marginal {log_marginal}");
}
