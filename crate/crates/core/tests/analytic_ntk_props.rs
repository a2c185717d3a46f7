use ntk_ln::activations::{catalogue, ActivationKind, ActivationName};
use ntk_ln::analytic_ntk::{
    limit_correlation, limit_ntk_ratio, ln_first_kernel, ntk, ntk_gram, ntk_state, relu_arch, soft_cosine,
    variance_curve, variance_sup, ArchSpec, StepMethod,
};
use ntk_ln::Error;
use ntk_ln::numerics::{min_eigenvalue_sym, sample_normal, Matrix, RngStream};
use proptest::prelude::*;

fn normals(seed: u64, n: usize) -> Vec<f64> {
    sample_normal(&mut RngStream::new(seed, 17), n)
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn corpus() -> Vec<ArchSpec> {
    let mut out = Vec::new();
    for act in catalogue() {
        for ln in [vec![], vec![0], vec![1], vec![0, 1]] {
            out.push(ArchSpec::new(3, 2, act, 0.1).unwrap().with_ln(ln).unwrap());
        }
    }
    out
}

#[test]
fn grams_are_positive_semidefinite() {
    let xs = Matrix::new(20, 3, normals(1, 60)).unwrap();
    for arch in corpus() {
        let g = ntk_gram(&arch, &xs).unwrap();
        let lmin = min_eigenvalue_sym(&g).unwrap();
        assert!(lmin >= -1e-8 * g.trace() / 20.0, "{:?} {:?}: {lmin}", arch.activation.name(), arch.ln_positions);
        assert_eq!(g.asymmetry(), 0.0);
    }
}

#[test]
fn gram_edge_cases() {
    let arch = relu_arch(2, 2, 0.1, &[0]).unwrap();
    let one = Matrix::from_rows(&[vec![0.3, -1.0]]).unwrap();
    let g = ntk_gram(&arch, &one).unwrap();
    assert_eq!(g.rows(), 1);
    assert_eq!(g[(0, 0)], ntk(&arch, &[0.3, -1.0], &[0.3, -1.0]).unwrap());
    let dup = Matrix::from_rows(&[vec![0.3, -1.0], vec![0.3, -1.0]]).unwrap();
    let g = ntk_gram(&arch, &dup).unwrap();
    assert!(min_eigenvalue_sym(&g).unwrap().abs() < 1e-12 * g.trace());
}

#[test]
fn ln_kernels_obey_cauchy_schwarz_with_bounded_variance() {
    let pts: Vec<Vec<f64>> = (0..12)
        .map(|i| {
            let s = 10f64.powi(i % 7 - 2);
            normals(100 + i as u64, 3).into_iter().map(|v| v * s).collect()
        })
        .collect();
    for arch in corpus().into_iter().filter(ArchSpec::has_ln) {
        let c = match variance_sup(&arch) {
            Ok(c) => c,
            Err(Error::UnboundedKernel) => {
                // only saturating activations with no layer norm on the input
                // map escape the bound: the first-layer weight gradient grows
                // with the input and no later normalisation sees it
                assert_eq!(arch.activation.homogeneity_degree(), 0.0);
                assert!(!arch.ln_positions.contains(&0));
                continue;
            }
            Err(e) => panic!("{e}"),
        };
        for p in &pts {
            for q in &pts {
                let k = ntk(&arch, p, q).unwrap();
                let bound = (ntk(&arch, p, p).unwrap() * ntk(&arch, q, q).unwrap()).sqrt();
                assert!(k.abs() <= bound * (1.0 + 1e-12) + 1e-15);
                assert!(bound <= c * (1.0 + 1e-6), "{:?}: {bound} > {c}", arch.ln_positions);
            }
        }
    }
}

#[test]
fn saturating_activation_with_late_norm_grows_linearly() {
    for act in [ActivationName::Tanh, ActivationName::Sigmoid] {
        let arch = ArchSpec::new(3, 2, ActivationKind::new(act).unwrap(), 0.1).unwrap().with_ln([1]).unwrap();
        let d = unit(vec![1.0, 2.0, -0.5]);
        let v = variance_curve(&arch, &d, &[1e4, 1e5, 1e6]).unwrap();
        for w in v.windows(2) {
            let ratio = w[1] / w[0];
            assert!((ratio - 10.0).abs() < 0.1, "{act:?}: {ratio}");
        }
        assert_eq!(variance_sup(&arch), Err(Error::UnboundedKernel));
        // normalising the first linear map restores the bound
        let first = arch.clone().with_ln([0, 1]).unwrap();
        assert!(variance_sup(&first).unwrap().is_finite());
    }
}

#[test]
fn ln_first_depends_only_on_soft_cosine() {
    let arch = ArchSpec::new(4, 2, ActivationKind::relu(), 0.2).unwrap().with_ln([0]).unwrap();
    for i in 0..100u64 {
        let x = normals(i, 4);
        let xp = normals(1000 + i, 4);
        // rotate both by the same Givens rotation and rescale jointly by a
        // norm-preserving map: soft-cosine is unchanged
        let angle = 0.37 * i as f64;
        let (s, c) = angle.sin_cos();
        let rot = |v: &[f64]| vec![c * v[0] - s * v[2], v[1], s * v[0] + c * v[2], v[3]];
        let (u, up) = (rot(&x), rot(&xp));
        let s1 = soft_cosine(&x, &xp, 0.04).unwrap();
        let s2 = soft_cosine(&u, &up, 0.04).unwrap();
        assert!((s1 - s2).abs() < 1e-14);
        let a = ln_first_kernel(&arch, &x, &xp).unwrap();
        let b = ln_first_kernel(&arch, &u, &up).unwrap();
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn ln_first_variance_is_constant() {
    let arch = ArchSpec::new(3, 2, ActivationKind::relu(), 0.1).unwrap().with_ln([0]).unwrap();
    let mut vals = Vec::new();
    for i in 0..50u64 {
        let d = unit(normals(300 + i, 3));
        let norms: Vec<f64> = (-2..=6).map(|e| 10f64.powi(e)).collect();
        vals.extend(variance_curve(&arch, &d, &norms).unwrap());
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
    assert!(sd / mean < 1e-9, "{}", sd / mean);
    // and the kernel is scale free in each argument when sigma_b = 0
    let free = ArchSpec::bias_free(3, 2, ActivationKind::relu()).unwrap().with_ln([0]).unwrap();
    let x = normals(5, 3);
    let xp = normals(6, 3);
    let scaled: Vec<f64> = x.iter().map(|v| v * 37.0).collect();
    let scaled_p: Vec<f64> = xp.iter().map(|v| v * 0.004).collect();
    let a = ln_first_kernel(&free, &x, &xp).unwrap();
    let b = ln_first_kernel(&free, &scaled, &scaled_p).unwrap();
    assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
}

/// Bias-free LN-first ReLU NTK at depth 2 as a function of the input cosine,
/// written out by hand from the arc-cosine formulas.
fn relu_ln_first_oracle(r0: f64) -> f64 {
    use std::f64::consts::PI;
    let k = |r: f64| ((1.0 - r * r).max(0.0).sqrt() + r * (PI - r.acos())) / PI;
    let kd = |r: f64| (PI - r.acos()) / PI;
    let r1 = k(r0);
    r0 * kd(r0) * kd(r1) + r1 * kd(r1) + k(r1)
}

#[test]
fn antipodal_pair_reaches_similarity_endpoint() {
    let x = [1.0, 0.0];
    // the antipodal value tends to the bias-free endpoint as sigma_b shrinks;
    // the approach is like sqrt(1 - s²) ~ sigma_b
    let mut last_gap = f64::INFINITY;
    for sigma_b in [1e-2, 1e-4, 1e-6] {
        let arch = ArchSpec::new(2, 2, ActivationKind::relu(), sigma_b).unwrap().with_ln([0]).unwrap();
        let gap = (ln_first_kernel(&arch, &x, &[-1.0, 0.0]).unwrap() - 1.0 / std::f64::consts::PI).abs();
        assert!(gap < 2.0 * sigma_b && gap < last_gap, "sigma_b {sigma_b}: {gap}");
        last_gap = gap;
    }
    let arch = ArchSpec::new(2, 2, ActivationKind::relu(), 1e-4).unwrap().with_ln([0]).unwrap();
    let anti = ln_first_kernel(&arch, &x, &[-1.0, 0.0]).unwrap();
    let mut curve = Vec::new();
    for i in 0..=400 {
        let phi = std::f64::consts::PI * i as f64 / 400.0;
        let xp = [phi.cos(), phi.sin()];
        let v = ln_first_kernel(&arch, &x, &xp).unwrap();
        let s = soft_cosine(&x, &xp, arch.sigma_b2()).unwrap();
        // bias enters the later layers at order sigma_b² = 1e-8
        assert!((v - relu_ln_first_oracle(s)).abs() < 1e-6, "phi {phi}: {v}");
        curve.push(v);
    }
    // the curve is continuous into the antipodal point, but its minimum sits
    // inside the similarity range: the ReLU NTK is not monotone in the cosine
    assert!((curve[400] - anti).abs() < 1e-12);
    let (imin, vmin) = curve.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    assert!(imin < 400 && vmin < anti - 0.05, "{imin} {vmin} {anti}");
}

#[test]
fn trajectories_stay_in_range() {
    for arch in corpus() {
        for i in 0..5u64 {
            let st = ntk_state(&arch, &normals(i, 3), &normals(50 + i, 3), StepMethod::Auto).unwrap();
            assert_eq!(st.rho_trajectory().len(), 2);
            assert!(st.rho_trajectory().iter().all(|r| (-1.0..=1.0).contains(r)));
        }
    }
}

#[test]
fn forced_quadrature_matches_closed_form() {
    for name in [ActivationName::Relu, ActivationName::LeakyRelu(0.1), ActivationName::Prelu(0.3)] {
        let act = ActivationKind::new(name).unwrap();
        for ln in [vec![], vec![0], vec![1]] {
            let arch = ArchSpec::new(3, 2, act, 0.3).unwrap().with_ln(ln).unwrap();
            for i in 0..6u64 {
                let x = normals(i, 3);
                let xp = normals(20 + i, 3);
                let a = ntk_state(&arch, &x, &xp, StepMethod::Auto).unwrap().theta();
                let b = ntk_state(&arch, &x, &xp, StepMethod::Quadrature).unwrap().theta();
                assert!((a - b).abs() < 1e-7 * a.abs().max(1.0), "{name:?}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn relu_diagonal_lower_bound() {
    for depth in 1..=4 {
        let arch = relu_arch(2, depth, 0.3, &[]).unwrap();
        for i in 0..20 {
            let x: Vec<f64> = normals(i, 2).iter().map(|v| v * 0.01 * i as f64).collect();
            assert!(ntk(&arch, &x, &x).unwrap() >= 0.09 * (depth as f64 + 1.0) * (1.0 - 1e-12));
        }
    }
}

#[test]
fn homogeneous_limit_ratio() {
    let arch = relu_arch(2, 2, 0.1, &[]).unwrap();
    let (x, xp) = ([1.0, 0.2], [0.6, 0.8]);
    let lambdas = [1e2, 1e3, 1e4, 1e5, 1e6, 1e8];
    let r = limit_ntk_ratio(&arch, &x, &xp, &lambdas).unwrap();
    let n = r.len();
    assert!(((r[n - 1] - r[n - 2]) / r[n - 1]).abs() < 1e-3);
    // Richardson: the bias enters at relative order 1/λ², so the limit is
    // r(λ) + (r(λ) - r(λ/10)) / 99
    let rich = r[4] + (r[4] - r[3]) / 99.0;
    assert!(((r[4] - rich) / rich).abs() < 1e-3);
    assert!(r[n - 1] > 0.0);

    let lin = ArchSpec::bias_free(2, 3, ActivationKind::new(ActivationName::Identity).unwrap()).unwrap();
    let r = limit_ntk_ratio(&lin, &x, &xp, &[1.0, 1e3, 1e150]).unwrap();
    assert!(r.iter().all(|v| (v - r[0]).abs() <= 1e-12 * r[0].abs()));
    assert!(limit_ntk_ratio(&relu_arch(2, 2, 0.1, &[0]).unwrap(), &x, &xp, &[1.0]).is_err());
}

#[test]
fn huge_norms_do_not_overflow() {
    let arch = relu_arch(2, 4, 0.1, &[]).unwrap();
    let r = limit_ntk_ratio(&arch, &[1.0, 0.0], &[0.8, 0.6], &[1e8, 1e200]).unwrap();
    assert!(r.iter().all(|v| v.is_finite() && *v > 0.0));
    assert!((r[0] - r[1]).abs() < 1e-6 * r[1]);
    let ln = relu_arch(2, 4, 0.1, &[1]).unwrap();
    let v = variance_curve(&ln, &[0.6, 0.8], &[1e8, 1e250]).unwrap();
    assert!((v[0] - v[1]).abs() < 1e-9 * v[1]);
}

#[test]
fn variance_curve_shapes() {
    let d = [0.6, 0.8];
    for ln in [vec![0], vec![1], vec![0, 1]] {
        let arch = relu_arch(2, 2, 0.1, &ln).unwrap();
        let v = variance_curve(&arch, &d, &[1e4, 1e6]).unwrap();
        assert!(((v[1] - v[0]) / v[1]).abs() < 0.01, "{ln:?}: {v:?}");
    }
    let plain = relu_arch(2, 2, 0.1, &[]).unwrap();
    let v = variance_curve(&plain, &d, &[5.0, 25.0]).unwrap();
    assert!((v[1] / v[0] / 25.0 - 1.0).abs() < 0.05);
    let tiny: Vec<f64> = [[1.0, 0.0], [0.0, 1.0], [-0.6, 0.8]]
        .iter()
        .map(|d| variance_curve(&plain, d, &[1e-9]).unwrap()[0])
        .collect();
    assert!((tiny[0] - tiny[1]).abs() < 1e-12 && (tiny[0] - tiny[2]).abs() < 1e-12);
    let origin = ntk(&plain, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
    assert!((tiny[0] - origin).abs() < 1e-12);
}

#[test]
fn limit_correlation_examples() {
    let arch = relu_arch(2, 3, 0.1, &[]).unwrap();
    let same = limit_correlation(&arch, &[0.6, 0.8], &[0.6, 0.8]).unwrap();
    assert!(same.iter().all(|r| (r - 1.0).abs() < 1e-12));
    let orth = limit_correlation(&arch, &[1.0, 0.0], &[0.0, 1.0]).unwrap();
    assert!((orth[1] - 1.0 / std::f64::consts::PI).abs() < 1e-12);
    let zero = limit_correlation(&arch, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
    assert!(zero.iter().all(|r| *r == 1.0));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn kernel_is_symmetric(seed in 0u64..10_000, idx in 0usize..32, scale in -3i32..4) {
        let arch = &corpus()[idx];
        let s = 10f64.powi(scale);
        let x: Vec<f64> = normals(seed, 3).iter().map(|v| v * s).collect();
        let xp = normals(seed + 1, 3);
        let a = ntk(arch, &x, &xp).unwrap();
        let b = ntk(arch, &xp, &x).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn positive_cosines_stay_positive(c in 0.001f64..1.0, depth in 1usize..6, idx in 0usize..8) {
        let act = catalogue()[idx];
        let arch = ArchSpec::new(2, depth, act, 0.1).unwrap();
        let traj = limit_correlation(&arch, &[1.0, 0.0], &[c, (1.0 - c * c).sqrt()]).unwrap();
        prop_assert!(traj.iter().all(|r| *r > 0.0));
    }
}
