use ntk_ln::activations::{ActivationKind, ActivationName};
use ntk_ln::analytic_ntk::{ntk, relu_arch, ArchSpec};
use ntk_ln::gp_predictor::{fit, fit_default, witness_dataset, Dataset};
use ntk_ln::numerics::{min_eigenvalue_sym, sample_normal, Matrix, RngStream};
use ntk_ln::Error;
use proptest::prelude::*;

fn normals(seed: u64, n: usize) -> Vec<f64> {
    sample_normal(&mut RngStream::new(seed, 31), n)
}

fn random_dataset(seed: u64, n: usize, dim: usize) -> Dataset {
    Dataset::new(Matrix::new(n, dim, normals(seed, n * dim)).unwrap(), normals(seed + 1, n)).unwrap()
}

fn archs(dim: usize) -> Vec<ArchSpec> {
    let mut out = Vec::new();
    for act in [ActivationName::Relu, ActivationName::Gelu, ActivationName::Tanh] {
        for ln in [vec![], vec![0], vec![1], vec![0, 1]] {
            out.push(ArchSpec::new(dim, 2, ActivationKind::new(act).unwrap(), 0.1).unwrap().with_ln(ln).unwrap());
        }
    }
    out
}

#[test]
fn single_point_interpolates() {
    let arch = relu_arch(2, 2, 0.1, &[0]).unwrap();
    let x0 = [0.7, -1.2];
    let d = Dataset::new(Matrix::new(1, 2, x0.to_vec()).unwrap(), vec![2.5]).unwrap();
    let p = fit_default(&arch, &d).unwrap();
    let t = ntk(&arch, &x0, &x0).unwrap();
    assert!((p.alpha()[0] - 2.5 / t).abs() < 1e-9 * (2.5 / t));
    assert!((p.predict_mean(&x0).unwrap() - 2.5).abs() < 1e-8);
}

#[test]
fn zero_targets_predict_zero() {
    let d = random_dataset(1, 6, 3);
    let d = d.with_targets(vec![0.0; 6]).unwrap();
    let p = fit_default(&relu_arch(3, 2, 0.1, &[]).unwrap(), &d).unwrap();
    assert!(p.alpha().iter().all(|a| *a == 0.0));
    assert_eq!(p.predict_mean(&[5.0, 1.0, -2.0]).unwrap(), 0.0);
}

#[test]
fn interpolates_training_targets() {
    let d = random_dataset(2, 12, 3);
    for arch in archs(3) {
        let p = fit_default(&arch, &d).unwrap();
        // Θ α = y
        let resid = p.gram().mat_vec(p.alpha()).unwrap();
        for (r, y) in resid.iter().zip(d.y()) {
            assert!((r - y).abs() < 1e-6 * y.abs().max(1.0));
        }
        for i in 0..d.len() {
            let m = p.predict_mean(d.x().row(i)).unwrap();
            let y = d.y()[i];
            assert!((m - y).abs() < 1e-6 * y.abs().max(1.0), "{:?}: {m} vs {y}", arch.ln_positions);
        }
        let lmin = min_eigenvalue_sym(p.gram()).unwrap();
        assert!((p.lambda_min() - lmin).abs() < 1e-10 * lmin.abs().max(1.0));
        assert!(p.lambda_min() > 0.0);
    }
}

#[test]
fn two_point_fit_matches_direct_inverse() {
    let arch = relu_arch(2, 2, 0.1, &[1]).unwrap();
    let (a, b) = ([1.0, 0.5], [-0.3, 2.0]);
    let d = Dataset::new(Matrix::from_rows(&[a.to_vec(), b.to_vec()]).unwrap(), vec![1.5, -0.4]).unwrap();
    let p = fit(&arch, &d, Some(0.0)).unwrap();
    let (kaa, kab, kbb) = (ntk(&arch, &a, &a).unwrap(), ntk(&arch, &a, &b).unwrap(), ntk(&arch, &b, &b).unwrap());
    let det = kaa * kbb - kab * kab;
    let inv = [[kbb / det, -kab / det], [-kab / det, kaa / det]];
    let alpha = [inv[0][0] * 1.5 + inv[0][1] * -0.4, inv[1][0] * 1.5 + inv[1][1] * -0.4];
    let x = [3.0, -7.0];
    let want = ntk(&arch, &x, &a).unwrap() * alpha[0] + ntk(&arch, &x, &b).unwrap() * alpha[1];
    let got = p.predict_mean(&x).unwrap();
    assert!((got - want).abs() < 1e-10 * want.abs().max(1.0), "{got} vs {want}");
}

#[test]
fn degenerate_and_invalid_data_are_rejected() {
    let x = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![1.0]]).unwrap();
    assert_eq!(Dataset::new(x, vec![0.0, 1.0, 2.0]), Err(Error::DuplicateInputs(0, 2)));
    // two nearly coincident inputs and a jitter above the gap
    let d = Dataset::from_1d(&[1.0, 1.0 + 1e-9], vec![0.0, 1.0]).unwrap();
    let arch = relu_arch(1, 2, 0.1, &[]).unwrap();
    assert!(matches!(fit(&arch, &d, Some(1e-6)), Err(Error::DegenerateGram { .. })));
    assert!(matches!(fit(&arch, &d, Some(0.0)), Err(Error::DegenerateGram { .. }) | Ok(_)));
}

#[test]
fn bounds_need_layer_norm() {
    let d = random_dataset(3, 5, 2);
    let p = fit_default(&relu_arch(2, 2, 0.1, &[]).unwrap(), &d).unwrap();
    assert!(p.variance_constant().is_infinite());
    assert_eq!(p.bound_rkhs(), Err(Error::UnboundedKernel));
    assert_eq!(p.bound_paper(), Err(Error::UnboundedKernel));
}

#[test]
fn rkhs_bound_holds_on_scans() {
    let d = random_dataset(4, 10, 2);
    let circle = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|k| {
                let t = std::f64::consts::TAU * k as f64 / n as f64;
                vec![t.cos(), t.sin()]
            })
            .collect()
    };
    for arch in archs(2).into_iter().filter(ArchSpec::has_ln) {
        let p = fit_default(&arch, &d).unwrap();
        if !p.variance_constant().is_finite() {
            continue;
        }
        // smooth activations go through quadrature at large norms, so they
        // get a coarser scan
        let (dirs, norms): (Vec<Vec<f64>>, Vec<f64>) = if arch.activation.is_exactly_homogeneous() {
            (circle(24), (-8..=24).map(|e| 10f64.powf(e as f64 / 4.0)).collect())
        } else {
            (circle(6), (-2..=6).map(|e| 10f64.powi(e)).collect())
        };
        let r = p.cross_norm_bound_check(&dirs, &norms).unwrap();
        assert!(r.holds(), "{:?} {:?}: {r:?}", arch.activation.name(), arch.ln_positions);
        assert!(r.saturation_gap < 1e-3 * d.max_abs_y(), "{r:?}");
        assert!(r.bound_rkhs <= (p.variance_constant() * d.len() as f64 / p.lambda_min()).sqrt() * d.max_abs_y());
    }
}

#[test]
fn rkhs_bound_is_tight_for_one_point() {
    // LN-first relu: Θ(x, x) is the same constant C for every x, so the
    // single-point interpolant reaches the bound at the training input
    let arch = relu_arch(2, 2, 0.1, &[0]).unwrap();
    let d = Dataset::new(Matrix::new(1, 2, vec![0.3, 0.9]).unwrap(), vec![4.0]).unwrap();
    let p = fit_default(&arch, &d).unwrap();
    let b = p.bound_rkhs().unwrap();
    assert!((b - 4.0).abs() < 1e-8, "{b}");
    assert!((p.predict_mean(&[0.3, 0.9]).unwrap() - 4.0).abs() < 1e-8);
}

#[test]
fn ln_first_recovers_target_at_unit_similarity() {
    let arch = relu_arch(3, 2, 0.1, &[0]).unwrap();
    let d = random_dataset(5, 8, 3);
    let p = fit_default(&arch, &d).unwrap();
    for i in 0..d.len() {
        let m = p.predict_mean(d.x().row(i)).unwrap();
        assert!((m - d.y()[i]).abs() < 1e-6 * d.y()[i].abs().max(1.0));
    }
}

#[test]
fn witness_dataset_explodes_without_layer_norm() {
    let d = witness_dataset(3, 8, &RngStream::new(11, 0)).unwrap();
    let p = fit_default(&relu_arch(3, 2, 0.1, &[]).unwrap(), &d).unwrap();
    let mut best = 0.0f64;
    for i in 0..d.len() {
        let dir = d.x().row(i);
        let means: Vec<f64> = [10.0, 1e2, 1e3, 1e4]
            .iter()
            .map(|l| p.predict_mean(&dir.iter().map(|v| v * l).collect::<Vec<_>>()).unwrap().abs())
            .collect();
        if means[3] > best {
            best = means[3];
        }
        assert!(means.windows(2).all(|w| w[1] > w[0]), "{means:?}");
    }
    assert!(best > 1e3 * d.max_abs_y(), "{best}");

    let ln = fit_default(&relu_arch(3, 2, 0.1, &[0]).unwrap(), &d).unwrap();
    let bound = ln.bound_rkhs().unwrap();
    for l in [1.0, 10.0, 1e2, 1e3, 1e4] {
        for i in 0..d.len() {
            let x: Vec<f64> = d.x().row(i).iter().map(|v| v * l).collect();
            assert!(ln.predict_mean(&x).unwrap().abs() <= bound);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn predictions_are_linear_in_targets(seed in 0u64..1000, ln in 0usize..3) {
        let positions: Vec<usize> = match ln { 0 => vec![], 1 => vec![0], _ => vec![1] };
        let arch = relu_arch(2, 2, 0.1, &positions).unwrap();
        let d = random_dataset(seed, 6, 2);
        let y2 = normals(seed + 7, 6);
        let sum: Vec<f64> = d.y().iter().zip(&y2).map(|(a, b)| a + b).collect();
        let p1 = fit_default(&arch, &d).unwrap();
        let p2 = fit_default(&arch, &d.with_targets(y2).unwrap()).unwrap();
        let p12 = fit_default(&arch, &d.with_targets(sum).unwrap()).unwrap();
        let x = normals(seed + 9, 2);
        let (a, b, c) = (p1.predict_mean(&x).unwrap(), p2.predict_mean(&x).unwrap(), p12.predict_mean(&x).unwrap());
        prop_assert!((a + b - c).abs() < 1e-9 * (a.abs() + b.abs()).max(1.0));
    }
}
