use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use coulomb_core::energy::Configuration;
use coulomb_core::equilibrium::{circular_law, EquilibriumData};
use coulomb_core::field::harmonic::Region;
use coulomb_core::field::{Grid2D, LevelSet};
use coulomb_core::fluctuations::*;
use coulomb_core::potential::QuadraticBump;
use coulomb_core::rng;
use coulomb_core::sampler::ginibre_batch;
use coulomb_core::stats;
use coulomb_core::test_function::{boundary_library, by_name, Regularity, Shape, TestFunction};
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

fn eq() -> &'static EquilibriumData {
    static EQ: OnceLock<EquilibriumData> = OnceLock::new();
    EQ.get_or_init(|| circular_law(Grid2D::centered(3.0, 384)))
}

fn meta() -> BatchMeta {
    BatchMeta { source: "synthetic".into(), seed: 0, n: 0, beta: 2.0, xi: "none".into() }
}

fn batch(values: Vec<f64>) -> FluctuationBatch {
    FluctuationBatch::new(values, meta()).unwrap()
}

fn normals(m: f64, v: f64, count: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, 0);
    let d = Normal::new(m, v.sqrt()).unwrap();
    (0..count).map(|_| d.sample(&mut r)).collect()
}

fn uniform_disk(n: usize, r: &mut rng::Rng) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| {
            let (u, t): (f64, f64) = (r.gen(), r.gen::<f64>() * 2.0 * PI);
            [u.sqrt() * t.cos(), u.sqrt() * t.sin()]
        })
        .collect()
}

/// `int_disk Delta xi` as the flux of `grad xi` through the unit circle.
fn circle_flux(xi: &TestFunction) -> f64 {
    let m = 4096;
    (0..m)
        .map(|s| {
            let t = 2.0 * PI * s as f64 / m as f64;
            let g = xi.gradient([t.cos(), t.sin()]);
            g[0] * t.cos() + g[1] * t.sin()
        })
        .sum::<f64>()
        * 2.0
        * PI
        / m as f64
}

#[test]
fn zero_test_function_gives_zero() {
    let x = Configuration::new(vec![[0.1, 0.2], [-0.4, 0.3]]).unwrap();
    assert_eq!(fluct(&x, &TestFunction::zero(), eq()), 0.0);
}

#[test]
fn single_point_hand_check() {
    let xi = by_name("bump-offset").unwrap();
    // int xi dmu0 = (1/pi) int xi, with xi inside the disk
    let mass = integrate_on_support(&xi, 1024, |p| xi.value(p)) / PI;
    let x = Configuration::new(vec![xi.center]).unwrap();
    assert!((fluct(&x, &xi, eq()) - (1.0 - mass)).abs() < 1e-3);
}

#[test]
fn iid_control_is_centered_with_order_n_variance() {
    let xi = by_name("bump-center").unwrap();
    let stat = LinearStatistic::new(&xi, eq());
    let n = 256;
    let mut r = rng::stream(11, 0);
    let v: Vec<f64> = (0..2000).map(|_| stat.eval_points(&uniform_disk(n, &mut r))).collect();
    let (m, se) = (stats::mean(&v), stats::std_error(&v));
    assert!(m.abs() < 3.0 * se + 1e-2 * se, "iid mean {m} se {se}");
    // variance of a sum of N iid terms: N Var(xi(U))
    let e1 = stat.expectation;
    let e2 = integrate_on_support(&xi, 1024, |p| xi.value(p).powi(2)) / PI;
    let var_iid = n as f64 * (e2 - e1 * e1);
    let ratio = stats::variance(&v) / var_iid;
    assert!((ratio - 1.0).abs() < 0.1, "iid variance ratio {ratio}");
    assert!(var_iid > 20.0, "iid variance should be O(N), got {var_iid}");
}

#[test]
fn interior_mean_vanishes_for_the_quadratic_potential() {
    for name in ["bump-center", "bump-offset", "bump-small"] {
        let xi = by_name(name).unwrap();
        assert_eq!(classify(&xi, eq()), Case::Interior);
        for beta in [0.5, 1.0, 2.0, 3.0] {
            let m = predicted_mean(&xi, eq(), beta, Case::Interior).unwrap();
            assert!(m.abs() < 1e-8, "{name} beta={beta}: {m}");
        }
    }
}

#[test]
fn boundary_mean_at_beta_two_is_the_divergence_flux() {
    for xi in boundary_library().into_iter().chain([by_name("bump-edge").unwrap()]) {
        assert_eq!(classify(&xi, eq()), Case::Boundary, "{}", xi.name);
        let m = predicted_mean(&xi, eq(), 2.0, Case::Boundary).unwrap();
        let oracle = circle_flux(&xi) / (8.0 * PI);
        assert!((m - oracle).abs() < 2e-3 * (1.0 + oracle.abs()), "{}: {m} vs {oracle}", xi.name);
    }
    // the edge bump has a genuinely nonzero mean
    let xi = by_name("bump-edge").unwrap();
    assert!(circle_flux(&xi).abs() > 0.5);
}

#[test]
fn mean_vanishes_at_beta_four_and_scales_with_the_coefficient() {
    let xi = by_name("bump-edge").unwrap();
    let m4 = predicted_mean(&xi, eq(), 4.0, Case::Boundary).unwrap();
    assert_eq!(m4, 0.0);
    let m2 = predicted_mean(&xi, eq(), 2.0, Case::Boundary).unwrap();
    let m8 = predicted_mean(&xi, eq(), 8.0, Case::Boundary).unwrap();
    let coef = |b: f64| 1.0 / b - 0.25;
    assert!((m8 / m2 - coef(8.0) / coef(2.0)).abs() < 1e-12);
    assert!(m8 * m2 < 0.0);
    assert!(predicted_mean(&xi, eq(), 0.0, Case::Boundary).is_err());
}

#[test]
fn mean_requires_positive_laplacian_on_sigma() {
    let mut bad = eq().clone();
    bad.potential = Arc::new(QuadraticBump { eps: 10.0, center: [0.0, 0.0], radius: 0.5 });
    let xi = by_name("bump-edge").unwrap();
    assert!(predicted_mean(&xi, &bad, 2.0, Case::Boundary).is_err());
    // the mesoscopic mean is zero by construction and does not look at V
    assert_eq!(predicted_mean(&xi, &bad, 2.0, Case::Mesoscopic).unwrap(), 0.0);
}

#[test]
fn variance_is_quadratic_in_xi() {
    let xi = by_name("bump-offset").unwrap();
    let v1 = predicted_variance(&xi, eq(), 2.0, Case::Interior).unwrap();
    let v2 = predicted_variance(&xi.scaled(2.0), eq(), 2.0, Case::Interior).unwrap();
    assert!((v2 / v1 - 4.0).abs() < 1e-12);
    assert!(v1 > 0.0);
    assert_eq!(predicted_variance(&TestFunction::zero(), eq(), 2.0, Case::Interior).unwrap(), 0.0);
}

#[test]
fn boundary_variance_matches_the_fourier_form() {
    for xi in boundary_library() {
        let v = predicted_variance(&xi, eq(), 2.0, Case::Boundary).unwrap();
        let rv = rider_virag_variance(&xi);
        assert!((v / rv - 1.0).abs() < 1e-2, "{}: {v} vs {rv}", xi.name);
    }
}

#[test]
fn dipole_fourier_form_closed_value() {
    // xi = x on the closed disk: (1/4pi) pi + (1/2)(2 * 1/4) = 1/2
    let xi = boundary_library().into_iter().find(|t| t.name == "dipole").unwrap();
    assert!((rider_virag_variance(&xi) - 0.5).abs() < 1e-6);
}

#[test]
fn mesoscopic_variance_is_scale_free() {
    let meso = by_name("meso").unwrap();
    let a = predicted_variance(&meso.with_scale(0.25), eq(), 2.0, Case::Mesoscopic).unwrap();
    let b = predicted_variance(&meso.with_scale(0.125), eq(), 2.0, Case::Mesoscopic).unwrap();
    assert!((a / b - 1.0).abs() < 2e-2, "{a} vs {b}");
    assert_eq!(classify(&meso, eq()), Case::Mesoscopic);
    assert!(mesoscopic_margin_ok(&meso.with_scale(0.125), eq()));
    assert!(!mesoscopic_margin_ok(&meso.with_scale(0.5), eq()));
}

#[test]
fn covariance_examples() {
    let a = by_name("bump-offset").unwrap();
    let b = by_name("bump-small").unwrap();
    let va = predicted_variance(&a, eq(), 2.0, Case::Interior).unwrap();
    assert_eq!(predicted_covariance(&a, &a, eq(), 2.0).unwrap(), va);
    // supports of radius 0.4 and 0.3 at distance ~0.86 are disjoint
    assert!(predicted_covariance(&a, &b, eq(), 2.0).unwrap().abs() < 1e-12);
    let c = by_name("bump-center").unwrap();
    let ab = predicted_covariance(&a, &c, eq(), 2.0).unwrap();
    let ba = predicted_covariance(&c, &a, eq(), 2.0).unwrap();
    assert!((ab - ba).abs() < 1e-9 * ab.abs().max(1e-12));
}

fn two_disks(n: usize) -> Region {
    Region::from_level(LevelSet::from_fn(Grid2D::centered(3.0, n), |p| {
        let d1 = (p[0] + 1.0).hypot(p[1]) - 0.6;
        let d2 = (p[0] - 1.0).hypot(p[1]) - 0.6;
        d1.min(d2)
    }))
}

#[test]
fn compatibility_on_one_component() {
    for xi in [by_name("bump-center").unwrap(), by_name("bump-edge").unwrap()] {
        let r = check_compatibility(&xi, eq()).unwrap();
        assert_eq!(r.fluxes.len(), 1);
        assert!(r.satisfied(5e-2), "{}: {:?} scale {}", xi.name, r.fluxes, r.scale);
    }
}

#[test]
fn compatibility_on_two_components() {
    let region = two_disks(256);
    let inside = TestFunction::bump([-1.0, 0.1], 0.3, 1.0);
    let r = check_compatibility_region(&inside, &region).unwrap();
    assert_eq!(r.fluxes.len(), 2);
    assert!(r.satisfied(5e-2), "{:?} scale {}", r.fluxes, r.scale);

    // equal to 1 on the whole left disk, 0 near the right one
    let cover = TestFunction::new(
        "cover",
        Shape::PolyCutoff { terms: vec![(0, 0, 1.0)], inner: 0.75, outer: 1.3 },
        1.0,
        [-1.0, 0.0],
        1.0,
        Regularity::C31Boundary,
    )
    .unwrap();
    let r = check_compatibility_region(&cover, &region).unwrap();
    assert!(!r.satisfied(5e-2), "{:?} scale {}", r.fluxes, r.scale);
    // the extension is 1/2 + tau/(2 tau0) in bipolar coordinates, tau0 =
    // acosh(d/a) for disks of radius a at distance d from the midpoint: the
    // covered disk loses flux pi/tau0 and the other one gains it
    let oracle = PI / (1.0f64 / 0.6).acosh();
    assert!((r.fluxes[0] + oracle).abs() < 1e-2 * oracle, "{:?} vs {oracle}", r.fluxes);
    assert!((r.fluxes[1] - oracle).abs() < 1e-2 * oracle, "{:?} vs {oracle}", r.fluxes);
}

#[test]
fn laplace_examples() {
    let b = batch(normals(0.3, 0.5, 20_000, 5));
    assert_eq!(estimate_laplace(&b, 0.0).value, 0.0);
    let l = estimate_laplace(&b, 1.0);
    let oracle = 0.3 + 0.5 / 2.0;
    assert!((l.value - oracle).abs() < 3.0 * l.se, "{} vs {oracle} se {}", l.value, l.se);
    assert!(l.effective_size > 30.0);
    // L_{-X}(tau) = L_X(-tau)
    let n = b.negated();
    assert_eq!(estimate_laplace(&n, 0.7).value, estimate_laplace(&b, -0.7).value);
    // max-shift keeps huge arguments finite
    let big = batch(vec![1e4, 2e4, 3e4]);
    assert!(estimate_laplace(&big, 1.0).value.is_finite());
}

#[test]
fn gaussianity_calibration_and_power() {
    let pred = CltPrediction { mean: 0.0, variance: 1.0, case: Case::Interior };
    let rejections = (0..100u64)
        .filter(|&s| gaussianity_test(&batch(normals(0.0, 1.0, 10_000, 100 + s)), &pred).unwrap().p_value < 0.01)
        .count();
    assert!(rejections <= 5, "{rejections} rejections");
    let mut r = rng::stream(3, 0);
    let uniform: Vec<f64> = (0..10_000).map(|_| (2.0 * r.gen::<f64>() - 1.0) * 3f64.sqrt()).collect();
    let rep = gaussianity_test(&batch(uniform), &pred).unwrap();
    assert!(rep.p_value < 1e-6, "uniform p {}", rep.p_value);
    assert!(rep.excess_kurtosis < -1.0);
    assert!(gaussianity_test(&batch(vec![1.0; 300]), &pred).is_err());
    assert!(gaussianity_test(&batch(vec![1.0, 2.0]), &pred).is_err());
    let table = ecdf_table(&batch(normals(0.0, 1.0, 500, 1)), &pred);
    assert_eq!(table.len(), 500);
    assert!(table.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 < w[1].1));
}

#[test]
fn moderate_deviation_on_gaussian_data() {
    let v = 0.8;
    let b = batch(normals(0.0, v, 20_000, 9));
    let taus: Vec<f64> = (-4..=4).map(|k| 0.25 * k as f64).collect();
    let rep = moderate_deviation_check(&b, &taus).unwrap();
    assert!((rep.c_fit / (v / 2.0) - 1.0).abs() < 0.2, "c_fit {}", rep.c_fit);
    assert!(rep.convex);
    assert!(rep.bound_holds);
    assert!(rep.tails_consistent);
    assert!(moderate_deviation_check(&b, &[0.0, 1.0]).is_err());
}

#[test]
fn ginibre_joint_covariance() {
    let a = by_name("bump-offset").unwrap();
    let c = by_name("bump-center").unwrap();
    let (sa, sc) = (LinearStatistic::new(&a, eq()), LinearStatistic::new(&c, eq()));
    let xs = ginibre_batch(64, 3000, 21).unwrap();
    let va: Vec<f64> = xs.iter().map(|x| sa.eval(x)).collect();
    let vc: Vec<f64> = xs.iter().map(|x| sc.eval(x)).collect();
    let cov = stats::covariance(&va, &vc);
    let se = stats::covariance_se(&va, &vc);
    let pred = predicted_covariance(&a, &c, eq(), 2.0).unwrap();
    assert!((cov - pred).abs() < 3.0 * se, "cov {cov} pred {pred} se {se}");
}

#[test]
fn gff_pairing_reproduces_fluct() {
    let xi = by_name("bump-center").unwrap();
    let g = Grid2D::centered(1.5, 384);
    let sd = predicted_variance(&xi, eq(), 2.0, Case::Interior).unwrap().sqrt();
    for x in ginibre_batch(64, 4, 8).unwrap() {
        let (field, flagged) = gff_field(&x.points, eq(), g);
        assert!(flagged > 0);
        let p = gff_pairing(&xi, &field);
        let f = fluct(&x, &xi, eq());
        assert!((p - f).abs() <= 2e-2 * f.abs().max(sd), "pairing {p} fluct {f}");
    }
}

#[test]
fn gff_of_empty_configuration_is_zero() {
    let g = Grid2D::centered(1.5, 64);
    let (field, flagged) = gff_field(&[], eq(), g);
    assert_eq!(flagged, 0);
    assert_eq!(field.max_abs(), 0.0);
}

/// Centres of the `2/m` lattice cells inside the unit disk, rescaled so that
/// `count * spacing^2 = pi` (one charge per cell of `N mu0`).
fn balanced_lattice(m: usize) -> Vec<[f64; 2]> {
    let h = 2.0 / m as f64;
    let mut pts = Vec::new();
    for j in 0..m {
        for i in 0..m {
            let p = [-1.0 + (i as f64 + 0.5) * h, -1.0 + (j as f64 + 0.5) * h];
            if p[0].hypot(p[1]) < 1.0 {
                pts.push(p);
            }
        }
    }
    let s = (PI / pts.len() as f64).sqrt() / h;
    pts.iter().map(|p| [p[0] * s, p[1] * s]).collect()
}

#[test]
fn gff_of_a_balanced_lattice_is_small() {
    // Point charges against a uniform cell leave a periodic remainder whose
    // cell mean is 1/24 at every scale, so the field tends to that bounded
    // profile rather than to 0; the pairing with smooth xi does tend to 0.
    let xi = by_name("bump-center").unwrap();
    let g = Grid2D::centered(0.5, 64);
    let run = |m: usize| {
        let x = balanced_lattice(m);
        let (field, _) = gff_field(&x, eq(), g);
        let f = fluct(&Configuration::new(x).unwrap(), &xi, eq());
        (field.max_abs(), f.abs())
    };
    let (coarse, f_coarse) = run(16);
    let (fine, f_fine) = run(64);
    assert!(fine < 0.5 * coarse, "{coarse} -> {fine}");
    assert!(fine < 0.05, "{fine}");
    assert!(f_fine < 1e-2 * f_coarse, "{f_coarse} -> {f_fine}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, .. ProptestConfig::default() })]

    #[test]
    fn fluct_is_linear_in_xi(a in -3.0..3.0f64, b in -3.0..3.0f64, seed in 0u64..1000) {
        let shape = |t: Vec<(u32, u32, f64)>| Shape::PolyCutoff { terms: t, inner: 0.3, outer: 0.7 };
        let mk = |t| TestFunction::new("p", shape(t), 1.0, [0.1, 0.0], 1.0, Regularity::C21Interior).unwrap();
        let x1 = mk(vec![(2, 0, 1.0)]);
        let x2 = mk(vec![(0, 1, 1.0), (1, 1, 0.5)]);
        let sum = mk(vec![(2, 0, a), (0, 1, b), (1, 1, 0.5 * b)]);
        let mut r = rng::stream(seed, 0);
        let pts = uniform_disk(40, &mut r);
        let x = Configuration::new(pts).unwrap();
        let lhs = fluct(&x, &sum, eq());
        let rhs = a * fluct(&x, &x1, eq()) + b * fluct(&x, &x2, eq());
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn variance_is_nonnegative(amp in -5.0..5.0f64, r in 0.1..0.6f64, cx in -0.3..0.3f64) {
        let xi = TestFunction::bump([cx, 0.0], r, amp);
        let v = predicted_variance(&xi, eq(), 2.0, Case::Interior).unwrap();
        prop_assert!(v >= 0.0);
        prop_assert_eq!(v == 0.0, amp == 0.0);
    }

    #[test]
    fn laplace_of_a_shift(shift in -2.0..2.0f64, tau in -1.5..1.5f64) {
        let base = normals(0.0, 1.0, 400, 77);
        let b = batch(base.clone());
        let s = batch(base.iter().map(|v| v + shift).collect());
        let d = estimate_laplace(&s, tau).value - estimate_laplace(&b, tau).value;
        prop_assert!((d - tau * shift).abs() < 1e-9);
    }
}

#[test]
fn batch_csv_roundtrip() {
    let dir = std::env::temp_dir().join(format!("fluct-batch-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("b.csv");
    let b = FluctuationBatch::new(vec![0.1, -2.5e-17, 3.0], BatchMeta { seed: 4, n: 64, ..meta() }).unwrap();
    b.write_csv(&path).unwrap();
    let back = FluctuationBatch::read_csv(&path).unwrap();
    assert_eq!(back, b);
    assert!(FluctuationBatch::new(vec![], meta()).is_err());
    assert!(FluctuationBatch::new(vec![f64::NAN], meta()).is_err());
    std::fs::remove_dir_all(&dir).unwrap();
}
