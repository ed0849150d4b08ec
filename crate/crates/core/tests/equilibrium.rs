use std::f64::consts::PI;
use std::sync::Arc;

use coulomb_core::equilibrium::*;
use coulomb_core::field::{Grid2D, Measure2D, ScalarField2D};
use coulomb_core::potential::{Potential, PotentialSpec, Quadratic, QuadraticBump};
use coulomb_core::test_function::{library, Shape, TestFunction, Regularity};

fn solve(v: Arc<dyn Potential>, n: usize, half: f64) -> EquilibriumData {
    solve_equilibrium(v, Grid2D::centered(half, n), &SolveOptions::default()).unwrap()
}

/// Largest distance from the origin of a droplet cell centre.
fn support_radius(eq: &EquilibriumData) -> f64 {
    let g = eq.grid();
    (0..g.len())
        .filter(|&k| eq.sigma_mask().cells[k])
        .map(|k| {
            let p = g.center_of(k);
            p[0].hypot(p[1])
        })
        .fold(0.0, f64::max)
}

#[test]
fn circular_law_from_solver() {
    let eq = solve(Arc::new(Quadratic { a: 1.0 }), 256, 1.5);
    let h = eq.grid().spacing;
    assert!((support_radius(&eq) - 1.0).abs() <= 1.5 * h, "{}", support_radius(&eq));
    assert!((eq.c0 - 0.5).abs() < 1e-3, "c0 {}", eq.c0);
    assert!((eq.mu0.mass() - 1.0).abs() < 1e-6);
    for p in [[0.0, 0.0], [0.5, 0.1], [-0.3, -0.6]] {
        assert!((eq.density_at(p) * PI - 1.0).abs() < 1e-3);
    }
    assert!(eq.residuals.worst() < 1e-2, "{:?}", eq.residuals);
}

#[test]
fn radial_oracle_matches_solver() {
    let v = Arc::new(Quadratic { a: 2.0 });
    let r = radial_support_radius(v.as_ref(), [0.0, 0.0]).unwrap();
    assert!((r - 0.5f64.sqrt()).abs() < 1e-9);
    let eq = solve(v, 192, 1.1);
    assert!((support_radius(&eq) - r).abs() <= 1.5 * eq.grid().spacing);
    let q = radial_support_radius(&coulomb_core::potential::Quartic { a: 1.0 }, [0.0, 0.0]).unwrap();
    // (1/2) int_0^R 16 r^3 dr = 2 R^4 = 1
    assert!((q - 0.5f64.powf(0.25)).abs() < 1e-9);
}

#[test]
fn bump_perturbation_moves_support_at_order_eps() {
    // Hausdorff-type distance between the perturbed and unit disk
    let dist = |eps: f64| {
        let v = Arc::new(QuadraticBump { eps, center: [0.9, 0.0], radius: 0.8 });
        let eq = solve(v, 384, 1.5);
        let base = circular_law(eq.grid());
        let diff = eq.sigma_mask().cells.iter().zip(&base.sigma_mask().cells).filter(|(a, b)| a != b).count();
        diff as f64 * eq.grid().cell_area()
    };
    let (a, b) = (dist(0.2), dist(0.1));
    assert!(a > 0.0 && b > 0.0);
    assert!(a / b > 1.6, "{a} {b}");
}

#[test]
fn logarithmic_energy_circular_law() {
    let g = Grid2D::centered(1.2, 256);
    let eq = circular_law(g);
    let iv = logarithmic_energy(&eq.mu0, &Quadratic { a: 1.0 });
    assert!((iv - 0.75).abs() < 1e-2, "{iv}");
    let zero = logarithmic_energy(&eq.mu0, &coulomb_core::potential::Polynomial { terms: vec![] });
    assert!((zero - 0.25).abs() < 1e-2, "{zero}");
}

#[test]
fn logarithmic_energy_translation_invariant() {
    let g = Grid2D::centered(1.2, 96);
    let shift = [0.3, -0.45];
    let g2 = Grid2D::new([g.origin[0] + shift[0], g.origin[1] + shift[1]], g.spacing, g.nx, g.ny).unwrap();
    let rho = |p: [f64; 2]| (1.0 - p[0] * p[0] - p[1] * p[1]).max(0.0) * 2.0 / PI;
    let m1 = Measure2D::from_density(ScalarField2D::from_fn(g, rho)).unwrap();
    let m2 = Measure2D::from_density(ScalarField2D::from_fn(g2, |p| rho([p[0] - shift[0], p[1] - shift[1]]))).unwrap();
    let v1 = QuadraticBump { eps: 0.2, center: [0.1, 0.0], radius: 0.4 };
    #[derive(Debug)]
    struct Shifted(QuadraticBump, [f64; 2]);
    impl Potential for Shifted {
        fn value(&self, x: [f64; 2]) -> f64 {
            self.0.value([x[0] - self.1[0], x[1] - self.1[1]])
        }
        fn gradient(&self, x: [f64; 2]) -> [f64; 2] {
            self.0.gradient([x[0] - self.1[0], x[1] - self.1[1]])
        }
        fn laplacian(&self, x: [f64; 2]) -> f64 {
            self.0.laplacian([x[0] - self.1[0], x[1] - self.1[1]])
        }
        fn growth_margin(&self) -> f64 {
            self.0.growth_margin()
        }
        fn describe(&self) -> String {
            "shifted".into()
        }
    }
    let a = logarithmic_energy(&m1, &v1);
    let b = logarithmic_energy(&m2, &Shifted(v1.clone(), shift));
    assert!((a - b).abs() < 1e-10, "{a} {b}");
}

#[test]
fn euler_lagrange_closed_form_and_perturbations() {
    let g = Grid2D::centered(1.5, 512);
    let eq = circular_law(g);
    let r = verify_euler_lagrange(&eq);
    assert!(r.max_negative <= 1e-3 && r.max_on_sigma <= 1e-3 && r.constancy_defect <= 1e-3, "{r:?}");
    let mut shifted = eq.clone();
    shifted.c0 += 0.1;
    let r = verify_euler_lagrange(&shifted);
    assert!((r.max_on_sigma - 0.1).abs() < 2e-3, "{r:?}");
    let mut heavy = eq.clone();
    heavy.mu0 = eq.mu0.scaled(1.1);
    // zeta = -1.1 log r + r^2/2 - 1/2 outside the disk, minimal at r^2 = 1.1
    let depth = 0.55 * 1.1f64.ln() - 0.05;
    let neg = verify_euler_lagrange(&heavy).max_negative;
    assert!((neg - depth).abs() < 0.1 * depth, "{neg} vs {depth}");
}

#[test]
fn euler_lagrange_residuals_refine() {
    let r = |n: usize| solve(Arc::new(Quadratic { a: 1.0 }), n, 1.5).residuals.worst();
    let (a, b) = (r(96), r(192));
    assert!(a / b >= 1.5, "{a} {b}");
}

#[test]
fn entropy_closed_forms() {
    let eq = circular_law(Grid2D::centered(1.2, 256));
    assert!((entropy(&eq.mu0) + PI.ln()).abs() < 1e-3);
    let unit = Grid2D::new([0.0, 0.0], 1.0 / 64.0, 64, 64).unwrap();
    let one = Measure2D::from_density(ScalarField2D::constant(unit, 1.0)).unwrap();
    assert_eq!(entropy(&one), 0.0);
    let half = Measure2D::from_density(ScalarField2D::from_fn(unit, |p| if p[0] < 0.5 && p[1] < 0.5 { 4.0 } else { 0.0 }))
        .unwrap();
    assert!((entropy(&half) - 4f64.ln()).abs() < 1e-10);
}

#[test]
fn t_max_arithmetic() {
    let eq = circular_law(Grid2D::centered(1.5, 256));
    let xi = library().into_iter().find(|t| t.name == "bump-center").unwrap();
    let g = eq.grid();
    let sup = (0..g.len()).map(|k| xi.laplacian(g.center_of(k)).abs()).fold(0.0, f64::max);
    let tm = t_max(&eq, &xi, 2.0).unwrap();
    assert!((tm - 2.0 * PI * 2.0 / PI / (2.0 * sup)).abs() < 1e-12);
    let tm2 = t_max(&eq, &xi.scaled(2.0), 2.0).unwrap();
    assert!((tm2 / tm - 0.5).abs() < 1e-12);
    let meso = TestFunction::new("m", Shape::Bump { radius: 2.5 }, 1.0, [0.0, 0.0], 1.0, Regularity::C21Mesoscopic).unwrap();
    let a = t_max(&eq, &meso.with_scale(0.25), 2.0).unwrap();
    let b = t_max(&eq, &meso.with_scale(0.125), 2.0).unwrap();
    assert!((b / a - 0.25).abs() < 0.05 * 0.25, "{}", b / a);
    assert!(t_max(&eq, &xi.with_scale(2.0), 2.0).is_none());
}

#[test]
fn perturbed_equilibrium_interior_regime() {
    let eq = circular_law(Grid2D::centered(1.5, 256));
    let xi = library().into_iter().find(|t| t.name == "bump-center").unwrap();
    let opts = SolveOptions::default();
    let p0 = perturbed_equilibrium(&eq, &xi, 0.0, 2.0, &opts).unwrap();
    assert_eq!(p0.mu_t.density, eq.mu0.density);
    let tm = t_max(&eq, &xi, 2.0).unwrap();
    let p = perturbed_equilibrium(&eq, &xi, tm / 2.0, 2.0, &opts).unwrap();
    assert!(p.is_interior_regime);
    assert!((p.mu_t.mass() - 1.0).abs() < 1e-10 + (eq.mu0.mass() - 1.0).abs());
    assert_eq!(p.mu_t.support_mask, eq.mu0.support_mask);
    let g = eq.grid();
    for k in (0..g.len()).step_by(97) {
        let q = g.center_of(k);
        if eq.mu0.support_mask.cells[k] && !eq.sigma.level.as_ref().unwrap().is_cut(g.coords(k).0, g.coords(k).1) {
            let want = 1.0 / PI - tm / 2.0 / (4.0 * PI) * xi.laplacian(q);
            assert!((p.mu_t.density.values[k] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn potential_spec_validation() {
    assert!(PotentialSpec::Quadratic { a: -1.0 }.build().is_err());
    assert!(PotentialSpec::Polynomial { terms: vec![(1, 0, 1.0)] }.build().is_err());
    let v = PotentialSpec::Quartic { a: 1.0 }.build().unwrap();
    assert!(coulomb_core::potential::growth_check(v.as_ref(), 10.0));
}

#[test]
fn equilibrium_directory_roundtrip() {
    let eq = circular_law(Grid2D::centered(1.5, 32));
    let dir = std::env::temp_dir().join(format!("eq-dir-{}", std::process::id()));
    eq.write_dir(&dir).unwrap();
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("equilibrium.json")).unwrap()).unwrap();
    assert!((meta["c0"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    let z = coulomb_core::field::io::read_binary(std::fs::File::open(dir.join("zeta0.bin")).unwrap()).unwrap();
    assert_eq!(z, eq.zeta0);
    std::fs::remove_dir_all(dir).ok();
}
