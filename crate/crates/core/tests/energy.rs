use std::f64::consts::PI;

use coulomb_core::energy::*;
use coulomb_core::equilibrium::circular_law;
use coulomb_core::field::{Grid2D, LevelSet, Measure2D};
use coulomb_core::potential::{Polynomial, Quadratic};
use coulomb_core::rng;
use coulomb_core::test_function::TestFunction;
use rand::Rng as _;

fn disk_points(n: usize, radius: f64, seed: u64) -> Configuration {
    let mut r = rng::tagged(seed, rng::purpose::SYNTHETIC, n as u64);
    let pts = (0..n)
        .map(|_| {
            let s = radius * r.random::<f64>().sqrt();
            let t = 2.0 * PI * r.random::<f64>();
            [s * t.cos(), s * t.sin()]
        })
        .collect();
    Configuration::new(pts).unwrap()
}

/// Ordered-pair brute force of `H_N`.
fn brute_hamiltonian(x: &[[f64; 2]], v: impl Fn([f64; 2]) -> f64) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s -= ((x[i][0] - x[j][0]).powi(2) + (x[i][1] - x[j][1]).powi(2)).sqrt().ln();
            }
        }
        s += n as f64 * v(x[i]);
    }
    s
}

#[test]
fn hamiltonian_hand_values() {
    let q = Quadratic { a: 1.0 };
    let zero = Polynomial { terms: vec![] };
    let two = Configuration::new(vec![[0.0, 0.0], [1.0, 0.0]]).unwrap();
    assert_eq!(hamiltonian(&two, &q).unwrap(), 2.0);
    let half = Configuration::new(vec![[0.0, 0.0], [0.5, 0.0]]).unwrap();
    assert!((hamiltonian(&half, &zero).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-15);
    let r = 1.0 / 3f64.sqrt();
    let tri: Vec<_> = (0..3).map(|k| {
        let t = 2.0 * PI * k as f64 / 3.0;
        [r * t.cos(), r * t.sin()]
    }).collect();
    let h = hamiltonian(&Configuration::new(tri.clone()).unwrap(), &q).unwrap();
    assert!((h - 3.0).abs() < 1e-12);
    assert!((h - brute_hamiltonian(&tri, |p| p[0] * p[0] + p[1] * p[1])).abs() < 1e-12);
}

#[test]
fn hamiltonian_matches_brute_force_and_parallel_path() {
    let q = Quadratic { a: 1.0 };
    for seed in 0..5 {
        let x = disk_points(40, 1.0, seed);
        let a = hamiltonian(&x, &q).unwrap();
        let b = brute_hamiltonian(&x.points, |p| p[0] * p[0] + p[1] * p[1]);
        let c = hamiltonian_parallel(&x, &q).unwrap();
        assert!((a - b).abs() < 1e-10 * a.abs());
        assert!((a - c).abs() < 1e-12 * a.abs());
    }
}

#[test]
fn coincident_points_are_an_error() {
    let x = Configuration::new(vec![[0.1, 0.2], [0.1, 0.2], [0.0, 0.0]]).unwrap();
    assert!(hamiltonian(&x, &Quadratic { a: 1.0 }).is_err());
    assert!(Configuration::new(vec![[f64::NAN, 0.0]]).is_err());
}

#[test]
fn permutation_invariance() {
    let q = Quadratic { a: 1.0 };
    let bg = Background::from_equilibrium(&circular_law(Grid2D::centered(1.5, 64)));
    let x = disk_points(20, 0.9, 3);
    let mut p = x.points.clone();
    p.reverse();
    p.swap(2, 11);
    let y = Configuration::new(p).unwrap();
    assert_eq!(hamiltonian(&x, &q).unwrap(), hamiltonian(&y, &q).unwrap());
    let (a, b) = (next_order_energy(&x, &bg).unwrap(), next_order_energy(&y, &bg).unwrap());
    assert!((a.fn_value - b.fn_value).abs() <= 1e-12 * a.fn_value.abs());
}

#[test]
fn nn_truncation_examples() {
    let far = Configuration::new(vec![[0.0, 0.0], [8.0, 0.0]]).unwrap();
    let r = nn_truncation(&far).unwrap();
    assert!(r.eta.iter().all(|e| (e - 1.0 / (4.0 * 2f64.sqrt())).abs() < 1e-15));
    let near = Configuration::new(vec![[0.0, 0.0], [0.1, 0.0]]).unwrap();
    assert!(nn_truncation(&near).unwrap().eta.iter().all(|e| (e - 0.025).abs() < 1e-15));
    let cloud = Configuration::new((0..100).map(|k| [(k % 10) as f64, (k / 10) as f64]).collect()).unwrap();
    assert!(nn_truncation(&cloud).unwrap().eta.iter().all(|&e| e <= 1.0 / 40.0 + 1e-15));
    assert!(nn_truncation(&Configuration::new(vec![[0.0, 0.0]]).unwrap()).is_err());
}

#[test]
fn next_order_energy_single_point() {
    let bg = Background::from_equilibrium(&circular_law(Grid2D::centered(1.2, 256)));
    let x = Configuration::new(vec![[0.0, 0.0]]).unwrap();
    let r = next_order_energy(&x, &bg).unwrap();
    // F_1 = -2 h(0) + int int = -1 + 1/4
    assert!((r.fn_value + 0.75).abs() < 2e-2, "{}", r.fn_value);
    assert_eq!(r.fn_value, r.pairwise_sum + r.cross_term + r.background_term);
}

#[test]
fn next_order_energy_translation_invariant() {
    let g = Grid2D::centered(1.2, 96);
    let shift = [0.25, -0.5];
    let g2 = Grid2D::new([g.origin[0] + shift[0], g.origin[1] + shift[1]], g.spacing, g.nx, g.ny).unwrap();
    let rho = |p: [f64; 2]| (1.0 - p[0] * p[0] - p[1] * p[1]).max(0.0) * 2.0 / PI;
    let m1 = Measure2D::from_density(coulomb_core::field::ScalarField2D::from_fn(g, rho)).unwrap();
    let m2 = Measure2D::from_density(coulomb_core::field::ScalarField2D::from_fn(g2, |p| rho([p[0] - shift[0], p[1] - shift[1]])))
        .unwrap();
    let x = disk_points(12, 0.8, 9);
    let y = x.translated(shift);
    let a = next_order_energy(&x, &Background::new(m1)).unwrap().fn_value;
    let b = next_order_energy(&y, &Background::new(m2)).unwrap().fn_value;
    assert!((a - b).abs() < 1e-10 * a.abs().max(1.0), "{a} {b}");
}

#[test]
fn energy_lower_bound_over_random_configurations() {
    let bg = Background::from_equilibrium(&circular_law(Grid2D::centered(1.2, 128)));
    let n = 64usize;
    let nf = n as f64;
    let mut worst: f64 = f64::NEG_INFINITY;
    for seed in 0..200 {
        let f = next_order_energy(&disk_points(n, 1.0, 1000 + seed), &bg).unwrap().fn_value;
        worst = worst.max(-(f + 0.5 * nf * nf.ln()) / nf);
    }
    eprintln!("empirical constant C = {worst:.4}");
    assert!(worst < 10.0);
}

fn splitting(n_grid: usize) -> f64 {
    let eq = circular_law(Grid2D::centered(1.5, n_grid));
    let bg = Background::from_equilibrium(&eq);
    (0..4).map(|s| splitting_residual(&disk_points(16, 0.95, 20 + s), &eq, &bg).unwrap()).fold(0.0, f64::max)
}

#[test]
fn splitting_identity_and_refinement() {
    let (a, b) = (splitting(256), splitting(512));
    assert!(b <= 1e-2 * 16.0, "{b}");
    assert!(b <= a / 2.0, "{a} {b}");
}

#[test]
fn splitting_with_points_in_sigma_ignores_zeta() {
    let eq = circular_law(Grid2D::centered(1.5, 256));
    let bg = Background::from_equilibrium(&eq);
    let x = disk_points(16, 0.9, 4);
    let r = splitting_residual(&x, &eq, &bg).unwrap();
    let h = hamiltonian(&x, &Quadratic { a: 1.0 }).unwrap();
    let f = next_order_energy(&x, &bg).unwrap().fn_value;
    assert!((r - (h - 256.0 * eq.iv - f).abs()).abs() < 1e-9);
}

#[test]
fn truncated_field_examples() {
    let eq = circular_law(Grid2D::centered(2.0, 128));
    let bg = Background::from_equilibrium(&eq);
    let x = Configuration::new(vec![[0.1, 0.0], [-0.3, 0.2]]).unwrap();
    let eta = TruncationVector::new(vec![0.05, 0.02]).unwrap();
    let hf = truncated_potential_field(&x, &bg, &eta).unwrap();
    let g = bg.grid();
    for k in 0..g.len() {
        let y = g.center_of(k);
        let d = x.points.iter().map(|p| ((y[0] - p[0]).powi(2) + (y[1] - p[1]).powi(2)).sqrt()).fold(f64::INFINITY, f64::min);
        if d >= 0.5 {
            let exact: f64 = x.points.iter().map(|p| -((y[0] - p[0]).powi(2) + (y[1] - p[1]).powi(2)).sqrt().ln()).sum::<f64>()
                - 2.0 * bg.h.values[k];
            assert!((hf.values[k] - exact).abs() < 1e-12);
        }
    }
    // single charge over an empty background, evaluated on its circle
    let stub = Background::new(Measure2D::from_density(coulomb_core::field::ScalarField2D::zeros(g)).unwrap());
    let one = Configuration::new(vec![g.center(40, 40)]).unwrap();
    let eta = TruncationVector::new(vec![g.spacing]).unwrap();
    let f = truncated_potential_field(&one, &stub, &eta).unwrap();
    assert!((f.at(41, 40) + g.spacing.ln()).abs() < 1e-12);
}

#[test]
fn truncated_field_charge_balance() {
    let eq = circular_law(Grid2D::centered(3.0, 384));
    let bg = Background::from_equilibrium(&eq);
    let x = disk_points(8, 0.8, 5);
    let eta = nn_truncation(&x).unwrap();
    let hf = truncated_potential_field(&x, &bg, &eta).unwrap();
    let (l, valid) = coulomb_core::field::discrete_laplacian(&hf);
    let g = hf.grid;
    let total: f64 = (0..g.len()).filter(|&k| valid.cells[k] && g.center_of(k)[0].hypot(g.center_of(k)[1]) < 2.5).map(|k| -l.values[k]).sum::<f64>()
        * g.cell_area()
        / (2.0 * PI);
    assert!(total.abs() < 1e-2, "{total}");
}

#[test]
fn smearing_constant_by_quadrature() {
    let eta: f64 = 0.1;
    let s = smeared_correction([0.0, 0.0], eta, &|_| 1.0);
    assert!((s + PI * eta * eta / 2.0).abs() < 1e-9, "{s}");
    // one-dimensional check of int_0^eta log(eta/r) 2 pi r dr
    let (x, w) = gauss_legendre(40);
    // r = eta s^2 makes the integrand -8 pi eta^2 s^3 log s
    let q: f64 = x.iter().zip(&w).map(|(&u, &wt)| {
        let s = 0.5 * (u + 1.0);
        -8.0 * PI * eta * eta * s.powi(3) * s.ln() * 0.5 * wt
    }).sum();
    assert!((q - PI / 200.0).abs() < 1e-9, "{q}");
}

fn well_separated() -> Configuration {
    Configuration::new(vec![[0.4, 0.1], [-0.35, 0.3], [0.05, -0.5], [-0.2, -0.1]]).unwrap()
}

#[test]
fn truncated_energy_identity_refines() {
    let x = well_separated();
    let eta = nn_truncation(&x).unwrap();
    let rel = |n: usize| {
        let bg = Background::from_equilibrium(&circular_law(Grid2D::centered(3.0, n)));
        let r = truncated_energy_identity(&x, &bg, &eta).unwrap();
        assert!(r.equality_case);
        assert!(r.smearing.abs() <= r.smearing_bound * (1.0 + 1e-9));
        r.relative_residual
    };
    let (a, b) = (rel(256), rel(512));
    assert!(b <= 5e-2, "{b}");
    assert!(b < a, "{a} {b}");
}

#[test]
fn sandwich_with_overlapping_truncations() {
    // N = 128 keeps every overlapping pair of circles within unit distance,
    // where the logarithmic kernel is positive and the upper bound applies
    let bg = Background::from_equilibrium(&circular_law(Grid2D::centered(3.0, 384)));
    for seed in 0..100 {
        let x = disk_points(128, 0.9, 300 + seed);
        let eta = nn_truncation(&x).unwrap().scaled(10.0);
        let r = truncated_energy_identity(&x, &bg, &eta).unwrap();
        assert!(r.lower_bound.is_finite() && r.upper_bound.is_finite());
        assert!(r.sandwich_holds, "seed {seed}: {} not in [{}, {}]", r.fn_value - r.rhs, r.lower_bound, r.upper_bound);
    }
}

#[test]
fn truncation_monotonicity() {
    let bg = Background::from_equilibrium(&circular_law(Grid2D::centered(3.0, 384)));
    let x = well_separated();
    let r = nn_truncation(&x).unwrap();
    let quantity = |eta: &TruncationVector| {
        let hf = truncated_potential_field(&x, &bg, eta).unwrap();
        field_energy(&hf).total() + 2.0 * PI * eta.eta.iter().map(|e| e.ln()).sum::<f64>()
    };
    let mut prev = quantity(&r);
    for s in [0.7, 0.5, 0.35] {
        let q = quantity(&r.scaled(s));
        assert!(q <= prev + 1e-2, "{s}: {q} > {prev}");
        prev = q;
    }
}

#[test]
fn fluct_energy_bound() {
    let bg = Background::from_equilibrium(&circular_law(Grid2D::centered(2.0, 192)));
    let zero = TestFunction::zero();
    let x = disk_points(32, 0.95, 1);
    let eta = TruncationVector::new(vec![1.0 / 32f64.sqrt() / 2.0; 32]).unwrap();
    let c = fluct_energy_bound_check(&x, &bg, &zero, &eta, 0.0).unwrap();
    assert_eq!((c.lhs, c.slack), (0.0, c.rhs));
    assert!(c.holds);
    let phi = TestFunction::bump([0.2, -0.1], 0.5, 1.0);
    for seed in 0..100 {
        let x = disk_points(32, 0.95, 500 + seed);
        let eta = nn_truncation(&x).unwrap();
        assert!(fluct_energy_bound_check(&x, &bg, &phi, &eta, 0.01).unwrap().holds, "seed {seed}");
    }
    // one charge far from supp phi: the left side is -N int phi dmu
    let phi = TestFunction::bump([0.5, 0.5], 0.3, 1.0);
    let x = Configuration::new(vec![[-0.6, -0.6]]).unwrap();
    let eta = TruncationVector::new(vec![0.1]).unwrap();
    let c = fluct_energy_bound_check(&x, &bg, &phi, &eta, 0.01).unwrap();
    assert!((c.lhs + bg.mu.integrate(|p| phi.value(p))).abs() < 1e-12);
    assert!(c.holds);
}

#[test]
fn background_pointwise_density() {
    let g = Grid2D::centered(1.5, 64);
    let mu = Measure2D::from_level_set(LevelSet::from_fn(g, |p| p[0].hypot(p[1]) - 1.0), |_| 1.0 / PI);
    let bg = Background::new(mu);
    assert!((bg.density_at([0.99, 0.0]) - 1.0 / PI).abs() < 1e-15);
    assert_eq!(bg.density_at([1.01, 0.0]), 0.0);
}
