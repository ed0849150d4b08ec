use coulomb_core::energy::{hamiltonian, Configuration};
use coulomb_core::equilibrium::circular_law;
use coulomb_core::field::Grid2D;
use coulomb_core::fluctuations::LinearStatistic;
use coulomb_core::potential::Quadratic;
use coulomb_core::rng;
use coulomb_core::sampler::*;
use coulomb_core::stats;
use coulomb_core::test_function::TestFunction;

const Q: Quadratic = Quadratic { a: 1.0 };

fn disk() -> Init {
    Init::Disk { center: [0.0, 0.0], radius: 1.0 }
}

#[test]
fn acceptance_rule() {
    assert_eq!(acceptance_probability(-3.0, 2.0), 1.0);
    assert_eq!(acceptance_probability(0.0, 2.0), 1.0);
    assert!((acceptance_probability(1.0, 2.0) - (-1.0f64).exp()).abs() < 1e-15);
    assert_eq!(acceptance_probability(1e-3, 1e6), (-500.0f64).exp());
}

#[test]
fn detailed_balance_on_a_discrete_two_particle_space() {
    // both particles on a 3x3 lattice, distinct sites, labelled pairs
    let sites: Vec<[f64; 2]> = (0..9).map(|k| [0.3 * (k % 3) as f64 - 0.3, 0.3 * (k / 3) as f64 - 0.3]).collect();
    let mut states = Vec::new();
    for a in 0..9 {
        for b in 0..9 {
            if a != b {
                states.push((a, b));
            }
        }
    }
    let energies: Vec<f64> =
        states.iter().map(|&(a, b)| hamiltonian(&Configuration::new(vec![sites[a], sites[b]]).unwrap(), &Q).unwrap()).collect();
    let m = states.len();
    // propose moving exactly one particle to another free site, uniformly
    let q: Vec<Vec<f64>> = (0..m)
        .map(|s| {
            (0..m)
                .map(|t| {
                    let (a, b) = states[s];
                    let (c, d) = states[t];
                    if (a == c) != (b == d) { 1.0 / 14.0 } else { 0.0 }
                })
                .collect()
        })
        .collect();
    for beta in [0.5, 2.0, 7.0] {
        let k = discrete_kernel(&energies, &q, beta);
        let pi: Vec<f64> = energies.iter().map(|e| (-0.5 * beta * (e - energies[0])).exp()).collect();
        let z: f64 = pi.iter().sum();
        for s in 0..m {
            assert!((k[s].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for t in 0..m {
                let lhs = pi[s] / z * k[s][t];
                let rhs = pi[t] / z * k[t][s];
                assert!((lhs - rhs).abs() < 1e-12, "{s} {t}");
            }
        }
    }
}

#[test]
fn zero_temperature_sweeps_do_not_increase_energy() {
    let cfg = MinimizerConfig { restarts: 1, max_iters: 500, ..Default::default() };
    let x = minimize_energy(16, &Q, &disk(), &cfg).unwrap().config;
    let mut state = ChainState::new(x, &Q).unwrap();
    let mut r = rng::tagged(3, rng::purpose::MCMC, 0);
    // an uphill move of size dH survives with probability exp(-beta dH / 2);
    // beyond 40 / beta per particle that is below e^-20
    let beta = 1e6;
    for _ in 0..20 {
        let before = state.energy;
        metropolis_sweep(&mut state, beta, 1e-3, &Q, &mut r);
        assert!(state.energy <= before + 16.0 * 40.0 / beta, "{} -> {}", before, state.energy);
    }
    let cached = state.energy;
    assert!(state.resync(&Q).unwrap() < 1e-8 * cached.abs());
}

#[test]
fn adaptation_reaches_target_band() {
    let mut cfg = SamplerConfig::new(64, 2.0, 4, 11);
    cfg.burn_in = 50;
    cfg.proposal_sigma = 1.0;
    let (_, s) = run_chain(&cfg, &Q, &disk()).unwrap();
    assert!((0.2..=0.5).contains(&s.acceptance_rate), "{}", s.acceptance_rate);
}

#[test]
fn chains_are_deterministic() {
    let mut cfg = SamplerConfig::new(12, 2.0, 5, 99);
    cfg.burn_in = 30;
    let (a, sa) = run_chain(&cfg, &Q, &disk()).unwrap();
    let (b, sb) = run_chain(&cfg, &Q, &disk()).unwrap();
    assert_eq!(a, b);
    assert_eq!(sa.acceptance_rate, sb.acceptance_rate);
    cfg.seed = 100;
    let (c, _) = run_chain(&cfg, &Q, &disk()).unwrap();
    assert_ne!(a, c);
}

#[test]
fn config_validation() {
    let good = SamplerConfig::new(8, 2.0, 1, 0);
    assert!(good.validate().is_ok());
    assert!(SamplerConfig { n_samples: 0, ..good.clone() }.validate().is_err());
    assert!(SamplerConfig { thinning: 0, ..good.clone() }.validate().is_err());
    assert!(SamplerConfig { proposal_sigma: 0.0, ..good.clone() }.validate().is_err());
    assert!(SamplerConfig { beta: -1.0, ..good }.validate().is_err());
}

/// `E (1/N) sum |x_i|^2` for the Ginibre ensemble: by Kostlan's theorem the
/// squared moduli are independent `Gamma(k, 1)/N`, `k = 1..N`.
fn ginibre_second_moment(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).sum::<f64>() / (n * n) as f64
}

#[test]
fn mcmc_second_moment_matches_circular_law() {
    let n = 128;
    let mut cfg = SamplerConfig::new(n, 2.0, 125, 5);
    cfg.burn_in = 1000;
    let (vals, sums) = run_chains_map(&cfg, &Q, &disk(), 8, |x| x.points.iter().map(|p| p[0] * p[0] + p[1] * p[1]).sum::<f64>() / n as f64)
        .unwrap();
    // standard error from the spread of the chain means
    let means: Vec<f64> = vals.chunks(125).map(stats::mean).collect();
    let m = stats::mean(&means);
    let se = stats::std_error(&means);
    let want = ginibre_second_moment(n);
    assert!((m - want).abs() <= 3.0 * se, "{m} vs {want} (se {se})");
    assert!((m - 0.5).abs() < 0.01);
    assert!(sums.iter().all(|s| s.max_relative_drift <= 1e-6));
}

#[test]
fn ginibre_one_by_one() {
    let xs: Vec<f64> = (0..100_000u64)
        .map(|k| {
            let p = sample_ginibre(1, &mut rng::tagged(1, rng::purpose::GINIBRE, k)).unwrap().points[0];
            p[0] * p[0] + p[1] * p[1]
        })
        .collect();
    assert!((stats::mean(&xs) - 1.0).abs() <= 3.0 * stats::std_error(&xs));
    assert!(sample_ginibre(0, &mut rng::tagged(1, 0, 0)).is_err());
}

#[test]
fn ginibre_circular_law_statistics() {
    let n = 128;
    let batch = ginibre_batch(n, 500, 17).unwrap();
    let frac: Vec<f64> = batch.iter().map(|x| x.points.iter().filter(|p| p[0].hypot(p[1]) <= 0.5).count() as f64 / n as f64).collect();
    assert!((stats::mean(&frac) - 0.25).abs() <= 3.0 * stats::std_error(&frac));
    let m2: Vec<f64> = batch.iter().map(|x| x.points.iter().map(|p| p[0] * p[0] + p[1] * p[1]).sum::<f64>() / n as f64).collect();
    let want = ginibre_second_moment(n);
    assert!((stats::mean(&m2) - want).abs() <= 3.0 * stats::std_error(&m2));
    assert_eq!(batch, ginibre_batch(n, 500, 17).unwrap());
}

#[test]
fn two_seeds_agree_on_fluct_mean() {
    let eq = circular_law(Grid2D::centered(1.5, 128));
    let stat = LinearStatistic::new(&TestFunction::bump([0.1, 0.0], 0.6, 1.0), &eq);
    let run = |seed| {
        let mut cfg = SamplerConfig::new(32, 2.0, 100, seed);
        cfg.burn_in = 500;
        let (v, _) = run_chains_map(&cfg, &Q, &disk(), 4, |x| stat.eval(x)).unwrap();
        let means: Vec<f64> = v.chunks(100).map(stats::mean).collect();
        (stats::mean(&means), stats::std_error(&means))
    };
    let (a, sa) = run(1);
    let (b, sb) = run(2);
    assert!((a - b).abs() <= 4.0 * sa.hypot(sb), "{a} {b}");
}

#[test]
fn minimizer_small_cases() {
    let cfg = MinimizerConfig { grad_tol: 1e-10, ..Default::default() };
    let two = minimize_energy(2, &Q, &disk(), &cfg).unwrap();
    let p = &two.config.points;
    assert!(((p[0][0] - p[1][0]).hypot(p[0][1] - p[1][1]) - 1.0).abs() < 1e-6);
    assert!((p[0][0] + p[1][0]).abs() < 1e-6 && (p[0][1] + p[1][1]).abs() < 1e-6);
    let one = minimize_energy(1, &Q, &disk(), &cfg).unwrap();
    assert!(one.config.points[0][0].hypot(one.config.points[0][1]) < 1e-8);
    assert!(minimize_energy(3, &Q, &disk(), &MinimizerConfig { grad_tol: 0.0, ..cfg }).is_err());
}

#[test]
fn minimizer_is_confined_and_reproducible() {
    let eq = circular_law(Grid2D::centered(1.5, 256));
    let cfg = MinimizerConfig { restarts: 4, seed: 1, ..Default::default() };
    let r = minimize_confined(100, &Q, &eq, &cfg).unwrap();
    assert!(r.converged);
    assert!(confinement_violations(&r.config.points, &eq).is_empty());
    let a = minimize_energy(20, &Q, &disk(), &MinimizerConfig { restarts: 8, seed: 1, ..Default::default() }).unwrap();
    let b = minimize_energy(20, &Q, &disk(), &MinimizerConfig { restarts: 8, seed: 2, ..Default::default() }).unwrap();
    assert!((a.energy - b.energy).abs() <= 1e-4 * 20.0, "{} {}", a.energy, b.energy);
}

#[test]
fn confinement_flags_stray_points() {
    let eq = circular_law(Grid2D::centered(1.5, 64));
    let bad = confinement_violations(&[[0.0, 0.0], [1.0 + 0.5 * eq.grid().spacing, 0.0], [1.3, 0.0]], &eq);
    assert_eq!(bad.len(), 1);
    assert_eq!(bad[0].0, 2);
}

#[test]
fn sample_streams_roundtrip() {
    let mut cfg = SamplerConfig::new(6, 2.0, 3, 4);
    cfg.burn_in = 10;
    let (xs, s) = run_chain(&cfg, &Q, &disk()).unwrap();
    let meta = StreamMeta { config: cfg, summaries: vec![s], records: xs.len(), format: "csv".into() };
    let dir = std::env::temp_dir().join(format!("samples-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let csv = dir.join("s.csv");
    write_samples_csv(&csv, &xs, &meta).unwrap();
    assert_eq!(read_samples_csv(&csv).unwrap(), xs);
    let bin = dir.join("s.bin");
    write_samples_binary(&bin, &xs, &meta).unwrap();
    assert_eq!(read_samples_binary(&bin).unwrap(), xs);
    let side: StreamMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("s.bin.json")).unwrap()).unwrap();
    assert_eq!(side.records, 3);
    std::fs::remove_dir_all(dir).ok();
}
