use proptest::prelude::*;
use rcmlab_core::env::{sample_environment, Environment, MuMode};
use rcmlab_core::green::{green_function, harnack_ratios, hitting_profile, HarnackFamily};
use rcmlab_core::heat::{dirichlet_heat_kernel, heat_kernel};
use rcmlab_core::lattice::LatticeSpec;
use rcmlab_core::law::ConductanceLaw;
use rcmlab_core::markov::{dirichlet_energy, Generator};
use rcmlab_core::walk::{sample_rng, simulate_path, Walker};

const TOL: f64 = 1e-10;

fn law_strategy() -> impl Strategy<Value = ConductanceLaw> {
    prop_oneof![
        (0.5f64..3.0).prop_map(|value| ConductanceLaw::Constant { value }),
        (0.0f64..0.3, 0.5f64..2.0).prop_map(|(p0, v)| ConductanceLaw::BernoulliDegenerate {
            p0,
            positive_law: Box::new(ConductanceLaw::Constant { value: v }),
        }),
        (1u32..3, 0.1f64..1.0).prop_map(|(p, eps)| ConductanceLaw::PolynomialTail { p: p as f64, eps }),
        (1u32..6, 0.1f64..1.0).prop_map(|(levels, eps)| ConductanceLaw::DyadicTrap { levels, eps, row_cap: 1.0 }),
        (0.1f64..1.0, 1.0f64..5.0, 0.1f64..0.9).prop_map(|(a, b, p)| ConductanceLaw::Custom {
            table: vec![(a, p), (b, 1.0 - p)],
        }),
    ]
}

fn spec_strategy() -> impl Strategy<Value = LatticeSpec> {
    prop_oneof![
        (3usize..12).prop_map(|r| LatticeSpec::full(1, r)),
        (2usize..5).prop_map(|r| LatticeSpec::full(2, r)),
        (3usize..10).prop_map(|r| LatticeSpec::torus(1, r)),
    ]
}

fn env_strategy() -> impl Strategy<Value = Environment> {
    (law_strategy(), spec_strategy(), 0.3f64..1.8, any::<u64>())
        .prop_map(|(law, spec, alpha, seed)| sample_environment(law, spec, MuMode::Counting, alpha, seed).unwrap())
}

fn random_vec(seed: u64, n: usize) -> Vec<f64> {
    use rand::Rng;
    let mut rng = sample_rng(seed, 0);
    (0..n).map(|_| rng.random::<f64>() - 0.5).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn environments_are_deterministic_and_symmetric(law in law_strategy(), spec in spec_strategy(), seed in any::<u64>()) {
        let a = sample_environment(law.clone(), spec.clone(), MuMode::Counting, 1.0, seed).unwrap();
        let b = sample_environment(law, spec, MuMode::Counting, 1.0, seed).unwrap();
        prop_assert!(a.bit_identical(&b));
        prop_assert_eq!(a.max_asymmetry(), 0.0);
        for x in 0..a.len() {
            prop_assert_eq!(a.w(x, x), 0.0);
        }
    }

    #[test]
    fn generator_conservative_and_reversible(env in env_strategy(), csrw in any::<bool>()) {
        let mut env = env;
        if csrw {
            prop_assume!(env.set_mu_mode(MuMode::Csrw).is_ok());
        }
        let gen = Generator::full(&env);
        let n = gen.len();
        let lambda = gen.lambda();
        let row = gen.apply(&vec![1.0; n]);
        prop_assert!(row.iter().all(|v| v.abs() <= 1e-12 * lambda.max(1.0)));
        let mu = gen.mu();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let (a, b) = (mu[i] * gen.rate(i, j), mu[j] * gen.rate(j, i));
                    prop_assert!((a - b).abs() <= 1e-14 * a.abs().max(b.abs()));
                }
            }
        }
    }

    #[test]
    fn energy_identity(env in env_strategy(), seed in any::<u64>()) {
        let gen = Generator::full(&env);
        let f = random_vec(seed, gen.len());
        let lf = gen.apply(&f);
        let inner: f64 = f.iter().zip(&lf).zip(gen.mu()).map(|((a, b), m)| a * b * m).sum();
        let e = dirichlet_energy(&env, &f);
        prop_assert!(e >= 0.0);
        prop_assert!((e + inner).abs() <= 1e-10 * e.abs().max(1e-300));
    }

    #[test]
    fn semigroup_conservation_symmetry(env in env_strategy(), t in 0.05f64..3.0, s in 0.05f64..3.0, pick in any::<prop::sample::Index>()) {
        let gen = Generator::full(&env);
        let n = gen.len();
        let mu = gen.mu().to_vec();
        let x0 = env.lattice().origin();
        let y = pick.index(n);
        let pt = heat_kernel(&gen, t, x0, TOL).unwrap();
        let ps_y = heat_kernel(&gen, s, y, TOL).unwrap();
        let pts = heat_kernel(&gen, t + s, x0, TOL).unwrap();
        prop_assert!((pt.mass(&mu) - 1.0).abs() <= TOL * 10.0);
        let composed: f64 = (0..n).map(|z| pt.values[z] * ps_y.values[z] * mu[z]).sum();
        let scale = pts.values[y].max(1.0);
        prop_assert!((pts.values[y] - composed).abs() <= 10.0 * (2.0 * TOL) * scale);
        let pt_y = heat_kernel(&gen, t, y, TOL).unwrap();
        prop_assert!((pt.values[y] - pt_y.values[x0]).abs() <= 10.0 * TOL * pt.values[y].max(1.0));
        prop_assert!(pt.values.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn dirichlet_domination_and_monotone_mass(env in env_strategy(), t in 0.1f64..4.0) {
        let lat = env.lattice();
        let x0 = lat.origin();
        let small = lat.ball(x0, 1.0);
        let big = lat.ball(x0, 2.5);
        let full = heat_kernel(&Generator::full(&env), t, x0, TOL).unwrap();
        let ks = Generator::killed(&env, &small).unwrap();
        let kb = Generator::killed(&env, &big).unwrap();
        let ps = dirichlet_heat_kernel(&ks, t, x0, TOL).unwrap();
        let pb = dirichlet_heat_kernel(&kb, t, x0, TOL).unwrap();
        for (i, &site) in ps.sites.iter().enumerate() {
            let j = pb.sites.iter().position(|&u| u == site).unwrap();
            prop_assert!(ps.values[i] <= pb.values[j] + 3.0 * TOL);
        }
        for (j, &site) in pb.sites.iter().enumerate() {
            prop_assert!(pb.values[j] <= full.values[site] + 3.0 * TOL);
        }
        let later = dirichlet_heat_kernel(&kb, 2.0 * t, x0, TOL).unwrap();
        prop_assert!(later.mass(kb.mu()) <= pb.mass(kb.mu()) + 2.0 * TOL);
    }

    #[test]
    fn green_symmetry_and_exit_decomposition(law in law_strategy(), seed in any::<u64>(), r in 3usize..8) {
        let env = sample_environment(law, LatticeSpec::full(1, r + 3), MuMode::Counting, 1.0, seed).unwrap();
        let lat = env.lattice();
        let domain = lat.ball(lat.origin(), r as f64);
        let Ok(gx) = green_function(&env, &domain, domain[0]) else { return Ok(()) };
        let gy = green_function(&env, &domain, domain[domain.len() - 1]).unwrap();
        let a = gx.at_site(domain[domain.len() - 1]).unwrap();
        let b = gy.at_site(domain[0]).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(b.abs()));
        prop_assert!(gx.values.iter().all(|v| *v >= 0.0));
        let mut total = vec![0.0; domain.len()];
        for z in (0..env.len()).filter(|z| !domain.contains(z)) {
            let h = hitting_profile(&env, &domain, z).unwrap();
            for (t, v) in total.iter_mut().zip(&h.by_solve) {
                *t += v;
            }
        }
        prop_assert!(total.iter().all(|v| (v - 1.0).abs() <= 1e-10));
    }

    #[test]
    fn harnack_ratios_at_least_one(law in law_strategy(), seed in any::<u64>()) {
        let env = sample_environment(law, LatticeSpec::full(2, 6), MuMode::Counting, 1.0, seed).unwrap();
        let o = env.lattice().origin();
        let fam = HarnackFamily::HittingProfiles { max_count: Some(40), seed };
        let Ok(rep) = harnack_ratios(&env, o, &[1.0, 2.0], &fam) else { return Ok(()) };
        for row in &rep.rows {
            if row.functions > row.flagged {
                prop_assert!(row.max_ehi >= 1.0 - 1e-12);
                prop_assert!(row.max_wehi > 0.0);
            }
        }
    }

    #[test]
    fn trajectories_well_formed(env in env_strategy(), seed in any::<u64>(), horizon in 0.1f64..20.0) {
        let x0 = env.lattice().origin();
        let a = simulate_path(&env, x0, horizon, seed).unwrap();
        let b = simulate_path(&env, x0, horizon, seed).unwrap();
        prop_assert_eq!(&a, &b);
        let mut prev = (0.0, a.start);
        for &(t, y) in &a.jumps {
            prop_assert!(t > prev.0 && t <= horizon);
            prop_assert!(y != prev.1);
            prev = (t, y);
        }
    }
}

#[test]
fn law_marginals_pass_ks() {
    use rcmlab_core::stats::{ks_pvalue, ks_statistic};
    let laws = [
        ConductanceLaw::PolynomialTail { p: 1.0, eps: 0.5 },
        ConductanceLaw::PolynomialTail { p: 2.0, eps: 0.2 },
        ConductanceLaw::BernoulliDegenerate { p0: 0.05, positive_law: Box::new(ConductanceLaw::PolynomialTail { p: 1.0, eps: 1.0 }) },
        ConductanceLaw::DyadicTrap { levels: 6, eps: 0.5, row_cap: 1e12 },
        ConductanceLaw::Custom { table: vec![(0.5, 0.25), (2.0, 0.75)] },
    ];
    for (k, law) in laws.iter().enumerate() {
        let env = sample_environment(law.clone(), LatticeSpec::full(1, 225), MuMode::Counting, 1.0, 40 + k as u64).unwrap();
        let lat = env.lattice();
        let mut sample = Vec::new();
        for x in 0..env.len() {
            for y in x + 1..env.len() {
                // Dyadic laws only apply unscaled to nearest neighbours.
                if matches!(law, ConductanceLaw::DyadicTrap { .. }) && lat.distance(x, y) > 1.0 {
                    continue;
                }
                sample.push(env.w(x, y));
            }
        }
        if !matches!(law, ConductanceLaw::DyadicTrap { .. }) {
            assert!(sample.len() >= 100_000);
        }
        let sampler = law.sampler().unwrap();
        let d = ks_statistic(&sample, |x| sampler.cdf(x));
        let p = ks_pvalue(d, sample.len());
        assert!(p >= 1e-3, "law {k}: D = {d}, p = {p}");
    }
}

#[test]
fn mc_kernel_matches_uniformization() {
    use rcmlab_core::walk::mc_heat_kernel;
    let env = sample_environment(ConductanceLaw::PolynomialTail { p: 1.0, eps: 0.5 }, LatticeSpec::full(1, 99), MuMode::Counting, 1.0, 9)
        .unwrap();
    assert_eq!(env.len(), 199);
    let x0 = env.lattice().origin();
    let exact = heat_kernel(&Generator::full(&env), 2.0, x0, TOL).unwrap();
    let mc = mc_heat_kernel(&env, 2.0, x0, 100_000, 3).unwrap();
    let mu = env.mu();
    let (mut good, mut total) = (0, 0);
    for y in 0..env.len() {
        if exact.values[y] * mu[y] >= 1e-3 {
            total += 1;
            if (mc.density[y] - exact.values[y]).abs() <= 4.0 * mc.stderr[y] {
                good += 1;
            }
        }
    }
    assert!(good as f64 >= 0.99 * total as f64, "{good}/{total}");
    let small = mc_heat_kernel(&env, 2.0, x0, 50_000, 3).unwrap();
    let big = small.stderr.iter().cloned().fold(0.0, f64::max) / mc.stderr.iter().cloned().fold(0.0, f64::max);
    assert!((big / 2f64.sqrt() - 1.0).abs() < 0.2, "{big}");
}

#[test]
fn exit_cdf_matches_killed_mass() {
    use rcmlab_core::stats::mean_and_stderr;
    let env = sample_environment(ConductanceLaw::Custom { table: vec![(0.5, 0.5), (2.0, 0.5)] }, LatticeSpec::full(1, 20), MuMode::Counting, 1.0, 2)
        .unwrap();
    let lat = env.lattice();
    let x0 = lat.origin();
    let ball = lat.ball(x0, 6.0);
    let mut inside = vec![false; env.len()];
    for &s in &ball {
        inside[s] = true;
    }
    let walker = Walker::new(&env);
    let taus: Vec<f64> = (0..20_000).map(|i| walker.exit_time(x0, &inside, &mut sample_rng(17, i)).unwrap().0).collect();
    let killed = Generator::killed(&env, &ball).unwrap();
    for t in [0.5, 1.0, 2.0, 4.0, 8.0] {
        let p = dirichlet_heat_kernel(&killed, t, x0, TOL).unwrap();
        let exact = 1.0 - p.mass(killed.mu());
        let hits: Vec<f64> = taus.iter().map(|&s| if s <= t { 1.0 } else { 0.0 }).collect();
        let (m, se) = mean_and_stderr(&hits);
        assert!((m - exact).abs() <= 4.0 * se.max(1e-4), "t={t}: {m} vs {exact}");
    }
}

#[test]
fn stationary_flux_is_balanced() {
    use rand::Rng;
    let env = sample_environment(ConductanceLaw::PolynomialTail { p: 1.0, eps: 0.5 }, LatticeSpec::torus(1, 8), MuMode::Counting, 1.0, 4)
        .unwrap();
    let n = env.len();
    let (a, b) = (3usize, 4usize);
    let walker = Walker::new(&env);
    let (mut ab, mut ba) = (0u64, 0u64);
    for i in 0..20_000u64 {
        let mut rng = sample_rng(99, i);
        let mut x = rng.random_range(0..n);
        let mut t = 0.0;
        while let Some((hold, y)) = walker.step(x, &mut rng) {
            t += hold;
            if t > 3.0 {
                break;
            }
            if (x, y) == (a, b) {
                ab += 1;
            } else if (x, y) == (b, a) {
                ba += 1;
            }
            x = y;
        }
    }
    let diff = ab as f64 - ba as f64;
    assert!(ab + ba > 100);
    assert!(diff.abs() <= 4.0 * ((ab + ba) as f64).sqrt(), "{ab} vs {ba}");
}

#[test]
fn levy_three_site_closed_form() {
    use rcmlab_core::walk::levy_system_check;
    let env = Environment::constant(LatticeSpec::full(1, 1), 1.0, 1.0).unwrap();
    let lat = env.lattice();
    let c = lat.origin();
    let left = lat.index_of(&[-1]).unwrap();
    let f = move |x: usize, y: usize| if x == c && y == left { 1.0 } else { 0.0 };
    let rep = levy_system_check(&env, c, &[c], &f, 10_000, 1).unwrap();
    // Exit to the left with probability 1/2; rate J(c,left) times E[tau] is 1/2.
    assert!((rep.lhs - 0.5).abs() <= 4.0 * (0.25f64 / 1e4).sqrt());
    assert!((rep.rhs - 0.5).abs() <= 4.0 * (0.25f64 / 1e4).sqrt());
    assert!(rep.residual.abs() <= 3.0 * rep.stderr);
    let zero = levy_system_check(&env, c, &[c], &|_, _| 0.0, 100, 1).unwrap();
    assert_eq!((zero.lhs, zero.rhs), (0.0, 0.0));
}

#[test]
fn trap_chain_basics() {
    use rcmlab_core::trap::{trap_return_probability, DEFAULT_POWER_BUDGET};
    let rep = trap_return_probability(3, &[0, 2, 4], LatticeSpec::full(2, 6), 0.5, 1.0, DEFAULT_POWER_BUDGET).unwrap();
    assert_eq!(rep.rows[0].p_return, 1.0);
    assert!(rep.mass_error <= 1e-12);
    assert!(rep.rows.iter().all(|r| r.p_return > 0.0 && r.p_return <= 1.0));
}
