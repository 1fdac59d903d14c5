//! Acceptance suite. Runs every criterion, prints one line each and exits
//! non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rcmlab::experiments::Outcome;
use rcmlab::{resolve, run};
use rcmlab_core::env::{sample_environment, Environment, MuMode};
use rcmlab_core::heat::{dirichlet_heat_kernel, eigen_heat_kernel, heat_kernel, heat_kernel_multi};
use rcmlab_core::lattice::LatticeSpec;
use rcmlab_core::law::ConductanceLaw;
use rcmlab_core::markov::Generator;
use rcmlab_core::stable::{stable_symbol_constant, StableDensity};
use serde_json::{json, Value};

type Verdict = (bool, String);

fn run_config(doc: Value) -> Outcome {
    let cfg = resolve(doc, None, &[]).unwrap_or_else(|e| panic!("config rejected: {e:?}"));
    run(&cfg).unwrap_or_else(|e| panic!("run failed: {e}"))
}

fn checks_pass(out: &Outcome, prefix: &str) -> bool {
    let picked: Vec<_> = out.checks.iter().filter(|c| c.name.starts_with(prefix)).collect();
    !picked.is_empty() && picked.iter().all(|c| c.pass)
}

fn values(out: &Outcome, prefix: &str) -> Vec<f64> {
    out.checks.iter().filter(|c| c.name.starts_with(prefix)).filter_map(|c| c.value).collect()
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn uniformization_vs_eigen() -> Verdict {
    let laws = [
        ConductanceLaw::Constant { value: 1.0 },
        ConductanceLaw::PolynomialTail { p: 1.0, eps: 0.5 },
        ConductanceLaw::BernoulliDegenerate { p0: 0.2, positive_law: Box::new(ConductanceLaw::Constant { value: 2.0 }) },
        ConductanceLaw::Custom { table: vec![(0.2, 0.5), (3.0, 0.5)] },
        ConductanceLaw::PolynomialTail { p: 2.0, eps: 0.3 },
    ];
    let specs = [LatticeSpec::full(1, 99), LatticeSpec::full(2, 6)];
    let mut worst = 0.0f64;
    let mut sites = 0;
    for (k, law) in laws.iter().enumerate() {
        for (j, spec) in specs.iter().enumerate() {
            let alpha = 0.5 + 0.25 * (k + j) as f64;
            let env = sample_environment(law.clone(), *spec, MuMode::Counting, alpha, (10 * k + j) as u64).unwrap();
            sites = sites.max(env.len());
            let gen = Generator::full(&env);
            let times = [0.1, 1.0, 5.0];
            let x0 = env.lattice().origin();
            let a = heat_kernel_multi(&gen, &times, x0, 1e-12).unwrap();
            let b = eigen_heat_kernel(&gen, &times, x0).unwrap();
            for (fa, fb) in a.iter().zip(&b) {
                for (u, v) in fa.values.iter().zip(&fb.values) {
                    worst = worst.max((u - v).abs());
                }
            }
        }
    }
    (worst <= 1e-8 && sites <= 200, format!("10 environments, max sites {sites}, max-norm gap {worst:.2e} (<= 1e-8)"))
}

fn invariant_corpus() -> Verdict {
    let laws = [
        ConductanceLaw::Constant { value: 1.5 },
        ConductanceLaw::BernoulliDegenerate { p0: 0.25, positive_law: Box::new(ConductanceLaw::Constant { value: 1.0 }) },
        ConductanceLaw::PolynomialTail { p: 1.0, eps: 0.5 },
        ConductanceLaw::DyadicTrap { levels: 4, eps: 0.5, row_cap: 1e12 },
        ConductanceLaw::Custom { table: vec![(0.5, 0.3), (2.0, 0.7)] },
    ];
    let specs = [LatticeSpec::full(1, 10), LatticeSpec::full(2, 4), LatticeSpec::torus(1, 8), LatticeSpec::full(1, 6)];
    let tol = 1e-10;
    let mut failures = Vec::new();
    let mut cases = 0;
    for (k, law) in laws.iter().enumerate() {
        for (j, spec) in specs.iter().enumerate() {
            cases += 1;
            let mut env = sample_environment(law.clone(), *spec, MuMode::Counting, 0.4 + 0.3 * j as f64, (k * 7 + j) as u64).unwrap();
            // Odd cases use the speed measure so the symmetry check sees a non-uniform measure.
            if (k + j) % 2 == 1 && env.set_mu_mode(MuMode::Csrw).is_err() {
                env = sample_environment(law.clone(), *spec, MuMode::Counting, 1.0, (k * 7 + j) as u64).unwrap();
            }
            if let Err(msg) = corpus_case(&env, tol) {
                failures.push(format!("case {cases}: {msg}"));
            }
        }
    }
    (failures.is_empty(), format!("{cases} cases over 5 laws; failures: {failures:?}"))
}

fn corpus_case(env: &Environment, tol: f64) -> Result<(), String> {
    let gen = Generator::full(env);
    let mu = gen.mu().to_vec();
    let n = gen.len();
    let x0 = env.lattice().origin();
    let y = n - 1;
    let (t, s) = (0.7, 1.3);
    let pt = heat_kernel(&gen, t, x0, tol).map_err(|e| e.to_string())?;
    let ps = heat_kernel(&gen, s, y, tol).map_err(|e| e.to_string())?;
    let pts = heat_kernel(&gen, t + s, x0, tol).map_err(|e| e.to_string())?;
    if (pt.mass(&mu) - 1.0).abs() > 10.0 * tol {
        return Err(format!("mass {}", pt.mass(&mu)));
    }
    let composed: f64 = (0..n).map(|z| pt.values[z] * ps.values[z] * mu[z]).sum();
    if (pts.values[y] - composed).abs() > 20.0 * tol * pts.values[y].max(1.0) {
        return Err("semigroup".into());
    }
    let pty = heat_kernel(&gen, t, y, tol).map_err(|e| e.to_string())?;
    if (pt.values[y] - pty.values[x0]).abs() > 10.0 * tol * pt.values[y].max(1.0) {
        return Err("symmetry".into());
    }
    let domain = env.lattice().ball(x0, 2.0);
    let killed = Generator::killed(env, &domain).map_err(|e| e.to_string())?;
    let pd = dirichlet_heat_kernel(&killed, t, x0, tol).map_err(|e| e.to_string())?;
    for (i, &site) in pd.sites.iter().enumerate() {
        if pd.values[i] > pt.values[site] + 3.0 * tol {
            return Err(format!("domination at site {site}"));
        }
    }
    Ok(())
}

fn bounds_refinement() -> Verdict {
    let out = run_config(json!({
        "experiment": "bounds-check",
        "environment": {"lattice": {"half_dims": 0, "full_dims": 1, "radius": 512, "boundary": "torus"}, "alpha": 1.0},
        "params": {"t_grid": [8, 16, 32, 64], "y_radius": 256, "y_step": 2, "refine": true, "refine_tolerance": 0.2},
    }));
    let ratio = values(&out, "ratio_finite");
    let change = values(&out, "refinement");
    let pass = checks_pass(&out, "ratio_finite") && checks_pass(&out, "refinement");
    (pass, format!("C2_up/C1_low {} finite, refinement change {} (<= 0.2)", fmt(&ratio), fmt(&change)))
}

fn exit_scaling() -> Verdict {
    let out = run_config(json!({
        "experiment": "exit-times",
        "environment": {"lattice": {"half_dims": 0, "full_dims": 1, "radius": 1024, "boundary": "torus"}, "alpha": 1.0},
        "params": {"r_grid": [8, 16, 32, 64], "nsamples": 10000, "exponent_tolerance": 0.2},
        "seed": 11,
    }));
    let pass = checks_pass(&out, "exponent") && checks_pass(&out, "c0");
    (pass, format!("exponent {} (1 +- 0.2), C0 {}", fmt(&values(&out, "exponent")), fmt(&values(&out, "c0"))))
}

fn martingale_identities() -> Verdict {
    let envs = [json!({"kind": "constant", "value": 1.0}), json!({"kind": "polynomial_tail", "p": 1.0, "eps": 0.5})];
    let mut pass = true;
    let mut worst = 0.0f64;
    let mut cases = 0;
    for law in &envs {
        let environment = json!({"lattice": {"half_dims": 0, "full_dims": 1, "radius": 64}, "law": law, "alpha": 1.0, "seeds": [3]});
        let d = run_config(json!({
            "experiment": "dynkin-hunt",
            "environment": environment,
            "params": {"domain_radius": 32, "t": 8, "targets": [[0], [5], [20], [40]], "nsamples": 10000, "sigmas": 3},
            "seed": 5,
        }));
        let l = run_config(json!({
            "experiment": "levy-system",
            "environment": environment,
            "params": {
                "domain_radius": 32,
                "nsamples": 10000,
                "sigmas": 3,
                "functions": [
                    {"kind": "lands_in_half_space", "axis": 0, "threshold": 10},
                    {"kind": "any_jump"},
                    {"kind": "lands_in_ball", "center": [-8], "radius": 4},
                ],
            },
            "seed": 6,
        }));
        for out in [&d, &l] {
            for c in out.checks.iter().filter(|c| c.name.starts_with("residual")) {
                cases += 1;
                pass &= c.pass;
                let z = c.value.unwrap_or(f64::NAN).abs();
                worst = worst.max(z);
            }
        }
        pass &= checks_pass(&d, "residual") && checks_pass(&l, "residual");
    }
    (pass, format!("{cases} residuals within 3 paired standard errors, max |residual| {worst:.3e}"))
}

fn green_exponent() -> Verdict {
    let big = run_config(json!({
        "experiment": "green",
        "environment": {"lattice": {"half_dims": 0, "full_dims": 2, "radius": 64}, "alpha": 1.0},
        "params": {"domain_radius": 48, "fit_range": [4, 24], "slope_tolerance": 0.2},
        "caps": {"site_cap": 20000},
    }));
    let small = run_config(json!({
        "experiment": "green",
        "environment": {"lattice": {"half_dims": 0, "full_dims": 2, "radius": 16}, "alpha": 1.0},
        "params": {"domain_radius": 12, "fit_range": [2, 8], "slope_tolerance": 1.0, "cross_check": true, "cross_tolerance": 1e-6},
    }));
    let pass = checks_pass(&big, "slope") && checks_pass(&small, "dual_method");
    (pass, format!("slope {} (-1 +- 0.2), dual gap {}", fmt(&values(&big, "slope")), fmt(&values(&small, "dual_method"))))
}

fn harnack_medians(law: Value, seeds: Vec<u64>) -> Vec<(f64, f64)> {
    let out = run_config(json!({
        "experiment": "harnack",
        "environment": {"lattice": {"half_dims": 0, "full_dims": 2, "radius": 48}, "law": law, "alpha": 1.0, "seeds": seeds},
        "params": {"r_grid": [4, 8, 16], "box_factor": 3},
    }));
    assert!(checks_pass(&out, "ratios_at_least_one"));
    serde_json::from_value(out.results["medians"].clone()).unwrap()
}

fn ehi_versus_wehi() -> Verdict {
    let random = harnack_medians(json!({"kind": "polynomial_tail", "p": 1.0, "eps": 0.5}), (1..=20).collect());
    let constant = harnack_medians(json!({"kind": "constant", "value": 1.0}), vec![0]);
    let (first, last) = (random[0], random[random.len() - 1]);
    let growth = last.0 > first.0;
    let wehi = last.1 < 3.0 * first.1;
    let ce: Vec<f64> = constant.iter().map(|m| m.0).collect();
    let spread = ce.iter().cloned().fold(0.0, f64::max) / ce.iter().cloned().fold(f64::INFINITY, f64::min);
    let ehi: Vec<f64> = random.iter().map(|m| m.0).collect();
    let wh: Vec<f64> = random.iter().map(|m| m.1).collect();
    (
        growth && wehi && spread <= 3.0,
        format!("median EHI {} grows, median WEHI {} < 3x first, constant EHI {} spread {spread:.3} (<= 3)", fmt(&ehi), fmt(&wh), fmt(&ce)),
    )
}

fn trap_scaling() -> Verdict {
    let out = run_config(json!({
        "experiment": "trap-return",
        "environment": {"lattice": {"half_dims": 0, "full_dims": 2, "radius": 364, "boundary": "torus"}, "alpha": 1.0},
        "params": {"levels": [3, 4, 5, 6, 7, 8], "eps": 0.5, "max_factor": 10},
        "caps": {"site_cap": 600000},
    }));
    let pass = checks_pass(&out, "bounded_below") && checks_pass(&out, "within_factor") && checks_pass(&out, "stochastic");
    (
        pass,
        format!("min scaled return {}, max factor {} (<= 10)", fmt(&values(&out, "bounded_below")), fmt(&values(&out, "within_factor"))),
    )
}

fn stable_reference() -> Verdict {
    let pi = std::f64::consts::PI;
    let c = stable_symbol_constant(1, 1.0).unwrap();
    let k = StableDensity::new(1, 1.0, 1.0 / pi).unwrap();
    let mut gap = 0.0f64;
    for i in 0..=40 {
        let x = -10.0 + 0.5 * i as f64;
        let want = 1.0 / (pi * (1.0 + x * x));
        gap = gap.max((k.density(1.0, &[x]).unwrap().value - want).abs());
    }
    let masses = [k.total_mass(), StableDensity::new(2, 1.0, 1.0).unwrap().total_mass(), StableDensity::new(1, 1.5, 1.0).unwrap().total_mass()];
    let mass_gap = masses.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max);
    (
        (c - pi).abs() <= 1e-7 && gap <= 1e-6 && mass_gap <= 1e-4,
        format!("|c(1,1) - pi| {:.1e}, Cauchy gap {gap:.1e}, mass gap {mass_gap:.1e}", (c - pi).abs()),
    )
}

fn local_limit() -> Verdict {
    let out = run_config(json!({
        "experiment": "llt",
        "environment": {"lattice": {"half_dims": 0, "full_dims": 1, "radius": 8}, "alpha": 1.0},
        "params": {"n_grid": [4, 8, 16, 32]},
    }));
    let med: Vec<f64> = out.results["median"].as_array().unwrap().iter().map(|p| p[1].as_f64().unwrap()).collect();
    (checks_pass(&out, "strictly_decreasing"), format!("seed-median sup error {} strictly decreasing", fmt(&med)))
}

fn files_identical(a: &Path, b: &Path) -> Result<usize, String> {
    let mut names: Vec<_> = std::fs::read_dir(a).map_err(|e| e.to_string())?.map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for n in &names {
        let x = std::fs::read(a.join(n)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join(n)).map_err(|e| format!("{n:?}: {e}"))?;
        if x != y {
            return Err(format!("{n:?} differs"));
        }
    }
    let other = std::fs::read_dir(b).map_err(|e| e.to_string())?.count();
    if other != names.len() {
        return Err("file sets differ".into());
    }
    Ok(names.len())
}

fn rerun_determinism() -> Verdict {
    let bin = env!("CARGO_BIN_EXE_rcmlab");
    let dir = tempfile::tempdir().unwrap();
    let env1 = json!({"lattice": {"half_dims": 0, "full_dims": 1, "radius": 64}, "law": {"kind": "polynomial_tail", "p": 1.0, "eps": 0.5}, "alpha": 1.2, "seeds": [4, 5]});
    let cases = [
        ("exit-times", json!({"environment": env1, "params": {"r_grid": [4, 8], "nsamples": 2000}, "seed": 9})),
        ("levy-system", json!({"environment": env1, "params": {"domain_radius": 16, "nsamples": 2000}, "seed": 2})),
        (
            "heat-kernel",
            json!({"environment": {"lattice": {"half_dims": 1, "full_dims": 1, "radius": 8}, "alpha": 0.8, "law": {"kind": "custom", "table": [[0.5, 0.5], [2.0, 0.5]]}}, "params": {"t_grid": [0.5, 2.0]}}),
        ),
    ];
    let mut files = 0;
    for (name, cfg) in &cases {
        let path = dir.path().join(format!("{name}.json"));
        std::fs::write(&path, cfg.to_string()).unwrap();
        let first = dir.path().join(format!("{name}_a"));
        let second = dir.path().join(format!("{name}_b"));
        let status = Command::new(bin).arg(name).arg("--config").arg(&path).arg("--out").arg(&first).status().unwrap();
        if !status.success() {
            return (false, format!("{name}: first run exited {status}"));
        }
        let status = Command::new(bin).arg("rerun").arg(first.join("manifest.json")).arg("--out").arg(&second).status().unwrap();
        if !status.success() {
            return (false, format!("{name}: rerun exited {status}"));
        }
        match files_identical(&first, &second) {
            Ok(n) => files += n,
            Err(e) => return (false, format!("{name}: {e}")),
        }
    }
    (true, format!("3 experiments rerun from their manifests, {files} files byte-identical"))
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    run: fn() -> Verdict,
}

fn main() {
    let secs = Duration::from_secs;
    let criteria = [
        Criterion { id: 1, name: "uniformization matches eigensolver", limit: secs(30), run: uniformization_vs_eigen },
        Criterion { id: 2, name: "semigroup invariant corpus", limit: secs(120), run: invariant_corpus },
        Criterion { id: 3, name: "two-sided stable bound", limit: secs(300), run: bounds_refinement },
        Criterion { id: 4, name: "exit-time scaling", limit: secs(300), run: exit_scaling },
        Criterion { id: 5, name: "Dynkin-Hunt and Levy system", limit: secs(120), run: martingale_identities },
        Criterion { id: 6, name: "Green function exponent", limit: secs(180), run: green_exponent },
        Criterion { id: 7, name: "EHI failure versus WEHI", limit: secs(600), run: ehi_versus_wehi },
        Criterion { id: 8, name: "trap return scaling", limit: secs(180), run: trap_scaling },
        Criterion { id: 9, name: "stable reference density", limit: secs(60), run: stable_reference },
        Criterion { id: 10, name: "local limit theorem", limit: secs(600), run: local_limit },
        Criterion { id: 11, name: "rerun determinism", limit: Duration::MAX, run: rerun_determinism },
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| only.is_empty() || only.contains(&c.id)) {
        let start = Instant::now();
        let (ok, detail) = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            (false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = start.elapsed();
        let in_time = took <= c.limit;
        let pass = ok && in_time;
        if !pass {
            failed += 1;
        }
        let timing = if in_time { String::new() } else { " [over time limit]".to_string() };
        println!(
            "criterion {:>2} {:<36} {} ({:.1}s) {detail}{timing}",
            c.id,
            c.name,
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
