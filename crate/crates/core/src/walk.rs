//! Exact simulation of the continuous-time chain and Monte Carlo checks.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::heat::{heat_kernel, poisson_weights};
use crate::markov::{Generator, KernelEval};
use crate::stats::{linear_fit, mean_and_stderr, quantile};

/// Cap on cached alias-table entries (sites times row length).
const CACHE_ENTRIES: usize = 1 << 26;
const MAX_JUMPS: usize = 50_000_000;

struct SiteTable {
    alias: Option<WeightedAliasIndex<f64>>,
    /// Total jump rate `sum_y J(x, y) / mu(x)`.
    rate: f64,
}

struct Cache {
    tables: HashMap<usize, (Arc<SiteTable>, u64)>,
    tick: u64,
    capacity: usize,
}

/// Simulator over an environment with lazily built per-site alias tables.
pub struct Walker<'a> {
    env: &'a Environment,
    eval: KernelEval<'a>,
    inside: Option<Vec<bool>>,
    cache: Mutex<Cache>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    AliveAtT,
    Absorbed { site: usize, time: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: usize,
    /// `(jump time, site after the jump)`.
    pub jumps: Vec<(f64, usize)>,
    pub status: Status,
}

impl Trajectory {
    pub fn position_at(&self, t: f64) -> usize {
        let mut pos = self.start;
        for &(s, y) in &self.jumps {
            if s > t {
                break;
            }
            pos = y;
        }
        pos
    }
}

/// RNG for one sample: ChaCha8 keyed by `seed`, stream `sample`.
pub fn sample_rng(seed: u64, sample: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample);
    rng
}

impl<'a> Walker<'a> {
    pub fn new(env: &'a Environment) -> Self {
        let capacity = (CACHE_ENTRIES / env.len().max(1)).max(16);
        Walker {
            env,
            eval: KernelEval::new(env),
            inside: None,
            cache: Mutex::new(Cache { tables: HashMap::new(), tick: 0, capacity }),
        }
    }

    /// Kills the walk on its first jump out of `domain`.
    pub fn absorbing(env: &'a Environment, domain: &[usize]) -> Self {
        let mut w = Self::new(env);
        let mut inside = vec![false; env.len()];
        for &s in domain {
            inside[s] = true;
        }
        w.inside = Some(inside);
        w
    }

    pub fn env(&self) -> &Environment {
        self.env
    }

    fn table(&self, x: usize) -> Arc<SiteTable> {
        {
            let mut c = self.cache.lock().expect("cache lock");
            c.tick += 1;
            let tick = c.tick;
            if let Some(entry) = c.tables.get_mut(&x) {
                entry.1 = tick;
                return entry.0.clone();
            }
        }
        let n = self.env.len();
        let row: Vec<f64> = (0..n).map(|y| self.eval.entry(x, y)).collect();
        let total: f64 = row.iter().sum();
        let table = Arc::new(SiteTable {
            alias: if total > 0.0 { WeightedAliasIndex::new(row).ok() } else { None },
            rate: total / self.env.mu()[x],
        });
        let mut c = self.cache.lock().expect("cache lock");
        if c.tables.len() >= c.capacity {
            if let Some(&old) = c.tables.iter().min_by_key(|(_, (_, t))| *t).map(|(k, _)| k) {
                c.tables.remove(&old);
            }
        }
        c.tick += 1;
        let tick = c.tick;
        c.tables.entry(x).or_insert((table, tick)).0.clone()
    }

    /// Total jump rate at `x`.
    pub fn rate(&self, x: usize) -> f64 {
        self.table(x).rate
    }

    /// One holding time and target; `None` at a frozen site.
    pub fn step(&self, x: usize, rng: &mut impl Rng) -> Option<(f64, usize)> {
        let t = self.table(x);
        let alias = t.alias.as_ref()?;
        let hold: f64 = rng.sample::<f64, _>(Exp1) / t.rate;
        Some((hold, rng.sample(alias)))
    }

    fn leaves(&self, y: usize) -> bool {
        self.inside.as_ref().is_some_and(|m| !m[y])
    }

    pub fn simulate_with(&self, x0: usize, horizon: f64, rng: &mut impl Rng) -> Result<Trajectory> {
        if x0 >= self.env.len() {
            return Err(Error::SiteOutOfBox(x0));
        }
        if !(horizon > 0.0) {
            return Err(Error::param("horizon", "must be positive"));
        }
        let mut t = 0.0;
        let mut x = x0;
        let mut jumps = Vec::new();
        loop {
            let Some((hold, y)) = self.step(x, rng) else {
                return Ok(Trajectory { start: x0, jumps, status: Status::AliveAtT });
            };
            t += hold;
            if t > horizon {
                return Ok(Trajectory { start: x0, jumps, status: Status::AliveAtT });
            }
            jumps.push((t, y));
            if self.leaves(y) {
                return Ok(Trajectory { start: x0, jumps, status: Status::Absorbed { site: y, time: t } });
            }
            if jumps.len() > MAX_JUMPS {
                return Err(Error::BudgetExceeded { requested: jumps.len() as u64, budget: MAX_JUMPS as u64 });
            }
            x = y;
        }
    }

    /// Exit time from a membership mask; infinite when the walk freezes inside.
    pub fn exit_time(&self, x0: usize, inside: &[bool], rng: &mut impl Rng) -> Result<(f64, usize)> {
        let mut t = 0.0;
        let mut x = x0;
        if !inside[x0] {
            return Ok((0.0, x0));
        }
        for _ in 0..MAX_JUMPS {
            let Some((hold, y)) = self.step(x, rng) else {
                return Ok((f64::INFINITY, x));
            };
            t += hold;
            if !inside[y] {
                return Ok((t, y));
            }
            x = y;
        }
        Err(Error::BudgetExceeded { requested: MAX_JUMPS as u64 + 1, budget: MAX_JUMPS as u64 })
    }
}

pub fn simulate_path(env: &Environment, x0: usize, horizon: f64, seed: u64) -> Result<Trajectory> {
    Walker::new(env).simulate_with(x0, horizon, &mut sample_rng(seed, 0))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExitStats {
    pub x0: usize,
    pub r: f64,
    pub nsamples: usize,
    pub mean: f64,
    pub stderr: f64,
    pub min: f64,
    pub max: f64,
    /// `(q, quantile)` pairs.
    pub quantiles: Vec<(f64, f64)>,
    /// `(s, P(tau <= s))` on a grid of multiples of `r^alpha`.
    pub cdf: Vec<(f64, f64)>,
    /// Samples use ChaCha8 streams `stream_base..stream_base + nsamples` under `seed`.
    pub seed: u64,
    pub stream_base: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExitReport {
    pub per_radius: Vec<ExitStats>,
    /// Slope of `log E[tau]` against `log r` over positive radii.
    pub exponent: Option<f64>,
    /// Largest `C0` with empirical `P(tau <= C0 r^alpha) <= 1/4` at every positive radius.
    pub c0: Option<f64>,
}

pub const QUANTILE_LEVELS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];

pub fn exit_time_stats(env: &Environment, x0: usize, r_grid: &[f64], nsamples: usize, seed: u64) -> Result<ExitReport> {
    if nsamples < 400 {
        return Err(Error::param("nsamples", "at least 400 samples are needed"));
    }
    if r_grid.is_empty() {
        return Err(Error::param("r_grid", "must not be empty"));
    }
    let lat = env.lattice();
    if x0 >= env.len() {
        return Err(Error::SiteOutOfBox(x0));
    }
    for &r in r_grid {
        let ok = if lat.is_torus() {
            2.0 * r < lat.spec().radius as f64
        } else {
            lat.ball_inside(x0, 2.0 * r)
        };
        if !(r >= 0.0) || !ok {
            return Err(Error::param("r_grid", format!("B(x0, 2r) must lie inside the box for r = {r}")));
        }
    }
    let walker = Walker::new(env);
    let alpha = env.alpha();
    let mut per_radius = Vec::new();
    let mut sorted_all = Vec::new();
    for (k, &r) in r_grid.iter().enumerate() {
        let inside = lat.ball_mask(x0, r);
        let stream_base = (k as u64) << 32;
        let taus: Vec<f64> = (0..nsamples)
            .into_par_iter()
            .map(|i| walker.exit_time(x0, &inside, &mut sample_rng(seed, stream_base + i as u64)).map(|v| v.0))
            .collect::<Result<_>>()?;
        let mut sorted = taus.clone();
        sorted.sort_by(f64::total_cmp);
        let (mean, stderr) = mean_and_stderr(&taus);
        let scale = if r > 0.0 { r.powf(alpha) } else { 1.0 };
        let cdf = (1..=40)
            .map(|j| {
                let s = scale * j as f64 * 0.05;
                (s, sorted.partition_point(|&t| t <= s) as f64 / nsamples as f64)
            })
            .collect();
        per_radius.push(ExitStats {
            x0,
            r,
            nsamples,
            mean,
            stderr,
            min: sorted[0],
            max: sorted[nsamples - 1],
            quantiles: QUANTILE_LEVELS.iter().map(|&q| (q, quantile(&sorted, q))).collect(),
            cdf,
            seed,
            stream_base,
        });
        sorted_all.push(sorted);
    }
    let positive: Vec<&ExitStats> = per_radius.iter().filter(|s| s.r > 0.0).collect();
    let exponent = (positive.len() >= 2 && positive.iter().all(|s| s.mean.is_finite())).then(|| {
        let xs: Vec<f64> = positive.iter().map(|s| s.r.ln()).collect();
        let ys: Vec<f64> = positive.iter().map(|s| s.mean.ln()).collect();
        linear_fit(&xs, &ys).slope
    });
    let c0 = if positive.is_empty() {
        None
    } else {
        let quarter = nsamples / 4;
        let mut best = f64::INFINITY;
        for (taus, &r) in sorted_all.iter().zip(r_grid) {
            if r <= 0.0 {
                continue;
            }
            // At most n/4 samples lie at or below any level strictly under the (n/4 + 1)-th order statistic.
            let bound = if quarter == 0 { 0.0 } else { taus[quarter - 1] };
            let next = taus[quarter];
            let c = if next > bound { bound } else { prev_below(next) };
            best = best.min(c / r.powf(alpha));
        }
        Some(best)
    };
    Ok(ExitReport { per_radius, exponent, c0 })
}

fn prev_below(x: f64) -> f64 {
    if x > 0.0 {
        f64::from_bits(x.to_bits() - 1)
    } else {
        0.0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McKernel {
    pub t: f64,
    pub x0: usize,
    pub nsamples: usize,
    pub density: Vec<f64>,
    pub stderr: Vec<f64>,
}

/// Histogram of `X_t` converted to a density with binomial standard errors.
pub fn mc_heat_kernel(env: &Environment, t: f64, x0: usize, nsamples: usize, seed: u64) -> Result<McKernel> {
    if nsamples < 1000 {
        return Err(Error::param("nsamples", "at least 1000 samples are needed"));
    }
    if !(t >= 0.0) {
        return Err(Error::param("t", "must be non-negative"));
    }
    let walker = Walker::new(env);
    let ends: Vec<Option<usize>> = (0..nsamples)
        .into_par_iter()
        .map(|i| {
            if t == 0.0 {
                return Ok(Some(x0));
            }
            let traj = walker.simulate_with(x0, t, &mut sample_rng(seed, i as u64))?;
            Ok(match traj.status {
                Status::AliveAtT => Some(traj.jumps.last().map(|j| j.1).unwrap_or(x0)),
                Status::Absorbed { .. } => None,
            })
        })
        .collect::<Result<_>>()?;
    let mut counts = vec![0u64; env.len()];
    for e in ends.into_iter().flatten() {
        counts[e] += 1;
    }
    let n = nsamples as f64;
    let mu = env.mu();
    let density = counts.iter().zip(mu).map(|(c, m)| *c as f64 / n / m).collect();
    let stderr = counts
        .iter()
        .zip(mu)
        .map(|(c, m)| {
            let p = *c as f64 / n;
            (p * (1.0 - p) / n).sqrt() / m
        })
        .collect();
    Ok(McKernel { t, x0, nsamples, density, stderr })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevyCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    /// Standard error of the per-path difference.
    pub stderr: f64,
    pub nsamples: usize,
}

/// Compares the mean sum of `f` over jumps up to the exit from `domain` with
/// the mean time integral of `sum_z f(X_s, z) J(X_s, z) / mu(X_s)`.
pub fn levy_system_check(
    env: &Environment,
    x0: usize,
    domain: &[usize],
    f: &(dyn Fn(usize, usize) -> f64 + Sync),
    nsamples: usize,
    seed: u64,
) -> Result<LevyCheck> {
    let n = env.len();
    if let Some(z) = (0..n).find(|&z| f(z, z) != 0.0) {
        return Err(Error::DiagonalNonzero(z));
    }
    if nsamples < 2 {
        return Err(Error::param("nsamples", "at least 2 samples are needed"));
    }
    let mut inside = vec![false; n];
    for &s in domain {
        inside[s] = true;
    }
    if !inside.get(x0).copied().unwrap_or(false) {
        return Err(Error::param("x0", "must lie in the domain"));
    }
    let walker = Walker::new(env);
    let eval = KernelEval::new(env);
    let mu = env.mu();
    let flux: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|x| {
            if !inside[x] {
                return 0.0;
            }
            (0..n).map(|z| {
                let fz = f(x, z);
                if fz == 0.0 { 0.0 } else { fz * eval.entry(x, z) }
            }).sum::<f64>() / mu[x]
        })
        .collect();
    let pairs: Vec<(f64, f64)> = (0..nsamples)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let mut x = x0;
            let (mut lhs, mut rhs) = (0.0, 0.0);
            for _ in 0..MAX_JUMPS {
                let Some((hold, y)) = walker.step(x, &mut rng) else {
                    return Err(Error::InsufficientData(format!("walk froze at site {x} before exiting")));
                };
                rhs += hold * flux[x];
                lhs += f(x, y);
                if !inside[y] {
                    return Ok((lhs, rhs));
                }
                x = y;
            }
            Err(Error::BudgetExceeded { requested: MAX_JUMPS as u64 + 1, budget: MAX_JUMPS as u64 })
        })
        .collect::<Result<_>>()?;
    let lhs = pairs.iter().map(|p| p.0).sum::<f64>() / nsamples as f64;
    let rhs = pairs.iter().map(|p| p.1).sum::<f64>() / nsamples as f64;
    let diffs: Vec<f64> = pairs.iter().map(|p| p.0 - p.1).collect();
    let (_, stderr) = mean_and_stderr(&diffs);
    Ok(LevyCheck { lhs, rhs, residual: lhs - rhs, stderr, nsamples })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DynkinHunt {
    pub full: f64,
    pub killed: f64,
    pub exit_term: f64,
    pub residual: f64,
    pub stderr: f64,
    pub exit_fraction: f64,
}

/// Monte Carlo check of `p(t,x0,y) = p^B(t,x0,y) + E[p(t - tau, X_tau, y); tau < t]`.
#[allow(clippy::too_many_arguments)]
pub fn dynkin_hunt_residual(
    env: &Environment,
    domain: &[usize],
    t: f64,
    x0: usize,
    y: usize,
    nsamples: usize,
    seed: u64,
    tol: f64,
) -> Result<DynkinHunt> {
    if nsamples < 1000 {
        return Err(Error::param("nsamples", "at least 1000 samples are needed"));
    }
    let n = env.len();
    if x0 >= n || y >= n {
        return Err(Error::SiteOutOfBox(x0.max(y)));
    }
    let full_gen = Generator::full(env);
    let full = heat_kernel(&full_gen, t, x0, tol)?.values[y];
    let killed_gen = Generator::killed(env, domain)?;
    if killed_gen.local(x0) == crate::markov::NOT_IN_DOMAIN {
        return Err(Error::param("x0", "must lie in the domain"));
    }
    let kf = heat_kernel(&killed_gen, t, x0, tol)?;
    let killed = match killed_gen.local(y) {
        crate::markov::NOT_IN_DOMAIN => 0.0,
        i => kf.values[i],
    };
    // Mass vectors started at y: p(s, z, y) = p(s, y, z) = sum_k Pois(lambda s; k) m_k(z) / mu(z).
    let lambda = full_gen.lambda();
    let (w_max, _) = poisson_weights(lambda * t, tol);
    let steps = w_max.len();
    if steps.saturating_mul(n) > 100_000_000 {
        return Err(Error::BudgetExceeded { requested: (steps * n) as u64, budget: 100_000_000 });
    }
    let mut powers = Vec::with_capacity(steps);
    let mut m = vec![0.0; n];
    m[y] = 1.0;
    let mut next = vec![0.0; n];
    for k in 0..steps {
        powers.push(m.clone());
        if k + 1 < steps {
            full_gen.step_mass(&m, &mut next, lambda);
            std::mem::swap(&mut m, &mut next);
        }
    }
    let mu = env.mu();
    let kernel_from_y = |s: f64, z: usize| -> f64 {
        let (w, _) = poisson_weights(lambda * s, tol);
        w.iter().zip(&powers).map(|(wk, pk)| wk * pk[z]).sum::<f64>() / mu[z]
    };
    let mut inside = vec![false; n];
    for &s in domain {
        inside[s] = true;
    }
    let walker = Walker::new(env);
    let samples: Vec<(f64, bool)> = (0..nsamples)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let (tau, z) = walker.exit_time(x0, &inside, &mut rng)?;
            if tau < t {
                Ok((kernel_from_y(t - tau, z), true))
            } else {
                Ok((0.0, false))
            }
        })
        .collect::<Result<_>>()?;
    let values: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let (exit_term, stderr) = mean_and_stderr(&values);
    let exit_fraction = samples.iter().filter(|s| s.1).count() as f64 / nsamples as f64;
    Ok(DynkinHunt { full, killed, exit_term, residual: full - killed - exit_term, stderr, exit_fraction })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::LatticeSpec;
    use crate::stats::{ks_pvalue, ks_statistic};

    #[test]
    fn seed_determinism() {
        let env = Environment::constant(LatticeSpec::full(1, 20), 1.0, 1.0).unwrap();
        let a = simulate_path(&env, 20, 50.0, 9).unwrap();
        let b = simulate_path(&env, 20, 50.0, 9).unwrap();
        let c = simulate_path(&env, 20, 50.0, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for w in a.jumps.windows(2) {
            assert!(w[1].0 > w[0].0);
        }
    }

    #[test]
    fn holding_times_are_exponential() {
        let env = Environment::constant(LatticeSpec::full(1, 10), 1.0, 1.0).unwrap();
        let walker = Walker::new(&env);
        let rate = walker.rate(10);
        let mut rng = sample_rng(1, 0);
        let holds: Vec<f64> = (0..10_000).map(|_| walker.step(10, &mut rng).unwrap().0).collect();
        let d = ks_statistic(&holds, |x| if x <= 0.0 { 0.0 } else { 1.0 - (-rate * x).exp() });
        assert!(ks_pvalue(d, holds.len()) > 1e-3);
    }

    #[test]
    fn absorbed_near_boundary() {
        let env = Environment::constant(LatticeSpec::full(1, 10), 1.0, 1.0).unwrap();
        let lat = env.lattice();
        let domain = lat.ball(lat.origin(), 5.0);
        let x0 = lat.index_of(&[5]).unwrap();
        let traj = Walker::absorbing(&env, &domain).simulate_with(x0, 1e6, &mut sample_rng(3, 0)).unwrap();
        match traj.status {
            Status::Absorbed { site, .. } => assert!(!domain.contains(&site)),
            _ => panic!("expected absorption"),
        }
    }

    #[test]
    fn first_jump_mean() {
        let env = Environment::constant(LatticeSpec::full(1, 40), 1.0, 1.0).unwrap();
        let o = env.lattice().origin();
        let rep = exit_time_stats(&env, o, &[0.0], 4000, 5).unwrap();
        let rate = Walker::new(&env).rate(o);
        let s = &rep.per_radius[0];
        assert!((s.mean - 1.0 / rate).abs() < 3.0 * s.stderr, "{} vs {}", s.mean, 1.0 / rate);
        assert!(exit_time_stats(&env, o, &[2.0], 399, 5).is_err());
    }

    #[test]
    fn levy_rejects_diagonal() {
        let env = Environment::constant(LatticeSpec::full(1, 5), 1.0, 1.0).unwrap();
        let dom: Vec<usize> = (3..8).collect();
        let f = |_: usize, _: usize| 1.0;
        assert!(matches!(levy_system_check(&env, 5, &dom, &f, 10, 0), Err(Error::DiagonalNonzero(_))));
        let zero = |_: usize, _: usize| 0.0;
        let r = levy_system_check(&env, 5, &dom, &zero, 100, 0).unwrap();
        assert_eq!((r.lhs, r.rhs), (0.0, 0.0));
    }
}
