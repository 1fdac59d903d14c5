//! Heat kernels by uniformization, with an eigensolver oracle and bound scans.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::markov::{Generator, NOT_IN_DOMAIN};
use crate::stats::linear_fit;

pub const DEFAULT_MAX_STEPS: usize = 2_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Full,
    Dirichlet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMethod {
    Uniformization,
    Eigensolve,
    ScalingSquaring,
}

/// `p(t, x0, .)` as a density with respect to `mu` on the generator's domain.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeatKernelField {
    pub t: f64,
    pub x0: usize,
    /// Box indices of the domain; `values[i]` belongs to `sites[i]`.
    pub sites: Vec<usize>,
    pub values: Vec<f64>,
    pub kind: KernelKind,
    pub method: KernelMethod,
    /// Bound on the max-norm error of `values`.
    pub trunc_error: f64,
}

impl HeatKernelField {
    /// Total mass `sum_y p mu(y)`.
    pub fn mass(&self, mu: &[f64]) -> f64 {
        self.values.iter().zip(mu).map(|(p, m)| p * m).sum()
    }

    pub fn at(&self, local: usize) -> f64 {
        self.values[local]
    }
}

/// Poisson(`rate`) weights `0..=k` with `sum_{j > k} < tol`, and that tail.
pub fn poisson_weights(rate: f64, tol: f64) -> (Vec<f64>, f64) {
    if rate == 0.0 {
        return (vec![1.0], 0.0);
    }
    let mode = rate.floor();
    let log_mode = -rate + mode * rate.ln() - ln_gamma(mode + 1.0);
    let mode = mode as usize;
    let mut w = vec![0.0; mode + 1];
    w[mode] = log_mode.exp();
    for k in (1..=mode).rev() {
        w[k - 1] = w[k] * k as f64 / rate;
    }
    // Extend past the mode until the geometric remainder is negligible.
    let floor = tol * 1e-6;
    let mut k = mode;
    loop {
        let next = w[k] * rate / (k + 1) as f64;
        w.push(next);
        k += 1;
        let ratio = rate / (k + 1) as f64;
        if ratio < 0.5 && next / (1.0 - ratio) < floor {
            break;
        }
        if next == 0.0 {
            break;
        }
    }
    let last = w.len() - 1;
    let rest = {
        let ratio = rate / (last + 2) as f64;
        w[last] * ratio / (1.0 - ratio)
    };
    let mut tail = rest;
    let mut cut = last;
    while cut > 0 {
        let t = tail + w[cut];
        if t >= tol {
            break;
        }
        tail = t;
        cut -= 1;
    }
    w.truncate(cut + 1);
    (w, tail)
}

/// Uniformization for several times in one pass over `(I + Q/lambda)^k`.
pub fn heat_kernel_multi(gen: &Generator, times: &[f64], x0: usize, tol: f64) -> Result<Vec<HeatKernelField>> {
    heat_kernel_multi_budget(gen, times, x0, tol, DEFAULT_MAX_STEPS)
}

pub fn heat_kernel_multi_budget(
    gen: &Generator,
    times: &[f64],
    x0: usize,
    tol: f64,
    max_steps: usize,
) -> Result<Vec<HeatKernelField>> {
    if !(tol > 0.0 && tol <= 1e-6) {
        return Err(Error::param("tol", "must lie in (0, 1e-6]"));
    }
    if let Some(t) = times.iter().find(|t| !(**t >= 0.0 && t.is_finite())) {
        return Err(Error::param("t", format!("must be finite and non-negative, got {t}")));
    }
    let start = local_of(gen, x0)?;
    let m = gen.len();
    let lambda = gen.lambda().max(f64::MIN_POSITIVE);
    let kind = if gen.is_killed() { KernelKind::Dirichlet } else { KernelKind::Full };
    let min_mu = gen.mu().iter().cloned().fold(f64::INFINITY, f64::min);
    let mut plans = Vec::with_capacity(times.len());
    for &t in times {
        let rate = lambda * t;
        if rate > max_steps as f64 {
            plans.push(None);
        } else {
            let (w, tail) = poisson_weights(rate, tol);
            if w.len() > max_steps {
                plans.push(None);
            } else {
                plans.push(Some((w, tail)));
            }
        }
    }
    let steps = plans.iter().flatten().map(|(w, _)| w.len()).max().unwrap_or(0);
    let mut acc: Vec<Vec<f64>> = plans.iter().map(|_| vec![0.0; m]).collect();
    let mut mass = vec![0.0; m];
    mass[start] = 1.0;
    let mut next = vec![0.0; m];
    for k in 0..steps {
        for (plan, out) in plans.iter().zip(acc.iter_mut()) {
            if let Some((w, _)) = plan {
                if let Some(&wk) = w.get(k) {
                    if wk != 0.0 {
                        for (o, v) in out.iter_mut().zip(&mass) {
                            *o += wk * v;
                        }
                    }
                }
            }
        }
        if k + 1 < steps {
            gen.step_mass(&mass, &mut next, lambda);
            std::mem::swap(&mut mass, &mut next);
        }
    }
    let mut fields = Vec::with_capacity(times.len());
    for ((plan, out), &t) in plans.iter().zip(acc).zip(times) {
        let field = match plan {
            Some((_, tail)) => HeatKernelField {
                t,
                x0,
                sites: gen.sites().to_vec(),
                values: out.iter().zip(gen.mu()).map(|(a, b)| a / b).collect(),
                kind,
                method: KernelMethod::Uniformization,
                trunc_error: tail / min_mu,
            },
            None => scaling_squaring(gen, t, x0, tol)?,
        };
        fields.push(field);
    }
    Ok(fields)
}

pub fn heat_kernel(gen: &Generator, t: f64, x0: usize, tol: f64) -> Result<HeatKernelField> {
    Ok(heat_kernel_multi(gen, &[t], x0, tol)?.remove(0))
}

/// Heat kernel of the process killed on leaving the generator's domain.
pub fn dirichlet_heat_kernel(gen: &Generator, t: f64, x0: usize, tol: f64) -> Result<HeatKernelField> {
    if gen.local(x0) == NOT_IN_DOMAIN {
        return Err(Error::param("x0", "must lie in the killing domain"));
    }
    heat_kernel(gen, t, x0, tol)
}

fn local_of(gen: &Generator, x0: usize) -> Result<usize> {
    if x0 >= gen.local_len() {
        return Err(Error::SiteOutOfBox(x0));
    }
    match gen.local(x0) {
        NOT_IN_DOMAIN => Err(Error::param("x0", "must lie in the domain")),
        i => Ok(i),
    }
}

/// Symmetrized rate matrix `mu^{1/2} Q mu^{-1/2}`.
fn symmetric_form(gen: &Generator) -> nalgebra::DMatrix<f64> {
    let m = gen.len();
    let mu = gen.mu();
    nalgebra::DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            gen.rate(i, i)
        } else {
            gen.jump(i, j) / (mu[i] * mu[j]).sqrt()
        }
    })
}

/// Dense eigendecomposition oracle for small domains.
pub fn eigen_heat_kernel(gen: &Generator, times: &[f64], x0: usize) -> Result<Vec<HeatKernelField>> {
    let start = local_of(gen, x0)?;
    let m = gen.len();
    if m > 2000 {
        return Err(Error::BudgetExceeded { requested: m as u64, budget: 2000 });
    }
    let eig = symmetric_form(gen).symmetric_eigen();
    let mu = gen.mu();
    let kind = if gen.is_killed() { KernelKind::Dirichlet } else { KernelKind::Full };
    Ok(times
        .iter()
        .map(|&t| {
            let coef: Vec<f64> = (0..m)
                .map(|k| eig.eigenvectors[(start, k)] * (t * eig.eigenvalues[k]).exp())
                .collect();
            let values = (0..m)
                .map(|y| {
                    let s: f64 = (0..m).map(|k| coef[k] * eig.eigenvectors[(y, k)]).sum();
                    s / (mu[start] * mu[y]).sqrt()
                })
                .collect();
            HeatKernelField {
                t,
                x0,
                sites: gen.sites().to_vec(),
                values,
                kind,
                method: KernelMethod::Eigensolve,
                trunc_error: 1e-12,
            }
        })
        .collect())
}

/// `exp(tQ)` by Taylor expansion of a scaled matrix and repeated squaring.
fn scaling_squaring(gen: &Generator, t: f64, x0: usize, tol: f64) -> Result<HeatKernelField> {
    let m = gen.len();
    if m > 2000 {
        return Err(Error::BudgetExceeded { requested: m as u64, budget: 2000 });
    }
    let start = local_of(gen, x0)?;
    let norm = 2.0 * gen.lambda() * t;
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scale = t / 2f64.powi(squarings);
    let q = nalgebra::DMatrix::from_fn(m, m, |i, j| gen.rate(i, j) * scale);
    let mut term = nalgebra::DMatrix::<f64>::identity(m, m);
    let mut e = term.clone();
    for k in 1..30 {
        term = &term * &q / k as f64;
        e += &term;
        if term.amax() < 1e-18 {
            break;
        }
    }
    for _ in 0..squarings {
        e = &e * &e;
    }
    let mu = gen.mu();
    Ok(HeatKernelField {
        t,
        x0,
        sites: gen.sites().to_vec(),
        values: (0..m).map(|y| e[(start, y)].max(0.0) / mu[y]).collect(),
        kind: if gen.is_killed() { KernelKind::Dirichlet } else { KernelKind::Full },
        method: KernelMethod::ScalingSquaring,
        trunc_error: tol.max(1e-12 * 2f64.powi(squarings)),
    })
}

/// `t^{-d/alpha} min t / rho^{d+alpha}`.
pub fn stable_profile(t: f64, rho: f64, dim: usize, alpha: f64) -> f64 {
    let on = t.powf(-(dim as f64) / alpha);
    if rho == 0.0 {
        return on;
    }
    on.min(t / rho.powf(dim as f64 + alpha))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    OnDiagonal,
    OffDiagonal,
    Crossover,
}

pub fn regime(t: f64, rho: f64, dim: usize, alpha: f64) -> Regime {
    let on = t.powf(-(dim as f64) / alpha);
    let off = if rho == 0.0 { f64::INFINITY } else { t / rho.powf(dim as f64 + alpha) };
    if (on - off).abs() <= 1e-12 * on.max(off) {
        Regime::Crossover
    } else if on < off {
        Regime::OnDiagonal
    } else {
        Regime::OffDiagonal
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundPoint {
    pub t: f64,
    pub site: usize,
    pub rho: f64,
    pub p: f64,
    pub phi: f64,
    pub ratio: f64,
    pub regime: Regime,
    /// Below the noise floor `10 * trunc_error`; not used in the fit.
    pub excluded: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundsReport {
    pub x0: usize,
    pub c1_low: f64,
    pub c2_up: f64,
    pub ratio: f64,
    pub excluded: usize,
    pub points: Vec<BoundPoint>,
    /// Survival of the chain killed on the inner ball, per time (absorbing boxes only).
    pub retention: Option<Vec<(f64, f64)>>,
    pub retention_ok: Option<bool>,
    /// Smallest grid time from which every later point satisfies the reference bounds.
    pub smallest_passing_t: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct BoundsOptions {
    pub tol: f64,
    pub reference: Option<(f64, f64)>,
    pub retention_threshold: f64,
}

impl Default for BoundsOptions {
    fn default() -> Self {
        BoundsOptions { tol: 1e-12, reference: None, retention_threshold: 0.99 }
    }
}

/// Extremal constants `C1 <= p / phi <= C2` over a `(t, y)` scan.
pub fn bounds_check(
    env: &Environment,
    x0: usize,
    t_grid: &[f64],
    y_set: &[usize],
    opts: &BoundsOptions,
) -> Result<BoundsReport> {
    if t_grid.is_empty() || y_set.is_empty() {
        return Err(Error::InsufficientData("empty time grid or target set".into()));
    }
    let lat = env.lattice();
    if x0 >= env.len() {
        return Err(Error::SiteOutOfBox(x0));
    }
    let gen = Generator::full(env);
    let fields = heat_kernel_multi(&gen, t_grid, x0, opts.tol)?;
    let mut points = Vec::new();
    for f in &fields {
        for &y in y_set {
            let rho = lat.distance(x0, y);
            let p = f.values[y];
            let phi = stable_profile(f.t, rho, env.dim(), env.alpha());
            points.push(BoundPoint {
                t: f.t,
                site: y,
                rho,
                p,
                phi,
                ratio: p / phi,
                regime: regime(f.t, rho, env.dim(), env.alpha()),
                excluded: p < 10.0 * f.trunc_error,
            });
        }
    }
    let used: Vec<&BoundPoint> = points.iter().filter(|p| !p.excluded).collect();
    if used.is_empty() {
        return Err(Error::InsufficientData("every point is below the noise floor".into()));
    }
    let c1_low = used.iter().map(|p| p.ratio).fold(f64::INFINITY, f64::min);
    let c2_up = used.iter().map(|p| p.ratio).fold(0.0, f64::max);
    let (retention, retention_ok) = if lat.is_torus() {
        (None, None)
    } else {
        let radius = 0.75 * lat.spec().radius as f64;
        let ball = lat.ball(x0, radius);
        let killed = Generator::killed(env, &ball)?;
        let kf = heat_kernel_multi(&killed, t_grid, x0, opts.tol)?;
        let r: Vec<(f64, f64)> = kf.iter().map(|f| (f.t, f.mass(killed.mu()))).collect();
        let ok = r.iter().all(|(_, m)| *m >= opts.retention_threshold);
        (Some(r), Some(ok))
    };
    let smallest_passing_t = opts.reference.and_then(|(lo, hi)| {
        let mut ts: Vec<f64> = t_grid.to_vec();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        let ok_at = |t: f64| {
            points
                .iter()
                .filter(|p| p.t == t && !p.excluded)
                .all(|p| p.ratio >= lo && p.ratio <= hi)
        };
        let mut best = None;
        for &t in ts.iter().rev() {
            if ok_at(t) {
                best = Some(t);
            } else {
                break;
            }
        }
        best
    });
    Ok(BoundsReport {
        x0,
        c1_low,
        c2_up,
        ratio: c2_up / c1_low,
        excluded: points.iter().filter(|p| p.excluded).count(),
        points,
        retention,
        retention_ok,
        smallest_passing_t,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HoelderFit {
    pub beta: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
    pub pass: bool,
}

/// Regression of `log |p^B(t,x0,y) - p^B(t,x0,x0)| + (d/alpha) log t` on
/// `log(rho / t^{1/alpha})` over `1 <= rho <= t^{1/alpha}`.
pub fn hoelder_diagnostic(env: &Environment, domain: &[usize], t_grid: &[f64], x0: usize) -> Result<HoelderFit> {
    let gen = Generator::killed(env, domain)?;
    let start = local_of(&gen, x0)?;
    let lat = env.lattice();
    let fields = heat_kernel_multi(&gen, t_grid, x0, 1e-12)?;
    let (d, a) = (env.dim() as f64, env.alpha());
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for f in &fields {
        let scale = f.t.powf(1.0 / a);
        let diag = f.values[start];
        for (i, &y) in gen.sites().iter().enumerate() {
            let rho = lat.distance(x0, y);
            if rho < 1.0 || rho > scale {
                continue;
            }
            let diff = (f.values[i] - diag).abs();
            if diff <= 10.0 * f.trunc_error {
                continue;
            }
            xs.push((rho / scale).ln());
            ys.push(diff.ln() + d / a * f.t.ln());
        }
    }
    if xs.len() < 8 {
        return Err(Error::InsufficientData(format!("{} usable points, need 8", xs.len())));
    }
    let fit = linear_fit(&xs, &ys);
    Ok(HoelderFit { beta: fit.slope, intercept: fit.intercept, r2: fit.r2, points: xs.len(), pass: fit.slope > 0.0 })
}
