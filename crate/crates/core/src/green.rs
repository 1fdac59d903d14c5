//! Green functions, harmonic solves, Harnack ratios and the trap return test.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Conductances, Environment};
use crate::error::{Error, Result};
use crate::heat::{heat_kernel, heat_kernel_multi};
use crate::linalg::{matmul, Cholesky};
use crate::markov::{Generator, KernelEval, NOT_IN_DOMAIN};
use crate::quad::gauss_legendre;
use crate::stats::{weighted_linear_fit, LinearFit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GreenMethod {
    LinearSolve,
    TimeIntegral,
}

/// `G^B(x0, .)`, the expected occupation density of the killed chain.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GreenField {
    pub x0: usize,
    pub sites: Vec<usize>,
    pub values: Vec<f64>,
    pub method: GreenMethod,
    /// `1 + sup 1/w` over pairs in the ball of radius `4R` around the origin,
    /// `R` the domain radius; `None` when some conductance there vanishes.
    pub theta: Option<f64>,
}

impl GreenField {
    pub fn at_site(&self, site: usize) -> Option<f64> {
        self.sites.binary_search(&site).ok().map(|i| self.values[i])
    }
}

/// The SPD system `K = mu (-Q_B)` of a killed chain: `K(x,x)` is the total
/// box rate out of `x`, `K(x,y) = -J(x,y)`. Its inverse is the Green function.
pub struct KilledSystem {
    gen: Generator,
    chol: Cholesky,
}

impl KilledSystem {
    pub fn new(env: &Environment, domain: &[usize]) -> Result<Self> {
        let gen = Generator::killed(env, domain)?;
        check_components(&gen)?;
        let m = gen.len();
        let mut k = vec![0.0; m * m];
        k.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if i == j { gen.out_rate(i) } else { -gen.jump(i, j) };
            }
        });
        let chol = Cholesky::factor(k, m).map_err(|i| Error::SingularSystem { site: gen.sites()[i], size: m })?;
        Ok(KilledSystem { gen, chol })
    }

    pub fn generator(&self) -> &Generator {
        &self.gen
    }

    /// Solves `K X = B` for `nrhs` row-major right-hand sides.
    pub fn solve_many(&self, b: &mut [f64], nrhs: usize) {
        self.chol.solve_in_place(b, nrhs);
    }

    pub fn green_row(&self, x0: usize) -> Result<Vec<f64>> {
        let i = local_index(&self.gen, x0)?;
        let mut e = vec![0.0; self.gen.len()];
        e[i] = 1.0;
        self.chol.solve_in_place(&mut e, 1);
        Ok(e)
    }
}

fn local_index(gen: &Generator, site: usize) -> Result<usize> {
    if site >= gen.local_len() {
        return Err(Error::SiteOutOfBox(site));
    }
    match gen.local(site) {
        NOT_IN_DOMAIN => Err(Error::param("x0", "must lie in the domain")),
        i => Ok(i),
    }
}

/// Rejects domains containing a connected piece with no kernel mass leaving it.
fn check_components(gen: &Generator) -> Result<()> {
    let m = gen.len();
    let mut seen = vec![false; m];
    let mut stack = Vec::new();
    for s in 0..m {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        stack.push(s);
        let mut members = Vec::new();
        let mut exit = 0.0;
        while let Some(i) = stack.pop() {
            members.push(i);
            exit += gen.exit_rate(i);
            for (j, &v) in gen.jump_row(i).iter().enumerate() {
                if v > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        if !(exit > 0.0) {
            let site = gen.sites()[*members.iter().min().expect("nonempty")];
            return Err(Error::SingularSystem { site, size: members.len() });
        }
    }
    Ok(())
}

/// `Theta(r) = 1 + sup 1/w` over distinct pairs in the ball of radius `r` at
/// the origin; `None` if a conductance there is zero.
pub fn theta(env: &Environment, r: f64) -> Option<f64> {
    let lat = env.lattice();
    match env.conductances() {
        Conductances::Constant(v) => (*v > 0.0).then(|| 1.0 + 1.0 / v),
        Conductances::Pairs(_) => {
            let ball = lat.ball(lat.origin(), r);
            let min = ball
                .par_iter()
                .enumerate()
                .map(|(k, &x)| ball[k + 1..].iter().map(|&y| env.w(x, y)).fold(f64::INFINITY, f64::min))
                .reduce(|| f64::INFINITY, f64::min);
            if min.is_infinite() {
                Some(1.0)
            } else {
                (min > 0.0).then(|| 1.0 + 1.0 / min)
            }
        }
    }
}

fn domain_radius(env: &Environment, domain: &[usize]) -> f64 {
    let lat = env.lattice();
    let o = lat.origin();
    domain.iter().map(|&s| lat.distance(o, s)).fold(0.0, f64::max)
}

/// Green function by a Cholesky solve of the killed system.
pub fn green_function(env: &Environment, domain: &[usize], x0: usize) -> Result<GreenField> {
    let sys = KilledSystem::new(env, domain)?;
    let values = sys.green_row(x0)?;
    Ok(GreenField {
        x0,
        sites: sys.gen.sites().to_vec(),
        values,
        method: GreenMethod::LinearSolve,
        theta: theta(env, 4.0 * domain_radius(env, domain)),
    })
}

const SURVIVAL_FLOOR: f64 = 1e-13;

/// Green function as `int_0^inf p^B(t, x0, .) dt`: 16-point Gauss-Legendre
/// panels on dyadic time blocks until the surviving mass drops below 1e-13,
/// plus a geometric tail estimate.
pub fn green_time_integral(env: &Environment, domain: &[usize], x0: usize) -> Result<GreenField> {
    let gen = Generator::killed(env, domain)?;
    check_components(&gen)?;
    local_index(&gen, x0)?;
    let h = 1.0 / gen.lambda().max(1e-300);
    let mut horizon = h;
    loop {
        let f = heat_kernel(&gen, horizon, x0, 1e-12)?;
        if f.mass(gen.mu()) < SURVIVAL_FLOOR {
            break;
        }
        horizon *= 2.0;
        if horizon * gen.lambda() > 1.0e7 {
            return Err(Error::BudgetExceeded { requested: (horizon * gen.lambda()) as u64, budget: 10_000_000 });
        }
    }
    let (nodes, weights) = gauss_legendre(16);
    let mut edges = vec![0.0, h];
    while *edges.last().expect("nonempty") < horizon {
        let e = 2.0 * edges.last().expect("nonempty");
        edges.push(e);
    }
    let mut times = Vec::new();
    let mut tw = Vec::new();
    for w in edges.windows(2) {
        let (a, b) = (w[0], w[1]);
        for (x, wt) in nodes.iter().zip(&weights) {
            times.push(0.5 * (b - a) * x + 0.5 * (a + b));
            tw.push(0.5 * (b - a) * wt);
        }
    }
    times.push(edges[edges.len() - 2]);
    times.push(*edges.last().expect("nonempty"));
    let fields = heat_kernel_multi(&gen, &times, x0, 1e-12)?;
    let m = gen.len();
    let mut values = vec![0.0; m];
    for (f, w) in fields.iter().zip(&tw) {
        for (v, p) in values.iter_mut().zip(&f.values) {
            *v += w * p;
        }
    }
    let (prev, last) = (&fields[fields.len() - 2], &fields[fields.len() - 1]);
    let (s0, s1) = (prev.mass(gen.mu()), last.mass(gen.mu()));
    if s1 > 0.0 && s0 > s1 {
        let decay = (s0 / s1).ln() / (last.t - prev.t);
        for (v, p) in values.iter_mut().zip(&last.values) {
            *v += p / decay;
        }
    }
    Ok(GreenField {
        x0,
        sites: gen.sites().to_vec(),
        values,
        method: GreenMethod::TimeIntegral,
        theta: theta(env, 4.0 * domain_radius(env, domain)),
    })
}

/// Weighted log-log fit of `G(x0, x)` against `|x - x0|` over `lo <= |x - x0| <= hi`,
/// with weights `|x - x0|^{-d}` so every scale counts equally.
pub fn green_slope(env: &Environment, field: &GreenField, lo: f64, hi: f64) -> Result<LinearFit> {
    let lat = env.lattice();
    let d = env.dim() as i32;
    let (mut xs, mut ys, mut ws) = (Vec::new(), Vec::new(), Vec::new());
    for (&s, &g) in field.sites.iter().zip(&field.values) {
        let r = lat.distance(field.x0, s);
        if r >= lo && r <= hi && g > 0.0 {
            xs.push(r.ln());
            ys.push(g.ln());
            ws.push(r.powi(-d));
        }
    }
    if xs.len() < 3 {
        return Err(Error::InsufficientData(format!("{} sites in the fit window", xs.len())));
    }
    Ok(weighted_linear_fit(&xs, &ys, &ws))
}

fn exterior(env: &Environment, gen: &Generator) -> Vec<usize> {
    (0..env.len()).filter(|&s| gen.local(s) == NOT_IN_DOMAIN).collect()
}

/// Right-hand sides `b(x) = sum_{y outside} J(x, y) g_k(y)` for each exterior function.
fn exterior_rhs(env: &Environment, gen: &Generator, data: &[&[f64]]) -> Vec<f64> {
    let eval = KernelEval::new(env);
    let ext = exterior(env, gen);
    let m = gen.len();
    let k = data.len();
    let mut b = vec![0.0; m * k];
    b.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
        let x = gen.sites()[i];
        for &y in &ext {
            let j = eval.entry(x, y);
            if j != 0.0 {
                for (r, g) in row.iter_mut().zip(data) {
                    *r += j * g[y];
                }
            }
        }
    });
    b
}

/// Harmonic extension into `domain` of data given on every box site outside it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HarmonicSolution {
    /// Values on the whole box; equal to the data outside the domain.
    pub values: Vec<f64>,
    /// `max |L u|` over the domain.
    pub residual: f64,
}

pub fn harmonic_solve(env: &Environment, domain: &[usize], boundary: &[f64]) -> Result<HarmonicSolution> {
    if boundary.len() != env.len() {
        return Err(Error::param("boundary_data", "must have one value per box site"));
    }
    if boundary.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("boundary_data", "must be finite"));
    }
    let sys = KilledSystem::new(env, domain)?;
    let gen = &sys.gen;
    let mut u = exterior_rhs(env, gen, &[boundary]);
    sys.solve_many(&mut u, 1);
    let mut values = boundary.to_vec();
    for (i, &s) in gen.sites().iter().enumerate() {
        values[s] = u[i];
    }
    let residual = generator_residual(env, gen, &values);
    Ok(HarmonicSolution { values, residual })
}

/// `max_x |L u (x)|` over the domain, with `u` given on the whole box.
fn generator_residual(env: &Environment, gen: &Generator, u: &[f64]) -> f64 {
    let eval = KernelEval::new(env);
    let n = env.len();
    gen.sites()
        .par_iter()
        .map(|&x| {
            let s: f64 = (0..n).map(|y| eval.entry(x, y) * (u[y] - u[x])).sum();
            (s / env.mu()[x]).abs()
        })
        .reduce(|| 0.0, f64::max)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HittingProfile {
    pub z: usize,
    pub sites: Vec<usize>,
    /// By harmonic solve with indicator data.
    pub by_solve: Vec<f64>,
    /// By the convolution `sum_v G(x, v) J(v, z)`.
    pub by_green: Vec<f64>,
    pub discrepancy: f64,
}

/// `P_x(X_{tau_B} = z)` computed two ways.
pub fn hitting_profile(env: &Environment, domain: &[usize], z: usize) -> Result<HittingProfile> {
    if z >= env.len() {
        return Err(Error::SiteOutOfBox(z));
    }
    let sys = KilledSystem::new(env, domain)?;
    let gen = &sys.gen;
    if gen.local(z) != NOT_IN_DOMAIN {
        return Err(Error::param("z", "must lie outside the domain"));
    }
    let m = gen.len();
    if m > 3000 {
        return Err(Error::BudgetExceeded { requested: m as u64, budget: 3000 });
    }
    let eval = KernelEval::new(env);
    let jz: Vec<f64> = gen.sites().iter().map(|&v| eval.entry(v, z)).collect();
    let mut by_solve = jz.clone();
    sys.solve_many(&mut by_solve, 1);
    let k = nalgebra::DMatrix::from_fn(m, m, |i, j| if i == j { gen.out_rate(i) } else { -gen.jump(i, j) });
    let green = k.lu().try_inverse().ok_or(Error::SingularSystem { site: gen.sites()[0], size: m })?;
    let by_green: Vec<f64> = (0..m).map(|i| (0..m).map(|v| green[(i, v)] * jz[v]).sum()).collect();
    let discrepancy = by_solve.iter().zip(&by_green).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(HittingProfile { z, sites: gen.sites().to_vec(), by_solve, by_green, discrepancy })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HarnackFamily {
    /// Hitting profiles of exterior sites; all of them unless `max_count` caps a seeded sample.
    HittingProfiles {
        #[serde(default)]
        max_count: Option<usize>,
        #[serde(default)]
        seed: u64,
    },
    /// Boundary data on the whole box, extended harmonically.
    Custom { boundary: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HarnackRow {
    pub r: f64,
    pub functions: usize,
    /// Functions with `inf = 0` on the inner ball; not divided.
    pub flagged: usize,
    pub max_ehi: f64,
    pub max_wehi: f64,
    /// Exterior site of the worst hitting profile, when the family has them.
    pub worst_z: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HarnackReport {
    pub x0: usize,
    pub family: String,
    pub rows: Vec<HarnackRow>,
    /// `(R, max_ehi / first, max_wehi / first)`.
    pub growth: Vec<(f64, f64, f64)>,
}

const HARNACK_BATCH: usize = 1024;

/// EHI ratio `sup/inf` and WEHI ratio `(sum/R^d)/inf` over `B(x0, R)` for
/// functions harmonic on `B(x0, 2R)`.
pub fn harnack_ratios(env: &Environment, x0: usize, r_grid: &[f64], family: &HarnackFamily) -> Result<HarnackReport> {
    let lat = env.lattice();
    if x0 >= env.len() {
        return Err(Error::SiteOutOfBox(x0));
    }
    if r_grid.is_empty() {
        return Err(Error::param("r_grid", "must not be empty"));
    }
    if let HarnackFamily::Custom { boundary } = family {
        if boundary.is_empty() {
            return Err(Error::param("family", "must not be empty"));
        }
        if boundary.iter().any(|b| b.len() != env.len() || b.iter().any(|v| !(*v >= 0.0))) {
            return Err(Error::param("family", "custom data must be nonnegative with one value per site"));
        }
    }
    let d = env.dim() as i32;
    let mut rows = Vec::new();
    for &r in r_grid {
        if !(r >= 1.0) {
            return Err(Error::param("r_grid", "radii must be at least 1"));
        }
        let outer = lat.ball(x0, 2.0 * r);
        let fits = if lat.is_torus() { 2.0 * r < lat.spec().radius as f64 } else { lat.ball_inside(x0, 2.0 * r) };
        if !fits {
            return Err(Error::param("r_grid", format!("B(x0, 2R) leaves the box for R = {r}")));
        }
        let sys = KilledSystem::new(env, &outer)?;
        let gen = &sys.gen;
        let inner: Vec<usize> = lat.ball(x0, r).iter().map(|&s| gen.local(s)).collect();
        let m = gen.len();
        let scale = r.powi(d);
        let mut row = HarnackRow { r, functions: 0, flagged: 0, max_ehi: 0.0, max_wehi: 0.0, worst_z: None };
        let mut record = |values: &mut dyn Iterator<Item = f64>, z: Option<usize>| {
            let (mut lo, mut hi, mut sum) = (f64::INFINITY, 0.0f64, 0.0);
            for v in values {
                lo = lo.min(v);
                hi = hi.max(v);
                sum += v;
            }
            row.functions += 1;
            if !(lo > 0.0) {
                row.flagged += 1;
                return;
            }
            let ehi = hi / lo;
            if ehi > row.max_ehi {
                row.max_ehi = ehi;
                row.worst_z = z;
            }
            row.max_wehi = row.max_wehi.max(sum / scale / lo);
        };
        match family {
            HarnackFamily::HittingProfiles { max_count, seed } => {
                let mut ext = exterior(env, gen);
                if let Some(cap) = max_count {
                    if *cap == 0 {
                        return Err(Error::param("family", "must not be empty"));
                    }
                    if *cap < ext.len() {
                        let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                        let mut pick = sample(&mut rng, ext.len(), *cap).into_vec();
                        pick.sort_unstable();
                        ext = pick.into_iter().map(|k| ext[k]).collect();
                    }
                }
                if ext.is_empty() {
                    return Err(Error::param("family", "no exterior sites in the box"));
                }
                // Green rows of the inner ball, then f_z = G[inner, :] J[:, z].
                let q = inner.len();
                let mut cols = vec![0.0; m * q];
                for (c, &i) in inner.iter().enumerate() {
                    cols[i * q + c] = 1.0;
                }
                sys.solve_many(&mut cols, q);
                let mut rows_g = vec![0.0; q * m];
                for i in 0..m {
                    for c in 0..q {
                        rows_g[c * m + i] = cols[i * q + c];
                    }
                }
                drop(cols);
                let eval = KernelEval::new(env);
                for chunk in ext.chunks(HARNACK_BATCH) {
                    let k = chunk.len();
                    let mut b = vec![0.0; m * k];
                    b.par_chunks_mut(k).enumerate().for_each(|(i, out)| {
                        let x = gen.sites()[i];
                        for (o, &z) in out.iter_mut().zip(chunk) {
                            *o = eval.entry(x, z);
                        }
                    });
                    let f = matmul(&rows_g, &b, q, m, k);
                    for (c, &z) in chunk.iter().enumerate() {
                        record(&mut (0..q).map(|i| f[i * k + c]), Some(z));
                    }
                }
            }
            HarnackFamily::Custom { boundary } => {
                let refs: Vec<&[f64]> = boundary.iter().map(|b| b.as_slice()).collect();
                let k = refs.len();
                let mut b = exterior_rhs(env, gen, &refs);
                sys.solve_many(&mut b, k);
                for c in 0..k {
                    record(&mut inner.iter().map(|&i| b[i * k + c]), None);
                }
            }
        }
        rows.push(row);
    }
    let (e0, w0) = (rows[0].max_ehi, rows[0].max_wehi);
    let growth = rows.iter().map(|r| (r.r, r.max_ehi / e0, r.max_wehi / w0)).collect();
    let family = match family {
        HarnackFamily::HittingProfiles { .. } => "hitting_profiles".to_string(),
        HarnackFamily::Custom { .. } => "custom".to_string(),
    };
    Ok(HarnackReport { x0, family, rows, growth })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnnulusMax {
    pub k: u32,
    /// Annulus `2^k < |z - x0| <= 2^{k+1}`.
    pub inner: f64,
    pub outer: f64,
    pub sites: usize,
    pub max_ratio: f64,
    pub argmax: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViolationReport {
    pub x0: usize,
    pub r: f64,
    pub theta_prime: f64,
    pub scale: f64,
    pub annuli: Vec<AnnulusMax>,
    /// Annuli whose maximum exceeds 1.
    pub violations: usize,
}

/// Scans annuli beyond `B(x0, 4R)` for `w(x0,z) / (sup_{v in B(x0,2R), v != x0} w(v,z) R^{alpha + theta'(d-alpha)})`.
pub fn ehi_necessary_condition(
    env: &Environment,
    x0: usize,
    r: f64,
    theta_prime: f64,
    max_annuli: usize,
) -> Result<ViolationReport> {
    let lat = env.lattice();
    let (d, alpha) = (env.dim() as f64, env.alpha());
    if d <= alpha {
        return Err(Error::param("alpha", "the condition needs d > alpha"));
    }
    if !(r >= 1.0) || !(theta_prime >= 0.0) || max_annuli == 0 {
        return Err(Error::param("r", "need R >= 1, theta' >= 0 and at least one annulus"));
    }
    if x0 >= env.len() {
        return Err(Error::SiteOutOfBox(x0));
    }
    let scale = r.powf(alpha + theta_prime * (d - alpha));
    let inner: Vec<usize> = lat.ball(x0, 2.0 * r).into_iter().filter(|&v| v != x0).collect();
    let first = (4.0 * r).log2().floor() as u32;
    let mut annuli = Vec::new();
    for k in first..first + max_annuli as u32 {
        let (a, b) = (2f64.powi(k as i32), 2f64.powi(k as i32 + 1));
        let a = a.max(4.0 * r);
        let shell: Vec<usize> = (0..env.len())
            .filter(|&z| {
                let rho = lat.distance(x0, z);
                rho > a && rho <= b
            })
            .collect();
        if shell.is_empty() {
            break;
        }
        let best = shell
            .par_iter()
            .map(|&z| {
                let top = env.w(x0, z);
                let ratio = if top == 0.0 {
                    0.0
                } else {
                    let sup = inner.iter().map(|&v| env.w(v, z)).fold(0.0, f64::max);
                    if sup == 0.0 { f64::INFINITY } else { top / (sup * scale) }
                };
                (ratio, z)
            })
            .reduce(|| (f64::NEG_INFINITY, usize::MAX), |p, q| if q.0 > p.0 || (q.0 == p.0 && q.1 < p.1) { q } else { p });
        annuli.push(AnnulusMax {
            k,
            inner: a,
            outer: b,
            sites: shell.len(),
            max_ratio: best.0,
            argmax: (best.1 != usize::MAX).then_some(best.1),
        });
    }
    if annuli.is_empty() {
        return Err(Error::param("r", "no annulus beyond B(x0, 4R) fits in the box"));
    }
    let violations = annuli.iter().filter(|a| a.max_ratio > 1.0).count();
    Ok(ViolationReport { x0, r, theta_prime, scale, annuli, violations })
}
