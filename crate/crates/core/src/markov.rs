//! Jump kernels, generators and Dirichlet energy.
//!
//! The kernel is `J(x, y) = w(x, y) / rho(x, y)^{d+alpha}`, symmetric in
//! `(x, y)`. The site measure `mu` enters only through the generator
//! `q(x, y) = J(x, y) / mu(x)`, so `mu(x) q(x, y) = J(x, y)` is symmetric and
//! the energy is `D(f, f) = 1/2 sum_{x,y} (f(x) - f(y))^2 J(x, y)` for every
//! choice of `mu`. A form carrying `mu_x mu_y` weights is obtained by folding
//! them into `w`.
//!
//! On a torus the kernel is periodized: `J` sums `rho^{-(d+alpha)}` over all
//! periodic images of the displacement, which makes the torus chain the exact
//! projection of the chain on the full lattice with periodic conductances.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::lattice::{Lattice, Metric};
use crate::law::hurwitz_zeta;
use crate::quad::{gauss_legendre, gl_integrate};

const TABLE_LIMIT: usize = 1 << 22;

/// `rho^{-(d+alpha)}` as a function of the per-axis gaps.
#[derive(Clone, Debug)]
pub struct Profile {
    dim: usize,
    exponent: f64,
    torus: bool,
    metric: Metric,
    period: usize,
    max_gap: usize,
    table: Option<Vec<f64>>,
}

impl Profile {
    pub fn new(lattice: &Lattice, alpha: f64) -> Self {
        let dim = lattice.dim();
        let spec = lattice.spec();
        let torus = lattice.is_torus();
        let max_gap = if torus { spec.radius } else { 2 * spec.radius };
        let mut p = Profile {
            dim,
            exponent: dim as f64 + alpha,
            torus,
            metric: spec.metric,
            period: lattice.period(),
            max_gap,
            table: None,
        };
        let size = (max_gap + 1).checked_pow(dim as u32).unwrap_or(usize::MAX);
        if size <= TABLE_LIMIT {
            let table: Vec<f64> = (0..size)
                .into_par_iter()
                .map(|idx| {
                    let mut gaps = vec![0.0; dim];
                    let mut r = idx;
                    for g in gaps.iter_mut() {
                        *g = (r % (max_gap + 1)) as f64;
                        r /= max_gap + 1;
                    }
                    p.evaluate(&gaps)
                })
                .collect();
            p.table = Some(table);
        }
        p
    }

    fn norm(&self, v: &[f64]) -> f64 {
        match self.metric {
            Metric::Euclidean => v.iter().map(|a| a * a).sum::<f64>().sqrt(),
            Metric::Graph => v.iter().map(|a| a.abs()).sum(),
            Metric::Chebyshev => v.iter().fold(0.0, |m, a| m.max(a.abs())),
        }
    }

    fn evaluate(&self, gaps: &[f64]) -> f64 {
        if gaps.iter().all(|&g| g == 0.0) {
            return 0.0;
        }
        if !self.torus {
            return self.norm(gaps).powf(-self.exponent);
        }
        let p = self.period as f64;
        if self.dim == 1 {
            let a = gaps[0] / p;
            let mut sum = gaps[0].powf(-self.exponent) * (gaps[0] > 0.0) as u8 as f64;
            sum += p.powf(-self.exponent) * (hurwitz_zeta(self.exponent, 1.0 + a) + hurwitz_zeta(self.exponent, 1.0 - a));
            return sum;
        }
        let reach: i64 = if self.dim == 2 { 16 } else { 1 };
        let width = (2 * reach + 1) as usize;
        let count = width.pow(self.dim as u32);
        let mut v = vec![0.0; self.dim];
        let mut sum = 0.0;
        for idx in 0..count {
            let mut r = idx;
            for k in 0..self.dim {
                let j = (r % width) as i64 - reach;
                r /= width;
                v[k] = gaps[k] + j as f64 * p;
            }
            let n = self.norm(&v);
            if n > 0.0 {
                sum += n.powf(-self.exponent);
            }
        }
        sum + self.image_tail((reach as f64 + 0.5) * p)
    }

    /// Continuum estimate of the images outside the cube of half-width `h`.
    fn image_tail(&self, h: f64) -> f64 {
        let s = self.exponent;
        let p = self.period as f64;
        let d = self.dim;
        match d {
            1 => 2.0 * h.powf(1.0 - s) / ((s - 1.0) * p),
            2 => {
                let rule = gauss_legendre(24);
                let quarter = std::f64::consts::FRAC_PI_4;
                let mut total = 0.0;
                for k in 0..8 {
                    total += gl_integrate(
                        |th| {
                            let (c, sn) = (th.cos(), th.sin());
                            let m = c.abs().max(sn.abs());
                            let n = self.norm(&[c, sn]);
                            n.powf(-s) * (h / m).powf(2.0 - s) / (s - 2.0)
                        },
                        k as f64 * quarter,
                        (k + 1) as f64 * quarter,
                        &rule,
                    );
                }
                total / (p * p)
            }
            _ => {
                let df = d as f64;
                let half = 0.5 * df;
                let surface = 2.0 * std::f64::consts::PI.powf(half) / statrs::function::gamma::gamma(half);
                let volume = surface / df;
                let r_eq = 2.0 * h / volume.powf(1.0 / df);
                surface * r_eq.powf(df - s) / (s - df) / p.powf(df)
            }
        }
    }

    /// Profile at per-axis gaps (minimal-image gaps on the torus).
    pub fn at_gaps(&self, gaps: &[u32]) -> f64 {
        match &self.table {
            Some(table) => {
                let mut idx = 0;
                let mut stride = 1;
                for &g in gaps {
                    idx += g as usize * stride;
                    stride *= self.max_gap + 1;
                }
                table[idx]
            }
            None => self.evaluate(&gaps.iter().map(|&g| g as f64).collect::<Vec<_>>()),
        }
    }

    /// `rho^{-(d+alpha)}` between two sites, periodized on the torus.
    #[inline]
    pub fn between(&self, lattice: &Lattice, x: usize, y: usize) -> f64 {
        let (cx, cy) = (lattice.coords(x), lattice.coords(y));
        match &self.table {
            Some(table) => {
                let mut idx = 0;
                let mut stride = 1;
                for k in 0..self.dim {
                    idx += lattice.axis_gap(cx[k], cy[k]) as usize * stride;
                    stride *= self.max_gap + 1;
                }
                table[idx]
            }
            None => {
                let gaps: Vec<f64> =
                    (0..self.dim).map(|k| lattice.axis_gap(cx[k], cy[k]) as f64).collect();
                self.evaluate(&gaps)
            }
        }
    }
}

/// Evaluates kernel entries of an environment on demand.
#[derive(Clone, Debug)]
pub struct KernelEval<'a> {
    env: &'a Environment,
    profile: Profile,
}

impl<'a> KernelEval<'a> {
    pub fn new(env: &'a Environment) -> Self {
        KernelEval { env, profile: Profile::new(env.lattice(), env.alpha()) }
    }

    pub fn env(&self) -> &Environment {
        self.env
    }

    #[inline]
    pub fn entry(&self, x: usize, y: usize) -> f64 {
        if x == y {
            return 0.0;
        }
        let w = self.env.w(x, y);
        if w == 0.0 {
            return 0.0;
        }
        w * self.profile.between(self.env.lattice(), x, y)
    }

    /// Writes `J(x, targets[k])` into `out[k]`.
    pub fn row_into(&self, x: usize, targets: &[usize], out: &mut [f64]) {
        for (o, &y) in out.iter_mut().zip(targets) {
            *o = self.entry(x, y);
        }
    }

    /// `sum_{y != x} J(x, y)` over the whole box.
    pub fn row_sum(&self, x: usize) -> f64 {
        (0..self.env.len()).map(|y| self.entry(x, y)).sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.env.len()).into_par_iter().map(|x| self.row_sum(x)).collect()
    }
}

/// Dense symmetric kernel matrix.
#[derive(Clone, Debug)]
pub struct JumpKernel {
    n: usize,
    data: Vec<f64>,
}

impl JumpKernel {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[x * self.n + y]
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.data[x * self.n..(x + 1) * self.n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|x| self.row(x).iter().sum()).collect()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut m = 0.0f64;
        for x in 0..self.n {
            for y in 0..x {
                m = m.max((self.get(x, y) - self.get(y, x)).abs());
            }
        }
        m
    }
}

pub fn jump_kernel(env: &Environment) -> JumpKernel {
    let eval = KernelEval::new(env);
    let n = env.len();
    let mut data = vec![0.0; n * n];
    data.par_chunks_mut(n).enumerate().for_each(|(x, row)| {
        for (y, slot) in row.iter_mut().enumerate() {
            *slot = eval.entry(x, y);
        }
    });
    JumpKernel { n, data }
}

/// CSRW measure `mu(x) = sum_z J(x, z)`, which makes every total jump rate 1.
pub fn csrw_measure(env: &Environment) -> Result<Vec<f64>> {
    let sums = KernelEval::new(env).row_sums();
    if let Some(x) = sums.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::IsolatedSite(x));
    }
    Ok(sums)
}

/// Row-stochastic transition matrix of the embedded jump chain.
pub fn jump_chain(env: &Environment) -> Result<Vec<f64>> {
    let mut k = jump_kernel(env).data;
    let n = env.len();
    for x in 0..n {
        let row = &mut k[x * n..(x + 1) * n];
        let s: f64 = row.iter().sum();
        if !(s > 0.0) {
            return Err(Error::IsolatedSite(x));
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(k)
}

/// `1/2 sum_{x,y} (f(x) - f(y))^2 J(x, y)`.
pub fn dirichlet_energy(env: &Environment, f: &[f64]) -> f64 {
    assert_eq!(f.len(), env.len());
    let eval = KernelEval::new(env);
    let n = env.len();
    (0..n)
        .into_par_iter()
        .map(|x| {
            let mut s = 0.0;
            for y in x + 1..n {
                let d = f[x] - f[y];
                if d != 0.0 {
                    s += d * d * eval.entry(x, y);
                }
            }
            s
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum()
}

/// Rate matrix of the chain on the box, or of the chain killed on leaving a domain.
///
/// Off-diagonal rates are `J(x, y) / mu(x)` inside the domain; the diagonal
/// always subtracts the total rate to every other box site, so jumps out of
/// the domain are killing.
#[derive(Clone, Debug)]
pub struct Generator {
    sites: Vec<usize>,
    local: Vec<usize>,
    jump: Vec<f64>,
    out_rate: Vec<f64>,
    mu: Vec<f64>,
    lambda: f64,
    killed: bool,
}

pub const NOT_IN_DOMAIN: usize = usize::MAX;

impl Generator {
    pub fn full(env: &Environment) -> Self {
        let sites: Vec<usize> = (0..env.len()).collect();
        Self::build(env, sites, false)
    }

    /// Generator of the process killed on leaving `domain` (box indices).
    pub fn killed(env: &Environment, domain: &[usize]) -> Result<Self> {
        if domain.is_empty() {
            return Err(Error::EmptyDomain);
        }
        let mut sites = domain.to_vec();
        sites.sort_unstable();
        sites.dedup();
        if let Some(&bad) = sites.iter().find(|&&s| s >= env.len()) {
            return Err(Error::SiteOutOfBox(bad));
        }
        Ok(Self::build(env, sites, true))
    }

    fn build(env: &Environment, sites: Vec<usize>, killed: bool) -> Self {
        let eval = KernelEval::new(env);
        let m = sites.len();
        let mut local = vec![NOT_IN_DOMAIN; env.len()];
        for (i, &s) in sites.iter().enumerate() {
            local[s] = i;
        }
        let mut jump = vec![0.0; m * m];
        jump.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
            eval.row_into(sites[i], &sites, row);
        });
        let out_rate: Vec<f64> = if killed {
            sites.par_iter().map(|&x| eval.row_sum(x)).collect()
        } else {
            (0..m).map(|i| jump[i * m..(i + 1) * m].iter().sum()).collect()
        };
        let mu: Vec<f64> = sites.iter().map(|&s| env.mu()[s]).collect();
        let lambda = out_rate.iter().zip(&mu).map(|(r, m)| r / m).fold(0.0, f64::max);
        Generator { sites, local, jump, out_rate, mu, lambda, killed }
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn is_killed(&self) -> bool {
        self.killed
    }

    /// Box indices of the domain, sorted.
    pub fn sites(&self) -> &[usize] {
        &self.sites
    }

    /// Number of sites of the underlying box.
    pub fn local_len(&self) -> usize {
        self.local.len()
    }

    /// Local index of a box site, or `NOT_IN_DOMAIN`.
    pub fn local(&self, site: usize) -> usize {
        self.local[site]
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    /// Uniformization rate `max_x |q(x, x)|`.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    #[inline]
    pub fn jump(&self, i: usize, j: usize) -> f64 {
        self.jump[i * self.len() + j]
    }

    pub fn jump_row(&self, i: usize) -> &[f64] {
        let m = self.len();
        &self.jump[i * m..(i + 1) * m]
    }

    /// Total kernel mass from a domain site to every other box site.
    pub fn out_rate(&self, i: usize) -> f64 {
        self.out_rate[i]
    }

    /// Kernel mass from a domain site to sites outside the domain.
    pub fn exit_rate(&self, i: usize) -> f64 {
        (self.out_rate[i] - self.jump_row(i).iter().sum::<f64>()).max(0.0)
    }

    /// `q(i, j)` in local indices.
    #[inline]
    pub fn rate(&self, i: usize, j: usize) -> f64 {
        if i == j {
            -self.out_rate[i] / self.mu[i]
        } else {
            self.jump(i, j) / self.mu[i]
        }
    }

    pub fn dense_rates(&self) -> Vec<f64> {
        let m = self.len();
        let mut q = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                q[i * m + j] = self.rate(i, j);
            }
        }
        q
    }

    /// `(Q f)(x)`, with `f` vanishing outside the domain for killed generators.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let m = self.len();
        assert_eq!(f.len(), m);
        (0..m)
            .into_par_iter()
            .map(|i| {
                let row = self.jump_row(i);
                let s: f64 = row.iter().zip(f).map(|(j, v)| j * v).sum();
                (s - self.out_rate[i] * f[i]) / self.mu[i]
            })
            .collect()
    }

    /// One step of `m -> m (I + Q / lambda)` for a row vector of masses.
    pub fn step_mass(&self, mass: &[f64], out: &mut [f64], lambda: f64) {
        let m = self.len();
        let scaled: Vec<f64> = mass.iter().zip(&self.mu).map(|(a, b)| a / (b * lambda)).collect();
        out.par_iter_mut().enumerate().for_each(|(y, o)| {
            let row = &self.jump[y * m..(y + 1) * m];
            let mut s = 0.0;
            for (j, v) in row.iter().zip(&scaled) {
                s += j * v;
            }
            *o = mass[y] * (1.0 - self.out_rate[y] / (self.mu[y] * lambda)) + s;
        });
    }

    /// Dense binary export: `RCMGEN1\n`, u64 header length, JSON metadata,
    /// then the row-major rate matrix as little-endian `f64`.
    pub fn export(&self, mut out: impl Write) -> Result<()> {
        #[derive(Serialize)]
        struct Meta<'a> {
            lambda: f64,
            killed: bool,
            sites: &'a [usize],
            mu: &'a [f64],
        }
        let meta = serde_json::to_vec(&Meta {
            lambda: self.lambda,
            killed: self.killed,
            sites: &self.sites,
            mu: &self.mu,
        })?;
        out.write_all(b"RCMGEN1\n")?;
        out.write_all(&(meta.len() as u64).to_le_bytes())?;
        out.write_all(&meta)?;
        let mut buf = Vec::with_capacity(8 * self.len() * self.len());
        for v in self.dense_rates() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{sample_environment, MuMode};
    use crate::lattice::LatticeSpec;
    use crate::law::ConductanceLaw;

    #[test]
    fn kernel_substitution() {
        let env = Environment::constant(LatticeSpec::full(2, 3), 1.0, 1.0).unwrap();
        let lat = env.lattice();
        let k = jump_kernel(&env);
        let x = lat.index_of(&[0, 0]).unwrap();
        let y = lat.index_of(&[2, 0]).unwrap();
        assert_eq!(k.get(x, y), 0.125);
        assert_eq!(k.get(x, x), 0.0);
        assert_eq!(k.max_asymmetry(), 0.0);
    }

    #[test]
    fn csrw_finite_sum() {
        let env = Environment::constant(LatticeSpec::full(1, 3), 1.0, 1.0).unwrap();
        let mu = csrw_measure(&env).unwrap();
        let o = env.lattice().origin();
        assert!((mu[o] - 49.0 / 18.0).abs() < 1e-15);
    }

    #[test]
    fn csrw_rejects_isolated_site() {
        let mut env = Environment::constant(LatticeSpec::full(1, 3), 1.0, 1.0).unwrap();
        let o = env.lattice().origin();
        env.map_pairs(|x, y, w| if x == o || y == o { 0.0 } else { w }).unwrap();
        assert_eq!(csrw_measure(&env), Err(Error::IsolatedSite(o)));
    }

    #[test]
    fn two_site_eigenvalues() {
        let env = Environment::constant(LatticeSpec::full(1, 1), 1.0, 1.0).unwrap();
        let env = {
            let mut e = env;
            // sites -1, 0, 1: isolate the last one from the first two
            e.map_pairs(|x, y, _| if x == 0 && y == 1 { 0.75 } else { 0.0 }).unwrap();
            e
        };
        let g = Generator::killed(&env, &[0, 1]).unwrap();
        // 2x2 block [[-j, j], [j, -j]] with j = 0.75
        let q = g.dense_rates();
        let j = 0.75;
        assert_eq!(q, vec![-j, j, j, -j]);
        let tr = q[0] + q[3];
        let det = q[0] * q[3] - q[1] * q[2];
        let disc = (tr * tr - 4.0 * det).sqrt();
        let (l1, l2) = ((tr + disc) / 2.0, (tr - disc) / 2.0);
        assert!(l1.abs() < 1e-15 && (l2 + 2.0 * j).abs() < 1e-15);
    }

    #[test]
    fn conservative_and_reversible() {
        for mode in [MuMode::Counting, MuMode::Csrw] {
            let env = sample_environment(
                ConductanceLaw::PolynomialTail { p: 1.0, eps: 0.5 },
                LatticeSpec::full(2, 3),
                mode,
                1.2,
                5,
            )
            .unwrap();
            let g = Generator::full(&env);
            let q = g.dense_rates();
            let m = g.len();
            let mut max_mq = 0.0f64;
            for i in 0..m {
                let s: f64 = q[i * m..(i + 1) * m].iter().sum();
                assert!(s.abs() <= 1e-12 * g.lambda());
                for j in 0..m {
                    max_mq = max_mq.max(g.mu()[i] * q[i * m + j]);
                }
            }
            for i in 0..m {
                for j in 0..m {
                    if i != j {
                        let d = (g.mu()[i] * q[i * m + j] - g.mu()[j] * q[j * m + i]).abs();
                        assert!(d <= 1e-14 * max_mq);
                    }
                }
            }
        }
    }

    #[test]
    fn csrw_unit_rate() {
        let env = sample_environment(
            ConductanceLaw::BernoulliDegenerate { p0: 0.05, positive_law: Box::new(ConductanceLaw::constant(2.0)) },
            LatticeSpec::full(1, 10),
            MuMode::Csrw,
            0.7,
            1,
        )
        .unwrap();
        let g = Generator::full(&env);
        for i in 0..g.len() {
            assert!((g.out_rate(i) / g.mu()[i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn killed_rows_lose_mass() {
        let env = Environment::constant(LatticeSpec::full(1, 6), 1.0, 1.0).unwrap();
        let ball = env.lattice().ball(env.lattice().origin(), 2.0);
        let g = Generator::killed(&env, &ball).unwrap();
        let q = g.dense_rates();
        let m = g.len();
        for i in 0..m {
            assert!(q[i * m..(i + 1) * m].iter().sum::<f64>() < 0.0);
            assert!(g.exit_rate(i) > 0.0);
        }
        assert!(Generator::killed(&env, &[]).is_err());
    }

    #[test]
    fn energy_identities() {
        let env = Environment::constant(LatticeSpec::full(2, 2), 1.0, 1.0).unwrap();
        let x0 = 7;
        let mut f = vec![0.0; env.len()];
        f[x0] = 1.0;
        let row: f64 = jump_kernel(&env).row(x0).iter().sum();
        assert!((dirichlet_energy(&env, &f) - row).abs() < 1e-14);
        let c = vec![3.5; env.len()];
        assert_eq!(dirichlet_energy(&env, &c), 0.0);
    }

    #[test]
    fn torus_profile_matches_image_sum() {
        // d = 1: compare with a long explicit image sum
        let spec = LatticeSpec::torus(1, 5);
        let lat = Lattice::new(spec).unwrap();
        let alpha = 1.0;
        let prof = Profile::new(&lat, alpha);
        let p = 11.0;
        for g in 1..=5 {
            let mut s = 0.0;
            let reach = 200_000i64;
            for j in -reach..=reach {
                s += ((g as f64 + j as f64 * p).abs()).powf(-2.0);
            }
            s += 2.0 / ((reach as f64 + 0.5) * p * p);
            let x = lat.index_of(&[0]).unwrap();
            let y = lat.index_of(&[g]).unwrap();
            let v = prof.between(&lat, x, y);
            assert!((v - s).abs() < 1e-9 * s, "{g}: {v} vs {s}");
        }
        // d = 2: compare with a larger explicit block
        let lat = Lattice::new(LatticeSpec::torus(2, 3)).unwrap();
        let prof = Profile::new(&lat, 1.0);
        let p = 7.0;
        let (x, y) = (lat.index_of(&[0, 0]).unwrap(), lat.index_of(&[2, 1]).unwrap());
        let mut s = 0.0;
        let reach = 400i64;
        for a in -reach..=reach {
            for b in -reach..=reach {
                let u = 2.0 + a as f64 * p;
                let v = 1.0 + b as f64 * p;
                s += (u * u + v * v).powf(-1.5);
            }
        }
        // explicit block misses images beyond radius ~ reach * p: add the continuum remainder
        let h = (reach as f64 + 0.5) * p;
        let mut tail = 0.0;
        let rule = gauss_legendre(24);
        for k in 0..8 {
            let q = std::f64::consts::FRAC_PI_4;
            tail += gl_integrate(
                |th: f64| (h / th.cos().abs().max(th.sin().abs())).powf(-1.0),
                k as f64 * q,
                (k + 1) as f64 * q,
                &rule,
            );
        }
        s += tail / (p * p);
        let v = prof.between(&lat, x, y);
        assert!((v - s).abs() < 1e-5 * s, "{v} vs {s}");
    }
}
