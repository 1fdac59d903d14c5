//! Return probabilities of the embedded jump chain on the deterministic trap.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::env::{nearest_neighbours, Environment, TRAP_CAVEAT};
use crate::error::{Error, Result};
use crate::lattice::{Boundary, Lattice, LatticeSpec};
use crate::markov::{jump_chain, Profile};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrapMethod {
    /// Dense transition matrix on an absorbing box.
    Dense,
    /// Matrix-free FFT convolution on a torus.
    Convolution,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrapRow {
    pub n: usize,
    pub p_return: f64,
    /// `P(2n, 0, 0) 2^{2N}`.
    pub scaled: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrapReport {
    pub level: u32,
    pub method: TrapMethod,
    pub sites: usize,
    pub rows: Vec<TrapRow>,
    /// Largest deviation of the propagated distribution's total mass from 1.
    pub mass_error: f64,
    pub caveat: String,
}

/// Work budget in site-steps for dense chains (`steps * n^2`) and
/// convolution chains (`steps * n * log2 n`).
pub const DEFAULT_POWER_BUDGET: u64 = 20_000_000_000;
const TORUS_SITE_CAP: usize = 1 << 22;

/// Return probabilities `P(2n, 0, 0)` of the jump chain on the trap environment
/// started at the weak bond's outer end. Boxes use the dense chain, tori the
/// convolution chain.
pub fn trap_return_probability(
    level: u32,
    n_grid: &[usize],
    spec: LatticeSpec,
    eps: f64,
    alpha: f64,
    budget: u64,
) -> Result<TrapReport> {
    if n_grid.is_empty() {
        return Err(Error::param("n_grid", "must not be empty"));
    }
    if spec.boundary == Boundary::Torus {
        let base = TorusBase::new(spec, alpha)?;
        return torus_report(&base, level, n_grid, eps, budget);
    }
    let steps = 2 * *n_grid.iter().max().expect("nonempty");
    let env = Environment::trap(spec, level, eps, alpha)?;
    let n = env.len();
    let cost = (steps as u64).saturating_mul((n * n) as u64);
    if cost > budget {
        return Err(Error::BudgetExceeded { requested: cost, budget });
    }
    let (at, mass_error) = dense_returns(&env, steps)?;
    Ok(report(level, TrapMethod::Dense, n, n_grid, &at, mass_error))
}

fn torus_report(base: &TorusBase, level: u32, n_grid: &[usize], eps: f64, budget: u64) -> Result<TrapReport> {
    let steps = 2 * *n_grid.iter().max().expect("nonempty");
    let n = base.lattice.len() as u64;
    let cost = (steps as u64).saturating_mul(n.saturating_mul(64 - n.leading_zeros() as u64));
    if cost > budget {
        return Err(Error::BudgetExceeded { requested: cost, budget });
    }
    let chain = TorusTrap::new(base, level, eps)?;
    let (at, mass_error) = chain.returns(steps);
    Ok(report(level, TrapMethod::Convolution, chain.len(), n_grid, &at, mass_error))
}

fn report(level: u32, method: TrapMethod, sites: usize, n_grid: &[usize], at: &[f64], mass_error: f64) -> TrapReport {
    let factor = 4f64.powi(level as i32);
    let rows = n_grid
        .iter()
        .map(|&k| TrapRow { n: k, p_return: at[2 * k], scaled: at[2 * k] * factor })
        .collect();
    TrapReport { level, method, sites, rows, mass_error, caveat: TRAP_CAVEAT.to_string() }
}

fn dense_returns(env: &Environment, steps: usize) -> Result<(Vec<f64>, f64)> {
    let start = env.trap_info().expect("trap environment").start;
    let n = env.len();
    let p = jump_chain(env)?;
    let mut v = vec![0.0; n];
    v[start] = 1.0;
    let mut next = vec![0.0; n];
    let mut at = vec![1.0; steps + 1];
    let mut err = 0.0f64;
    for s in 1..=steps {
        next.par_iter_mut().enumerate().for_each(|(y, o)| {
            let mut acc = 0.0;
            for (x, vx) in v.iter().enumerate() {
                if *vx != 0.0 {
                    acc += vx * p[x * n + y];
                }
            }
            *o = acc;
        });
        std::mem::swap(&mut v, &mut next);
        at[s] = v[start];
        err = err.max((v.iter().sum::<f64>() - 1.0).abs());
    }
    Ok((at, err))
}

/// Translation-invariant part of the torus chain, shared across trap levels.
struct TorusBase {
    lattice: Lattice,
    /// Unit-conductance kernel indexed by displacement modulo the period.
    kernel: Vec<f64>,
    kernel_hat: Vec<Complex<f64>>,
    forward: Vec<Arc<dyn Fft<f64>>>,
    inverse: Vec<Arc<dyn Fft<f64>>>,
}

impl TorusBase {
    fn new(spec: LatticeSpec, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 2.0) {
            return Err(Error::param("alpha", "must lie in (0, 2)"));
        }
        if spec.radius < 4 {
            return Err(Error::param("radius", "trap needs radius at least 4"));
        }
        let lattice = Lattice::with_cap(spec, TORUS_SITE_CAP)?;
        let profile = Profile::new(&lattice, alpha);
        let d = lattice.dim();
        let period = lattice.period();
        let n = lattice.len();
        let kernel: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|idx| {
                let mut gaps = vec![0u32; d];
                let mut r = idx;
                for k in (0..d).rev() {
                    let m = r % period;
                    r /= period;
                    gaps[k] = m.min(period - m) as u32;
                }
                profile.at_gaps(&gaps)
            })
            .collect();
        let shape = vec![period; d];
        let mut planner = FftPlanner::new();
        let forward: Vec<_> = shape.iter().map(|&p| planner.plan_fft_forward(p)).collect();
        let inverse: Vec<_> = shape.iter().map(|&p| planner.plan_fft_inverse(p)).collect();
        let mut kernel_hat: Vec<Complex<f64>> = kernel.iter().map(|&k| Complex::new(k, 0.0)).collect();
        fft_nd(&mut kernel_hat, &shape, &forward);
        Ok(TorusBase { lattice, kernel, kernel_hat, forward, inverse })
    }

    /// `K(s, u)` for unit conductances.
    fn row(&self, s: usize) -> Vec<f64> {
        let lat = &self.lattice;
        let period = lat.period() as i64;
        let cs = lat.coords(s).to_vec();
        (0..lat.len())
            .into_par_iter()
            .map(|u| {
                let mut idx = 0usize;
                for (a, b) in lat.coords(u).iter().zip(&cs) {
                    idx = idx * period as usize + (*a as i64 - *b as i64).rem_euclid(period) as usize;
                }
                self.kernel[idx]
            })
            .collect()
    }
}

/// The trap chain on a torus: unit conductances everywhere except at the two
/// trap sites, so each step is one periodic convolution plus two rank-one fixes.
struct TorusTrap<'a> {
    base: &'a TorusBase,
    start: usize,
    trap: [usize; 2],
    /// Rows `C(s, .)` of the two trap sites.
    rows: [Vec<f64>; 2],
    /// Unit-conductance rows `K(s, .)` of the two trap sites.
    unit: [Vec<f64>; 2],
    sums: Vec<f64>,
}

impl<'a> TorusTrap<'a> {
    fn new(base: &'a TorusBase, level: u32, eps: f64) -> Result<Self> {
        if level < 1 || level > 500 {
            return Err(Error::param("level", "must lie in [1, 500]"));
        }
        if !(eps > 0.0) {
            return Err(Error::param("eps", "must be positive"));
        }
        let lattice = &base.lattice;
        let n = lattice.len();
        let start = lattice.origin();
        let weak_end = lattice.shift(start, 0, 1).expect("torus shift");
        let strong_end = lattice.shift(start, 0, 2).expect("torus shift");
        let small = (-(level as f64)).exp2();
        let trap = [weak_end, strong_end];
        let mut rows = [vec![0.0; n], vec![0.0; n]];
        let unit = [base.row(weak_end), base.row(strong_end)];
        for (k, &site) in trap.iter().enumerate() {
            let kernel = &unit[k];
            let long_sum: f64 = (0..n)
                .filter(|&u| u != site && !nearest_neighbours(lattice, site, u))
                .map(|u| kernel[u])
                .sum();
            let long_w = small / long_sum * (1.0 - 1e-12);
            for u in 0..n {
                if u == site {
                    continue;
                }
                let w = if nearest_neighbours(lattice, site, u) {
                    if trap.contains(&u) { 1.0 } else { small }
                } else {
                    long_w
                };
                rows[k][u] = w * kernel[u];
            }
        }
        rows[1][weak_end] = rows[0][strong_end];
        // Row sum as applied by the convolution, so mass is conserved to FFT precision.
        let unit_sum = base.kernel_hat[0].re;
        let mut sums = vec![unit_sum; n];
        for (x, s) in sums.iter_mut().enumerate() {
            for k in 0..2 {
                *s += rows[k][x] - unit[k][x];
            }
        }
        for k in 0..2 {
            sums[trap[k]] = rows[k].iter().sum();
        }
        Ok(TorusTrap { base, start, trap, rows, unit, sums })
    }

    fn len(&self) -> usize {
        self.base.lattice.len()
    }

    fn step(&self, v: &[f64], buf: &mut [Complex<f64>]) -> Vec<f64> {
        let n = self.len();
        let shape = self.base.lattice.extent().to_vec();
        let g: Vec<f64> = v.iter().zip(&self.sums).map(|(a, s)| a / s).collect();
        for (b, x) in buf.iter_mut().zip(&g) {
            *b = Complex::new(*x, 0.0);
        }
        fft_nd(buf, &shape, &self.base.forward);
        for (b, k) in buf.iter_mut().zip(&self.base.kernel_hat) {
            *b *= k;
        }
        fft_nd(buf, &shape, &self.base.inverse);
        let scale = 1.0 / n as f64;
        let mut out: Vec<f64> = buf.iter().map(|c| c.re * scale).collect();
        for k in 0..2 {
            let gs = g[self.trap[k]];
            if gs != 0.0 {
                for ((o, r), b) in out.iter_mut().zip(&self.rows[k]).zip(&self.unit[k]) {
                    *o += gs * (r - b);
                }
            }
        }
        for k in 0..2 {
            out[self.trap[k]] = g.iter().zip(&self.rows[k]).map(|(a, r)| a * r).sum();
        }
        out
    }

    fn returns(&self, steps: usize) -> (Vec<f64>, f64) {
        let n = self.len();
        let mut v = vec![0.0; n];
        v[self.start] = 1.0;
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let mut at = vec![1.0; steps + 1];
        let mut err = 0.0f64;
        for s in 1..=steps {
            v = self.step(&v, &mut buf);
            at[s] = v[self.start];
            err = err.max((v.iter().sum::<f64>() - 1.0).abs());
        }
        (at, err)
    }
}

/// In-place multidimensional FFT over a row-major array.
fn fft_nd(data: &mut [Complex<f64>], shape: &[usize], plans: &[Arc<dyn Fft<f64>>]) {
    let d = shape.len();
    let n = data.len();
    let mut stride = 1;
    for axis in (0..d).rev() {
        let len = shape[axis];
        if axis == d - 1 {
            plans[axis].process(data);
        } else {
            let block = len * stride;
            let mut line = vec![Complex::new(0.0, 0.0); len * stride];
            for chunk in data.chunks_mut(block) {
                // Transpose the block so each line along `axis` is contiguous.
                for i in 0..len {
                    for j in 0..stride {
                        line[j * len + i] = chunk[i * stride + j];
                    }
                }
                plans[axis].process(&mut line);
                for i in 0..len {
                    for j in 0..stride {
                        chunk[i * stride + j] = line[j * len + i];
                    }
                }
            }
        }
        stride *= len;
    }
    debug_assert_eq!(stride, n);
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrapScaling {
    pub levels: Vec<u32>,
    /// `P(2n,0,0) 2^{2N}` at `n = 2^{N-1}`.
    pub scaled: Vec<f64>,
    pub min: f64,
    /// `max_N scaled_N / scaled_first`, inverted when below one.
    pub max_factor: f64,
    pub reports: Vec<TrapReport>,
}

pub fn trap_scaling(levels: &[u32], spec: LatticeSpec, eps: f64, alpha: f64, budget: u64) -> Result<TrapScaling> {
    if levels.is_empty() {
        return Err(Error::param("levels", "must not be empty"));
    }
    if let Some(&bad) = levels.iter().find(|&&l| l == 0 || l > 40) {
        return Err(Error::param("levels", format!("must lie in [1, 40], got {bad}")));
    }
    let base = if spec.boundary == Boundary::Torus { Some(TorusBase::new(spec.clone(), alpha)?) } else { None };
    let mut reports = Vec::new();
    for &level in levels {
        let grid = [1usize << (level - 1)];
        reports.push(match &base {
            Some(b) => torus_report(b, level, &grid, eps, budget)?,
            None => trap_return_probability(level, &grid, spec.clone(), eps, alpha, budget)?,
        });
    }
    let scaled: Vec<f64> = reports.iter().map(|r| r.rows[0].scaled).collect();
    let min = scaled.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_factor = scaled.iter().map(|s| (s / scaled[0]).max(scaled[0] / s)).fold(1.0, f64::max);
    Ok(TrapScaling { levels: levels.to_vec(), scaled, min, max_factor, reports })
}
