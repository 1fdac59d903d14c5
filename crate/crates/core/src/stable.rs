//! Isotropic alpha-stable densities and the local limit experiment.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, ln_gamma};

use crate::env::MuMode;
use crate::error::{Error, Result};
use crate::heat::heat_kernel_multi;
use crate::lattice::{Lattice, LatticeSpec};
use crate::law::ConductanceLaw;
use crate::markov::Generator;
use crate::quad::{adaptive_gk, gauss_legendre};
use crate::stats::median;

const ALPHA_MARGIN: f64 = 1e-3;
/// Frequencies with `A |xi|^alpha` beyond this contribute below `e^{-40}`.
const CUTOFF: f64 = 40.0;

fn check(dim: usize, alpha: f64) -> Result<()> {
    if dim == 0 {
        return Err(Error::param("dim", "must be at least 1"));
    }
    if !(alpha >= ALPHA_MARGIN && alpha <= 2.0 - ALPHA_MARGIN) {
        return Err(Error::param("alpha", "must lie in [1e-3, 2 - 1e-3]"));
    }
    Ok(())
}

/// `c(d, alpha) = int (1 - cos(e . z)) |z|^{-d-alpha} dz` with its error estimate.
///
/// The transverse `d-1` directions integrate in closed form to a Beta factor;
/// the remaining one-dimensional integral is a power series on `[0, 1]`,
/// adaptive Gauss-Kronrod over whole periods up to `U`, and an asymptotic
/// expansion of the oscillatory tail beyond `U`.
pub fn stable_symbol_constant_with_error(dim: usize, alpha: f64, tol: f64) -> Result<(f64, f64)> {
    check(dim, alpha)?;
    let mut head = 0.0;
    let mut fact = 1.0;
    for k in 1..60 {
        fact *= ((2 * k - 1) * (2 * k)) as f64;
        let term = 1.0 / (fact * (2 * k) as f64 - fact * alpha);
        head += if k % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    let periods = 40.0;
    let upper = 2.0 * std::f64::consts::PI * periods;
    let f = |u: f64| (1.0 - u.cos()) * u.powf(-1.0 - alpha);
    let (mid, mid_err) = adaptive_gk(f, 1.0, upper, tol * 1e-2);
    // int_U^inf u^{-1-a} du minus the cosine tail via repeated integration by parts.
    let mut cos_tail = 0.0;
    let mut coef = 1.0;
    let mut power = 1.0 + alpha;
    let mut last = f64::INFINITY;
    for k in 0..20 {
        let term = coef * upper.powf(-power);
        if term.abs() > last {
            break;
        }
        last = term.abs();
        // With U a multiple of 2 pi: sin U = 0, cos U = 1; terms alternate between the sine and cosine parts.
        if k % 2 == 1 {
            cos_tail += if (k / 2) % 2 == 0 { term } else { -term };
        }
        coef *= power;
        power += 1.0;
    }
    let tail = upper.powf(-alpha) / alpha - cos_tail;
    let one_dim = 2.0 * (head + mid + tail);
    let transverse = std::f64::consts::PI.powf((dim as f64 - 1.0) / 2.0)
        * (ln_gamma((1.0 + alpha) / 2.0) - ln_gamma((dim as f64 + alpha) / 2.0)).exp();
    Ok((one_dim * transverse, 2.0 * (mid_err + last) * transverse))
}

pub fn stable_symbol_constant(dim: usize, alpha: f64) -> Result<f64> {
    Ok(stable_symbol_constant_with_error(dim, alpha, 1e-10)?.0)
}

/// Closed form `pi^{d/2} |Gamma(-alpha/2)| / (2^alpha Gamma((d+alpha)/2))`.
pub fn symbol_constant_closed_form(dim: usize, alpha: f64) -> f64 {
    let d = dim as f64;
    std::f64::consts::PI.powf(d / 2.0) * gamma(-alpha / 2.0).abs() / (2f64.powf(alpha) * gamma((d + alpha) / 2.0))
}

/// `J_nu(x) / x^nu` for `nu = d/2 - 1 >= 0`.
fn bessel_ratio(nu: f64, x: f64) -> f64 {
    if x < 25.0 {
        // Poisson integral over theta in [-pi/2, pi/2]; the integrand is smooth and
        // pi-periodic, so the trapezoid rule converges geometrically.
        let m = 96;
        let h = std::f64::consts::PI / m as f64;
        let mut s = 0.0;
        for j in 0..m {
            let th = -std::f64::consts::FRAC_PI_2 + (j as f64 + 0.5) * h;
            let c = th.cos();
            s += c.powf(2.0 * nu) * (x * th.sin()).cos();
        }
        s * h / (2f64.powf(nu) * std::f64::consts::PI.sqrt() * gamma(nu + 0.5))
    } else {
        // Hankel asymptotic expansion.
        let mu = 4.0 * nu * nu;
        let (mut p, mut q) = (0.0, 0.0);
        let mut a = 1.0;
        let mut last = f64::INFINITY;
        for k in 0..30 {
            let term = a / x.powi(k);
            if term.abs() > last {
                break;
            }
            last = term.abs();
            match k % 4 {
                0 => p += term,
                1 => q += term,
                2 => p -= term,
                _ => q -= term,
            }
            let j = (2 * k + 1) as f64;
            a *= (mu - j * j) / ((k + 1) as f64 * 8.0);
        }
        let phase = x - (0.5 * nu + 0.25) * std::f64::consts::PI;
        (2.0 / (std::f64::consts::PI * x)).sqrt() * (p * phase.cos() - q * phase.sin()) / x.powf(nu)
    }
}

/// Density of the isotropic stable process with Levy measure `a |z|^{-d-alpha} dz`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StableDensity {
    pub dim: usize,
    pub alpha: f64,
    pub a: f64,
    pub symbol_constant: f64,
    /// Largest `|x|` (at `t = 1`) evaluated by Fourier inversion.
    pub x_max: f64,
    pub points_per_panel: usize,
    /// Set for `d >= 3`, where only the generic Bessel path is available.
    pub experimental: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityValue {
    pub value: f64,
    /// The point lies beyond the resolved range and `value` is the tail asymptotic.
    pub tail_fallback: bool,
}

impl StableDensity {
    pub fn new(dim: usize, alpha: f64, a: f64) -> Result<Self> {
        check(dim, alpha)?;
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::param("a", "must be positive"));
        }
        let c = stable_symbol_constant(dim, alpha)?;
        let scale = (c * a).powf(1.0 / alpha);
        Ok(StableDensity {
            dim,
            alpha,
            a,
            symbol_constant: c,
            x_max: 50.0 * scale,
            points_per_panel: 20,
            experimental: dim >= 3,
        })
    }

    /// `A` in `psi(xi) = A |xi|^alpha`.
    pub fn symbol_scale(&self) -> f64 {
        self.symbol_constant * self.a
    }

    /// `k_{a,1}` at radius `r` by radial Fourier inversion.
    fn invert(&self, r: f64) -> f64 {
        let big_a = self.symbol_scale();
        let alpha = self.alpha;
        let xi_max = (CUTOFF / big_a).powf(1.0 / alpha);
        let width = if r > 0.0 { (xi_max / 64.0).min(1.0 / r) } else { xi_max / 64.0 };
        let (nodes, weights) = gauss_legendre(self.points_per_panel);
        let d = self.dim;
        let nu = d as f64 / 2.0 - 1.0;
        let integrand = |xi: f64| -> f64 {
            let damp = (-big_a * xi.powf(alpha)).exp();
            if d == 1 {
                (xi * r).cos() * damp
            } else {
                bessel_ratio(nu, xi * r) * xi.powi(d as i32 - 1) * damp
            }
        };
        let panel = |lo: f64, hi: f64| -> f64 {
            let (m, h) = (0.5 * (lo + hi), 0.5 * (hi - lo));
            nodes.iter().zip(&weights).map(|(x, w)| w * integrand(m + h * x)).sum::<f64>() * h
        };
        let mut total = 0.0;
        // Dyadic refinement of the first panel resolves the xi^alpha cusp at zero.
        let mut hi = width;
        for _ in 0..40 {
            let lo = 0.5 * hi;
            total += panel(lo, hi);
            hi = lo;
        }
        let count = (xi_max / width).ceil() as usize;
        total += (1..count)
            .into_par_iter()
            .map(|k| panel(k as f64 * width, ((k + 1) as f64 * width).min(xi_max)))
            .collect::<Vec<f64>>()
            .iter()
            .sum::<f64>();
        let norm = if d == 1 {
            1.0 / std::f64::consts::PI
        } else {
            // (2 pi)^{-d/2} r^{1-d/2} J_nu(xi r) xi^{d/2} = (2 pi)^{-d/2} [J_nu(xi r)/(xi r)^nu] xi^{d-1}.
            (2.0 * std::f64::consts::PI).powf(-(d as f64) / 2.0)
        };
        total * norm
    }

    /// `k_{a,1}(0)` in closed form.
    pub fn at_origin_closed_form(&self) -> f64 {
        let d = self.dim as f64;
        let sphere = 2.0 * std::f64::consts::PI.powf(d / 2.0) / gamma(d / 2.0);
        sphere * gamma(d / self.alpha) / (self.alpha * self.symbol_scale().powf(d / self.alpha))
            / (2.0 * std::f64::consts::PI).powf(d)
    }

    /// `k_{a,1}` at radius `r`.
    pub fn unit_time(&self, r: f64) -> DensityValue {
        let r = r.abs();
        if r > self.x_max {
            return DensityValue {
                value: self.a * r.powf(-(self.dim as f64) - self.alpha),
                tail_fallback: true,
            };
        }
        DensityValue { value: self.invert(r).max(0.0), tail_fallback: false }
    }

    /// `k_{a,t}(x) = t^{-d/alpha} k_{a,1}(t^{-1/alpha} x)`.
    pub fn density(&self, t: f64, x: &[f64]) -> Result<DensityValue> {
        if !(t > 0.0) {
            return Err(Error::param("t", "must be positive"));
        }
        if x.len() != self.dim {
            return Err(Error::param("x", "dimension mismatch"));
        }
        let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(self.radial(t, r))
    }

    pub fn radial(&self, t: f64, r: f64) -> DensityValue {
        let s = t.powf(-1.0 / self.alpha);
        let v = self.unit_time(r * s);
        DensityValue { value: v.value * s.powi(self.dim as i32), tail_fallback: v.tail_fallback }
    }

    /// `int k_{a,1}` over the resolved ball plus the asymptotic tail mass beyond it.
    pub fn total_mass(&self) -> f64 {
        let d = self.dim as f64;
        let sphere = 2.0 * std::f64::consts::PI.powf(d / 2.0) / gamma(d / 2.0);
        let f = |r: f64| self.invert(r) * r.powf(d - 1.0);
        let scale = self.symbol_scale().powf(1.0 / self.alpha);
        let mut inner = 0.0;
        let mut lo = 0.0;
        let mut hi = 0.25 * scale;
        while lo < self.x_max {
            let top = hi.min(self.x_max);
            inner += adaptive_gk(f, lo, top, 1e-9).0;
            lo = top;
            hi *= 2.0;
        }
        let tail = self.a * self.x_max.powf(-self.alpha) / self.alpha;
        sphere * (inner + tail)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LltConfig {
    pub law: ConductanceLaw,
    pub dim: usize,
    pub alpha: f64,
    pub seeds: Vec<u64>,
    pub n_grid: Vec<usize>,
    pub t_window: (f64, f64),
    pub t_points: usize,
    pub k_radius: f64,
    /// Torus radius per `n`; chosen automatically when absent.
    pub torus_radius: Option<Vec<usize>>,
    pub site_cap: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LltEntry {
    pub n: usize,
    pub seed: u64,
    pub torus_radius: usize,
    pub sup_error: f64,
    /// Time and cell of the largest error.
    pub worst_t: f64,
    pub worst_cell: Vec<i64>,
    pub image_bias: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LltReport {
    pub a: f64,
    pub entries: Vec<LltEntry>,
    /// `(n, median over seeds of the sup error)`.
    pub median: Vec<(usize, f64)>,
    pub strictly_decreasing: bool,
}

/// `sum_{j != 0} |j|^{-s}` over `Z^d`.
fn lattice_zeta(dim: usize, s: f64) -> f64 {
    let reach: i64 = match dim {
        1 => 2000,
        2 => 60,
        _ => 12,
    };
    let width = (2 * reach + 1) as usize;
    let mut sum = 0.0;
    let mut v = vec![0i64; dim];
    for idx in 0..width.pow(dim as u32) {
        let mut r = idx;
        for c in v.iter_mut() {
            *c = (r % width) as i64 - reach;
            r /= width;
        }
        let n2: i64 = v.iter().map(|c| c * c).sum();
        if n2 > 0 {
            sum += (n2 as f64).powf(-s / 2.0);
        }
    }
    let d = dim as f64;
    let sphere = 2.0 * std::f64::consts::PI.powf(d / 2.0) / gamma(d / 2.0);
    sum + sphere * (reach as f64 + 0.5).powf(d - s) / (s - d)
}

/// Estimated bias of `n^d p` on a torus of radius `m` from periodic images:
/// `n^d * n^alpha T2 * a * sum_{j != 0} |j P|^{-d-alpha}`.
pub fn image_bias(dim: usize, alpha: f64, a: f64, n: usize, t_max: f64, m: usize) -> f64 {
    let s = dim as f64 + alpha;
    let period = (2 * m + 1) as f64;
    t_max * a * lattice_zeta(dim, s) * (n as f64 / period).powf(s)
}

pub const IMAGE_BIAS_LIMIT: f64 = 1e-3;

/// Smallest torus radius meeting both `8 n k` and the image-bias limit.
pub fn required_torus_radius(dim: usize, alpha: f64, a: f64, n: usize, t_max: f64, k_radius: f64) -> usize {
    let mut m = (8.0 * n as f64 * k_radius).ceil() as usize;
    while image_bias(dim, alpha, a, n, t_max, m) > IMAGE_BIAS_LIMIT {
        m = (m as f64 * 1.1).ceil() as usize + 1;
    }
    m
}

/// Sup over the `(t, x)` grid of `|n^d p(n^alpha t, 0, [n x]) - k_{a,t}(x)|`.
pub fn llt_error(cfg: &LltConfig) -> Result<LltReport> {
    check(cfg.dim, cfg.alpha)?;
    cfg.law.validate()?;
    let a = cfg.law.mean().ok_or_else(|| Error::param("law", "needs a finite mean conductance"))?;
    let (t1, t2) = cfg.t_window;
    if !(t1 > 0.0 && t2 >= t1) {
        return Err(Error::param("t_window", "need 0 < T1 <= T2"));
    }
    if cfg.seeds.is_empty() || cfg.n_grid.is_empty() || cfg.t_points == 0 {
        return Err(Error::param("seeds", "seeds, n_grid and t_points must be nonempty"));
    }
    if !(cfg.k_radius > 0.0) {
        return Err(Error::param("k_radius", "must be positive"));
    }
    let limit = StableDensity::new(cfg.dim, cfg.alpha, a)?;
    let times: Vec<f64> = (0..cfg.t_points)
        .map(|i| if cfg.t_points == 1 { t1 } else { t1 + (t2 - t1) * i as f64 / (cfg.t_points - 1) as f64 })
        .collect();
    let mut entries = Vec::new();
    for (ni, &n) in cfg.n_grid.iter().enumerate() {
        if n == 0 {
            return Err(Error::param("n_grid", "scales must be positive"));
        }
        let required = required_torus_radius(cfg.dim, cfg.alpha, a, n, t2, cfg.k_radius);
        let radius = match &cfg.torus_radius {
            Some(r) => {
                let m = *r.get(ni).ok_or_else(|| Error::param("torus_radius", "one radius per n"))?;
                if m < required {
                    return Err(Error::TorusTooSmall { required, actual: m });
                }
                m
            }
            None => required,
        };
        let spec = LatticeSpec::torus(cfg.dim, radius);
        let sites = spec.site_count();
        if sites > cfg.site_cap as u128 {
            return Err(Error::SiteCapExceeded { count: sites.min(usize::MAX as u128) as usize, cap: cfg.site_cap });
        }
        let cells = cell_grid(cfg.dim, n, cfg.k_radius);
        let limits: Vec<Vec<(f64, f64)>> = times
            .par_iter()
            .map(|&t| {
                cells
                    .iter()
                    .map(|c| {
                        let (near, far) = cell_radii(c, n);
                        (limit.radial(t, near).value, limit.radial(t, far).value)
                    })
                    .collect()
            })
            .collect();
        for &seed in &cfg.seeds {
            let lattice = Lattice::with_cap(spec.clone(), cfg.site_cap)?;
            let env = crate::env::Environment::sample(lattice, cfg.law.clone(), MuMode::Counting, cfg.alpha, seed)?;
            let lat = env.lattice();
            let gen = Generator::full(&env);
            let scaled_times: Vec<f64> = times.iter().map(|t| (n as f64).powf(cfg.alpha) * t).collect();
            let fields = heat_kernel_multi(&gen, &scaled_times, lat.origin(), 1e-12)?;
            let nd = (n as f64).powi(cfg.dim as i32);
            let mut best = (0.0, 0.0, Vec::new());
            for ((field, &t), lim) in fields.iter().zip(&times).zip(&limits) {
                for (cell, &(k_hi, k_lo)) in cells.iter().zip(lim) {
                    let coords: Vec<i32> = cell.iter().map(|&c| c as i32).collect();
                    let site = lat.index_of(&coords).ok_or_else(|| Error::param("k_radius", "cell outside the torus"))?;
                    let v = nd * field.values[site];
                    let e = (v - k_hi).abs().max((v - k_lo).abs());
                    if e > best.0 {
                        best = (e, t, cell.clone());
                    }
                }
            }
            entries.push(LltEntry {
                n,
                seed,
                torus_radius: radius,
                sup_error: best.0,
                worst_t: best.1,
                worst_cell: best.2,
                image_bias: image_bias(cfg.dim, cfg.alpha, a, n, t2, radius),
            });
        }
    }
    let median_rows: Vec<(usize, f64)> = cfg
        .n_grid
        .iter()
        .map(|&n| {
            let v: Vec<f64> = entries.iter().filter(|e| e.n == n).map(|e| e.sup_error).collect();
            (n, median(&v))
        })
        .collect();
    let strictly_decreasing = median_rows.windows(2).all(|w| w[1].1 < w[0].1);
    Ok(LltReport { a, entries, median: median_rows, strictly_decreasing })
}

/// Lattice cells `[m/n, (m+1)/n)^d` inside `[-k, k]^d`.
fn cell_grid(dim: usize, n: usize, k: f64) -> Vec<Vec<i64>> {
    let lo = (-k * n as f64).ceil() as i64;
    let hi = (k * n as f64).floor() as i64 - 1;
    let width = (hi - lo + 1).max(0) as usize;
    let mut out = Vec::with_capacity(width.pow(dim as u32));
    for idx in 0..width.pow(dim as u32) {
        let mut r = idx;
        let mut c = vec![0i64; dim];
        for v in c.iter_mut().rev() {
            *v = lo + (r % width) as i64;
            r /= width;
        }
        out.push(c);
    }
    out
}

/// Nearest and farthest distance from the origin over the closed cell.
fn cell_radii(cell: &[i64], n: usize) -> (f64, f64) {
    let h = 1.0 / n as f64;
    let (mut near, mut far) = (0.0, 0.0);
    for &m in cell {
        let (a, b) = (m as f64 * h, (m + 1) as f64 * h);
        let closest = if a <= 0.0 && b >= 0.0 { 0.0 } else { a.abs().min(b.abs()) };
        let farthest = a.abs().max(b.abs());
        near += closest * closest;
        far += farthest * farthest;
    }
    (near.sqrt(), far.sqrt())
}

/// Convenience wrapper used by tests: a constant-law single-seed LLT table.
pub fn llt_constant(dim: usize, alpha: f64, n_grid: &[usize]) -> Result<LltReport> {
    llt_error(&LltConfig {
        law: ConductanceLaw::constant(1.0),
        dim,
        alpha,
        seeds: vec![0],
        n_grid: n_grid.to_vec(),
        t_window: (0.5, 2.0),
        t_points: 7,
        k_radius: 2.0,
        torus_radius: None,
        site_cap: 1 << 16,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symbol_constant_oracles() {
        let pi = std::f64::consts::PI;
        assert!((stable_symbol_constant(1, 1.0).unwrap() - pi).abs() < 1e-7);
        for &d in &[1usize, 2, 3] {
            for &a in &[0.3, 0.8, 1.0, 1.5, 1.9] {
                let (c, err) = stable_symbol_constant_with_error(d, a, 1e-10).unwrap();
                let exact = symbol_constant_closed_form(d, a);
                assert!(c > 0.0);
                assert!((c - exact).abs() <= 1e-8 * exact, "d={d} a={a}: {c} vs {exact}");
                let (c2, _) = stable_symbol_constant_with_error(d, a, 5e-11).unwrap();
                assert!((c - c2).abs() <= err.max(1e-14 * c));
            }
        }
        assert!(stable_symbol_constant(1, 0.0005).is_err());
        assert!(stable_symbol_constant(1, 1.9995).is_err());
    }

    #[test]
    fn bessel_ratio_values() {
        // J0(1), J0(30), J1(2)/2.
        assert!((bessel_ratio(0.0, 1.0) - 0.765_197_686_557_966_6).abs() < 1e-13);
        assert!((bessel_ratio(0.0, 30.0) - (-0.086_367_983_581_040_23)).abs() < 1e-10);
        assert!((bessel_ratio(1.0, 2.0) - 0.576_724_807_756_873_4 / 2.0).abs() < 1e-13);
        assert!((bessel_ratio(1.0, 0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cauchy_density() {
        let k = StableDensity::new(1, 1.0, 1.0 / std::f64::consts::PI).unwrap();
        for i in 0..20 {
            let x = -5.0 + 0.55 * i as f64;
            let v = k.density(1.0, &[x]).unwrap();
            let want = 1.0 / (std::f64::consts::PI * (1.0 + x * x));
            assert!(!v.tail_fallback);
            assert!((v.value - want).abs() < 1e-6, "{x}: {} vs {want}", v.value);
        }
        assert!((k.total_mass() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn origin_and_scaling() {
        for &(d, a) in &[(1usize, 0.7), (2, 1.0), (2, 1.5)] {
            let k = StableDensity::new(d, a, 1.0).unwrap();
            let v = k.unit_time(0.0).value;
            assert!((v - k.at_origin_closed_form()).abs() < 1e-9 * v, "{d} {a}");
            let x = 0.8;
            let t = 2.5;
            let lhs = k.radial(t, x).value;
            let rhs = t.powf(-(d as f64) / a) * k.unit_time(t.powf(-1.0 / a) * x).value;
            assert!((lhs - rhs).abs() <= 1e-14 * rhs);
        }
    }

    #[test]
    fn planar_mass() {
        let k = StableDensity::new(2, 1.0, 1.0).unwrap();
        assert!((k.total_mass() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn tail_fallback_flagged() {
        let k = StableDensity::new(1, 1.0, 1.0).unwrap();
        let v = k.unit_time(10.0 * k.x_max);
        assert!(v.tail_fallback);
    }
}
