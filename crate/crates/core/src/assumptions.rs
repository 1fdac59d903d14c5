//! Scans of the volume and conductance summability conditions over balls.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Conductances, Environment, MuMode};
use crate::error::{Error, Result};
use crate::lattice::{Lattice, Metric};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub c_mu: f64,
    pub kappa: f64,
    pub c1: f64,
    /// Must exceed 1/2.
    pub c0: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { c_mu: 10.0, kappa: 2.0, c1: 1e4, c0: 0.5, c2: 100.0, c3: 1e-3 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DVolReport {
    /// Extremal `max(mu(B)/r^d, r^d/mu(B), max mu)` over the scan.
    pub c_mu_fit: f64,
    pub mu_max: f64,
    /// Smallest `kappa` with `inf_{B(0,R)} mu >= R^{-kappa}`; only for custom measures.
    pub dvol_kappa_fit: Option<f64>,
    pub theta: f64,
    pub r0: usize,
    pub pass_mu_bound: bool,
    pub pass_kappa: bool,
    pub pass_volume: bool,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Hk1Report {
    /// Largest of the three fitted `C1` values.
    pub c1_fit: f64,
    pub c1_local_sum: f64,
    pub c1_inverse_sum: f64,
    pub c1_tail: f64,
    pub c0_fit: f64,
    pub c_star: f64,
    pub pass_c0: bool,
    pub pass_i: bool,
    pub pass_ii: bool,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundReport {
    pub fit: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScanEntry {
    pub big_r: usize,
    pub r: usize,
    pub vol_low: f64,
    pub vol_high: f64,
    pub local_sum: f64,
    pub c0: f64,
    pub inverse_sum: f64,
    pub hk2: f64,
    pub hk3: f64,
    pub hk3_pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TailEntry {
    pub big_r: usize,
    pub r: usize,
    /// `sup_x r^alpha sum_{rho > r} w mu / rho^{d+alpha}`.
    pub tail: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub theta: f64,
    pub thresholds: Thresholds,
    /// `(R, r_min, r_max)` per scanned `R`.
    pub r_range: Vec<(usize, usize, usize)>,
    /// Radii skipped because `B(0, 6R)` leaves the box.
    pub skipped: Vec<usize>,
    pub dvol: DVolReport,
    pub hk1: Hk1Report,
    pub hk2: BoundReport,
    pub hk3: BoundReport,
    pub entries: Vec<ScanEntry>,
    pub tail_entries: Vec<TailEntry>,
}

fn fits(lat: &Lattice, big_r: usize) -> bool {
    let l = lat.spec().radius;
    if lat.is_torus() {
        10 * big_r <= l
    } else {
        lat.ball_inside(lat.origin(), 6.0 * big_r as f64)
    }
}

/// Per-x scan data over radii `1..=r_top` plus the extra tail radii.
struct SiteScan {
    vol: Vec<f64>,
    local_sum: Vec<f64>,
    tail: Vec<f64>,
    /// Sorted distances with prefix sums of `mu / w` over positive conductances.
    dist: Vec<f64>,
    inverse_prefix: Vec<f64>,
}

pub fn check_assumptions(env: &Environment, theta: f64, r_grid: &[usize], thresholds: &Thresholds) -> Result<AssumptionReport> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::param("theta", "must lie in (0, 1)"));
    }
    let lat = env.lattice();
    let mut grid: Vec<usize> = r_grid.iter().copied().filter(|&r| r >= 1).collect();
    grid.sort_unstable();
    grid.dedup();
    let (usable, skipped): (Vec<usize>, Vec<usize>) = grid.into_iter().partition(|&r| fits(lat, r));
    if usable.is_empty() {
        return Err(Error::InsufficientData("no R in the grid has B(0, 6R) inside the box".into()));
    }
    let r_min = |big_r: usize| ((big_r as f64).powf(theta) / 2.0).ceil().max(1.0) as usize;
    let r_range: Vec<(usize, usize, usize)> = usable.iter().map(|&b| (b, r_min(b), 2 * b)).collect();
    let big_max = *usable.last().expect("nonempty");
    let r_top = 2 * big_max;
    let d = env.dim() as i32;
    let alpha = env.alpha();
    let mu = env.mu();
    let o = lat.origin();
    let n = env.len();
    let xs = lat.ball(o, 6.0 * big_max as f64);
    // Level of a site: index of the smallest usable R with the site in B(0, 6R).
    let level = |x: usize| -> usize {
        let rho = lat.distance(o, x);
        usable.iter().position(|&b| rho <= 6.0 * b as f64).unwrap_or(usable.len())
    };
    let levels: Vec<usize> = xs.iter().map(|&x| level(x)).collect();
    let diameter = (0..n).map(|y| lat.distance(o, y)).fold(0.0, f64::max) * 2.0;
    let mut tail_radii: Vec<usize> = (1..=r_top).collect();
    let mut extra = (r_top + 1).next_power_of_two();
    while (extra as f64) < diameter {
        tail_radii.push(extra);
        extra *= 2;
    }
    let scans: Vec<SiteScan> = xs
        .par_iter()
        .map(|&x| {
            let mut pairs: Vec<(f64, usize)> = (0..n).filter(|&y| y != x).map(|y| (lat.distance(x, y), y)).collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut vol = vec![mu[x]; r_top + 1];
            let mut local_sum = vec![0.0; r_top + 1];
            let mut k = 0;
            let (mut v, mut s) = (mu[x], 0.0);
            for r in 1..=r_top {
                while k < pairs.len() && pairs[k].0 <= r as f64 {
                    let (rho, y) = pairs[k];
                    v += mu[y];
                    s += env.w(x, y) * mu[y] * rho.powf(2.0 - d as f64 - alpha);
                    k += 1;
                }
                vol[r] = v;
                local_sum[r] = s;
            }
            let total: f64 = pairs.iter().map(|&(rho, y)| env.w(x, y) * mu[y] * rho.powf(-(d as f64) - alpha)).sum();
            let mut tail = Vec::with_capacity(tail_radii.len());
            let (mut k, mut inside) = (0, 0.0);
            for &r in &tail_radii {
                while k < pairs.len() && pairs[k].0 <= r as f64 {
                    let (rho, y) = pairs[k];
                    inside += env.w(x, y) * mu[y] * rho.powf(-(d as f64) - alpha);
                    k += 1;
                }
                tail.push((total - inside).max(0.0));
            }
            let mut inverse_prefix = Vec::with_capacity(pairs.len());
            let mut acc = 0.0;
            for &(_, y) in &pairs {
                let w = env.w(x, y);
                if w > 0.0 {
                    acc += mu[y] / w;
                }
                inverse_prefix.push(acc);
            }
            SiteScan { vol, local_sum, tail, dist: pairs.iter().map(|p| p.0).collect(), inverse_prefix }
        })
        .collect();

    // Volume and measure bounds.
    let nr = usable.len();
    let mut vol_low = vec![vec![f64::INFINITY; r_top + 1]; nr];
    let mut vol_high = vec![vec![0.0f64; r_top + 1]; nr];
    let mut local = vec![vec![0.0f64; r_top + 1]; nr];
    for (scan, &lv) in scans.iter().zip(&levels) {
        for ri in lv..nr {
            for r in 1..=r_top {
                let rd = (r as f64).powi(d);
                let q = scan.vol[r] / rd;
                vol_low[ri][r] = vol_low[ri][r].min(q);
                vol_high[ri][r] = vol_high[ri][r].max(q);
                local[ri][r] = local[ri][r].max(scan.local_sum[r] / (r as f64).powf(2.0 - alpha));
            }
        }
    }
    let in_range = |ri: usize, r: usize| r >= r_range[ri].1 && r <= r_range[ri].2;
    let mu_max = xs.iter().map(|&x| mu[x]).fold(0.0, f64::max);
    let mut c_vol = 1.0f64;
    for ri in 0..nr {
        for r in 1..=r_top {
            if in_range(ri, r) {
                c_vol = c_vol.max(vol_high[ri][r]).max(1.0 / vol_low[ri][r]);
            }
        }
    }
    let c_mu_fit = c_vol.max(mu_max);
    let dvol_kappa_fit = match env.mu_mode() {
        MuMode::Custom(_) => Some(
            usable
                .iter()
                .map(|&b| {
                    let inf = lat.ball(o, b as f64).iter().map(|&x| mu[x]).fold(f64::INFINITY, f64::min);
                    if b == 1 {
                        if inf >= 1.0 { 0.0 } else { f64::INFINITY }
                    } else {
                        (-inf.ln() / (b as f64).ln()).max(0.0)
                    }
                })
                .fold(0.0, f64::max),
        ),
        _ => None,
    };
    let c_star = 8.0 * c_mu_fit.powf(2.0 / d as f64);

    // Inverse sums over B^w(x, c_* r).
    let mut inverse = vec![vec![0.0f64; r_top + 1]; nr];
    for (scan, &lv) in scans.iter().zip(&levels) {
        for r in 1..=r_top {
            let reach = c_star * r as f64;
            let k = scan.dist.partition_point(|&v| v <= reach);
            let s = if k == 0 { 0.0 } else { scan.inverse_prefix[k - 1] };
            for row in inverse.iter_mut().skip(lv) {
                row[r] = row[r].max(s / (r as f64).powi(d));
            }
        }
    }

    // c0: mu(B^w_z(x, r)) / mu(B(x, r)).
    let c0 = c0_scan(env, &xs, &levels, nr, r_top);

    // HK2 / HK3 ball sums of w_{x,z} mu_z around y.
    let (hk2, hk3) = pair_ball_sums(env, &xs, &levels, nr, r_top);

    let mut entries = Vec::new();
    let (mut c1_local, mut c1_inverse, mut c0_fit, mut c2_fit, mut c3_fit) = (0.0f64, 0.0f64, f64::INFINITY, 0.0f64, f64::INFINITY);
    for (ri, &(big_r, lo, hi)) in r_range.iter().enumerate() {
        for r in lo..=hi {
            c1_local = c1_local.max(local[ri][r]);
            c1_inverse = c1_inverse.max(inverse[ri][r]);
            c0_fit = c0_fit.min(c0[ri][r]);
            c2_fit = c2_fit.max(hk2[ri][r]);
            c3_fit = c3_fit.min(hk3[ri][r]);
            entries.push(ScanEntry {
                big_r,
                r,
                vol_low: vol_low[ri][r],
                vol_high: vol_high[ri][r],
                local_sum: local[ri][r],
                c0: c0[ri][r],
                inverse_sum: inverse[ri][r],
                hk2: hk2[ri][r],
                hk3: hk3[ri][r],
                hk3_pass: hk3[ri][r] >= thresholds.c3,
            });
        }
    }
    let mut tail_entries = Vec::new();
    let mut c1_tail = 0.0f64;
    for (ri, &(big_r, lo, _)) in r_range.iter().enumerate() {
        for (k, &r) in tail_radii.iter().enumerate() {
            if r < lo {
                continue;
            }
            let t = scans
                .iter()
                .zip(&levels)
                .filter(|(_, &lv)| lv <= ri)
                .map(|(s, _)| s.tail[k] * (r as f64).powf(alpha))
                .fold(0.0, f64::max);
            c1_tail = c1_tail.max(t);
            tail_entries.push(TailEntry { big_r, r, tail: t });
        }
    }
    let pass_mu_bound = mu_max <= thresholds.c_mu;
    let pass_volume = c_vol <= thresholds.c_mu;
    let pass_kappa = dvol_kappa_fit.is_none_or(|k| k <= thresholds.kappa);
    let dvol = DVolReport {
        c_mu_fit,
        mu_max,
        dvol_kappa_fit,
        theta,
        r0: usable[0],
        pass_mu_bound,
        pass_kappa,
        pass_volume,
        pass: pass_mu_bound && pass_kappa && pass_volume,
    };
    let pass_c0 = c0_fit > thresholds.c0.max(0.5);
    let pass_i = c1_local <= thresholds.c1 && c1_inverse <= thresholds.c1 && pass_c0;
    let pass_ii = c1_tail <= thresholds.c1;
    let hk1 = Hk1Report {
        c1_fit: c1_local.max(c1_inverse).max(c1_tail),
        c1_local_sum: c1_local,
        c1_inverse_sum: c1_inverse,
        c1_tail,
        c0_fit,
        c_star,
        pass_c0,
        pass_i,
        pass_ii,
        pass: pass_i && pass_ii,
    };
    Ok(AssumptionReport {
        theta,
        thresholds: thresholds.clone(),
        r_range,
        skipped,
        dvol,
        hk1,
        hk2: BoundReport { fit: c2_fit, pass: c2_fit <= thresholds.c2 },
        hk3: BoundReport { fit: c3_fit, pass: c3_fit >= thresholds.c3 },
        entries,
        tail_entries,
    })
}

fn has_zero_conductance(env: &Environment) -> bool {
    match env.conductances() {
        Conductances::Constant(v) => *v == 0.0,
        Conductances::Pairs(p) => p.contains(&0.0),
    }
}

/// Per-level minima of `mu(B^w_z(x, r)) / mu(B(x, r))` over `x, z` in the scan ball.
fn c0_scan(env: &Environment, xs: &[usize], levels: &[usize], nr: usize, r_top: usize) -> Vec<Vec<f64>> {
    if !has_zero_conductance(env) {
        return vec![vec![1.0; r_top + 1]; nr];
    }
    let lat = env.lattice();
    let mu = env.mu();
    let balls: Vec<Vec<(f64, usize)>> = xs
        .par_iter()
        .map(|&x| {
            let mut b: Vec<(f64, usize)> =
                lat.ball(x, r_top as f64).into_iter().map(|y| (lat.distance(x, y), y)).collect();
            b.sort_by(|a, c| a.0.total_cmp(&c.0).then(a.1.cmp(&c.1)));
            b
        })
        .collect();
    xs.par_iter()
        .zip(levels)
        .map(|(&z, &lz)| {
            let mut out = vec![vec![f64::INFINITY; r_top + 1]; nr];
            for (ball, &lx) in balls.iter().zip(levels) {
                let lv = lx.max(lz);
                if lv >= nr {
                    continue;
                }
                let (mut k, mut all, mut pos) = (0, 0.0, 0.0);
                for r in 1..=r_top {
                    while k < ball.len() && ball[k].0 <= r as f64 {
                        let y = ball[k].1;
                        all += mu[y];
                        if env.w(y, z) > 0.0 {
                            pos += mu[y];
                        }
                        k += 1;
                    }
                    let q = pos / all;
                    for row in out.iter_mut().skip(lv) {
                        if q < row[r] {
                            row[r] = q;
                        }
                    }
                }
            }
            out
        })
        .reduce(
            || vec![vec![f64::INFINITY; r_top + 1]; nr],
            |mut a, b| {
                for (ra, rb) in a.iter_mut().zip(&b) {
                    for (u, v) in ra.iter_mut().zip(rb) {
                        *u = u.min(*v);
                    }
                }
                a
            },
        )
}

/// Offsets in the leading axes with the half-width along the last axis.
fn ball_rows(dim: usize, metric: Metric, r: usize) -> Vec<(Vec<i32>, i32)> {
    let lead = dim - 1;
    let width = 2 * r + 1;
    let ri = r as i32;
    let mut out = Vec::new();
    for idx in 0..width.pow(lead as u32) {
        let mut rem = idx;
        let mut off = vec![0i32; lead];
        for v in off.iter_mut() {
            *v = (rem % width) as i32 - ri;
            rem /= width;
        }
        let h = match metric {
            Metric::Euclidean => {
                let s: i32 = off.iter().map(|v| v * v).sum();
                if s > ri * ri {
                    continue;
                }
                ((ri * ri - s) as f64).sqrt().floor() as i32
            }
            Metric::Graph => {
                let s: i32 = off.iter().map(|v| v.abs()).sum();
                if s > ri {
                    continue;
                }
                ri - s
            }
            Metric::Chebyshev => ri,
        };
        out.push((off, h));
    }
    out
}

/// Per-level `max` and `min` over `x, y` of `sum_{z in B(y,r)} w_{x,z} mu_z / r^d`.
fn pair_ball_sums(env: &Environment, xs: &[usize], levels: &[usize], nr: usize, r_top: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let lat = env.lattice();
    let mu = env.mu();
    let n = env.len();
    let d = lat.dim();
    let extent = lat.extent().to_vec();
    let last_len = extent[d - 1] as i32;
    let rows: Vec<Vec<(Vec<i32>, i32)>> = (0..=r_top).map(|r| ball_rows(d, lat.spec().metric, r)).collect();
    let last_min = lat.coords(0)[d - 1];
    let empty = || (vec![vec![0.0f64; r_top + 1]; nr], vec![vec![f64::INFINITY; r_top + 1]; nr]);
    xs.par_iter()
        .zip(levels)
        .map(|(&x, &lx)| {
            // Prefix sums along the last axis of f(z) = w_{x,z} mu_z.
            let mut prefix = vec![0.0; n];
            for z in 0..n {
                let f = env.w(x, z) * mu[z];
                let first = lat.coords(z)[d - 1] == last_min;
                prefix[z] = if first { f } else { prefix[z - 1] + f };
            }
            let mut acc = empty();
            let mut coords = vec![0i32; d];
            for (&y, &ly) in xs.iter().zip(levels) {
                let lv = lx.max(ly);
                if lv >= nr {
                    continue;
                }
                let cy = lat.coords(y).to_vec();
                for r in 1..=r_top {
                    let mut s = 0.0;
                    for (off, h) in &rows[r] {
                        for k in 0..d - 1 {
                            coords[k] = cy[k] + off[k];
                        }
                        coords[d - 1] = last_min;
                        let Some(base) = lat.index_of(&coords) else { continue };
                        let lo = (cy[d - 1] - h - last_min).max(0);
                        let hi = (cy[d - 1] + h - last_min).min(last_len - 1);
                        if lo > hi {
                            continue;
                        }
                        s += prefix[base + hi as usize] - if lo > 0 { prefix[base + lo as usize - 1] } else { 0.0 };
                    }
                    let q = s / (r as f64).powi(d as i32);
                    for ri in lv..nr {
                        if q > acc.0[ri][r] {
                            acc.0[ri][r] = q;
                        }
                        if q < acc.1[ri][r] {
                            acc.1[ri][r] = q;
                        }
                    }
                }
            }
            acc
        })
        .reduce(empty, |mut a, b| {
            for ri in 0..nr {
                for r in 0..=r_top {
                    a.0[ri][r] = a.0[ri][r].max(b.0[ri][r]);
                    a.1[ri][r] = a.1[ri][r].min(b.1[ri][r]);
                }
            }
            a
        })
}
