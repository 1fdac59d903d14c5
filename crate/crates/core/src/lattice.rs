//! Lattice boxes `Z_+^{d1} x Z^{d2}` truncated at radius `L`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SITE_CAP: usize = 16384;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// l2 norm of the displacement.
    Euclidean,
    /// l1 norm, the nearest-neighbour graph distance.
    Graph,
    /// l-infinity norm.
    Chebyshev,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    AbsorbingBox,
    Torus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSpec {
    /// Number of half-line factors `Z_+`.
    pub half_dims: usize,
    /// Number of full-line factors `Z`.
    pub full_dims: usize,
    pub radius: usize,
    #[serde(default = "default_metric")]
    pub metric: Metric,
    #[serde(default = "default_boundary")]
    pub boundary: Boundary,
}

fn default_metric() -> Metric {
    Metric::Euclidean
}

fn default_boundary() -> Boundary {
    Boundary::AbsorbingBox
}

impl LatticeSpec {
    pub fn full(dim: usize, radius: usize) -> Self {
        LatticeSpec {
            half_dims: 0,
            full_dims: dim,
            radius,
            metric: Metric::Euclidean,
            boundary: Boundary::AbsorbingBox,
        }
    }

    pub fn torus(dim: usize, radius: usize) -> Self {
        LatticeSpec { boundary: Boundary::Torus, ..Self::full(dim, radius) }
    }

    pub fn with_metric(mut self, metric: Metric) -> Self {
        self.metric = metric;
        self
    }

    pub fn dim(&self) -> usize {
        self.half_dims + self.full_dims
    }

    pub fn site_count(&self) -> u128 {
        let l = self.radius as u128;
        (l + 1).pow(self.half_dims as u32) * (2 * l + 1).pow(self.full_dims as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim() == 0 {
            return Err(Error::param("half_dims+full_dims", "must be at least 1"));
        }
        if self.radius == 0 {
            return Err(Error::param("radius", "must be at least 1"));
        }
        if self.boundary == Boundary::Torus && self.half_dims > 0 {
            return Err(Error::param("boundary", "torus wrap needs half_dims = 0"));
        }
        Ok(())
    }
}

/// Enumerated sites of a box with a distance oracle.
///
/// Sites are laid out in row-major order with the last axis fastest.
#[derive(Clone, Debug)]
pub struct Lattice {
    spec: LatticeSpec,
    dim: usize,
    lo: Vec<i32>,
    extent: Vec<usize>,
    stride: Vec<usize>,
    coords: Vec<i32>,
}

impl Lattice {
    pub fn new(spec: LatticeSpec) -> Result<Self> {
        Self::with_cap(spec, DEFAULT_SITE_CAP)
    }

    pub fn with_cap(spec: LatticeSpec, cap: usize) -> Result<Self> {
        spec.validate()?;
        let count = spec.site_count();
        if count > cap as u128 {
            return Err(Error::SiteCapExceeded {
                count: count.min(usize::MAX as u128) as usize,
                cap,
            });
        }
        let dim = spec.dim();
        let l = spec.radius as i32;
        let mut lo = Vec::with_capacity(dim);
        let mut extent = Vec::with_capacity(dim);
        for k in 0..dim {
            if k < spec.half_dims {
                lo.push(0);
                extent.push(spec.radius + 1);
            } else {
                lo.push(-l);
                extent.push(2 * spec.radius + 1);
            }
        }
        let mut stride = vec![1usize; dim];
        for k in (0..dim.saturating_sub(1)).rev() {
            stride[k] = stride[k + 1] * extent[k + 1];
        }
        let n = count as usize;
        let mut coords = Vec::with_capacity(n * dim);
        for i in 0..n {
            for k in 0..dim {
                coords.push(lo[k] + ((i / stride[k]) % extent[k]) as i32);
            }
        }
        Ok(Lattice { spec, dim, lo, extent, stride, coords })
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn is_torus(&self) -> bool {
        self.spec.boundary == Boundary::Torus
    }

    /// Torus period along every axis.
    pub fn period(&self) -> usize {
        2 * self.spec.radius + 1
    }

    pub fn extent(&self) -> &[usize] {
        &self.extent
    }

    pub fn coords(&self, site: usize) -> &[i32] {
        &self.coords[site * self.dim..(site + 1) * self.dim]
    }

    pub fn index_of(&self, coords: &[i32]) -> Option<usize> {
        if coords.len() != self.dim {
            return None;
        }
        let mut idx = 0;
        for k in 0..self.dim {
            let off = coords[k] - self.lo[k];
            if off < 0 || off as usize >= self.extent[k] {
                return None;
            }
            idx += off as usize * self.stride[k];
        }
        Some(idx)
    }

    pub fn origin(&self) -> usize {
        self.index_of(&vec![0; self.dim]).expect("origin is always in the box")
    }

    /// Site reached from `site` by `steps` along `axis`, wrapping on the torus.
    pub fn shift(&self, site: usize, axis: usize, steps: i32) -> Option<usize> {
        let mut c = self.coords(site).to_vec();
        c[axis] += steps;
        if self.is_torus() {
            let p = self.period() as i32;
            let l = self.spec.radius as i32;
            c[axis] = (c[axis] + l).rem_euclid(p) - l;
        }
        self.index_of(&c)
    }

    /// Absolute per-axis displacement, minimal image on the torus.
    #[inline]
    pub fn axis_gap(&self, a: i32, b: i32) -> u32 {
        let g = (a - b).unsigned_abs();
        if self.is_torus() {
            let p = self.period() as u32;
            g.min(p - g)
        } else {
            g
        }
    }

    #[inline]
    pub fn distance(&self, x: usize, y: usize) -> f64 {
        let cx = &self.coords[x * self.dim..(x + 1) * self.dim];
        let cy = &self.coords[y * self.dim..(y + 1) * self.dim];
        match self.spec.metric {
            Metric::Euclidean => {
                let mut s = 0u64;
                for k in 0..self.dim {
                    let g = self.axis_gap(cx[k], cy[k]) as u64;
                    s += g * g;
                }
                (s as f64).sqrt()
            }
            Metric::Graph => {
                let mut s = 0u64;
                for k in 0..self.dim {
                    s += self.axis_gap(cx[k], cy[k]) as u64;
                }
                s as f64
            }
            Metric::Chebyshev => {
                let mut s = 0u32;
                for k in 0..self.dim {
                    s = s.max(self.axis_gap(cx[k], cy[k]));
                }
                s as f64
            }
        }
    }

    /// Norm of an arbitrary real displacement under the configured metric.
    pub fn norm(&self, v: &[f64]) -> f64 {
        match self.spec.metric {
            Metric::Euclidean => v.iter().map(|a| a * a).sum::<f64>().sqrt(),
            Metric::Graph => v.iter().map(|a| a.abs()).sum(),
            Metric::Chebyshev => v.iter().fold(0.0, |m, a| m.max(a.abs())),
        }
    }

    /// All sites `y` with `distance(center, y) <= r`, in index order.
    pub fn ball(&self, center: usize, r: f64) -> Vec<usize> {
        (0..self.len()).filter(|&y| self.distance(center, y) <= r).collect()
    }

    /// Membership mask of a ball.
    pub fn ball_mask(&self, center: usize, r: f64) -> Vec<bool> {
        (0..self.len()).map(|y| self.distance(center, y) <= r).collect()
    }

    /// Whether the ball `B(center, r)` lies inside the box without touching
    /// the torus seam.
    pub fn ball_inside(&self, center: usize, r: f64) -> bool {
        let c = self.coords(center);
        let l = self.spec.radius as f64;
        // Metric balls are contained in the l-infinity ball of the same radius.
        (0..self.dim).all(|k| {
            let x = c[k] as f64;
            if k < self.spec.half_dims {
                x + r <= l
            } else {
                x + r <= l && x - r >= -l
            }
        })
    }

    /// Index of `(i, j)` with `i < j` in the packed upper-triangular order.
    #[inline]
    pub fn pair_index(&self, i: usize, j: usize) -> usize {
        pair_index(self.len(), i, j)
    }

    pub fn pair_count(&self) -> usize {
        let n = self.len();
        n * (n - 1) / 2
    }
}

/// Packed index of the unordered pair `{i, j}` among `n` sites.
#[inline]
pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    let (a, b) = if i < j { (i, j) } else { (j, i) };
    debug_assert!(a != b && b < n);
    a * n - a * (a + 1) / 2 + (b - a - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        assert_eq!(Lattice::new(LatticeSpec::full(1, 2)).unwrap().len(), 5);
        let spec = LatticeSpec { half_dims: 1, full_dims: 1, ..LatticeSpec::full(1, 2) };
        assert_eq!(Lattice::new(spec).unwrap().len(), 15);
    }

    #[test]
    fn enumeration_is_bijective() {
        let spec = LatticeSpec { half_dims: 1, full_dims: 2, ..LatticeSpec::full(1, 3) };
        let lat = Lattice::new(spec).unwrap();
        for i in 0..lat.len() {
            assert_eq!(lat.index_of(lat.coords(i)), Some(i));
        }
        assert_eq!(lat.coords(lat.origin()), &[0, 0, 0]);
    }

    #[test]
    fn ball_matches_brute_force() {
        let lat = Lattice::new(LatticeSpec::full(2, 8)).unwrap();
        let o = lat.origin();
        let mut brute = 0;
        for a in -8i32..=8 {
            for b in -8i32..=8 {
                if ((a * a + b * b) as f64).sqrt() <= 3.0 {
                    brute += 1;
                }
            }
        }
        assert_eq!(brute, 29);
        assert_eq!(lat.ball(o, 3.0).len(), brute);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(Lattice::new(LatticeSpec::full(0, 3)).is_err());
        assert!(Lattice::new(LatticeSpec::full(1, 0)).is_err());
        assert!(matches!(
            Lattice::new(LatticeSpec::full(2, 64)),
            Err(Error::SiteCapExceeded { count: 16641, .. })
        ));
        let spec = LatticeSpec { half_dims: 1, ..LatticeSpec::torus(1, 3) };
        assert!(Lattice::new(spec).is_err());
    }

    #[test]
    fn torus_wraps() {
        let lat = Lattice::new(LatticeSpec::torus(1, 3)).unwrap();
        let a = lat.index_of(&[-3]).unwrap();
        let b = lat.index_of(&[3]).unwrap();
        assert_eq!(lat.distance(a, b), 1.0);
        assert_eq!(lat.shift(b, 0, 1), Some(a));
    }

    #[test]
    fn metrics() {
        let lat = Lattice::new(LatticeSpec::full(2, 3)).unwrap();
        let x = lat.index_of(&[0, 0]).unwrap();
        let y = lat.index_of(&[3, -2]).unwrap();
        assert!((lat.distance(x, y) - 13f64.sqrt()).abs() < 1e-15);
        let lat = Lattice::new(LatticeSpec::full(2, 3).with_metric(Metric::Graph)).unwrap();
        assert_eq!(lat.distance(x, y), 5.0);
        let lat = Lattice::new(LatticeSpec::full(2, 3).with_metric(Metric::Chebyshev)).unwrap();
        assert_eq!(lat.distance(x, y), 3.0);
    }

    #[test]
    fn pair_index_is_dense() {
        let n = 7;
        let mut seen = vec![false; n * (n - 1) / 2];
        for i in 0..n {
            for j in i + 1..n {
                let k = pair_index(n, i, j);
                assert!(!seen[k]);
                seen[k] = true;
                assert_eq!(pair_index(n, j, i), k);
            }
        }
        assert!(seen.iter().all(|&s| s));
    }
}
