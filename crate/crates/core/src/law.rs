//! Marginal laws of a single conductance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TAIL_TABLE: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConductanceLaw {
    Constant {
        value: f64,
    },
    /// Zero with probability `p0`, otherwise drawn from `positive_law`.
    BernoulliDegenerate {
        p0: f64,
        positive_law: Box<ConductanceLaw>,
    },
    /// `P(w = k) = k^{-(2p+1+eps)}` for integers `k >= 2`, remaining mass on 1.
    PolynomialTail {
        p: f64,
        eps: f64,
    },
    /// Nearest-neighbour bonds take `2^{-k}` with probability `c k^{-(1+eps)}`
    /// for `1 <= k <= levels`, otherwise 1. Longer bonds take the same draw
    /// scaled so that every long-range row sum stays below `row_cap`.
    DyadicTrap {
        levels: u32,
        eps: f64,
        row_cap: f64,
    },
    Custom {
        table: Vec<(f64, f64)>,
    },
}

impl ConductanceLaw {
    pub fn constant(value: f64) -> Self {
        ConductanceLaw::Constant { value }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ConductanceLaw::Constant { value } => {
                if !(value.is_finite() && *value >= 0.0) {
                    return Err(Error::param("law.value", "must be finite and non-negative"));
                }
            }
            ConductanceLaw::BernoulliDegenerate { p0, positive_law } => {
                if !(0.0..1.0).contains(p0) {
                    return Err(Error::param("law.p0", "must lie in [0, 1)"));
                }
                positive_law.validate()?;
            }
            ConductanceLaw::PolynomialTail { p, eps } => {
                if !(p.is_finite() && *p >= 1.0) {
                    return Err(Error::param("law.p", "must be at least 1"));
                }
                if p.fract() != 0.0 {
                    return Err(Error::param("law.p", "moment order must be an integer"));
                }
                if !(eps.is_finite() && *eps > 0.0) {
                    return Err(Error::param("law.eps", "must be positive"));
                }
            }
            ConductanceLaw::DyadicTrap { levels, eps, row_cap } => {
                if *levels < 1 || *levels > 500 {
                    return Err(Error::param("law.levels", "must lie in [1, 500]"));
                }
                if !(eps.is_finite() && *eps > 0.0) {
                    return Err(Error::param("law.eps", "must be positive"));
                }
                if !(row_cap.is_finite() && *row_cap >= 1.0) {
                    return Err(Error::param("law.row_cap", "must be at least 1"));
                }
            }
            ConductanceLaw::Custom { table } => {
                if table.is_empty() {
                    return Err(Error::param("law.table", "must not be empty"));
                }
                let mut total = 0.0;
                for &(v, p) in table {
                    if !(v.is_finite() && v >= 0.0) {
                        return Err(Error::param("law.table", "values must be finite and non-negative"));
                    }
                    if !(p.is_finite() && p >= 0.0) {
                        return Err(Error::param("law.table", "probabilities must be non-negative"));
                    }
                    total += p;
                }
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::param("law.table", "probabilities must sum to 1"));
                }
            }
        }
        Ok(())
    }

    /// Whether the zero-conductance probability stays below `2^{-4}`.
    pub fn admissible(&self) -> bool {
        self.zero_mass() < 1.0 / 16.0
    }

    pub fn zero_mass(&self) -> f64 {
        match self {
            ConductanceLaw::Constant { value } => (*value == 0.0) as u8 as f64,
            ConductanceLaw::BernoulliDegenerate { p0, positive_law } => {
                p0 + (1.0 - p0) * positive_law.zero_mass()
            }
            ConductanceLaw::PolynomialTail { .. } | ConductanceLaw::DyadicTrap { .. } => 0.0,
            ConductanceLaw::Custom { table } => {
                table.iter().filter(|(v, _)| *v == 0.0).map(|(_, p)| p).sum()
            }
        }
    }

    /// Mean conductance, when it does not depend on the bond length.
    pub fn mean(&self) -> Option<f64> {
        match self {
            ConductanceLaw::Constant { value } => Some(*value),
            ConductanceLaw::BernoulliDegenerate { p0, positive_law } => {
                positive_law.mean().map(|m| (1.0 - p0) * m)
            }
            ConductanceLaw::PolynomialTail { p, eps } => {
                let s = 2.0 * p + 1.0 + eps;
                Some(1.0 - zeta_tail(s, 2) + zeta_tail(s - 1.0, 2))
            }
            ConductanceLaw::DyadicTrap { .. } => None,
            ConductanceLaw::Custom { table } => Some(table.iter().map(|(v, p)| v * p).sum()),
        }
    }

    /// Prepared inverse-CDF sampler.
    pub fn sampler(&self) -> Result<LawSampler> {
        self.validate()?;
        Ok(match self {
            ConductanceLaw::Constant { value } => LawSampler::Atoms(vec![(*value, 1.0)]),
            ConductanceLaw::BernoulliDegenerate { p0, positive_law } => {
                LawSampler::Mixture { p0: *p0, positive: Box::new(positive_law.sampler()?) }
            }
            ConductanceLaw::PolynomialTail { p, eps } => {
                LawSampler::Polynomial(PolynomialTail::new(2.0 * p + 1.0 + eps))
            }
            ConductanceLaw::DyadicTrap { levels, eps, .. } => {
                let weights: Vec<f64> =
                    (1..=*levels).map(|k| (k as f64).powf(-(1.0 + eps))).collect();
                let c = 0.25 / weights.iter().sum::<f64>();
                let mut atoms: Vec<(f64, f64)> = (1..=*levels)
                    .rev()
                    .map(|k| ((-(k as f64)).exp2(), c * weights[k as usize - 1]))
                    .collect();
                atoms.push((1.0, 0.75));
                LawSampler::Atoms(atoms)
            }
            ConductanceLaw::Custom { table } => {
                let mut atoms: Vec<(f64, f64)> =
                    table.iter().copied().filter(|(_, p)| *p > 0.0).collect();
                atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
                LawSampler::Atoms(atoms)
            }
        })
    }
}

/// Sum `sum_{k >= m} k^{-s}` for `s > 1`.
pub fn zeta_tail(s: f64, m: u64) -> f64 {
    hurwitz_zeta(s, m as f64)
}

/// Hurwitz zeta `sum_{k >= 0} (a + k)^{-s}` for `s > 1`, `a > 0`.
pub fn hurwitz_zeta(s: f64, a: f64) -> f64 {
    const START: f64 = 20.0;
    let mut acc = 0.0;
    let mut x = a;
    while x < START {
        acc += x.powf(-s);
        x += 1.0;
    }
    acc + em_tail(s, x)
}

fn em_tail(s: f64, m: f64) -> f64 {
    m.powf(1.0 - s) / (s - 1.0) + 0.5 * m.powf(-s) + s * m.powf(-s - 1.0) / 12.0
        - s * (s + 1.0) * (s + 2.0) * m.powf(-s - 3.0) / 720.0
        + s * (s + 1.0) * (s + 2.0) * (s + 3.0) * (s + 4.0) * m.powf(-s - 5.0) / 30240.0
        - s * (s + 1.0) * (s + 2.0) * (s + 3.0) * (s + 4.0) * (s + 5.0) * (s + 6.0) * m.powf(-s - 7.0)
            / 1209600.0
}

#[derive(Clone, Debug)]
pub struct PolynomialTail {
    s: f64,
    /// `tail[m] = sum_{k >= m} k^{-s}` for `m` in `2..=TAIL_TABLE + 1`.
    tail: Vec<f64>,
}

impl PolynomialTail {
    fn new(s: f64) -> Self {
        let mut tail = vec![0.0; TAIL_TABLE + 2];
        tail[TAIL_TABLE + 1] = em_tail(s, (TAIL_TABLE + 1) as f64);
        for m in (2..=TAIL_TABLE).rev() {
            tail[m] = tail[m + 1] + (m as f64).powf(-s);
        }
        tail[0] = f64::NAN;
        tail[1] = f64::NAN;
        PolynomialTail { s, tail }
    }

    fn tail_at(&self, m: u64) -> f64 {
        if m as usize <= TAIL_TABLE + 1 {
            self.tail[m as usize]
        } else {
            em_tail(self.s, m as f64)
        }
    }

    pub fn mass_at_one(&self) -> f64 {
        1.0 - self.tail[2]
    }

    fn cdf(&self, x: f64) -> f64 {
        if x < 1.0 {
            0.0
        } else {
            1.0 - self.tail_at(x.floor() as u64 + 1)
        }
    }

    fn quantile(&self, u: f64) -> f64 {
        let v = 1.0 - u;
        // Smallest k >= 1 with tail(k + 1) < v.
        if self.tail[2] < v {
            return 1.0;
        }
        if self.tail[TAIL_TABLE + 1] < v {
            // tail is decreasing over the table; find the first m with tail[m] < v.
            let (mut lo, mut hi) = (2usize, TAIL_TABLE + 1);
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                if self.tail[mid] < v {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return (hi - 1) as f64;
        }
        let guess = ((v * (self.s - 1.0)).powf(-1.0 / (self.s - 1.0))).max(TAIL_TABLE as f64 + 1.0);
        if !guess.is_finite() || guess > 1e15 {
            return 1e15_f64.min(guess);
        }
        let mut m = guess as u64;
        while m > TAIL_TABLE as u64 + 1 && self.tail_at(m) < v {
            m -= 1;
        }
        while self.tail_at(m + 1) >= v {
            m += 1;
        }
        m as f64
    }
}

/// Inverse-CDF sampler; every law consumes exactly one uniform.
#[derive(Clone, Debug)]
pub enum LawSampler {
    /// Atoms sorted by value.
    Atoms(Vec<(f64, f64)>),
    Mixture { p0: f64, positive: Box<LawSampler> },
    Polynomial(PolynomialTail),
}

impl LawSampler {
    pub fn quantile(&self, u: f64) -> f64 {
        match self {
            LawSampler::Atoms(atoms) => {
                let mut acc = 0.0;
                for &(v, p) in atoms {
                    acc += p;
                    if u < acc {
                        return v;
                    }
                }
                atoms.last().map(|a| a.0).unwrap_or(0.0)
            }
            LawSampler::Mixture { p0, positive } => {
                if u < *p0 {
                    0.0
                } else {
                    positive.quantile((u - p0) / (1.0 - p0))
                }
            }
            LawSampler::Polynomial(tail) => tail.quantile(u),
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            LawSampler::Atoms(atoms) => {
                atoms.iter().filter(|(v, _)| *v <= x).map(|(_, p)| p).sum::<f64>().min(1.0)
            }
            LawSampler::Mixture { p0, positive } => {
                if x < 0.0 {
                    0.0
                } else {
                    p0 + (1.0 - p0) * positive.cdf(x)
                }
            }
            LawSampler::Polynomial(tail) => tail.cdf(x),
        }
    }
}

/// Uniform in `[0, 1)` from the top 53 bits.
#[inline]
pub fn unit_from_bits(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeta_tail_matches_partial_sums() {
        for &s in &[3.5, 7.5] {
            let mut terms = Vec::new();
            let mut k = 2u64;
            // stop once the integral bound on the remainder is below 1e-13
            while (k as f64).powf(1.0 - s) / (s - 1.0) >= 1e-13 {
                terms.push((k as f64).powf(-s));
                k += 1;
            }
            // smallest terms first
            let mut direct: f64 = terms.iter().rev().sum();
            let k = k as f64;
            direct += k.powf(1.0 - s) / (s - 1.0) + 0.5 * k.powf(-s);
            let est = zeta_tail(s, 2);
            assert!((est - direct).abs() < 1e-14, "s={s} {est} {direct}");
        }
        // zeta(2) - 1
        assert!((zeta_tail(2.0, 2) - (std::f64::consts::PI.powi(2) / 6.0 - 1.0)).abs() < 1e-14);
    }

    #[test]
    fn polynomial_quantile_inverts_cdf() {
        let s = PolynomialTail::new(7.5);
        for k in 1..40u64 {
            let lo = s.cdf(k as f64 - 0.5);
            let hi = s.cdf(k as f64);
            if hi - lo > 1e-15 {
                let u = 0.5 * (lo + hi);
                assert_eq!(s.quantile(u), k as f64);
            }
        }
        // deep tail beyond the table
        let s = PolynomialTail::new(3.1);
        let k = 10_000u64;
        let u = 0.5 * (s.cdf(k as f64 - 1.0) + s.cdf(k as f64));
        assert_eq!(s.quantile(u), k as f64);
    }

    #[test]
    fn validation() {
        assert!(ConductanceLaw::PolynomialTail { p: 1.5, eps: 0.5 }.validate().is_err());
        assert!(ConductanceLaw::PolynomialTail { p: 1.0, eps: 0.0 }.validate().is_err());
        let bad = ConductanceLaw::BernoulliDegenerate {
            p0: 1.0,
            positive_law: Box::new(ConductanceLaw::constant(1.0)),
        };
        assert!(bad.validate().is_err());
        assert!(ConductanceLaw::Custom { table: vec![(1.0, 0.4), (2.0, 0.5)] }.validate().is_err());
    }

    #[test]
    fn admissibility_flag() {
        let law = |p0| ConductanceLaw::BernoulliDegenerate {
            p0,
            positive_law: Box::new(ConductanceLaw::constant(1.0)),
        };
        assert!(law(0.05).admissible());
        assert!(!law(0.0625).admissible());
    }

    #[test]
    fn dyadic_masses() {
        let law = ConductanceLaw::DyadicTrap { levels: 6, eps: 0.5, row_cap: 1.0 };
        let s = law.sampler().unwrap();
        assert!((s.cdf(0.5) - 0.25).abs() < 1e-15);
        assert_eq!(s.cdf(1.0), 1.0);
        assert_eq!(s.quantile(0.0), 1.0 / 64.0);
        assert_eq!(s.quantile(0.9), 1.0);
    }

    #[test]
    fn serde_shape() {
        let law: ConductanceLaw =
            serde_json::from_str(r#"{"kind":"polynomial_tail","p":3,"eps":0.5}"#).unwrap();
        assert_eq!(law, ConductanceLaw::PolynomialTail { p: 3.0, eps: 0.5 });
        assert!(serde_json::from_str::<ConductanceLaw>(r#"{"kind":"constant","value":1,"x":2}"#)
            .is_err());
    }
}
