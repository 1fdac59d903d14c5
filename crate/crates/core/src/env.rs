//! Random environments: conductances on unordered site pairs plus a site measure.

use std::io::{Read, Write};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Lattice, LatticeSpec};
use crate::law::{unit_from_bits, ConductanceLaw};
use crate::markov::Profile;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MuMode {
    Counting,
    Csrw,
    Custom(Vec<f64>),
}

impl MuMode {
    fn tag(&self) -> &'static str {
        match self {
            MuMode::Counting => "counting",
            MuMode::Csrw => "csrw",
            MuMode::Custom(_) => "custom",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Conductances {
    Constant(f64),
    /// Packed upper-triangular pair values.
    Pairs(Vec<f64>),
}

/// Metadata of a deterministic trap configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrapInfo {
    pub level: u32,
    pub eps: f64,
    /// Start site, the weak-bond end and the strong-bond end.
    pub start: usize,
    pub weak_end: usize,
    pub strong_end: usize,
    pub trap_kappa: f64,
    pub caveat: String,
}

pub const TRAP_CAVEAT: &str = "trap lower bound is stated for d >= 5; this run uses a low-dimensional box \
and checks only the 2^{-2N} scaling of the explicit trap bound, which does not depend on dimension";

#[derive(Clone, Debug)]
pub struct Environment {
    lattice: Lattice,
    w: Conductances,
    mu: Vec<f64>,
    mu_mode: MuMode,
    alpha: f64,
    seed: u64,
    law: ConductanceLaw,
    trap: Option<TrapInfo>,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 2.0) {
        return Err(Error::param("alpha", "must lie in (0, 2)"));
    }
    Ok(())
}

impl Environment {
    /// Draws independent conductances for every unordered pair.
    ///
    /// Pair `(i, j)` with `i < j` reads the `j`-th 64-bit word of ChaCha8
    /// stream `i` under the key derived from `seed`, so the result does not
    /// depend on evaluation order.
    pub fn sample(
        lattice: Lattice,
        law: ConductanceLaw,
        mu_mode: MuMode,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        let sampler = law.sampler()?;
        let w = match &law {
            ConductanceLaw::Constant { value } => Conductances::Constant(*value),
            _ => {
                let n = lattice.len();
                let mut values = vec![0.0; n * (n - 1) / 2];
                let base = ChaCha8Rng::seed_from_u64(seed);
                let long_scale = match &law {
                    ConductanceLaw::DyadicTrap { row_cap, .. } => {
                        let s = long_range_profile_sum(&lattice, alpha);
                        if s > 0.0 {
                            (row_cap / s).min(1.0)
                        } else {
                            1.0
                        }
                    }
                    _ => 1.0,
                };
                let dyadic = matches!(law, ConductanceLaw::DyadicTrap { .. });
                let mut rows: Vec<(usize, &mut [f64])> = Vec::with_capacity(n);
                let mut rest = values.as_mut_slice();
                for i in 0..n {
                    let (row, tail) = rest.split_at_mut(n - i - 1);
                    rows.push((i, row));
                    rest = tail;
                }
                rows.into_par_iter().for_each(|(i, row)| {
                    let mut rng = base.clone();
                    rng.set_stream(i as u64);
                    rng.set_word_pos(2 * (i as u128 + 1));
                    for (k, slot) in row.iter_mut().enumerate() {
                        let j = i + 1 + k;
                        let v = sampler.quantile(unit_from_bits(rng.next_u64()));
                        *slot = if dyadic && !nearest_neighbours(&lattice, i, j) {
                            v * long_scale
                        } else {
                            v
                        };
                    }
                });
                Conductances::Pairs(values)
            }
        };
        let mut env = Environment {
            mu: vec![1.0; lattice.len()],
            lattice,
            w,
            mu_mode: MuMode::Counting,
            alpha,
            seed,
            law,
            trap: None,
        };
        env.set_mu_mode(mu_mode)?;
        Ok(env)
    }

    /// Environment with every conductance equal to `value` and counting measure.
    pub fn constant(spec: LatticeSpec, value: f64, alpha: f64) -> Result<Self> {
        Self::sample(Lattice::new(spec)?, ConductanceLaw::constant(value), MuMode::Counting, alpha, 0)
    }

    /// Deterministic trap: weak bond start--weak_end, strong bond weak_end--strong_end.
    ///
    /// Every other nearest-neighbour bond at the two trap sites gets `2^{-N}`
    /// and their long-range conductances are scaled so each long-range rate
    /// sum equals `2^{-N}`. All remaining conductances are 1, which provides
    /// straight unit paths from the start site to the box boundary.
    pub fn trap(spec: LatticeSpec, level: u32, eps: f64, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if !(1..=500).contains(&level) {
            return Err(Error::param("level", "must lie in [1, 500]"));
        }
        if !(eps > 0.0) {
            return Err(Error::param("eps", "must be positive"));
        }
        if spec.radius < 4 {
            return Err(Error::param("radius", "trap needs radius at least 4"));
        }
        let lattice = Lattice::new(spec)?;
        let n = lattice.len();
        let d = lattice.dim();
        let profile = Profile::new(&lattice, alpha);
        let start = lattice.origin();
        let weak_end = lattice.shift(start, 0, 1).expect("radius >= 4");
        let strong_end = lattice.shift(start, 0, 2).expect("radius >= 4");
        let small = (-(level as f64)).exp2();
        let mut values = vec![1.0; n * (n - 1) / 2];
        for &site in &[weak_end, strong_end] {
            let mut long_sum = 0.0;
            for u in 0..n {
                if u != site && !nearest_neighbours(&lattice, site, u) {
                    long_sum += profile.between(&lattice, site, u);
                }
            }
            // Slightly under the budget so rounding cannot push the sum past it.
            let long_w = small / long_sum * (1.0 - 1e-12);
            for u in 0..n {
                if u == site {
                    continue;
                }
                let k = lattice.pair_index(site, u);
                if nearest_neighbours(&lattice, site, u) {
                    let strong = (site == weak_end && u == strong_end)
                        || (site == strong_end && u == weak_end);
                    values[k] = if strong { 1.0 } else { small };
                } else {
                    values[k] = long_w;
                }
            }
        }
        let trap = TrapInfo {
            level,
            eps,
            start,
            weak_end,
            strong_end,
            trap_kappa: (1.0 + (4.0 * d as f64 + 2.0) * eps) / d as f64,
            caveat: TRAP_CAVEAT.to_string(),
        };
        Ok(Environment {
            mu: vec![1.0; n],
            lattice,
            w: Conductances::Pairs(values),
            mu_mode: MuMode::Counting,
            alpha,
            seed: 0,
            law: ConductanceLaw::constant(1.0),
            trap: Some(trap),
        })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn len(&self) -> usize {
        self.lattice.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lattice.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.lattice.dim()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `d + alpha`.
    pub fn exponent(&self) -> f64 {
        self.dim() as f64 + self.alpha
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn law(&self) -> &ConductanceLaw {
        &self.law
    }

    pub fn trap_info(&self) -> Option<&TrapInfo> {
        self.trap.as_ref()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn mu_mode(&self) -> &MuMode {
        &self.mu_mode
    }

    pub fn conductances(&self) -> &Conductances {
        &self.w
    }

    #[inline]
    pub fn w(&self, x: usize, y: usize) -> f64 {
        if x == y {
            return 0.0;
        }
        match &self.w {
            Conductances::Constant(v) => *v,
            Conductances::Pairs(p) => p[self.lattice.pair_index(x, y)],
        }
    }

    pub fn set_mu_mode(&mut self, mode: MuMode) -> Result<()> {
        let n = self.len();
        self.mu = match &mode {
            MuMode::Counting => vec![1.0; n],
            MuMode::Custom(values) => {
                if values.len() != n {
                    return Err(Error::param("mu", format!("expected {n} values, got {}", values.len())));
                }
                if let Some(i) = values.iter().position(|m| !(m.is_finite() && *m > 0.0)) {
                    return Err(Error::param("mu", format!("site {i} has non-positive mass")));
                }
                values.clone()
            }
            MuMode::Csrw => crate::markov::csrw_measure(self)?,
        };
        self.mu_mode = mode;
        Ok(())
    }

    fn materialize(&mut self) -> &mut Vec<f64> {
        if let Conductances::Constant(v) = self.w {
            let n = self.len();
            self.w = Conductances::Pairs(vec![v; n * (n - 1) / 2]);
        }
        match &mut self.w {
            Conductances::Pairs(p) => p,
            Conductances::Constant(_) => unreachable!(),
        }
    }

    /// Overrides one conductance. The CSRW measure is refreshed when in use.
    pub fn set_conductance(&mut self, x: usize, y: usize, value: f64) -> Result<()> {
        if x == y {
            return Err(Error::param("pair", "diagonal conductance is fixed at 0"));
        }
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::param("value", "must be finite and non-negative"));
        }
        let k = self.lattice.pair_index(x, y);
        self.materialize()[k] = value;
        if self.mu_mode == MuMode::Csrw {
            self.set_mu_mode(MuMode::Csrw)?;
        }
        Ok(())
    }

    /// Applies `f(x, y, w)` to every pair `x < y`.
    pub fn map_pairs(&mut self, f: impl Fn(usize, usize, f64) -> f64) -> Result<()> {
        let n = self.len();
        let values = self.materialize();
        let mut k = 0;
        for x in 0..n {
            for y in x + 1..n {
                let v = f(x, y, values[k]);
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::param("value", "must be finite and non-negative"));
                }
                values[k] = v;
                k += 1;
            }
        }
        if self.mu_mode == MuMode::Csrw {
            self.set_mu_mode(MuMode::Csrw)?;
        }
        Ok(())
    }

    /// Restricts to the sub-box of radius `radius`, keeping conductances and mass.
    pub fn restrict(&self, radius: usize) -> Result<Environment> {
        let spec = LatticeSpec { radius, ..*self.lattice.spec() };
        if radius > self.lattice.spec().radius {
            return Err(Error::param("radius", "sub-box must not exceed the box"));
        }
        let sub = Lattice::new(spec)?;
        let map: Vec<usize> = (0..sub.len())
            .map(|i| self.lattice.index_of(sub.coords(i)).expect("sub-box is contained"))
            .collect();
        let w = match &self.w {
            Conductances::Constant(v) => Conductances::Constant(*v),
            Conductances::Pairs(_) => {
                let n = sub.len();
                let mut v = Vec::with_capacity(n * (n - 1) / 2);
                for i in 0..n {
                    for j in i + 1..n {
                        v.push(self.w(map[i], map[j]));
                    }
                }
                Conductances::Pairs(v)
            }
        };
        let mu: Vec<f64> = map.iter().map(|&i| self.mu[i]).collect();
        let mut out = Environment {
            lattice: sub,
            w,
            mu: mu.clone(),
            mu_mode: self.mu_mode.clone(),
            alpha: self.alpha,
            seed: self.seed,
            law: self.law.clone(),
            trap: None,
        };
        match self.mu_mode {
            MuMode::Custom(_) => out.mu_mode = MuMode::Custom(mu),
            MuMode::Csrw => out.set_mu_mode(MuMode::Csrw)?,
            MuMode::Counting => {}
        }
        Ok(out)
    }

    pub fn max_asymmetry(&self) -> f64 {
        let n = self.len();
        let mut m = 0.0f64;
        for x in 0..n {
            for y in 0..n {
                m = m.max((self.w(x, y) - self.w(y, x)).abs());
            }
        }
        m
    }

    /// Writes the binary environment format.
    ///
    /// Layout: the line `RCMENV1\n`, a little-endian `u64` header length, a
    /// JSON header, the packed pair conductances and the site masses, all as
    /// little-endian `f64`.
    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let header = EnvHeader {
            spec: *self.lattice.spec(),
            law: self.law.clone(),
            seed: self.seed,
            alpha_bits: self.alpha.to_bits(),
            alpha: self.alpha,
            mu_mode: self.mu_mode.tag().to_string(),
            constant_bits: match self.w {
                Conductances::Constant(v) => Some(v.to_bits()),
                Conductances::Pairs(_) => None,
            },
            trap: self.trap.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        out.write_all(MAGIC)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        let mut buf = Vec::new();
        if let Conductances::Pairs(p) = &self.w {
            buf.reserve(8 * p.len());
            for v in p {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in &self.mu {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        input.read_exact(&mut json)?;
        let header: EnvHeader = serde_json::from_slice(&json)?;
        let lattice = Lattice::new(header.spec)?;
        let n = lattice.len();
        let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
            let mut raw = vec![0u8; 8 * count];
            input.read_exact(&mut raw)?;
            Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let w = match header.constant_bits {
            Some(bits) => Conductances::Constant(f64::from_bits(bits)),
            None => Conductances::Pairs(read_f64s(n * (n - 1) / 2)?),
        };
        let mu = read_f64s(n)?;
        let mu_mode = match header.mu_mode.as_str() {
            "counting" => MuMode::Counting,
            "csrw" => MuMode::Csrw,
            "custom" => MuMode::Custom(mu.clone()),
            other => return Err(Error::Format(format!("unknown mu mode {other}"))),
        };
        Ok(Environment {
            lattice,
            w,
            mu,
            mu_mode,
            alpha: f64::from_bits(header.alpha_bits),
            seed: header.seed,
            law: header.law,
            trap: header.trap,
        })
    }

    /// Bitwise equality of every stored number.
    pub fn bit_identical(&self, other: &Environment) -> bool {
        let same_w = match (&self.w, &other.w) {
            (Conductances::Constant(a), Conductances::Constant(b)) => a.to_bits() == b.to_bits(),
            (Conductances::Pairs(a), Conductances::Pairs(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        };
        same_w
            && self.lattice.spec() == other.lattice.spec()
            && self.alpha.to_bits() == other.alpha.to_bits()
            && self.seed == other.seed
            && self.law == other.law
            && self.mu.len() == other.mu.len()
            && self.mu.iter().zip(&other.mu).all(|(x, y)| x.to_bits() == y.to_bits())
    }
}

const MAGIC: &[u8; 8] = b"RCMENV1\n";

#[derive(Serialize, Deserialize)]
struct EnvHeader {
    spec: LatticeSpec,
    law: ConductanceLaw,
    seed: u64,
    alpha_bits: u64,
    alpha: f64,
    mu_mode: String,
    constant_bits: Option<u64>,
    trap: Option<TrapInfo>,
}

/// Samples an environment on a fresh lattice with the default site cap.
pub fn sample_environment(
    law: ConductanceLaw,
    spec: LatticeSpec,
    mu_mode: MuMode,
    alpha: f64,
    seed: u64,
) -> Result<Environment> {
    Environment::sample(Lattice::new(spec)?, law, mu_mode, alpha, seed)
}

/// Whether `x` and `y` differ by one unit step along a single axis.
pub fn nearest_neighbours(lattice: &Lattice, x: usize, y: usize) -> bool {
    let (cx, cy) = (lattice.coords(x), lattice.coords(y));
    let mut total = 0;
    for k in 0..cx.len() {
        total += lattice.axis_gap(cx[k], cy[k]);
        if total > 1 {
            return false;
        }
    }
    total == 1
}

/// Largest long-range profile sum `sum_{|x-y|>1} rho^{-(d+alpha)}` over sites.
fn long_range_profile_sum(lattice: &Lattice, alpha: f64) -> f64 {
    let profile = Profile::new(lattice, alpha);
    let center = lattice.origin();
    (0..lattice.len())
        .filter(|&y| y != center && !nearest_neighbours(lattice, center, y))
        .map(|y| profile.between(lattice, center, y))
        .sum()
}
