//! Deterministic pseudo-random integration nodes and Monte Carlo integrals.
//!
//! Everything downstream (losses, solvers, simulations) must reproduce
//! bit-for-bit from a 64-bit seed, so the RNG algorithm is pinned here
//! rather than left to a default engine: xoshiro256** state expanded from
//! the seed via SplitMix64, uniforms from the top 53 bits, and normals via
//! Box-Muller on successive uniforms.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QuadratureError {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("integrand returned non-finite value {value} at point {point:?} (node {index})")]
    NonFinite { index: usize, point: Vec<f64>, value: f64 },
    #[error("empty node set")]
    EmptyNodes,
}

/// Seeded random stream with a pinned, documented algorithm.
///
/// The 256-bit internal state is a xoshiro256** generator whose state is
/// filled from the 64-bit seed by SplitMix64 (this is exactly what
/// `Xoshiro256StarStar::seed_from_u64` does). Identical seeds therefore
/// yield identical streams on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: Xoshiro256StarStar,
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Rng { seed, inner: Xoshiro256StarStar::seed_from_u64(seed) }
    }

    /// The seed this stream was constructed from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for replication `r`, seeded `base_seed + r`.
    pub fn substream(&self, r: u64) -> Rng {
        Rng::from_seed(self.seed.wrapping_add(r))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on [0,1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller on two successive uniforms
    /// (cosine branch; each call consumes exactly two draws).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0,1], keeps ln finite
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Bernoulli(p) as 0/1.
    pub fn bernoulli(&mut self, p: f64) -> f64 {
        if self.uniform() < p {
            1.0
        } else {
            0.0
        }
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand_core::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

/// Derive a purpose-specific seed from a base seed. One SplitMix64 round
/// over `base + tag`, so distinct tags give unrelated streams while the
/// replication scheme (`base_seed + rep`) stays untouched.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Axis-aligned box with finite positive volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Domain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, QuadratureError> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(QuadratureError::InvalidDomain(format!(
                "bound lengths {} and {} must match and be positive",
                lo.len(),
                hi.len()
            )));
        }
        for (i, (&l, &h)) in lo.iter().zip(&hi).enumerate() {
            if !(l < h) || !l.is_finite() || !h.is_finite() {
                return Err(QuadratureError::InvalidDomain(format!(
                    "coordinate {i}: need finite lo < hi, got [{l}, {h}]"
                )));
            }
        }
        Ok(Domain { lo, hi })
    }

    /// 1-D convenience constructor.
    pub fn interval(lo: f64, hi: f64) -> Result<Self, QuadratureError> {
        Domain::new(vec![lo], vec![hi])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).product()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim()
            && p.iter().zip(self.lo.iter().zip(&self.hi)).all(|(&x, (&l, &h))| x >= l && x <= h)
    }
}

/// Fixed integration nodes for one estimation run: J1 outer collocation
/// points {t_l} and J2 inner integration points {s_j}, both i.i.d. uniform
/// over their domains. Sampled once, then immutable.
#[derive(Clone, Debug)]
pub struct QuadratureGrid {
    outer_points: Vec<f64>,
    inner_points: Vec<f64>,
    t_domain: Domain,
    s_domain: Domain,
    inner_volume: f64,
}

impl QuadratureGrid {
    /// Wrap explicit node sets (row-major, matching the domain dims).
    /// Useful for evaluating at chosen points rather than sampled ones.
    pub fn with_nodes(
        outer_points: Vec<f64>,
        inner_points: Vec<f64>,
        t_domain: Domain,
        s_domain: Domain,
    ) -> Self {
        assert!(
            !outer_points.is_empty()
                && !inner_points.is_empty()
                && outer_points.len() % t_domain.dim() == 0
                && inner_points.len() % s_domain.dim() == 0,
            "node blocks must be nonempty multiples of the domain dims"
        );
        let inner_volume = s_domain.volume();
        QuadratureGrid { outer_points, inner_points, t_domain, s_domain, inner_volume }
    }

    pub fn j1(&self) -> usize {
        self.outer_points.len() / self.t_domain.dim()
    }

    pub fn j2(&self) -> usize {
        self.inner_points.len() / self.s_domain.dim()
    }

    pub fn outer_dim(&self) -> usize {
        self.t_domain.dim()
    }

    pub fn inner_dim(&self) -> usize {
        self.s_domain.dim()
    }

    /// Row-major `J1 x dim(t)` block of outer nodes.
    pub fn outer_points(&self) -> &[f64] {
        &self.outer_points
    }

    /// Row-major `J2 x dim(s)` block of inner nodes.
    pub fn inner_points(&self) -> &[f64] {
        &self.inner_points
    }

    pub fn outer_point(&self, l: usize) -> &[f64] {
        let d = self.outer_dim();
        &self.outer_points[l * d..(l + 1) * d]
    }

    pub fn inner_point(&self, j: usize) -> &[f64] {
        let d = self.inner_dim();
        &self.inner_points[j * d..(j + 1) * d]
    }

    pub fn t_domain(&self) -> &Domain {
        &self.t_domain
    }

    pub fn s_domain(&self) -> &Domain {
        &self.s_domain
    }

    /// Volume of the inner (s) domain, the Monte Carlo scale factor.
    pub fn inner_volume(&self) -> f64 {
        self.inner_volume
    }

    /// Per-node weight of the inner Monte Carlo rule: volume / J2.
    pub fn inner_weight(&self) -> f64 {
        self.inner_volume / self.j2() as f64
    }
}

/// Sample a grid as a pure function of (domains, j1, j2, seed).
/// Outer nodes are drawn first, then inner nodes, coordinate-major within
/// each point.
pub fn sample_grid(
    t_domain: &Domain,
    s_domain: &Domain,
    j1: usize,
    j2: usize,
    seed: u64,
) -> Result<QuadratureGrid, QuadratureError> {
    if j1 == 0 || j2 == 0 {
        return Err(QuadratureError::InvalidDomain("j1 and j2 must be >= 1".into()));
    }
    let mut rng = Rng::from_seed(seed);
    let mut outer = Vec::with_capacity(j1 * t_domain.dim());
    for _ in 0..j1 {
        for d in 0..t_domain.dim() {
            outer.push(rng.uniform_in(t_domain.lo[d], t_domain.hi[d]));
        }
    }
    let mut inner = Vec::with_capacity(j2 * s_domain.dim());
    for _ in 0..j2 {
        for d in 0..s_domain.dim() {
            inner.push(rng.uniform_in(s_domain.lo[d], s_domain.hi[d]));
        }
    }
    Ok(QuadratureGrid {
        outer_points: outer,
        inner_points: inner,
        t_domain: t_domain.clone(),
        s_domain: s_domain.clone(),
        inner_volume: s_domain.volume(),
    })
}

/// Monte Carlo integral: volume times the mean of `f` over the nodes.
/// `points` is row-major with `dim` coordinates per node.
pub fn mc_integral(
    f: impl Fn(&[f64]) -> f64,
    points: &[f64],
    dim: usize,
    volume: f64,
) -> Result<f64, QuadratureError> {
    assert!(dim > 0 && points.len() % dim == 0, "points not a multiple of dim");
    let n = points.len() / dim;
    if n == 0 {
        return Err(QuadratureError::EmptyNodes);
    }
    let mut sum = 0.0;
    for j in 0..n {
        let p = &points[j * dim..(j + 1) * dim];
        let v = f(p);
        if !v.is_finite() {
            return Err(QuadratureError::NonFinite { index: j, point: p.to_vec(), value: v });
        }
        sum += v;
    }
    Ok(volume * (sum / n as f64))
}

/// Monte Carlo integral of already-evaluated node values (hot path).
pub fn mc_integral_values(values: &[f64], volume: f64) -> Result<f64, QuadratureError> {
    if values.is_empty() {
        return Err(QuadratureError::EmptyNodes);
    }
    let sum: f64 = values.iter().sum();
    Ok(volume * sum / values.len() as f64)
}
