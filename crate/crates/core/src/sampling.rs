//! Seeded random sources and empirical checks of the probabilistic
//! inequalities behind the Monte Carlo error bounds.
//!
//! Every random draw is addressed by a [`SeedSpec`]: a root seed plus a path
//! such as `[experiment, level, sample]`. The path is hashed into a ChaCha8
//! key, so draws are reproducible bit for bit and independent of the order
//! in which samples are generated.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spaces::{lp_norm, BanachVector, SpaceDescriptor};

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Root seed plus a stream path; the address of one random stream.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub root_seed: u64,
    pub stream_path: Vec<u64>,
}

impl SeedSpec {
    pub fn new(root_seed: u64) -> Self {
        SeedSpec {
            root_seed,
            stream_path: Vec::new(),
        }
    }

    pub fn child(&self, index: u64) -> Self {
        let mut stream_path = self.stream_path.clone();
        stream_path.push(index);
        SeedSpec {
            root_seed: self.root_seed,
            stream_path,
        }
    }

    pub fn path(&self, indices: &[u64]) -> Self {
        let mut s = self.clone();
        s.stream_path.extend_from_slice(indices);
        s
    }

    /// 256-bit ChaCha key: four independent hash lanes over the root seed,
    /// the path length and every path element with its depth.
    pub fn key(&self) -> [u8; 32] {
        let mut key = [0u8; 32];
        for lane in 0..4u64 {
            let mut h = splitmix(self.root_seed ^ splitmix(lane.wrapping_mul(0xA076_1D64_78BD_642F)));
            h = splitmix(h ^ (self.stream_path.len() as u64).wrapping_mul(0xE703_7ED1_A0B4_28DB));
            for (depth, &e) in self.stream_path.iter().enumerate() {
                h = splitmix(h.rotate_left(17) ^ splitmix(e ^ splitmix(depth as u64 + 1)));
            }
            key[lane as usize * 8..(lane as usize + 1) * 8].copy_from_slice(&h.to_le_bytes());
        }
        key
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.key())
    }

    /// `root/i/j/...`, used to tag output rows.
    pub fn label(&self) -> String {
        let mut s = self.root_seed.to_string();
        for e in &self.stream_path {
            s.push('/');
            s.push_str(&e.to_string());
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    Rademacher,
    Gaussian,
}

pub fn rademacher(rng: &mut impl Rng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// `m` i.i.d. Rademacher signs or standard normals.
pub fn draw_family(kind: FamilyKind, m: usize, seed: &SeedSpec) -> Vec<f64> {
    let mut rng = seed.rng();
    match kind {
        FamilyKind::Rademacher => (0..m).map(|_| rademacher(&mut rng)).collect(),
        FamilyKind::Gaussian => (0..m).map(|_| StandardNormal.sample(&mut rng)).collect(),
    }
}

/// `e_I ∈ ℓ_2^n` with `I` uniform on `{0, …, n−1}`.
pub fn uniform_basis_sample(n: usize, seed: &SeedSpec) -> Result<BanachVector> {
    uniform_basis_in(&SpaceDescriptor::sequence(n, 2.0)?, &mut seed.rng(), false)
}

/// `±e_I` (signed when `signed`) in the given sequence space.
pub fn uniform_basis_in(space: &std::sync::Arc<SpaceDescriptor>, rng: &mut impl Rng, signed: bool) -> Result<BanachVector> {
    let n = space.size();
    let mut c = vec![0.0; n];
    let i = rng.random_range(0..n);
    c[i] = if signed { rademacher(rng) } else { 1.0 };
    BanachVector::new(space.clone(), c)
}

/// Truncated cosine expansion `g(x) = Σ_m σ_m ξ_m cos(mπx/b)` with i.i.d.
/// standard normal `ξ_m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KlFieldConfig {
    /// `σ_1, …, σ_n` (mode `m` has frequency `mπ/b`).
    pub amplitudes: Vec<f64>,
    /// Domain length `b`.
    pub b: f64,
    /// Breakpoints of the partition `𝒫`, including `0` and `b`. Empty means
    /// the trivial partition.
    #[serde(default)]
    pub partition: Vec<f64>,
    /// Sub-sampling factor for the certified extrema.
    #[serde(default = "default_oversample")]
    pub oversample: usize,
}

fn default_oversample() -> usize {
    16
}

impl KlFieldConfig {
    pub fn new(amplitudes: Vec<f64>, b: f64) -> Result<Self> {
        let cfg = KlFieldConfig {
            amplitudes,
            b,
            partition: Vec::new(),
            oversample: default_oversample(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `σ_m = scale · m^{−decay}`, `m = 1..=modes`.
    pub fn algebraic(modes: usize, scale: f64, decay: f64, b: f64) -> Result<Self> {
        Self::new((1..=modes).map(|m| scale * (m as f64).powf(-decay)).collect(), b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b > 0.0) {
            return Err(Error::invalid("field domain length b must be positive"));
        }
        if self.amplitudes.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::invalid("field amplitudes must be finite and non-negative"));
        }
        if self.oversample == 0 {
            return Err(Error::invalid("oversampling factor must be positive"));
        }
        Ok(())
    }

    fn breakpoints(&self) -> Vec<f64> {
        if self.partition.is_empty() {
            vec![0.0, self.b]
        } else {
            self.partition.clone()
        }
    }
}

/// One realization of the log-coefficient field.
#[derive(Clone, Debug, PartialEq)]
pub struct KlField {
    cfg: KlFieldConfig,
    xi: Vec<f64>,
}

/// Certified bounds of `a = exp(g)` on one partition interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldBounds {
    pub lo: f64,
    pub hi: f64,
    /// `a̲ ≤ a` on the interval.
    pub a_lower: f64,
    /// `a ≤ a̅` on the interval.
    pub a_upper: f64,
    /// `|a′| ≤ a̅′` on the interval.
    pub a_prime_upper: f64,
}

impl KlField {
    pub fn sample(cfg: &KlFieldConfig, seed: &SeedSpec) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed.rng();
        let xi = (0..cfg.amplitudes.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(KlField { cfg: cfg.clone(), xi })
    }

    pub fn with_xi(cfg: &KlFieldConfig, xi: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        if xi.len() != cfg.amplitudes.len() {
            return Err(Error::DimensionMismatch {
                expected: cfg.amplitudes.len(),
                got: xi.len(),
            });
        }
        Ok(KlField { cfg: cfg.clone(), xi })
    }

    pub fn xi(&self) -> &[f64] {
        &self.xi
    }

    fn freq(&self, m: usize) -> f64 {
        (m + 1) as f64 * PI / self.cfg.b
    }

    pub fn g(&self, x: f64) -> f64 {
        self.mode_sum(x, |_, s, xi, c, _| s * xi * c)
    }

    pub fn g_prime(&self, x: f64) -> f64 {
        self.mode_sum(x, |m, s, xi, _, sn| -s * xi * self.freq(m) * sn)
    }

    /// `Σ_m term(m, σ_m, ξ_m, cos(ω_m x), sin(ω_m x))` with the harmonics
    /// generated by the angle-addition recurrence.
    fn mode_sum(&self, x: f64, term: impl Fn(usize, f64, f64, f64, f64) -> f64) -> f64 {
        let t = PI * x / self.cfg.b;
        let (s1, c1) = t.sin_cos();
        let (mut c, mut sn) = (c1, s1);
        let mut out = 0.0;
        for (m, (s, xi)) in self.cfg.amplitudes.iter().zip(&self.xi).enumerate() {
            out += term(m, *s, *xi, c, sn);
            (c, sn) = (c * c1 - sn * s1, sn * c1 + c * s1);
        }
        out
    }

    pub fn a(&self, x: f64) -> f64 {
        self.g(x).exp()
    }

    /// `Σ_m σ_m |ξ_m| (mπ/b)^order`: a bound on `‖g^{(order)}‖_∞`.
    fn derivative_bound(&self, order: i32) -> f64 {
        self.cfg
            .amplitudes
            .iter()
            .zip(&self.xi)
            .enumerate()
            .map(|(m, (s, xi))| s * xi.abs() * self.freq(m).powi(order))
            .sum()
    }

    /// Certified extrema per partition interval, from samples on `grid`
    /// refined by the oversampling factor. Between samples at spacing `Δ`
    /// the piecewise linear interpolant of a function with `|h″| ≤ H`
    /// deviates by at most `HΔ²/8`.
    pub fn bounds(&self, grid: &[f64]) -> Result<Vec<FieldBounds>> {
        let bp = self.cfg.breakpoints();
        check_partition(grid, &bp, self.cfg.b)?;
        let g2 = self.derivative_bound(2);
        let g3 = self.derivative_bound(3);
        let os = self.cfg.oversample;
        let mut out = Vec::with_capacity(bp.len() - 1);
        for w in bp.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let tol = 1e-12 * self.cfg.b;
            let nodes: Vec<f64> = grid.iter().copied().filter(|x| *x >= lo - tol && *x <= hi + tol).collect();
            let (mut gmin, mut gmax, mut dmax, mut dx) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, 0.0f64);
            for e in nodes.windows(2) {
                let h = (e[1] - e[0]) / os as f64;
                dx = dx.max(h);
                for s in 0..=os {
                    let x = e[0] + s as f64 * h;
                    let g = self.g(x);
                    gmin = gmin.min(g);
                    gmax = gmax.max(g);
                    dmax = dmax.max(self.g_prime(x).abs());
                }
            }
            let pad2 = g2 * dx * dx / 8.0;
            let pad3 = g3 * dx * dx / 8.0;
            let a_upper = (gmax + pad2).exp();
            out.push(FieldBounds {
                lo,
                hi,
                a_lower: (gmin - pad2).exp(),
                a_upper,
                a_prime_upper: a_upper * (dmax + pad3),
            });
        }
        Ok(out)
    }
}

fn check_partition(grid: &[f64], bp: &[f64], b: f64) -> Result<()> {
    let tol = 1e-12 * b;
    if grid.len() < 2 || (grid[0]).abs() > tol || (grid[grid.len() - 1] - b).abs() > tol {
        return Err(Error::invalid("grid must span the field domain [0, b]"));
    }
    if bp.len() < 2 || bp.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("partition breakpoints must be strictly increasing"));
    }
    for &x in bp {
        if !grid.iter().any(|g| (g - x).abs() <= tol) {
            return Err(Error::invalid(format!("partition breakpoint {x} is not a grid node")));
        }
    }
    Ok(())
}

/// One field realization evaluated on a grid.
#[derive(Clone, Debug)]
pub struct KlSample {
    pub field: KlField,
    pub g_nodes: Vec<f64>,
    /// `g′` at element midpoints.
    pub g_prime_elements: Vec<f64>,
    pub bounds: Vec<FieldBounds>,
    pub a_lower: f64,
    pub a_upper: f64,
    pub a_prime_upper: f64,
}

pub fn kl_field_sample(cfg: &KlFieldConfig, grid: &[f64], seed: &SeedSpec) -> Result<KlSample> {
    let field = KlField::sample(cfg, seed)?;
    evaluate_field(field, grid)
}

pub fn evaluate_field(field: KlField, grid: &[f64]) -> Result<KlSample> {
    let bounds = field.bounds(grid)?;
    let g_nodes = grid.iter().map(|&x| field.g(x)).collect();
    let g_prime_elements = grid.windows(2).map(|w| field.g_prime(0.5 * (w[0] + w[1]))).collect();
    let a_lower = bounds.iter().map(|b| b.a_lower).fold(f64::INFINITY, f64::min);
    let a_upper = bounds.iter().map(|b| b.a_upper).fold(0.0, f64::max);
    let a_prime_upper = bounds.iter().map(|b| b.a_prime_upper).fold(0.0, f64::max);
    Ok(KlSample {
        field,
        g_nodes,
        g_prime_elements,
        bounds,
        a_lower,
        a_upper,
        a_prime_upper,
    })
}

/// One entry of the property-suite report: the check passes when
/// `lhs ≤ rhs + slack`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub check_name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub pass: bool,
}

impl PropertyCheck {
    fn new(check_name: impl Into<String>, lhs: f64, rhs: f64, slack: f64) -> Self {
        PropertyCheck {
            check_name: check_name.into(),
            lhs,
            rhs,
            slack,
            pass: lhs.is_finite() && rhs.is_finite() && lhs <= rhs + slack,
        }
    }
}

/// Floating point allowance for exhaustive checks.
const EXACT_SLACK: f64 = 1e-12;

/// Classical Khintchine constants `(A_q, B_q)` for `q ∈ {1, 2, 4}`.
pub fn khintchine_constants(q: f64) -> Option<(f64, f64)> {
    match q {
        q if q == 1.0 => Some((std::f64::consts::FRAC_1_SQRT_2, 1.0)),
        q if q == 2.0 => Some((1.0, 1.0)),
        q if q == 4.0 => Some((1.0, 3f64.powf(0.25))),
        _ => None,
    }
}

/// Iterates over all `2^m` sign patterns.
fn for_each_sign_pattern(m: usize, mut f: impl FnMut(&[f64])) {
    let mut signs = vec![0.0; m];
    for bits in 0u64..(1u64 << m) {
        for (j, s) in signs.iter_mut().enumerate() {
            *s = if bits >> j & 1 == 1 { 1.0 } else { -1.0 };
        }
        f(&signs);
    }
}

/// Mean and standard error of a sample.
fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// `(E Y^q)^{1/q}` with a delta-method standard error.
fn lq_with_se(ys: &[f64], q: f64) -> (f64, f64) {
    let pw: Vec<f64> = ys.iter().map(|y| y.powf(q)).collect();
    let (m, se) = mean_se(&pw);
    let v = m.powf(1.0 / q);
    let dv = if m > 0.0 { v / (q * m) } else { 0.0 };
    (v, dv * se)
}

/// `sup_{f ∈ B_{ℓ_2^2}} |Σ_j z_j ⟨f, x_j⟩^{k_j}|`.
///
/// For a fixed direction `θ` the objective is a cubic in the radius
/// `ρ ∈ [0, 1]`, maximized exactly; the direction is scanned on a grid and
/// the best cell refined by golden-section search.
pub fn contraction_sup_l2_plane(z: &[f64], xs: &[[f64; 2]], ks: &[u32], grid: usize) -> f64 {
    let radial = |theta: f64| -> f64 {
        let (s, c) = theta.sin_cos();
        let mut a = [0.0f64; 4];
        for ((zj, x), &k) in z.iter().zip(xs).zip(ks) {
            a[k as usize] += zj * (c * x[0] + s * x[1]).powi(k as i32);
        }
        let h = |r: f64| a[1] * r + a[2] * r * r + a[3] * r * r * r;
        let mut best = h(1.0).abs();
        // critical points of h on (0, 1): a1 + 2a2 r + 3a3 r² = 0
        let (qa, qb, qc) = (3.0 * a[3], 2.0 * a[2], a[1]);
        let mut roots = Vec::with_capacity(2);
        if qa.abs() > 1e-300 {
            let disc = qb * qb - 4.0 * qa * qc;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                roots.push((-qb + sq) / (2.0 * qa));
                roots.push((-qb - sq) / (2.0 * qa));
            }
        } else if qb.abs() > 1e-300 {
            roots.push(-qc / qb);
        }
        for r in roots {
            if r > 0.0 && r < 1.0 {
                best = best.max(h(r).abs());
            }
        }
        best
    };
    let step = 2.0 * PI / grid as f64;
    let (mut bi, mut bv) = (0usize, f64::NEG_INFINITY);
    for i in 0..grid {
        let v = radial(i as f64 * step);
        if v > bv {
            bv = v;
            bi = i;
        }
    }
    // golden-section refinement on the bracketing cells
    let (mut lo, mut hi) = ((bi as f64 - 1.0) * step, (bi as f64 + 1.0) * step);
    let gr = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - gr * (hi - lo);
    let mut x2 = lo + gr * (hi - lo);
    let (mut f1, mut f2) = (radial(x1), radial(x2));
    for _ in 0..80 {
        if f1 > f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - gr * (hi - lo);
            f1 = radial(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + gr * (hi - lo);
            f2 = radial(x2);
        }
    }
    bv.max(f1).max(f2)
}

/// Right-hand side `2 C_z ‖Σ_j z_j k_j ‖x_j‖^{k_j−1} x_j‖_2`.
fn contraction_rhs(z: &[f64], xs: &[[f64; 2]], ks: &[u32], cz: f64) -> f64 {
    let mut v = [0.0f64; 2];
    for ((zj, x), &k) in z.iter().zip(xs).zip(ks) {
        let nx = (x[0] * x[0] + x[1] * x[1]).sqrt();
        let s = zj * k as f64 * nx.powi(k as i32 - 1);
        v[0] += s * x[0];
        v[1] += s * x[1];
    }
    2.0 * cz * (v[0] * v[0] + v[1] * v[1]).sqrt()
}

/// Exhaustive contraction check (Rademacher, `C_z = 1`): returns
/// `(E sup_f |Σ r_j f(x_j)^{k_j}|, E 2‖Σ r_j k_j ‖x_j‖^{k_j−1} x_j‖)`.
pub fn contraction_exhaustive(xs: &[[f64; 2]], ks: &[u32]) -> (f64, f64) {
    let m = xs.len();
    let (mut lhs, mut rhs) = (0.0, 0.0);
    for_each_sign_pattern(m, |r| {
        lhs += contraction_sup_l2_plane(r, xs, ks, 3600);
        rhs += contraction_rhs(r, xs, ks, 1.0);
    });
    let w = (1u64 << m) as f64;
    (lhs / w, rhs / w)
}

/// Runs the empirical checks: Khintchine bounds, symmetrization,
/// contraction, and the type-`p` estimate in `ℓ_p`. Exhaustive
/// enumeration is used wherever the sign space is small enough.
pub fn probabilistic_property_suite(trials: usize, seed: &SeedSpec) -> Result<Vec<PropertyCheck>> {
    if trials < 10_000 {
        return Err(Error::invalid(format!("property suite needs at least 10⁴ trials, got {trials}")));
    }
    let mut out = Vec::new();
    khintchine_checks(trials, &seed.child(0), &mut out);
    symmetrization_checks(trials, &seed.child(1), &mut out);
    contraction_checks(trials, &seed.child(2), &mut out);
    type_checks(trials, &seed.child(3), &mut out);
    Ok(out)
}

fn khintchine_checks(trials: usize, seed: &SeedSpec, out: &mut Vec<PropertyCheck>) {
    let mut rng = seed.rng();
    let vectors: Vec<Vec<f64>> = (0..50)
        .map(|i| {
            let m = 2 + i % 11;
            (0..m).map(|_| StandardNormal.sample(&mut rng)).collect()
        })
        .collect();
    for q in [1.0, 2.0, 4.0] {
        let (aq, bq) = khintchine_constants(q).expect("tabulated exponent");
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for a in &vectors {
            let mut acc = 0.0;
            for_each_sign_pattern(a.len(), |r| {
                acc += r.iter().zip(a).map(|(x, y)| x * y).sum::<f64>().abs().powf(q);
            });
            let ratio = (acc / (1u64 << a.len()) as f64).powf(1.0 / q) / lp_norm(a, 2.0);
            lo = lo.min(ratio);
            hi = hi.max(ratio);
        }
        out.push(PropertyCheck::new(format!("khintchine_lower_q{q}_exhaustive"), aq, lo, EXACT_SLACK));
        out.push(PropertyCheck::new(format!("khintchine_upper_q{q}_exhaustive"), hi, bq, EXACT_SLACK));
    }
    // Monte Carlo variant with 32 terms
    let mut rng = seed.child(1).rng();
    for q in [1.0, 4.0] {
        let (aq, bq) = khintchine_constants(q).expect("tabulated exponent");
        let mut lo = (f64::INFINITY, 0.0);
        let mut hi = (0.0f64, 0.0);
        for _ in 0..50 {
            let a: Vec<f64> = (0..32).map(|_| StandardNormal.sample(&mut rng)).collect();
            let na = lp_norm(&a, 2.0);
            let ys: Vec<f64> = (0..trials)
                .map(|_| a.iter().map(|x| rademacher(&mut rng) * x).sum::<f64>().abs())
                .collect();
            let (v, se) = lq_with_se(&ys, q);
            let (v, se) = (v / na, se / na);
            if v < lo.0 {
                lo = (v, se);
            }
            if v > hi.0 {
                hi = (v, se);
            }
        }
        out.push(PropertyCheck::new(format!("khintchine_lower_q{q}_mc"), aq, lo.0, 3.0 * lo.1));
        out.push(PropertyCheck::new(format!("khintchine_upper_q{q}_mc"), hi.0, bq, 3.0 * hi.1));
    }
}

/// `η_j = (B_j − π_j) v_j` with `B_j ~ Bernoulli(π_j)`, in `ℓ_1^4`.
fn symmetrization_checks(trials: usize, seed: &SeedSpec, out: &mut Vec<PropertyCheck>) {
    let mut rng = seed.rng();
    let m = 8;
    let probs: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..0.95)).collect();
    let vs: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..4).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    for q in [1.0, 2.0, 3.0] {
        let (mut lhs, mut rhs) = (0.0, 0.0);
        let mut sum = [0.0f64; 4];
        let mut sym = [0.0f64; 4];
        for bits in 0u64..(1u64 << m) {
            let mut w = 1.0;
            let vals: Vec<f64> = (0..m)
                .map(|j| {
                    if bits >> j & 1 == 1 {
                        w *= probs[j];
                        1.0 - probs[j]
                    } else {
                        w *= 1.0 - probs[j];
                        -probs[j]
                    }
                })
                .collect();
            sum.iter_mut().for_each(|s| *s = 0.0);
            for (j, v) in vs.iter().enumerate() {
                for i in 0..4 {
                    sum[i] += vals[j] * v[i];
                }
            }
            lhs += w * lp_norm(&sum, 1.0).powf(q);
            let mut acc = 0.0;
            for_each_sign_pattern(m, |r| {
                sym.iter_mut().for_each(|s| *s = 0.0);
                for (j, v) in vs.iter().enumerate() {
                    for i in 0..4 {
                        sym[i] += r[j] * vals[j] * v[i];
                    }
                }
                acc += lp_norm(&sym, 1.0).powf(q);
            });
            rhs += w * acc / (1u64 << m) as f64;
        }
        out.push(PropertyCheck::new(
            format!("symmetrization_q{q}_exhaustive"),
            lhs.powf(1.0 / q),
            2.0 * rhs.powf(1.0 / q),
            EXACT_SLACK,
        ));
    }
    // centered exponential coefficients, 16 terms, Monte Carlo
    let m = 16;
    let vs: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..4).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    for q in [1.0, 2.0] {
        let mut ls = Vec::with_capacity(trials);
        let mut rs = Vec::with_capacity(trials);
        for _ in 0..trials {
            let mut a = [0.0f64; 4];
            let mut b = [0.0f64; 4];
            for v in &vs {
                let e: f64 = Exp1.sample(&mut rng);
                let eta = e - 1.0;
                let r = rademacher(&mut rng);
                for i in 0..4 {
                    a[i] += eta * v[i];
                    b[i] += r * eta * v[i];
                }
            }
            ls.push(lp_norm(&a, 1.0));
            rs.push(lp_norm(&b, 1.0));
        }
        let (l, sl) = lq_with_se(&ls, q);
        let (r, sr) = lq_with_se(&rs, q);
        out.push(PropertyCheck::new(
            format!("symmetrization_q{q}_mc"),
            l,
            2.0 * r,
            3.0 * (sl * sl + 4.0 * sr * sr).sqrt(),
        ));
    }
}

fn contraction_checks(trials: usize, seed: &SeedSpec, out: &mut Vec<PropertyCheck>) {
    let mut rng = seed.rng();
    // fixed small instance, k_j = 2
    let xs = [[1.0, 0.0], [0.6, 0.8], [-0.3, 0.5]];
    let (l, r) = contraction_exhaustive(&xs, &[2, 2, 2]);
    out.push(PropertyCheck::new("contraction_k2_m3_exhaustive", l, r, EXACT_SLACK));
    // random instances with mixed degrees
    for (m, label) in [(6usize, "m6"), (12, "m12")] {
        let xs: Vec<[f64; 2]> = (0..m)
            .map(|_| [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)])
            .collect();
        let ks: Vec<u32> = (0..m).map(|j| 1 + (j % 3) as u32).collect();
        let (l, r) = contraction_exhaustive(&xs, &ks);
        out.push(PropertyCheck::new(format!("contraction_mixed_{label}_exhaustive"), l, r, EXACT_SLACK));
    }
    // Gaussian family (C_z = 2), Monte Carlo
    let m = 6;
    let xs: Vec<[f64; 2]> = (0..m)
        .map(|_| [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)])
        .collect();
    let ks: Vec<u32> = (0..m).map(|j| 1 + (j % 3) as u32).collect();
    let samples = trials.min(20_000);
    let mut ls = Vec::with_capacity(samples);
    let mut rs = Vec::with_capacity(samples);
    for _ in 0..samples {
        let z: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
        ls.push(contraction_sup_l2_plane(&z, &xs, &ks, 360));
        rs.push(contraction_rhs(&z, &xs, &ks, 2.0));
    }
    let (l, sl) = mean_se(&ls);
    let (r, sr) = mean_se(&rs);
    out.push(PropertyCheck::new("contraction_gaussian_m6_mc", l, r, 3.0 * (sl * sl + sr * sr).sqrt()));
}

/// `‖Σ r_j x_j‖_{L_p(ℓ_p)} / (Σ ‖x_j‖_p^p)^{1/p}`, bounded by 1 for
/// `p ∈ [1, 2]`.
fn type_checks(trials: usize, seed: &SeedSpec, out: &mut Vec<PropertyCheck>) {
    let mut rng = seed.rng();
    for p in [1.0, 1.5, 2.0] {
        for log_n in [2u32, 6, 10] {
            let n = 1usize << log_n;
            // basis vectors: exact value 1 in ℓ_1
            if p == 1.0 && log_n == 2 {
                let mut acc = 0.0;
                for_each_sign_pattern(n, |r| acc += r.iter().map(|x| x.abs()).sum::<f64>());
                let ratio = acc / (1u64 << n) as f64 / n as f64;
                out.push(PropertyCheck::new("type_p1_basis_exhaustive", ratio, 1.0, EXACT_SLACK));
            }
            let m = 8;
            let xs: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            let denom: f64 = xs.iter().map(|x| lp_norm(x, p).powf(p)).sum::<f64>().powf(1.0 / p);
            let mut acc = 0.0;
            let mut s = vec![0.0; n];
            for_each_sign_pattern(m, |r| {
                s.iter_mut().for_each(|v| *v = 0.0);
                for (rj, x) in r.iter().zip(&xs) {
                    for (si, xi) in s.iter_mut().zip(x) {
                        *si += rj * xi;
                    }
                }
                acc += lp_norm(&s, p).powf(p);
            });
            let ratio = (acc / (1u64 << m) as f64).powf(1.0 / p) / denom;
            out.push(PropertyCheck::new(
                format!("type_p{p}_n{n}_exhaustive"),
                ratio,
                1.0,
                EXACT_SLACK,
            ));
            // 32 terms by Monte Carlo
            let m = 32;
            let xs: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            let denom: f64 = xs.iter().map(|x| lp_norm(x, p).powf(p)).sum::<f64>().powf(1.0 / p);
            let samples = (trials * 16 / n).clamp(1_000, trials);
            let ys: Vec<f64> = (0..samples)
                .map(|_| {
                    s.iter_mut().for_each(|v| *v = 0.0);
                    for x in &xs {
                        let r = rademacher(&mut rng);
                        for (si, xi) in s.iter_mut().zip(x) {
                            *si += r * xi;
                        }
                    }
                    lp_norm(&s, p)
                })
                .collect();
            let (v, se) = lq_with_se(&ys, p);
            out.push(PropertyCheck::new(format!("type_p{p}_n{n}_mc"), v / denom, 1.0, 3.0 * se / denom));
        }
    }
}
