//! Model problems as level hierarchies producing coupled fine/coarse
//! samples driven by shared randomness:
//!
//! * 1D elliptic problem `−(a u′)′ = f` with log-Gaussian coefficient
//!   `a = exp(g)`, `u(0) = 0`, `a(b) u′(b) = 0`;
//! * Poisson problem with random forcing, on `(0, 1)` or the unit square;
//! * Euler–Maruyama paths of an SDE, measured in Hölder norms.
//!
//! Plain random variables (for single-level Monte Carlo) implement
//! [`Sampler`].

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::{rademacher, KlField, KlFieldConfig, SeedSpec};
use crate::spaces::{gauss_on, interpolate, uniform_grid, BanachVector, Boundary, SpaceDescriptor};

/// A random variable with values in a discretized space.
pub trait Sampler: Sync {
    fn space(&self) -> &Arc<SpaceDescriptor>;
    fn sample(&self, seed: &SeedSpec) -> Result<BanachVector>;
}

/// One draw of `(X_ℓ, X_{ℓ−1})` from the same randomness, both expressed in
/// the level-`ℓ` space (`coarse` is zero at `ℓ = 1`).
#[derive(Clone, Debug)]
pub struct CoupledSample {
    pub fine: BanachVector,
    pub coarse: BanachVector,
    pub level: usize,
    pub work_units: f64,
}

/// A family of discretizations `ℓ = 1, 2, …` with coupled samplers.
pub trait LevelHierarchy: Sync {
    fn max_level(&self) -> usize;
    /// Problem size `N_ℓ`.
    fn size(&self, level: usize) -> usize;
    /// Space of level-`ℓ` samples. Spaces of coarser levels embed into
    /// those of finer levels by [`interpolate`].
    fn space(&self, level: usize) -> Result<Arc<SpaceDescriptor>>;
    fn sample_pair(&self, level: usize, seed: &SeedSpec) -> Result<CoupledSample>;
    /// `X_ℓ` alone (used for reference runs), with its work.
    fn sample_fine(&self, level: usize, seed: &SeedSpec) -> Result<(BanachVector, f64)> {
        let s = self.sample_pair(level, seed)?;
        Ok((s.fine, s.work_units))
    }
    fn refinement_factor(&self) -> f64 {
        2.0
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn check_level(level: usize, max: usize) -> Result<()> {
    if level == 0 || level > max {
        Err(Error::invalid(format!("level {level} outside 1..={max}")))
    } else {
        Ok(())
    }
}

/// Deterministic right-hand side in 1D.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Forcing1d {
    Constant { value: f64 },
    /// `Σ_m c_m sin(mπx/b)`, `m = 1, 2, …`.
    SineSeries { coeffs: Vec<f64>, b: f64 },
}

impl Forcing1d {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Forcing1d::Constant { value } => *value,
            Forcing1d::SineSeries { coeffs, b } => coeffs
                .iter()
                .enumerate()
                .map(|(m, c)| c * ((m + 1) as f64 * std::f64::consts::PI * x / b).sin())
                .sum(),
        }
    }
}

/// Solves the P1 system `Σ_e a_e/h_e (u′, v′) = ⟨f, v⟩` on the grid of
/// `space` with its essential boundary conditions (natural condition
/// elsewhere). `a_elements` holds one coefficient value per element; the
/// load uses three-point Gauss quadrature per element.
pub fn fem1d_solve(space: &Arc<SpaceDescriptor>, a_elements: &[f64], f: &dyn Fn(f64) -> f64) -> Result<BanachVector> {
    let grid = space.grid();
    let ne = grid.len().checked_sub(1).filter(|n| *n > 0).ok_or_else(|| Error::invalid("empty grid"))?;
    if a_elements.len() != ne {
        return Err(Error::DimensionMismatch {
            expected: ne,
            got: a_elements.len(),
        });
    }
    if let Some(a) = a_elements.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
        return Err(Error::invalid(format!("diffusion coefficient {a} is not positive")));
    }
    let nn = grid.len();
    let mut diag = vec![0.0; nn];
    let mut off = vec![0.0; ne];
    let mut rhs = vec![0.0; nn];
    for e in 0..ne {
        let (x0, x1) = (grid[e], grid[e + 1]);
        let h = x1 - x0;
        let k = a_elements[e] / h;
        diag[e] += k;
        diag[e + 1] += k;
        off[e] = -k;
        for (x, w) in gauss_on(x0, x1) {
            let fx = f(x);
            let t = (x - x0) / h;
            rhs[e] += w * fx * (1.0 - t);
            rhs[e + 1] += w * fx * t;
        }
    }
    let (first, last) = match space.boundary() {
        Boundary::DirichletLeftNeumannRight => (1, nn - 1),
        Boundary::Dirichlet => (1, nn - 2),
        Boundary::None => return Err(Error::invalid("the stiffness matrix is singular without an essential condition")),
    };
    let mut u = vec![0.0; nn];
    if last >= first {
        let sol = thomas(&diag[first..=last], &off[first..last], &rhs[first..=last])?;
        u[first..=last].copy_from_slice(&sol);
    }
    BanachVector::new(space.clone(), u)
}

/// Solves a symmetric tridiagonal system (diagonal `d`, off-diagonal `o`).
fn thomas(d: &[f64], o: &[f64], r: &[f64]) -> Result<Vec<f64>> {
    let n = d.len();
    let mut c = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut piv = d[0];
    if !(piv.abs() > 0.0) {
        return Err(Error::Numerical("singular tridiagonal system".into()));
    }
    y[0] = r[0] / piv;
    for i in 1..n {
        c[i - 1] = o[i - 1] / piv;
        piv = d[i] - o[i - 1] * c[i - 1];
        if !(piv.abs() > 1e-300) || !piv.is_finite() {
            return Err(Error::Numerical("singular tridiagonal system".into()));
        }
        y[i] = (r[i] - o[i - 1] * y[i - 1]) / piv;
    }
    for i in (0..n - 1).rev() {
        y[i] -= c[i] * y[i + 1];
    }
    Ok(y)
}

/// Uniform nested 1D FEM spaces with `n0 · 2^{ℓ−1}` elements on `[0, b]`
/// (index 0 repeats level 1).
fn fem1d_levels(b: f64, n0: usize, max_level: usize, p: f64, boundary: Boundary) -> Result<Vec<Arc<SpaceDescriptor>>> {
    if n0 == 0 || max_level == 0 || max_level > 24 {
        return Err(Error::invalid("need n0 ≥ 1 and 1 ≤ max_level ≤ 24"));
    }
    (0..=max_level)
        .map(|l| SpaceDescriptor::fem1d_uniform(b, n0 << (l.max(1) - 1), p, boundary))
        .collect()
}

/// Parameters of the log-Gaussian coefficient problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogGaussParams {
    pub field: KlFieldConfig,
    pub forcing: Forcing1d,
    pub p: f64,
    /// Level `ℓ` has `n0 · 2^{ℓ−1}` elements.
    #[serde(default = "one")]
    pub n0: usize,
    pub max_level: usize,
}

fn one() -> usize {
    1
}

/// `−(a u′)′ = f` on `(0, b)`, `u(0) = 0`, `a(b)u′(b) = 0`, with
/// `a = exp(g)` for a truncated Gaussian cosine expansion `g`. Both levels
/// of a coupled sample see the same field realization; the coefficient is
/// evaluated at element midpoints.
pub struct LogGaussElliptic1d {
    params: LogGaussParams,
    spaces: Vec<Arc<SpaceDescriptor>>,
}

impl LogGaussElliptic1d {
    pub fn new(params: LogGaussParams) -> Result<Self> {
        params.field.validate()?;
        let spaces = fem1d_levels(params.field.b, params.n0, params.max_level, params.p, Boundary::DirichletLeftNeumannRight)?;
        Ok(LogGaussElliptic1d { params, spaces })
    }

    pub fn params(&self) -> &LogGaussParams {
        &self.params
    }

    /// Solution on `level` for a given field realization.
    pub fn solve_with(&self, field: &KlField, level: usize) -> Result<BanachVector> {
        let space = &self.spaces[level];
        let a: Vec<f64> = space.grid().windows(2).map(|w| field.a(0.5 * (w[0] + w[1]))).collect();
        let f = &self.params.forcing;
        fem1d_solve(space, &a, &|x| f.eval(x))
    }
}

impl LevelHierarchy for LogGaussElliptic1d {
    fn max_level(&self) -> usize {
        self.params.max_level
    }

    fn size(&self, level: usize) -> usize {
        self.params.n0 << (level - 1)
    }

    fn space(&self, level: usize) -> Result<Arc<SpaceDescriptor>> {
        check_level(level, self.params.max_level)?;
        Ok(self.spaces[level].clone())
    }

    fn sample_pair(&self, level: usize, seed: &SeedSpec) -> Result<CoupledSample> {
        check_level(level, self.params.max_level)?;
        let field = KlField::sample(&self.params.field, seed)?;
        let fine = self.solve_with(&field, level)?;
        let (coarse, coarse_work) = if level == 1 {
            (BanachVector::zeros(self.spaces[1].clone()), 0.0)
        } else {
            let c = self.solve_with(&field, level - 1)?;
            (interpolate(&c, &self.spaces[level])?, self.size(level - 1) as f64)
        };
        Ok(CoupledSample {
            fine,
            coarse,
            level,
            work_units: self.size(level) as f64 + coarse_work,
        })
    }

    fn sample_fine(&self, level: usize, seed: &SeedSpec) -> Result<(BanachVector, f64)> {
        check_level(level, self.params.max_level)?;
        let field = KlField::sample(&self.params.field, seed)?;
        Ok((self.solve_with(&field, level)?, self.size(level) as f64))
    }
}

/// Distribution of the forcing coefficients `η_m`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum CoefficientLaw {
    Gaussian,
    /// Student-t with `dof` degrees of freedom, scaled to unit variance
    /// (moments of order `< dof` exist).
    StudentT { dof: f64 },
}

/// Random forcing `f(x, ω) = mean + Σ_m σ_m η_m ψ_m(x)` with
/// `ψ_m = sin(mπx)` in 1D and `sin(m₁πx) sin(m₂πy)` (modes enumerated by
/// `m₁ + m₂`) in 2D.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcingLaw {
    #[serde(default)]
    pub mean: f64,
    #[serde(default)]
    pub amplitudes: Vec<f64>,
    #[serde(default = "gaussian_law")]
    pub law: CoefficientLaw,
}

fn gaussian_law() -> CoefficientLaw {
    CoefficientLaw::Gaussian
}

impl ForcingLaw {
    pub fn deterministic(mean: f64) -> Self {
        ForcingLaw {
            mean,
            amplitudes: Vec::new(),
            law: CoefficientLaw::Gaussian,
        }
    }

    fn draw(&self, seed: &SeedSpec) -> Result<Vec<f64>> {
        let mut rng = seed.rng();
        match self.law {
            CoefficientLaw::Gaussian => Ok(self
                .amplitudes
                .iter()
                .map(|s| s * normal(&mut rng))
                .collect()),
            CoefficientLaw::StudentT { dof } => {
                if !(dof > 2.0) {
                    return Err(Error::invalid("Student-t forcing needs dof > 2"));
                }
                let t = StudentT::new(dof).map_err(|e| Error::invalid(e.to_string()))?;
                let scale = ((dof - 2.0) / dof).sqrt();
                Ok(self.amplitudes.iter().map(|s| s * scale * t.sample(&mut rng)).collect())
            }
        }
    }
}

/// `(m₁, m₂)` of the 2D mode with index `m` (diagonal enumeration).
fn mode_2d(m: usize) -> (usize, usize) {
    let mut d = 2;
    let mut start = 0;
    loop {
        let count = d - 1;
        if m < start + count {
            let i = m - start;
            return (1 + i, d - 1 - i);
        }
        start += count;
        d += 1;
    }
}

fn forcing_eval(law: &ForcingLaw, eta: &[f64], x: f64, y: Option<f64>) -> f64 {
    use std::f64::consts::PI;
    law.mean
        + eta
            .iter()
            .enumerate()
            .map(|(m, e)| match y {
                None => e * ((m + 1) as f64 * PI * x).sin(),
                Some(y) => {
                    let (a, b) = mode_2d(m);
                    e * (a as f64 * PI * x).sin() * (b as f64 * PI * y).sin()
                }
            })
            .sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForcingParams {
    pub forcing: ForcingLaw,
    /// Spatial dimension, 1 or 2.
    pub dim: usize,
    pub p: f64,
    /// Level `ℓ` has `n0 · 2^{ℓ−1}` cells per side (`n0 ≥ 2` in 2D).
    #[serde(default = "one")]
    pub n0: usize,
    pub max_level: usize,
    #[serde(default = "default_cg_tol")]
    pub cg_tol: f64,
    #[serde(default = "default_cg_iters")]
    pub cg_max_iter: usize,
}

fn default_cg_tol() -> f64 {
    1e-12
}

fn default_cg_iters() -> usize {
    100_000
}

/// `−Δu = f(·, ω)` with homogeneous Dirichlet conditions on `(0, 1)` or the
/// unit square (uniform right-triangle P1 mesh, conjugate gradients).
pub struct ForcingElliptic {
    params: ForcingParams,
    spaces: Vec<Arc<SpaceDescriptor>>,
}

impl ForcingElliptic {
    pub fn new(params: ForcingParams) -> Result<Self> {
        let spaces = match params.dim {
            1 => fem1d_levels(1.0, params.n0, params.max_level, params.p, Boundary::Dirichlet)?,
            2 => {
                if params.n0 < 2 || params.max_level == 0 || params.max_level > 14 {
                    return Err(Error::invalid("need n0 ≥ 2 and 1 ≤ max_level ≤ 14 in 2D"));
                }
                (0..=params.max_level)
                    .map(|l| SpaceDescriptor::fem2d_uniform(params.n0 << (l.max(1) - 1), params.p))
                    .collect::<Result<_>>()?
            }
            d => return Err(Error::invalid(format!("forcing model supports dim 1 or 2, got {d}"))),
        };
        Ok(ForcingElliptic { params, spaces })
    }

    /// Solution on `level` for forcing coefficients `eta`, with its work
    /// (`N` in 1D, `N · iterations` in 2D).
    pub fn solve_with(&self, eta: &[f64], level: usize) -> Result<(BanachVector, f64)> {
        let space = &self.spaces[level];
        let law = &self.params.forcing;
        if self.params.dim == 1 {
            let a = vec![1.0; space.grid().len() - 1];
            let u = fem1d_solve(space, &a, &|x| forcing_eval(law, eta, x, None))?;
            Ok((u, self.size(level) as f64))
        } else {
            let (u, iters) = poisson2d_solve(space, &|x, y| forcing_eval(law, eta, x, Some(y)), self.params.cg_tol, self.params.cg_max_iter)?;
            Ok((u, self.size(level) as f64 * iters.max(1) as f64))
        }
    }
}

impl LevelHierarchy for ForcingElliptic {
    fn max_level(&self) -> usize {
        self.params.max_level
    }

    /// Elements (1D) or lattice cells (2D).
    fn size(&self, level: usize) -> usize {
        let side = self.params.n0 << (level - 1);
        if self.params.dim == 1 {
            side
        } else {
            side * side
        }
    }

    fn space(&self, level: usize) -> Result<Arc<SpaceDescriptor>> {
        check_level(level, self.params.max_level)?;
        Ok(self.spaces[level].clone())
    }

    fn sample_pair(&self, level: usize, seed: &SeedSpec) -> Result<CoupledSample> {
        check_level(level, self.params.max_level)?;
        let eta = self.params.forcing.draw(seed)?;
        let (fine, wf) = self.solve_with(&eta, level)?;
        let (coarse, wc) = if level == 1 {
            (BanachVector::zeros(self.spaces[1].clone()), 0.0)
        } else {
            let (c, w) = self.solve_with(&eta, level - 1)?;
            (interpolate(&c, &self.spaces[level])?, w)
        };
        Ok(CoupledSample {
            fine,
            coarse,
            level,
            work_units: wf + wc,
        })
    }

    fn sample_fine(&self, level: usize, seed: &SeedSpec) -> Result<(BanachVector, f64)> {
        check_level(level, self.params.max_level)?;
        let eta = self.params.forcing.draw(seed)?;
        self.solve_with(&eta, level)
    }
}

/// Degree-5 seven-point rule on the reference triangle (barycentric
/// coordinates, weights summing to 1).
const TRI7: [([f64; 3], f64); 7] = {
    const A1: f64 = 0.059_715_871_789_770;
    const B1: f64 = 0.470_142_064_105_115;
    const W1: f64 = 0.132_394_152_788_506;
    const A2: f64 = 0.797_426_985_353_087;
    const B2: f64 = 0.101_286_507_323_456;
    const W2: f64 = 0.125_939_180_544_827;
    [
        ([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 0.225),
        ([A1, B1, B1], W1),
        ([B1, A1, B1], W1),
        ([B1, B1, A1], W1),
        ([A2, B2, B2], W2),
        ([B2, A2, B2], W2),
        ([B2, B2, A2], W2),
    ]
};

/// P1 Poisson solve `(∇u, ∇v) = (f, v)` on the structured unit-square mesh
/// of `space` by unpreconditioned conjugate gradients. Returns the solution
/// and the iteration count.
pub fn poisson2d_solve(space: &Arc<SpaceDescriptor>, f: &dyn Fn(f64, f64) -> f64, tol: f64, max_iter: usize) -> Result<(BanachVector, usize)> {
    let g = space.grid();
    let n = g.len();
    // load vector
    let mut rhs = vec![0.0; n * n];
    for j in 0..n - 1 {
        for i in 0..n - 1 {
            let (x0, x1, y0, y1) = (g[i], g[i + 1], g[j], g[j + 1]);
            let area = 0.5 * (x1 - x0) * (y1 - y0);
            let v00 = j * n + i;
            let v10 = j * n + i + 1;
            let v01 = (j + 1) * n + i;
            let v11 = (j + 1) * n + i + 1;
            for (tri, verts) in [
                ([(x0, y0), (x1, y0), (x1, y1)], [v00, v10, v11]),
                ([(x0, y0), (x1, y1), (x0, y1)], [v00, v11, v01]),
            ] {
                for (bary, w) in TRI7 {
                    let x = bary[0] * tri[0].0 + bary[1] * tri[1].0 + bary[2] * tri[2].0;
                    let y = bary[0] * tri[0].1 + bary[1] * tri[1].1 + bary[2] * tri[2].1;
                    let fx = f(x, y) * w * area;
                    for k in 0..3 {
                        rhs[verts[k]] += fx * bary[k];
                    }
                }
            }
        }
    }
    let interior = |idx: usize| {
        let (i, j) = (idx % n, idx / n);
        i > 0 && j > 0 && i < n - 1 && j < n - 1
    };
    for (idx, r) in rhs.iter_mut().enumerate() {
        if !interior(idx) {
            *r = 0.0;
        }
    }
    let apply = |u: &[f64], out: &mut [f64]| stiffness_apply(g, u, out);
    let mut u = vec![0.0; n * n];
    let mut r = rhs.clone();
    let mut d = r.clone();
    let mut ad = vec![0.0; n * n];
    let norm_b = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut rr = norm_b * norm_b;
    let mut iters = 0;
    if norm_b > 0.0 {
        while rr.sqrt() > tol * norm_b {
            if iters >= max_iter {
                return Err(Error::Numerical(format!(
                    "conjugate gradients did not converge in {max_iter} iterations (residual {:.3e})",
                    rr.sqrt() / norm_b
                )));
            }
            apply(&d, &mut ad);
            let dad: f64 = d.iter().zip(&ad).map(|(a, b)| a * b).sum();
            if !(dad > 0.0) {
                return Err(Error::Numerical("stiffness matrix not positive definite".into()));
            }
            let alpha = rr / dad;
            for k in 0..u.len() {
                u[k] += alpha * d[k];
                r[k] -= alpha * ad[k];
            }
            let rr_new: f64 = r.iter().map(|v| v * v).sum();
            let beta = rr_new / rr;
            for k in 0..d.len() {
                d[k] = r[k] + beta * d[k];
            }
            rr = rr_new;
            iters += 1;
        }
    }
    Ok((BanachVector::new(space.clone(), u)?, iters))
}

/// Matrix-free P1 stiffness on the structured mesh restricted to interior
/// nodes (boundary rows and columns are zero).
fn stiffness_apply(g: &[f64], u: &[f64], out: &mut [f64]) {
    let n = g.len();
    out.iter_mut().for_each(|v| *v = 0.0);
    for j in 0..n - 1 {
        let hy = g[j + 1] - g[j];
        for i in 0..n - 1 {
            let hx = g[i + 1] - g[i];
            let idx = [j * n + i, j * n + i + 1, (j + 1) * n + i + 1, (j + 1) * n + i];
            // both triangles share the element matrix pattern of a right
            // triangle with legs hx, hy; local order (00, 10, 11) / (00, 11, 01)
            let (kx, ky) = (0.5 * hy / hx, 0.5 * hx / hy);
            let lower = [idx[0], idx[1], idx[2]];
            let upper = [idx[0], idx[2], idx[3]];
            // lower: grad φ_00 = (−1/hx, 0), φ_10 = (1/hx, −1/hy), φ_11 = (0, 1/hy)
            let kl = [[kx, -kx, 0.0], [-kx, kx + ky, -ky], [0.0, -ky, ky]];
            // upper: φ_00 = (0, −1/hy), φ_11 = (1/hx, 0), φ_01 = (−1/hx, 1/hy)
            let ku = [[ky, 0.0, -ky], [0.0, kx, -kx], [-ky, -kx, kx + ky]];
            for (verts, km) in [(lower, kl), (upper, ku)] {
                for a in 0..3 {
                    let s: f64 = (0..3).map(|b| km[a][b] * u[verts[b]]).sum();
                    out[verts[a]] += s;
                }
            }
        }
    }
    for (idx, o) in out.iter_mut().enumerate() {
        let (i, j) = (idx % n, idx / n);
        if i == 0 || j == 0 || i == n - 1 || j == n - 1 {
            *o = 0.0;
        }
    }
}

/// Registered drift/diffusion pairs (globally Lipschitz).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SdePreset {
    /// Componentwise `dX = μX dt + σX dB`.
    Gbm { mu: f64, sigma: f64 },
    /// Componentwise `dX = θ(m − X) dt + σ dB`.
    OrnsteinUhlenbeck { theta: f64, mean: f64, sigma: f64 },
    /// `dX = (A X + c) dt + B dW`, `A ∈ ℝ^{d×d}`, `B ∈ ℝ^{d×m}`.
    Linear {
        a: Vec<Vec<f64>>,
        c: Vec<f64>,
        b: Vec<Vec<f64>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeSpec {
    pub preset: SdePreset,
    pub x0: Vec<f64>,
    #[serde(default = "unit_horizon")]
    pub horizon: f64,
}

fn unit_horizon() -> f64 {
    1.0
}

impl SdeSpec {
    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    /// Dimension of the driving Brownian motion.
    pub fn noise_dim(&self) -> usize {
        match &self.preset {
            SdePreset::Linear { b, .. } => b.first().map_or(0, |r| r.len()),
            _ => self.x0.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || !(self.horizon > 0.0) {
            return Err(Error::invalid("SDE needs a non-empty initial value and a positive horizon"));
        }
        if let SdePreset::Linear { a, c, b } = &self.preset {
            let m = self.noise_dim();
            if a.len() != d || a.iter().any(|r| r.len() != d) || c.len() != d || b.len() != d || b.iter().any(|r| r.len() != m) {
                return Err(Error::invalid("linear SDE coefficient shapes do not match the state dimension"));
            }
        }
        Ok(())
    }

    /// One Euler–Maruyama step `y + μ(y)Δt + σ(y)ΔB`.
    fn step(&self, y: &[f64], dt: f64, db: &[f64], out: &mut [f64]) {
        match &self.preset {
            SdePreset::Gbm { mu, sigma } => {
                for i in 0..y.len() {
                    out[i] = y[i] + mu * y[i] * dt + sigma * y[i] * db[i];
                }
            }
            SdePreset::OrnsteinUhlenbeck { theta, mean, sigma } => {
                for i in 0..y.len() {
                    out[i] = y[i] + theta * (mean - y[i]) * dt + sigma * db[i];
                }
            }
            SdePreset::Linear { a, c, b } => {
                for i in 0..y.len() {
                    let drift: f64 = a[i].iter().zip(y).map(|(x, z)| x * z).sum::<f64>() + c[i];
                    let diff: f64 = b[i].iter().zip(db).map(|(x, z)| x * z).sum();
                    out[i] = y[i] + drift * dt + diff;
                }
            }
        }
    }
}

/// Euler–Maruyama values at the nodes `jT/N`, `j = 0..=N` (node-major).
pub fn em_nodes(spec: &SdeSpec, steps: usize, increments: &[f64]) -> Result<Vec<f64>> {
    spec.validate()?;
    let d = spec.dim();
    let m = spec.noise_dim();
    if steps == 0 || increments.len() != steps * m {
        return Err(Error::DimensionMismatch {
            expected: steps * m,
            got: increments.len(),
        });
    }
    let dt = spec.horizon / steps as f64;
    let mut out = Vec::with_capacity((steps + 1) * d);
    out.extend_from_slice(&spec.x0);
    let mut next = vec![0.0; d];
    for j in 0..steps {
        let y = &out[j * d..(j + 1) * d];
        spec.step(y, dt, &increments[j * m..(j + 1) * m], &mut next);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("Euler–Maruyama produced a non-finite value at step {j}")));
        }
        out.extend_from_slice(&next);
    }
    Ok(out)
}

/// Euler–Maruyama path linearly interpolated on its partition, evaluated
/// on the grid of `output` (a path space on `[0, T]`).
pub fn em_path(spec: &SdeSpec, steps: usize, increments: &[f64], output: &Arc<SpaceDescriptor>) -> Result<BanachVector> {
    let nodes = em_nodes(spec, steps, increments)?;
    let own = SpaceDescriptor::holder(uniform_grid(spec.horizon, steps)?, output.delta().unwrap_or(0.0), spec.dim())?;
    let path = BanachVector::new(own, nodes)?;
    interpolate(&path, output)
}

/// Sums consecutive groups of `factor` increments (per noise component).
pub fn aggregate_increments(fine: &[f64], factor: usize, noise_dim: usize) -> Result<Vec<f64>> {
    if factor == 0 || noise_dim == 0 || fine.len() % (factor * noise_dim) != 0 {
        return Err(Error::invalid(format!(
            "{} increments cannot be grouped by factor {factor} with {noise_dim} components",
            fine.len()
        )));
    }
    let steps = fine.len() / noise_dim / factor;
    let mut out = vec![0.0; steps * noise_dim];
    for s in 0..steps {
        for q in 0..factor {
            let base = (s * factor + q) * noise_dim;
            for c in 0..noise_dim {
                out[s * noise_dim + c] += fine[base + c];
            }
        }
    }
    Ok(out)
}

/// Brownian bridge refinement: fine increments over `factor` equal
/// sub-steps of variance `dt_fine`, conditioned to sum to the given coarse
/// increments.
pub fn bridge_refine(coarse: &[f64], factor: f64, dt_fine: f64, noise_dim: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if factor.fract() != 0.0 || factor < 1.0 {
        return Err(Error::invalid(format!("refinement factor {factor} is not a positive integer")));
    }
    let factor = factor as usize;
    if noise_dim == 0 || coarse.len() % noise_dim != 0 {
        return Err(Error::invalid("coarse increments do not match the noise dimension"));
    }
    let steps = coarse.len() / noise_dim;
    let sd = dt_fine.sqrt();
    let mut out = vec![0.0; coarse.len() * factor];
    for s in 0..steps {
        for c in 0..noise_dim {
            let z: Vec<f64> = (0..factor).map(|_| sd * normal(rng)).collect();
            let shift = (z.iter().sum::<f64>() - coarse[s * noise_dim + c]) / factor as f64;
            for (q, zq) in z.iter().enumerate() {
                out[(s * factor + q) * noise_dim + c] = zq - shift;
            }
        }
    }
    Ok(out)
}

/// Brownian increments over `steps` equal steps of `[0, T]`.
pub fn brownian_increments(steps: usize, horizon: f64, noise_dim: usize, seed: &SeedSpec) -> Vec<f64> {
    let mut rng = seed.rng();
    let sd = (horizon / steps as f64).sqrt();
    (0..steps * noise_dim)
        .map(|_| sd * normal(&mut rng))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeParams {
    pub sde: SdeSpec,
    pub delta: f64,
    /// Level `ℓ` uses `n0 · 2^{ℓ−1}` time steps.
    #[serde(default = "one")]
    pub n0: usize,
    pub max_level: usize,
}

/// Euler–Maruyama hierarchy. All levels are expressed on the grid of the
/// finest level, so Hölder norms of differences are directly computable.
pub struct EulerMaruyama {
    params: SdeParams,
    output: Arc<SpaceDescriptor>,
}

impl EulerMaruyama {
    pub fn new(params: SdeParams) -> Result<Self> {
        params.sde.validate()?;
        if params.n0 == 0 || params.max_level == 0 || params.max_level > 20 {
            return Err(Error::invalid("need n0 ≥ 1 and 1 ≤ max_level ≤ 20"));
        }
        let output = SpaceDescriptor::holder(
            uniform_grid(params.sde.horizon, params.n0 << (params.max_level - 1))?,
            params.delta,
            params.sde.dim(),
        )?;
        Ok(EulerMaruyama { params, output })
    }

    pub fn output_space(&self) -> &Arc<SpaceDescriptor> {
        &self.output
    }

    pub fn spec(&self) -> &SdeSpec {
        &self.params.sde
    }

    /// Fine increments of level `level` for this seed.
    pub fn increments(&self, level: usize, seed: &SeedSpec) -> Vec<f64> {
        brownian_increments(self.size(level), self.params.sde.horizon, self.params.sde.noise_dim(), seed)
    }
}

impl LevelHierarchy for EulerMaruyama {
    fn max_level(&self) -> usize {
        self.params.max_level
    }

    fn size(&self, level: usize) -> usize {
        self.params.n0 << (level - 1)
    }

    fn space(&self, level: usize) -> Result<Arc<SpaceDescriptor>> {
        check_level(level, self.params.max_level)?;
        Ok(self.output.clone())
    }

    fn sample_pair(&self, level: usize, seed: &SeedSpec) -> Result<CoupledSample> {
        check_level(level, self.params.max_level)?;
        let sde = &self.params.sde;
        let m = sde.noise_dim();
        let dw = self.increments(level, seed);
        let n = self.size(level);
        let fine = em_path(sde, n, &dw, &self.output)?;
        let coarse = if level == 1 {
            BanachVector::zeros(self.output.clone())
        } else {
            let dc = aggregate_increments(&dw, 2, m)?;
            em_path(sde, n / 2, &dc, &self.output)?
        };
        let work = (n + if level == 1 { 0 } else { n / 2 }) as f64;
        Ok(CoupledSample {
            fine,
            coarse,
            level,
            work_units: work,
        })
    }

    fn sample_fine(&self, level: usize, seed: &SeedSpec) -> Result<(BanachVector, f64)> {
        check_level(level, self.params.max_level)?;
        let dw = self.increments(level, seed);
        let n = self.size(level);
        Ok((em_path(&self.params.sde, n, &dw, &self.output)?, n as f64))
    }
}

/// `ξ ≡ x`.
pub struct ConstantSampler {
    pub value: BanachVector,
}

impl Sampler for ConstantSampler {
    fn space(&self) -> &Arc<SpaceDescriptor> {
        self.value.space()
    }

    fn sample(&self, _seed: &SeedSpec) -> Result<BanachVector> {
        Ok(self.value.clone())
    }
}

/// Independent `N(0, scale²)` coordinates in a sequence space.
pub struct GaussianCoordinates {
    pub space: Arc<SpaceDescriptor>,
    pub scale: f64,
}

impl Sampler for GaussianCoordinates {
    fn space(&self) -> &Arc<SpaceDescriptor> {
        &self.space
    }

    fn sample(&self, seed: &SeedSpec) -> Result<BanachVector> {
        let mut rng = seed.rng();
        let c = (0..self.space.size())
            .map(|_| self.scale * normal(&mut rng))
            .collect();
        BanachVector::new(self.space.clone(), c)
    }
}

/// `e_I` (or `r·e_I` with a Rademacher sign) with `I` uniform.
pub struct UniformBasis {
    pub space: Arc<SpaceDescriptor>,
    pub signed: bool,
}

impl Sampler for UniformBasis {
    fn space(&self) -> &Arc<SpaceDescriptor> {
        &self.space
    }

    fn sample(&self, seed: &SeedSpec) -> Result<BanachVector> {
        crate::sampling::uniform_basis_in(&self.space, &mut seed.rng(), self.signed)
    }
}

/// A finitely supported distribution `Σ_i π_i δ_{x_i}`.
pub struct FiniteDistribution {
    space: Arc<SpaceDescriptor>,
    atoms: Vec<(f64, BanachVector)>,
}

impl FiniteDistribution {
    pub fn new(atoms: Vec<(f64, BanachVector)>) -> Result<Self> {
        let space = atoms
            .first()
            .map(|a| a.1.space().clone())
            .ok_or_else(|| Error::invalid("a finite distribution needs at least one atom"))?;
        let total: f64 = atoms.iter().map(|a| a.0).sum();
        if atoms.iter().any(|a| !(a.0 >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid("atom probabilities must be non-negative and sum to 1"));
        }
        for (_, x) in &atoms {
            if !space.same_as(x.space()) {
                return Err(Error::SpaceMismatch("atoms live in different spaces".into()));
            }
        }
        Ok(FiniteDistribution { space, atoms })
    }

    pub fn atoms(&self) -> &[(f64, BanachVector)] {
        &self.atoms
    }
}

impl Sampler for FiniteDistribution {
    fn space(&self) -> &Arc<SpaceDescriptor> {
        &self.space
    }

    fn sample(&self, seed: &SeedSpec) -> Result<BanachVector> {
        let u: f64 = seed.rng().random();
        let mut acc = 0.0;
        for (p, x) in &self.atoms {
            acc += p;
            if u < acc {
                return Ok(x.clone());
            }
        }
        Ok(self.atoms[self.atoms.len() - 1].1.clone())
    }
}

/// Rademacher-signed vector `r·x` (a symmetric two-point law).
pub struct SignedVector {
    pub value: BanachVector,
}

impl Sampler for SignedVector {
    fn space(&self) -> &Arc<SpaceDescriptor> {
        self.value.space()
    }

    fn sample(&self, seed: &SeedSpec) -> Result<BanachVector> {
        Ok(self.value.scaled(rademacher(&mut seed.rng())))
    }
}
