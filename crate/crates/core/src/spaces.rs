//! Discretized Banach spaces: sequence spaces `ℓ_p^n`, P1 finite element
//! spaces with the `W¹_p` seminorm (1D grids and the structured unit-square
//! lattice), and Hölder path spaces `C^δ([0,T]; ℝ^d)` of piecewise linear
//! paths.
//!
//! Every element carries its [`SpaceDescriptor`] behind an `Arc`, so rank
//! structured tensors with many terms share one descriptor.
//!
//! The dual unit ball is exposed in "sequence coordinates": a P1 function
//! `v` on a 1D grid is mapped isometrically to `w_e = h_e^{1/p} s_e` (slopes
//! `s_e`), and on the 2D lattice to per-triangle blocks `|T|^{1/p} ∇v|_T`
//! with the mixed `ℓ_p(ℓ_2)` norm. Functionals in `B_{ℓ_{p'}}` of those
//! coordinates then restrict to the whole dual ball of the FEM space.
//! For Hölder paths only the family `u·δ_t + w·(δ_s − δ_r)/|s − r|^δ`,
//! `|u|, |w| ≤ 1`, is represented; it attains the norm of every single path
//! but gives lower bounds for tensor norms.

use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    SequenceLp,
    FemW1p1d,
    FemW1p2d,
    HolderPath,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    None,
    /// `u(0) = 0`, natural condition at the right end point.
    DirichletLeftNeumannRight,
    /// Homogeneous Dirichlet on the whole boundary.
    Dirichlet,
}

/// Describes which space a coefficient vector lives in.
///
/// Construct through [`SpaceDescriptor::sequence`], [`SpaceDescriptor::fem1d`],
/// [`SpaceDescriptor::fem2d`] or [`SpaceDescriptor::holder`]; the
/// constructors enforce the invariants.
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceDescriptor {
    kind: SpaceKind,
    p: Option<f64>,
    delta: Option<f64>,
    /// 1D: node coordinates. 2D: coordinates along one axis of the square
    /// lattice. Sequences: empty.
    grid: Vec<f64>,
    boundary: Boundary,
    /// Sequence length for `SequenceLp`, value dimension for `HolderPath`.
    extent: usize,
}

fn check_p(p: f64) -> Result<()> {
    if p.is_infinite() {
        return Err(Error::UnsupportedSpace("p = ∞ is not supported".into()));
    }
    if !(p >= 1.0) {
        return Err(Error::invalid(format!("integrability exponent p = {p} must be ≥ 1")));
    }
    Ok(())
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::invalid("a grid needs at least two nodes"));
    }
    if grid.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("grid nodes must be finite"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("grid nodes must be strictly increasing"));
    }
    Ok(())
}

impl SpaceDescriptor {
    pub fn sequence(len: usize, p: f64) -> Result<Arc<Self>> {
        check_p(p)?;
        if len == 0 {
            return Err(Error::invalid("sequence space of dimension 0"));
        }
        Ok(Arc::new(SpaceDescriptor {
            kind: SpaceKind::SequenceLp,
            p: Some(p),
            delta: None,
            grid: Vec::new(),
            boundary: Boundary::None,
            extent: len,
        }))
    }

    pub fn fem1d(grid: Vec<f64>, p: f64, boundary: Boundary) -> Result<Arc<Self>> {
        check_p(p)?;
        check_grid(&grid)?;
        if boundary == Boundary::None {
            return Err(Error::invalid(
                "W¹_p seminorm needs an essential boundary condition to be a norm",
            ));
        }
        Ok(Arc::new(SpaceDescriptor {
            kind: SpaceKind::FemW1p1d,
            p: Some(p),
            delta: None,
            grid,
            boundary,
            extent: 1,
        }))
    }

    /// Uniform 1D grid with `elements` cells on `[0, b]`.
    pub fn fem1d_uniform(b: f64, elements: usize, p: f64, boundary: Boundary) -> Result<Arc<Self>> {
        Self::fem1d(uniform_grid(b, elements)?, p, boundary)
    }

    /// P1 space on the unit-square lattice with the given axis coordinates,
    /// homogeneous Dirichlet boundary.
    pub fn fem2d(axis: Vec<f64>, p: f64) -> Result<Arc<Self>> {
        check_p(p)?;
        check_grid(&axis)?;
        if axis.len() < 3 {
            return Err(Error::invalid("2D lattice needs at least one interior node per axis"));
        }
        Ok(Arc::new(SpaceDescriptor {
            kind: SpaceKind::FemW1p2d,
            p: Some(p),
            delta: None,
            grid: axis,
            boundary: Boundary::Dirichlet,
            extent: 1,
        }))
    }

    pub fn fem2d_uniform(cells_per_side: usize, p: f64) -> Result<Arc<Self>> {
        Self::fem2d(uniform_grid(1.0, cells_per_side)?, p)
    }

    pub fn holder(grid: Vec<f64>, delta: f64, components: usize) -> Result<Arc<Self>> {
        check_grid(&grid)?;
        if !(0.0..1.0).contains(&delta) {
            return Err(Error::invalid(format!("Hölder exponent δ = {delta} must lie in [0, 1)")));
        }
        if components == 0 {
            return Err(Error::invalid("paths need at least one component"));
        }
        Ok(Arc::new(SpaceDescriptor {
            kind: SpaceKind::HolderPath,
            p: None,
            delta: Some(delta),
            grid,
            boundary: Boundary::None,
            extent: components,
        }))
    }

    pub fn kind(&self) -> SpaceKind {
        self.kind
    }

    pub fn p(&self) -> Option<f64> {
        self.p
    }

    /// Hölder conjugate `p'` (∞ for `p = 1`).
    pub fn p_dual(&self) -> Option<f64> {
        self.p.map(conjugate_exponent)
    }

    pub fn delta(&self) -> Option<f64> {
        self.delta
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    /// Value dimension of a path space (1 for all other kinds).
    pub fn components(&self) -> usize {
        match self.kind {
            SpaceKind::HolderPath => self.extent,
            _ => 1,
        }
    }

    /// Number of coefficients of an element.
    pub fn size(&self) -> usize {
        match self.kind {
            SpaceKind::SequenceLp => self.extent,
            SpaceKind::FemW1p1d => self.grid.len(),
            SpaceKind::FemW1p2d => self.grid.len() * self.grid.len(),
            SpaceKind::HolderPath => self.grid.len() * self.extent,
        }
    }

    /// Number of elements (1D) or triangles (2D).
    pub fn cells(&self) -> usize {
        match self.kind {
            SpaceKind::FemW1p1d | SpaceKind::HolderPath => self.grid.len() - 1,
            SpaceKind::FemW1p2d => 2 * (self.grid.len() - 1) * (self.grid.len() - 1),
            SpaceKind::SequenceLp => self.extent,
        }
    }

    /// Length and block size of the sequence coordinates used for the dual
    /// ball, `None` for path spaces.
    pub fn sequence_layout(&self) -> Option<(usize, usize)> {
        match self.kind {
            SpaceKind::SequenceLp => Some((self.extent, 1)),
            SpaceKind::FemW1p1d => Some((self.grid.len() - 1, 1)),
            SpaceKind::FemW1p2d => Some((self.cells() * 2, 2)),
            SpaceKind::HolderPath => None,
        }
    }

    /// Coefficient indices forced to zero by essential boundary conditions.
    pub fn constrained_nodes(&self) -> Vec<usize> {
        match self.kind {
            SpaceKind::FemW1p1d => match self.boundary {
                Boundary::DirichletLeftNeumannRight => vec![0],
                Boundary::Dirichlet => vec![0, self.grid.len() - 1],
                Boundary::None => vec![],
            },
            SpaceKind::FemW1p2d => {
                let n = self.grid.len();
                let mut out = Vec::with_capacity(4 * n);
                for j in 0..n {
                    for i in 0..n {
                        if i == 0 || j == 0 || i == n - 1 || j == n - 1 {
                            out.push(j * n + i);
                        }
                    }
                }
                out
            }
            _ => vec![],
        }
    }

    /// `Δ_max / Δ_min` of a 1D grid (1 for sequences).
    pub fn quasi_uniformity(&self) -> f64 {
        if self.grid.len() < 2 {
            return 1.0;
        }
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for w in self.grid.windows(2) {
            let h = w[1] - w[0];
            lo = lo.min(h);
            hi = hi.max(h);
        }
        hi / lo
    }

    /// Whether `self` and `other` describe the same space.
    pub fn same_as(self: &Arc<Self>, other: &Arc<Self>) -> bool {
        Arc::ptr_eq(self, other) || **self == **other
    }
}

pub fn uniform_grid(b: f64, cells: usize) -> Result<Vec<f64>> {
    if cells == 0 || !(b > 0.0) {
        return Err(Error::invalid("uniform grid needs b > 0 and at least one cell"));
    }
    Ok((0..=cells).map(|i| b * i as f64 / cells as f64).collect())
}

pub fn conjugate_exponent(p: f64) -> f64 {
    if p == 1.0 {
        f64::INFINITY
    } else {
        p / (p - 1.0)
    }
}

/// `ℓ_p` norm of a slice, scaled against overflow. `p = ∞` gives the max norm.
pub fn lp_norm(x: &[f64], p: f64) -> f64 {
    let m = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m == 0.0 || p.is_infinite() {
        return m;
    }
    if p == 2.0 {
        return m * x.iter().map(|v| (v / m) * (v / m)).sum::<f64>().sqrt();
    }
    if p == 1.0 {
        return x.iter().map(|v| v.abs()).sum();
    }
    m * x.iter().map(|v| (v.abs() / m).powf(p)).sum::<f64>().powf(1.0 / p)
}

/// Mixed `ℓ_p(ℓ_2^block)` norm: `ℓ_p` norm of the Euclidean block norms.
pub fn block_norm(x: &[f64], p: f64, block: usize) -> f64 {
    if block == 1 {
        return lp_norm(x, p);
    }
    let blocks: Vec<f64> = x.chunks(block).map(|c| lp_norm(c, 2.0)).collect();
    lp_norm(&blocks, p)
}

/// Duality map onto the unit sphere of the dual: returns `g` with
/// `‖g‖_{p'} = 1` (mixed block norm) and `⟨g, h⟩ = ‖h‖_p`. Zero maps to zero.
pub fn dual_direction(h: &[f64], p: f64, block: usize) -> Vec<f64> {
    let nh = block_norm(h, p, block);
    if nh == 0.0 {
        return vec![0.0; h.len()];
    }
    if p == 1.0 {
        // p' = ∞: saturate every block along its own direction
        return h
            .chunks(block)
            .flat_map(|c| {
                let r = lp_norm(c, 2.0);
                c.iter().map(move |v| if r > 0.0 { v / r } else { 0.0 })
            })
            .collect();
    }
    let mut out = Vec::with_capacity(h.len());
    for c in h.chunks(block) {
        let r = lp_norm(c, 2.0) / nh;
        let scale = if r > 0.0 { r.powf(p - 1.0) / (r * nh) } else { 0.0 };
        out.extend(c.iter().map(|v| v * scale));
    }
    out
}

/// Rescales `g` into the dual unit ball `B_{ℓ_{p'}}` (mixed block norm).
/// For `p = 1` every block is clamped to the Euclidean unit ball.
pub fn project_dual_ball(g: &mut [f64], p: f64, block: usize) {
    if p == 1.0 {
        for c in g.chunks_mut(block) {
            let r = lp_norm(c, 2.0);
            if r > 1.0 {
                c.iter_mut().for_each(|v| *v /= r);
            }
        }
        return;
    }
    let n = block_norm(g, conjugate_exponent(p), block);
    if n > 1.0 {
        g.iter_mut().for_each(|v| *v /= n);
    }
}

/// Hölder norm `sup_t |f(t)| + sup_{s≠t} |f(s) − f(t)| / |s − t|^δ` of a
/// piecewise linear path given by its nodal values (node-major layout).
///
/// For piecewise linear paths the supremum over all `s ≠ t` is attained at
/// node pairs, so this is exact.
pub fn holder_norm(grid: &[f64], values: &[f64], components: usize, delta: f64) -> f64 {
    let sup = values
        .chunks(components)
        .map(|c| lp_norm(c, 2.0))
        .fold(0.0f64, f64::max);
    sup + holder_seminorm(grid, values, components, delta).0
}

/// Hölder seminorm with the maximizing node pair `(i, j)`, `i < j`.
pub fn holder_seminorm(grid: &[f64], values: &[f64], components: usize, delta: f64) -> (f64, (usize, usize)) {
    let n = grid.len();
    if components == 1 && delta == 0.0 {
        let (mut imin, mut imax) = (0, 0);
        for i in 0..n {
            if values[i] < values[imin] {
                imin = i;
            }
            if values[i] > values[imax] {
                imax = i;
            }
        }
        let pair = (imin.min(imax), imin.max(imax));
        return (values[imax] - values[imin], pair);
    }
    if n < 2 {
        return (0.0, (0, 0));
    }
    let c = components;
    let node = |i: usize| &values[i * c..(i + 1) * c];
    let quotient = |i: usize, j: usize| {
        let num = node(i).iter().zip(node(j)).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt();
        if delta == 0.0 {
            num
        } else {
            num / (grid[j] - grid[i]).powf(delta)
        }
    };
    let mut best = (0.0, (0, 1));
    for i in 0..n - 1 {
        let q = quotient(i, i + 1);
        if q > best.0 {
            best = (q, (i, i + 1));
        }
    }
    // Branch and bound over a segment tree of componentwise node ranges:
    // a block right of `i` cannot beat `best` if the distance from `f_i` to
    // its bounding box, over the smallest time gap, does not.
    let size = n.next_power_of_two();
    let mut lo = vec![f64::INFINITY; 2 * size * c];
    let mut hi = vec![f64::NEG_INFINITY; 2 * size * c];
    for i in 0..n {
        lo[(size + i) * c..(size + i + 1) * c].copy_from_slice(node(i));
        hi[(size + i) * c..(size + i + 1) * c].copy_from_slice(node(i));
    }
    for v in (1..size).rev() {
        for k in 0..c {
            lo[v * c + k] = lo[2 * v * c + k].min(lo[(2 * v + 1) * c + k]);
            hi[v * c + k] = hi[2 * v * c + k].max(hi[(2 * v + 1) * c + k]);
        }
    }
    let mut stack = Vec::new();
    for i in 0..n - 2 {
        let fi = node(i);
        stack.push((1usize, 0usize, size));
        while let Some((v, a, b)) = stack.pop() {
            // block covers nodes a..b
            if b <= i + 2 || a >= n {
                continue;
            }
            if a <= i + 1 {
                stack.push((2 * v, a, (a + b) / 2));
                stack.push((2 * v + 1, (a + b) / 2, b));
                continue;
            }
            let reach = (0..c)
                .map(|k| {
                    let d = (hi[v * c + k] - fi[k]).max(fi[k] - lo[v * c + k]);
                    d * d
                })
                .sum::<f64>()
                .sqrt();
            let bound = if delta == 0.0 { reach } else { reach / (grid[a] - grid[i]).powf(delta) };
            if bound <= best.0 {
                continue;
            }
            if b - a == 1 {
                let q = quotient(i, a);
                if q > best.0 {
                    best = (q, (i, a));
                }
            } else {
                stack.push((2 * v + 1, (a + b) / 2, b));
                stack.push((2 * v, a, (a + b) / 2));
            }
        }
    }
    best
}

/// An element of a discretized Banach space.
#[derive(Clone, Debug, PartialEq)]
pub struct BanachVector {
    space: Arc<SpaceDescriptor>,
    coeffs: Vec<f64>,
}

impl BanachVector {
    pub fn new(space: Arc<SpaceDescriptor>, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != space.size() {
            return Err(Error::DimensionMismatch {
                expected: space.size(),
                got: coeffs.len(),
            });
        }
        for i in space.constrained_nodes() {
            if coeffs[i] != 0.0 {
                return Err(Error::invalid(format!(
                    "coefficient {i} violates the essential boundary condition (value {})",
                    coeffs[i]
                )));
            }
        }
        Ok(BanachVector { space, coeffs })
    }

    pub fn zeros(space: Arc<SpaceDescriptor>) -> Self {
        let n = space.size();
        BanachVector {
            space,
            coeffs: vec![0.0; n],
        }
    }

    pub fn space(&self) -> &Arc<SpaceDescriptor> {
        &self.space
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|&c| c == 0.0)
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        BanachVector {
            space: self.space.clone(),
            coeffs: self.coeffs.iter().map(|c| alpha * c).collect(),
        }
    }

    /// `self − other`.
    pub fn sub(&self, other: &BanachVector) -> Result<Self> {
        self.check_same_space(other)?;
        Ok(BanachVector {
            space: self.space.clone(),
            coeffs: self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a - b).collect(),
        })
    }

    /// `self + alpha·other`.
    pub fn add_scaled(&self, alpha: f64, other: &BanachVector) -> Result<Self> {
        self.check_same_space(other)?;
        Ok(BanachVector {
            space: self.space.clone(),
            coeffs: self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a + alpha * b).collect(),
        })
    }

    pub fn check_same_space(&self, other: &BanachVector) -> Result<()> {
        if self.space.same_as(&other.space) {
            Ok(())
        } else {
            Err(Error::SpaceMismatch(format!(
                "{:?} ({} coefficients) vs {:?} ({} coefficients)",
                self.space.kind,
                self.coeffs.len(),
                other.space.kind,
                other.coeffs.len()
            )))
        }
    }

    /// Norm of the element in its space.
    pub fn norm(&self) -> f64 {
        let s = &self.space;
        match s.kind {
            SpaceKind::SequenceLp => lp_norm(&self.coeffs, s.p.unwrap_or(2.0)),
            SpaceKind::FemW1p1d | SpaceKind::FemW1p2d => {
                let (w, block) = self.sequence_coords();
                block_norm(&w, s.p.unwrap_or(2.0), block)
            }
            SpaceKind::HolderPath => holder_norm(&s.grid, &self.coeffs, s.extent, s.delta.unwrap_or(0.0)),
        }
    }

    /// Coordinates in the sequence space that the dual ball is parameterized
    /// on, with their block size. Identity for sequences; slopes scaled by
    /// `h_e^{1/p}` for 1D FEM; per-triangle gradients scaled by `|T|^{1/p}`
    /// for 2D FEM. Not defined for paths (returns the raw coefficients).
    pub(crate) fn sequence_coords(&self) -> (Vec<f64>, usize) {
        let s = &self.space;
        match s.kind {
            SpaceKind::SequenceLp | SpaceKind::HolderPath => (self.coeffs.clone(), 1),
            SpaceKind::FemW1p1d => {
                let p = s.p.unwrap_or(2.0);
                let w = s
                    .grid
                    .windows(2)
                    .zip(self.coeffs.windows(2))
                    .map(|(x, u)| {
                        let h = x[1] - x[0];
                        h.powf(1.0 / p) * (u[1] - u[0]) / h
                    })
                    .collect();
                (w, 1)
            }
            SpaceKind::FemW1p2d => {
                let p = s.p.unwrap_or(2.0);
                let n = s.grid.len();
                let u = &self.coeffs;
                let mut w = Vec::with_capacity(4 * (n - 1) * (n - 1));
                for j in 0..n - 1 {
                    let hy = s.grid[j + 1] - s.grid[j];
                    for i in 0..n - 1 {
                        let hx = s.grid[i + 1] - s.grid[i];
                        let u00 = u[j * n + i];
                        let u10 = u[j * n + i + 1];
                        let u01 = u[(j + 1) * n + i];
                        let u11 = u[(j + 1) * n + i + 1];
                        let scale = (0.5 * hx * hy).powf(1.0 / p);
                        // lower triangle (00, 10, 11)
                        w.push(scale * (u10 - u00) / hx);
                        w.push(scale * (u11 - u10) / hy);
                        // upper triangle (00, 11, 01)
                        w.push(scale * (u11 - u01) / hx);
                        w.push(scale * (u01 - u00) / hy);
                    }
                }
                (w, 2)
            }
        }
    }

    /// Evaluates the piecewise linear function/path at `x` (1D kinds only).
    pub fn eval_1d(&self, x: f64) -> Result<Vec<f64>> {
        let s = &self.space;
        match s.kind {
            SpaceKind::FemW1p1d | SpaceKind::HolderPath => {
                let g = &s.grid;
                let c = s.components();
                if x < g[0] - 1e-12 * g[g.len() - 1].abs().max(1.0) || x > g[g.len() - 1] * (1.0 + 1e-12) + 1e-12 {
                    return Err(Error::invalid(format!("point {x} outside the grid")));
                }
                let e = locate(g, x);
                let t = ((x - g[e]) / (g[e + 1] - g[e])).clamp(0.0, 1.0);
                Ok((0..c)
                    .map(|k| (1.0 - t) * self.coeffs[e * c + k] + t * self.coeffs[(e + 1) * c + k])
                    .collect())
            }
            _ => Err(Error::UnsupportedSpace(format!("{:?} has no 1D point evaluation", s.kind))),
        }
    }
}

/// Index `e` of the cell `[g[e], g[e+1]]` containing `x` (clamped).
pub(crate) fn locate(g: &[f64], x: f64) -> usize {
    let n = g.len();
    match g.binary_search_by(|v| v.partial_cmp(&x).unwrap_or(std::cmp::Ordering::Less)) {
        Ok(i) => i.min(n - 2),
        Err(i) => i.saturating_sub(1).min(n - 2),
    }
}

/// Isometric map of a 1D P1 element onto the weighted slope sequence
/// `w_e = h_e^{1/p} s_e` in `ℓ_p`.
pub fn to_sequence(v: &BanachVector) -> Result<BanachVector> {
    if v.space.kind != SpaceKind::FemW1p1d {
        return Err(Error::UnsupportedSpace(format!(
            "to_sequence expects a 1D FEM element, got {:?}",
            v.space.kind
        )));
    }
    let (w, _) = v.sequence_coords();
    let space = SpaceDescriptor::sequence(w.len(), v.space.p.unwrap_or(2.0))?;
    BanachVector::new(space, w)
}

/// Interpolates `v` onto the grid of `target` (same kind). For nested FEM
/// grids and path grids this is the exact embedding of the piecewise linear
/// function; onto coarser node sets it is nodal restriction.
pub fn interpolate(v: &BanachVector, target: &Arc<SpaceDescriptor>) -> Result<BanachVector> {
    let s = &v.space;
    if s.same_as(target) {
        return Ok(v.clone());
    }
    if s.kind != target.kind || s.p != target.p || s.components() != target.components() {
        return Err(Error::SpaceMismatch(format!(
            "cannot interpolate {:?} onto {:?}",
            s.kind, target.kind
        )));
    }
    match s.kind {
        SpaceKind::SequenceLp => Err(Error::SpaceMismatch("sequence spaces of different length".into())),
        SpaceKind::FemW1p1d | SpaceKind::HolderPath => {
            let c = s.components();
            let g = &s.grid;
            let (lo, hi) = (g[0], g[g.len() - 1]);
            let tol = 1e-12 * hi.abs().max(1.0);
            if target.grid[0] < lo - tol || target.grid[target.grid.len() - 1] > hi + tol {
                return Err(Error::invalid("target grid extends outside the source grid"));
            }
            let mut out = Vec::with_capacity(target.size());
            let mut e = 0;
            for &x in &target.grid {
                while e + 2 < g.len() && g[e + 1] < x {
                    e += 1;
                }
                let t = ((x - g[e]) / (g[e + 1] - g[e])).clamp(0.0, 1.0);
                out.extend((0..c).map(|k| (1.0 - t) * v.coeffs[e * c + k] + t * v.coeffs[(e + 1) * c + k]));
            }
            // snap constrained nodes (they sit on boundary points shared by both grids)
            for i in target.constrained_nodes() {
                if out[i].abs() > 1e-12 * (1.0 + v.coeffs.iter().fold(0.0f64, |m, x| m.max(x.abs()))) {
                    return Err(Error::invalid("interpolant violates the target boundary condition"));
                }
                out[i] = 0.0;
            }
            debug_assert_eq!(out.len(), target.grid.len() * c);
            BanachVector::new(target.clone(), out)
        }
        SpaceKind::FemW1p2d => {
            let g = &s.grid;
            let n = g.len();
            let tg = &target.grid;
            let tn = tg.len();
            let u = &v.coeffs;
            let mut out = vec![0.0; tn * tn];
            for (jj, &y) in tg.iter().enumerate() {
                let j = locate(g, y);
                let ty = ((y - g[j]) / (g[j + 1] - g[j])).clamp(0.0, 1.0);
                for (ii, &x) in tg.iter().enumerate() {
                    let i = locate(g, x);
                    let tx = ((x - g[i]) / (g[i + 1] - g[i])).clamp(0.0, 1.0);
                    let u00 = u[j * n + i];
                    let u10 = u[j * n + i + 1];
                    let u01 = u[(j + 1) * n + i];
                    let u11 = u[(j + 1) * n + i + 1];
                    out[jj * tn + ii] = if ty <= tx {
                        // lower triangle: barycentric on (00, 10, 11)
                        u00 + tx * (u10 - u00) + ty * (u11 - u10)
                    } else {
                        u00 + ty * (u01 - u00) + tx * (u11 - u01)
                    };
                }
            }
            for i in target.constrained_nodes() {
                out[i] = 0.0;
            }
            BanachVector::new(target.clone(), out)
        }
    }
}

const GAUSS3_NODES: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
const GAUSS3_WEIGHTS: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];

/// Three-point Gauss–Legendre rule on `[a, b]` (exact up to degree 5).
pub fn gauss_on(a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    GAUSS3_NODES
        .iter()
        .zip(GAUSS3_WEIGHTS.iter())
        .map(move |(x, w)| (mid + half * x, half * w))
}

/// `L_p` norm of a 1D P1 function by per-element Gauss quadrature. Only
/// exact for `p = 2` (polynomial integrand); otherwise carries the
/// quadrature bias of the degree-5 rule.
pub fn fem1d_lp_norm(v: &BanachVector, p: f64) -> Result<f64> {
    if v.space.kind != SpaceKind::FemW1p1d {
        return Err(Error::UnsupportedSpace("fem1d_lp_norm needs a 1D FEM element".into()));
    }
    check_p(p)?;
    let g = &v.space.grid;
    let mut acc = 0.0;
    for (x, u) in g.windows(2).zip(v.coeffs.windows(2)) {
        for (t, w) in gauss_on(x[0], x[1]) {
            let val = u[0] + (u[1] - u[0]) * (t - x[0]) / (x[1] - x[0]);
            acc += w * val.abs().powf(p);
        }
    }
    Ok(acc.powf(1.0 / p))
}

/// A point-evaluation atom `⟨u, f(t_node)⟩`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointAtom {
    pub node: usize,
    pub direction: Vec<f64>,
}

/// A difference-quotient atom `⟨w, f(t_hi) − f(t_lo)⟩ / |t_hi − t_lo|^δ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffAtom {
    pub lo: usize,
    pub hi: usize,
    pub direction: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DualRep {
    /// No functional (certificate of an empty tensor).
    Null,
    /// Coefficients acting on the sequence coordinates of the space.
    Sequence { coeffs: Vec<f64> },
    /// Grid functional on a path space.
    Holder {
        point: Option<PointAtom>,
        diff: Option<DiffAtom>,
    },
}

/// A functional in (a subset of) the dual of a discretized space.
#[derive(Clone, Debug, PartialEq)]
pub struct DualFunctional {
    space: Arc<SpaceDescriptor>,
    rep: DualRep,
}

impl DualFunctional {
    pub fn new(space: Arc<SpaceDescriptor>, rep: DualRep) -> Result<Self> {
        match &rep {
            DualRep::Null => {}
            DualRep::Sequence { coeffs } => {
                let (len, _) = space.sequence_layout().ok_or_else(|| {
                    Error::UnsupportedSpace("sequence functional on a path space".into())
                })?;
                if coeffs.len() != len {
                    return Err(Error::DimensionMismatch {
                        expected: len,
                        got: coeffs.len(),
                    });
                }
            }
            DualRep::Holder { point, diff } => {
                if space.kind != SpaceKind::HolderPath {
                    return Err(Error::UnsupportedSpace("grid functional on a non-path space".into()));
                }
                let n = space.grid.len();
                let c = space.components();
                if let Some(a) = point {
                    if a.node >= n || a.direction.len() != c {
                        return Err(Error::invalid("point atom out of range"));
                    }
                }
                if let Some(d) = diff {
                    if d.lo >= d.hi || d.hi >= n || d.direction.len() != c {
                        return Err(Error::invalid("difference atom out of range"));
                    }
                }
            }
        }
        Ok(DualFunctional { space, rep })
    }

    pub fn null(space: Arc<SpaceDescriptor>) -> Self {
        DualFunctional {
            space,
            rep: DualRep::Null,
        }
    }

    pub fn space(&self) -> &Arc<SpaceDescriptor> {
        &self.space
    }

    pub fn rep(&self) -> &DualRep {
        &self.rep
    }

    pub fn is_null(&self) -> bool {
        matches!(self.rep, DualRep::Null)
    }

    /// Upper bound on the dual norm (exact for sequence coordinates).
    pub fn dual_norm(&self) -> f64 {
        match &self.rep {
            DualRep::Null => 0.0,
            DualRep::Sequence { coeffs } => {
                let (_, block) = self.space.sequence_layout().unwrap_or((0, 1));
                block_norm(coeffs, self.space.p_dual().unwrap_or(2.0), block)
            }
            DualRep::Holder { point, diff } => {
                let a = point.as_ref().map_or(0.0, |a| lp_norm(&a.direction, 2.0));
                let b = diff.as_ref().map_or(0.0, |d| lp_norm(&d.direction, 2.0));
                a.max(b)
            }
        }
    }

    /// Projection onto the dual unit ball.
    pub fn projected(&self) -> Self {
        let rep = match &self.rep {
            DualRep::Null => DualRep::Null,
            DualRep::Sequence { coeffs } => {
                let (_, block) = self.space.sequence_layout().unwrap_or((0, 1));
                let mut g = coeffs.clone();
                project_dual_ball(&mut g, self.space.p.unwrap_or(2.0), block);
                DualRep::Sequence { coeffs: g }
            }
            DualRep::Holder { point, diff } => {
                let shrink = |d: &[f64]| -> Vec<f64> {
                    let r = lp_norm(d, 2.0);
                    if r > 1.0 {
                        d.iter().map(|x| x / r).collect()
                    } else {
                        d.to_vec()
                    }
                };
                DualRep::Holder {
                    point: point.as_ref().map(|a| PointAtom {
                        node: a.node,
                        direction: shrink(&a.direction),
                    }),
                    diff: diff.as_ref().map(|d| DiffAtom {
                        lo: d.lo,
                        hi: d.hi,
                        direction: shrink(&d.direction),
                    }),
                }
            }
        };
        DualFunctional {
            space: self.space.clone(),
            rep,
        }
    }
}

/// Applies a functional to an element of the same space.
pub fn dual_pair(f: &DualFunctional, v: &BanachVector) -> Result<f64> {
    if !f.space.same_as(&v.space) {
        return Err(Error::SpaceMismatch("functional and vector live in different spaces".into()));
    }
    Ok(match &f.rep {
        DualRep::Null => 0.0,
        DualRep::Sequence { coeffs } => {
            let (w, _) = v.sequence_coords();
            coeffs.iter().zip(&w).map(|(a, b)| a * b).sum()
        }
        DualRep::Holder { point, diff } => holder_pair(&f.space, point.as_ref(), diff.as_ref(), &v.coeffs),
    })
}

pub(crate) fn holder_pair(
    space: &SpaceDescriptor,
    point: Option<&PointAtom>,
    diff: Option<&DiffAtom>,
    values: &[f64],
) -> f64 {
    let c = space.components();
    let mut out = 0.0;
    if let Some(a) = point {
        out += (0..c).map(|k| a.direction[k] * values[a.node * c + k]).sum::<f64>();
    }
    if let Some(d) = diff {
        let g = &space.grid;
        let delta = space.delta.unwrap_or(0.0);
        let denom = if delta == 0.0 { 1.0 } else { (g[d.hi] - g[d.lo]).powf(delta) };
        out += (0..c)
            .map(|k| d.direction[k] * (values[d.hi * c + k] - values[d.lo * c + k]))
            .sum::<f64>()
            / denom;
    }
    out
}

/// Norm-attaining functional of a single element (`⟨f, v⟩ = ‖v‖`, `‖f‖ ≤ 1`).
pub fn norming_functional(v: &BanachVector) -> DualFunctional {
    let s = v.space.clone();
    match s.kind {
        SpaceKind::HolderPath => {
            let c = s.components();
            let (mut best, mut node) = (-1.0, 0);
            for (i, ch) in v.coeffs.chunks(c).enumerate() {
                let r = lp_norm(ch, 2.0);
                if r > best {
                    best = r;
                    node = i;
                }
            }
            let unit = |x: &[f64]| -> Vec<f64> {
                let r = lp_norm(x, 2.0);
                if r > 0.0 {
                    x.iter().map(|a| a / r).collect()
                } else {
                    vec![0.0; x.len()]
                }
            };
            let point = PointAtom {
                node,
                direction: unit(&v.coeffs[node * c..(node + 1) * c]),
            };
            let (_, (lo, hi)) = holder_seminorm(&s.grid, &v.coeffs, c, s.delta.unwrap_or(0.0));
            let d: Vec<f64> = (0..c).map(|k| v.coeffs[hi * c + k] - v.coeffs[lo * c + k]).collect();
            let diff = DiffAtom {
                lo,
                hi,
                direction: unit(&d),
            };
            DualFunctional {
                space: s,
                rep: DualRep::Holder {
                    point: Some(point),
                    diff: if lo < hi { Some(diff) } else { None },
                },
            }
        }
        _ => {
            let (w, block) = v.sequence_coords();
            let g = dual_direction(&w, s.p.unwrap_or(2.0), block);
            DualFunctional {
                space: s,
                rep: DualRep::Sequence { coeffs: g },
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceRecord {
    kind: SpaceKind,
    #[serde(default)]
    p: Option<f64>,
    #[serde(default)]
    delta: Option<f64>,
    #[serde(default)]
    grid: Vec<f64>,
    #[serde(default)]
    boundary: Boundary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    components: Option<usize>,
}

impl SpaceRecord {
    fn from_space(s: &SpaceDescriptor) -> Self {
        SpaceRecord {
            kind: s.kind,
            p: s.p,
            delta: s.delta,
            grid: s.grid.clone(),
            boundary: s.boundary,
            len: (s.kind == SpaceKind::SequenceLp).then_some(s.extent),
            components: (s.kind == SpaceKind::HolderPath && s.extent != 1).then_some(s.extent),
        }
    }

    fn into_space(self, coeff_len: Option<usize>) -> Result<Arc<SpaceDescriptor>> {
        let need_p = || self.p.ok_or_else(|| Error::invalid("missing p"));
        match self.kind {
            SpaceKind::SequenceLp => {
                let len = self
                    .len
                    .or(coeff_len)
                    .ok_or_else(|| Error::invalid("sequence space needs a length"))?;
                SpaceDescriptor::sequence(len, need_p()?)
            }
            SpaceKind::FemW1p1d => SpaceDescriptor::fem1d(
                self.grid,
                need_p()?,
                if self.boundary == Boundary::None {
                    Boundary::DirichletLeftNeumannRight
                } else {
                    self.boundary
                },
            ),
            SpaceKind::FemW1p2d => SpaceDescriptor::fem2d(self.grid, need_p()?),
            SpaceKind::HolderPath => {
                SpaceDescriptor::holder(self.grid, self.delta.unwrap_or(0.0), self.components.unwrap_or(1))
            }
        }
    }
}

impl Serialize for SpaceDescriptor {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        SpaceRecord::from_space(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SpaceDescriptor {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rec = SpaceRecord::deserialize(deserializer)?;
        let s = rec.into_space(None).map_err(serde::de::Error::custom)?;
        Ok(Arc::try_unwrap(s).unwrap_or_else(|a| (*a).clone()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VectorRecord {
    #[serde(flatten)]
    space: SpaceRecordFlat,
    coeffs: Vec<f64>,
}

// `deny_unknown_fields` does not combine with `flatten`; the flat vector
// record repeats the descriptor fields instead.
#[derive(Serialize, Deserialize)]
struct SpaceRecordFlat {
    kind: SpaceKind,
    #[serde(default)]
    p: Option<f64>,
    #[serde(default)]
    delta: Option<f64>,
    #[serde(default)]
    grid: Vec<f64>,
    #[serde(default)]
    boundary: Boundary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    components: Option<usize>,
}

impl Serialize for BanachVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let r = SpaceRecord::from_space(&self.space);
        VectorRecord {
            space: SpaceRecordFlat {
                kind: r.kind,
                p: r.p,
                delta: r.delta,
                grid: r.grid,
                boundary: r.boundary,
                components: r.components,
            },
            coeffs: self.coeffs.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BanachVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rec = VectorRecord::deserialize(deserializer)?;
        let f = rec.space;
        let n = rec.coeffs.len();
        let space = SpaceRecord {
            kind: f.kind,
            p: f.p,
            delta: f.delta,
            grid: f.grid,
            boundary: f.boundary,
            len: None,
            components: f.components,
        }
        .into_space(Some(n))
        .map_err(serde::de::Error::custom)?;
        BanachVector::new(space, rec.coeffs).map_err(serde::de::Error::custom)
    }
}
