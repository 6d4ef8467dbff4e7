//! Rank-structured symmetric tensors `Σ_j c_j ⊗^k x_j`, small dense tensors,
//! and evaluation of injective / projective tensor norms.
//!
//! The symmetric injective norm `sup_{f ∈ B_{E'}} |Σ_j c_j f(x_j)^k|` is
//! evaluated by multi-start ascent over the dual unit ball, expressed in the
//! sequence coordinates of the space (see [`crate::spaces`]). Every value
//! returned by the ascent comes with the functional that attains it, so it
//! is a certified lower bound. Exact values are available for `k = 1` and,
//! through [`hilbert_k2_oracles`], for `k = 2` in Hilbert spaces.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spaces::{
    block_norm, conjugate_exponent, dual_direction, holder_norm, lp_norm, norming_functional,
    project_dual_ball, BanachVector, DiffAtom, DualFunctional, DualRep, PointAtom, SpaceDescriptor,
    SpaceKind,
};

/// `U = Σ_j c_j ⊗^k x_j` with all `x_j` in one space.
#[derive(Clone, Debug, PartialEq)]
pub struct SymmetricTensorRep {
    k: usize,
    space: Arc<SpaceDescriptor>,
    terms: Vec<(f64, BanachVector)>,
}

impl SymmetricTensorRep {
    pub fn new(k: usize, space: Arc<SpaceDescriptor>) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("tensor order k must be positive"));
        }
        Ok(SymmetricTensorRep {
            k,
            space,
            terms: Vec::new(),
        })
    }

    pub fn from_terms(k: usize, space: Arc<SpaceDescriptor>, terms: Vec<(f64, BanachVector)>) -> Result<Self> {
        let mut rep = Self::new(k, space)?;
        rep.terms.reserve(terms.len());
        for (c, x) in terms {
            rep.push(c, x)?;
        }
        Ok(rep)
    }

    /// The elementary tensor `⊗^k x`.
    pub fn elementary(k: usize, x: BanachVector) -> Result<Self> {
        let space = x.space().clone();
        Self::from_terms(k, space, vec![(1.0, x)])
    }

    pub fn push(&mut self, c: f64, x: BanachVector) -> Result<()> {
        if !self.space.same_as(x.space()) {
            return Err(Error::SpaceMismatch("tensor term lives in a different space".into()));
        }
        if !c.is_finite() || x.coeffs().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite tensor term".into()));
        }
        self.terms.push((c, x));
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn space(&self) -> &Arc<SpaceDescriptor> {
        &self.space
    }

    pub fn terms(&self) -> &[(f64, BanachVector)] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// `self − other` as a concatenated representation.
    pub fn difference(&self, other: &SymmetricTensorRep) -> Result<Self> {
        if self.k != other.k {
            return Err(Error::invalid(format!("tensor orders differ: {} vs {}", self.k, other.k)));
        }
        if !self.space.same_as(&other.space) {
            return Err(Error::SpaceMismatch("tensors live in different spaces".into()));
        }
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().map(|(c, x)| (-c, x.clone())));
        Ok(SymmetricTensorRep {
            k: self.k,
            space: self.space.clone(),
            terms,
        })
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        SymmetricTensorRep {
            k: self.k,
            space: self.space.clone(),
            terms: self.terms.iter().map(|(c, x)| (alpha * c, x.clone())).collect(),
        }
    }

    /// Drops terms with `|c_j| < tol`.
    pub fn compacted(mut self, tol: f64) -> Self {
        self.terms.retain(|(c, _)| c.abs() >= tol);
        self
    }

    /// Sorts terms into a canonical order (weight, then coefficients, by
    /// total order on the bit patterns), so that representations produced
    /// under different schedules compare equal.
    pub fn canonicalize(&mut self) {
        self.terms.sort_by(|(a, x), (b, y)| {
            a.total_cmp(b).then_with(|| {
                for (u, v) in x.coeffs().iter().zip(y.coeffs()) {
                    let o = u.total_cmp(v);
                    if o.is_ne() {
                        return o;
                    }
                }
                std::cmp::Ordering::Equal
            })
        });
    }

    /// Dense tensor of nodal coefficients, `Σ_j c_j x_j ⊗ ⋯ ⊗ x_j`.
    pub fn to_dense(&self) -> Result<DenseTensor> {
        let n = self.space.size();
        DenseTensor::from_rank_terms(self.k, n, self.terms.iter().map(|(c, x)| (*c, x.coeffs())))
    }
}

/// Upper bound `Σ_j |c_j| ‖x_j‖^k` on the symmetric projective norm.
pub fn projective_norm_upper(u: &SymmetricTensorRep) -> f64 {
    u.terms
        .iter()
        .map(|(c, x)| c.abs() * x.norm().powi(u.k as i32))
        .sum()
}

/// Maximum number of entries of a [`DenseTensor`].
pub const DENSE_LIMIT: usize = 1_000_000;

/// A small dense order-`k` tensor on `ℝ^n`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    k: usize,
    n: usize,
    entries: Vec<f64>,
}

fn dense_len(k: usize, n: usize) -> Result<usize> {
    let mut len: usize = 1;
    for _ in 0..k {
        len = len
            .checked_mul(n)
            .filter(|&l| l <= DENSE_LIMIT)
            .ok_or_else(|| Error::invalid(format!("dense tensor n^k = {n}^{k} exceeds {DENSE_LIMIT} entries")))?;
    }
    Ok(len)
}

impl DenseTensor {
    pub fn new(k: usize, n: usize, entries: Vec<f64>) -> Result<Self> {
        if k == 0 || n == 0 {
            return Err(Error::invalid("dense tensor needs k ≥ 1 and n ≥ 1"));
        }
        let len = dense_len(k, n)?;
        if entries.len() != len {
            return Err(Error::DimensionMismatch {
                expected: len,
                got: entries.len(),
            });
        }
        Ok(DenseTensor { k, n, entries })
    }

    pub fn zeros(k: usize, n: usize) -> Result<Self> {
        let len = dense_len(k, n)?;
        Self::new(k, n, vec![0.0; len])
    }

    /// `Σ_j c_j x_j^{⊗k}` for vectors of length `n`.
    pub fn from_rank_terms<'a>(k: usize, n: usize, terms: impl Iterator<Item = (f64, &'a [f64])>) -> Result<Self> {
        let mut t = Self::zeros(k, n)?;
        let mut outer = Vec::with_capacity(t.entries.len());
        for (c, x) in terms {
            if x.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: x.len() });
            }
            outer.clear();
            outer.push(c);
            for _ in 0..k {
                let prev = std::mem::take(&mut outer);
                outer.reserve(prev.len() * n);
                for a in &prev {
                    outer.extend(x.iter().map(|b| a * b));
                }
            }
            for (e, o) in t.entries.iter_mut().zip(&outer) {
                *e += o;
            }
        }
        Ok(t)
    }

    /// Elementary tensor `a_1 ⊗ ⋯ ⊗ a_k`.
    pub fn outer(vectors: &[&[f64]]) -> Result<Self> {
        let k = vectors.len();
        let n = vectors.first().map_or(0, |v| v.len());
        if vectors.iter().any(|v| v.len() != n) {
            return Err(Error::invalid("outer product of vectors with different lengths"));
        }
        let mut entries = vec![1.0];
        for v in vectors {
            entries = entries.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
        }
        Self::new(k, n, entries)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.entries[self.flat(index)]
    }

    fn flat(&self, index: &[usize]) -> usize {
        index.iter().fold(0, |acc, &i| acc * self.n + i)
    }

    fn unflat(&self, mut flat: usize, out: &mut [usize]) {
        for m in (0..self.k).rev() {
            out[m] = flat % self.n;
            flat /= self.n;
        }
    }

    /// `(1/k!) Σ_{σ ∈ S_k}` of the index-permuted tensor.
    ///
    /// Computed by averaging over the orbit of each multi-index (every
    /// distinct rearrangement occurs equally often among the `k!`
    /// permutations).
    pub fn symmetrize(&self) -> Result<Self> {
        if self.k > 8 {
            return Err(Error::invalid(format!(
                "symmetrization enumerates k! permutations; k = {} > 8 is refused",
                self.k
            )));
        }
        let len = self.entries.len();
        let mut idx = vec![0usize; self.k];
        let mut class = vec![0usize; len];
        for (f, c) in class.iter_mut().enumerate() {
            self.unflat(f, &mut idx);
            idx.sort_unstable();
            *c = self.flat(&idx);
        }
        let mut sum = vec![0.0; len];
        let mut count = vec![0usize; len];
        for f in 0..len {
            sum[class[f]] += self.entries[f];
            count[class[f]] += 1;
        }
        let entries = (0..len).map(|f| sum[class[f]] / count[class[f]] as f64).collect();
        Ok(DenseTensor {
            k: self.k,
            n: self.n,
            entries,
        })
    }

    pub fn sub(&self, other: &DenseTensor) -> Result<Self> {
        if self.k != other.k || self.n != other.n {
            return Err(Error::invalid("dense tensors of different shapes"));
        }
        Ok(DenseTensor {
            k: self.k,
            n: self.n,
            entries: self.entries.iter().zip(&other.entries).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &DenseTensor) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Contracts the last `k − 1` modes with `g`, leaving a vector.
    fn contract_tail(&self, g: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut cur = self.entries.clone();
        for _ in 1..self.k {
            cur = cur.chunks(n).map(|c| c.iter().zip(g).map(|(a, b)| a * b).sum()).collect();
        }
        cur
    }

    /// `T(g_1, …, g_k)` with mode `skip` left open (returns a vector of
    /// length `n`), or fully contracted when `skip` is `None` (length 1).
    pub fn multilinear(&self, gs: &[&[f64]], skip: Option<usize>) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; if skip.is_some() { n } else { 1 }];
        let mut idx = vec![0usize; self.k];
        for (f, &e) in self.entries.iter().enumerate() {
            if e == 0.0 {
                continue;
            }
            self.unflat(f, &mut idx);
            let mut prod = e;
            for (m, &i) in idx.iter().enumerate() {
                if Some(m) != skip {
                    prod *= gs[m][i];
                }
            }
            out[skip.map_or(0, |m| idx[m])] += prod;
        }
        out
    }

    /// Lower bound on the full injective norm
    /// `sup_{g_1..g_k ∈ B_{ℓ_{p'}}} |T(g_1, …, g_k)|` by alternating
    /// maximization (each step is exact in one functional).
    ///
    /// Starts from the symmetric ascent certificate (so the result is at
    /// least the symmetric injective value) plus random points.
    pub fn injective_full(&self, p: f64, opts: &InjectiveOptions) -> Result<f64> {
        let sym = self.injective_symmetric(p, opts)?;
        let n = self.n;
        let mut starts: Vec<Vec<Vec<f64>>> = Vec::new();
        starts.push(vec![sym.1.clone(); self.k]);
        for r in 0..opts.restarts {
            let mut rng = restart_rng(opts.seed ^ 0x5eed_f011, r);
            starts.push(
                (0..self.k)
                    .map(|_| {
                        let mut g: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
                        normalize_dual(&mut g, p, 1);
                        g
                    })
                    .collect(),
            );
        }
        let values: Vec<f64> = starts
            .into_par_iter()
            .map(|mut gs| {
                let mut best = 0.0f64;
                for _ in 0..opts.max_iter {
                    let prev = best;
                    for m in 0..self.k {
                        let refs: Vec<&[f64]> = gs.iter().map(|g| g.as_slice()).collect();
                        let h = self.multilinear(&refs, Some(m));
                        gs[m] = dual_direction(&h, p, 1);
                        best = best.max(lp_norm(&h, p));
                    }
                    if best - prev <= 1e-15 * best.max(1e-300) {
                        break;
                    }
                }
                best
            })
            .collect();
        Ok(values.into_iter().fold(sym.0, f64::max))
    }

    /// Symmetric injective value `sup_{g ∈ B_{ℓ_{p'}}} |T(g, …, g)|` by
    /// multi-start ascent (assumes `T` symmetric). Returns the value and the
    /// maximizing functional.
    pub fn injective_symmetric(&self, p: f64, opts: &InjectiveOptions) -> Result<(f64, Vec<f64>)> {
        let eval = Evaluator::Dense(self.clone());
        let inits = random_inits(self.n, 1, p, opts.restarts, opts.seed);
        let best = multi_start(&eval, self.k, p, 1, inits, opts);
        Ok((best.value, best.g))
    }
}

/// Settings of the multi-start dual-ball ascent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InjectiveOptions {
    pub restarts: usize,
    pub seed: u64,
    /// Relative stationarity tolerance.
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for InjectiveOptions {
    fn default() -> Self {
        InjectiveOptions {
            restarts: 32,
            seed: 0,
            grad_tol: 1e-7,
            max_iter: 20_000,
        }
    }
}

/// Result of a norm evaluation together with the attaining functional.
#[derive(Clone, Debug)]
pub struct NormReport {
    pub value: f64,
    pub certificate: DualFunctional,
    /// `true` when the value is exact, `false` for certified lower bounds.
    pub exact: bool,
    pub restarts: usize,
    pub seed: u64,
}

/// Symmetric injective norm with default options.
pub fn injective_norm(u: &SymmetricTensorRep) -> Result<NormReport> {
    injective_norm_with(u, &InjectiveOptions::default())
}

/// Symmetric injective norm `sup_{f ∈ B_{E'}} |Σ_j c_j f(x_j)^k|`.
pub fn injective_norm_with(u: &SymmetricTensorRep, opts: &InjectiveOptions) -> Result<NormReport> {
    let space = u.space.clone();
    let terms: Vec<&(f64, BanachVector)> = u.terms.iter().filter(|(c, _)| *c != 0.0).collect();
    let report = |value: f64, certificate: DualFunctional, exact: bool| NormReport {
        value,
        certificate,
        exact,
        restarts: opts.restarts,
        seed: opts.seed,
    };
    if terms.is_empty() {
        return Ok(report(0.0, DualFunctional::null(space), true));
    }
    if u.k == 1 {
        let mut sum = BanachVector::zeros(space.clone());
        for (c, x) in &terms {
            sum = sum.add_scaled(*c, x)?;
        }
        let value = sum.norm();
        return Ok(report(value, norming_functional(&sum), true));
    }
    if space.kind() == SpaceKind::HolderPath {
        let (value, cert) = holder_injective(u.k, &space, &terms, opts)?;
        return Ok(report(value, cert, false));
    }
    let (n, block) = space
        .sequence_layout()
        .ok_or_else(|| Error::UnsupportedSpace(format!("{:?}", space.kind())))?;
    let p = space.p().unwrap_or(2.0);
    let mut rows = Vec::with_capacity(terms.len() * n);
    let mut weights = Vec::with_capacity(terms.len());
    for (c, x) in &terms {
        let (w, _) = x.sequence_coords();
        rows.extend_from_slice(&w);
        weights.push(*c);
    }
    let r = weights.len();
    let features = Features { n, rows, weights };
    let inits = term_inits(&features, u.k, p, block, opts.restarts / 2)
        .into_iter()
        .chain(random_inits(n, block, p, opts.restarts - opts.restarts / 2, opts.seed))
        .collect();
    let use_dense = dense_len(u.k, n).is_ok() && n.pow(u.k as u32 - 1) < r;
    let eval = if use_dense {
        Evaluator::Dense(DenseTensor::from_rank_terms(u.k, n, features.iter())?)
    } else {
        Evaluator::Rank(features)
    };
    let best = multi_start(&eval, u.k, p, block, inits, opts);
    let cert = DualFunctional::new(space, DualRep::Sequence { coeffs: best.g })?;
    Ok(report(best.value, cert, false))
}

struct Features {
    n: usize,
    rows: Vec<f64>,
    weights: Vec<f64>,
}

impl Features {
    fn iter(&self) -> impl Iterator<Item = (f64, &[f64])> {
        self.weights.iter().copied().zip(self.rows.chunks(self.n))
    }
}

enum Evaluator {
    Rank(Features),
    Dense(DenseTensor),
}

impl Evaluator {
    /// Returns `F(g)` and writes `∇F(g)` into `grad`.
    fn value_grad(&self, k: usize, g: &[f64], grad: &mut [f64]) -> f64 {
        match self {
            Evaluator::Rank(f) => {
                grad.iter_mut().for_each(|v| *v = 0.0);
                let mut value = 0.0;
                for (c, w) in f.iter() {
                    let t: f64 = w.iter().zip(g).map(|(a, b)| a * b).sum();
                    let tk1 = t.powi(k as i32 - 1);
                    value += c * tk1 * t;
                    let s = k as f64 * c * tk1;
                    if s != 0.0 {
                        for (gr, wi) in grad.iter_mut().zip(w) {
                            *gr += s * wi;
                        }
                    }
                }
                value
            }
            Evaluator::Dense(t) => {
                let v = t.contract_tail(g);
                for (gr, vi) in grad.iter_mut().zip(&v) {
                    *gr = k as f64 * vi;
                }
                v.iter().zip(g).map(|(a, b)| a * b).sum()
            }
        }
    }

    fn value(&self, k: usize, g: &[f64]) -> f64 {
        match self {
            Evaluator::Rank(f) => f
                .iter()
                .map(|(c, w)| c * w.iter().zip(g).map(|(a, b)| a * b).sum::<f64>().powi(k as i32))
                .sum(),
            Evaluator::Dense(t) => t.contract_tail(g).iter().zip(g).map(|(a, b)| a * b).sum(),
        }
    }
}

fn restart_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64 + 1);
    rng
}

/// Scales `g` onto the unit sphere of `ℓ_{p'}` (`p > 1`) or clamps it into
/// the unit ball (`p = 1`).
fn normalize_dual(g: &mut [f64], p: f64, block: usize) {
    if p == 1.0 {
        project_dual_ball(g, p, block);
        return;
    }
    let nrm = block_norm(g, conjugate_exponent(p), block);
    if nrm > 0.0 {
        g.iter_mut().for_each(|v| *v /= nrm);
    }
}

fn term_inits(f: &Features, k: usize, p: f64, block: usize, count: usize) -> Vec<Vec<f64>> {
    let mut order: Vec<(usize, f64)> = f
        .rows
        .chunks(f.n)
        .zip(&f.weights)
        .enumerate()
        .map(|(j, (w, c))| (j, c.abs() * block_norm(w, p, block).powi(k as i32)))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order
        .into_iter()
        .take(count)
        .filter(|(_, s)| *s > 0.0)
        .map(|(j, _)| dual_direction(&f.rows[j * f.n..(j + 1) * f.n], p, block))
        .collect()
}

fn random_inits(n: usize, block: usize, p: f64, count: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..count)
        .map(|r| {
            let mut rng = restart_rng(seed, r);
            let mut g: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            normalize_dual(&mut g, p, block);
            g
        })
        .collect()
}

struct Ascent {
    value: f64,
    g: Vec<f64>,
}

/// Runs the ascent from every start (both signs for even `k`) and returns
/// the first maximum in start order.
fn multi_start(eval: &Evaluator, k: usize, p: f64, block: usize, inits: Vec<Vec<f64>>, opts: &InjectiveOptions) -> Ascent {
    let signs: &[f64] = if k % 2 == 0 { &[1.0, -1.0] } else { &[1.0] };
    let jobs: Vec<(Vec<f64>, f64)> = inits
        .into_iter()
        .flat_map(|g| signs.iter().map(move |&s| (g.clone(), s)))
        .collect();
    let results: Vec<Ascent> = jobs
        .into_par_iter()
        .map(|(g, s)| {
            let (v, g) = if p == 1.0 {
                ascend_box(eval, k, block, g, s, opts)
            } else {
                ascend_sphere(eval, k, p, block, g, s, opts)
            };
            Ascent { value: v, g }
        })
        .collect();
    let mut best = Ascent {
        value: 0.0,
        g: vec![0.0; results.first().map_or(0, |a| a.g.len())],
    };
    let mut found = false;
    for a in results {
        if !found || a.value > best.value {
            best = a;
            found = true;
        }
    }
    best.value = best.value.max(0.0);
    best
}

/// Maximizes `s·F` on the unit sphere of `ℓ_{p'}` (`1 < p < ∞`) by damped
/// dual power steps `g ← J(s∇F(g) + σ‖∇F‖ d(g))` with an extrapolating line
/// search, until the Lagrange residual `‖s∇F − k sF d(g)‖_p` is below
/// `grad_tol · ‖∇F‖_p`. Returns `|F(g)|` at the final point.
fn ascend_sphere(eval: &Evaluator, k: usize, p: f64, block: usize, mut g: Vec<f64>, s: f64, opts: &InjectiveOptions) -> (f64, Vec<f64>) {
    let pd = conjugate_exponent(p);
    let n = g.len();
    let mut grad = vec![0.0; n];
    let mut f = s * eval.value_grad(k, &g, &mut grad);
    let mut sigma = 0.0f64;
    let mut h = vec![0.0; n];
    for _ in 0..opts.max_iter {
        grad.iter_mut().for_each(|v| *v *= s);
        let d = dual_direction(&g, pd, block);
        let scale = block_norm(&grad, p, block);
        if scale == 0.0 {
            break;
        }
        for i in 0..n {
            h[i] = grad[i] - k as f64 * f * d[i];
        }
        if block_norm(&h, p, block) <= opts.grad_tol * scale {
            break;
        }
        let mut accepted = None;
        while sigma <= 1e12 {
            for i in 0..n {
                h[i] = grad[i] + sigma * scale * d[i];
            }
            let cand = dual_direction(&h, p, block);
            let fc = s * eval.value(k, &cand);
            if fc > f {
                accepted = Some((cand, fc));
                break;
            }
            sigma = if sigma == 0.0 { 1e-3 } else { sigma * 4.0 };
        }
        let Some((mut cand, mut fc)) = accepted else {
            break;
        };
        // a unit shift breaks the near-periodic steps that a small shift
        // takes when extreme values of opposite sign nearly cancel
        if sigma < 1.0 {
            for i in 0..n {
                h[i] = grad[i] + scale * d[i];
            }
            let alt = dual_direction(&h, p, block);
            let fa = s * eval.value(k, &alt);
            if fa > fc {
                cand = alt;
                fc = fa;
            }
        }
        // extrapolate along the accepted step while it keeps improving
        let mut beta = 2.0;
        while beta <= 1024.0 {
            let mut e: Vec<f64> = g.iter().zip(&cand).map(|(a, b)| a + beta * (b - a)).collect();
            normalize_dual(&mut e, p, block);
            let fe = s * eval.value(k, &e);
            if fe > fc {
                cand = e;
                fc = fe;
                beta *= 2.0;
            } else {
                break;
            }
        }
        g = cand;
        sigma = if sigma < 1e-6 { 0.0 } else { sigma / 4.0 };
        f = s * eval.value_grad(k, &g, &mut grad);
    }
    (f, g)
}

/// Projected gradient ascent of `s·F` over the product of Euclidean unit
/// balls (`p = 1`, dual `ℓ_∞(ℓ_2)`), with adaptive step length.
fn ascend_box(eval: &Evaluator, k: usize, block: usize, mut g: Vec<f64>, s: f64, opts: &InjectiveOptions) -> (f64, Vec<f64>) {
    let n = g.len();
    let mut grad = vec![0.0; n];
    let mut f = s * eval.value_grad(k, &g, &mut grad);
    let mut step = 1.0;
    for _ in 0..opts.max_iter {
        grad.iter_mut().for_each(|v| *v *= s);
        let scale = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            break;
        }
        let mut probe: Vec<f64> = g.iter().zip(&grad).map(|(a, b)| a + b / scale).collect();
        project_dual_ball(&mut probe, 1.0, block);
        let res = probe.iter().zip(&g).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if res <= opts.grad_tol {
            break;
        }
        let mut moved = false;
        while step > 1e-16 {
            let mut cand: Vec<f64> = g.iter().zip(&grad).map(|(a, b)| a + step * b / scale).collect();
            project_dual_ball(&mut cand, 1.0, block);
            let fc = s * eval.value(k, &cand);
            if fc > f {
                g = cand;
                step *= 2.0;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
        f = s * eval.value_grad(k, &g, &mut grad);
    }
    (f, g)
}

/// Injective lower bound on path spaces over the grid-functional family
/// `u·δ_{t_i} + w·(δ_{t_b} − δ_{t_a})/|t_b − t_a|^δ`.
///
/// The most promising nodes and node pairs are screened by
/// `Σ_j |c_j| |·|^k`; for each combination the coefficients `(u, w)` in the
/// product of unit balls are optimized by projected ascent.
fn holder_injective(
    k: usize,
    space: &Arc<SpaceDescriptor>,
    terms: &[&(f64, BanachVector)],
    opts: &InjectiveOptions,
) -> Result<(f64, DualFunctional)> {
    const TOP: usize = 6;
    let grid = space.grid();
    let c = space.components();
    let n = grid.len();
    let delta = space.delta().unwrap_or(0.0);
    let point_score = |i: usize| -> f64 {
        terms
            .iter()
            .map(|(w, x)| w.abs() * lp_norm(&x.coeffs()[i * c..(i + 1) * c], 2.0).powi(k as i32))
            .sum()
    };
    let quotient = |x: &BanachVector, a: usize, b: usize| -> Vec<f64> {
        let denom = if delta == 0.0 { 1.0 } else { (grid[b] - grid[a]).powf(delta) };
        (0..c).map(|m| (x.coeffs()[b * c + m] - x.coeffs()[a * c + m]) / denom).collect()
    };
    let pair_score = |a: usize, b: usize| -> f64 {
        terms
            .iter()
            .map(|(w, x)| w.abs() * lp_norm(&quotient(x, a, b), 2.0).powi(k as i32))
            .sum()
    };
    let mut points: Vec<(usize, f64)> = (0..n).map(|i| (i, point_score(i))).collect();
    points.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    points.truncate(TOP);
    let mut pairs: Vec<((usize, usize), f64)> = (0..n)
        .flat_map(|a| ((a + 1)..n).map(move |b| (a, b)))
        .map(|(a, b)| ((a, b), pair_score(a, b)))
        .collect();
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    pairs.truncate(TOP);

    let mut combos: Vec<(Option<usize>, Option<(usize, usize)>)> = Vec::new();
    combos.extend(points.iter().map(|(i, _)| (Some(*i), None)));
    combos.extend(pairs.iter().map(|(ab, _)| (None, Some(*ab))));
    for (i, _) in &points {
        for (ab, _) in &pairs {
            combos.push((Some(*i), Some(*ab)));
        }
    }
    let small = InjectiveOptions {
        restarts: 4,
        ..opts.clone()
    };
    let results: Vec<(f64, Vec<f64>)> = combos
        .par_iter()
        .map(|(pt, pr)| {
            let mut rows = Vec::new();
            let mut weights = Vec::new();
            for (w, x) in terms {
                if let Some(i) = pt {
                    rows.extend_from_slice(&x.coeffs()[i * c..(i + 1) * c]);
                }
                if let Some((a, b)) = pr {
                    rows.extend(quotient(x, *a, *b));
                }
                weights.push(*w);
            }
            let dim = rows.len() / weights.len();
            let features = Features { n: dim, rows, weights };
            let mut inits = term_inits(&features, k, 1.0, c, 2);
            inits.extend(random_inits(dim, c, 1.0, small.restarts, opts.seed));
            let best = multi_start(&Evaluator::Rank(features), k, 1.0, c, inits, &small);
            (best.value, best.g)
        })
        .collect();
    let mut best = 0usize;
    for (i, r) in results.iter().enumerate() {
        if r.0 > results[best].0 {
            best = i;
        }
    }
    let (value, g) = &results[best];
    let (pt, pr) = combos[best];
    let mut off = 0;
    let point = pt.map(|node| {
        off = c;
        PointAtom {
            node,
            direction: g[..c].to_vec(),
        }
    });
    let diff = pr.map(|(lo, hi)| DiffAtom {
        lo,
        hi,
        direction: g[off..off + c].to_vec(),
    });
    let cert = DualFunctional::new(space.clone(), DualRep::Holder { point, diff })?;
    Ok((*value, cert))
}

/// Exact Hilbert-space norms of `U = Σ_j c_j x_j ⊗ x_j` (`k = 2`, `p = 2`):
/// `(spectral, nuclear) = (max |λ|, Σ |λ|)` of `A = Σ_j c_j x_j x_jᵀ` in
/// sequence coordinates. These equal `‖U‖_ε = ‖U‖_{ε_s}` and
/// `‖U‖_π = ‖U‖_{π_s}`.
pub fn hilbert_k2_oracles(u: &SymmetricTensorRep) -> Result<(f64, f64)> {
    if u.k != 2 {
        return Err(Error::invalid(format!("Hilbert oracles need k = 2, got k = {}", u.k)));
    }
    let eig = hilbert_eigenvalues(u)?;
    Ok(spectral_nuclear(&eig))
}

fn spectral_nuclear(eig: &[f64]) -> (f64, f64) {
    let spectral = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let nuclear = eig.iter().map(|v| v.abs()).sum();
    (spectral, nuclear)
}

fn check_hilbert(space: &SpaceDescriptor) -> Result<usize> {
    let (n, _) = space
        .sequence_layout()
        .filter(|_| space.p() == Some(2.0))
        .ok_or_else(|| Error::UnsupportedSpace("Hilbert oracles need p = 2 sequence coordinates".into()))?;
    Ok(n)
}

/// Nonzero-relevant eigenvalues of `Σ_j c_j w_j w_jᵀ`.
fn hilbert_eigenvalues(u: &SymmetricTensorRep) -> Result<Vec<f64>> {
    let n = check_hilbert(&u.space)?;
    let terms: Vec<(f64, Vec<f64>)> = u
        .terms
        .iter()
        .filter(|(c, _)| *c != 0.0)
        .map(|(c, x)| (*c, x.sequence_coords().0))
        .collect();
    let r = terms.len();
    if r == 0 {
        return Ok(vec![0.0]);
    }
    // all terms supported on single coordinates: the matrix is diagonal
    let mut diag = vec![0.0; n];
    let mut diagonal = true;
    for (c, w) in &terms {
        let mut nz = w.iter().enumerate().filter(|(_, v)| **v != 0.0);
        match (nz.next(), nz.next()) {
            (None, _) => {}
            (Some((i, v)), None) => diag[i] += c * v * v,
            _ => {
                diagonal = false;
                break;
            }
        }
    }
    if diagonal {
        return Ok(diag);
    }
    if r < n {
        // A = Wᵀ C W with Wᵀ = QR: the nonzero spectrum is that of R C Rᵀ
        let wt = DMatrix::from_fn(n, r, |i, j| terms[j].1[i]);
        let rmat = wt.qr().r();
        let c = DMatrix::from_diagonal(&DVector::from_iterator(r, terms.iter().map(|t| t.0)));
        let small = &rmat * c * rmat.transpose();
        return Ok(small.symmetric_eigenvalues().iter().copied().collect());
    }
    let mut gram = HilbertGram::zeros(u.space.clone())?;
    for (c, w) in &terms {
        gram.add_coords(*c, w);
    }
    Ok(gram.eigenvalues())
}

/// Dense matrix `A = Σ c_j w_j w_jᵀ` of an order-2 tensor in a `p = 2`
/// space, in sequence coordinates. Used to accumulate large second-moment
/// estimates without keeping every sample.
#[derive(Clone, Debug)]
pub struct HilbertGram {
    space: Arc<SpaceDescriptor>,
    matrix: DMatrix<f64>,
}

impl HilbertGram {
    pub fn zeros(space: Arc<SpaceDescriptor>) -> Result<Self> {
        let n = check_hilbert(&space)?;
        Ok(HilbertGram {
            space,
            matrix: DMatrix::zeros(n, n),
        })
    }

    pub fn from_rep(u: &SymmetricTensorRep) -> Result<Self> {
        if u.k != 2 {
            return Err(Error::invalid("Gram matrices represent order-2 tensors"));
        }
        let mut g = Self::zeros(u.space.clone())?;
        for (c, x) in &u.terms {
            g.add(*c, x)?;
        }
        Ok(g)
    }

    pub fn space(&self) -> &Arc<SpaceDescriptor> {
        &self.space
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Adds `c · x ⊗ x`.
    pub fn add(&mut self, c: f64, x: &BanachVector) -> Result<()> {
        if !self.space.same_as(x.space()) {
            return Err(Error::SpaceMismatch("Gram update from a different space".into()));
        }
        let (w, _) = x.sequence_coords();
        self.add_coords(c, &w);
        Ok(())
    }

    fn add_coords(&mut self, c: f64, w: &[f64]) {
        let v = DVector::from_column_slice(w);
        self.matrix.ger(c, &v, &v, 1.0);
    }

    /// `self += alpha · W Wᵀ` for sequence coordinates stored as columns.
    pub(crate) fn add_columns(&mut self, alpha: f64, w: &DMatrix<f64>) {
        self.matrix.gemm(alpha, w, &w.transpose(), 1.0);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.matrix *= alpha;
    }

    /// `self += alpha · other` (same space).
    pub fn add_gram(&mut self, alpha: f64, other: &HilbertGram) -> Result<()> {
        if !self.space.same_as(&other.space) {
            return Err(Error::SpaceMismatch("Gram matrices of different spaces".into()));
        }
        self.matrix += &other.matrix * alpha;
        Ok(())
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let sym = (&self.matrix + self.matrix.transpose()) * 0.5;
        sym.symmetric_eigenvalues().iter().copied().collect()
    }

    /// `(spectral, nuclear)` norms.
    pub fn norms(&self) -> (f64, f64) {
        spectral_nuclear(&self.eigenvalues())
    }

    /// Re-expresses the tensor on a refined nested 1D grid. Slopes are
    /// inherited by child elements, so sequence coordinates map by
    /// `w_child = (h_child / h_parent)^{1/2} w_parent`.
    pub fn prolongate(&self, target: &Arc<SpaceDescriptor>) -> Result<HilbertGram> {
        if self.space.same_as(target) {
            return Ok(self.clone());
        }
        if self.space.kind() != SpaceKind::FemW1p1d || target.kind() != SpaceKind::FemW1p1d {
            return Err(Error::UnsupportedSpace("Gram prolongation is implemented for 1D FEM spaces".into()));
        }
        check_hilbert(target)?;
        let cg = self.space.grid();
        let fg = target.grid();
        let mut parent = Vec::with_capacity(fg.len() - 1);
        let mut weight = Vec::with_capacity(fg.len() - 1);
        for w in fg.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            let e = crate::spaces::locate(cg, mid);
            let (a, b) = (cg[e], cg[e + 1]);
            let tol = 1e-12 * (b - a);
            if w[0] < a - tol || w[1] > b + tol {
                return Err(Error::SpaceMismatch("target grid does not refine the source grid".into()));
            }
            parent.push(e);
            weight.push(((w[1] - w[0]) / (b - a)).sqrt());
        }
        let nf = parent.len();
        let a = &self.matrix;
        let matrix = DMatrix::from_fn(nf, nf, |i, j| weight[i] * weight[j] * a[(parent[i], parent[j])]);
        Ok(HilbertGram {
            space: target.clone(),
            matrix,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TermRecord {
    c: f64,
    coeffs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    k: usize,
    space: SpaceDescriptor,
    terms: Vec<TermRecord>,
}

impl Serialize for SymmetricTensorRep {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        TensorRecord {
            k: self.k,
            space: (*self.space).clone(),
            terms: self
                .terms
                .iter()
                .map(|(c, x)| TermRecord {
                    c: *c,
                    coeffs: x.coeffs().to_vec(),
                })
                .collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SymmetricTensorRep {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let rec = TensorRecord::deserialize(deserializer)?;
        let space = Arc::new(rec.space);
        let terms = rec
            .terms
            .into_iter()
            .map(|t| BanachVector::new(space.clone(), t.coeffs).map(|x| (t.c, x)))
            .collect::<Result<Vec<_>>>()
            .map_err(D::Error::custom)?;
        SymmetricTensorRep::from_terms(rec.k, space, terms).map_err(D::Error::custom)
    }
}

/// Holder norm helper re-exported for path tensors with `k = 1`.
pub fn path_norm(x: &BanachVector) -> f64 {
    let s = x.space();
    holder_norm(s.grid(), x.coeffs(), s.components(), s.delta().unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spaces::{dual_pair, uniform_grid, Boundary};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn basis(n: usize, i: usize, p: f64) -> BanachVector {
        let mut c = vec![0.0; n];
        c[i] = 1.0;
        BanachVector::new(SpaceDescriptor::sequence(n, p).unwrap(), c).unwrap()
    }

    fn diag_rep(lambda: &[f64], p: f64) -> SymmetricTensorRep {
        let n = lambda.len();
        let space = SpaceDescriptor::sequence(n, p).unwrap();
        let terms = lambda
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let mut c = vec![0.0; n];
                c[i] = 1.0;
                (*l, BanachVector::new(space.clone(), c).unwrap())
            })
            .collect();
        SymmetricTensorRep::from_terms(2, space, terms).unwrap()
    }

    fn random_rep(rng: &mut ChaCha8Rng, k: usize, n: usize, r: usize, p: f64) -> SymmetricTensorRep {
        let space = SpaceDescriptor::sequence(n, p).unwrap();
        let terms = (0..r)
            .map(|_| {
                let c: f64 = StandardNormal.sample(rng);
                let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
                (c, BanachVector::new(space.clone(), x).unwrap())
            })
            .collect();
        SymmetricTensorRep::from_terms(k, space, terms).unwrap()
    }

    /// `|Σ c_j f(x_j)^k|` for the certificate.
    fn certificate_value(u: &SymmetricTensorRep, f: &DualFunctional) -> f64 {
        u.terms()
            .iter()
            .map(|(c, x)| c * dual_pair(f, x).unwrap().powi(u.k() as i32))
            .sum::<f64>()
            .abs()
    }

    #[test]
    fn symmetrize_elementary_pair() {
        let t = DenseTensor::outer(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let s = t.symmetrize().unwrap();
        assert_eq!(s.entries(), &[0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn symmetrize_order_three() {
        let e1 = [1.0, 0.0];
        let e2 = [0.0, 1.0];
        let t = DenseTensor::outer(&[&e1, &e1, &e2]).unwrap();
        let s = t.symmetrize().unwrap();
        // brute force over S_3
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    let idx = [a, b, c];
                    let avg: f64 = perms
                        .iter()
                        .map(|p| t.get(&[idx[p[0]], idx[p[1]], idx[p[2]]]))
                        .sum::<f64>()
                        / 6.0;
                    assert_relative_eq!(s.get(&idx), avg, epsilon = 1e-15);
                }
            }
        }
        assert_relative_eq!(s.get(&[0, 0, 1]), 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(s.get(&[1, 0, 0]), 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn symmetrize_is_idempotent_and_refuses_large_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = DenseTensor::new(3, 3, (0..27).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let s = t.symmetrize().unwrap();
        assert_eq!(s.symmetrize().unwrap(), s);
        assert!(DenseTensor::zeros(9, 2).unwrap().symmetrize().is_err());
    }

    #[test]
    fn dense_size_limit() {
        assert!(DenseTensor::zeros(3, 100).is_ok());
        assert!(DenseTensor::zeros(3, 101).is_err());
    }

    #[test]
    fn diagonal_injective_and_projective() {
        let u = diag_rep(&[1.0, -2.0, 0.5], 2.0);
        let r = injective_norm(&u).unwrap();
        assert_relative_eq!(r.value, 2.0, max_relative = 1e-10);
        assert_relative_eq!(certificate_value(&u, &r.certificate), r.value, max_relative = 1e-12);
        assert_relative_eq!(projective_norm_upper(&u), 3.5, epsilon = 1e-15);
        let (s, nuc) = hilbert_k2_oracles(&u).unwrap();
        assert_relative_eq!(s, 2.0, epsilon = 1e-15);
        assert_relative_eq!(nuc, 3.5, epsilon = 1e-15);
    }

    #[test]
    fn uniform_diagonal_oracles() {
        let n = 7;
        let u = diag_rep(&vec![1.0 / n as f64; n], 2.0);
        let (s, nuc) = hilbert_k2_oracles(&u).unwrap();
        assert_relative_eq!(s, 1.0 / n as f64, epsilon = 1e-15);
        assert_relative_eq!(nuc, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn rank_one_oracles() {
        let space = SpaceDescriptor::sequence(3, 2.0).unwrap();
        let x = BanachVector::new(space, vec![1.0, 2.0, -2.0]).unwrap();
        let u = SymmetricTensorRep::elementary(2, x).unwrap();
        let (s, nuc) = hilbert_k2_oracles(&u).unwrap();
        assert_relative_eq!(s, 9.0, max_relative = 1e-13);
        assert_relative_eq!(nuc, 9.0, max_relative = 1e-13);
        assert_relative_eq!(projective_norm_upper(&u), 9.0, max_relative = 1e-13);
    }

    #[test]
    fn oracles_reject_wrong_order_or_exponent() {
        let u = diag_rep(&[1.0, 2.0], 3.0);
        assert!(matches!(hilbert_k2_oracles(&u), Err(Error::UnsupportedSpace(_))));
        let x = basis(2, 0, 2.0);
        let u3 = SymmetricTensorRep::elementary(3, x).unwrap();
        assert!(hilbert_k2_oracles(&u3).is_err());
    }

    #[test]
    fn zero_weights_give_zero() {
        let u = diag_rep(&[0.0, 0.0], 2.0);
        assert_eq!(projective_norm_upper(&u), 0.0);
        let r = injective_norm(&u).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.certificate.is_null());
    }

    #[test]
    fn order_one_is_vector_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in [1.0, 1.5, 3.0] {
            let u = random_rep(&mut rng, 1, 5, 4, p);
            let mut sum = BanachVector::zeros(u.space().clone());
            for (c, x) in u.terms() {
                sum = sum.add_scaled(*c, x).unwrap();
            }
            let r = injective_norm(&u).unwrap();
            assert!(r.exact);
            assert_relative_eq!(r.value, sum.norm(), max_relative = 1e-14);
            assert_relative_eq!(certificate_value(&u, &r.certificate), r.value, max_relative = 1e-12);
        }
    }

    #[test]
    fn random_hilbert_matches_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let u = random_rep(&mut rng, 2, 4, 6, 2.0);
            let (spec, _) = hilbert_k2_oracles(&u).unwrap();
            let r = injective_norm(&u).unwrap();
            assert!((r.value - spec).abs() <= 1e-6 * spec, "{} vs {}", r.value, spec);
        }
    }

    #[test]
    fn low_rank_and_gram_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = random_rep(&mut rng, 2, 10, 3, 2.0);
        let lo = hilbert_k2_oracles(&u).unwrap();
        let gram = HilbertGram::from_rep(&u).unwrap().norms();
        assert_relative_eq!(lo.0, gram.0, max_relative = 1e-12);
        assert_relative_eq!(lo.1, gram.1, max_relative = 1e-12);
    }

    #[test]
    fn gram_prolongation_preserves_norms() {
        let coarse = SpaceDescriptor::fem1d_uniform(1.0, 4, 2.0, Boundary::DirichletLeftNeumannRight).unwrap();
        let fine = SpaceDescriptor::fem1d_uniform(1.0, 16, 2.0, Boundary::DirichletLeftNeumannRight).unwrap();
        let a = BanachVector::new(coarse.clone(), vec![0.0, 0.4, 0.1, -0.3, 0.2]).unwrap();
        let b = BanachVector::new(coarse.clone(), vec![0.0, -0.2, 0.5, 0.6, 0.0]).unwrap();
        let u = SymmetricTensorRep::from_terms(2, coarse, vec![(1.5, a.clone()), (-0.7, b.clone())]).unwrap();
        let g = HilbertGram::from_rep(&u).unwrap().prolongate(&fine).unwrap();
        let uf = SymmetricTensorRep::from_terms(
            2,
            fine.clone(),
            vec![
                (1.5, crate::spaces::interpolate(&a, &fine).unwrap()),
                (-0.7, crate::spaces::interpolate(&b, &fine).unwrap()),
            ],
        )
        .unwrap();
        let direct = HilbertGram::from_rep(&uf).unwrap();
        assert!((g.matrix() - direct.matrix()).abs().max() < 1e-13);
    }

    #[test]
    fn lp_injective_is_below_projective_and_certified() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (k, p) in [(2, 1.5), (3, 3.0), (2, 1.0), (3, 1.2), (4, 2.5)] {
            let u = random_rep(&mut rng, k, 5, 4, p);
            let r = injective_norm(&u).unwrap();
            assert!(r.value <= projective_norm_upper(&u) * (1.0 + 1e-12));
            assert!(r.certificate.dual_norm() <= 1.0 + 1e-12);
            assert_relative_eq!(certificate_value(&u, &r.certificate), r.value, max_relative = 1e-10);
        }
    }

    #[test]
    fn injective_is_homogeneous_in_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u = random_rep(&mut rng, 3, 4, 5, 2.0);
        let a = injective_norm(&u).unwrap().value;
        let b = injective_norm(&u.scaled(-3.0)).unwrap().value;
        assert_relative_eq!(b, 3.0 * a, max_relative = 1e-9);
    }

    #[test]
    fn full_injective_within_equivalence_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for k in [2usize, 3] {
            let u = random_rep(&mut rng, k, 3, 4, 2.0);
            let opts = InjectiveOptions::default();
            let es = injective_norm_with(&u, &opts).unwrap().value;
            let d = u.to_dense().unwrap();
            let full = d.injective_full(2.0, &opts).unwrap();
            let kf = (1..=k).product::<usize>() as f64;
            let c = (k as f64).powi(k as i32) / kf;
            assert!(es <= full * (1.0 + 1e-9), "k={k}: {es} > {full}");
            assert!(full <= c * es * (1.0 + 1e-9), "k={k}: {full} > {c}·{es}");
        }
    }

    #[test]
    fn dense_and_rank_evaluators_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let u = random_rep(&mut rng, 3, 3, 20, 2.0);
        let dense_path = injective_norm(&u).unwrap().value;
        let d = u.to_dense().unwrap();
        let (sym, _) = d.injective_symmetric(2.0, &InjectiveOptions::default()).unwrap();
        assert_relative_eq!(dense_path, sym, max_relative = 1e-8);
    }

    #[test]
    fn fem_injective_uses_sequence_coordinates() {
        let s = SpaceDescriptor::fem1d_uniform(1.0, 2, 2.0, Boundary::DirichletLeftNeumannRight).unwrap();
        let v = BanachVector::new(s, vec![0.0, 1.0, 0.0]).unwrap();
        let u = SymmetricTensorRep::elementary(2, v.clone()).unwrap();
        let r = injective_norm(&u).unwrap();
        assert_relative_eq!(r.value, v.norm().powi(2), max_relative = 1e-10);
        let (spec, _) = hilbert_k2_oracles(&u).unwrap();
        assert_relative_eq!(spec, 4.0, max_relative = 1e-12);
    }

    #[test]
    fn holder_elementary_tensor_attains_norm_power() {
        let s = SpaceDescriptor::holder(uniform_grid(1.0, 8).unwrap(), 0.5, 1).unwrap();
        let coeffs: Vec<f64> = s.grid().iter().map(|t| t * t - 0.3 * t).collect();
        let x = BanachVector::new(s, coeffs).unwrap();
        let u = SymmetricTensorRep::elementary(2, x.clone()).unwrap();
        let r = injective_norm(&u).unwrap();
        assert!(!r.exact);
        assert_relative_eq!(r.value, x.norm().powi(2), max_relative = 1e-9);
        assert_relative_eq!(certificate_value(&u, &r.certificate), r.value, max_relative = 1e-10);
        assert!(r.value <= projective_norm_upper(&u) * (1.0 + 1e-12));
    }

    #[test]
    fn tensor_json_round_trip() {
        let u = diag_rep(&[1.0, -2.0], 2.0);
        let js = serde_json::to_string(&u).unwrap();
        let back: SymmetricTensorRep = serde_json::from_str(&js).unwrap();
        assert_eq!(back, u);
        let v: serde_json::Value = serde_json::from_str(&js).unwrap();
        assert_eq!(v["k"], 2);
        assert_eq!(v["terms"][1]["c"], -2.0);
    }

    #[test]
    fn canonical_order_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let u = random_rep(&mut rng, 2, 3, 6, 2.0);
        let mut a = u.clone();
        let mut rev = u.terms().to_vec();
        rev.reverse();
        let mut b = SymmetricTensorRep::from_terms(2, u.space().clone(), rev).unwrap();
        a.canonicalize();
        b.canonicalize();
        assert_eq!(a, b);
    }
}
