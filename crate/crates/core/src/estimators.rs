//! Standard and multilevel Monte Carlo estimators of `k`-th moments,
//! reference moments and error measurement.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{FiniteDistribution, LevelHierarchy, Sampler};
use crate::sampling::SeedSpec;
use crate::spaces::{interpolate, BanachVector, SpaceDescriptor};
use crate::tensor::{
    hilbert_k2_oracles, injective_norm_with, projective_norm_upper, DenseTensor, HilbertGram, InjectiveOptions,
    SymmetricTensorRep,
};

/// Weights below this magnitude are dropped from multilevel estimates.
pub const WEIGHT_FLOOR: f64 = 1e-15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateMeta {
    /// `[M]` for standard MC, `[M_1, …, M_L]` for MLMC.
    pub samples: Vec<usize>,
    pub seed: String,
    pub work_units: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentEstimate {
    pub rep: SymmetricTensorRep,
    pub k: usize,
    pub meta: EstimateMeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Analytic,
    Exhaustive,
    FineLevelAverage,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReferenceMoment {
    pub rep: SymmetricTensorRep,
    pub provenance: Provenance,
}

impl ReferenceMoment {
    pub fn analytic(rep: SymmetricTensorRep) -> Self {
        ReferenceMoment {
            rep,
            provenance: Provenance::Analytic,
        }
    }

    /// `Σ_i π_i x_i^{⊗k}` of a finitely supported law.
    pub fn exhaustive(dist: &FiniteDistribution, k: usize) -> Result<Self> {
        let rep = SymmetricTensorRep::from_terms(k, dist.space().clone(), dist.atoms().to_vec())?;
        Ok(ReferenceMoment {
            rep,
            provenance: Provenance::Exhaustive,
        })
    }

    pub fn fine_level_average(est: MomentEstimate) -> Self {
        ReferenceMoment {
            rep: est.rep,
            provenance: Provenance::FineLevelAverage,
        }
    }
}

/// Which norm of the estimate-minus-reference tensor to report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Symmetric injective norm (multi-start ascent).
    EpsS,
    /// Upper bound `Σ|c_j|‖x_j‖^k` on the projective norm.
    PiUpper,
    /// Exact injective norm for `k = 2` in a Hilbert space (spectral norm).
    HilbertSpectral,
    /// Exact projective norm for `k = 2` in a Hilbert space (nuclear norm).
    HilbertNuclear,
}

/// `(1/M) Σ_j x_j^{⊗k}`, merging bitwise identical samples.
pub fn mc_from_samples(k: usize, space: &Arc<SpaceDescriptor>, samples: Vec<BanachVector>) -> Result<SymmetricTensorRep> {
    let m = samples.len();
    if m == 0 {
        return Err(Error::invalid("at least one sample is required"));
    }
    let mut terms: Vec<(f64, BanachVector)> = samples.into_iter().map(|x| (1.0, x)).collect();
    terms.sort_by(|(_, x), (_, y)| cmp_coeffs(x.coeffs(), y.coeffs()));
    let mut merged: Vec<(f64, BanachVector)> = Vec::with_capacity(terms.len());
    for (c, x) in terms {
        match merged.last_mut() {
            Some((w, y)) if cmp_coeffs(x.coeffs(), y.coeffs()).is_eq() => *w += c,
            _ => merged.push((c, x)),
        }
    }
    for t in &mut merged {
        t.0 /= m as f64;
    }
    let mut rep = SymmetricTensorRep::from_terms(k, space.clone(), merged)?;
    rep.canonicalize();
    Ok(rep)
}

/// Combines the weights of bitwise identical vectors and drops zero
/// weights (an exact rewrite of the same tensor).
pub fn merge_identical(rep: SymmetricTensorRep) -> Result<SymmetricTensorRep> {
    let k = rep.k();
    let space = rep.space().clone();
    let mut terms = rep.terms().to_vec();
    terms.sort_by(|(_, x), (_, y)| cmp_coeffs(x.coeffs(), y.coeffs()));
    let mut merged: Vec<(f64, BanachVector)> = Vec::with_capacity(terms.len());
    for (c, x) in terms {
        match merged.last_mut() {
            Some((w, y)) if cmp_coeffs(x.coeffs(), y.coeffs()).is_eq() => *w += c,
            _ => merged.push((c, x)),
        }
    }
    merged.retain(|(c, _)| *c != 0.0);
    let mut out = SymmetricTensorRep::from_terms(k, space, merged)?;
    out.canonicalize();
    Ok(out)
}

fn cmp_coeffs(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (u, v) in a.iter().zip(b) {
        let o = u.total_cmp(v);
        if o.is_ne() {
            return o;
        }
    }
    a.len().cmp(&b.len())
}

/// Standard Monte Carlo estimate `(1/M) Σ_j ⊗^k ξ_j` from `M` independent
/// draws (sample `j` uses stream `seed/j`).
pub fn mc_kth_moment(sampler: &dyn Sampler, k: usize, m: usize, seed: &SeedSpec) -> Result<MomentEstimate> {
    if m == 0 {
        return Err(Error::invalid("M must be at least 1"));
    }
    let samples = (0..m)
        .into_par_iter()
        .map(|j| sampler.sample(&seed.child(j as u64)).map_err(|e| e.at_sample(0, j)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MomentEstimate {
        rep: mc_from_samples(k, sampler.space(), samples)?,
        k,
        meta: EstimateMeta {
            samples: vec![m],
            seed: seed.label(),
            work_units: m as f64,
        },
    })
}

/// `Σ_ℓ (1/M_ℓ) Σ_j (⊗^k fine − ⊗^k coarse)` from coupled samples already
/// expressed in `target`; the coarse terms of level 1 are zero and dropped.
pub fn mlmc_from_samples(k: usize, target: &Arc<SpaceDescriptor>, levels: Vec<Vec<(BanachVector, BanachVector)>>) -> Result<SymmetricTensorRep> {
    let mut rep = SymmetricTensorRep::new(k, target.clone())?;
    for (l, pairs) in levels.into_iter().enumerate() {
        if pairs.is_empty() {
            return Err(Error::invalid(format!("level {} has no samples", l + 1)));
        }
        let w = 1.0 / pairs.len() as f64;
        for (fine, coarse) in pairs {
            if w >= WEIGHT_FLOOR {
                rep.push(w, fine)?;
                if l > 0 {
                    rep.push(-w, coarse)?;
                }
            }
        }
    }
    rep.canonicalize();
    Ok(rep)
}

/// Multilevel estimate with `M_ℓ = m[ℓ−1]` coupled samples on level `ℓ`
/// (stream `seed/ℓ/j`), all terms expressed in the space of level `L`.
pub fn mlmc_estimate(model: &dyn LevelHierarchy, k: usize, m: &[usize], seed: &SeedSpec) -> Result<MomentEstimate> {
    check_allocation(model, m)?;
    let target = model.space(m.len())?;
    let mut levels = Vec::with_capacity(m.len());
    let mut work = 0.0;
    for (i, &ml) in m.iter().enumerate() {
        let l = i + 1;
        let pairs = (0..ml)
            .into_par_iter()
            .map(|j| {
                let s = model
                    .sample_pair(l, &seed.path(&[l as u64, j as u64]))
                    .map_err(|e| e.at_sample(l, j))?;
                Ok((interpolate(&s.fine, &target)?, interpolate(&s.coarse, &target)?, s.work_units))
            })
            .collect::<Result<Vec<_>>>()?;
        work += pairs.iter().map(|p| p.2).sum::<f64>();
        levels.push(pairs.into_iter().map(|(f, c, _)| (f, c)).collect());
    }
    Ok(MomentEstimate {
        rep: mlmc_from_samples(k, &target, levels)?,
        k,
        meta: EstimateMeta {
            samples: m.to_vec(),
            seed: seed.label(),
            work_units: work,
        },
    })
}

fn check_allocation(model: &dyn LevelHierarchy, m: &[usize]) -> Result<()> {
    if m.is_empty() || m.iter().any(|&x| x == 0) {
        return Err(Error::invalid("every level needs M_ℓ ≥ 1"));
    }
    if m.len() > model.max_level() {
        return Err(Error::LevelsExhausted {
            required: m.len() as f64,
            available: model.max_level(),
        });
    }
    Ok(())
}

const GRAM_BLOCK: usize = 256;

/// Sums per-block Gram contributions in block order, evaluating groups of
/// blocks in parallel.
fn streamed_gram<F>(space: &Arc<SpaceDescriptor>, count: usize, block: F) -> Result<(HilbertGram, f64)>
where
    F: Fn(std::ops::Range<usize>) -> Result<(HilbertGram, f64)> + Sync,
{
    let mut total = HilbertGram::zeros(space.clone())?;
    let mut work = 0.0;
    let blocks: Vec<std::ops::Range<usize>> = (0..count)
        .step_by(GRAM_BLOCK)
        .map(|a| a..(a + GRAM_BLOCK).min(count))
        .collect();
    let group = 4 * rayon::current_num_threads().max(1);
    for chunk in blocks.chunks(group) {
        let parts = chunk.par_iter().map(|r| block(r.clone())).collect::<Result<Vec<_>>>()?;
        for (g, w) in parts {
            total.add_gram(1.0, &g)?;
            work += w;
        }
    }
    Ok((total, work))
}

fn columns(vs: &[BanachVector]) -> DMatrix<f64> {
    let coords: Vec<Vec<f64>> = vs.iter().map(|v| v.sequence_coords().0).collect();
    let n = coords.first().map_or(0, |c| c.len());
    DMatrix::from_fn(n, coords.len(), |i, j| coords[j][i])
}

/// Multilevel second-moment estimate for Hilbert spaces (`p = 2`),
/// accumulated as a Gram matrix level by level without storing samples,
/// then re-expressed on `target`. Uses the same sample streams as
/// [`mlmc_estimate`] and agrees with it up to rounding.
pub fn mlmc_hilbert_gram(model: &dyn LevelHierarchy, m: &[usize], seed: &SeedSpec, target: &Arc<SpaceDescriptor>) -> Result<(HilbertGram, f64)> {
    check_allocation(model, m)?;
    let mut total = HilbertGram::zeros(target.clone())?;
    let mut work = 0.0;
    for (i, &ml) in m.iter().enumerate() {
        let l = i + 1;
        let space = model.space(l)?;
        let (g, w) = streamed_gram(&space, ml, |range| {
            let mut fine = Vec::with_capacity(range.len());
            let mut coarse = Vec::with_capacity(range.len());
            let mut work = 0.0;
            for j in range {
                let s = model
                    .sample_pair(l, &seed.path(&[l as u64, j as u64]))
                    .map_err(|e| e.at_sample(l, j))?;
                work += s.work_units;
                fine.push(s.fine);
                coarse.push(s.coarse);
            }
            let mut g = HilbertGram::zeros(space.clone())?;
            g.add_columns(1.0, &columns(&fine));
            if l > 1 {
                g.add_columns(-1.0, &columns(&coarse));
            }
            Ok((g, work))
        })?;
        total.add_gram(1.0 / ml as f64, &g.prolongate(target)?)?;
        work += w;
    }
    Ok((total, work))
}

/// Single-level second-moment Gram estimate from `M` samples of `X_level`
/// (streams `seed/j`), re-expressed on `target`.
pub fn single_level_hilbert_gram(
    model: &dyn LevelHierarchy,
    level: usize,
    m: usize,
    seed: &SeedSpec,
    target: &Arc<SpaceDescriptor>,
) -> Result<(HilbertGram, f64)> {
    if m == 0 {
        return Err(Error::invalid("M must be at least 1"));
    }
    let space = model.space(level)?;
    let (mut g, work) = streamed_gram(&space, m, |range| {
        let mut xs = Vec::with_capacity(range.len());
        let mut work = 0.0;
        for j in range {
            let (x, w) = model
                .sample_fine(level, &seed.child(j as u64))
                .map_err(|e| e.at_sample(level, j))?;
            work += w;
            xs.push(x);
        }
        let mut g = HilbertGram::zeros(space.clone())?;
        g.add_columns(1.0, &columns(&xs));
        Ok((g, work))
    })?;
    g.scale(1.0 / m as f64);
    Ok((g.prolongate(target)?, work))
}

/// Re-expresses every term of `rep` on `target` by interpolation (exact
/// for nested discretizations).
pub fn interpolate_rep(rep: &SymmetricTensorRep, target: &Arc<SpaceDescriptor>) -> Result<SymmetricTensorRep> {
    let terms = rep
        .terms()
        .iter()
        .map(|(c, x)| Ok((*c, interpolate(x, target)?)))
        .collect::<Result<Vec<_>>>()?;
    SymmetricTensorRep::from_terms(rep.k(), target.clone(), terms)
}

/// Norm of `est − reference`.
pub fn error_in_norm(est: &MomentEstimate, reference: &ReferenceMoment, kind: NormKind, opts: &InjectiveOptions) -> Result<f64> {
    let diff = merge_identical(est.rep.difference(&reference.rep)?)?;
    tensor_norm(&diff, kind, opts)
}

pub fn tensor_norm(u: &SymmetricTensorRep, kind: NormKind, opts: &InjectiveOptions) -> Result<f64> {
    match kind {
        NormKind::EpsS => Ok(injective_norm_with(u, opts)?.value),
        NormKind::PiUpper => Ok(projective_norm_upper(u)),
        NormKind::HilbertSpectral => Ok(hilbert_k2_oracles(u)?.0),
        NormKind::HilbertNuclear => Ok(hilbert_k2_oracles(u)?.1),
    }
}

/// Empirical `(R⁻¹ Σ_r e_r^q)^{1/q}` with a bootstrap standard error from
/// 1000 resamples.
pub fn lq_error(errors: &[f64], q: f64, seed: &SeedSpec) -> Result<(f64, f64)> {
    if errors.len() < 8 {
        return Err(Error::invalid(format!("need at least 8 runs, got {}", errors.len())));
    }
    if !(q >= 1.0) || !q.is_finite() {
        return Err(Error::invalid(format!("q = {q} must be in [1, ∞)")));
    }
    if errors.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
        return Err(Error::Numerical("run errors must be finite and non-negative".into()));
    }
    let lq = |xs: &mut dyn Iterator<Item = f64>, n: usize| (xs.map(|e| e.powf(q)).sum::<f64>() / n as f64).powf(1.0 / q);
    let r = errors.len();
    let value = lq(&mut errors.iter().copied(), r);
    let mut rng = seed.rng();
    let boots: Vec<f64> = (0..1000)
        .map(|_| lq(&mut (0..r).map(|_| errors[rng.random_range(0..r)]), r))
        .collect();
    let mean = boots.iter().sum::<f64>() / boots.len() as f64;
    let var = boots.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (boots.len() - 1) as f64;
    Ok((value, var.sqrt()))
}

/// Runs `R` independent estimations (run `r` uses stream `seed/r`) and
/// reports the empirical `L_q` error against `reference`, together with
/// the per-run errors.
pub fn lq_error_of_runs<F>(runs: usize, q: f64, seed: &SeedSpec, run: F) -> Result<((f64, f64), Vec<f64>)>
where
    F: Fn(&SeedSpec) -> Result<f64> + Sync,
{
    let errors = (0..runs)
        .map(|r| run(&seed.child(r as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok((lq_error(&errors, q, &seed.child(u64::MAX))?, errors))
}

/// `E[⊗^k X]` of a finite law as a dense tensor.
pub fn exhaustive_moment(dist: &FiniteDistribution, k: usize) -> Result<DenseTensor> {
    ReferenceMoment::exhaustive(dist, k)?.rep.to_dense()
}

/// Exact expectation of the standard MC estimate with `M` samples over all
/// equally indexed outcomes of a finite law (`|atoms|^M` terms).
pub fn exhaustive_mc_expectation(dist: &FiniteDistribution, k: usize, m: usize) -> Result<DenseTensor> {
    let atoms = dist.atoms();
    let n = dist.space().size();
    let count = (atoms.len() as f64).powi(m as i32);
    if count > 1e7 {
        return Err(Error::invalid("too many outcomes to enumerate"));
    }
    let mut acc = DenseTensor::zeros(k, n)?;
    let mut idx = vec![0usize; m];
    loop {
        let prob: f64 = idx.iter().map(|&i| atoms[i].0).product();
        let samples = idx.iter().map(|&i| atoms[i].1.clone()).collect();
        let est = mc_from_samples(k, dist.space(), samples)?.to_dense()?;
        acc = accumulate(acc, prob, &est)?;
        if !advance(&mut idx, &vec![atoms.len(); m]) {
            break;
        }
    }
    Ok(acc)
}

/// Exact expectation of the multilevel estimate when level `ℓ` has a finite
/// coupled law `levels[ℓ−1] = [(π, fine, coarse)]` (all in one space) and
/// `M_ℓ = m[ℓ−1]` samples.
pub fn exhaustive_mlmc_expectation(levels: &[Vec<(f64, BanachVector, BanachVector)>], k: usize, m: &[usize]) -> Result<DenseTensor> {
    if levels.len() != m.len() || levels.is_empty() || m.contains(&0) {
        return Err(Error::invalid("one positive sample count per level is required"));
    }
    let space = levels[0][0].1.space().clone();
    let n = space.size();
    let radices: Vec<usize> = levels
        .iter()
        .zip(m)
        .flat_map(|(lv, &ml)| std::iter::repeat_n(lv.len(), ml))
        .collect();
    if radices.iter().map(|&r| r as f64).product::<f64>() > 1e7 {
        return Err(Error::invalid("too many outcomes to enumerate"));
    }
    let mut acc = DenseTensor::zeros(k, n)?;
    let mut idx = vec![0usize; radices.len()];
    loop {
        let mut prob = 1.0;
        let mut pos = 0;
        let mut draws = Vec::with_capacity(m.len());
        for (lv, &ml) in levels.iter().zip(m) {
            let mut pairs = Vec::with_capacity(ml);
            for _ in 0..ml {
                let (p, f, c) = &lv[idx[pos]];
                prob *= p;
                pairs.push((f.clone(), c.clone()));
                pos += 1;
            }
            draws.push(pairs);
        }
        let est = mlmc_from_samples(k, &space, draws)?.to_dense()?;
        acc = accumulate(acc, prob, &est)?;
        if !advance(&mut idx, &radices) {
            break;
        }
    }
    Ok(acc)
}

fn accumulate(acc: DenseTensor, w: f64, t: &DenseTensor) -> Result<DenseTensor> {
    let entries = acc.entries().iter().zip(t.entries()).map(|(a, b)| a + w * b).collect();
    DenseTensor::new(acc.k(), acc.n(), entries)
}

/// Odometer increment; `false` after the last index tuple.
fn advance(idx: &mut [usize], radices: &[usize]) -> bool {
    for (i, r) in idx.iter_mut().zip(radices) {
        *i += 1;
        if *i < *r {
            return true;
        }
        *i = 0;
    }
    false
}

/// Right-hand side `‖η−ξ‖_{L_k} Σ_{i<k} ‖η‖_{L_k}^i ‖ξ‖_{L_k}^{k−1−i}` of the
/// moment-difference bound for a finite joint law `[(π, η, ξ)]`.
pub fn moment_difference_bound(joint: &[(f64, BanachVector, BanachVector)], k: usize) -> Result<f64> {
    let kf = k as f64;
    let mut d = 0.0;
    let mut a = 0.0;
    let mut b = 0.0;
    for (p, eta, xi) in joint {
        d += p * eta.sub(xi)?.norm().powf(kf);
        a += p * eta.norm().powf(kf);
        b += p * xi.norm().powf(kf);
    }
    let (d, a, b) = (d.powf(1.0 / kf), a.powf(1.0 / kf), b.powf(1.0 / kf));
    Ok(d * (0..k).map(|i| a.powi(i as i32) * b.powi((k - 1 - i) as i32)).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ConstantSampler, ForcingElliptic, ForcingLaw, ForcingParams, GaussianCoordinates, LogGaussElliptic1d, LogGaussParams, Forcing1d, UniformBasis};
    use crate::sampling::KlFieldConfig;
    use rand_distr::{Distribution, StandardNormal};

    fn seq(n: usize, p: f64) -> Arc<SpaceDescriptor> {
        SpaceDescriptor::sequence(n, p).unwrap()
    }

    fn v(s: &Arc<SpaceDescriptor>, c: &[f64]) -> BanachVector {
        BanachVector::new(s.clone(), c.to_vec()).unwrap()
    }

    #[test]
    fn constant_sampler_is_exact() {
        let s = seq(3, 2.0);
        let x = v(&s, &[1.0, -2.0, 0.5]);
        let est = mc_kth_moment(&ConstantSampler { value: x.clone() }, 3, 17, &SeedSpec::new(1)).unwrap();
        assert_eq!(est.rep.terms().len(), 1);
        assert_eq!(est.rep.terms()[0], (1.0, x.clone()));
        let r = ReferenceMoment::analytic(SymmetricTensorRep::elementary(3, x).unwrap());
        let opts = InjectiveOptions::default();
        assert_eq!(error_in_norm(&est, &r, NormKind::EpsS, &opts).unwrap(), 0.0);
        assert_eq!(error_in_norm(&est, &r, NormKind::PiUpper, &opts).unwrap(), 0.0);
    }

    #[test]
    fn uniform_basis_unbiased_exhaustively() {
        let s = seq(2, 2.0);
        let dist = FiniteDistribution::new(vec![(0.5, v(&s, &[1.0, 0.0])), (0.5, v(&s, &[0.0, 1.0]))]).unwrap();
        let truth = exhaustive_moment(&dist, 2).unwrap();
        assert_eq!(truth.entries(), &[0.5, 0.0, 0.0, 0.5]);
        for m in 1..=10 {
            let e = exhaustive_mc_expectation(&dist, 2, m).unwrap();
            assert!(e.max_abs_diff(&truth) < 1e-14);
        }
    }

    #[test]
    fn sample_order_does_not_matter() {
        let s = seq(3, 1.5);
        let xs: Vec<BanachVector> = (0..6).map(|i| v(&s, &[i as f64, 1.0 - i as f64, 0.5])).collect();
        let mut rev = xs.clone();
        rev.reverse();
        assert_eq!(mc_from_samples(2, &s, xs).unwrap(), mc_from_samples(2, &s, rev).unwrap());
    }

    #[test]
    fn mc_rate_in_l2() {
        let s = seq(4, 2.0);
        let sampler = GaussianCoordinates { space: s.clone(), scale: 1.0 };
        let zero = ReferenceMoment::analytic(SymmetricTensorRep::new(1, s).unwrap());
        let opts = InjectiveOptions::default();
        let root = SeedSpec::new(9);
        let (ms, errs): (Vec<f64>, Vec<f64>) = [16usize, 64, 256, 1024]
            .iter()
            .map(|&m| {
                let ((e, _), _) = lq_error_of_runs(32, 2.0, &root.child(m as u64), |sd| {
                    error_in_norm(&mc_kth_moment(&sampler, 1, m, sd)?, &zero, NormKind::EpsS, &opts)
                })
                .unwrap();
                (m as f64, e)
            })
            .unzip();
        // E‖mean of M standard Gaussians in ℝ⁴‖² = 4/M
        for (m, e) in ms.iter().zip(&errs) {
            assert!((e * m.sqrt() / 2.0 - 1.0).abs() < 0.3, "M={m}: {e}");
        }
    }

    #[test]
    fn counterexample_single_sample() {
        let n = 7;
        let s = seq(n, 2.0);
        let sampler = UniformBasis { space: s.clone(), signed: false };
        let reference = SymmetricTensorRep::from_terms(
            2,
            s.clone(),
            (0..n)
                .map(|i| {
                    let mut c = vec![0.0; n];
                    c[i] = 1.0;
                    (1.0 / n as f64, v(&s, &c))
                })
                .collect(),
        )
        .unwrap();
        let r = ReferenceMoment::analytic(reference);
        let opts = InjectiveOptions::default();
        for i in 0..5 {
            let est = mc_kth_moment(&sampler, 2, 1, &SeedSpec::new(i)).unwrap();
            let pi = error_in_norm(&est, &r, NormKind::HilbertNuclear, &opts).unwrap();
            assert!((pi - 2.0 * (1.0 - 1.0 / n as f64)).abs() < 1e-12);
            let eps = error_in_norm(&est, &r, NormKind::HilbertSpectral, &opts).unwrap();
            assert!((eps - (1.0 - 1.0 / n as f64)).abs() < 1e-12);
        }
        // M distinct indices out of n: π-difference 2(1 − M/n)
        let m = 3;
        let xs: Vec<BanachVector> = (0..m)
            .map(|i| {
                let mut c = vec![0.0; n];
                c[i] = 1.0;
                v(&s, &c)
            })
            .collect();
        let est = MomentEstimate {
            rep: mc_from_samples(2, &s, xs).unwrap(),
            k: 2,
            meta: EstimateMeta {
                samples: vec![m],
                seed: String::new(),
                work_units: 0.0,
            },
        };
        let pi = error_in_norm(&est, &r, NormKind::HilbertNuclear, &opts).unwrap();
        assert!((pi - 2.0 * (1.0 - m as f64 / n as f64)).abs() < 1e-12);
    }

    #[test]
    fn moment_difference_bound_small_laws() {
        let mut rng = SeedSpec::new(4).rng();
        let opts = InjectiveOptions::default();
        for trial in 0..20 {
            let p = [1.0, 1.5, 2.0, 3.0][trial % 4];
            let k = 1 + trial % 3;
            let s = seq(3, p);
            let atoms = 2 + trial % 5;
            let probs: Vec<f64> = (0..atoms).map(|_| rng.random::<f64>() + 0.1).collect();
            let total: f64 = probs.iter().sum();
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
                v(&s, &(0..3).map(|_| StandardNormal.sample(rng)).collect::<Vec<f64>>())
            };
            let joint: Vec<(f64, BanachVector, BanachVector)> = probs
                .iter()
                .map(|pr| (pr / total, draw(&mut rng), draw(&mut rng)))
                .collect();
            let eta = FiniteDistribution::new(joint.iter().map(|(p, e, _)| (*p, e.clone())).collect()).unwrap();
            let xi = FiniteDistribution::new(joint.iter().map(|(p, _, x)| (*p, x.clone())).collect()).unwrap();
            let diff = ReferenceMoment::exhaustive(&eta, k)
                .unwrap()
                .rep
                .difference(&ReferenceMoment::exhaustive(&xi, k).unwrap().rep)
                .unwrap();
            let lhs = injective_norm_with(&diff, &opts).unwrap().value;
            let rhs = moment_difference_bound(&joint, k).unwrap();
            assert!(lhs <= rhs * (1.0 + 1e-12), "trial {trial}: {lhs} > {rhs}");
        }
    }

    #[test]
    fn lq_error_basics() {
        let (v, se) = lq_error(&[0.3; 10], 2.0, &SeedSpec::new(0)).unwrap();
        assert!((v - 0.3).abs() < 1e-15 && se < 1e-12, "{v} {se}");
        assert!(lq_error(&[0.3; 7], 2.0, &SeedSpec::new(0)).is_err());
        // |Z| with Z standard normal: L_2 norm 1
        let mut rng = SeedSpec::new(12).rng();
        let errs: Vec<f64> = (0..64).map(|_| f64::abs(StandardNormal.sample(&mut rng))).collect();
        let (v, se) = lq_error(&errs, 2.0, &SeedSpec::new(1)).unwrap();
        assert!((v - 1.0).abs() < 3.0 * se, "{v} ± {se}");
        let mut last = 0.0;
        for q in [1.0, 1.5, 2.0, 3.0, 4.0] {
            let (v, _) = lq_error(&errs, q, &SeedSpec::new(1)).unwrap();
            assert!(v >= last);
            last = v;
        }
    }

    fn loggauss(amps: Vec<f64>, max_level: usize) -> LogGaussElliptic1d {
        LogGaussElliptic1d::new(LogGaussParams {
            field: KlFieldConfig::new(amps, 1.0).unwrap(),
            forcing: Forcing1d::Constant { value: 1.0 },
            p: 2.0,
            n0: 1,
            max_level,
        })
        .unwrap()
    }

    #[test]
    fn single_level_is_standard_mc() {
        let m = loggauss(vec![0.5, 0.2], 3);
        let seed = SeedSpec::new(2);
        let ml = mlmc_estimate(&m, 2, &[20], &seed).unwrap();
        let samples: Vec<BanachVector> = (0..20)
            .map(|j| m.sample_pair(1, &seed.path(&[1, j])).unwrap().fine)
            .collect();
        let mc = mc_from_samples(2, &m.space(1).unwrap(), samples).unwrap();
        assert!(ml.rep.to_dense().unwrap().max_abs_diff(&mc.to_dense().unwrap()) < 1e-15);
    }

    #[test]
    fn deterministic_model_recovers_finest_level() {
        let m = ForcingElliptic::new(ForcingParams {
            forcing: ForcingLaw::deterministic(1.0),
            dim: 1,
            p: 2.0,
            n0: 1,
            max_level: 4,
            cg_tol: 1e-12,
            cg_max_iter: 100,
        })
        .unwrap();
        let est = mlmc_estimate(&m, 2, &[5, 3, 2, 1], &SeedSpec::new(0)).unwrap();
        let x = m.sample_pair(4, &SeedSpec::new(0)).unwrap().fine;
        let r = ReferenceMoment::analytic(SymmetricTensorRep::elementary(2, x).unwrap());
        let err = error_in_norm(&est, &r, NormKind::HilbertSpectral, &InjectiveOptions::default()).unwrap();
        assert!(err < 1e-14, "{err}");
    }

    #[test]
    fn streamed_gram_matches_rep() {
        let m = loggauss(vec![0.6, 0.3, 0.1], 4);
        let seed = SeedSpec::new(8);
        let alloc = [300, 120, 40];
        let est = mlmc_estimate(&m, 2, &alloc, &seed).unwrap();
        let target = m.space(4).unwrap();
        let (g, work) = mlmc_hilbert_gram(&m, &alloc, &seed, &target).unwrap();
        assert_eq!(work, est.meta.work_units);
        let g_rep = HilbertGram::from_rep(&interpolate_rep(&est.rep, &target).unwrap()).unwrap();
        let mut d = g.clone();
        d.add_gram(-1.0, &g_rep).unwrap();
        assert!(d.norms().0 < 1e-12 * g.norms().0.max(1.0));
        // work accounting: Σ M_ℓ (N_ℓ + N_{ℓ−1})
        let expected: f64 = alloc
            .iter()
            .enumerate()
            .map(|(i, &ml)| ml as f64 * (2f64.powi(i as i32) + if i == 0 { 0.0 } else { 2f64.powi(i as i32 - 1) }))
            .sum();
        assert_eq!(work, expected);
    }

    #[test]
    fn schedule_independent() {
        let m = loggauss(vec![0.6, 0.3], 3);
        let seed = SeedSpec::new(5);
        let a = mlmc_estimate(&m, 2, &[64, 16, 4], &seed).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| mlmc_estimate(&m, 2, &[64, 16, 4], &seed).unwrap());
        assert_eq!(a, b);
    }
}
