//! Experiment configuration, rate regression, the experiment drivers behind
//! the CLI subcommands, and result emission.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::{allocate, calibrate, predicted_cost, single_level_plan, Calibration, MlmcPlan, PilotLevel, PlanInputs};
use crate::error::{Error, Result};
use crate::estimators::{
    error_in_norm, lq_error, mc_kth_moment, mlmc_estimate, mlmc_hilbert_gram, single_level_hilbert_gram, NormKind,
    ReferenceMoment,
};
use crate::models::{
    ConstantSampler, EulerMaruyama, ForcingElliptic, ForcingLaw, ForcingParams, Forcing1d, GaussianCoordinates,
    LevelHierarchy, LogGaussElliptic1d, LogGaussParams, Sampler, SdeParams, SdeSpec, UniformBasis,
};
use crate::sampling::{probabilistic_property_suite, KlFieldConfig, SeedSpec};
use crate::spaces::{interpolate, BanachVector, SpaceDescriptor, SpaceKind};
use crate::tensor::{injective_norm_with, projective_norm_upper, HilbertGram, InjectiveOptions, NormReport, SymmetricTensorRep};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Required by `mc-rate`, `mlmc-run` and calibrated `allocate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub space: SpaceConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimator: Option<EstimatorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allocator: Option<AllocatorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tensor: Option<TensorConfig>,
    #[serde(default)]
    pub run: RunConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// `ξ ≡ x` in `ℓ_p^n`.
    Constant { coeffs: Vec<f64> },
    /// Independent `N(0, scale²)` coordinates in `ℓ_p^n`.
    GaussianCoordinates {
        n: usize,
        #[serde(default = "one_f")]
        scale: f64,
    },
    /// Uniformly chosen (optionally signed) unit vector of `ℓ_p^n`.
    UniformBasis {
        n: usize,
        #[serde(default)]
        signed: bool,
    },
    Elliptic1dLoggauss {
        field: KlFieldConfig,
        forcing: Forcing1d,
        #[serde(default = "one_u")]
        n0: usize,
        max_level: usize,
    },
    EllipticForcing {
        forcing: ForcingLaw,
        dim: usize,
        #[serde(default = "one_u")]
        n0: usize,
        max_level: usize,
        #[serde(default = "cg_tol")]
        cg_tol: f64,
        #[serde(default = "cg_iters")]
        cg_max_iter: usize,
    },
    Sde {
        sde: SdeSpec,
        #[serde(default = "one_u")]
        n0: usize,
        max_level: usize,
    },
}

fn one_f() -> f64 {
    1.0
}
fn one_u() -> usize {
    1
}
fn cg_tol() -> f64 {
    1e-12
}
fn cg_iters() -> usize {
    100_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceConfig {
    #[serde(default = "two")]
    pub p: f64,
    #[serde(default)]
    pub delta: f64,
    #[serde(default = "one_u")]
    pub k: usize,
    /// Defaults to `max(2, p)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
}

fn two() -> f64 {
    2.0
}

impl Default for SpaceConfig {
    fn default() -> Self {
        SpaceConfig {
            p: 2.0,
            delta: 0.0,
            k: 1,
            q: None,
        }
    }
}

impl SpaceConfig {
    pub fn q(&self) -> f64 {
        self.q.unwrap_or(self.p.max(2.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Standard MC error against a reference over a grid of `M`.
    Mc,
    /// Standard MC on one level of a hierarchy, reference at `reference_level`.
    SingleLevel,
    /// `E‖X_ℓ − X_{ℓ−1}‖^q` over `levels`.
    CouplingRate,
    /// `E‖X_ref − X_ℓ‖^q` over `levels`.
    StrongError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    /// Sample sizes for `mc`/`single_level`/`counterexample`.
    #[serde(default)]
    pub m: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<usize>,
    /// Dimension for `counterexample`; `n*(q, M)` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default)]
    pub levels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_level: Option<usize>,
    /// Samples per level for rate studies, or reference samples.
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_norm")]
    pub norm: NormKind,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

fn default_samples() -> usize {
    256
}
fn default_norm() -> NormKind {
    NormKind::EpsS
}
fn default_restarts() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocatorConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub epsilons: Vec<f64>,
    /// Constants; calibrated from pilot samples when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_star: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_sl: Option<f64>,
    /// Surrogate for the unquantified multilevel constant.
    #[serde(default = "one_f")]
    pub c_ml: f64,
    #[serde(default = "default_pilot_levels")]
    pub pilot_levels: usize,
    #[serde(default = "default_pilot_samples")]
    pub pilot_samples: usize,
    #[serde(default = "default_cap")]
    pub max_samples: f64,
    /// Reference uses `reference_factor · max M_ℓ` samples unless
    /// `reference_samples` is given.
    #[serde(default = "default_ref_factor")]
    pub reference_factor: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_samples: Option<usize>,
}

fn default_pilot_levels() -> usize {
    4
}
fn default_pilot_samples() -> usize {
    256
}
fn default_cap() -> f64 {
    1e8
}
fn default_ref_factor() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorConfig {
    pub terms: Vec<TermConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermConfig {
    pub c: f64,
    pub coeffs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    /// Monte Carlo trials of the property suite.
    #[serde(default = "default_trials")]
    pub trials: usize,
}

fn default_runs() -> usize {
    16
}
fn default_trials() -> usize {
    10_000
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            runs: default_runs(),
            seed: 0,
            out: None,
            trials: default_trials(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical TOML form; parsing it yields the same configuration.
    pub fn canonical(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn estimator(&self) -> Result<&EstimatorConfig> {
        self.estimator.as_ref().ok_or_else(|| Error::Config("missing [estimator] section".into()))
    }

    fn allocator(&self) -> Result<&AllocatorConfig> {
        self.allocator.as_ref().ok_or_else(|| Error::Config("missing [allocator] section".into()))
    }
}

/// A model built from its configuration block.
pub enum Model {
    Sampler(Box<dyn Sampler>),
    Hierarchy(Box<dyn LevelHierarchy>),
}

pub fn build_model(cfg: &ExperimentConfig) -> Result<Model> {
    let p = cfg.space.p;
    let model = cfg.model.as_ref().ok_or_else(|| Error::Config("missing [model] section".into()))?;
    Ok(match model {
        ModelConfig::Constant { coeffs } => {
            let s = SpaceDescriptor::sequence(coeffs.len(), p)?;
            Model::Sampler(Box::new(ConstantSampler {
                value: BanachVector::new(s, coeffs.clone())?,
            }))
        }
        ModelConfig::GaussianCoordinates { n, scale } => Model::Sampler(Box::new(GaussianCoordinates {
            space: SpaceDescriptor::sequence(*n, p)?,
            scale: *scale,
        })),
        ModelConfig::UniformBasis { n, signed } => Model::Sampler(Box::new(UniformBasis {
            space: SpaceDescriptor::sequence(*n, p)?,
            signed: *signed,
        })),
        ModelConfig::Elliptic1dLoggauss { field, forcing, n0, max_level } => Model::Hierarchy(Box::new(LogGaussElliptic1d::new(LogGaussParams {
            field: field.clone(),
            forcing: forcing.clone(),
            p,
            n0: *n0,
            max_level: *max_level,
        })?)),
        ModelConfig::EllipticForcing {
            forcing,
            dim,
            n0,
            max_level,
            cg_tol,
            cg_max_iter,
        } => Model::Hierarchy(Box::new(ForcingElliptic::new(ForcingParams {
            forcing: forcing.clone(),
            dim: *dim,
            p,
            n0: *n0,
            max_level: *max_level,
            cg_tol: *cg_tol,
            cg_max_iter: *cg_max_iter,
        })?)),
        ModelConfig::Sde { sde, n0, max_level } => Model::Hierarchy(Box::new(EulerMaruyama::new(SdeParams {
            sde: sde.clone(),
            delta: cfg.space.delta,
            n0: *n0,
            max_level: *max_level,
        })?)),
    })
}

/// One `(n, error)` observation with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub n: f64,
    pub err: f64,
    pub se: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// Bootstrap 95% interval of the slope (resampling points).
    pub slope_ci: (f64, f64),
}

fn ols(x: &[f64], y: &[f64]) -> Option<(f64, f64, f64)> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Some((slope, my - slope * mx, r2))
}

/// Least-squares fit of `log err = intercept + slope · log n`.
pub fn rate_regression(points: &[RatePoint]) -> Result<RateFit> {
    if points.len() < 4 {
        return Err(Error::invalid(format!("rate regression needs at least 4 points, got {}", points.len())));
    }
    if let Some(p) = points.iter().find(|p| !(p.err > 0.0) || !(p.n > 0.0)) {
        return Err(Error::invalid(format!(
            "point (n = {}, err = {}) is not positive; exclude exact cases from rate fits",
            p.n, p.err
        )));
    }
    let x: Vec<f64> = points.iter().map(|p| p.n.ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.err.ln()).collect();
    let (slope, intercept, r2) = ols(&x, &y).ok_or_else(|| Error::invalid("all points share the same n"))?;
    let mut rng = SeedSpec::new(0x5eed).rng();
    let mut boots = Vec::with_capacity(1000);
    while boots.len() < 1000 {
        let idx: Vec<usize> = (0..x.len()).map(|_| rng.random_range(0..x.len())).collect();
        let bx: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
        let by: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        if let Some((s, _, _)) = ols(&bx, &by) {
            boots.push(s);
        }
    }
    boots.sort_by(f64::total_cmp);
    Ok(RateFit {
        slope,
        intercept,
        r2,
        slope_ci: (boots[25], boots[974]),
    })
}

/// One row of a rate table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateRow {
    pub n: f64,
    pub error: f64,
    pub se: f64,
    pub work_units: f64,
    pub seed: String,
}

impl RateRow {
    pub fn point(&self) -> RatePoint {
        RatePoint {
            n: self.n,
            err: self.error,
            se: self.se,
        }
    }
}

pub fn points(rows: &[RateRow]) -> Vec<RatePoint> {
    rows.iter().map(RateRow::point).collect()
}

/// Standard MC errors `‖estimate − reference‖` in `L_q(Ω)` over `R` runs
/// for each `M` (run `r` of size `M` uses stream `seed/M/r`).
#[allow(clippy::too_many_arguments)]
pub fn mc_rate(
    sampler: &dyn Sampler,
    reference: &ReferenceMoment,
    k: usize,
    ms: &[usize],
    runs: usize,
    q: f64,
    norm: NormKind,
    opts: &InjectiveOptions,
    seed: &SeedSpec,
) -> Result<Vec<RateRow>> {
    ms.iter()
        .map(|&m| {
            let s = seed.child(m as u64);
            let errors = (0..runs)
                .into_par_iter()
                .map(|r| {
                    let est = mc_kth_moment(sampler, k, m, &s.child(r as u64))?;
                    error_in_norm(&est, reference, norm, opts)
                })
                .collect::<Result<Vec<_>>>()?;
            let (error, se) = lq_error(&errors, q, &s)?;
            Ok(RateRow {
                n: m as f64,
                error,
                se,
                work_units: (m * runs) as f64,
                seed: s.label(),
            })
        })
        .collect()
}

/// Analytic reference moments of the simple samplers.
pub fn sampler_reference(model: &ModelConfig, space: &Arc<SpaceDescriptor>, k: usize) -> Result<ReferenceMoment> {
    let unit = |i: usize| {
        let mut c = vec![0.0; space.size()];
        c[i] = 1.0;
        BanachVector::new(space.clone(), c)
    };
    let rep = match model {
        ModelConfig::Constant { coeffs } => SymmetricTensorRep::elementary(k, BanachVector::new(space.clone(), coeffs.clone())?)?,
        ModelConfig::GaussianCoordinates { n, scale } => match k {
            1 | 3 => SymmetricTensorRep::new(k, space.clone())?,
            2 => SymmetricTensorRep::from_terms(2, space.clone(), (0..*n).map(|i| Ok((scale * scale, unit(i)?))).collect::<Result<_>>()?)?,
            _ => return Err(Error::invalid("analytic Gaussian references are available for k ≤ 3")),
        },
        ModelConfig::UniformBasis { n, signed } => {
            if *signed && k % 2 == 1 {
                SymmetricTensorRep::new(k, space.clone())?
            } else {
                SymmetricTensorRep::from_terms(k, space.clone(), (0..*n).map(|i| Ok((1.0 / *n as f64, unit(i)?))).collect::<Result<_>>()?)?
            }
        }
        _ => return Err(Error::invalid("no analytic reference for this model")),
    };
    Ok(ReferenceMoment::analytic(rep))
}

/// `(E‖X_ℓ − X_{ℓ−1}‖^q)^{1/q}` per level from `samples` coupled draws
/// (stream `seed/ℓ/j`).
pub fn coupling_rate(model: &dyn LevelHierarchy, levels: &[usize], samples: usize, q: f64, seed: &SeedSpec) -> Result<Vec<RateRow>> {
    levels
        .iter()
        .map(|&l| {
            let s = seed.child(l as u64);
            let out = (0..samples)
                .into_par_iter()
                .map(|j| {
                    let c = model.sample_pair(l, &s.child(j as u64)).map_err(|e| e.at_sample(l, j))?;
                    Ok((c.fine.sub(&c.coarse)?.norm(), c.work_units))
                })
                .collect::<Result<Vec<_>>>()?;
            let norms: Vec<f64> = out.iter().map(|o| o.0).collect();
            let (error, se) = lq_error(&norms, q, &s)?;
            Ok(RateRow {
                n: model.size(l) as f64,
                error,
                se,
                work_units: out.iter().map(|o| o.1).sum(),
                seed: s.label(),
            })
        })
        .collect()
}

/// `(E‖X_ref − X_ℓ‖^q)^{1/q}` per level, both from the same randomness.
pub fn strong_error_rate(
    model: &dyn LevelHierarchy,
    levels: &[usize],
    reference_level: usize,
    samples: usize,
    q: f64,
    seed: &SeedSpec,
) -> Result<Vec<RateRow>> {
    let target = model.space(reference_level)?;
    let refs = (0..samples)
        .into_par_iter()
        .map(|j| model.sample_fine(reference_level, &seed.child(j as u64)).map_err(|e| e.at_sample(reference_level, j)))
        .collect::<Result<Vec<_>>>()?;
    levels
        .iter()
        .map(|&l| {
            let out = (0..samples)
                .into_par_iter()
                .map(|j| {
                    let (x, w) = model.sample_fine(l, &seed.child(j as u64)).map_err(|e| e.at_sample(l, j))?;
                    Ok((refs[j].0.sub(&interpolate(&x, &target)?)?.norm(), w))
                })
                .collect::<Result<Vec<_>>>()?;
            let norms: Vec<f64> = out.iter().map(|o| o.0).collect();
            let (error, se) = lq_error(&norms, q, &seed.child(l as u64))?;
            Ok(RateRow {
                n: model.size(l) as f64,
                error,
                se,
                work_units: out.iter().map(|o| o.1).sum(),
                seed: seed.label(),
            })
        })
        .collect()
}

/// Pilot estimates of `‖X_ℓ − X_{ℓ−1}‖_{L_{kq}}`, `‖X_ℓ‖_{L_{kq}}`,
/// `‖X_{ℓ−1}‖_{L_{kq}}` on levels `1..=levels`.
pub fn pilot_statistics(model: &dyn LevelHierarchy, levels: usize, samples: usize, kq: f64, seed: &SeedSpec) -> Result<Vec<PilotLevel>> {
    (1..=levels.min(model.max_level()))
        .map(|l| {
            let s = seed.child(l as u64);
            let norms = (0..samples)
                .into_par_iter()
                .map(|j| {
                    let c = model.sample_pair(l, &s.child(j as u64)).map_err(|e| e.at_sample(l, j))?;
                    Ok([c.fine.sub(&c.coarse)?.norm(), c.fine.norm(), c.coarse.norm()])
                })
                .collect::<Result<Vec<_>>>()?;
            let m = |i: usize| (norms.iter().map(|v| v[i].powf(kq)).sum::<f64>() / samples as f64).powf(1.0 / kq);
            Ok(PilotLevel {
                n: model.size(l) as f64,
                diff: m(0),
                fine: m(1),
                coarse: m(2),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MlmcRow {
    pub epsilon: f64,
    pub levels: usize,
    pub samples: String,
    pub error: f64,
    pub se: f64,
    pub work_units: f64,
    pub predicted_cost: f64,
    pub single_level_cost: f64,
    /// `L_q` error of the single-level estimator run with its own plan.
    pub single_level_error: f64,
    pub norm_kind: NormKind,
    pub seed: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct MlmcReport {
    pub calibration: Option<Calibration>,
    pub plans: Vec<MlmcPlan>,
    pub rows: Vec<MlmcRow>,
    pub reference_level: usize,
    pub reference_samples: usize,
    /// Fit of `log(work) = c − exponent · log ε`; `slope = −exponent`.
    pub cost_fit: Option<RateFit>,
    pub predicted_exponent: f64,
    pub single_level_exponent: f64,
}

/// Calibrates (unless constants are given), allocates for every `ε`, runs
/// `R` independent multilevel estimations per `ε` and measures their
/// `L_q` error against a single-level reference two levels below the
/// deepest plan. Second moments in Hilbert spaces stream through Gram
/// matrices; other cases keep explicit representations.
pub fn mlmc_experiment(model: &dyn LevelHierarchy, space: &SpaceConfig, acfg: &AllocatorConfig, runs: usize, norm: NormKind, opts: &InjectiveOptions, seed: &SeedSpec) -> Result<MlmcReport> {
    let k = space.k;
    let q = space.q();
    let (c_alpha, c_star, c_sl, calibration) = match (acfg.c_alpha, acfg.c_star) {
        (Some(a), Some(s)) => (a, s, acfg.c_sl.unwrap_or(s), None),
        _ => {
            let pilot = pilot_statistics(model, acfg.pilot_levels, acfg.pilot_samples, k as f64 * q, &seed.child(u64::MAX))?;
            let c = calibrate(&pilot, k, acfg.beta, model.refinement_factor(), acfg.c_ml)?;
            (acfg.c_alpha.unwrap_or(c.c_alpha), acfg.c_star.unwrap_or(c.c_star), acfg.c_sl.unwrap_or(c.c_sl), Some(c))
        }
    };
    let n_seq: Vec<f64> = (1..=model.max_level()).map(|l| model.size(l) as f64).collect();
    let plans = acfg
        .epsilons
        .iter()
        .map(|&eps| {
            allocate(&PlanInputs {
                alpha: acfg.alpha,
                beta: acfg.beta,
                gamma: acfg.gamma,
                p: space.p,
                epsilon: eps,
                c_alpha,
                c_star,
                n_seq: n_seq.clone(),
                max_samples: acfg.max_samples,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let deepest = plans.iter().map(|p| p.levels).max().unwrap_or(1);
    let reference_level = deepest + 2;
    if reference_level > model.max_level() {
        return Err(Error::LevelsExhausted {
            required: model.size(model.max_level()) as f64 * 2f64.powi((reference_level - model.max_level()) as i32),
            available: model.max_level(),
        });
    }
    let largest = plans.iter().flat_map(|p| p.samples.iter().copied()).max().unwrap_or(1);
    let reference_samples = acfg
        .reference_samples
        .unwrap_or((acfg.reference_factor * largest as f64).ceil() as usize);
    let target = model.space(reference_level)?;
    let hilbert = k == 2 && space.p == 2.0 && matches!(target.kind(), SpaceKind::FemW1p1d | SpaceKind::SequenceLp);
    let ref_seed = seed.child(u64::MAX - 1);
    enum Reference {
        Gram(HilbertGram),
        Rep(ReferenceMoment),
    }
    let reference = if hilbert {
        Reference::Gram(single_level_hilbert_gram(model, reference_level, reference_samples, &ref_seed, &target)?.0)
    } else {
        let samples = (0..reference_samples)
            .into_par_iter()
            .map(|j| model.sample_fine(reference_level, &ref_seed.child(j as u64)).map(|s| s.0))
            .collect::<Result<Vec<_>>>()?;
        Reference::Rep(ReferenceMoment::fine_level_average(crate::estimators::MomentEstimate {
            rep: crate::estimators::mc_from_samples(k, &target, samples)?,
            k,
            meta: crate::estimators::EstimateMeta {
                samples: vec![reference_samples],
                seed: ref_seed.label(),
                work_units: 0.0,
            },
        }))
    };
    let mut rows = Vec::with_capacity(plans.len());
    for (i, plan) in plans.iter().enumerate() {
        let m: Vec<usize> = plan.samples.iter().map(|&x| x as usize).collect();
        let s = seed.child(i as u64);
        let mut errors = Vec::with_capacity(runs);
        let mut work = 0.0;
        for r in 0..runs {
            let rs = s.child(r as u64);
            let (e, w) = match &reference {
                Reference::Gram(g_ref) => {
                    let (mut g, w) = mlmc_hilbert_gram(model, &m, &rs, &target)?;
                    g.add_gram(-1.0, g_ref)?;
                    let (spec, nuc) = g.norms();
                    (if norm == NormKind::HilbertNuclear { nuc } else { spec }, w)
                }
                Reference::Rep(r) => {
                    let mut est = mlmc_estimate(model, k, &m, &rs)?;
                    est.rep = crate::estimators::interpolate_rep(&est.rep, &target)?;
                    let w = est.meta.work_units;
                    (error_in_norm(&est, r, norm, opts)?, w)
                }
            };
            errors.push(e);
            work += w;
        }
        let (error, se) = lq_error(&errors, q, &s)?;
        let sl = single_level_plan(plan.epsilon, acfg.alpha, acfg.gamma, space.p, c_alpha, c_sl, &n_seq)?;
        let sl_seed = seed.path(&[u64::MAX - 2, i as u64]);
        let sl_errors = (0..runs)
            .map(|r| {
                let rs = sl_seed.child(r as u64);
                match &reference {
                    Reference::Gram(g_ref) => {
                        let (mut g, _) = single_level_hilbert_gram(model, sl.level, sl.samples as usize, &rs, &target)?;
                        g.add_gram(-1.0, g_ref)?;
                        let (spec, nuc) = g.norms();
                        Ok(if norm == NormKind::HilbertNuclear { nuc } else { spec })
                    }
                    Reference::Rep(r) => {
                        let sampler = LevelSampler {
                            model,
                            level: sl.level,
                            target: target.clone(),
                        };
                        let est = mc_kth_moment(&sampler, k, sl.samples as usize, &rs)?;
                        error_in_norm(&est, r, norm, opts)
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let (single_level_error, _) = lq_error(&sl_errors, q, &sl_seed)?;
        rows.push(MlmcRow {
            epsilon: plan.epsilon,
            levels: plan.levels,
            samples: plan.samples.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";"),
            error,
            se,
            work_units: work / runs as f64,
            predicted_cost: predicted_cost(plan).cost,
            single_level_cost: sl.cost,
            single_level_error,
            norm_kind: if hilbert && norm != NormKind::HilbertNuclear { NormKind::HilbertSpectral } else { norm },
            seed: s.label(),
        });
    }
    let cost_points: Vec<RatePoint> = rows
        .iter()
        .map(|r| RatePoint {
            n: r.epsilon,
            err: r.work_units,
            se: 0.0,
        })
        .collect();
    let pp = crate::spaces::conjugate_exponent(space.p);
    Ok(MlmcReport {
        calibration,
        predicted_exponent: plans.first().map_or(f64::NAN, |p| predicted_cost(p).exponent),
        single_level_exponent: acfg.gamma / acfg.alpha + pp,
        plans,
        rows,
        reference_level,
        reference_samples,
        cost_fit: rate_regression(&cost_points).ok(),
    })
}

/// `n* = ⌈M / (1 − 2^{−q/(q+M)})⌉`, the smallest dimension at which the
/// projective-norm error of the `M`-sample second-moment estimate of a
/// uniform basis vector is at least 1.
pub fn counterexample_n_star(q: f64, m: usize) -> usize {
    let mf = m as f64;
    (mf / (1.0 - 2f64.powf(-q / (q + mf)))).ceil() as usize
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CounterexampleReport {
    pub q: f64,
    pub m: usize,
    pub n: usize,
    pub runs: usize,
    pub pi_error: f64,
    pub pi_se: f64,
    pub eps_error: f64,
    pub eps_se: f64,
    /// `2 (1 − M/n)^{(q+M)/q}`.
    pub pi_lower_bound: f64,
    pub seed: String,
}

/// Standard MC second-moment estimation of a uniform basis vector of
/// `ℓ_2^n` (`n = n*(q, M)` unless given), errors in the nuclear and
/// spectral norms over the same `R` runs.
pub fn counterexample_experiment(q: f64, m: usize, n: Option<usize>, runs: usize, seed: &SeedSpec) -> Result<CounterexampleReport> {
    if !(q >= 1.0) || m == 0 {
        return Err(Error::invalid("need q ≥ 1 and M ≥ 1"));
    }
    let n = n.unwrap_or_else(|| counterexample_n_star(q, m));
    let space = SpaceDescriptor::sequence(n, 2.0)?;
    let model = ModelConfig::UniformBasis { n, signed: false };
    let reference = sampler_reference(&model, &space, 2)?;
    let sampler = UniformBasis { space, signed: false };
    let opts = InjectiveOptions::default();
    let errs = (0..runs)
        .into_par_iter()
        .map(|r| {
            let est = mc_kth_moment(&sampler, 2, m, &seed.child(r as u64))?;
            Ok((
                error_in_norm(&est, &reference, NormKind::HilbertNuclear, &opts)?,
                error_in_norm(&est, &reference, NormKind::HilbertSpectral, &opts)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let pi: Vec<f64> = errs.iter().map(|e| e.0).collect();
    let eps: Vec<f64> = errs.iter().map(|e| e.1).collect();
    let (pi_error, pi_se) = lq_error(&pi, q, seed)?;
    let (eps_error, eps_se) = lq_error(&eps, q, seed)?;
    let ratio = (1.0 - m as f64 / n as f64).max(0.0);
    Ok(CounterexampleReport {
        q,
        m,
        n,
        runs,
        pi_error,
        pi_se,
        eps_error,
        eps_se,
        pi_lower_bound: 2.0 * ratio.powf((q + m as f64) / q),
        seed: seed.label(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    McRate,
    MlmcRun,
    Allocate,
    TensorNorm,
    Counterexample,
    PropertySuite,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::McRate => "mc-rate",
            Command::MlmcRun => "mlmc-run",
            Command::Allocate => "allocate",
            Command::TensorNorm => "tensor-norm",
            Command::Counterexample => "counterexample",
            Command::PropertySuite => "property-suite",
        }
    }
}

/// Summary of one invocation.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: String,
    pub wall_time_s: f64,
    pub work_units: f64,
    pub outputs: Vec<String>,
    pub passed: bool,
}

struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        std::fs::write(self.dir.join(name), contents)?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        self.write(name, &String::from_utf8_lossy(&bytes))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, &s)
    }
}

#[derive(Serialize)]
struct RateCsvRow<'a> {
    n: f64,
    error: f64,
    se: f64,
    work_units: f64,
    norm_kind: &'a str,
    seed: &'a str,
}

fn norm_name(n: NormKind) -> &'static str {
    match n {
        NormKind::EpsS => "eps_s",
        NormKind::PiUpper => "pi_upper",
        NormKind::HilbertSpectral => "hilbert_spectral",
        NormKind::HilbertNuclear => "hilbert_nuclear",
    }
}

/// Runs `command` with `cfg`, writing results and `manifest.json` to `out`.
/// Returns the manifest; `passed` is `false` when a property check failed.
pub fn run_experiment(command: Command, cfg: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    let start = Instant::now();
    std::fs::create_dir_all(out)?;
    let mut o = Outputs {
        dir: out.to_path_buf(),
        written: Vec::new(),
    };
    let seed = SeedSpec::new(cfg.run.seed);
    let mut work = 0.0;
    let mut passed = true;
    let opts = |restarts: usize| InjectiveOptions {
        restarts,
        seed: cfg.run.seed,
        ..InjectiveOptions::default()
    };
    match command {
        Command::McRate => {
            let est = cfg.estimator()?;
            let q = cfg.space.q();
            let rows = match (build_model(cfg)?, est.kind) {
                (Model::Sampler(s), EstimatorKind::Mc) => {
                    let reference = sampler_reference(cfg.model.as_ref().expect("model was built"), s.space(), cfg.space.k)?;
                    mc_rate(s.as_ref(), &reference, cfg.space.k, &est.m, cfg.run.runs, q, est.norm, &opts(est.restarts), &seed)?
                }
                (Model::Hierarchy(h), EstimatorKind::CouplingRate) => coupling_rate(h.as_ref(), &est.levels, est.samples, q, &seed)?,
                (Model::Hierarchy(h), EstimatorKind::StrongError) => {
                    let rl = est.reference_level.unwrap_or(h.max_level());
                    strong_error_rate(h.as_ref(), &est.levels, rl, est.samples, q, &seed)?
                }
                (Model::Hierarchy(h), EstimatorKind::SingleLevel) => {
                    let level = est.level.ok_or_else(|| Error::Config("single_level needs estimator.level".into()))?;
                    let rl = est.reference_level.unwrap_or((level + 2).min(h.max_level()));
                    let target = h.space(rl)?;
                    let samples = (0..est.samples)
                        .into_par_iter()
                        .map(|j| h.sample_fine(rl, &seed.path(&[u64::MAX, j as u64])).map(|s| s.0))
                        .collect::<Result<Vec<_>>>()?;
                    let reference = ReferenceMoment {
                        rep: crate::estimators::mc_from_samples(cfg.space.k, &target, samples)?,
                        provenance: crate::estimators::Provenance::FineLevelAverage,
                    };
                    let sampler = LevelSampler {
                        model: h.as_ref(),
                        level,
                        target,
                    };
                    mc_rate(&sampler, &reference, cfg.space.k, &est.m, cfg.run.runs, q, est.norm, &opts(est.restarts), &seed)?
                }
                _ => return Err(Error::Config("estimator kind does not fit the model kind".into())),
            };
            work = rows.iter().map(|r| r.work_units).sum();
            let kind = if matches!(est.kind, EstimatorKind::CouplingRate | EstimatorKind::StrongError) {
                "space_norm"
            } else {
                norm_name(est.norm)
            };
            let csv_rows: Vec<RateCsvRow> = rows
                .iter()
                .map(|r| RateCsvRow {
                    n: r.n,
                    error: r.error,
                    se: r.se,
                    work_units: r.work_units,
                    norm_kind: kind,
                    seed: &r.seed,
                })
                .collect();
            o.csv("rates.csv", &csv_rows)?;
            let fit = rate_regression(&points(&rows)).ok();
            o.json(
                "summary.json",
                &serde_json::json!({"schema_version": SCHEMA_VERSION, "command": command.name(), "fit": fit}),
            )?;
        }
        Command::MlmcRun => {
            let acfg = cfg.allocator()?;
            let norm = cfg.estimator.as_ref().map_or(NormKind::EpsS, |e| e.norm);
            let restarts = cfg.estimator.as_ref().map_or(32, |e| e.restarts);
            let Model::Hierarchy(h) = build_model(cfg)? else {
                return Err(Error::Config("mlmc-run needs a level hierarchy model".into()));
            };
            let report = mlmc_experiment(h.as_ref(), &cfg.space, acfg, cfg.run.runs, norm, &opts(restarts), &seed)?;
            work = report.rows.iter().map(|r| r.work_units * cfg.run.runs as f64).sum();
            o.csv("mlmc.csv", &report.rows)?;
            o.json("plans.json", &report.plans)?;
            o.json(
                "summary.json",
                &serde_json::json!({
                    "schema_version": SCHEMA_VERSION,
                    "command": command.name(),
                    "calibration": report.calibration,
                    "reference_level": report.reference_level,
                    "reference_samples": report.reference_samples,
                    "cost_fit": report.cost_fit,
                    "predicted_exponent": report.predicted_exponent,
                    "single_level_exponent": report.single_level_exponent,
                }),
            )?;
        }
        Command::Allocate => {
            let acfg = cfg.allocator()?;
            let (c_alpha, c_star, calibration) = match (acfg.c_alpha, acfg.c_star) {
                (Some(a), Some(s)) => (a, s, None),
                _ => {
                    let Model::Hierarchy(h) = build_model(cfg)? else {
                        return Err(Error::Config("calibration needs a level hierarchy model; give c_alpha and c_star".into()));
                    };
                    let pilot = pilot_statistics(h.as_ref(), acfg.pilot_levels, acfg.pilot_samples, cfg.space.k as f64 * cfg.space.q(), &seed.child(u64::MAX))?;
                    let c = calibrate(&pilot, cfg.space.k, acfg.beta, h.refinement_factor(), acfg.c_ml)?;
                    (acfg.c_alpha.unwrap_or(c.c_alpha), acfg.c_star.unwrap_or(c.c_star), Some(c))
                }
            };
            let n_seq: Vec<f64> = match cfg.model.as_ref().map(|_| build_model(cfg)).transpose()? {
                Some(Model::Hierarchy(h)) => (1..=h.max_level()).map(|l| h.size(l) as f64).collect(),
                _ => (0..40).map(|l| 2f64.powi(l)).collect(),
            };
            let plans = acfg
                .epsilons
                .iter()
                .map(|&eps| {
                    allocate(&PlanInputs {
                        alpha: acfg.alpha,
                        beta: acfg.beta,
                        gamma: acfg.gamma,
                        p: cfg.space.p,
                        epsilon: eps,
                        c_alpha,
                        c_star,
                        n_seq: n_seq.clone(),
                        max_samples: acfg.max_samples,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            #[derive(Serialize)]
            struct Row {
                epsilon: f64,
                levels: usize,
                samples: String,
                s_l: f64,
                regime: crate::allocator::Regime,
                predicted_cost: f64,
                exponent: f64,
                log_power: f64,
                error_budget: f64,
            }
            let rows: Vec<Row> = plans
                .iter()
                .map(|p| {
                    let c = predicted_cost(p);
                    Row {
                        epsilon: p.epsilon,
                        levels: p.levels,
                        samples: p.samples.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";"),
                        s_l: p.s_l,
                        regime: p.regime,
                        predicted_cost: c.cost,
                        exponent: c.exponent,
                        log_power: c.log_power,
                        error_budget: p.error_budget(),
                    }
                })
                .collect();
            o.csv("allocate.csv", &rows)?;
            o.json(
                "plans.json",
                &serde_json::json!({"schema_version": SCHEMA_VERSION, "calibration": calibration, "plans": plans}),
            )?;
        }
        Command::TensorNorm => {
            let t = cfg.tensor.as_ref().ok_or_else(|| Error::Config("missing [tensor] section".into()))?;
            let n = t.terms.first().map_or(0, |t| t.coeffs.len());
            let space = SpaceDescriptor::sequence(n, cfg.space.p)?;
            let terms = t
                .terms
                .iter()
                .map(|t| Ok((t.c, BanachVector::new(space.clone(), t.coeffs.clone())?)))
                .collect::<Result<Vec<_>>>()?;
            let rep = SymmetricTensorRep::from_terms(cfg.space.k, space, terms)?;
            let restarts = cfg.estimator.as_ref().map_or(32, |e| e.restarts);
            let NormReport {
                value,
                certificate,
                exact,
                restarts,
                seed: s,
            } = injective_norm_with(&rep, &opts(restarts))?;
            let k = cfg.space.k as i32;
            let kf = k as f64;
            // ε ≤ (k^k/k!) ε_s; the projective norm dominates both
            let polarization = kf.powi(k) / (1..=k).map(f64::from).product::<f64>();
            let pi_upper = projective_norm_upper(&rep);
            o.json(
                "tensor_norm.json",
                &serde_json::json!({
                    "schema_version": SCHEMA_VERSION,
                    "eps_s": value,
                    "exact": exact,
                    "eps_upper": (polarization * value).min(pi_upper),
                    "pi_upper": pi_upper,
                    "restarts": restarts,
                    "seed": s,
                    "certificate": certificate.rep(),
                }),
            )?;
        }
        Command::Counterexample => {
            let est = cfg.estimator()?;
            let q = cfg.space.q.unwrap_or(1.0);
            let reports = est
                .m
                .iter()
                .map(|&m| counterexample_experiment(q, m, est.n, cfg.run.runs, &seed.child(m as u64)))
                .collect::<Result<Vec<_>>>()?;
            o.csv("counterexample.csv", &reports)?;
        }
        Command::PropertySuite => {
            let checks = probabilistic_property_suite(cfg.run.trials, &seed)?;
            passed = checks.iter().all(|c| c.pass);
            #[derive(Serialize)]
            struct Row<'a> {
                check: &'a str,
                lhs: f64,
                rhs: f64,
                slack: f64,
                pass: bool,
                seed: String,
            }
            let rows: Vec<Row> = checks
                .iter()
                .map(|c| Row {
                    check: &c.check_name,
                    lhs: c.lhs,
                    rhs: c.rhs,
                    slack: c.slack,
                    pass: c.pass,
                    seed: seed.label(),
                })
                .collect();
            o.csv("properties.csv", &rows)?;
        }
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        command: command.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.run.seed,
        config: cfg.canonical()?,
        wall_time_s: start.elapsed().as_secs_f64(),
        work_units: work,
        outputs: o.written.clone(),
        passed,
    };
    o.json("manifest.json", &manifest)?;
    Ok(manifest)
}

/// Samples `X_level` of a hierarchy, expressed on `target`.
pub struct LevelSampler<'a> {
    pub model: &'a dyn LevelHierarchy,
    pub level: usize,
    pub target: Arc<SpaceDescriptor>,
}

impl Sampler for LevelSampler<'_> {
    fn space(&self) -> &Arc<SpaceDescriptor> {
        &self.target
    }

    fn sample(&self, seed: &SeedSpec) -> Result<BanachVector> {
        let (x, _) = self.model.sample_fine(self.level, seed)?;
        interpolate(&x, &self.target)
    }
}

/// Renders a rate table as aligned text (used by the CLI).
pub fn format_rates(rows: &[RateRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let _ = writeln!(s, "{:>12} {:>14.6e} {:>12.3e}", r.n, r.error, r.se);
    }
    s
}
