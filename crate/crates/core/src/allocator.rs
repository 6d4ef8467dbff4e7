//! Level and sample-count selection for multilevel estimation under the
//! bias/coupling/cost model
//!
//! * bias      `‖𝕄^k[X] − 𝕄^k[X_L]‖ ≤ C_α N_L^{−α}`,
//! * coupling  `‖X_ℓ − X_{ℓ−1}‖_{L_{kq}} ≤ C_β N_ℓ^{−β}`,
//! * cost      `𝒞_ℓ ≤ C_γ N_ℓ^γ`,
//!
//! in a space of type `p ∈ (1, 2]`, `1/p + 1/p′ = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spaces::conjugate_exponent;

/// Sign of `βp′ − γ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    BetaDominant,
    Critical,
    GammaDominant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanInputs {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub p: f64,
    pub epsilon: f64,
    pub c_alpha: f64,
    pub c_star: f64,
    /// `N_1, N_2, …` (increasing).
    pub n_seq: Vec<f64>,
    /// Largest admissible `M_ℓ`.
    #[serde(default = "default_cap")]
    pub max_samples: f64,
}

fn default_cap() -> f64 {
    1e9
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlmcPlan {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub p: f64,
    pub p_prime: f64,
    pub epsilon: f64,
    pub c_alpha: f64,
    pub c_star: f64,
    /// `N_1, …, N_L`.
    pub n_seq: Vec<f64>,
    pub levels: usize,
    pub samples: Vec<u64>,
    pub s_l: f64,
    pub regime: Regime,
}

/// Asymptotic cost `ε^{−exponent} |log ε|^{log_power}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostPrediction {
    /// `Σ_ℓ M_ℓ N_ℓ^γ`.
    pub cost: f64,
    pub regime: Regime,
    pub exponent: f64,
    pub log_power: f64,
}

/// Ceiling that ignores relative rounding noise below `1e−12`, so powers
/// that are integers in exact arithmetic are not bumped up by one.
fn ceil_rounded(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-12 * x.abs() {
        r.max(1.0)
    } else {
        x.ceil().max(1.0)
    }
}

fn regime_of(beta: f64, gamma: f64, p_prime: f64) -> Regime {
    let d = beta * p_prime - gamma;
    if d.abs() <= 1e-12 * (beta * p_prime).abs().max(gamma.abs()).max(1.0) {
        Regime::Critical
    } else if d > 0.0 {
        Regime::BetaDominant
    } else {
        Regime::GammaDominant
    }
}

/// Smallest `L` (1-based) with `N_L^{−α} < min(C_α^{−1}, 1) ε/2`.
pub fn choose_level(epsilon: f64, alpha: f64, c_alpha: f64, n_seq: &[f64]) -> Result<usize> {
    if !(epsilon > 0.0 && epsilon <= 0.5) {
        return Err(Error::invalid(format!("ε = {epsilon} must lie in (0, 1/2]")));
    }
    if !(alpha > 0.0 && c_alpha > 0.0) {
        return Err(Error::invalid("α and C_α must be positive"));
    }
    check_sizes(n_seq)?;
    let bound = (1.0 / c_alpha).min(1.0) * epsilon / 2.0;
    match n_seq.iter().position(|n| n.powf(-alpha) < bound) {
        Some(i) => Ok(i + 1),
        None => Err(Error::LevelsExhausted {
            required: bound.powf(-1.0 / alpha),
            available: n_seq.len(),
        }),
    }
}

fn check_sizes(n_seq: &[f64]) -> Result<()> {
    if n_seq.is_empty() || n_seq.iter().any(|n| !(*n >= 1.0)) || n_seq.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("level sizes must be increasing and at least 1"));
    }
    Ok(())
}

/// Fills `L`, `S_L` and `M_ℓ = ⌈C_⋆^{p′} N_L^{αp′} S_L^{p′} N_ℓ^{−(β+γ)p′/(p′+1)}⌉`.
pub fn allocate(inp: &PlanInputs) -> Result<MlmcPlan> {
    if !(inp.p > 1.0 && inp.p <= 2.0) {
        return Err(Error::invalid(format!(
            "type p = {} must lie in (1, 2]; p = 1 gives p′ = ∞ and no admissible allocation",
            inp.p
        )));
    }
    if !(inp.beta > 0.0 && inp.gamma > 0.0 && inp.c_star > 0.0) {
        return Err(Error::invalid("β, γ and C_⋆ must be positive"));
    }
    let pp = conjugate_exponent(inp.p);
    let levels = choose_level(inp.epsilon, inp.alpha, inp.c_alpha, &inp.n_seq)?;
    let ns = &inp.n_seq[..levels];
    let n_l = ns[levels - 1];
    let s_l: f64 = ns.iter().map(|n| n.powf((inp.gamma - inp.beta * pp) / (pp + 1.0))).sum();
    let lead = (inp.c_star * n_l.powf(inp.alpha) * s_l).powf(pp);
    let mut samples = Vec::with_capacity(levels);
    for (i, n) in ns.iter().enumerate() {
        let m = ceil_rounded(lead * n.powf(-(inp.beta + inp.gamma) * pp / (pp + 1.0)));
        if m > inp.max_samples || !m.is_finite() {
            return Err(Error::SampleCap {
                level: i + 1,
                requested: m,
                cap: inp.max_samples,
            });
        }
        samples.push(m as u64);
    }
    Ok(MlmcPlan {
        alpha: inp.alpha,
        beta: inp.beta,
        gamma: inp.gamma,
        p: inp.p,
        p_prime: pp,
        epsilon: inp.epsilon,
        c_alpha: inp.c_alpha,
        c_star: inp.c_star,
        n_seq: ns.to_vec(),
        levels,
        samples,
        s_l,
        regime: regime_of(inp.beta, inp.gamma, pp),
    })
}

impl MlmcPlan {
    /// `C_α N_L^{−α} + C_⋆ Σ_ℓ M_ℓ^{−1/p′} N_ℓ^{−β}`, which the construction
    /// keeps below `ε`.
    pub fn error_budget(&self) -> f64 {
        let n_l = self.n_seq[self.levels - 1];
        self.c_alpha * n_l.powf(-self.alpha)
            + self.c_star
                * self
                    .n_seq
                    .iter()
                    .zip(&self.samples)
                    .map(|(n, m)| (*m as f64).powf(-1.0 / self.p_prime) * n.powf(-self.beta))
                    .sum::<f64>()
    }
}

/// Cost `Σ_ℓ M_ℓ N_ℓ^γ` with the asymptotic regime and `ε`-exponent.
pub fn predicted_cost(plan: &MlmcPlan) -> CostPrediction {
    let cost = plan
        .n_seq
        .iter()
        .zip(&plan.samples)
        .map(|(n, m)| *m as f64 * n.powf(plan.gamma))
        .sum();
    let (a, b, g, pp) = (plan.alpha, plan.beta, plan.gamma, plan.p_prime);
    let (exponent, log_power) = match plan.regime {
        Regime::BetaDominant => ((g / a).max(pp), 0.0),
        Regime::Critical => {
            if g / a > pp {
                (g / a, 0.0)
            } else {
                (pp, pp + 1.0)
            }
        }
        Regime::GammaDominant => ((g / a).max(pp + (g - b * pp) / a), 0.0),
    };
    CostPrediction {
        cost,
        regime: plan.regime,
        exponent,
        log_power,
    }
}

/// Single-level reference: level `L` from the same bias criterion and
/// `M = ⌈(2 C_SL / ε)^{p′}⌉` samples of `X_L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingleLevelPlan {
    pub level: usize,
    pub samples: u64,
    pub cost: f64,
    /// `γ/α + p′`.
    pub exponent: f64,
}

pub fn single_level_plan(epsilon: f64, alpha: f64, gamma: f64, p: f64, c_alpha: f64, c_sl: f64, n_seq: &[f64]) -> Result<SingleLevelPlan> {
    if !(p > 1.0 && p <= 2.0) {
        return Err(Error::invalid(format!("type p = {p} must lie in (1, 2]")));
    }
    let pp = conjugate_exponent(p);
    let level = choose_level(epsilon, alpha, c_alpha, n_seq)?;
    let m = ceil_rounded((2.0 * c_sl / epsilon).powf(pp));
    Ok(SingleLevelPlan {
        level,
        samples: m as u64,
        cost: m * n_seq[level - 1].powf(gamma),
        exponent: gamma / alpha + pp,
    })
}

/// Pilot statistics of one level: `N_ℓ`, `‖X_ℓ − X_{ℓ−1}‖_{L_{kq}}`,
/// `‖X_ℓ‖_{L_{kq}}` and `‖X_{ℓ−1}‖_{L_{kq}}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PilotLevel {
    pub n: f64,
    pub diff: f64,
    pub fine: f64,
    pub coarse: f64,
}

/// Constants fitted from pilot levels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub c_beta: f64,
    pub c_stab: f64,
    /// Largest pilot value of `Σ_{i<k} (C(k,i+1) d^i + f^i) c^{k−i−1}`.
    pub k_sum: f64,
    pub c_star: f64,
    pub c_alpha: f64,
    /// `C^{SL}`-surrogate `c_ml · C_stab^k`.
    pub c_sl: f64,
}

/// Fits `C_β = max_ℓ ‖X_ℓ − X_{ℓ−1}‖ N_ℓ^β`, `C_stab = max_ℓ ‖X_ℓ‖`, and
/// derives `C_⋆ = c_ml C_β · k_sum` and the bias constant
/// `C_α = k C_stab^{k−1} C_β / (A^β − 1)` (geometric tail of level
/// differences, `α = β`).
pub fn calibrate(pilot: &[PilotLevel], k: usize, beta: f64, refinement: f64, c_ml: f64) -> Result<Calibration> {
    if pilot.is_empty() {
        return Err(Error::invalid("calibration needs at least one pilot level"));
    }
    if !(refinement > 1.0 && beta > 0.0 && c_ml > 0.0) {
        return Err(Error::invalid("calibration needs A > 1, β > 0 and a positive C^ML surrogate"));
    }
    let c_beta = pilot.iter().map(|l| l.diff * l.n.powf(beta)).fold(0.0, f64::max);
    let c_stab = pilot.iter().map(|l| l.fine.max(l.coarse)).fold(0.0, f64::max);
    let k_sum = pilot
        .iter()
        .map(|l| {
            (0..k)
                .map(|i| (binom(k, i + 1) * l.diff.powi(i as i32) + l.fine.powi(i as i32)) * l.coarse.powi((k - i - 1) as i32))
                .sum::<f64>()
        })
        .fold(0.0, f64::max);
    if !(c_beta > 0.0 && k_sum > 0.0) {
        return Err(Error::Numerical("pilot statistics are degenerate (zero level differences)".into()));
    }
    let kf = k as f64;
    Ok(Calibration {
        c_beta,
        c_stab,
        k_sum,
        c_star: c_ml * c_beta * k_sum,
        c_alpha: kf * c_stab.powi(k as i32 - 1) * c_beta / (refinement.powf(beta) - 1.0),
        c_sl: c_ml * c_stab.powi(k as i32),
    })
}

fn binom(n: usize, r: usize) -> f64 {
    (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pow2(levels: usize) -> Vec<f64> {
        (1..=levels).map(|l| 2f64.powi(l as i32)).collect()
    }

    fn inputs(eps: f64) -> PlanInputs {
        PlanInputs {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            p: 2.0,
            epsilon: eps,
            c_alpha: 1.0,
            c_star: 1.0,
            n_seq: pow2(20),
            max_samples: 1e12,
        }
    }

    #[test]
    fn level_choice() {
        let n = pow2(10);
        assert_eq!(choose_level(0.25, 1.0, 1.0, &n).unwrap(), 4);
        assert_eq!(choose_level(0.5, 1.0, 1.0, &n).unwrap(), 3);
        assert_eq!(choose_level(0.5, 1.0, 0.1, &n).unwrap(), 3);
        assert_eq!(choose_level(0.5, 1.0, 4.0, &n).unwrap(), 5);
        match choose_level(1e-4, 1.0, 1.0, &n) {
            Err(Error::LevelsExhausted { required, available }) => {
                assert!((required - 2e4).abs() < 1e-6);
                assert_eq!(available, 10);
            }
            other => panic!("{other:?}"),
        }
        assert!(choose_level(0.6, 1.0, 1.0, &n).is_err());
    }

    #[test]
    fn allocation_formula() {
        let plan = allocate(&inputs(0.25)).unwrap();
        assert_eq!(plan.levels, 4);
        let s4: f64 = (1..=4).map(|l| 2f64.powf(-l as f64 / 3.0)).sum();
        assert!((plan.s_l - s4).abs() < 1e-15);
        for (l, m) in (1..=4).zip(&plan.samples) {
            let want = (256.0 * s4 * s4 * 2f64.powf(-4.0 * l as f64 / 3.0)).ceil() as u64;
            assert_eq!(*m, want);
        }
        assert_eq!(plan.regime, Regime::BetaDominant);
        assert!(plan.samples.windows(2).all(|w| w[1] <= w[0]));
        assert!(plan.error_budget() < plan.epsilon);
    }

    #[test]
    fn regimes_and_exponents() {
        let mut inp = inputs(0.1);
        inp.gamma = 2.0;
        let plan = allocate(&inp).unwrap();
        assert_eq!(plan.regime, Regime::Critical);
        assert!((plan.s_l - plan.levels as f64).abs() < 1e-12);
        let c = predicted_cost(&plan);
        assert_eq!((c.exponent, c.log_power), (2.0, 3.0));
        inp.gamma = 3.0;
        let c = predicted_cost(&allocate(&inp).unwrap());
        assert_eq!(c.regime, Regime::GammaDominant);
        assert_eq!(c.exponent, 3.0);
        inp.beta = 0.5;
        inp.gamma = 1.5;
        let c = predicted_cost(&allocate(&inp).unwrap());
        assert_eq!(c.exponent, 2.5);
        inp.beta = 1.0;
        inp.gamma = 1.0;
        let c = predicted_cost(&allocate(&inp).unwrap());
        assert_eq!((c.regime, c.exponent), (Regime::BetaDominant, 2.0));
        let sl = single_level_plan(0.1, 1.0, 1.0, 2.0, 1.0, 1.0, &pow2(20)).unwrap();
        assert_eq!(sl.exponent, 3.0);
        assert!(sl.exponent >= c.exponent);
    }

    #[test]
    fn single_level_degenerate_plan() {
        let mut inp = inputs(0.5);
        inp.n_seq = vec![8.0, 16.0];
        let plan = allocate(&inp).unwrap();
        assert_eq!(plan.levels, 1);
        // C_⋆² N_1² S_1² N_1^{−4/3} with S_1 = N_1^{−1/3}: 64 · 8^{−2} = 1
        assert_eq!(plan.s_l, 0.5);
        assert_eq!(plan.samples[0], 1);
    }

    #[test]
    fn structural_errors() {
        let mut inp = inputs(0.25);
        inp.p = 1.0;
        assert!(allocate(&inp).is_err());
        let mut inp = inputs(1.0 / 1024.0);
        inp.max_samples = 1e3;
        assert!(matches!(allocate(&inp), Err(Error::SampleCap { level: 1, .. })));
    }

    #[test]
    fn calibration_constants() {
        let pilot = [
            PilotLevel { n: 2.0, diff: 0.5, fine: 1.0, coarse: 0.0 },
            PilotLevel { n: 4.0, diff: 0.2, fine: 1.1, coarse: 1.0 },
        ];
        let c = calibrate(&pilot, 2, 1.0, 2.0, 1.0).unwrap();
        assert_eq!(c.c_beta, 1.0);
        assert_eq!(c.c_stab, 1.1);
        // level 2: (2·1 + 1)·1 + (1·0.2 + 1.1) = 4.3
        assert!((c.k_sum - 4.3).abs() < 1e-12);
        assert!((c.c_star - 4.3).abs() < 1e-12);
        assert!((c.c_alpha - 2.2).abs() < 1e-12);
    }
}
