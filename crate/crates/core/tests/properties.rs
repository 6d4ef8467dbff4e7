use injective_mlmc::allocator::{allocate, PlanInputs};
use injective_mlmc::spaces::{dual_pair, norming_functional, BanachVector, SpaceDescriptor};
use injective_mlmc::tensor::{hilbert_k2_oracles, injective_norm, projective_norm_upper, SymmetricTensorRep};
use proptest::prelude::*;

fn vec_in(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, n)
}

fn p_value() -> impl Strategy<Value = f64> {
    prop_oneof![Just(1.0), Just(1.5), Just(2.0), Just(3.0), Just(8.0)]
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lp_norm_axioms(p in p_value(), (x, y) in (1usize..7).prop_flat_map(|n| (vec_in(n), vec_in(n))), a in -4.0..4.0f64) {
        let s = SpaceDescriptor::sequence(x.len(), p).unwrap();
        let u = BanachVector::new(s.clone(), x).unwrap();
        let v = BanachVector::new(s, y).unwrap();
        prop_assert!(u.add_scaled(1.0, &v).unwrap().norm() <= u.norm() + v.norm() + 1e-12);
        prop_assert!(close(u.scaled(a).norm(), a.abs() * u.norm(), 1e-12));
        prop_assert!(u.norm() >= 0.0);
    }

    #[test]
    fn norming_functional_attains(p in p_value(), x in (1usize..7).prop_flat_map(vec_in)) {
        let s = SpaceDescriptor::sequence(x.len(), p).unwrap();
        let u = BanachVector::new(s, x).unwrap();
        let f = norming_functional(&u);
        prop_assert!(f.dual_norm() <= 1.0 + 1e-12);
        prop_assert!(close(dual_pair(&f, &u).unwrap(), u.norm(), 1e-10));
        let g = f.projected();
        prop_assert!(g.dual_norm() <= 1.0 + 1e-12);
    }

    #[test]
    fn elementary_tensor_norm_is_power(p in prop_oneof![Just(1.5), Just(2.0), Just(3.0)], k in 1usize..4, x in (1usize..5).prop_flat_map(vec_in)) {
        let s = SpaceDescriptor::sequence(x.len(), p).unwrap();
        let u = BanachVector::new(s, x).unwrap();
        let t = SymmetricTensorRep::elementary(k, u.clone()).unwrap();
        let r = injective_norm(&t).unwrap();
        prop_assert!(close(r.value, u.norm().powi(k as i32), 1e-8), "{} vs {}", r.value, u.norm().powi(k as i32));
        prop_assert!(close(projective_norm_upper(&t), r.value, 1e-8));
    }

    #[test]
    fn injective_below_projective(
        p in prop_oneof![Just(1.5), Just(2.0), Just(3.0)],
        k in 1usize..4,
        terms in (2usize..5).prop_flat_map(|n| prop::collection::vec((-2.0..2.0f64, vec_in(n)), 1..5)),
    ) {
        let n = terms[0].1.len();
        let s = SpaceDescriptor::sequence(n, p).unwrap();
        let terms = terms.into_iter().map(|(c, x)| (c, BanachVector::new(s.clone(), x).unwrap())).collect();
        let t = SymmetricTensorRep::from_terms(k, s, terms).unwrap();
        prop_assert!(injective_norm(&t).unwrap().value <= projective_norm_upper(&t) * (1.0 + 1e-10) + 1e-12);
    }

    #[test]
    fn hilbert_second_moment_triangle_and_order_invariance(
        a in (2usize..6).prop_flat_map(|n| prop::collection::vec((-2.0..2.0f64, vec_in(n)), 1..5)),
        b_coeffs in prop::collection::vec((-2.0..2.0f64, prop::collection::vec(-3.0..3.0f64, 6)), 1..5),
    ) {
        let n = a[0].1.len();
        let s = SpaceDescriptor::sequence(n, 2.0).unwrap();
        let mk = |ts: &[(f64, Vec<f64>)]| {
            let terms = ts.iter().map(|(c, x)| (*c, BanachVector::new(s.clone(), x[..n].to_vec()).unwrap())).collect();
            SymmetricTensorRep::from_terms(2, s.clone(), terms).unwrap()
        };
        let u = mk(&a);
        let v = mk(&b_coeffs);
        let mut sum = u.clone();
        for (c, x) in v.terms() {
            sum.push(*c, x.clone()).unwrap();
        }
        let nu = injective_norm(&u).unwrap().value;
        let nv = injective_norm(&v).unwrap().value;
        let ns = injective_norm(&sum).unwrap().value;
        prop_assert!(ns <= nu + nv + 1e-9 * (nu + nv).max(1.0));
        let (spec, nuc) = hilbert_k2_oracles(&sum).unwrap();
        prop_assert!(close(ns, spec, 1e-8));
        prop_assert!(spec <= nuc + 1e-12);
        let mut rev: Vec<_> = sum.terms().to_vec();
        rev.reverse();
        let reordered = SymmetricTensorRep::from_terms(2, s.clone(), rev).unwrap();
        prop_assert!(reordered.to_dense().unwrap().max_abs_diff(&sum.to_dense().unwrap()) < 1e-12);
        prop_assert!(close(injective_norm(&reordered).unwrap().value, ns, 1e-8));
        let mut canon = sum.clone();
        canon.canonicalize();
        prop_assert!(canon.to_dense().unwrap().max_abs_diff(&sum.to_dense().unwrap()) < 1e-10);
    }

    #[test]
    fn allocation_is_monotone_and_within_budget(
        beta in 0.5..2.0f64,
        gamma in 0.5..3.0f64,
        p in 1.2..=2.0f64,
        c_alpha in 0.1..2.0f64,
        c_star in 0.05..2.0f64,
        e in 2.0..6.0f64,
    ) {
        let n_seq: Vec<f64> = (0..30).map(|l| 2f64.powi(l)).collect();
        let plan = |eps: f64| allocate(&PlanInputs {
            alpha: 1.0,
            beta,
            gamma,
            p,
            epsilon: eps,
            c_alpha,
            c_star,
            n_seq: n_seq.clone(),
            max_samples: 1e15,
        });
        let eps = 2f64.powf(-e);
        let (a, b) = match (plan(eps), plan(eps / 2.0)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                prop_assert!(matches!(e, injective_mlmc::Error::SampleCap { .. }), "{e}");
                return Ok(());
            }
        };
        prop_assert!(a.error_budget() <= eps * (1.0 + 1e-12));
        prop_assert!(b.error_budget() <= eps / 2.0 * (1.0 + 1e-12));
        prop_assert!(b.levels >= a.levels);
        for (ma, mb) in a.samples.iter().zip(&b.samples) {
            prop_assert!(mb >= ma);
        }
        // sample counts decrease with the level when β + γ > 0
        prop_assert!(a.samples.windows(2).all(|w| w[0] >= w[1]));
    }
}
