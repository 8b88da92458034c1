use proptest::prelude::*;

use tmifpe::analysis::{
    g_derivative, g_value, scaled_softmax, AttackScenario, RankedLogits, ScenarioKind,
};
use tmifpe::attack::{pgd_attack_indexed, AttackConfig, AttackSample, Norm};
use tmifpe::losses::{evaluate, LossFamily, LossKind};
use tmifpe::nn::{forward, ModelWeights};
use tmifpe::precision::{round_to_precision, ALL_PROFILES, DOUBLE, SINGLE};
use tmifpe::tstar::{solve_t_star, SolveMethod};

/// Logits with a clear top gap so every scenario is well defined.
fn logits(max_k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-6.0f64..6.0, 2..=max_k).prop_filter("distinct top two", |z| {
        RankedLogits::new(z).map(|r| r.delta() > 1e-3).unwrap_or(false)
    })
}

fn scenario(ranked: &RankedLogits, kind: ScenarioKind, pick: usize) -> AttackScenario {
    let label = if kind.is_stationary() {
        ranked.argmax()
    } else {
        ranked.class_at(2 + pick % (ranked.classes() - 1))
    };
    AttackScenario::for_label(ranked, kind, label).unwrap()
}

fn kind_strategy() -> impl Strategy<Value = ScenarioKind> {
    prop::sample::select(ScenarioKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rounding_idempotent_and_monotone(a in -1e6f64..1e6, b in -1e6f64..1e6) {
        for p in ALL_PROFILES {
            let r = round_to_precision(a, &p);
            prop_assert_eq!(round_to_precision(r, &p), r);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(round_to_precision(lo, &p) <= round_to_precision(hi, &p));
        }
    }

    #[test]
    fn softmax_normalizes(z in logits(30), log_c in -3.0f64..3.0) {
        let r = RankedLogits::new(&z).unwrap();
        for reference in [1, 2] {
            let p = scaled_softmax(&r, 10f64.powf(log_c), reference).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn probabilities_shift_scale_invariant(z in logits(20), b in -50.0f64..50.0, t in 0.01f64..20.0) {
        let r = RankedLogits::new(&z).unwrap();
        let p = scaled_softmax(&r, t / r.delta(), 1).unwrap();
        for s in [0.5, 2.0, 10.0] {
            let w: Vec<f64> = z.iter().map(|v| s * v + b).collect();
            let rw = RankedLogits::new(&w).unwrap();
            let q = scaled_softmax(&rw, t / rw.delta(), 1).unwrap();
            for (a, c) in p.iter().zip(&q) {
                prop_assert!((a - c).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn g_positive_and_derivative_matches(z in logits(40), kind in kind_strategy(), pick in 0usize..100, t in 0.05f64..20.0) {
        let r = RankedLogits::new(&z).unwrap();
        let s = scenario(&r, kind, pick);
        let g = g_value(&r, &s, t).unwrap();
        prop_assert!(g > 0.0);
        let h = 1e-6 * t;
        let fd = (g_value(&r, &s, t + h).unwrap() - g_value(&r, &s, t - h).unwrap()) / (2.0 * h);
        let an = g_derivative(&r, &s, t).unwrap();
        // Step 1e-6·t leaves ~1e-10 relative noise from cancellation; compare
        // against the natural scale g/t of the derivative.
        prop_assert!((an - fd).abs() <= 1e-6 * an.abs().max(g / t), "{} vs {}", an, fd);
        if !kind.is_stationary() {
            prop_assert!(an > 0.0);
        }
    }

    #[test]
    fn stationary_t_star_is_optimal(z in logits(100), pick in 0usize..2) {
        let r = RankedLogits::new(&z).unwrap();
        let kind = [ScenarioKind::UntargetedUnsuccessful, ScenarioKind::TargetedSuccessful][pick];
        let s = scenario(&r, kind, 0);
        let sol = solve_t_star(&r, &s, &SINGLE).unwrap();
        prop_assert_eq!(sol.method, SolveMethod::Bisection);
        let best = g_value(&r, &s, sol.t_star).unwrap();
        let hi = (4.0 * sol.t_star).max(10.0);
        for i in 1..=10_000 {
            let t = hi * i as f64 / 10_000.0;
            prop_assert!(best >= g_value(&r, &s, t).unwrap() - 1e-9 * best);
        }
        let slope1 = g_derivative(&r, &s, 1.0).unwrap().abs();
        prop_assert!(sol.residual <= 1e-8 * slope1.max(1.0));
    }

    #[test]
    fn t_star_shift_scale_invariant(z in logits(20), kind in kind_strategy(), pick in 0usize..100) {
        let r = RankedLogits::new(&z).unwrap();
        let s = scenario(&r, kind, pick);
        let base = solve_t_star(&r, &s, &SINGLE).unwrap().t_star;
        for sc in [0.5, 2.0, 10.0] {
            for b in [-5.0, 0.0, 5.0] {
                let w: Vec<f64> = z.iter().map(|v| sc * v + b).collect();
                let rw = RankedLogits::new(&w).unwrap();
                let sw = AttackScenario::for_label(&rw, s.kind, s.label).unwrap();
                let t = solve_t_star(&rw, &sw, &SINGLE).unwrap().t_star;
                prop_assert!((t - base).abs() <= 1e-8 * base.max(1.0), "{} vs {}", t, base);
            }
        }
    }

    #[test]
    fn clamped_t_star_at_least_one(z in logits(50), pick in 0usize..100, us in any::<bool>()) {
        let r = RankedLogits::new(&z).unwrap();
        let kind = if us { ScenarioKind::UntargetedSuccessful } else { ScenarioKind::TargetedUnsuccessful };
        let s = scenario(&r, kind, pick);
        for p in ALL_PROFILES {
            let sol = solve_t_star(&r, &s, &p).unwrap();
            prop_assert!(sol.t_star >= 1.0);
            prop_assert_eq!(sol.method, SolveMethod::ClampedFormula);
        }
    }

    #[test]
    fn targeted_negates_untargeted(z in logits(12), pick in 0usize..12) {
        let r = RankedLogits::new(&z).unwrap();
        let y = pick % z.len();
        for family in [LossFamily::Ce, LossFamily::Mifpe, LossFamily::Cw] {
            let u = evaluate(LossKind::untargeted(family), &r, y, &DOUBLE).unwrap();
            let t = evaluate(LossKind::targeted(family), &r, y, &DOUBLE).unwrap();
            prop_assert_eq!(t.value, -u.value);
            for (a, b) in t.logit_gradient.iter().zip(&u.logit_gradient) {
                prop_assert_eq!(*a, -*b);
            }
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic(seed in 0u64..1000, x in prop::collection::vec(0.0f32..=1.0, 12)) {
        let m = ModelWeights::init(&[12, 7, 4], seed).unwrap();
        let a = forward(&m, &x).unwrap();
        let b = forward(&m.clone(), &x.clone()).unwrap();
        prop_assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attack_iterates_feasible_and_deterministic(
        seed in 0u64..50,
        index in 0u64..1000,
        eps in 0.0f32..0.6,
        iterations in 1usize..25,
        momentum in 0.0f32..0.99,
        l2 in any::<bool>(),
        family in prop::sample::select(LossFamily::ALL.to_vec()),
        x in prop::collection::vec(0.0f32..=1.0, 10),
    ) {
        let m = ModelWeights::init(&[10, 8, 3], seed).unwrap();
        let norm = if l2 { Norm::L2 } else { Norm::Linf };
        let cfg = AttackConfig {
            norm, eps, iterations, momentum, seed,
            loss: LossKind::untargeted(family),
            ..Default::default()
        };
        let sample = AttackSample { index, x: &x, label: 0 };
        let mut worst = 0.0f64;
        let mut in_box = true;
        let out = tmifpe::attack::attack_batch(&m, &[sample], &cfg, &mut |_, _, p| {
            worst = worst.max(norm.distance(p, &x));
            in_box &= p.iter().all(|&v| (0.0..=1.0).contains(&v));
        }).unwrap().remove(0);
        prop_assert!(in_box);
        prop_assert!(worst <= eps as f64 + f32::EPSILON as f64);
        let again = pgd_attack_indexed(&m, sample, &cfg).unwrap();
        prop_assert_eq!(&out, &again);
        let pred = RankedLogits::from_f32(&forward(&m, &out.x_best).unwrap()).unwrap().argmax();
        prop_assert_eq!(out.success, pred != 0);
    }
}
