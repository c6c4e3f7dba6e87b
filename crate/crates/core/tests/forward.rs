mod common;

use common::{dot64, norm64, small_model};
use proptest::prelude::*;
use steervec_core::model::{classify, forward, predict, HookPoint, InterventionSpec};
use steervec_core::steering::SteeringField;
use steervec_core::UnitDirection;

fn tokens() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(1u32..16, 7)
}

fn direction() -> impl Strategy<Value = UnitDirection> {
    prop::collection::vec(-1.0f32..1.0, 8).prop_filter_map("short", |v| {
        (norm64(&v) > 1e-2).then(|| UnitDirection::from_raw(&v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ablated_stream_is_orthogonal_and_no_longer(seed in 0u64..8, toks in tokens(), r in direction()) {
        let params = small_model(seed);
        let spec = InterventionSpec::SingleGlobal { direction: r.clone() };
        let (_, trace) = forward(&params, &toks, &spec, true).unwrap();
        let trace = trace.unwrap();
        for hook in trace.hook_points() {
            for t in 0..trace.seq_len {
                let x_after = trace.at(hook, t);
                let before = trace.input_norm(hook, t) as f64;
                prop_assert!(
                    dot64(x_after, r.as_slice()).abs() <= 1e-5 * before,
                    "{hook} position {t}"
                );
                prop_assert!(norm64(x_after) <= before + 1e-6, "{hook} position {t}");
            }
        }
    }

    #[test]
    fn sign_of_direction_is_irrelevant(seed in 0u64..8, toks in tokens(), r in direction()) {
        let params = small_model(seed);
        let run = |d: &UnitDirection| {
            forward(&params, &toks, &InterventionSpec::SingleGlobal { direction: d.clone() }, false)
                .unwrap()
                .0
        };
        prop_assert_eq!(run(&r), run(&r.negated()));
        let field = |d: &UnitDirection| {
            let f = SteeringField::constant(2, 8, d);
            forward(&params, &toks, &InterventionSpec::FullField { field: f }, false).unwrap().0
        };
        prop_assert_eq!(field(&r), field(&r.negated()));
    }

    #[test]
    fn constant_field_reduces_to_single(seed in 0u64..8, toks in tokens(), r in direction()) {
        let params = small_model(seed);
        let single = forward(&params, &toks, &InterventionSpec::SingleGlobal { direction: r.clone() }, false)
            .unwrap()
            .0;
        let field = SteeringField::constant(2, 8, &r);
        let full = forward(&params, &toks, &InterventionSpec::FullField { field }, false).unwrap().0;
        for (a, b) in single.iter().zip(&full) {
            prop_assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn forward_leaves_params_untouched(seed in 0u64..8, toks in tokens(), r in direction()) {
        let params = small_model(seed);
        let before = params.clone();
        for spec in [
            InterventionSpec::None,
            InterventionSpec::SingleGlobal { direction: r.clone() },
            InterventionSpec::Subtract { direction: r.clone(), alpha: 2.0 },
            InterventionSpec::FullField { field: SteeringField::constant(2, 8, &r) },
        ] {
            forward(&params, &toks, &spec, true).unwrap();
        }
        prop_assert_eq!(params, before);
    }

    #[test]
    fn softmax_sums_to_one_and_permutes(logits in prop::collection::vec(-30.0f32..30.0, 2..10), rot in 0usize..10) {
        let p = classify(&logits).unwrap();
        let total: f64 = p.iter().map(|&v| v as f64).sum();
        prop_assert!((total - 1.0).abs() <= 1e-6);
        let k = rot % logits.len();
        let mut shifted = logits.clone();
        shifted.rotate_left(k);
        let mut expect = p.clone();
        expect.rotate_left(k);
        let q = classify(&shifted).unwrap();
        for (a, b) in q.iter().zip(&expect) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn subtract_moves_every_hook_by_alpha(seed in 0u64..4, toks in tokens(), r in direction()) {
        // with alpha = 0 the subtract mode is the identity
        let params = small_model(seed);
        let base = forward(&params, &toks, &InterventionSpec::None, false).unwrap().0;
        let zero = forward(&params, &toks, &InterventionSpec::Subtract { direction: r, alpha: 0.0 }, false)
            .unwrap()
            .0;
        prop_assert_eq!(base, zero);
    }
}

#[test]
fn full_field_leaves_masked_slots_alone() {
    let params = small_model(1);
    let toks = vec![3u32, 5, 7, 9, 11, 13, 15];
    let all_masked = SteeringField::from_raw(2, 8, 8, &vec![0.0; 2 * 8 * 8]).unwrap();
    let base = forward(&params, &toks, &InterventionSpec::None, false)
        .unwrap()
        .0;
    let masked = forward(
        &params,
        &toks,
        &InterventionSpec::FullField { field: all_masked },
        false,
    )
    .unwrap()
    .0;
    assert_eq!(base, masked);
}

#[test]
fn trace_matches_untraced_logits() {
    let params = small_model(2);
    let toks = vec![1u32, 2, 3, 4, 5, 6, 7];
    let (logits, trace) = forward(&params, &toks, &InterventionSpec::None, true).unwrap();
    let trace = trace.unwrap();
    assert_eq!(trace.logits, logits);
    assert_eq!(trace.hook_points().len(), 5);
    assert_eq!(trace.hook_points()[4], HookPoint::ResidFinal);
    // without an intervention the recorded input norm is the norm of the captured vector
    for hook in trace.hook_points() {
        let got = trace.input_norm(hook, 3) as f64;
        assert!((got - norm64(trace.at(hook, 3))).abs() < 1e-5);
    }
}

#[test]
fn predict_breaks_ties_low() {
    assert_eq!(predict(&[1.0f32, 1.0, 0.5]), 0);
    assert_eq!(predict(&[0.0f32, 2.0, 2.0]), 1);
}

#[test]
fn wrong_length_or_token_is_a_shape_error() {
    let params = small_model(0);
    assert!(forward(&params, &[1, 2, 3], &InterventionSpec::None, false).is_err());
    assert!(forward(
        &params,
        &[1, 2, 3, 4, 5, 6, 99],
        &InterventionSpec::None,
        false
    )
    .is_err());
    let wrong_dim = UnitDirection::from_raw(&[1.0, 0.0]).unwrap();
    assert!(forward(
        &params,
        &[1, 2, 3, 4, 5, 6, 7],
        &InterventionSpec::SingleGlobal {
            direction: wrong_dim
        },
        false
    )
    .is_err());
}
