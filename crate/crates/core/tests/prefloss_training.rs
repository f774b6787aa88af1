use faithpref_core::prefloss::{
    check_gradient, dpo_nll_batch_loss, dpo_nll_grad, import_preferences, synthetic_task,
    train_toy, LossParams, PreferencePair, ToyPolicy,
};
use proptest::prelude::*;

fn policy_and_data() -> impl Strategy<Value = (ToyPolicy, Vec<PreferencePair>, LossParams)> {
    (1usize..6, 2usize..6, any::<u64>()).prop_flat_map(|(np, k, seed)| {
        let pair = (0..np, 0..k, 1..k).prop_map(move |(prompt, chosen, off)| PreferencePair {
            prompt,
            chosen,
            rejected: (chosen + off) % k,
        });
        (
            prop::collection::vec(-3.0f64..3.0, np * k),
            prop::collection::vec(pair, 1..10),
            0.01f64..3.0,
            0.0f64..3.0,
        )
            .prop_map(move |(shift, data, beta, alpha)| {
                let mut policy = ToyPolicy::random(np, k, 1.0, seed).unwrap();
                for (w, s) in policy.logits_mut().iter_mut().zip(shift) {
                    *w += s;
                }
                (policy, data, LossParams { beta, alpha })
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn analytic_gradient_matches_finite_differences((policy, data, params) in policy_and_data()) {
        let err = check_gradient(&policy, &data, params, 1e-4).unwrap();
        prop_assert!(err < 1e-5, "relative error {err:e}");
    }

    #[test]
    fn gradient_rows_sum_to_zero((policy, data, params) in policy_and_data()) {
        // Softmax logits are shift-invariant per prompt.
        let grad = dpo_nll_grad(&policy, &data, params).unwrap();
        for row in grad.chunks(policy.candidates_per_prompt()) {
            prop_assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn small_step_does_not_increase_loss((policy, data, params) in policy_and_data()) {
        let before = dpo_nll_batch_loss(&policy, &data, params).unwrap();
        let mut p = policy.clone();
        let report = train_toy(&mut p, &data, params, 1, 1e-3).unwrap();
        prop_assert!(report.final_loss <= before + 1e-12);
    }
}

#[test]
fn synthetic_task_learns_across_seeds() {
    let params = LossParams {
        beta: 0.1,
        alpha: 1.0,
    };
    for seed in 0..5 {
        let (mut policy, data) = synthetic_task(50, 4, 0.5, seed).unwrap();
        let report = train_toy(&mut policy, &data, params, 500, 0.1).unwrap();
        assert!(
            report.final_accuracy >= 0.95,
            "seed {seed}: {}",
            report.final_accuracy
        );
        assert!(report.final_loss < report.initial_loss());
        assert_eq!(report.loss_curve.len(), 501);
    }
}

#[test]
fn large_alpha_is_dominated_by_likelihood() {
    // With α = 100 the chosen candidate's probability is pushed up hard.
    let (mut policy, data) = synthetic_task(10, 4, 0.5, 9).unwrap();
    let report = train_toy(
        &mut policy,
        &data,
        LossParams {
            beta: 0.1,
            alpha: 100.0,
        },
        50,
        0.01,
    )
    .unwrap();
    assert!(report.final_loss.is_finite());
    assert!(report.final_loss < report.initial_loss());
    for d in &data {
        assert!(policy.probs(d.prompt)[d.chosen] > 0.5);
    }
}

#[test]
fn imported_preferences_train() {
    let jsonl = concat!(
        r#"{"id":"a","document":"x","chosen":"good a","rejected":"bad a","meta":{}}"#,
        "\n",
        r#"{"id":"b","document":"y","chosen":"good b","rejected":"bad b","meta":{}}"#,
        "\n",
    );
    let imported = import_preferences(jsonl.as_bytes()).unwrap();
    assert_eq!(imported.dataset.len(), 2);
    let mut policy = imported.policy;
    let report = train_toy(
        &mut policy,
        &imported.dataset,
        LossParams::default(),
        100,
        0.5,
    )
    .unwrap();
    assert_eq!(report.final_accuracy, 1.0);
}
