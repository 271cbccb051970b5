mod common;

use common::regression_config;
use flexvfl_core::data::synth_regression;
use flexvfl_core::protocol::{
    evaluate, run_from, run_protocol, run_with_dataset, LrSchedule, PerParticipant, RunStatus, SmoothnessConfig,
};
use flexvfl_core::{GlobalModel, LocalOptimizer, ProtocolKind};
use proptest::prelude::*;

fn bits(m: &GlobalModel) -> Vec<u64> {
    m.flatten().iter().map(|x| x.to_bits()).collect()
}

#[test]
fn pbcd_with_one_party_is_gradient_descent() {
    let mut cfg = regression_config("pbcd", "");
    cfg.data =
        toml::from_str("source = \"synthetic\"\nn_samples = 40\nn_features = 5\nparties = 1\nnoise_std = 0.3").unwrap();
    cfg.batch_size = 40;
    cfg.rounds = 50;
    cfg.speed = toml::from_str("kind = \"fixed\"\nvalues = [1.0, 3.0]").unwrap();
    let eta = 0.05;
    let data = cfg.load_dataset().unwrap();
    let run = run_with_dataset(&cfg, &data).unwrap();

    // Plain full-batch gradient descent on ½·mean((b + w·x − y)²).
    let init = GlobalModel::init(&cfg.model.spec().unwrap(), &data.widths(), cfg.seed).unwrap();
    let mut b = init.server_params[0];
    let mut w = init.parties[0].params.clone();
    let x = data.part(0);
    let y = data.labels();
    let n = y.len() as f64;
    for _ in 0..cfg.rounds {
        let resid: Vec<f64> = (0..y.len())
            .map(|i| b + (0..w.len()).map(|j| w[j] * x[(i, j)]).sum::<f64>() - y[i])
            .collect();
        let gb = resid.iter().sum::<f64>() / n;
        let gw: Vec<f64> = (0..w.len())
            .map(|j| (0..y.len()).map(|i| resid[i] * x[(i, j)]).sum::<f64>() / n)
            .collect();
        b -= eta * gb;
        for (wj, gj) in w.iter_mut().zip(gw) {
            *wj -= eta * gj;
        }
    }
    assert!((run.model.server_params[0] - b).abs() < 1e-12);
    for (a, e) in run.model.parties[0].params.iter().zip(&w) {
        assert!((a - e).abs() < 1e-12, "{a} vs {e}");
    }
}

#[test]
fn homogeneous_speeds_collapse_synchronous_variants() {
    let mut models = Vec::new();
    for protocol in [ProtocolKind::Flex, ProtocolKind::SyncMin, ProtocolKind::SyncMax] {
        let mut cfg = regression_config("flex", "");
        cfg.protocol = protocol;
        cfg.speed = toml::from_str("kind = \"fixed\"\nvalues = 2.5").unwrap();
        cfg.clock.timeout = 2.5 * 4.0;
        let run = run_protocol(&cfg).unwrap();
        assert!(run.rounds.iter().all(|r| r.taus == vec![4; 4]));
        models.push(bits(&run.model));
    }
    assert_eq!(models[0], models[1]);
    assert_eq!(models[0], models[2]);
}

#[test]
fn flex_with_single_iterations_matches_pbcd() {
    let mut flex = regression_config("flex", "");
    flex.speed = toml::from_str("kind = \"fixed\"\nvalues = [6.0, 7.0, 8.0, 9.0]").unwrap();
    flex.clock.timeout = 10.0;
    let mut pbcd = flex.clone();
    pbcd.protocol = ProtocolKind::Pbcd;
    let a = run_protocol(&flex).unwrap();
    let b = run_protocol(&pbcd).unwrap();
    assert!(a.rounds.iter().all(|r| r.taus == vec![1; 4]));
    assert_eq!(bits(&a.model), bits(&b.model));
}

#[test]
fn synchronous_taus_follow_protocol() {
    let taus = |protocol: &str| {
        run_protocol(&regression_config(protocol, "")).unwrap().rounds[0]
            .taus
            .clone()
    };
    assert_eq!(taus("flex"), vec![10, 10, 5, 2]);
    assert_eq!(taus("sync-min"), vec![2; 4]);
    assert_eq!(taus("sync-max"), vec![10; 4]);
    assert_eq!(taus("pbcd"), vec![1; 4]);
}

#[test]
fn adaptive_rate_is_a_fixed_point_under_constant_speeds() {
    let mut cfg = regression_config("adaptive", "");
    cfg.optimizer = PerParticipant::All(LocalOptimizer::Momentum { rho: 0.5 });
    cfg.lr.base = PerParticipant::All(0.2);
    let run = run_protocol(&cfg).unwrap();
    for (p, &tau) in [10usize, 10, 5, 2].iter().enumerate() {
        let maxw: f64 = (0..tau).map(|s| 0.5f64.powi(s as i32)).sum();
        let expected = 0.2 / (tau as f64 * maxw);
        for r in &run.rounds {
            assert!((r.learning_rates[p] - expected).abs() < 1e-15);
            assert_eq!(r.max_weights[p], maxw);
        }
    }
}

#[test]
fn vafl_single_party_without_latency_matches_pbcd() {
    let mut cfg = regression_config("vafl", "");
    cfg.data =
        toml::from_str("source = \"synthetic\"\nn_samples = 30\nn_features = 4\nparties = 1\nnoise_std = 0.1").unwrap();
    cfg.speed = toml::from_str("kind = \"fixed\"\nvalues = [1.0, 2.0]").unwrap();
    cfg.clock.t_comm = 0.0;
    cfg.batch_size = 7;
    let vafl = run_protocol(&cfg).unwrap();
    cfg.protocol = ProtocolKind::Pbcd;
    let pbcd = run_protocol(&cfg).unwrap();
    assert_eq!(vafl.update_counts, vec![20, 20]);
    assert_eq!(bits(&vafl.model), bits(&pbcd.model));
}

#[test]
fn vafl_equal_speeds_alternate_by_index() {
    let mut cfg = regression_config("vafl", "");
    cfg.data =
        toml::from_str("source = \"synthetic\"\nn_samples = 30\nn_features = 4\nparties = 2\nnoise_std = 0.1").unwrap();
    cfg.speed = toml::from_str("kind = \"fixed\"\nvalues = 1.5").unwrap();
    let run = run_protocol(&cfg).unwrap();
    let order: Vec<usize> = run.event_log.iter().map(|e| e.1).collect();
    assert_eq!(order, (0..20).map(|i| i % 2).collect::<Vec<_>>());
    let times: Vec<f64> = run.event_log.iter().map(|e| e.0).collect();
    assert!(times.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn vafl_update_counts_follow_speeds() {
    let mut cfg = regression_config("vafl", "");
    cfg.data =
        toml::from_str("source = \"synthetic\"\nn_samples = 30\nn_features = 4\nparties = 2\nnoise_std = 0.1").unwrap();
    cfg.speed = toml::from_str("kind = \"fixed\"\nvalues = [1.0, 1.0, 4.0]").unwrap();
    cfg.clock.t_comm = 0.0;
    cfg.rounds = 2000;
    cfg.lr.base = PerParticipant::All(0.01);
    let run = run_protocol(&cfg).unwrap();
    let horizon = run.event_log.last().unwrap().0;
    // Party k finishes its c-th cycle at c · per_iter_k.
    let fast = (horizon / 1.0).floor() as u64;
    let slow = (horizon / 4.0).floor() as u64;
    assert_eq!(run.update_counts[1] + run.update_counts[2], 2000);
    assert!(run.update_counts[1].abs_diff(fast) <= 1);
    assert!(run.update_counts[2].abs_diff(slow) <= 1);
    let ratio = run.update_counts[1] as f64 / run.update_counts[2] as f64;
    assert!((ratio - 4.0).abs() < 0.01, "{ratio}");
}

#[test]
fn divergence_is_recorded_not_propagated() {
    let mut cfg = regression_config("flex", "");
    cfg.lr.base = PerParticipant::All(50.0);
    cfg.rounds = 200;
    let run = run_protocol(&cfg).unwrap();
    match &run.status {
        RunStatus::Diverged { message, .. } => assert!(!message.is_empty()),
        other => panic!("expected divergence, got {other:?}"),
    }
    let last = run.timeline.last().unwrap();
    assert!(last.train_loss.is_nan());
    assert!(run.timeline[..run.timeline.len() - 1]
        .iter()
        .all(|r| r.train_loss.is_finite()));
}

#[test]
fn rates_above_the_constraint_warn_but_run() {
    let mut cfg = regression_config("flex", "");
    cfg.smoothness = Some(SmoothnessConfig {
        l: 2.0,
        l_k: vec![1.0; 4],
    });
    let run = run_protocol(&cfg).unwrap();
    assert_eq!(run.status, RunStatus::Completed);
    assert_eq!(run.constraint_violations, 4 * cfg.rounds);

    cfg.lr.schedule = LrSchedule::Constraint;
    let run = run_protocol(&cfg).unwrap();
    assert_eq!(run.constraint_violations, 0);
    assert!((run.rounds[0].learning_rates[3] - 1.0 / (16.0 * 2.0 * 2.0)).abs() < 1e-15);
}

#[test]
fn inverse_decay_schedule() {
    let mut cfg = regression_config("pbcd", "");
    cfg.lr.schedule = LrSchedule::InverseDecay;
    let run = run_protocol(&cfg).unwrap();
    for r in &run.rounds {
        assert_eq!(r.learning_rates[0], 0.05 / (r.round + 1) as f64);
    }
}

#[test]
fn eval_period_thins_the_timeline() {
    let mut cfg = regression_config("flex", "");
    cfg.rounds = 23;
    cfg.clock.eval_period = 5;
    let run = run_protocol(&cfg).unwrap();
    let rounds: Vec<usize> = run.timeline.iter().map(|r| r.round).collect();
    assert_eq!(rounds, vec![0, 5, 10, 15, 20, 23]);
}

#[test]
fn max_time_stops_early() {
    let mut cfg = regression_config("flex", "");
    cfg.max_time = Some(30.0);
    let run = run_protocol(&cfg).unwrap();
    assert_eq!(run.rounds.len(), 3);
    assert_eq!(run.timeline.last().unwrap().time, 33.0);
}

#[test]
fn optimum_is_stationary() {
    let s = synth_regression(2, 50, 6, 2, 0.0).unwrap();
    let model = s.optimal_model();
    let eval = evaluate(&model, &s.dataset).unwrap();
    assert!(eval.loss < 1e-20 && eval.metric < 1e-9);

    let mut cfg = regression_config("flex", "");
    cfg.record_grad_norms = true;
    cfg.batch_size = 50;
    cfg.speed = toml::from_str("kind = \"fixed\"\nvalues = [1.0, 2.0, 4.0]").unwrap();
    let run = run_from(&cfg, &s.dataset, model).unwrap();
    assert!(run.timeline.iter().all(|r| r.grad_norm_sq.unwrap() < 1e-20));
}

#[test]
fn evaluate_matches_per_sample_loop() {
    let cfg = regression_config("flex", "");
    let data = cfg.load_dataset().unwrap();
    let model = GlobalModel::init(&cfg.model.spec().unwrap(), &data.widths(), 17).unwrap();
    let eval = evaluate(&model, &data).unwrap();
    let (mut loss, mut mae) = (0.0, 0.0);
    for i in 0..data.n_samples() {
        let one = data.select(&[i]);
        let pred: f64 = model.server_params[0]
            + (0..data.num_parties())
                .map(|k| {
                    let w = &model.parties[k].params;
                    (0..w.len()).map(|j| w[j] * one.part(k)[(0, j)]).sum::<f64>()
                })
                .sum::<f64>();
        let r = pred - one.labels()[0];
        loss += 0.5 * r * r;
        mae += r.abs();
    }
    let n = data.n_samples() as f64;
    assert!((eval.loss - loss / n).abs() < 1e-12);
    assert!((eval.metric - mae / n).abs() < 1e-12);
}

#[test]
fn classification_reports_accuracy() {
    let mut cfg = regression_config("flex", "");
    cfg.data =
        toml::from_str("source = \"synthetic_classes\"\nn_samples = 60\nn_features = 6\nparties = 3\nclasses = 3")
            .unwrap();
    cfg.model = toml::from_str("head = \"softmax\"\nclasses = 3\nembed_width = 2").unwrap();
    cfg.lr.base = PerParticipant::All(0.1);
    cfg.rounds = 60;
    let run = run_protocol(&cfg).unwrap();
    assert!(run.classification);
    let first = run.timeline.first().unwrap();
    let last = run.timeline.last().unwrap();
    assert!(last.train_loss < first.train_loss);
    assert!((0.0..=1.0).contains(&last.eval_metric));
    assert!(last.eval_metric > first.eval_metric);
}

#[test]
fn party_count_mismatch_is_a_config_error() {
    let cfg = regression_config("flex", "");
    let data = cfg.load_dataset().unwrap();
    let other = synth_regression(1, 64, 8, 2, 0.1).unwrap();
    let model = GlobalModel::init(&cfg.model.spec().unwrap(), &other.dataset.widths(), 1).unwrap();
    assert!(run_from(&cfg, &data, model).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn timeline_invariants(seed in 0u64..1000, proto in 0usize..6, t_comm in 0.0f64..20.0, batch in 1usize..64) {
        let mut cfg = regression_config(ProtocolKind::ALL[proto].as_str(), "");
        cfg.seed = seed;
        cfg.clock.t_comm = t_comm;
        cfg.batch_size = batch;
        cfg.rounds = 8;
        let run = run_protocol(&cfg).unwrap();
        prop_assert!(run.timeline.windows(2).all(|w| w[0].time < w[1].time));
        prop_assert!(run.timeline.windows(2).all(|w| w[0].comm_scalars_cumulative <= w[1].comm_scalars_cumulative));
        let total: f64 = run.rounds.iter().map(|r| r.duration).sum();
        if !run.rounds.is_empty() {
            prop_assert!((run.timeline.last().unwrap().time - total).abs() < 1e-9 * total.max(1.0));
        }
    }

    #[test]
    fn reruns_are_bit_identical(seed in 0u64..1000, proto in 0usize..6) {
        let mut cfg = regression_config(ProtocolKind::ALL[proto].as_str(), "");
        cfg.seed = seed;
        cfg.rounds = 5;
        let a = run_protocol(&cfg).unwrap();
        let b = run_protocol(&cfg).unwrap();
        prop_assert_eq!(bits(&a.model), bits(&b.model));
        prop_assert_eq!(format!("{:?}", a.timeline), format!("{:?}", b.timeline));
    }
}
