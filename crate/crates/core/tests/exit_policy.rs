#[path = "support/exit_oracle.rs"]
mod exit_oracle;

use exit_oracle::{brute_force, entropy_confidence, random_net, MODES};
use proptest::prelude::*;
use quicknet::cost::ExitCosts;
use quicknet::data::synth_blobs;
use quicknet::exit::{
    choose_exit, collect_exits, confidence, decide_and_infer, evaluate, infer_batch, infer_dataset, sweep_from_exits,
    threshold_sweep, ExitMode,
};
use quicknet::layers::LayerSpec;
use quicknet::model::{BlockSpec, QuickNet};
use quicknet::numerics::{RandomStream, Tensor};
use quicknet::{Dataset, Error};

fn sample(x: &Tensor, s: usize) -> Tensor {
    x.row(s).unwrap().reshape(&x.shape()[1..]).unwrap()
}

fn random_inputs(rng: &mut RandomStream, n: usize, dim: usize) -> Tensor {
    rng.uniform_tensor(&[n, dim], -2.0, 2.0)
}

#[test]
fn single_sample_inference_matches_brute_force() {
    let (checked, fallbacks, mismatch) = exit_oracle::compare_on_random_profiles(60, 20);
    assert_eq!(mismatch, None);
    assert!(checked >= 1000);
    assert!(fallbacks > 50 && fallbacks < checked - 50, "{fallbacks} fallbacks of {checked}");
}

#[test]
fn exit_rule_matches_brute_force_on_synthetic_profiles() {
    let mut rng = RandomStream::new(7);
    for _ in 0..20_000 {
        let n = 1 + rng.below(6);
        // Coarse confidences so that ties with each other and with `t` occur.
        let profiles: Vec<(f64, bool)> = (0..n).map(|_| (rng.below(11) as f64 / 10.0, rng.below(2) == 1)).collect();
        let t = rng.below(11) as f64 / 10.0;
        for mode in MODES {
            assert_eq!(choose_exit(&profiles, t, mode), brute_force(&profiles, t, mode), "{profiles:?} t={t}");
        }
    }
}

#[test]
fn scripted_profile_falls_back_to_most_confident() {
    let profiles = [(0.5, true), (0.95, false), (0.7, true)];
    assert_eq!(choose_exit(&profiles, 0.9, ExitMode::ConfidenceAndCommitment), (1, true));
    assert_eq!(choose_exit(&profiles, 0.9, ExitMode::ConfidenceOnly), (1, false));
    assert_eq!(choose_exit(&profiles, 0.6, ExitMode::ConfidenceAndCommitment), (2, false));
}

#[test]
fn batched_inference_matches_single_samples() {
    let net = random_net(3, 3, 4, 5);
    let costs = ExitCosts::for_net(&net).unwrap();
    let mut rng = RandomStream::new(3);
    let x = random_inputs(&mut rng, 97, 5);
    for mode in MODES {
        for t in [0.0, 0.05, 0.2, 1.0] {
            let batch = infer_batch(&net, &x, t, mode, &costs).unwrap();
            let single: Vec<_> = (0..97)
                .map(|s| decide_and_infer(&net, &sample(&x, s), t, mode).unwrap())
                .collect();
            assert_eq!(batch, single);
            let threaded = infer_dataset(&net, &x, t, mode, 10, 3).unwrap();
            assert_eq!(threaded, single);
        }
    }
}

#[test]
fn exited_samples_skip_later_blocks() {
    let mut rng = RandomStream::new(11);
    let x = random_inputs(&mut rng, 200, 5);
    // A net whose first classifier was not zeroed; the threshold is its
    // median confidence, so about half the batch leaves there.
    let (net, t) = (11..)
        .find_map(|seed| {
            let net = random_net(seed, 3, 3, 5);
            let mut first: Vec<f64> = net.forward_all(&x).unwrap()[0].iter().map(|o| o.confidence).collect();
            first.sort_by(f64::total_cmp);
            let t = first[100];
            (first[0] < t).then_some((net, t))
        })
        .unwrap();
    let costs = ExitCosts::for_net(&net).unwrap();
    net.reset_counters();
    let decisions = infer_batch(&net, &x, t, ExitMode::ConfidenceOnly, &costs).unwrap();
    let counts = net.counters();
    let reached = |j: usize| decisions.iter().filter(|d| d.fallback || d.exit >= j).count() as u64;
    for (j, c) in counts.iter().enumerate() {
        assert_eq!(c.subnet_forward, reached(j), "block {j}");
        assert_eq!(c.classifier_forward, reached(j));
    }
    assert!(reached(1) < 200, "some samples should leave at the first exit");
}

#[test]
fn unfrozen_network_is_refused() {
    let mut net = QuickNet::new(&[3], 2, 0);
    let x = Tensor::zeros(&[3]);
    assert!(matches!(decide_and_infer(&net, &x, 0.5, ExitMode::ConfidenceOnly), Err(Error::Contract(_))));
    net.append_block(&BlockSpec {
        name: "b".into(),
        input_shape: None,
        subnet: vec![LayerSpec::Dense { units: 2 }],
        classifier: vec![LayerSpec::Dense { units: 2 }],
    })
    .unwrap();
    assert!(matches!(decide_and_infer(&net, &x, 0.5, ExitMode::ConfidenceOnly), Err(Error::Contract(_))));
}

fn labelled(net: &QuickNet, n: usize, seed: u64) -> Dataset {
    let mut rng = RandomStream::new(seed);
    let dim = net.input_shape()[0];
    let labels = (0..n).map(|_| rng.below(net.num_classes())).collect();
    Dataset::new(random_inputs(&mut rng, n, dim), labels, net.num_classes(), "random").unwrap()
}

const GRID: [f64; 12] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 1.0];

#[test]
fn sweep_cost_grows_with_threshold() {
    for seed in 0..10 {
        let net = random_net(seed, 3, 3, 5);
        let data = labelled(&net, 150, seed);
        for mode in MODES {
            let rows = threshold_sweep(&net, &data.inputs, &data.labels, &GRID, mode).unwrap();
            for w in rows.windows(2) {
                assert!(w[1].mean_flops >= w[0].mean_flops, "seed {seed}: {w:?}");
            }
        }
    }
}

#[test]
fn commitment_never_exits_earlier_than_confidence_alone() {
    let net = random_net(21, 4, 3, 5);
    let data = labelled(&net, 300, 21);
    for t in GRID {
        let a = infer_dataset(&net, &data.inputs, t, ExitMode::ConfidenceOnly, 64, 1).unwrap();
        let b = infer_dataset(&net, &data.inputs, t, ExitMode::ConfidenceAndCommitment, 64, 1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(y.flops >= x.flops);
            // Same first confident exit, same commitment sign: same decision.
            if !y.fallback && !x.fallback && x.exit == y.exit {
                assert_eq!(x.prediction, y.prediction);
            }
        }
    }
}

#[test]
fn threshold_one_always_falls_back() {
    let net = random_net(5, 3, 4, 5);
    let data = labelled(&net, 120, 5);
    let exits = collect_exits(&net, &data.inputs, 50, 1).unwrap();
    let costs = ExitCosts::for_net(&net).unwrap();
    for mode in MODES {
        let row = evaluate(&net, &data, 1.0, mode, 1).unwrap();
        assert_eq!(row.fallback_fraction, 1.0);
        assert_eq!(row.mean_flops, costs.full_forward as f64);
        // Fallback answers come from the most confident exit.
        let correct = exits
            .iter()
            .zip(&data.labels)
            .filter(|(s, &y)| {
                let profiles: Vec<(f64, bool)> = s.iter().map(|e| (e.confidence, e.commitment_positive)).collect();
                s[brute_force(&profiles, 1.0, mode).0].prediction() == y
            })
            .count();
        assert_eq!(row.accuracy, correct as f64 / data.len() as f64);
    }
}

#[test]
fn sweep_rows_are_internally_consistent() {
    let net = random_net(8, 3, 3, 5);
    let data = labelled(&net, 200, 8);
    let costs = ExitCosts::for_net(&net).unwrap();
    let exits = collect_exits(&net, &data.inputs, 64, 2).unwrap();
    for mode in MODES {
        let rows = sweep_from_exits(&exits, &data.labels, &GRID, mode, &costs).unwrap();
        for row in &rows {
            let total: f64 = row.exit_fractions.iter().sum::<f64>() + row.fallback_fraction;
            assert!((total - 1.0).abs() < 1e-12);
            let mean: f64 = row
                .exit_fractions
                .iter()
                .zip(&costs.exit_incurred)
                .map(|(f, &c)| f * c as f64)
                .sum::<f64>()
                + row.fallback_fraction * costs.full_forward as f64;
            assert!((mean - row.mean_flops).abs() <= 1e-9 * row.mean_flops);
            let direct = evaluate(&net, &data, row.threshold, mode, 1).unwrap();
            assert_eq!(direct.accuracy, row.accuracy);
            assert_eq!(direct.exit_fractions, row.exit_fractions);
            assert_eq!(direct.fallback_fraction, row.fallback_fraction);
            assert!((direct.mean_flops - row.mean_flops).abs() <= 1e-9 * row.mean_flops);
        }
    }
    assert!(matches!(
        sweep_from_exits(&exits, &data.labels, &[], ExitMode::ConfidenceOnly, &costs),
        Err(Error::Contract(_))
    ));
}

#[test]
fn trained_exits_report_their_own_confidence() {
    let data = synth_blobs(3, 50, 4, 3.0, 2).unwrap();
    let net = random_net(2, 2, 3, 4);
    for per_exit in net.forward_all(&data.inputs).unwrap() {
        for o in per_exit {
            assert!((o.confidence - entropy_confidence(&o.probabilities)).abs() < 1e-12);
            assert_eq!(o.commitment_positive, o.commitment_score > 0.0);
        }
    }
}

fn distribution() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 2..12).prop_filter_map("needs mass", |w| {
        let s: f64 = w.iter().sum();
        (s > 1e-3).then(|| w.iter().map(|v| v / s).collect())
    })
}

proptest! {
    #[test]
    fn confidence_lies_in_unit_interval(p in distribution()) {
        let c = confidence(&p).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));
        prop_assert!((c - entropy_confidence(&p)).abs() < 1e-12);
    }

    #[test]
    fn confidence_ignores_class_order(p in distribution(), seed in any::<u64>()) {
        let mut q = p.clone();
        RandomStream::new(seed).shuffle(&mut q);
        prop_assert!((confidence(&p).unwrap() - confidence(&q).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn one_hot_and_uniform_are_the_extremes(c in 2usize..20, k in 0usize..20) {
        let mut hot = vec![0.0; c];
        hot[k % c] = 1.0;
        prop_assert_eq!(confidence(&hot).unwrap(), 1.0);
        prop_assert!(confidence(&vec![1.0 / c as f64; c]).unwrap().abs() < 1e-12);
    }
}
