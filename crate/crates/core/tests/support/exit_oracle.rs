//! Independent implementation of the exit rule and random frozen networks
//! to check it against.
#![allow(dead_code)]

use quicknet::cost::ExitCosts;
use quicknet::exit::{decide_and_infer, ExitMode};
use quicknet::layers::LayerSpec;
use quicknet::model::{Architecture, BlockSpec, QuickNet};
use quicknet::numerics::{RandomStream, Tensor};

pub const MODES: [ExitMode; 2] = [ExitMode::ConfidenceOnly, ExitMode::ConfidenceAndCommitment];

pub fn entropy_confidence(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&q| q > 0.0).map(|&q| -q * q.ln()).sum();
    (1.0 - h / (p.len() as f64).ln()).clamp(0.0, 1.0)
}

/// First exit with confidence above `t` (and a positive commitment score if
/// required), else the most confident exit, earliest on ties.
pub fn brute_force(profiles: &[(f64, bool)], t: f64, mode: ExitMode) -> (usize, bool) {
    for (i, &(c, pos)) in profiles.iter().enumerate() {
        let commit_ok = match mode {
            ExitMode::ConfidenceOnly => true,
            ExitMode::ConfidenceAndCommitment => pos,
        };
        if c > t && commit_ok {
            return (i, false);
        }
    }
    let mut best = 0;
    for i in 1..profiles.len() {
        if profiles[i].0 > profiles[best].0 {
            best = i;
        }
    }
    (best, true)
}

/// A frozen MLP with randomly rescaled heads so that confidences and
/// commitment signs vary widely. Some classifiers are zeroed, which makes
/// their confidence exactly tie with each other.
pub fn random_net(seed: u64, blocks: usize, classes: usize, dim: usize) -> QuickNet {
    let arch = Architecture {
        input_shape: vec![dim],
        num_classes: classes,
        blocks: (0..blocks)
            .map(|i| BlockSpec {
                name: format!("b{i}"),
                input_shape: None,
                subnet: vec![LayerSpec::Dense { units: 6 }],
                classifier: vec![LayerSpec::Dense { units: classes }],
            })
            .collect(),
    };
    let mut net = QuickNet::from_architecture(&arch, seed).unwrap();
    let mut rng = RandomStream::new(seed ^ 0x5eed);
    for j in 0..blocks {
        let zero = rng.below(4) == 0;
        let scale = rng.uniform(0.5, 8.0);
        let block = net.block_mut(j).unwrap();
        for p in block.classifier_params_mut() {
            let v = if zero { Tensor::zeros(p.shape()) } else { p.value().map(|x| x * scale) };
            p.set_value(v).unwrap();
        }
        let bias = &mut block.commitment_mut().output.bias;
        bias.set_value(Tensor::filled(&[1], rng.uniform(-1.0, 1.0))).unwrap();
    }
    net.freeze_all();
    net
}

/// Runs `decide_and_infer` on random single samples of random networks and
/// compares every decision with [`brute_force`]. Returns `(profiles checked,
/// fallbacks seen, first mismatch)`.
pub fn compare_on_random_profiles(nets: u64, per_net: usize) -> (usize, usize, Option<String>) {
    let (mut checked, mut fallbacks) = (0, 0);
    for seed in 0..nets {
        let mut rng = RandomStream::new(seed + 1000);
        let (blocks, classes, dim) = (1 + rng.below(4), 2 + rng.below(4), 5);
        let net = random_net(seed, blocks, classes, dim);
        let costs = ExitCosts::for_net(&net).unwrap();
        let x = rng.uniform_tensor(&[per_net, dim], -2.0, 2.0);
        let exits = net.forward_all(&x).unwrap();
        for s in 0..per_net {
            let profiles: Vec<(f64, bool)> = (0..blocks)
                .map(|j| {
                    let o = &exits[j][s];
                    (entropy_confidence(&o.probabilities), o.commitment_score > 0.0)
                })
                .collect();
            let t = rng.uniform(0.0, 0.6);
            let mode = MODES[rng.below(2)];
            let (exit, fallback) = brute_force(&profiles, t, mode);
            let one = x.row(s).unwrap().reshape(&[dim]).unwrap();
            let got = decide_and_infer(&net, &one, t, mode).unwrap();
            let flops = if fallback { costs.full_forward } else { costs.exit_incurred[exit] };
            let seen = if fallback { blocks } else { exit + 1 };
            let same = (got.exit, got.fallback) == (exit, fallback)
                && got.prediction == exits[exit][s].prediction()
                && got.flops == flops
                && got.confidences.len() == seen;
            if !same {
                return (checked, fallbacks, Some(format!("net {seed} sample {s}: got {got:?}, want exit {exit} fallback {fallback}")));
            }
            checked += 1;
            fallbacks += usize::from(fallback);
        }
    }
    (checked, fallbacks, None)
}
