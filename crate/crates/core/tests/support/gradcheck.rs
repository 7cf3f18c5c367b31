//! Central finite-difference gradient checks for every layer type and loss.
//!
//! Each case owns its parameters (inputs included) and builds a scalar loss
//! on a fresh tape. The analytic gradient from `Tape::backward` is compared
//! with `(L(p + h) - L(p - h)) / 2h` element by element.
#![allow(dead_code)]

use quicknet::layers::{ConvLayer, DenseLayer, MixedPoolLayer};
use quicknet::model::{Architecture, BlockSpec, QuickNet};
use quicknet::numerics::{Parameter, RandomStream, Tape, Tensor, Var};
use quicknet::{LayerSpec, Result};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

pub trait Case {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;
    fn loss<'a>(&'a self, tape: &mut Tape<'a>) -> Result<Var>;
}

fn scalar_loss(case: &dyn Case) -> f64 {
    let mut tape = Tape::new();
    let l = case.loss(&mut tape).expect("loss builds");
    tape.value(l).data()[0]
}

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)` over
/// every parameter element of the case.
pub fn max_relative_error(case: &mut dyn Case) -> f64 {
    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let l = case.loss(&mut tape).expect("loss builds");
        let grads = tape.backward(l).expect("backward succeeds");
        case.params()
            .iter()
            .map(|p| grads.get(p.id()).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    };
    let mut worst = 0.0f64;
    for (pi, g) in analytic.iter().enumerate() {
        for k in 0..g.len() {
            let original = case.params()[pi].value().clone();
            let mut probe = |delta: f64| {
                let mut v = original.clone();
                v.data_mut()[k] += delta;
                case.params_mut()[pi].set_value(v).expect("probe value");
                scalar_loss(case)
            };
            let numeric = (probe(STEP) - probe(-STEP)) / (2.0 * STEP);
            case.params_mut()[pi].set_value(original).expect("restore value");
            let a = g.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

fn input(rng: &mut RandomStream, shape: &[usize]) -> Parameter {
    Parameter::new("x", rng.uniform_tensor(shape, -1.0, 1.0))
}

/// `Σ y ⊙ r` with fixed random `r`, so every output element matters.
fn weighted_sum<'a>(tape: &mut Tape<'a>, y: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let p = tape.mul(y, rv)?;
    Ok(tape.sum(p))
}

struct Dense {
    layer: DenseLayer,
    x: Parameter,
    r: Tensor,
}

impl Case for Dense {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.layer.weights, &self.layer.bias, &self.x]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.layer.weights, &mut self.layer.bias, &mut self.x]
    }
    fn loss<'a>(&'a self, tape: &mut Tape<'a>) -> Result<Var> {
        let x = tape.param(&self.x);
        let y = self.layer.forward(tape, x)?;
        let y = tape.relu(y);
        weighted_sum(tape, y, &self.r)
    }
}

struct Conv {
    layer: ConvLayer,
    x: Parameter,
    r: Tensor,
}

impl Case for Conv {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.layer.kernels, &self.layer.bias, &self.x]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.layer.kernels, &mut self.layer.bias, &mut self.x]
    }
    fn loss<'a>(&'a self, tape: &mut Tape<'a>) -> Result<Var> {
        let x = tape.param(&self.x);
        let y = self.layer.forward(tape, x)?;
        weighted_sum(tape, y, &self.r)
    }
}

#[derive(Clone, Copy)]
enum PoolKind {
    Max,
    Avg,
}

struct Pool {
    kind: PoolKind,
    x: Parameter,
    r: Tensor,
}

impl Case for Pool {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.x]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.x]
    }
    fn loss<'a>(&'a self, tape: &mut Tape<'a>) -> Result<Var> {
        let x = tape.param(&self.x);
        let y = match self.kind {
            PoolKind::Max => tape.max_pool(x, [2, 2])?,
            PoolKind::Avg => tape.avg_pool(x, [2, 2])?,
        };
        weighted_sum(tape, y, &self.r)
    }
}

struct Mixed {
    layer: MixedPoolLayer,
    x: Parameter,
    r: Tensor,
}

impl Case for Mixed {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.layer.mix, &self.x]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.layer.mix, &mut self.x]
    }
    fn loss<'a>(&'a self, tape: &mut Tape<'a>) -> Result<Var> {
        let x = tape.param(&self.x);
        let y = self.layer.forward(tape, x)?;
        weighted_sum(tape, y, &self.r)
    }
}

struct CrossEntropy {
    logits: Parameter,
    labels: Vec<usize>,
}

impl Case for CrossEntropy {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.logits]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.logits]
    }
    fn loss<'a>(&'a self, tape: &mut Tape<'a>) -> Result<Var> {
        let z = tape.param(&self.logits);
        Ok(tape.softmax_cross_entropy(z, &self.labels)?.0)
    }
}

struct Bce {
    scores: Parameter,
    targets: Vec<f64>,
}

impl Case for Bce {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.scores]
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.scores]
    }
    fn loss<'a>(&'a self, tape: &mut Tape<'a>) -> Result<Var> {
        let z = tape.param(&self.scores);
        tape.bce_with_logits(z, &self.targets)
    }
}

/// One whole block: subnet, classifier cross-entropy plus commitment BCE.
struct Block {
    net: QuickNet,
    x: Parameter,
    labels: Vec<usize>,
    targets: Vec<f64>,
    commitment_only: bool,
}

impl Case for Block {
    fn params(&self) -> Vec<&Parameter> {
        let mut p = self.net.blocks()[0].params();
        p.push(&self.x);
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.net.trainable_params_mut();
        p.push(&mut self.x);
        p
    }
    fn loss<'a>(&'a self, tape: &mut Tape<'a>) -> Result<Var> {
        let block = &self.net.blocks()[0];
        let x = tape.param(&self.x);
        let f = block.subnet_forward(tape, x)?;
        let s = block.commitment_forward(tape, f)?;
        let bce = tape.bce_with_logits(s, &self.targets)?;
        if self.commitment_only {
            return Ok(bce);
        }
        let z = block.classifier_forward(tape, f)?;
        let (ce, _) = tape.softmax_cross_entropy(z, &self.labels)?;
        tape.add(ce, bce)
    }
}

fn dense_case(seed: u64) -> Box<dyn Case> {
    let mut rng = RandomStream::new(seed);
    let (b, i, o) = (3, 2 + rng.below(4), 2 + rng.below(4));
    Box::new(Dense {
        layer: DenseLayer::new("d", i, o, &mut rng),
        x: input(&mut rng, &[b, i]),
        r: rng.uniform_tensor(&[b, o], -1.0, 1.0),
    })
}

fn conv_case(seed: u64) -> Box<dyn Case> {
    let mut rng = RandomStream::new(seed);
    let (cin, cout) = (1 + rng.below(2), 1 + rng.below(3));
    let stride = 1 + rng.below(2);
    let padding = rng.below(2);
    let k = [2 + rng.below(2), 2 + rng.below(2)];
    let hw = 5;
    let ho = (hw + 2 * padding - k[0]) / stride + 1;
    let wo = (hw + 2 * padding - k[1]) / stride + 1;
    Box::new(Conv {
        layer: ConvLayer::new("c", cin, cout, k, stride, padding, &mut rng),
        x: input(&mut rng, &[2, cin, hw, hw]),
        r: rng.uniform_tensor(&[2, cout, ho, wo], -1.0, 1.0),
    })
}

fn pool_case(seed: u64, kind: PoolKind) -> Box<dyn Case> {
    let mut rng = RandomStream::new(seed);
    Box::new(Pool {
        kind,
        x: input(&mut rng, &[2, 2, 4, 6]),
        r: rng.uniform_tensor(&[2, 2, 2, 3], -1.0, 1.0),
    })
}

fn mixed_case(seed: u64) -> Box<dyn Case> {
    let mut rng = RandomStream::new(seed);
    let mut layer = MixedPoolLayer::new("m", [2, 2]);
    layer.mix.set_value(Tensor::scalar(rng.uniform(-2.0, 2.0))).expect("unfrozen");
    Box::new(Mixed {
        layer,
        x: input(&mut rng, &[2, 2, 4, 4]),
        r: rng.uniform_tensor(&[2, 2, 2, 2], -1.0, 1.0),
    })
}

fn ce_case(seed: u64) -> Box<dyn Case> {
    let mut rng = RandomStream::new(seed);
    let c = 2 + rng.below(6);
    Box::new(CrossEntropy {
        logits: Parameter::new("z", rng.uniform_tensor(&[4, c], -3.0, 3.0)),
        labels: (0..4).map(|_| rng.below(c)).collect(),
    })
}

fn bce_case(seed: u64) -> Box<dyn Case> {
    let mut rng = RandomStream::new(seed);
    Box::new(Bce {
        scores: Parameter::new("s", rng.uniform_tensor(&[6, 1], -4.0, 4.0)),
        targets: (0..6).map(|_| rng.below(2) as f64).collect(),
    })
}

fn block_case(seed: u64, conv: bool, commitment_only: bool) -> Box<dyn Case> {
    let mut rng = RandomStream::new(seed);
    let classes = 3;
    let (input_shape, subnet, classifier) = if conv {
        (
            vec![1, 4, 4],
            vec![
                LayerSpec::Conv { channels: 2, kernel: [3, 3], stride: 1, padding: 1 },
                LayerSpec::MixedPool { window: [2, 2] },
            ],
            vec![LayerSpec::Flatten, LayerSpec::Dense { units: classes }],
        )
    } else {
        (vec![5], vec![LayerSpec::Dense { units: 4 }], vec![LayerSpec::Dense { units: classes }])
    };
    let arch = Architecture {
        input_shape: input_shape.clone(),
        num_classes: classes,
        blocks: vec![BlockSpec { name: "b".into(), input_shape: None, subnet, classifier }],
    };
    let mut shape = vec![3];
    shape.extend(input_shape);
    Box::new(Block {
        net: QuickNet::from_architecture(&arch, seed).expect("valid architecture"),
        x: input(&mut rng, &shape),
        labels: (0..3).map(|_| rng.below(classes)).collect(),
        targets: (0..3).map(|_| rng.below(2) as f64).collect(),
        commitment_only,
    })
}

/// `(case name, worst relative error over all seeds)` for every case.
pub fn run_suite(seeds: u64) -> Vec<(&'static str, f64)> {
    let builders: Vec<(&'static str, Box<dyn Fn(u64) -> Box<dyn Case>>)> = vec![
        ("dense+relu", Box::new(dense_case)),
        ("conv", Box::new(conv_case)),
        ("max_pool", Box::new(|s| pool_case(s, PoolKind::Max))),
        ("avg_pool", Box::new(|s| pool_case(s, PoolKind::Avg))),
        ("mixed_pool", Box::new(mixed_case)),
        ("softmax_cross_entropy", Box::new(ce_case)),
        ("binary_cross_entropy", Box::new(bce_case)),
        ("commitment_head", Box::new(|s| block_case(s, false, true))),
        ("mlp_block", Box::new(|s| block_case(s, false, false))),
        ("conv_block", Box::new(|s| block_case(s, true, false))),
    ];
    builders
        .into_iter()
        .map(|(name, build)| {
            let worst = (0..seeds)
                .map(|s| max_relative_error(build(1000 + s).as_mut()))
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}
