//! The QuickNet: an ordered list of blocks, each with a backbone subnet, a
//! classifier exit and a commitment head that predicts whether that exit's
//! prediction is correct.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exit::confidence;
use crate::layers::{softmax, DenseLayer, Layer, LayerSpec};
use crate::numerics::{read_checkpoint, write_checkpoint, Parameter, RandomStream, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    /// Per-sample input shape. Inferred from the previous block when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<Vec<usize>>,
    pub subnet: Vec<LayerSpec>,
    pub classifier: Vec<LayerSpec>,
}

/// Architecture file contents.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub blocks: Vec<BlockSpec>,
}

impl Architecture {
    pub fn from_json(text: &str) -> Result<Self> {
        let arch: Architecture = serde_json::from_str(text)?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("architecture serializes")
    }

    /// Walks every block's shapes without allocating parameters.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("architecture has no blocks".into()));
        }
        let mut shape = self.input_shape.clone();
        for spec in &self.blocks {
            check_input_shape(spec, &shape)?;
            let mut s = shape.clone();
            for l in expand(&spec.subnet, true) {
                s = l.output_shape(&s)?;
            }
            let mut c = s.clone();
            for l in expand(&spec.classifier, false) {
                c = l.output_shape(&c)?;
            }
            if c != [self.num_classes] {
                return Err(Error::Config(format!(
                    "block `{}` classifier produces {c:?}, expected [{}]",
                    spec.name, self.num_classes
                )));
            }
            shape = s;
        }
        Ok(())
    }

    /// The same architecture trained jointly; used to size end-to-end baselines.
    pub fn block_names(&self) -> Vec<&str> {
        self.blocks.iter().map(|b| b.name.as_str()).collect()
    }
}

fn check_input_shape(spec: &BlockSpec, actual: &[usize]) -> Result<()> {
    match &spec.input_shape {
        Some(declared) if declared != actual => Err(Error::Config(format!(
            "block `{}` declares input shape {declared:?} but receives {actual:?}",
            spec.name
        ))),
        _ => Ok(()),
    }
}

/// Inserts the implied ReLU after each dense/conv layer. Classifier stacks
/// keep their final layer linear.
pub fn expand(specs: &[LayerSpec], relu_after_last: bool) -> Vec<LayerSpec> {
    let mut out = Vec::with_capacity(specs.len() * 2);
    for (i, s) in specs.iter().enumerate() {
        out.push(s.clone());
        let last = i + 1 == specs.len();
        let next_is_relu = specs.get(i + 1) == Some(&LayerSpec::Relu);
        if s.has_weights() && !next_is_relu && (relu_after_last || !last) {
            out.push(LayerSpec::Relu);
        }
    }
    out
}

/// Forward-pass sample counters for one block, by component.
#[derive(Debug, Default)]
pub struct BlockCounters {
    subnet_forward: AtomicU64,
    classifier_forward: AtomicU64,
    commitment_forward: AtomicU64,
    subnet_backward: AtomicU64,
    classifier_backward: AtomicU64,
    commitment_backward: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub subnet_forward: u64,
    pub classifier_forward: u64,
    pub commitment_forward: u64,
    pub subnet_backward: u64,
    pub classifier_backward: u64,
    pub commitment_backward: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Subnet,
    Classifier,
    Commitment,
}

impl BlockCounters {
    fn slot(&self, c: Component, backward: bool) -> &AtomicU64 {
        match (c, backward) {
            (Component::Subnet, false) => &self.subnet_forward,
            (Component::Classifier, false) => &self.classifier_forward,
            (Component::Commitment, false) => &self.commitment_forward,
            (Component::Subnet, true) => &self.subnet_backward,
            (Component::Classifier, true) => &self.classifier_backward,
            (Component::Commitment, true) => &self.commitment_backward,
        }
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        let r = |a: &AtomicU64| a.load(Ordering::Relaxed);
        CounterSnapshot {
            subnet_forward: r(&self.subnet_forward),
            classifier_forward: r(&self.classifier_forward),
            commitment_forward: r(&self.commitment_forward),
            subnet_backward: r(&self.subnet_backward),
            classifier_backward: r(&self.classifier_backward),
            commitment_backward: r(&self.commitment_backward),
        }
    }

    fn reset(&self) {
        for c in [Component::Subnet, Component::Classifier, Component::Commitment] {
            self.slot(c, false).store(0, Ordering::Relaxed);
            self.slot(c, true).store(0, Ordering::Relaxed);
        }
    }
}

/// Two-layer head: `C` hidden ReLU units, one raw-logit output.
#[derive(Debug)]
pub struct CommitmentHead {
    pub hidden: DenseLayer,
    pub output: DenseLayer,
}

impl CommitmentHead {
    fn new(name: &str, features: usize, classes: usize, rng: &mut RandomStream) -> Self {
        CommitmentHead {
            hidden: DenseLayer::new(&format!("{name}.hidden"), features, classes, rng),
            output: DenseLayer::new(&format!("{name}.output"), classes, 1, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value().len()).sum()
    }

    fn params(&self) -> Vec<&Parameter> {
        vec![&self.hidden.weights, &self.hidden.bias, &self.output.weights, &self.output.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.hidden.weights,
            &mut self.hidden.bias,
            &mut self.output.weights,
            &mut self.output.bias,
        ]
    }

    /// Layer specs equivalent to this head, for cost accounting.
    pub fn specs(&self, input_shape: &[usize]) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        if input_shape.len() != 1 {
            specs.push(LayerSpec::Flatten);
        }
        specs.push(LayerSpec::Dense { units: self.hidden.outputs() });
        specs.push(LayerSpec::Relu);
        specs.push(LayerSpec::Dense { units: 1 });
        specs
    }

    fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let x = if tape.shape(x).len() > 2 { tape.flatten(x)? } else { x };
        let h = self.hidden.forward(tape, x)?;
        let h = tape.relu(h);
        self.output.forward(tape, h)
    }
}

#[derive(Debug)]
pub struct Block {
    name: String,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    subnet: Vec<Layer>,
    subnet_inputs: Vec<Vec<usize>>,
    classifier: Vec<Layer>,
    classifier_inputs: Vec<Vec<usize>>,
    commitment: CommitmentHead,
    frozen: bool,
    counters: BlockCounters,
}

fn build_stack(
    specs: &[LayerSpec],
    input: &[usize],
    prefix: &str,
    rng: &mut RandomStream,
) -> Result<(Vec<Layer>, Vec<Vec<usize>>, Vec<usize>)> {
    let mut shape = input.to_vec();
    let (mut layers, mut inputs) = (Vec::new(), Vec::new());
    for (k, spec) in specs.iter().enumerate() {
        let layer = Layer::build(spec, &shape, &format!("{prefix}.{k}"), rng)?;
        inputs.push(shape.clone());
        shape = spec.output_shape(&shape)?;
        layers.push(layer);
    }
    Ok((layers, inputs, shape))
}

impl Block {
    pub fn new(
        spec: &BlockSpec,
        index: usize,
        input_shape: &[usize],
        num_classes: usize,
        rng: &mut RandomStream,
    ) -> Result<Block> {
        check_input_shape(spec, input_shape)?;
        let prefix = format!("block{index}");
        let (subnet, subnet_inputs, output_shape) =
            build_stack(&expand(&spec.subnet, true), input_shape, &format!("{prefix}.subnet"), rng)?;
        let (classifier, classifier_inputs, logits) = build_stack(
            &expand(&spec.classifier, false),
            &output_shape,
            &format!("{prefix}.classifier"),
            rng,
        )?;
        if logits != [num_classes] {
            return Err(Error::Config(format!(
                "block `{}` classifier produces {logits:?}, expected [{num_classes}]",
                spec.name
            )));
        }
        let features = output_shape.iter().product();
        let commitment = CommitmentHead::new(&format!("{prefix}.commitment"), features, num_classes, rng);
        Ok(Block {
            name: spec.name.clone(),
            input_shape: input_shape.to_vec(),
            output_shape,
            subnet,
            subnet_inputs,
            classifier,
            classifier_inputs,
            commitment,
            frozen: false,
            counters: BlockCounters::default(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn commitment(&self) -> &CommitmentHead {
        &self.commitment
    }

    pub fn commitment_mut(&mut self) -> &mut CommitmentHead {
        &mut self.commitment
    }

    pub fn classifier_layers_mut(&mut self) -> &mut [Layer] {
        &mut self.classifier
    }

    pub fn subnet_layers_mut(&mut self) -> &mut [Layer] {
        &mut self.subnet
    }

    /// `(spec, per-sample input shape)` for each subnet layer, implied ReLUs included.
    pub fn subnet_specs(&self) -> Vec<(LayerSpec, Vec<usize>)> {
        self.subnet.iter().map(Layer::spec).zip(self.subnet_inputs.iter().cloned()).collect()
    }

    pub fn classifier_specs(&self) -> Vec<(LayerSpec, Vec<usize>)> {
        self.classifier
            .iter()
            .map(Layer::spec)
            .zip(self.classifier_inputs.iter().cloned())
            .collect()
    }

    pub fn commitment_specs(&self) -> Vec<(LayerSpec, Vec<usize>)> {
        let mut shape = self.output_shape.clone();
        let mut out = Vec::new();
        for spec in self.commitment.specs(&self.output_shape) {
            let next = spec.output_shape(&shape).expect("commitment head shapes are consistent");
            out.push((spec, std::mem::replace(&mut shape, next)));
        }
        out
    }

    pub fn counters(&self) -> CounterSnapshot {
        self.counters.snapshot()
    }

    /// Adds `samples` to a component's backward counter. Trainers call this
    /// after each backward pass through the component.
    pub fn record_backward(&self, component: Component, samples: usize) {
        self.counters.slot(component, true).fetch_add(samples as u64, Ordering::Relaxed);
    }

    fn record_forward(&self, component: Component, samples: usize) {
        self.counters.slot(component, false).fetch_add(samples as u64, Ordering::Relaxed);
    }

    pub fn subnet_forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        self.record_forward(Component::Subnet, tape.shape(x)[0]);
        self.subnet.iter().try_fold(x, |v, layer| layer.forward(tape, v))
    }

    pub fn classifier_forward<'a>(&'a self, tape: &mut Tape<'a>, features: Var) -> Result<Var> {
        self.record_forward(Component::Classifier, tape.shape(features)[0]);
        self.classifier.iter().try_fold(features, |v, layer| layer.forward(tape, v))
    }

    pub fn commitment_forward<'a>(&'a self, tape: &mut Tape<'a>, features: Var) -> Result<Var> {
        self.record_forward(Component::Commitment, tape.shape(features)[0]);
        self.commitment.forward(tape, features)
    }

    pub fn subnet_params(&self) -> Vec<&Parameter> {
        self.subnet.iter().flat_map(Layer::params).collect()
    }

    pub fn classifier_params(&self) -> Vec<&Parameter> {
        self.classifier.iter().flat_map(Layer::params).collect()
    }

    pub fn commitment_params(&self) -> Vec<&Parameter> {
        self.commitment.params()
    }

    /// Backbone and classifier parameters: the set trained by cross-entropy.
    pub fn exit_params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = self.subnet.iter_mut().flat_map(Layer::params_mut).collect();
        out.extend(self.classifier.iter_mut().flat_map(Layer::params_mut));
        out
    }

    pub fn subnet_params_mut(&mut self) -> Vec<&mut Parameter> {
        self.subnet.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn classifier_params_mut(&mut self) -> Vec<&mut Parameter> {
        self.classifier.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn commitment_params_mut(&mut self) -> Vec<&mut Parameter> {
        self.commitment.params_mut()
    }

    /// Subnet, classifier, then commitment parameters.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = self.subnet_params();
        out.extend(self.classifier_params());
        out.extend(self.commitment_params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = self.subnet.iter_mut().flat_map(Layer::params_mut).collect();
        out.extend(self.classifier.iter_mut().flat_map(Layer::params_mut));
        out.extend(self.commitment.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value().len()).sum()
    }

    fn freeze(&mut self) {
        self.frozen = true;
        for p in self.params_mut() {
            p.freeze();
        }
    }
}

/// Everything one exit reports about one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitOutput {
    pub block: usize,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub confidence: f64,
    /// Pre-squash commitment logit.
    pub commitment_score: f64,
    pub commitment_positive: bool,
}

impl ExitOutput {
    /// Argmax of the probabilities, lowest index on ties.
    pub fn prediction(&self) -> usize {
        argmax(&self.probabilities)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug)]
pub struct QuickNet {
    input_shape: Vec<usize>,
    num_classes: usize,
    seed: u64,
    blocks: Vec<Block>,
}

impl QuickNet {
    /// An empty network. `seed` drives parameter initialization of every
    /// block appended later, keyed by block index.
    pub fn new(input_shape: &[usize], num_classes: usize, seed: u64) -> Self {
        QuickNet {
            input_shape: input_shape.to_vec(),
            num_classes,
            seed,
            blocks: Vec::new(),
        }
    }

    pub fn from_architecture(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut net = QuickNet::new(&arch.input_shape, arch.num_classes, seed);
        for spec in &arch.blocks {
            net.append_block(spec)?;
        }
        Ok(net)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> Result<&Block> {
        self.blocks
            .get(i)
            .ok_or_else(|| Error::Contract(format!("block {i} out of range for {} blocks", self.blocks.len())))
    }

    pub fn block_mut(&mut self, i: usize) -> Result<&mut Block> {
        let n = self.blocks.len();
        self.blocks
            .get_mut(i)
            .ok_or_else(|| Error::Contract(format!("block {i} out of range for {n} blocks")))
    }

    /// Shape the next appended block receives.
    pub fn next_input_shape(&self) -> &[usize] {
        self.blocks.last().map_or(&self.input_shape, |b| b.output_shape())
    }

    pub fn append_block(&mut self, spec: &BlockSpec) -> Result<()> {
        let index = self.blocks.len();
        let input = self.next_input_shape().to_vec();
        let mut rng = RandomStream::new(self.seed).derive(index as u64);
        let block = Block::new(spec, index, &input, self.num_classes, &mut rng)?;
        self.blocks.push(block);
        Ok(())
    }

    /// Freezes every parameter of block `i`. Re-freezing is a no-op.
    pub fn freeze_block(&mut self, i: usize) -> Result<()> {
        self.block_mut(i)?.freeze();
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for b in &mut self.blocks {
            b.freeze();
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.blocks.iter().all(Block::is_frozen)
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Parameter> {
        self.blocks
            .iter_mut()
            .flat_map(Block::params_mut)
            .filter(|p| !p.is_frozen())
            .collect()
    }

    /// Every subnet plus the last classifier: what end-to-end training updates.
    pub fn backbone_params_mut(&mut self) -> Vec<&mut Parameter> {
        let last = self.blocks.len().saturating_sub(1);
        self.blocks
            .iter_mut()
            .enumerate()
            .flat_map(|(i, b)| if i == last { b.exit_params_mut() } else { b.subnet_params_mut() })
            .collect()
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.blocks.iter().flat_map(Block::params).collect()
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(Block::param_count).sum()
    }

    fn check_batch(&self, expected: &[usize], x: &Tensor) -> Result<()> {
        if x.rank() == 0 || &x.shape()[1..] != expected {
            let mut want = vec![x.shape().first().copied().unwrap_or(0)];
            want.extend_from_slice(expected);
            return Err(Error::dim("block input", &want, x.shape()));
        }
        Ok(())
    }

    /// Runs subnets `0..upto` and returns the input of block `upto`.
    pub fn prefix_forward(&self, upto: usize, x: &Tensor) -> Result<Tensor> {
        if upto > self.blocks.len() {
            return Err(Error::Contract(format!("prefix {upto} exceeds {} blocks", self.blocks.len())));
        }
        self.check_batch(&self.input_shape, x)?;
        let mut tape = Tape::new();
        let mut v = tape.constant_ref(x);
        for b in &self.blocks[..upto] {
            v = b.subnet_forward(&mut tape, v)?;
        }
        Ok(tape.value(v).clone())
    }

    /// One block on a batch: returns the block activation (input to the next
    /// block) and the exit output for each sample.
    pub fn forward_block(&self, i: usize, x_prev: &Tensor) -> Result<(Tensor, Vec<ExitOutput>)> {
        let block = self.block(i)?;
        self.check_batch(&block.input_shape, x_prev)?;
        let mut tape = Tape::new();
        let x = tape.constant_ref(x_prev);
        let features = block.subnet_forward(&mut tape, x)?;
        let logits = block.classifier_forward(&mut tape, features)?;
        let score = block.commitment_forward(&mut tape, features)?;
        let exits = exit_outputs(i, tape.value(logits), tape.value(score))?;
        Ok((tape.value(features).clone(), exits))
    }

    /// Every exit for every sample: `result[exit][sample]`.
    pub fn forward_all(&self, x: &Tensor) -> Result<Vec<Vec<ExitOutput>>> {
        let mut out = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for i in 0..self.blocks.len() {
            let (next, exits) = self.forward_block(i, &cur)?;
            out.push(exits);
            cur = next;
        }
        Ok(out)
    }

    pub fn counters(&self) -> Vec<CounterSnapshot> {
        self.blocks.iter().map(Block::counters).collect()
    }

    pub fn reset_counters(&self) {
        for b in &self.blocks {
            b.counters.reset();
        }
    }

    pub fn save_checkpoint<W: Write>(&self, w: W) -> Result<()> {
        write_checkpoint(w, self.blocks.len() as u32, self.params())
    }

    /// Loads parameter values by name. Every parameter must be present with
    /// a matching shape, and the block counts must agree.
    pub fn load_checkpoint<R: Read>(&mut self, r: R) -> Result<()> {
        let ck = read_checkpoint(r)?;
        if ck.block_count as usize != self.blocks.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} blocks, architecture has {}",
                ck.block_count,
                self.blocks.len()
            )));
        }
        let expected: usize = self.params().len();
        if ck.records.len() != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, architecture has {expected}",
                ck.records.len()
            )));
        }
        for p in self.blocks.iter_mut().flat_map(Block::params_mut) {
            let value = ck
                .get(p.name())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name())))?;
            if value.shape() != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?} in checkpoint, {:?} in architecture",
                    p.name(),
                    value.shape(),
                    p.shape()
                )));
            }
            p.set_value(value.clone())?;
        }
        Ok(())
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.save_checkpoint(&mut buf).expect("in-memory write");
        buf
    }

    /// Checkpoint bytes of block `i` alone, for stability checks.
    pub fn block_bytes(&self, i: usize) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, 1, self.block(i)?.params())?;
        Ok(buf)
    }
}

/// Builds per-sample exit records from a batch of logits and commitment scores.
pub fn exit_outputs(block: usize, logits: &Tensor, scores: &Tensor) -> Result<Vec<ExitOutput>> {
    let probs = softmax(logits)?;
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .zip(probs.data().chunks(c))
        .zip(scores.data())
        .map(|((l, p), &s)| {
            Ok(ExitOutput {
                block,
                logits: l.to_vec(),
                probabilities: p.to_vec(),
                confidence: confidence(p)?,
                commitment_score: s,
                commitment_positive: s > 0.0,
            })
        })
        .collect()
}
