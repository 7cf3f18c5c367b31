//! Cascaded block-wise training and the end-to-end baseline.

mod pool;
mod schedule;

pub use pool::{Sampling, ShrinkOutcome, TrainingPool};
pub use schedule::PlateauSchedule;

use serde::{Deserialize, Serialize};

use crate::cost::{block_training_flops, end_to_end_training_cost, BlockTrainingFlops, CostLedger, ExitCosts, PhaseWork};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exit::{evaluate, ExitMode};
use crate::model::{Architecture, Component, QuickNet};
use crate::numerics::{Adam, Gradients, Parameter, RandomStream, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub threshold: f64,
    pub seed: u64,
    /// Defaults to twice the class count.
    pub min_pool_size: Option<usize>,
    pub sampling: Sampling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            plateau_factor: 0.5,
            plateau_patience: 1,
            early_stop_patience: 3,
            max_epochs: 100,
            batch_size: 128,
            threshold: 0.9,
            seed: 0,
            min_pool_size: None,
            sampling: Sampling::Balanced,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive and finite");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau factor must lie in (0, 1)");
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.max_epochs == 0 || self.batch_size == 0 {
            return bad("max epochs and batch size must be positive");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn min_pool(&self, num_classes: usize) -> usize {
        self.min_pool_size.unwrap_or(2 * num_classes)
    }

    fn schedule(&self) -> PlateauSchedule {
        PlateauSchedule::new(self.lr, self.plateau_factor, self.plateau_patience, self.early_stop_patience)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommitmentRecord {
    pub epochs: Vec<EpochRecord>,
    /// Pool samples the classifier got right (BCE target 1).
    pub positives: usize,
    pub negatives: usize,
}

impl CommitmentRecord {
    /// Every target identical: the head can only learn a constant.
    pub fn is_degenerate(&self) -> bool {
        self.positives == 0 || self.negatives == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockTrainRecord {
    pub block: usize,
    pub pool_size: usize,
    /// Per-class sample counts of the pool this block trained on.
    pub class_composition: Vec<usize>,
    pub epochs: Vec<EpochRecord>,
    pub commitment: CommitmentRecord,
    pub learned: usize,
    pub flops: BlockTrainingFlops,
    /// Training FLOPs of this and all earlier blocks.
    pub cumulative_flops: u64,
    /// Early-exit test accuracy of the network right after this block froze.
    pub test_accuracy: Option<f64>,
}

impl BlockTrainRecord {
    pub fn epochs_run(&self) -> usize {
        self.epochs.len()
    }

    pub fn work(&self) -> PhaseWork {
        PhaseWork {
            block: self.block,
            pool_size: self.pool_size,
            epochs: self.epochs.len(),
            commitment_epochs: self.commitment.epochs.len(),
        }
    }
}

/// One finished training epoch, reported while training runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEvent {
    pub block: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub pool_size: usize,
    pub cum_flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeRun {
    pub records: Vec<BlockTrainRecord>,
    pub ledger: CostLedger,
    /// True when training stopped before the last block because the pool ran dry.
    pub stopped_early: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndToEndRun {
    pub epochs: Vec<EpochRecord>,
    pub samples_per_epoch: usize,
    /// Last-exit test accuracy after each epoch.
    pub test_accuracy: Vec<Option<f64>>,
    pub training_flops: u64,
    pub ledger: CostLedger,
}

/// Receives progress from [`train_quicknet`].
pub trait CascadeObserver {
    fn epoch(&mut self, _event: &EpochEvent) {}

    /// Called right after block `record.block` is frozen, with the pool it
    /// trained on and the samples it learned (sorted dataset indices).
    fn block_frozen(&mut self, _net: &QuickNet, _pool: &TrainingPool, _learned: &[usize], _record: &BlockTrainRecord) {}
}

impl<F: FnMut(&EpochEvent)> CascadeObserver for F {
    fn epoch(&mut self, event: &EpochEvent) {
        self(event)
    }
}

/// Discards every event.
pub struct Quiet;

impl CascadeObserver for Quiet {}

fn phase_rng(seed: u64, block: usize, phase: u64) -> RandomStream {
    RandomStream::new(seed).derive(u64::MAX - (4 * block as u64 + phase))
}

fn labels_of(data: &Dataset, idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| data.labels[i]).collect()
}

fn apply(params: &mut [&mut Parameter], grads: &Gradients, lr: f64) -> Result<()> {
    grads.accumulate_into(params.iter_mut().map(|p| &mut **p))?;
    Adam::default().step(params, lr)
}

/// Drives `epoch` under the plateau schedule. `epoch(number, lr)` returns the
/// epoch's mean loss.
fn run_schedule(
    cfg: &TrainConfig,
    mut epoch: impl FnMut(usize, f64) -> Result<f64>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    let mut schedule = cfg.schedule();
    let mut out = Vec::new();
    for e in 1..=cfg.max_epochs {
        let lr = schedule.lr();
        let loss = epoch(e, lr)?;
        let rec = EpochRecord { epoch: e, lr, loss };
        on_epoch(&rec);
        out.push(rec);
        if schedule.observe(loss) {
            break;
        }
    }
    Ok(out)
}

/// Trains block `j`'s subnet and classifier with cross-entropy on draws from
/// `pool`. Frozen blocks before `j` are re-run forward for every batch.
pub fn train_block(
    net: &mut QuickNet,
    j: usize,
    data: &Dataset,
    pool: &TrainingPool,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::Contract(format!("block {j} has an empty training pool")));
    }
    if let Some(i) = (0..j).find(|&i| !net.blocks()[i].is_frozen()) {
        return Err(Error::Contract(format!("block {i} must be frozen before block {j} trains")));
    }
    net.block(j)?;
    let mut rng = phase_rng(cfg.seed, j, 0);
    let epoch = |e: usize, lr: f64| -> Result<f64> {
        let draws = pool.draw(&mut rng, pool.len())?;
        let mut total = 0.0;
        for (b, chunk) in draws.chunks(cfg.batch_size).enumerate() {
            let labels = labels_of(data, chunk);
            let x = net.prefix_forward(j, &data.inputs.gather_rows(chunk)?)?;
            let (loss, grads) = {
                let block = net.block(j)?;
                let mut tape = Tape::new();
                let v = tape.constant(x);
                let f = block.subnet_forward(&mut tape, v)?;
                let z = block.classifier_forward(&mut tape, f)?;
                let (loss, _) = tape.softmax_cross_entropy(z, &labels)?;
                let l = tape.value(loss).data()[0];
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch: e, batch: b, lr });
                }
                let grads = tape.backward(loss)?;
                block.record_backward(Component::Subnet, chunk.len());
                block.record_backward(Component::Classifier, chunk.len());
                (l, grads)
            };
            total += loss * chunk.len() as f64;
            apply(&mut net.block_mut(j)?.exit_params_mut(), &grads, lr)?;
        }
        Ok(total / draws.len() as f64)
    };
    run_schedule(cfg, epoch, on_epoch)
}

/// Block `j`'s activations and classifier correctness for every pool sample,
/// in pool order.
fn commitment_inputs(net: &QuickNet, j: usize, data: &Dataset, pool: &TrainingPool, batch: usize) -> Result<(Tensor, Vec<f64>)> {
    let block = net.block(j)?;
    let mut shape = vec![pool.len()];
    shape.extend_from_slice(block.output_shape());
    let mut features = Vec::with_capacity(shape.iter().product());
    let mut targets = Vec::with_capacity(pool.len());
    for chunk in pool.indices().chunks(batch) {
        let x = net.prefix_forward(j, &data.inputs.gather_rows(chunk)?)?;
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let f = block.subnet_forward(&mut tape, v)?;
        let z = block.classifier_forward(&mut tape, f)?;
        let c = net.num_classes();
        for (row, &i) in tape.value(z).data().chunks(c).zip(chunk) {
            targets.push(if crate::model::argmax(row) == data.labels[i] { 1.0 } else { 0.0 });
        }
        features.extend_from_slice(tape.value(f).data());
    }
    Ok((Tensor::new(shape, features)?, targets))
}

/// Trains block `j`'s commitment head with BCE against classifier
/// correctness. The subnet and classifier are held fixed; their activations
/// are computed once.
pub fn train_commitment(
    net: &mut QuickNet,
    j: usize,
    data: &Dataset,
    pool: &TrainingPool,
    cfg: &TrainConfig,
) -> Result<CommitmentRecord> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::Contract(format!("block {j} has an empty training pool")));
    }
    let (features, targets) = commitment_inputs(net, j, data, pool, cfg.batch_size.max(256))?;
    let positives = targets.iter().filter(|&&t| t == 1.0).count();
    let mut rng = phase_rng(cfg.seed, j, 1);
    let epoch = |e: usize, lr: f64| -> Result<f64> {
        let draws = rng.weighted_draws(pool.weights(), pool.len())?;
        let mut total = 0.0;
        for (b, chunk) in draws.chunks(cfg.batch_size).enumerate() {
            let t: Vec<f64> = chunk.iter().map(|&k| targets[k]).collect();
            let x = features.gather_rows(chunk)?;
            let (loss, grads) = {
                let block = net.block(j)?;
                let mut tape = Tape::new();
                let v = tape.constant(x);
                let s = block.commitment_forward(&mut tape, v)?;
                let loss = tape.bce_with_logits(s, &t)?;
                let l = tape.value(loss).data()[0];
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch: e, batch: b, lr });
                }
                let grads = tape.backward(loss)?;
                block.record_backward(Component::Commitment, chunk.len());
                (l, grads)
            };
            total += loss * chunk.len() as f64;
            apply(&mut net.block_mut(j)?.commitment_params_mut(), &grads, lr)?;
        }
        Ok(total / draws.len() as f64)
    };
    let epochs = run_schedule(cfg, epoch, |_| {})?;
    Ok(CommitmentRecord {
        epochs,
        positives,
        negatives: targets.len() - positives,
    })
}

/// Pool samples that exit `j` gets right with confidence above `t` and a
/// positive commitment score. Sorted dataset indices.
pub fn identify_learned(net: &QuickNet, j: usize, data: &Dataset, pool: &TrainingPool, t: f64) -> Result<Vec<usize>> {
    let mut learned = Vec::new();
    for chunk in pool.indices().chunks(1024) {
        let x = net.prefix_forward(j, &data.inputs.gather_rows(chunk)?)?;
        let (_, exits) = net.forward_block(j, &x)?;
        for (e, &i) in exits.iter().zip(chunk) {
            if e.confidence > t && e.commitment_positive && e.prediction() == data.labels[i] {
                learned.push(i);
            }
        }
    }
    Ok(learned)
}

/// Cascade training: blocks are appended and trained one at a time, each on
/// the samples no earlier block learned, then frozen.
pub fn train_quicknet(
    arch: &Architecture,
    data: &Dataset,
    cfg: &TrainConfig,
    test: Option<&Dataset>,
    mut observer: impl CascadeObserver,
) -> Result<(QuickNet, CascadeRun)> {
    cfg.validate()?;
    arch.validate()?;
    if data.num_classes != arch.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, architecture expects {}",
            data.num_classes, arch.num_classes
        )));
    }
    let mut net = QuickNet::new(&arch.input_shape, arch.num_classes, cfg.seed);
    let mut pool = TrainingPool::full(&data.labels, data.num_classes, cfg.sampling)?;
    let mut records: Vec<BlockTrainRecord> = Vec::new();
    let mut cumulative = 0u64;
    let mut stopped_early = false;
    for (j, spec) in arch.blocks.iter().enumerate() {
        net.append_block(spec)?;
        let costs = ExitCosts::for_net(&net)?;
        let per_epoch = pool.len() as u64 * (costs.prefix(j) + 3 * costs.trainable_path(j));
        let epochs = train_block(&mut net, j, data, &pool, cfg, |e| {
            observer.epoch(&EpochEvent {
                block: j,
                epoch: e.epoch,
                lr: e.lr,
                loss: e.loss,
                pool_size: pool.len(),
                cum_flops: cumulative + e.epoch as u64 * per_epoch,
            })
        })?;
        let commitment = train_commitment(&mut net, j, data, &pool, cfg)?;
        let learned = identify_learned(&net, j, data, &pool, cfg.threshold)?;
        let (next, outcome) = pool.shrink(&learned, cfg.min_pool(data.num_classes))?;
        net.freeze_block(j)?;
        let mut record = BlockTrainRecord {
            block: j,
            pool_size: pool.len(),
            class_composition: pool.class_counts().to_vec(),
            epochs,
            commitment,
            learned: learned.len(),
            flops: BlockTrainingFlops::default(),
            cumulative_flops: 0,
            test_accuracy: None,
        };
        record.flops = block_training_flops(&costs, &record.work());
        cumulative += record.flops.total();
        record.cumulative_flops = cumulative;
        record.test_accuracy = match test {
            Some(t) => Some(evaluate(&net, t, cfg.threshold, ExitMode::ConfidenceAndCommitment, 1)?.accuracy),
            None => None,
        };
        observer.block_frozen(&net, &pool, &learned, &record);
        records.push(record);
        pool = next;
        if outcome == ShrinkOutcome::CascadeComplete {
            stopped_early = j + 1 < arch.blocks.len();
            break;
        }
    }
    let costs = ExitCosts::for_net(&net)?;
    let work: Vec<PhaseWork> = records.iter().map(BlockTrainRecord::work).collect();
    let ledger = CostLedger::new(&costs, &work);
    Ok((
        net,
        CascadeRun {
            records,
            ledger,
            stopped_early,
        },
    ))
}

/// Accuracy of the last exit alone.
pub fn last_exit_accuracy(net: &QuickNet, data: &Dataset) -> Result<f64> {
    let last = net.num_blocks().checked_sub(1).ok_or_else(|| Error::Contract("network has no blocks".into()))?;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(1024) {
        let x = net.prefix_forward(last, &data.inputs.gather_rows(chunk)?)?;
        let (_, exits) = net.forward_block(last, &x)?;
        correct += exits.iter().zip(chunk).filter(|(e, &i)| e.prediction() == data.labels[i]).count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// The baseline: the whole backbone trained jointly on the last exit's
/// cross-entropy, one shuffled pass over the data per epoch.
pub fn train_end_to_end(
    arch: &Architecture,
    data: &Dataset,
    cfg: &TrainConfig,
    test: Option<&Dataset>,
    mut on_epoch: impl FnMut(&EpochEvent),
) -> Result<(QuickNet, EndToEndRun)> {
    cfg.validate()?;
    let mut net = QuickNet::from_architecture(arch, cfg.seed)?;
    if data.is_empty() {
        return Err(Error::Contract("end-to-end training needs samples".into()));
    }
    let costs = ExitCosts::for_net(&net)?;
    let per_epoch = end_to_end_training_cost(&costs, data.len(), 1);
    let last = net.num_blocks() - 1;
    let mut rng = phase_rng(cfg.seed, 0, 3);
    let mut test_accuracy = Vec::new();
    let epoch = |e: usize, lr: f64| -> Result<f64> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let labels = labels_of(data, chunk);
            let x = data.inputs.gather_rows(chunk)?;
            let (loss, grads) = {
                let mut tape = Tape::new();
                let mut v = tape.constant(x);
                for block in net.blocks() {
                    v = block.subnet_forward(&mut tape, v)?;
                }
                let z = net.blocks()[last].classifier_forward(&mut tape, v)?;
                let (loss, _) = tape.softmax_cross_entropy(z, &labels)?;
                let l = tape.value(loss).data()[0];
                if !l.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch: e, batch: b, lr });
                }
                let grads = tape.backward(loss)?;
                for block in net.blocks() {
                    block.record_backward(Component::Subnet, chunk.len());
                }
                net.blocks()[last].record_backward(Component::Classifier, chunk.len());
                (l, grads)
            };
            total += loss * chunk.len() as f64;
            apply(&mut net.backbone_params_mut(), &grads, lr)?;
        }
        test_accuracy.push(match test {
            Some(t) => Some(last_exit_accuracy(&net, t)?),
            None => None,
        });
        Ok(total / data.len() as f64)
    };
    let epochs = run_schedule(cfg, epoch, |r| {
        on_epoch(&EpochEvent {
            block: last,
            epoch: r.epoch,
            lr: r.lr,
            loss: r.loss,
            pool_size: data.len(),
            cum_flops: r.epoch as u64 * per_epoch,
        })
    })?;
    net.freeze_all();
    let training_flops = end_to_end_training_cost(&costs, data.len(), epochs.len());
    let mut ledger = CostLedger::new(&costs, &[]);
    ledger.training_total = training_flops;
    Ok((
        net,
        EndToEndRun {
            samples_per_epoch: data.len(),
            epochs,
            test_accuracy,
            training_flops,
            ledger,
        },
    ))
}
