//! FLOP accounting.
//!
//! A multiply-accumulate counts as two FLOPs. Backward passes are charged at
//! twice the forward cost of the layers they traverse.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::layers::LayerSpec;
use crate::model::QuickNet;

/// Forward FLOPs of one layer on one sample with per-sample `input` shape.
pub fn layer_flops(spec: &LayerSpec, input: &[usize]) -> Result<u64> {
    let out = spec.output_shape(input)?;
    let elems = |s: &[usize]| s.iter().product::<usize>() as u64;
    Ok(match *spec {
        LayerSpec::Dense { units } => 2 * input[0] as u64 * units as u64,
        LayerSpec::Conv { channels, kernel, .. } => {
            2 * (kernel[0] * kernel[1] * input[0] * channels) as u64 * (out[1] * out[2]) as u64
        }
        LayerSpec::MaxPool { window } | LayerSpec::AvgPool { window } => {
            (window[0] * window[1]) as u64 * elems(&out)
        }
        LayerSpec::MixedPool { window } => 2 * (window[0] * window[1]) as u64 * elems(&out) + 4 * elems(&out),
        LayerSpec::Relu => elems(input),
        LayerSpec::Flatten => 0,
    })
}

pub fn stack_flops(layers: &[(LayerSpec, Vec<usize>)]) -> Result<u64> {
    layers.iter().map(|(s, shape)| layer_flops(s, shape)).sum()
}

/// Per-block forward FLOPs for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockFlops {
    pub subnet: u64,
    pub classifier: u64,
    pub commitment: u64,
}

impl BlockFlops {
    pub fn heads(&self) -> u64 {
        self.classifier + self.commitment
    }
}

/// Per-sample forward costs of every exit of a network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitCosts {
    pub blocks: Vec<BlockFlops>,
    /// Input to exit `i`: subnets `0..=i` plus exit `i`'s two heads.
    pub exit_path: Vec<u64>,
    /// What sequential inference actually spends to stop at exit `i`: the
    /// path to `i` plus the heads of every earlier exit it had to inspect.
    pub exit_incurred: Vec<u64>,
    /// Every subnet and every head.
    pub full_forward: u64,
    /// Every subnet and the last classifier: the plain network without exits.
    pub backbone_forward: u64,
}

impl ExitCosts {
    pub fn for_net(net: &QuickNet) -> Result<ExitCosts> {
        let blocks = net
            .blocks()
            .iter()
            .map(|b| {
                Ok(BlockFlops {
                    subnet: stack_flops(&b.subnet_specs())?,
                    classifier: stack_flops(&b.classifier_specs())?,
                    commitment: stack_flops(&b.commitment_specs())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ExitCosts::from_blocks(blocks))
    }

    pub fn from_blocks(blocks: Vec<BlockFlops>) -> ExitCosts {
        let (mut exit_path, mut exit_incurred) = (Vec::new(), Vec::new());
        let (mut subnets, mut heads) = (0, 0);
        for b in &blocks {
            subnets += b.subnet;
            heads += b.heads();
            exit_path.push(subnets + b.heads());
            exit_incurred.push(subnets + heads);
        }
        let backbone_forward = subnets + blocks.last().map_or(0, |b| b.classifier);
        ExitCosts {
            full_forward: subnets + heads,
            blocks,
            exit_path,
            exit_incurred,
            backbone_forward,
        }
    }

    /// Forward FLOPs of subnets `0..j`.
    pub fn prefix(&self, j: usize) -> u64 {
        self.blocks[..j].iter().map(|b| b.subnet).sum()
    }

    /// Subnet plus classifier of block `j`: the part cross-entropy training updates.
    pub fn trainable_path(&self, j: usize) -> u64 {
        self.blocks[j].subnet + self.blocks[j].classifier
    }
}

/// What the trainer did in one block's phases, in sample counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseWork {
    pub block: usize,
    pub pool_size: usize,
    pub epochs: usize,
    pub commitment_epochs: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockTrainingFlops {
    /// Subnet and classifier training on the pool.
    pub block: u64,
    /// One feature pass over the pool, then commitment-head epochs.
    pub commitment: u64,
    /// The learned-sample pass.
    pub identification: u64,
}

impl BlockTrainingFlops {
    pub fn total(&self) -> u64 {
        self.block + self.commitment + self.identification
    }
}

/// Training FLOPs of one block.
///
/// Every epoch draws `pool_size` samples. Each costs a forward pass through
/// the frozen prefix plus three times the forward cost of the trainable path.
pub fn block_training_flops(costs: &ExitCosts, w: &PhaseWork) -> BlockTrainingFlops {
    let j = w.block;
    let n = w.pool_size as u64;
    let prefix = costs.prefix(j);
    let b = &costs.blocks[j];
    BlockTrainingFlops {
        block: n * w.epochs as u64 * (prefix + 3 * costs.trainable_path(j)),
        commitment: n * (prefix + b.subnet + b.classifier) + n * w.commitment_epochs as u64 * 3 * b.commitment,
        identification: n * (prefix + b.subnet + b.heads()),
    }
}

/// Total cascade training FLOPs.
pub fn training_cost(costs: &ExitCosts, work: &[PhaseWork]) -> u64 {
    work.iter().map(|w| block_training_flops(costs, w).total()).sum()
}

/// Joint training of the whole backbone on the last exit: each sample costs
/// three backbone forwards.
pub fn end_to_end_training_cost(costs: &ExitCosts, samples_per_epoch: usize, epochs: usize) -> u64 {
    samples_per_epoch as u64 * epochs as u64 * 3 * costs.backbone_forward
}

/// Mean of per-sample FLOPs.
pub fn expected_inference_cost(flops: &[u64]) -> f64 {
    if flops.is_empty() {
        return 0.0;
    }
    flops.iter().map(|&f| f as f64).sum::<f64>() / flops.len() as f64
}

/// Cumulative cost bookkeeping for a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub training_per_block: Vec<BlockTrainingFlops>,
    pub exit_path: Vec<u64>,
    pub exit_incurred: Vec<u64>,
    pub full_forward: u64,
    pub backbone_forward: u64,
    pub training_total: u64,
}

impl CostLedger {
    pub fn new(costs: &ExitCosts, work: &[PhaseWork]) -> CostLedger {
        let training_per_block: Vec<_> = work.iter().map(|w| block_training_flops(costs, w)).collect();
        CostLedger {
            training_total: training_per_block.iter().map(BlockTrainingFlops::total).sum(),
            training_per_block,
            exit_path: costs.exit_path.clone(),
            exit_incurred: costs.exit_incurred.clone(),
            full_forward: costs.full_forward,
            backbone_forward: costs.backbone_forward,
        }
    }
}
