//! Confidence, the exit rule, early-exit inference and threshold sweeps.

use serde::{Deserialize, Serialize};

use crate::cost::{expected_inference_cost, ExitCosts};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, ExitOutput, QuickNet};
use crate::numerics::Tensor;

/// One minus the entropy of `p` normalized by `ln C`.
pub fn confidence(p: &[f64]) -> Result<f64> {
    if p.len() < 2 {
        return Err(Error::Contract(format!("confidence needs at least 2 classes, got {}", p.len())));
    }
    let total: f64 = p.iter().sum();
    if p.iter().any(|&v| !(0.0..=1.0 + 1e-12).contains(&v)) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("not a probability distribution (sum {total})")));
    }
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    Ok((1.0 - h / (p.len() as f64).ln()).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitMode {
    ConfidenceOnly,
    ConfidenceAndCommitment,
}

impl ExitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ExitMode::ConfidenceOnly => "confidence",
            ExitMode::ConfidenceAndCommitment => "confidence+commitment",
        }
    }
}

pub fn qualifies(confidence: f64, commitment_positive: bool, t: f64, mode: ExitMode) -> bool {
    confidence > t && (mode == ExitMode::ConfidenceOnly || commitment_positive)
}

/// Applies the exit rule to a complete list of `(confidence, commitment
/// positive)` profiles. Returns the chosen exit and whether it is a fallback.
pub fn choose_exit(profiles: &[(f64, bool)], t: f64, mode: ExitMode) -> (usize, bool) {
    match profiles.iter().position(|&(c, pos)| qualifies(c, pos, t, mode)) {
        Some(i) => (i, false),
        None => {
            let conf: Vec<f64> = profiles.iter().map(|p| p.0).collect();
            (argmax(&conf), true)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitDecision {
    pub exit: usize,
    pub fallback: bool,
    /// Confidences of the exits evaluated, in order.
    pub confidences: Vec<f64>,
    pub prediction: usize,
    pub flops: u64,
}

fn require_frozen(net: &QuickNet) -> Result<()> {
    if net.num_blocks() == 0 || !net.is_frozen() {
        return Err(Error::Contract("early-exit inference requires a non-empty, fully frozen network".into()));
    }
    Ok(())
}

/// Sequential early-exit inference for a batch. Samples leave the batch at
/// the first qualifying exit; later blocks only see the samples still active.
pub fn infer_batch(net: &QuickNet, x: &Tensor, t: f64, mode: ExitMode, costs: &ExitCosts) -> Result<Vec<ExitDecision>> {
    require_frozen(net)?;
    let n = x.shape().first().copied().unwrap_or(0);
    let mut seen: Vec<Vec<ExitOutput>> = vec![Vec::new(); n];
    let mut decisions: Vec<Option<ExitDecision>> = vec![None; n];
    let mut active: Vec<usize> = (0..n).collect();
    let mut cur = x.clone();
    for i in 0..net.num_blocks() {
        if active.is_empty() {
            break;
        }
        let (next, exits) = net.forward_block(i, &cur)?;
        let mut keep = Vec::with_capacity(active.len());
        for (row, (&s, e)) in active.iter().zip(exits).enumerate() {
            let stop = qualifies(e.confidence, e.commitment_positive, t, mode);
            seen[s].push(e);
            if stop {
                decisions[s] = Some(decision(&seen[s], i, false, costs.exit_incurred[i]));
            } else {
                keep.push(row);
            }
        }
        cur = if keep.len() == active.len() { next } else { next.gather_rows(&keep)? };
        active = keep.iter().map(|&r| active[r]).collect();
    }
    for s in active {
        let conf: Vec<f64> = seen[s].iter().map(|e| e.confidence).collect();
        decisions[s] = Some(decision(&seen[s], argmax(&conf), true, costs.full_forward));
    }
    Ok(decisions.into_iter().map(|d| d.expect("every sample decided")).collect())
}

fn decision(seen: &[ExitOutput], exit: usize, fallback: bool, flops: u64) -> ExitDecision {
    ExitDecision {
        exit,
        fallback,
        confidences: seen.iter().map(|e| e.confidence).collect(),
        prediction: seen[exit].prediction(),
        flops,
    }
}

/// Early-exit inference for a single sample of the network's input shape.
pub fn decide_and_infer(net: &QuickNet, x: &Tensor, t: f64, mode: ExitMode) -> Result<ExitDecision> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let batch = x.clone().reshape(&shape)?;
    let costs = ExitCosts::for_net(net)?;
    Ok(infer_batch(net, &batch, t, mode, &costs)?.remove(0))
}

/// Runs [`infer_batch`] over `x` in chunks of `batch` rows, optionally
/// spreading chunks over `threads` worker threads. Results are in sample order.
pub fn infer_dataset(
    net: &QuickNet,
    x: &Tensor,
    t: f64,
    mode: ExitMode,
    batch: usize,
    threads: usize,
) -> Result<Vec<ExitDecision>> {
    let costs = ExitCosts::for_net(net)?;
    let chunks = row_chunks(x, batch)?;
    let run = |c: &Tensor| infer_batch(net, c, t, mode, &costs);
    let per_chunk = map_chunks(&chunks, threads, run)?;
    Ok(per_chunk.into_iter().flatten().collect())
}

/// Every exit of every sample: `result[sample][exit]`.
pub fn collect_exits(net: &QuickNet, x: &Tensor, batch: usize, threads: usize) -> Result<Vec<Vec<ExitOutput>>> {
    let chunks = row_chunks(x, batch)?;
    let per_chunk = map_chunks(&chunks, threads, |c| {
        let by_exit = net.forward_all(c)?;
        let n = c.shape()[0];
        let mut by_sample: Vec<Vec<ExitOutput>> = (0..n).map(|_| Vec::with_capacity(by_exit.len())).collect();
        for exits in by_exit {
            for (s, e) in exits.into_iter().enumerate() {
                by_sample[s].push(e);
            }
        }
        Ok(by_sample)
    })?;
    Ok(per_chunk.into_iter().flatten().collect())
}

fn row_chunks(x: &Tensor, batch: usize) -> Result<Vec<Tensor>> {
    let n = x.shape().first().copied().unwrap_or(0);
    let batch = batch.max(1);
    (0..n)
        .step_by(batch)
        .map(|lo| x.gather_rows(&(lo..(lo + batch).min(n)).collect::<Vec<_>>()))
        .collect()
}

fn map_chunks<T: Send>(
    chunks: &[Tensor],
    threads: usize,
    f: impl Fn(&Tensor) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    if threads <= 1 || chunks.len() <= 1 {
        return chunks.iter().map(&f).collect();
    }
    let per_thread = chunks.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .chunks(per_thread)
            .map(|group| scope.spawn(|| group.iter().map(&f).collect::<Result<Vec<T>>>()))
            .collect();
        let mut out = Vec::with_capacity(chunks.len());
        for h in handles {
            out.extend(h.join().expect("inference worker panicked")?);
        }
        Ok(out)
    })
}

/// Per-sample `(exit, fallback)` under the rule, from cached exits.
pub fn decisions_from_exits(exits: &[Vec<ExitOutput>], t: f64, mode: ExitMode) -> Vec<(usize, bool)> {
    exits
        .iter()
        .map(|s| {
            let profiles: Vec<(f64, bool)> = s.iter().map(|e| (e.confidence, e.commitment_positive)).collect();
            choose_exit(&profiles, t, mode)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: ExitMode,
    pub threshold: f64,
    pub accuracy: f64,
    pub mean_flops: f64,
    /// Fraction of samples leaving at each exit without fallback.
    pub exit_fractions: Vec<f64>,
    pub fallback_fraction: f64,
}

/// Evaluates the rule at every threshold on exits computed once.
pub fn sweep_from_exits(
    exits: &[Vec<ExitOutput>],
    labels: &[usize],
    thresholds: &[f64],
    mode: ExitMode,
    costs: &ExitCosts,
) -> Result<Vec<SweepRow>> {
    if thresholds.is_empty() {
        return Err(Error::Contract("threshold list is empty".into()));
    }
    if exits.len() != labels.len() {
        return Err(Error::CountMismatch {
            images: exits.len(),
            labels: labels.len(),
        });
    }
    let n = exits.len().max(1) as f64;
    let blocks = costs.exit_incurred.len();
    Ok(thresholds
        .iter()
        .map(|&t| {
            let decisions = decisions_from_exits(exits, t, mode);
            let mut hist = vec![0usize; blocks];
            let (mut fallback, mut correct) = (0usize, 0usize);
            let mut flops = Vec::with_capacity(decisions.len());
            for ((&(i, fb), s), &label) in decisions.iter().zip(exits).zip(labels) {
                if fb {
                    fallback += 1;
                    flops.push(costs.full_forward);
                } else {
                    hist[i] += 1;
                    flops.push(costs.exit_incurred[i]);
                }
                correct += usize::from(s[i].prediction() == label);
            }
            SweepRow {
                mode,
                threshold: t,
                accuracy: correct as f64 / n,
                mean_flops: expected_inference_cost(&flops),
                exit_fractions: hist.iter().map(|&h| h as f64 / n).collect(),
                fallback_fraction: fallback as f64 / n,
            }
        })
        .collect())
}

/// Sequential early-exit inference over a dataset at one threshold.
pub fn evaluate(net: &QuickNet, data: &Dataset, t: f64, mode: ExitMode, threads: usize) -> Result<SweepRow> {
    let decisions = infer_dataset(net, &data.inputs, t, mode, 1000, threads)?;
    let n = decisions.len().max(1) as f64;
    let mut hist = vec![0usize; net.num_blocks()];
    let mut fallback = 0usize;
    for d in decisions.iter() {
        if d.fallback {
            fallback += 1;
        } else {
            hist[d.exit] += 1;
        }
    }
    let correct = decisions.iter().zip(&data.labels).filter(|(d, &l)| d.prediction == l).count();
    let flops: Vec<u64> = decisions.iter().map(|d| d.flops).collect();
    Ok(SweepRow {
        mode,
        threshold: t,
        accuracy: correct as f64 / n,
        mean_flops: expected_inference_cost(&flops),
        exit_fractions: hist.iter().map(|&h| h as f64 / n).collect(),
        fallback_fraction: fallback as f64 / n,
    })
}

pub fn threshold_sweep(
    net: &QuickNet,
    inputs: &Tensor,
    labels: &[usize],
    thresholds: &[f64],
    mode: ExitMode,
) -> Result<Vec<SweepRow>> {
    require_frozen(net)?;
    let exits = collect_exits(net, inputs, 1000, 1)?;
    sweep_from_exits(&exits, labels, thresholds, mode, &ExitCosts::for_net(net)?)
}
