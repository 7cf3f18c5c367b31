//! `train`, `eval` and `sweep`.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, ValueEnum};
use quicknet::data::split_indices;
use quicknet::exit::{collect_exits, sweep_from_exits};
use quicknet::trainer::{last_exit_accuracy, EpochEvent};
use quicknet::{
    evaluate, load_idx, train_end_to_end, train_quicknet, Architecture, Dataset, ExitCosts, ExitMode, LayerSpec,
    QuickNet, Sampling, SweepRow, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::manifest::{
    git_blob_hash, sha256_hex, DatasetInfo, FileDigest, FinalMetrics, RunManifest, TrainMode, CHECKPOINT_FILE,
    COST_REPORT_FILE, EPOCHS_FILE, MANIFEST_FILE, TIMING_FILE,
};
use crate::{eval_threads, CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SamplingArg {
    Balanced,
    Literal,
}

impl From<SamplingArg> for Sampling {
    fn from(s: SamplingArg) -> Self {
        match s {
            SamplingArg::Balanced => Sampling::Balanced,
            SamplingArg::Literal => Sampling::Literal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExitModeArg {
    /// Confidence above the threshold.
    Confidence,
    /// Confidence above the threshold and a positive commitment score.
    Commitment,
}

impl From<ExitModeArg> for ExitMode {
    fn from(m: ExitModeArg) -> Self {
        match m {
            ExitModeArg::Confidence => ExitMode::ConfidenceOnly,
            ExitModeArg::Commitment => ExitMode::ConfidenceAndCommitment,
        }
    }
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    /// Architecture JSON file.
    #[arg(long)]
    pub arch: PathBuf,
    #[arg(long)]
    pub data_images: PathBuf,
    #[arg(long)]
    pub data_labels: PathBuf,
    /// Held-out images, evaluated after each block freeze (or epoch).
    #[arg(long, requires = "test_labels")]
    pub test_images: Option<PathBuf>,
    #[arg(long, requires = "test_images")]
    pub test_labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "quicknet")]
    pub mode: TrainMode,
    #[arg(long, default_value_t = 0.9)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    /// Defaults to 1e-3, or 3e-4 when the architecture has convolutions.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum, default_value = "balanced")]
    pub sampling: SamplingArg,
    /// Stop adding blocks once fewer samples remain (default: twice the class count).
    #[arg(long)]
    pub min_pool_size: Option<usize>,
    /// Train on a stratified subset of this many samples.
    #[arg(long)]
    pub subset: Option<usize>,
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub data_images: PathBuf,
    #[arg(long)]
    pub data_labels: PathBuf,
    /// Defaults to the threshold the run was trained with.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_enum, default_value = "commitment")]
    pub exit_mode: ExitModeArg,
    /// Also write the metrics JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub data_images: PathBuf,
    #[arg(long)]
    pub data_labels: PathBuf,
    /// Comma-separated thresholds.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,0.95,0.99,1")]
    pub thresholds: Vec<f64>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: ExitMode,
    pub threshold: f64,
    pub accuracy: f64,
    pub mean_flops: f64,
    pub full_forward_flops: u64,
    pub exit_fractions: Vec<f64>,
    pub fallback_fraction: f64,
}

fn dataset_error(e: quicknet::Error) -> CliError {
    match e {
        quicknet::Error::Io { path, source } => CliError::Dataset {
            path,
            message: source.to_string(),
        },
        other => other.into(),
    }
}

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Dataset {
        path: path.into(),
        message: e.to_string(),
    })
}

fn describe(images: &Path, labels: &Path, data: &Dataset, subset: Option<usize>) -> CliResult<DatasetInfo> {
    Ok(DatasetInfo {
        images: images.display().to_string(),
        labels: labels.display().to_string(),
        images_sha256: sha256_hex(&read_bytes(images)?),
        labels_sha256: sha256_hex(&read_bytes(labels)?),
        samples: data.len(),
        num_classes: data.num_classes,
        class_counts: data.class_counts(),
        subset,
    })
}

/// Loads an IDX pair and views it with the architecture's input shape.
pub fn load_dataset(images: &Path, labels: &Path, arch: &Architecture) -> CliResult<Dataset> {
    let data = load_idx(images, labels).map_err(dataset_error)?;
    Ok(data.reshape_samples(&arch.input_shape)?.with_num_classes(arch.num_classes)?)
}

fn stratified_subset(data: Dataset, size: usize, seed: u64) -> CliResult<Dataset> {
    if size == 0 || size >= data.len() {
        return Err(CliError::Usage(format!(
            "subset size {size} must lie in [1, {})",
            data.len()
        )));
    }
    let (keep, _) = split_indices(&data.labels, data.num_classes, size as f64 / data.len() as f64, seed)?;
    Ok(data.subset(&keep)?)
}

fn has_conv(arch: &Architecture) -> bool {
    arch.blocks
        .iter()
        .flat_map(|b| b.subnet.iter().chain(&b.classifier))
        .any(|l| matches!(l, LayerSpec::Conv { .. }))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::output(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(quicknet::Error::from)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

struct EpochLog {
    path: PathBuf,
    writer: csv::Writer<File>,
    error: Option<CliError>,
}

impl EpochLog {
    fn create(path: PathBuf) -> CliResult<Self> {
        let mut writer = csv::Writer::from_path(&path).map_err(|e| CliError::output(&path, e))?;
        writer
            .write_record(["block", "epoch", "lr", "loss", "pool_size", "cum_flops"])
            .and_then(|_| writer.flush().map_err(Into::into))
            .map_err(|e| CliError::output(&path, e))?;
        Ok(EpochLog { path, writer, error: None })
    }

    fn append(&mut self, e: &EpochEvent) {
        if self.error.is_some() {
            return;
        }
        let row = [
            e.block.to_string(),
            e.epoch.to_string(),
            e.lr.to_string(),
            e.loss.to_string(),
            e.pool_size.to_string(),
            e.cum_flops.to_string(),
        ];
        let res = self.writer.write_record(&row).and_then(|_| self.writer.flush().map_err(Into::into));
        if let Err(err) = res {
            self.error = Some(CliError::output(&self.path, err));
        }
    }

    fn finish(self) -> CliResult<()> {
        self.error.map_or(Ok(()), Err)
    }
}

#[derive(Serialize)]
struct CostReport<'a> {
    exit_path_flops: &'a [u64],
    exit_incurred_flops: &'a [u64],
    full_forward_flops: u64,
    backbone_forward_flops: u64,
    training_flops_per_block: Vec<u64>,
    training_flops_total: u64,
    /// Cost of one end-to-end epoch over the full training set on the same backbone.
    end_to_end_flops_per_epoch: u64,
}

#[derive(Serialize)]
struct Timing {
    started_unix_secs: u64,
    finished_unix_secs: u64,
    elapsed_secs: f64,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Trains a network and writes its checkpoint, manifest, per-epoch CSV and
/// cost report into `--out-dir`.
pub fn train(args: &TrainArgs) -> CliResult<RunManifest> {
    let started = (unix_now(), Instant::now());
    let arch_bytes = fs::read(&args.arch).map_err(|e| quicknet::Error::Io {
        path: args.arch.clone(),
        source: e,
    })?;
    let arch_text = String::from_utf8(arch_bytes.clone())
        .map_err(|_| CliError::Usage(format!("{} is not UTF-8", args.arch.display())))?;
    let arch = Architecture::from_json(&arch_text)?;

    let mut data = load_dataset(&args.data_images, &args.data_labels, &arch)?;
    if let Some(size) = args.subset {
        data = stratified_subset(data, size, args.seed)?;
    }
    let dataset = describe(&args.data_images, &args.data_labels, &data, args.subset)?;
    let test = match (&args.test_images, &args.test_labels) {
        (Some(i), Some(l)) => Some((load_dataset(i, l, &arch)?, i, l)),
        _ => None,
    };
    let test_dataset = match &test {
        Some((t, i, l)) => Some(describe(i, l, t, None)?),
        None => None,
    };
    let test_data = test.as_ref().map(|(t, _, _)| t);

    let cfg = TrainConfig {
        lr: args.lr.unwrap_or(if has_conv(&arch) { 3e-4 } else { 1e-3 }),
        max_epochs: args.max_epochs,
        batch_size: args.batch_size,
        threshold: args.threshold,
        seed: args.seed,
        min_pool_size: args.min_pool_size,
        sampling: args.sampling.into(),
        ..TrainConfig::default()
    };
    cfg.validate()?;

    fs::create_dir_all(&args.out_dir).map_err(|e| CliError::output(&args.out_dir, e))?;
    let mut log = EpochLog::create(args.out_dir.join(EPOCHS_FILE))?;
    let threads = eval_threads();

    let (net, cascade, end_to_end, metrics) = match args.mode {
        TrainMode::Quicknet => {
            let (net, run) = train_quicknet(&arch, &data, &cfg, test_data, |e: &EpochEvent| log.append(e))?;
            let eval = match test_data {
                Some(t) => Some(evaluate(&net, t, cfg.threshold, ExitMode::ConfidenceAndCommitment, threads)?),
                None => None,
            };
            let metrics = FinalMetrics {
                threshold: cfg.threshold,
                test_accuracy: eval.as_ref().map(|e| e.accuracy),
                mean_inference_flops: eval.as_ref().map(|e| e.mean_flops),
                training_flops: run.ledger.training_total,
                full_forward_flops: run.ledger.full_forward,
                backbone_forward_flops: run.ledger.backbone_forward,
            };
            (net, Some(run), None, metrics)
        }
        TrainMode::End2end => {
            let (net, run) = train_end_to_end(&arch, &data, &cfg, test_data, |e| log.append(e))?;
            let metrics = FinalMetrics {
                threshold: cfg.threshold,
                test_accuracy: test_data.map(|t| last_exit_accuracy(&net, t)).transpose()?,
                mean_inference_flops: test_data.map(|_| run.ledger.backbone_forward as f64),
                training_flops: run.training_flops,
                full_forward_flops: run.ledger.full_forward,
                backbone_forward_flops: run.ledger.backbone_forward,
            };
            (net, None, Some(run), metrics)
        }
    };
    log.finish()?;

    let checkpoint = net.checkpoint_bytes();
    write_file(&args.out_dir.join(CHECKPOINT_FILE), &checkpoint)?;

    let manifest = RunManifest {
        format_version: 1,
        mode: args.mode,
        seed: args.seed,
        config: cfg,
        architecture_file: args.arch.display().to_string(),
        architecture_hash: git_blob_hash(&arch_bytes),
        architecture: arch,
        dataset,
        test_dataset,
        trained_blocks: net.num_blocks(),
        cascade,
        end_to_end,
        metrics,
        checkpoint: FileDigest {
            file: CHECKPOINT_FILE.into(),
            sha256: sha256_hex(&checkpoint),
        },
    };

    let ledger = manifest.ledger().expect("every mode records a ledger");
    let per_block: Vec<u64> = ledger.training_per_block.iter().map(|b| b.total()).collect();
    write_json(
        &args.out_dir.join(COST_REPORT_FILE),
        &CostReport {
            exit_path_flops: &ledger.exit_path,
            exit_incurred_flops: &ledger.exit_incurred,
            full_forward_flops: ledger.full_forward,
            backbone_forward_flops: ledger.backbone_forward,
            training_flops_per_block: per_block,
            training_flops_total: manifest.metrics.training_flops,
            end_to_end_flops_per_epoch: 3 * ledger.backbone_forward * data.len() as u64,
        },
    )?;
    write_file(&args.out_dir.join(MANIFEST_FILE), manifest.to_json().as_bytes())?;
    write_json(
        &args.out_dir.join(TIMING_FILE),
        &Timing {
            started_unix_secs: started.0,
            finished_unix_secs: unix_now(),
            elapsed_secs: started.1.elapsed().as_secs_f64(),
        },
    )?;
    Ok(manifest)
}

/// Rebuilds the frozen network a manifest describes and checks its checkpoint.
pub fn load_run(manifest_path: &Path) -> CliResult<(RunManifest, QuickNet)> {
    let manifest = RunManifest::load(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let ck_path = dir.join(&manifest.checkpoint.file);
    let bytes = fs::read(&ck_path).map_err(|e| quicknet::Error::Checkpoint(format!("{}: {e}", ck_path.display())))?;
    if sha256_hex(&bytes) != manifest.checkpoint.sha256 {
        return Err(quicknet::Error::Checkpoint(format!(
            "{} does not match the digest recorded in the manifest",
            ck_path.display()
        ))
        .into());
    }
    let mut net = QuickNet::from_architecture(&manifest.trained_architecture(), manifest.seed)?;
    net.load_checkpoint(bytes.as_slice())?;
    net.freeze_all();
    Ok((manifest, net))
}

pub fn eval(args: &EvalArgs) -> CliResult<EvalReport> {
    let (manifest, net) = load_run(&args.manifest)?;
    let data = load_dataset(&args.data_images, &args.data_labels, &manifest.architecture)?;
    let t = args.threshold.unwrap_or(manifest.config.threshold);
    if !(0.0..=1.0).contains(&t) {
        return Err(CliError::Usage(format!("threshold {t} outside [0, 1]")));
    }
    let row = evaluate(&net, &data, t, args.exit_mode.into(), eval_threads())?;
    let report = EvalReport {
        mode: row.mode,
        threshold: row.threshold,
        accuracy: row.accuracy,
        mean_flops: row.mean_flops,
        full_forward_flops: ExitCosts::for_net(&net)?.full_forward,
        exit_fractions: row.exit_fractions,
        fallback_fraction: row.fallback_fraction,
    };
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    Ok(report)
}

/// Sweep rows for both exit modes, confidence-only first.
pub fn sweep(args: &SweepArgs) -> CliResult<Vec<SweepRow>> {
    let (manifest, net) = load_run(&args.manifest)?;
    let data = load_dataset(&args.data_images, &args.data_labels, &manifest.architecture)?;
    if let Some(t) = args.thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(CliError::Usage(format!("threshold {t} outside [0, 1]")));
    }
    let exits = collect_exits(&net, &data.inputs, 1000, eval_threads())?;
    let costs = ExitCosts::for_net(&net)?;
    let mut rows = Vec::new();
    for mode in [ExitMode::ConfidenceOnly, ExitMode::ConfidenceAndCommitment] {
        rows.extend(sweep_from_exits(&exits, &data.labels, &args.thresholds, mode, &costs)?);
    }
    let csv = sweep_csv(&rows, net.num_blocks())?;
    match &args.out {
        Some(path) => write_file(path, csv.as_bytes())?,
        None => std::io::stdout()
            .write_all(csv.as_bytes())
            .map_err(|e| CliError::output("<stdout>", e))?,
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow], blocks: usize) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["mode".to_string(), "threshold".into(), "accuracy".into(), "mean_flops".into()];
    header.extend((0..blocks).map(|i| format!("exit_{i}_frac")));
    header.push("fallback_frac".into());
    let err = |e: csv::Error| CliError::output("<csv>", e);
    w.write_record(&header).map_err(err)?;
    for r in rows {
        let mut rec = vec![
            r.mode.as_str().to_string(),
            r.threshold.to_string(),
            r.accuracy.to_string(),
            r.mean_flops.to_string(),
        ];
        rec.extend(r.exit_fractions.iter().map(f64::to_string));
        rec.push(r.fallback_fraction.to_string());
        w.write_record(&rec).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::output("<csv>", e))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
