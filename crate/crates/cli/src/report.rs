//! CSV tables summarizing one or more runs of the same dataset.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;

use crate::manifest::{RunManifest, TrainMode};
use crate::{CliError, CliResult};

pub const BLOCK_EPOCHS_FILE: &str = "block_epochs.csv";
pub const POOL_SIZES_FILE: &str = "block_pool_sizes.csv";
pub const COST_ACCURACY_FILE: &str = "cost_vs_accuracy.csv";
pub const COMPOSITION_FILE: &str = "class_composition.csv";

#[derive(Clone, Debug, Args)]
pub struct ReportArgs {
    /// Run manifests; repeat the flag for several runs.
    #[arg(long = "manifest", required = true)]
    pub manifests: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Run label: the manifest's directory name, or its position.
fn label(path: &Path, index: usize) -> String {
    path.parent()
        .and_then(Path::file_name)
        .map_or_else(|| format!("run{index}"), |n| n.to_string_lossy().into_owned())
}

fn mode_name(m: TrainMode) -> &'static str {
    match m {
        TrainMode::Quicknet => "quicknet",
        TrainMode::End2end => "end2end",
    }
}

struct Table {
    path: PathBuf,
    writer: csv::Writer<Vec<u8>>,
}

impl Table {
    fn new(dir: &Path, name: &str, header: &[String]) -> CliResult<Table> {
        let mut t = Table {
            path: dir.join(name),
            writer: csv::Writer::from_writer(Vec::new()),
        };
        t.row(header)?;
        Ok(t)
    }

    fn row(&mut self, cells: &[String]) -> CliResult<()> {
        self.writer.write_record(cells).map_err(|e| CliError::output(&self.path, e))
    }

    fn finish(self) -> CliResult<PathBuf> {
        let bytes = self.writer.into_inner().map_err(|e| CliError::output(&self.path, e))?;
        fs::write(&self.path, bytes).map_err(|e| CliError::output(&self.path, e))?;
        Ok(self.path)
    }
}

fn s(v: impl ToString) -> String {
    v.to_string()
}

/// Writes the four report tables and returns their paths.
pub fn report(args: &ReportArgs) -> CliResult<Vec<PathBuf>> {
    let runs: Vec<(String, RunManifest)> = args
        .manifests
        .iter()
        .enumerate()
        .map(|(i, p)| Ok((label(p, i), RunManifest::load(p)?)))
        .collect::<CliResult<_>>()?;
    let (first_label, first) = &runs[0];
    for (l, m) in &runs[1..] {
        if m.dataset.fingerprint() != first.dataset.fingerprint() {
            return Err(CliError::Incompatible(format!(
                "run `{l}` trained on {} / {} but run `{first_label}` trained on {} / {}",
                m.dataset.images, m.dataset.labels, first.dataset.images, first.dataset.labels
            )));
        }
    }
    let classes = first.dataset.num_classes;
    fs::create_dir_all(&args.out_dir).map_err(|e| CliError::output(&args.out_dir, e))?;
    let dir = args.out_dir.as_path();

    let mut epochs = Table::new(dir, BLOCK_EPOCHS_FILE, &[s("run"), s("mode"), s("block"), s("epochs")])?;
    let mut pools = Table::new(dir, POOL_SIZES_FILE, &[s("run"), s("block"), s("pool_size"), s("learned")])?;
    let mut cost = Table::new(
        dir,
        COST_ACCURACY_FILE,
        &[s("run"), s("mode"), s("step"), s("cum_training_flops"), s("test_accuracy")],
    )?;
    let mut header = vec![s("run"), s("block")];
    header.extend((0..classes).map(|c| format!("class_{c}")));
    let mut composition = Table::new(dir, COMPOSITION_FILE, &header)?;

    let acc = |a: Option<f64>| a.map_or_else(String::new, |v| v.to_string());
    for (run, m) in &runs {
        let mode = mode_name(m.mode);
        if let Some(c) = &m.cascade {
            for r in &c.records {
                epochs.row(&[s(run), s(mode), s(r.block), s(r.epochs_run())])?;
                pools.row(&[s(run), s(r.block), s(r.pool_size), s(r.learned)])?;
                cost.row(&[s(run), s(mode), s(r.block), s(r.cumulative_flops), acc(r.test_accuracy)])?;
                let mut row = vec![s(run), s(r.block)];
                row.extend(r.class_composition.iter().map(s));
                composition.row(&row)?;
            }
        }
        if let Some(e) = &m.end_to_end {
            epochs.row(&[s(run), s(mode), s("all"), s(e.epochs.len())])?;
            let per_epoch = if e.epochs.is_empty() {
                0
            } else {
                e.training_flops / e.epochs.len() as u64
            };
            for (k, a) in e.test_accuracy.iter().enumerate() {
                cost.row(&[s(run), s(mode), s(k + 1), s(per_epoch * (k as u64 + 1)), acc(*a)])?;
            }
        }
    }
    [epochs, pools, cost, composition].into_iter().map(Table::finish).collect()
}
