//! Synthetic IDX datasets and architectures written to a scratch directory.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use quicknet::data::{min_max_normalize, split};
use quicknet::{synth_blobs, write_idx, Architecture, BlockSpec, LayerSpec};

pub struct Files {
    pub images: PathBuf,
    pub labels: PathBuf,
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub arch: PathBuf,
    pub train: Files,
    pub test: Files,
}

pub fn mlp(input: usize, classes: usize, hidden: &[usize]) -> Architecture {
    Architecture {
        input_shape: vec![input],
        num_classes: classes,
        blocks: hidden
            .iter()
            .enumerate()
            .map(|(i, &h)| BlockSpec {
                name: format!("fc{i}"),
                input_shape: None,
                subnet: vec![LayerSpec::Dense { units: h }],
                classifier: vec![LayerSpec::Dense { units: classes }],
            })
            .collect(),
    }
}

fn write_pair(dir: &Path, stem: &str, data: &quicknet::Dataset) -> Files {
    let f = Files {
        images: dir.join(format!("{stem}-images-idx3-ubyte.gz")),
        labels: dir.join(format!("{stem}-labels-idx1-ubyte.gz")),
    };
    write_idx(data, &f.images, &f.labels).unwrap();
    f
}

/// Four overlapping 12-dimensional blobs, split into train and test IDX
/// pairs, with a two-block MLP architecture.
pub fn blobs(seed: u64) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = min_max_normalize(&synth_blobs(4, 150, 12, 3.0, seed).unwrap());
    let (train, test) = split(&data, 0.8, seed).unwrap();
    let arch = dir.path().join("arch.json");
    std::fs::write(&arch, mlp(12, 4, &[10, 10]).to_json()).unwrap();
    Fixture {
        train: write_pair(dir.path(), "train", &train),
        test: write_pair(dir.path(), "test", &test),
        arch,
        dir,
    }
}

impl Fixture {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Arguments for `quicknet train` writing into `out`.
    pub fn train_args(&self, out: &Path) -> Vec<String> {
        let s = |p: &Path| p.display().to_string();
        vec![
            "train".into(),
            "--arch".into(),
            s(&self.arch),
            "--data-images".into(),
            s(&self.train.images),
            "--data-labels".into(),
            s(&self.train.labels),
            "--test-images".into(),
            s(&self.test.images),
            "--test-labels".into(),
            s(&self.test.labels),
            "--out-dir".into(),
            s(out),
            "--max-epochs".into(),
            "5".into(),
            "--batch-size".into(),
            "32".into(),
            "--threshold".into(),
            "0.6".into(),
        ]
    }
}

pub fn quicknet<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_quicknet"))
        .args(args)
        .env("QUICKNET_THREADS", "1")
        .output()
        .expect("binary runs")
}
