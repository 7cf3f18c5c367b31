//! Datasets: IDX ingestion and export, synthetic blobs, stratified splits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::numerics::{RandomStream, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, ...]` with one row per sample.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub provenance: String,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, provenance: impl Into<String>) -> Result<Self> {
        let n = inputs.shape().first().copied().unwrap_or(0);
        if n != labels.len() {
            return Err(Error::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Data(format!("label {l} at index {i} is outside [0, {num_classes})")));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample input shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            inputs: self.inputs.gather_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            provenance: self.provenance.clone(),
        })
    }

    /// Reinterprets each sample with a new per-sample shape of equal size.
    pub fn reshape_samples(mut self, shape: &[usize]) -> Result<Dataset> {
        if self.sample_shape() == shape {
            return Ok(self);
        }
        let mut full = vec![self.len()];
        full.extend_from_slice(shape);
        if full.iter().product::<usize>() != self.inputs.len() {
            return Err(Error::Config(format!(
                "dataset samples of shape {:?} cannot be viewed as {shape:?}",
                self.sample_shape()
            )));
        }
        self.inputs = self.inputs.reshape(&full)?;
        Ok(self)
    }

    pub fn with_num_classes(mut self, num_classes: usize) -> Result<Dataset> {
        if let Some(&l) = self.labels.iter().max() {
            if l >= num_classes {
                return Err(Error::Data(format!("label {l} is outside [0, {num_classes})")));
            }
        }
        self.num_classes = num_classes;
        Ok(self)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    let gz = path.extension().is_some_and(|e| e == "gz");
    let res = if gz {
        GzDecoder::new(BufReader::new(file)).read_to_end(&mut bytes)
    } else {
        BufReader::new(file).read_to_end(&mut bytes)
    };
    res.map_err(|e| {
        if gz && e.kind() != std::io::ErrorKind::NotFound {
            Error::Data(format!("{}: corrupt gzip stream: {e}", path.display()))
        } else {
            Error::io(path, e)
        }
    })?;
    Ok(bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let res = if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        enc.write_all(bytes).and_then(|_| enc.finish()?.flush())
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(bytes).and_then(|_| w.flush())
    };
    res.map_err(|e| Error::io(path, e))
}

/// Parses an IDX header, returning its extents and the payload.
fn parse_idx<'b>(path: &Path, bytes: &'b [u8], magic: u32, rank: usize) -> Result<(Vec<usize>, &'b [u8])> {
    let header = 4 + 4 * rank;
    let be = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().unwrap());
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.into(),
            expected: header,
            found: bytes.len(),
        });
    }
    if be(0) != magic {
        return Err(Error::BadMagic {
            path: path.into(),
            found: be(0),
            expected: magic,
        });
    }
    if bytes.len() < header {
        return Err(Error::Truncated {
            path: path.into(),
            expected: header,
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..rank).map(|r| be(4 + 4 * r) as usize).collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.into(),
            expected,
            found: bytes.len(),
        });
    }
    Ok((dims, &bytes[header..expected]))
}

/// Reads an IDX image/label pair. Files ending in `.gz` are decompressed.
/// Pixels are scaled to `[0, 1]`; images come out as `[n, 1, rows, cols]`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let ibytes = read_file(ip)?;
    let lbytes = read_file(lp)?;
    let (idims, pixels) = parse_idx(ip, &ibytes, IDX_IMAGES_MAGIC, 3)?;
    let (ldims, raw_labels) = parse_idx(lp, &lbytes, IDX_LABELS_MAGIC, 1)?;
    if idims[0] != ldims[0] {
        return Err(Error::CountMismatch {
            images: idims[0],
            labels: ldims[0],
        });
    }
    let inputs = Tensor::new(
        vec![idims[0], 1, idims[1], idims[2]],
        pixels.iter().map(|&b| b as f64 / 255.0).collect(),
    )?;
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1).max(2);
    let name = |p: &Path| p.file_name().map_or_else(String::new, |f| f.to_string_lossy().into_owned());
    Dataset::new(inputs, labels, num_classes, format!("idx:{}+{}", name(ip), name(lp)))
}

/// Writes `dataset` as an IDX pair. Inputs must lie in `[0, 1]`; they are
/// stored as `round(255·v)`. Samples become `rows × cols` images where the
/// last per-sample extent is `cols`.
pub fn write_idx(dataset: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let shape = dataset.sample_shape();
    let cols = shape.last().copied().unwrap_or(1);
    let rows = shape.iter().product::<usize>() / cols.max(1);
    if dataset.num_classes > 256 {
        return Err(Error::Data("IDX labels hold at most 256 classes".into()));
    }
    let mut ib = Vec::with_capacity(16 + dataset.inputs.len());
    for v in [IDX_IMAGES_MAGIC, dataset.len() as u32, rows as u32, cols as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    for &v in dataset.inputs.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Data(format!("value {v} outside [0, 1] cannot be written as IDX")));
        }
        ib.push((v * 255.0).round() as u8);
    }
    let mut lb = Vec::with_capacity(8 + dataset.len());
    for v in [IDX_LABELS_MAGIC, dataset.len() as u32] {
        lb.extend_from_slice(&v.to_be_bytes());
    }
    lb.extend(dataset.labels.iter().map(|&l| l as u8));
    write_file(images.as_ref(), &ib)?;
    write_file(labels.as_ref(), &lb)
}

/// Rescales all inputs to `[0, 1]` by the global min and max.
pub fn min_max_normalize(dataset: &Dataset) -> Dataset {
    let data = dataset.inputs.data();
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    Dataset {
        inputs: dataset.inputs.map(|v| ((v - lo) / span).clamp(0.0, 1.0)),
        ..dataset.clone()
    }
}

/// Isotropic unit-variance Gaussian blobs. Class centers are random
/// directions scaled to norm `separation`. Samples are grouped by class.
pub fn synth_blobs(classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    synth(classes, per_class, &[dim], separation, seed, "blobs")
}

/// Image-shaped blobs `[channels, h, w]` around random class templates.
pub fn synth_images(
    classes: usize,
    per_class: usize,
    shape: [usize; 3],
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    synth(classes, per_class, &shape, separation, seed, "images")
}

fn synth(classes: usize, per_class: usize, shape: &[usize], separation: f64, seed: u64, kind: &str) -> Result<Dataset> {
    if separation <= 0.0 || !separation.is_finite() {
        return Err(Error::Config(format!("separation must be positive, got {separation}")));
    }
    if classes < 2 {
        return Err(Error::Config("at least two classes are required".into()));
    }
    let dim: usize = shape.iter().product();
    let mut centers_rng = RandomStream::new(seed).derive(0);
    let mut noise_rng = RandomStream::new(seed).derive(1);
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let dir: Vec<f64> = (0..dim).map(|_| centers_rng.normal()).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        for _ in 0..per_class {
            data.extend(dir.iter().map(|d| d / norm * separation + noise_rng.normal()));
            labels.push(c);
        }
    }
    let mut full = vec![labels.len()];
    full.extend_from_slice(shape);
    Dataset::new(
        Tensor::new(full, data)?,
        labels,
        classes,
        format!("synth-{kind}:c{classes}:n{per_class}:d{shape:?}:s{separation}:seed{seed}"),
    )
}

/// Stratified split: each class contributes `round(fraction·count)` samples
/// to the first part. Both index lists are sorted.
pub fn split_indices(labels: &[usize], num_classes: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Contract(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let mut rng = RandomStream::new(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for mut members in by_class {
        rng.shuffle(&mut members);
        let take = (fraction * members.len() as f64).round() as usize;
        first.extend_from_slice(&members[..take]);
        second.extend_from_slice(&members[take..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    Ok((first, second))
}

pub fn split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (a, b) = split_indices(&dataset.labels, dataset.num_classes, fraction, seed)?;
    Ok((dataset.subset(&a)?, dataset.subset(&b)?))
}
