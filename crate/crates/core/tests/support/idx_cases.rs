//! IDX reader checks built on byte strings written by hand.
#![allow(dead_code)]

use std::io::Write;
use std::path::Path;

use flate2::write::GzEncoder;
use flate2::Compression;
use quicknet::{load_idx, write_idx, Dataset, Error, Tensor};

pub type Check = Result<(), String>;

fn ensure(ok: bool, what: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(what())
    }
}

pub fn header(magic: u32, extents: &[u32]) -> Vec<u8> {
    let mut b = magic.to_be_bytes().to_vec();
    for e in extents {
        b.extend_from_slice(&e.to_be_bytes());
    }
    b
}

/// Four 2×2 images with pixels `0, 17, 34, ...` and labels `3, 0, 1, 3`.
pub fn tiny_pair() -> (Vec<u8>, Vec<u8>) {
    let mut images = header(0x0803, &[4, 2, 2]);
    images.extend((0..16u8).map(|i| i * 17));
    let mut labels = header(0x0801, &[4]);
    labels.extend([3u8, 0, 1, 3]);
    (images, labels)
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

pub fn hand_crafted_pair(dir: &Path) -> Check {
    let (i, l) = tiny_pair();
    let d = load_idx(write(dir, "i.idx", &i), write(dir, "l.idx", &l)).map_err(|e| e.to_string())?;
    ensure(d.inputs.shape() == [4, 1, 2, 2], || format!("shape {:?}", d.inputs.shape()))?;
    ensure(d.labels == [3, 0, 1, 3], || format!("labels {:?}", d.labels))?;
    ensure(d.num_classes == 4, || format!("classes {}", d.num_classes))?;
    let want: Vec<f64> = (0..16).map(|i| (i * 17) as f64 / 255.0).collect();
    ensure(d.inputs.data() == want.as_slice(), || "pixel values differ".into())?;
    ensure(d.inputs.data()[0] == 0.0 && d.inputs.data()[15] == 1.0, || "0 and 255 must map to 0 and 1".into())
}

pub fn bad_magic(dir: &Path) -> Check {
    let (mut i, l) = tiny_pair();
    i[3] = 0x02;
    match load_idx(write(dir, "i.idx", &i), write(dir, "l.idx", &l)) {
        Err(Error::BadMagic { found: 0x0802, expected: 0x0803, .. }) => Ok(()),
        other => Err(format!("expected bad magic, got {other:?}")),
    }
}

pub fn count_mismatch(dir: &Path) -> Check {
    let (i, _) = tiny_pair();
    let mut l = header(0x0801, &[3]);
    l.extend([0u8, 1, 2]);
    match load_idx(write(dir, "i.idx", &i), write(dir, "l.idx", &l)) {
        Err(Error::CountMismatch { images: 4, labels: 3 }) => Ok(()),
        other => Err(format!("expected count mismatch, got {other:?}")),
    }
}

pub fn truncated_payload(dir: &Path) -> Check {
    let (i, l) = tiny_pair();
    match load_idx(write(dir, "i.idx", &i[..i.len() - 1]), write(dir, "l.idx", &l)) {
        Err(Error::Truncated { expected: 32, found: 31, .. }) => {}
        other => return Err(format!("expected truncation, got {other:?}")),
    }
    match load_idx(write(dir, "i.idx", &i), write(dir, "l.idx", &l[..6])) {
        Err(Error::Truncated { expected: 8, found: 6, .. }) => Ok(()),
        other => Err(format!("expected truncated header, got {other:?}")),
    }
}

pub fn gzip_by_suffix(dir: &Path) -> Check {
    let (i, l) = tiny_pair();
    let gz = |bytes: &[u8]| {
        let mut e = GzEncoder::new(Vec::new(), Compression::default());
        e.write_all(bytes).unwrap();
        e.finish().unwrap()
    };
    let plain = load_idx(write(dir, "i.idx", &i), write(dir, "l.idx", &l)).map_err(|e| e.to_string())?;
    let packed = load_idx(write(dir, "i.idx.gz", &gz(&i)), write(dir, "l.idx.gz", &gz(&l))).map_err(|e| e.to_string())?;
    ensure(plain.inputs == packed.inputs && plain.labels == packed.labels, || "gzip changed the data".into())
}

/// Write-then-read of 8-bit-exact values reproduces the tensor bit for bit.
pub fn round_trip(dir: &Path, bytes: &[u8], labels: &[usize], rows: usize, cols: usize, gz: bool) -> Check {
    let n = labels.len();
    let inputs = Tensor::new(vec![n, 1, rows, cols], bytes.iter().map(|&b| b as f64 / 255.0).collect()).unwrap();
    let classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    let d = Dataset::new(inputs, labels.to_vec(), classes, "rt").unwrap();
    let ext = if gz { ".gz" } else { "" };
    let (ip, lp) = (dir.join(format!("rt-i{ext}")), dir.join(format!("rt-l{ext}")));
    write_idx(&d, &ip, &lp).map_err(|e| e.to_string())?;
    let back = load_idx(&ip, &lp).map_err(|e| e.to_string())?;
    ensure(back.inputs == d.inputs, || "pixels changed".into())?;
    ensure(back.labels == d.labels, || "labels changed".into())
}

pub fn all(dir: &Path) -> Vec<(&'static str, Check)> {
    let rt = round_trip(dir, &(0..=255u8).collect::<Vec<_>>(), &[0, 1, 2, 3], 8, 8, true);
    vec![
        ("hand-crafted 4x2x2 pair", hand_crafted_pair(dir)),
        ("magic 0x802 rejected", bad_magic(dir)),
        ("4 images / 3 labels rejected", count_mismatch(dir)),
        ("truncated payload rejected", truncated_payload(dir)),
        ("gzip by suffix", gzip_by_suffix(dir)),
        ("round trip", rt),
    ]
}
