//! Binary dataset file (`LTDS`), little-endian:
//!
//! ```text
//! magic        4 bytes  "LTDS"
//! version      u32      1
//! n_total      u64      train + test rows
//! dim          u32      feature width m
//! classes      u32      K
//! train_counts K x u64
//! test_counts  K x u64  (all equal: the test split is balanced)
//! rows         n_total x (label u32, m x f64), train rows first
//! ```

use std::io::Write;
use std::path::Path;

use crate::bytes::ByteReader;
use crate::data::LongTailedDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"LTDS";
pub const DATASET_VERSION: u32 = 1;

pub fn encode_dataset(ds: &LongTailedDataset) -> Vec<u8> {
    let m = ds.dim();
    let mut out = Vec::with_capacity(24 + 16 * ds.num_classes() + ds.num_rows() * (4 + 8 * m));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.num_rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    out.extend_from_slice(&(ds.num_classes() as u32).to_le_bytes());
    for &c in ds.class_counts().iter().chain(ds.test_counts()) {
        out.extend_from_slice(&c.to_le_bytes());
    }
    for (r, &label) in ds.labels().iter().enumerate() {
        out.extend_from_slice(&(label as u32).to_le_bytes());
        for v in ds.features().row(r) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &LongTailedDataset) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_dataset(ds))?;
    Ok(())
}

fn check_histogram(
    expected: &[u64],
    labels: &[usize],
    split: &str,
    offset: usize,
) -> Result<()> {
    let mut actual = vec![0u64; expected.len()];
    for &l in labels {
        actual[l] += 1;
    }
    if let Some(j) = (0..expected.len()).find(|&j| expected[j] != actual[j]) {
        return Err(Error::format(
            offset,
            format!(
                "{split} count mismatch for class {j}: header expects {}, rows contain {}",
                expected[j], actual[j]
            ),
        ));
    }
    Ok(())
}

/// Parses a dataset file; nothing is returned unless the whole buffer is valid.
pub fn decode_dataset(buf: &[u8]) -> Result<LongTailedDataset> {
    let mut r = ByteReader::new(buf);
    if r.take(4, "magic")? != DATASET_MAGIC {
        return Err(Error::format(0, "bad magic, expected LTDS"));
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let n_total = r.u64("row count")?;
    let dim = r.u32("feature width")? as usize;
    let classes = r.u32("class count")? as usize;
    if dim == 0 || classes == 0 {
        return Err(Error::format(r.offset(), "feature width and class count must be >= 1"));
    }
    if 16usize.checked_mul(classes).is_none_or(|n| n > r.remaining()) {
        return Err(Error::format(r.offset(), "truncated class count table"));
    }
    let mut train_counts = Vec::with_capacity(classes);
    for _ in 0..classes {
        train_counts.push(r.u64("train counts")?);
    }
    let mut test_counts = Vec::with_capacity(classes);
    for _ in 0..classes {
        test_counts.push(r.u64("test counts")?);
    }
    let sum = |c: &[u64]| c.iter().try_fold(0u64, |a, &b| a.checked_add(b));
    let (n_train, n_test) = match (sum(&train_counts), sum(&test_counts)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::format(r.offset(), "class counts overflow")),
    };
    if n_train.checked_add(n_test) != Some(n_total) {
        return Err(Error::format(
            r.offset(),
            format!("header row count {n_total} != train {n_train} + test {n_test}"),
        ));
    }
    let need = dim
        .checked_mul(8)
        .and_then(|w| w.checked_add(4))
        .zip(usize::try_from(n_total).ok())
        .and_then(|(record, n)| n.checked_mul(record));
    match need {
        Some(n) if n == r.remaining() => {}
        Some(n) if n > r.remaining() => {
            return Err(Error::format(
                r.offset(),
                format!("truncated rows: need {n} bytes, {} left", r.remaining()),
            ))
        }
        Some(_) => {
            return Err(Error::format(r.offset(), "trailing bytes after rows"));
        }
        None => return Err(Error::format(r.offset(), "row payload size overflows")),
    }
    let n_total = n_total as usize;
    let mut labels = Vec::with_capacity(n_total);
    let mut data = Vec::with_capacity(n_total * dim);
    for row in 0..n_total {
        let at = r.offset();
        let label = r.u32("label")? as usize;
        if label >= classes {
            return Err(Error::format(at, format!("row {row}: label {label} >= {classes} classes")));
        }
        labels.push(label);
        for _ in 0..dim {
            let at = r.offset();
            let v = r.f64("feature")?;
            if !v.is_finite() {
                return Err(Error::format(at, format!("row {row}: non-finite feature {v}")));
            }
            data.push(v);
        }
    }
    r.finish()?;
    let n_train = n_train as usize;
    check_histogram(&train_counts, &labels[..n_train], "train", 28)?;
    check_histogram(&test_counts, &labels[n_train..], "test", 28 + 8 * classes)?;
    if n_total == 0 {
        return Err(Error::format(28, "dataset has no rows"));
    }
    let features = Tensor::new(vec![n_total, dim], data)?;
    LongTailedDataset::new(features, labels, classes, n_train).map_err(|e| Error::format(28, e.to_string()))
}

pub fn ingest(path: impl AsRef<Path>) -> Result<LongTailedDataset> {
    decode_dataset(&std::fs::read(path)?)
}
