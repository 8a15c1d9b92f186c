//! CIFAR-10 binary batch loader (1 label byte + 3072 pixel bytes per record).

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{Dataset, Norm, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RECORD_LEN: usize = 1 + 3072;

/// One raw record: class label plus channel-major 32x32 RGB pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub label: u8,
    pub pixels: Vec<u8>,
}

impl Record {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RECORD_LEN);
        out.push(self.label);
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Read all records of one batch file, validating size and label range.
pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.is_empty() || bytes.len() % RECORD_LEN != 0 {
        return Err(Error::BadData {
            path: path.display().to_string(),
            detail: format!(
                "file length {} is not a positive multiple of the {}-byte record size",
                bytes.len(),
                RECORD_LEN
            ),
        });
    }
    let mut records = Vec::with_capacity(bytes.len() / RECORD_LEN);
    for (i, chunk) in bytes.chunks_exact(RECORD_LEN).enumerate() {
        let label = chunk[0];
        if label > 9 {
            return Err(Error::BadData {
                path: path.display().to_string(),
                detail: format!("record {}: label byte {} out of range 0-9", i, label),
            });
        }
        records.push(Record {
            label,
            pixels: chunk[1..].to_vec(),
        });
    }
    Ok(records)
}

fn records_to_dataset(
    records: Vec<Record>,
    split: Split,
    norm: Option<Norm>,
    per_channel: bool,
) -> Result<Dataset> {
    let n = records.len();
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for r in records {
        labels.push(r.label);
        data.extend(r.pixels.iter().map(|&b| b as f32 / 255.0));
    }
    let images = Tensor::from_vec(&[n, 3, 32, 32], data)?;
    Dataset::from_raw("cifar10", split, images, labels, 10, norm, per_channel)
}

fn train_batch_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for i in 1..=5 {
        let p = dir.join(format!("data_batch_{}.bin", i));
        if p.exists() {
            out.push(p);
        }
    }
    if out.is_empty() {
        return Err(Error::BadData {
            path: dir.display().to_string(),
            detail: "no data_batch_*.bin files found".into(),
        });
    }
    Ok(out)
}

/// Load the train/test pair from a directory of binary batches. Any subset
/// of `data_batch_1..5.bin` is accepted (the canonical layout has all five);
/// `test_batch.bin` is required. `per_channel` switches CIFAR normalization
/// from global scalar statistics to per-channel statistics.
pub fn load_cifar10(dir: &Path, per_channel: bool) -> Result<(Dataset, Dataset)> {
    let mut train_records = Vec::new();
    for p in train_batch_paths(dir)? {
        train_records.extend(read_records(&p)?);
    }
    let train = records_to_dataset(train_records, Split::Train, None, per_channel)?;
    let test_records = read_records(&dir.join("test_batch.bin"))?;
    let test = records_to_dataset(test_records, Split::Test, Some(train.norm.clone()), per_channel)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn synth_batch(path: &Path, n: usize) {
        let mut f = fs::File::create(path).unwrap();
        for i in 0..n {
            let mut rec = vec![(i % 10) as u8];
            rec.extend((0..3072).map(|j| ((i * 31 + j) % 256) as u8));
            f.write_all(&rec).unwrap();
        }
    }

    #[test]
    fn accepts_whole_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data_batch_1.bin");
        synth_batch(&p, 12);
        assert_eq!(read_records(&p).unwrap().len(), 12);
    }

    #[test]
    fn rejects_partial_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data_batch_1.bin");
        synth_batch(&p, 3);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 100]).unwrap();
        let err = read_records(&p).unwrap_err().to_string();
        assert!(err.contains("record size"), "{err}");
    }

    #[test]
    fn rejects_label_byte_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data_batch_1.bin");
        let mut rec = vec![10u8];
        rec.extend(std::iter::repeat(0u8).take(3072));
        fs::write(&p, &rec).unwrap();
        let err = read_records(&p).unwrap_err().to_string();
        assert!(err.contains("label byte 10"), "{err}");
    }

    #[test]
    fn record_round_trips_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data_batch_1.bin");
        synth_batch(&p, 4);
        let original = fs::read(&p).unwrap();
        let records = read_records(&p).unwrap();
        let rebuilt: Vec<u8> = records.iter().flat_map(|r| r.to_bytes()).collect();
        assert_eq!(original, rebuilt);
    }

    #[test]
    fn pair_loads_with_shared_stats() {
        let dir = tempfile::tempdir().unwrap();
        synth_batch(&dir.path().join("data_batch_1.bin"), 30);
        synth_batch(&dir.path().join("test_batch.bin"), 10);
        let (train, test) = load_cifar10(dir.path(), false).unwrap();
        assert_eq!(train.len(), 30);
        assert_eq!(test.len(), 10);
        assert_eq!(train.norm, test.norm);
        assert_eq!(train.image_dims(), [3, 32, 32]);
    }
}
