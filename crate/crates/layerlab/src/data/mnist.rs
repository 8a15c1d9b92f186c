//! MNIST IDX file loader (big-endian headers, magic 2051/2049).

use std::fs;
use std::path::Path;

use crate::data::{Dataset, Norm, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::BadData {
            path: path.display().to_string(),
            detail: format!("truncated header at offset {}", offset),
        })
}

/// Parse an IDX image file into (count, rows, cols, pixels).
pub fn parse_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::BadData {
            path: path.display().to_string(),
            detail: format!("bad image magic {} at offset 0 (expected {})", magic, IMAGE_MAGIC),
        });
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(Error::BadData {
            path: path.display().to_string(),
            detail: format!("expected {} bytes for {} images, got {}", expected, count, bytes.len()),
        });
    }
    Ok((count, rows, cols, bytes[16..].to_vec()))
}

/// Parse an IDX label file into labels.
pub fn parse_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::BadData {
            path: path.display().to_string(),
            detail: format!("bad label magic {} at offset 0 (expected {})", magic, LABEL_MAGIC),
        });
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let expected = 8 + count;
    if bytes.len() != expected {
        return Err(Error::BadData {
            path: path.display().to_string(),
            detail: format!("expected {} bytes for {} labels, got {}", expected, count, bytes.len()),
        });
    }
    let labels = bytes[8..].to_vec();
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::BadData {
            path: path.display().to_string(),
            detail: format!("label {} out of range 0-9", bad),
        });
    }
    Ok(labels)
}

fn split_from(dir: &Path, prefix: &str, split: Split, norm: Option<Norm>) -> Result<Dataset> {
    let img_path = dir.join(format!("{}-images-idx3-ubyte", prefix));
    let lab_path = dir.join(format!("{}-labels-idx1-ubyte", prefix));
    let (count, rows, cols, pixels) = parse_images(&img_path)?;
    let labels = parse_labels(&lab_path)?;
    if labels.len() != count {
        return Err(Error::BadData {
            path: lab_path.display().to_string(),
            detail: format!("{} labels for {} images", labels.len(), count),
        });
    }
    let data: Vec<f32> = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let images = Tensor::from_vec(&[count, 1, rows, cols], data)?;
    Dataset::from_raw("mnist", split, images, labels, 10, norm, false)
}

/// Load the train/test pair from a directory holding the canonical IDX
/// files. MNIST uses plain normalization, no augmentation.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = split_from(dir, "train", Split::Train, None)?;
    let test = split_from(dir, "t10k", Split::Test, Some(train.norm.clone()))?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx_pair(dir: &Path, prefix: &str, n: usize, start_label: u8) {
        let mut img = Vec::new();
        img.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        img.extend_from_slice(&(n as u32).to_be_bytes());
        img.extend_from_slice(&4u32.to_be_bytes());
        img.extend_from_slice(&4u32.to_be_bytes());
        for i in 0..n * 16 {
            img.push((i % 251) as u8);
        }
        fs::File::create(dir.join(format!("{}-images-idx3-ubyte", prefix)))
            .unwrap()
            .write_all(&img)
            .unwrap();
        let mut lab = Vec::new();
        lab.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(n as u32).to_be_bytes());
        for i in 0..n {
            lab.push(((start_label as usize + i) % 10) as u8);
        }
        fs::File::create(dir.join(format!("{}-labels-idx1-ubyte", prefix)))
            .unwrap()
            .write_all(&lab)
            .unwrap();
    }

    #[test]
    fn loads_valid_pair() {
        let dir = tempfile::tempdir().unwrap();
        write_idx_pair(dir.path(), "train", 20, 0);
        write_idx_pair(dir.path(), "t10k", 10, 3);
        let (train, test) = load_mnist(dir.path()).unwrap();
        assert_eq!(train.len(), 20);
        assert_eq!(test.len(), 10);
        assert_eq!(train.image_dims(), [1, 4, 4]);
        assert_eq!(test.labels()[0], 3);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        write_idx_pair(dir.path(), "train", 5, 0);
        let p = dir.path().join("train-images-idx3-ubyte");
        let mut bytes = fs::read(&p).unwrap();
        bytes[3] = 0x42;
        fs::write(&p, &bytes).unwrap();
        let err = parse_images(&p).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
        assert!(err.contains("offset 0"), "{err}");
    }

    #[test]
    fn rejects_truncated_labels_with_counts() {
        let dir = tempfile::tempdir().unwrap();
        write_idx_pair(dir.path(), "train", 5, 0);
        let p = dir.path().join("train-labels-idx1-ubyte");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        let err = parse_labels(&p).unwrap_err().to_string();
        assert!(err.contains("expected 13 bytes"), "{err}");
        assert!(err.contains("got 11"), "{err}");
    }

    #[test]
    fn canonical_first_train_label_when_available() {
        // Runs only against a canonical 60k-image copy of the dataset.
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
        if let Ok((train, _)) = load_mnist(&dir) {
            if train.len() == 60000 {
                assert_eq!(train.labels()[0], 5);
            }
        }
    }
}
