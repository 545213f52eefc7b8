//! CIFAR-10 binary format: each record is one label byte followed by
//! 3 × 32 × 32 pixel bytes, channel-major (R, G, B planes), rows top to
//! bottom.

use std::fs;
use std::path::{Path, PathBuf};

use super::{normalize_pair, Dataset, Split};
use crate::tensor::Tensor;
use crate::{Error, Real, Result};

pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;
const CLASSES: usize = 10;
const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

/// Splits raw batch-file bytes into pixel values in `[0, 1]` and labels.
pub fn parse_cifar_records(bytes: &[u8]) -> Result<(Vec<Real>, Vec<usize>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(Error::format(format!(
            "CIFAR-10 batch of {} bytes is not a positive multiple of {CIFAR_RECORD_LEN}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_LEN - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        let label = record[0] as usize;
        if label >= CLASSES {
            return Err(Error::format(format!("record {i} has label byte {label} > 9")));
        }
        labels.push(label);
        pixels.extend(record[1..].iter().map(|&b| b as Real / 255.0));
    }
    Ok((pixels, labels))
}

fn resolve_dir(dir: &Path) -> Result<PathBuf> {
    for candidate in [dir.to_path_buf(), dir.join("cifar-10-batches-bin")] {
        if candidate.join(TEST_FILE).is_file() {
            return Ok(candidate);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("no CIFAR-10 binary batches under {}", dir.display()),
    )))
}

fn read_files(dir: &Path, files: &[&str], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = dir.join(f);
        let bytes = fs::read(&path)?;
        let (p, l) = parse_cifar_records(&bytes)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        pixels.extend(p);
        labels.extend(l);
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?;
    Dataset::new(images, labels, CLASSES, split)
}

/// Loads the five training batches and the test batch, standardized per
/// channel with training-split statistics.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = resolve_dir(dir.as_ref())?;
    let mut train = read_files(&dir, &TRAIN_FILES, Split::Train)?;
    let mut test = read_files(&dir, &[TEST_FILE], Split::Test)?;
    normalize_pair(&mut train, &mut test)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![fill; CIFAR_RECORD_LEN];
        r[0] = label;
        r
    }

    #[test]
    fn record_length() {
        assert_eq!(CIFAR_RECORD_LEN, 3073);
    }

    #[test]
    fn parses_records() {
        let mut bytes = record(3, 255);
        bytes.extend(record(9, 0));
        let (pixels, labels) = parse_cifar_records(&bytes).unwrap();
        assert_eq!(labels, vec![3, 9]);
        assert_eq!(pixels.len(), 2 * 3072);
        assert_eq!(pixels[0], 1.0);
        assert_eq!(pixels[3072], 0.0);
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let mut bytes = record(1, 7);
        bytes.extend(record(2, 7));
        bytes.pop();
        assert!(matches!(parse_cifar_records(&bytes), Err(Error::Format(_))));
        assert!(matches!(parse_cifar_records(&[]), Err(Error::Format(_))));
    }

    #[test]
    fn bad_label_is_a_format_error() {
        assert!(matches!(
            parse_cifar_records(&record(10, 0)),
            Err(Error::Format(_))
        ));
    }
}
