//! IDX container reading/writing (the format used by the classic digit
//! corpora): big-endian magic `0x0000_08NN` where `NN` is the number of
//! dimensions, followed by one big-endian `u32` per dimension and raw bytes.

use std::fs;
use std::path::Path;

use super::Split;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "IDX",
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Config(format!("{} does not exist", path.display())),
        _ => Error::io(path, e),
    })
}

fn parse<'a>(path: &Path, bytes: &'a [u8], magic: u32) -> Result<(Vec<usize>, &'a [u8])> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i * 4..i * 4 + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| format_err(path, "truncated header"))
    };
    let found = word(0)?;
    if found != magic {
        return Err(format_err(
            path,
            format!("magic {found:#010x}, expected {magic:#010x}"),
        ));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (1..=ndim)
        .map(|i| word(i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let body = &bytes[4 * (ndim + 1)..];
    let need: usize = dims.iter().product();
    if body.len() < need {
        return Err(format_err(
            path,
            format!("truncated body: {} of {need} bytes", body.len()),
        ));
    }
    Ok((dims, &body[..need]))
}

/// Loads an image/label file pair into a [`Split`] with pixels scaled to
/// `[0, 1]` and shape `[N, 1, rows, cols]`.
pub fn load_idx_dataset(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    num_classes: usize,
) -> Result<Split> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let image_bytes = read(ip)?;
    let label_bytes = read(lp)?;
    let (idims, pixels) = parse(ip, &image_bytes, IMAGES_MAGIC)?;
    let (ldims, labels) = parse(lp, &label_bytes, LABELS_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(format_err(
            lp,
            format!("{} labels for {} images", ldims[0], idims[0]),
        ));
    }
    let labels: Vec<usize> = labels.iter().map(|&b| b as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(format_err(
            lp,
            format!("label {bad} out of range for {num_classes} classes"),
        ));
    }
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let images = Tensor::new(vec![idims[0], 1, idims[1], idims[2]], data)?;
    Split::new(images, labels)
}

/// Writes `[N, rows, cols]` unsigned-byte images.
pub fn write_idx_images(path: impl AsRef<Path>, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if rows * cols == 0 || !pixels.len().is_multiple_of(rows * cols) {
        return Err(Error::Contract("pixel count is not a multiple of rows*cols".into()));
    }
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for w in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&w.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(8 + labels.len());
    for w in [LABELS_MAGIC, labels.len() as u32] {
        out.extend_from_slice(&w.to_be_bytes());
    }
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path, labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let pixels: Vec<u8> = (0..4 * 64).map(|i| (i % 256) as u8).collect();
        let (ip, lp) = (dir.join("img.idx"), dir.join("lbl.idx"));
        write_idx_images(&ip, 8, 8, &pixels).unwrap();
        write_idx_labels(&lp, labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn four_image_fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), &[3, 0, 2, 1]);
        let split = load_idx_dataset(&ip, &lp, 4).unwrap();
        assert_eq!(split.images.shape(), &[4, 1, 8, 8]);
        assert_eq!(split.labels, vec![3, 0, 2, 1]);
        assert_eq!(split.images.data()[255], 255.0 / 255.0);
        assert_eq!(split.images.data()[1], 1.0 / 255.0);
    }

    #[test]
    fn empty_file_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let (_, lp) = fixture(dir.path(), &[0, 0, 0, 0]);
        let empty = dir.path().join("empty.idx");
        fs::write(&empty, []).unwrap();
        let err = load_idx_dataset(&empty, &lp, 4).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn short_body_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), &[0, 0, 0, 0]);
        let bytes = fs::read(&ip).unwrap();
        fs::write(&ip, &bytes[..bytes.len() - 1]).unwrap();
        assert!(load_idx_dataset(&ip, &lp, 4).unwrap_err().to_string().contains("truncated"));
    }

    #[test]
    fn label_equal_to_class_count_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), &[0, 1, 4, 2]);
        let err = load_idx_dataset(&ip, &lp, 4).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
    }

    #[test]
    fn swapped_files_fail_on_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = fixture(dir.path(), &[0, 1, 2, 3]);
        let err = load_idx_dataset(&lp, &ip, 4).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }
}
