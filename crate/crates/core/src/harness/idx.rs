//! IDX image/label files: big-endian headers (magic 0x00000803 for images,
//! 0x00000801 for labels), u8 payload. Pixels load scaled into `[0, 1]`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::LabeledImages;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("truncated {what} header")))
}

/// Load an image/label IDX pair. Counts must match; labels define the class
/// count as `max + 1`.
pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<LabeledImages> {
    let img_bytes = fs::read(images_path)?;
    let magic = read_u32_be(&img_bytes, 0, "image")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_u32_be(&img_bytes, 4, "image")? as usize;
    let rows = read_u32_be(&img_bytes, 8, "image")? as usize;
    let cols = read_u32_be(&img_bytes, 12, "image")? as usize;
    let expected = 16 + count * rows * cols;
    if img_bytes.len() != expected {
        return Err(Error::Format(format!(
            "image payload is {} bytes, header implies {expected}",
            img_bytes.len()
        )));
    }

    let lab_bytes = fs::read(labels_path)?;
    let magic = read_u32_be(&lab_bytes, 0, "label")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"
        )));
    }
    let lab_count = read_u32_be(&lab_bytes, 4, "label")? as usize;
    if lab_count != count {
        return Err(Error::Format(format!(
            "label count {lab_count} does not match image count {count}"
        )));
    }
    if lab_bytes.len() != 8 + count {
        return Err(Error::Format(format!(
            "label payload is {} bytes, header implies {}",
            lab_bytes.len(),
            8 + count
        )));
    }

    let data: Vec<f64> = img_bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lab_bytes[8..].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    LabeledImages::new(
        Tensor::new(vec![count, rows, cols, 1], data)?,
        labels,
        num_classes,
    )
}

/// Write a dataset as an IDX pair (single-channel images; pixels rounded to
/// u8 over `[0, 1]`).
pub fn save_idx_dataset(data: &LabeledImages, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (h, w, c) = data.image_dims();
    if c != 1 {
        return Err(Error::Config(format!("IDX export supports 1 channel, got {c}")));
    }
    let mut img = Vec::with_capacity(16 + data.len() * h * w);
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(data.len() as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    img.extend(
        data.images
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    fs::File::create(images_path)?.write_all(&img)?;

    let mut lab = Vec::with_capacity(8 + data.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(data.len() as u32).to_be_bytes());
    lab.extend(data.labels.iter().map(|&l| l as u8));
    fs::File::create(labels_path)?.write_all(&lab)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LabeledImages {
        let images = Tensor::new(
            vec![3, 4, 4, 1],
            (0..48).map(|i| (i % 256) as f64 / 255.0).collect(),
        )
        .unwrap();
        LabeledImages::new(images, vec![0, 2, 1], 3).unwrap()
    }

    #[test]
    fn idx_round_trip_preserves_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let data = sample();
        save_idx_dataset(&data, &ip, &lp).unwrap();
        let back = load_idx_dataset(&ip, &lp).unwrap();
        assert_eq!(back.labels, data.labels);
        assert_eq!(back.images.shape(), data.images.shape());
        for (a, b) in back.images.data().iter().zip(data.images.data()) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn byte_swapped_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        save_idx_dataset(&sample(), &ip, &lp).unwrap();
        let mut bytes = fs::read(&ip).unwrap();
        bytes[0..4].copy_from_slice(&IMAGES_MAGIC.to_le_bytes());
        fs::write(&ip, &bytes).unwrap();
        assert!(matches!(load_idx_dataset(&ip, &lp), Err(Error::Format(_))));
    }

    #[test]
    fn mismatched_label_count_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        save_idx_dataset(&sample(), &ip, &lp).unwrap();
        let mut bytes = fs::read(&lp).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_be_bytes());
        fs::write(&lp, &bytes).unwrap();
        assert!(matches!(load_idx_dataset(&ip, &lp), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_image_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        save_idx_dataset(&sample(), &ip, &lp).unwrap();
        let bytes = fs::read(&ip).unwrap();
        fs::write(&ip, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_idx_dataset(&ip, &lp), Err(Error::Format(_))));
    }
}
