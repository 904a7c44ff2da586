//! CIFAR-10 binary batches: one label byte followed by 3 planes of 32x32 row-major bytes.
//! Features are exposed in HWC order, scaled to [0, 1].

use std::path::Path;

use super::dataset::{Dataset, Provenance};
use crate::{Error, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * CIFAR_PIXELS;

pub fn parse_cifar10_binary(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Data(format!(
            "truncated CIFAR-10 file: {} bytes is not a multiple of {CIFAR_RECORD_BYTES}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = vec![0u8; n * 3 * CIFAR_PIXELS];
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Data(format!("record {r}: label byte {} > 9", rec[0])));
        }
        labels.push(usize::from(rec[0]));
        let out = &mut pixels[r * 3 * CIFAR_PIXELS..(r + 1) * 3 * CIFAR_PIXELS];
        for c in 0..3 {
            let plane = &rec[1 + c * CIFAR_PIXELS..1 + (c + 1) * CIFAR_PIXELS];
            for (p, &b) in plane.iter().enumerate() {
                out[p * 3 + c] = b;
            }
        }
    }
    Dataset::from_bytes(vec![CIFAR_SIDE, CIFAR_SIDE, 3], pixels, labels, 10, Provenance::Cifar10)
}

pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10_binary(&bytes)
}

/// Inverse of [`parse_cifar10_binary`] for byte-backed 32x32x3 datasets.
pub fn encode_cifar10_binary(data: &Dataset) -> Result<Vec<u8>> {
    if data.feature_shape() != [CIFAR_SIDE, CIFAR_SIDE, 3] || data.num_classes() > 10 {
        return Err(Error::Data("dataset is not CIFAR-shaped".into()));
    }
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD_BYTES);
    for i in 0..data.len() {
        let px = data
            .raw_bytes(i)
            .ok_or_else(|| Error::Data("only byte-backed datasets can be written".into()))?;
        out.push(data.label(i) as u8);
        for c in 0..3 {
            out.extend((0..CIFAR_PIXELS).map(|p| px[p * 3 + c]));
        }
    }
    Ok(out)
}

pub fn write_cifar10_binary(path: &Path, data: &Dataset) -> Result<()> {
    let bytes = encode_cifar10_binary(data)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vec<u8> {
        let mut v = Vec::new();
        for (label, seed) in [(3u8, 7u32), (7, 11)] {
            v.push(label);
            v.extend((0..3 * CIFAR_PIXELS as u32).map(|i| ((i * seed + 1) % 256) as u8));
        }
        v
    }

    #[test]
    fn parses_labels_and_pixels() {
        let bytes = fixture();
        let d = parse_cifar10_binary(&bytes).unwrap();
        assert_eq!(d.labels(), &[3, 7]);
        let (x, _) = d.example(0);
        assert_eq!(x.shape(), &[32, 32, 3]);
        assert_eq!(x.data()[0], f64::from(bytes[1]) / 255.0);
        // Green plane, pixel (0, 1).
        assert_eq!(x.data()[4], f64::from(bytes[1 + CIFAR_PIXELS + 1]) / 255.0);
    }

    #[test]
    fn degenerate_and_broken_files() {
        assert!(parse_cifar10_binary(&[]).unwrap().is_empty());
        assert!(matches!(parse_cifar10_binary(&[0; 3072]), Err(Error::Data(_))));
        let mut bad = fixture();
        bad[CIFAR_RECORD_BYTES] = 10;
        assert!(matches!(parse_cifar10_binary(&bad), Err(Error::Data(_))));
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let d = parse_cifar10_binary(&fixture()).unwrap();
        write_cifar10_binary(&path, &d).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), fixture());
        assert_eq!(load_cifar10_binary(&path).unwrap(), d);
    }
}
