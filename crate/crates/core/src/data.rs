//! Dataset ingestion: the CIFAR-10 binary batch layout and a seeded
//! procedural toy-shape generator for desk-scale runs.

use std::path::Path;

use crate::downscale::DiscreteImage;
use crate::error::{Error, Result};
use crate::numerics::RngStream;

pub const CIFAR_RECORD_BYTES: usize = 3073;

/// Uniform-extent image collection with optional labels.
#[derive(Clone, Debug)]
pub struct ImageDataset {
    pub images: Vec<DiscreteImage>,
    pub labels: Option<Vec<u8>>,
    pub source: String,
}

impl ImageDataset {
    pub fn new(
        images: Vec<DiscreteImage>,
        labels: Option<Vec<u8>>,
        source: String,
    ) -> Result<Self> {
        let first = images.first().ok_or_else(|| {
            Error::InvalidArgument("a dataset needs at least one image".into())
        })?;
        let extents = (first.height, first.width, first.channels);
        if images
            .iter()
            .any(|img| (img.height, img.width, img.channels) != extents)
        {
            return Err(Error::InvalidArgument(
                "dataset images must share extents".into(),
            ));
        }
        if let Some(labels) = &labels {
            if labels.len() != images.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} labels for {} images",
                    labels.len(),
                    images.len()
                )));
            }
        }
        Ok(Self {
            images,
            labels,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn extents(&self) -> (usize, usize, usize) {
        let img = &self.images[0];
        (img.height, img.width, img.channels)
    }
}

/// Parse one CIFAR-10 record (1 label byte + 3 channel-major 32x32 planes)
/// into an interleaved HWC image.
fn parse_cifar_record(record: &[u8], file_offset: usize) -> Result<(u8, DiscreteImage)> {
    let label = record[0];
    if label > 9 {
        return Err(Error::Format(format!(
            "label {label} > 9 at byte offset {file_offset}"
        )));
    }
    let mut values = vec![0u8; 32 * 32 * 3];
    for c in 0..3 {
        let plane = &record[1 + c * 1024..1 + (c + 1) * 1024];
        for y in 0..32 {
            for x in 0..32 {
                values[(y * 32 + x) * 3 + c] = plane[y * 32 + x];
            }
        }
    }
    Ok((label, DiscreteImage::new(32, 32, 3, values)?))
}

/// Re-encode an image (plus label) into the 3073-byte record layout.
pub fn cifar_record_bytes(label: u8, image: &DiscreteImage) -> Result<Vec<u8>> {
    if (image.height, image.width, image.channels) != (32, 32, 3) {
        return Err(Error::ShapeMismatch(format!(
            "CIFAR records are 32x32x3, got {}x{}x{}",
            image.height, image.width, image.channels
        )));
    }
    let mut out = vec![0u8; CIFAR_RECORD_BYTES];
    out[0] = label;
    for c in 0..3 {
        for y in 0..32 {
            for x in 0..32 {
                out[1 + c * 1024 + y * 32 + x] = image.get(y, x, c);
            }
        }
    }
    Ok(out)
}

/// Load one or more CIFAR-10 binary batch files (data_batch_*.bin layout).
pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P]) -> Result<ImageDataset> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("no dataset files given".into()));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut sources = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
            return Err(Error::Format(format!(
                "{}: size {} is not a positive multiple of {CIFAR_RECORD_BYTES}",
                path.display(),
                bytes.len()
            )));
        }
        for (i, record) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
            let (label, image) = parse_cifar_record(record, i * CIFAR_RECORD_BYTES)?;
            labels.push(label);
            images.push(image);
        }
        sources.push(path.display().to_string());
    }
    ImageDataset::new(images, Some(labels), format!("cifar10[{}]", sources.join(";")))
}

/// Procedurally drawn RGB images: a uniform background plus 1-3 hard-edged
/// rectangles and circles. A pure function of `(n, extent, seed)`.
pub fn gen_toy_shapes(n: usize, extent: usize, seed: u64) -> Result<ImageDataset> {
    if extent % 2 != 0 || extent < 8 {
        return Err(Error::InvalidArgument(format!(
            "toy extent must be even and >= 8, got {extent}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("toy dataset size must be >= 1".into()));
    }
    let root = RngStream::new(seed);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = root.child(&format!("img{i}"));
        images.push(draw_toy_image(extent, &mut rng));
    }
    ImageDataset::new(
        images,
        None,
        format!("toy(n={n},extent={extent},seed={seed})"),
    )
}

fn draw_toy_image(extent: usize, rng: &mut RngStream) -> DiscreteImage {
    let mut img = DiscreteImage::zeros(extent, extent, 3);
    let bg = [
        rng.uniform_below(256) as u8,
        rng.uniform_below(256) as u8,
        rng.uniform_below(256) as u8,
    ];
    for y in 0..extent {
        for x in 0..extent {
            for c in 0..3 {
                img.set(y, x, c, bg[c]);
            }
        }
    }
    let count = 1 + rng.uniform_below(3);
    for _ in 0..count {
        let kind = rng.uniform_below(2);
        let color = [
            rng.uniform_below(256) as u8,
            rng.uniform_below(256) as u8,
            rng.uniform_below(256) as u8,
        ];
        let cx = rng.uniform_below(extent) as isize;
        let cy = rng.uniform_below(extent) as isize;
        let max_half = (extent / 4).max(2);
        if kind == 0 {
            let hw = (1 + rng.uniform_below(max_half)) as isize;
            let hh = (1 + rng.uniform_below(max_half)) as isize;
            for y in (cy - hh).max(0)..(cy + hh + 1).min(extent as isize) {
                for x in (cx - hw).max(0)..(cx + hw + 1).min(extent as isize) {
                    for c in 0..3 {
                        img.set(y as usize, x as usize, c, color[c]);
                    }
                }
            }
        } else {
            let r = (1 + rng.uniform_below(max_half)) as isize;
            for y in (cy - r).max(0)..(cy + r + 1).min(extent as isize) {
                for x in (cx - r).max(0)..(cx + r + 1).min(extent as isize) {
                    let (dx, dy) = (x - cx, y - cy);
                    if dx * dx + dy * dy <= r * r {
                        for c in 0..3 {
                            img.set(y as usize, x as usize, c, color[c]);
                        }
                    }
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_generator_is_deterministic() {
        let a = gen_toy_shapes(16, 16, 99).unwrap();
        let b = gen_toy_shapes(16, 16, 99).unwrap();
        for (ia, ib) in a.images.iter().zip(&b.images) {
            assert_eq!(ia.values(), ib.values());
        }
        let c = gen_toy_shapes(16, 16, 100).unwrap();
        assert!(a.images[0].values() != c.images[0].values());
    }

    #[test]
    fn toy_generator_rejects_bad_extents() {
        assert!(gen_toy_shapes(4, 7, 0).is_err());
        assert!(gen_toy_shapes(4, 6, 0).is_err());
        assert!(gen_toy_shapes(0, 16, 0).is_err());
    }

    #[test]
    fn toy_mean_pixel_golden_value() {
        // Frozen from the generator itself; guards the full draw path
        // (stream derivation, shape choices, painting order).
        let data = gen_toy_shapes(1000, 16, 7).unwrap();
        let total: u64 = data
            .images
            .iter()
            .flat_map(|img| img.values().iter().map(|&v| v as u64))
            .sum();
        let mean = total as f64 / (1000.0 * 16.0 * 16.0 * 3.0);
        assert!(
            (mean - TOY_MEAN_SEED7).abs() < 1e-12,
            "mean {mean:.12} vs frozen {TOY_MEAN_SEED7:.12}"
        );
    }

    const TOY_MEAN_SEED7: f64 = 127.576773437499995;

    #[test]
    fn cifar_loader_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");

        // Two synthetic records: an all-0xFF payload and a gradient.
        let mut record_a = vec![0xFFu8; CIFAR_RECORD_BYTES];
        record_a[0] = 3;
        let mut record_b = vec![0u8; CIFAR_RECORD_BYTES];
        record_b[0] = 9;
        for (i, v) in record_b.iter_mut().enumerate().skip(1) {
            *v = (i % 251) as u8;
        }
        let mut bytes = record_a.clone();
        bytes.extend_from_slice(&record_b);
        std::fs::write(&path, &bytes).unwrap();

        let ds = load_cifar10_binary(&[&path]).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.extents(), (32, 32, 3));
        assert!(ds.images[0].values().iter().all(|&v| v == 255));
        assert_eq!(ds.labels.as_ref().unwrap(), &vec![3, 9]);

        // Round trip back to the record layout.
        let again = cifar_record_bytes(3, &ds.images[0]).unwrap();
        assert_eq!(again, record_a);
        let again_b = cifar_record_bytes(9, &ds.images[1]).unwrap();
        assert_eq!(again_b, record_b);

        // Truncated file.
        std::fs::write(&path, &bytes[..3072]).unwrap();
        assert!(load_cifar10_binary(&[&path]).is_err());

        // Label out of range, error names the offset.
        let mut bad = record_a;
        bad[0] = 10;
        std::fs::write(&path, &bad).unwrap();
        match load_cifar10_binary(&[&path]) {
            Err(Error::Format(msg)) => assert!(msg.contains("offset 0"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn file_of_ten_records_yields_ten_images() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ten.bin");
        let mut bytes = Vec::new();
        for i in 0..10u8 {
            let mut rec = vec![i % 10; CIFAR_RECORD_BYTES];
            rec[0] = i % 10;
            bytes.extend_from_slice(&rec);
        }
        std::fs::write(&path, &bytes).unwrap();
        assert_eq!(load_cifar10_binary(&[&path]).unwrap().len(), 10);
    }
}
