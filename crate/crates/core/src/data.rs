//! Dataset loaders: MNIST IDX and CIFAR-10 binary batches.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::netsim::Shape3;

pub const MNIST_MEAN: f32 = 0.1307;
pub const MNIST_STD: f32 = 0.3081;
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Normalized images stored sample-major in channel-planar layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: Shape3,
    pub classes: usize,
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(shape: Shape3, classes: usize, images: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != shape.len() * labels.len() {
            return Err(Error::Shape(format!(
                "{} pixels for {} samples of {:?}",
                images.len(),
                labels.len(),
                shape
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Label {
                label: l as usize,
                classes,
            });
        }
        Ok(Dataset {
            shape,
            classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.shape.len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(idx.len() * self.shape.len());
        for &i in idx {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            shape: self.shape,
            classes: self.classes,
            images,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Samples `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        let idx: Vec<usize> = (start.min(self.len())..end.min(self.len())).collect();
        self.subset(&idx)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Dataset {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len(),
            expected: offset + 4,
        })
}

fn idx_payload<'a>(bytes: &'a [u8], path: &Path, magic: u32, dims: usize) -> Result<(Vec<usize>, &'a [u8])> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(Error::Dataset {
            path: path.to_path_buf(),
            msg: format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"),
        });
    }
    let shape = (0..dims)
        .map(|d| be_u32(bytes, 4 + 4 * d, path).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * dims;
    let need = header + shape.iter().product::<usize>();
    if bytes.len() < need {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len(),
            expected: need,
        });
    }
    Ok((shape, &bytes[header..need]))
}

/// Load an MNIST-format image/label IDX pair, normalized with the MNIST
/// mean/std after scaling pixels to `[0, 1]`.
pub fn load_mnist_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let ib = read_file(ip)?;
    let lb = read_file(lp)?;
    let (ishape, pixels) = idx_payload(&ib, ip, IDX_IMAGES, 3)?;
    let (lshape, labs) = idx_payload(&lb, lp, IDX_LABELS, 1)?;
    if ishape[0] != lshape[0] {
        return Err(Error::Dataset {
            path: lp.to_path_buf(),
            msg: format!("{} labels for {} images", lshape[0], ishape[0]),
        });
    }
    let images = pixels
        .iter()
        .map(|&p| (p as f32 / 255.0 - MNIST_MEAN) / MNIST_STD)
        .collect();
    Dataset::new(Shape3::new(1, ishape[1], ishape[2]), 10, images, labs.to_vec()).map_err(|e| {
        Error::Dataset {
            path: lp.to_path_buf(),
            msg: e.to_string(),
        }
    })
}

/// Load one CIFAR-10 binary batch (3073-byte records: label, then R, G, B planes).
pub fn load_cifar10_bin(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    if bytes.len() % CIFAR_RECORD != 0 {
        let whole = bytes.len() / CIFAR_RECORD;
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len(),
            expected: (whole + 1) * CIFAR_RECORD,
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::Dataset {
                path: path.to_path_buf(),
                msg: format!("record {r} at byte {}: label {} out of range", r * CIFAR_RECORD, rec[0]),
            });
        }
        labels.push(rec[0]);
        for (i, &p) in rec[1..].iter().enumerate() {
            let c = i / 1024;
            images.push((p as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]);
        }
    }
    Dataset::new(Shape3::new(3, 32, 32), 10, images, labels)
}

/// Train/test split of an MNIST directory in the standard file layout.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let d = dir.as_ref();
    let f = |s: &str| -> PathBuf { d.join(s) };
    Ok((
        load_mnist_idx(f("train-images-idx3-ubyte"), f("train-labels-idx1-ubyte"))?,
        load_mnist_idx(f("t10k-images-idx3-ubyte"), f("t10k-labels-idx1-ubyte"))?,
    ))
}

/// Train/test split of a CIFAR-10 binary directory (`data_batch_*.bin`, `test_batch.bin`).
pub fn load_cifar10_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let d = dir.as_ref();
    let mut train: Option<Dataset> = None;
    for i in 1..=5 {
        let p = d.join(format!("data_batch_{i}.bin"));
        if !p.exists() {
            continue;
        }
        let b = load_cifar10_bin(&p)?;
        match train.as_mut() {
            Some(t) => {
                t.images.extend(b.images);
                t.labels.extend(b.labels);
            }
            None => train = Some(b),
        }
    }
    let train = train.ok_or_else(|| Error::Dataset {
        path: d.to_path_buf(),
        msg: "no data_batch_*.bin files".into(),
    })?;
    Ok((train, load_cifar10_bin(d.join("test_batch.bin"))?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend(d.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    #[test]
    fn mnist_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("i");
        let lp = dir.path().join("l");
        let pixels: Vec<u8> = (0..2 * 3 * 2).map(|i| (i * 20) as u8).collect();
        fs::write(&ip, idx(IDX_IMAGES, &[2, 3, 2], &pixels)).unwrap();
        fs::write(&lp, idx(IDX_LABELS, &[2], &[7, 1])).unwrap();
        let d = load_mnist_idx(&ip, &lp).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.shape, Shape3::new(1, 3, 2));
        assert_eq!(d.labels, vec![7, 1]);
        assert!((d.image(0)[0] + MNIST_MEAN / MNIST_STD).abs() < 1e-6);

        fs::write(&ip, idx(IDX_IMAGES, &[2, 3, 2], &pixels[..7])).unwrap();
        match load_mnist_idx(&ip, &lp) {
            Err(Error::Truncated { offset, expected, .. }) => {
                assert_eq!(offset, 16 + 7);
                assert_eq!(expected, 16 + 12);
            }
            other => panic!("{other:?}"),
        }
        fs::write(&ip, idx(IDX_LABELS, &[2, 3, 2], &pixels)).unwrap();
        assert!(matches!(load_mnist_idx(&ip, &lp), Err(Error::Dataset { .. })));
    }

    #[test]
    fn cifar_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        let mut bytes = Vec::new();
        for label in [3u8, 9] {
            bytes.push(label);
            bytes.extend(std::iter::repeat(255u8).take(3072));
        }
        fs::write(&p, &bytes).unwrap();
        let d = load_cifar10_bin(&p).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels, vec![3, 9]);
        assert!((d.image(1)[2048] - (1.0 - CIFAR_MEAN[2]) / CIFAR_STD[2]).abs() < 1e-6);

        fs::write(&p, &bytes[..5000]).unwrap();
        assert!(matches!(
            load_cifar10_bin(&p),
            Err(Error::Truncated { offset: 5000, expected: 6146, .. })
        ));
        bytes[0] = 10;
        fs::write(&p, &bytes).unwrap();
        assert!(load_cifar10_bin(&p).is_err());
    }

    #[test]
    fn shipped_mnist_subset_loads() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
        if !dir.exists() {
            return;
        }
        let (train, test) = load_mnist_dir(&dir).unwrap();
        assert_eq!(train.shape, Shape3::new(1, 28, 28));
        assert_eq!(train.len(), 4000);
        assert_eq!(test.len(), 1000);
        assert!(train.labels.iter().all(|&l| l < 10));
    }
}
