use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Inputs with row-aligned one-hot labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub inputs: Tensor,
    pub labels: Tensor,
}

impl LabeledSet {
    pub fn new(inputs: Tensor, labels: Tensor) -> Result<Self> {
        if inputs.rank() == 0 || labels.rank() != 2 || inputs.rows() != labels.rows() {
            return Err(Error::shape("dataset", inputs.shape(), labels.shape()));
        }
        Ok(LabeledSet { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.labels.row_len()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        LabeledSet {
            inputs: self.inputs.slice_rows(range.clone()),
            labels: self.labels.slice_rows(range),
        }
    }

    pub fn gather(&self, rows: &[usize]) -> Self {
        LabeledSet {
            inputs: self.inputs.gather_rows(rows),
            labels: self.labels.gather_rows(rows),
        }
    }

    /// Count of each class.
    pub fn class_counts(&self) -> Vec<usize> {
        let d = self.classes();
        let mut counts = vec![0; d];
        for row in self.labels.data().chunks_exact(d.max(1)) {
            if let Some(c) = row.iter().position(|&v| v == 1.0) {
                counts[c] += 1;
            }
        }
        counts
    }
}

/// Disjoint train, validation and test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: LabeledSet,
    pub validation: LabeledSet,
    pub test: LabeledSet,
}

impl Dataset {
    /// Splits consecutive rows into `train` then `validation` then the rest.
    pub fn split(set: LabeledSet, train: usize, validation: usize) -> Result<Self> {
        let n = set.len();
        if train == 0 || validation == 0 || train + validation >= n {
            return Err(Error::input(
                "dataset split",
                format!("cannot take {train} + {validation} rows and a test split from {n}"),
            ));
        }
        Ok(Dataset {
            train: set.slice(0..train),
            validation: set.slice(train..train + validation),
            test: set.slice(train + validation..n),
        })
    }

    pub fn classes(&self) -> usize {
        self.train.classes()
    }
}

pub(crate) fn one_hot(classes: &[usize], d: usize) -> Tensor {
    let mut data = vec![0.0; classes.len() * d];
    for (i, &c) in classes.iter().enumerate() {
        data[i * d + c] = 1.0;
    }
    Tensor::new(vec![classes.len(), d], data).expect("length matches shape")
}

/// Gaussian points labelled by the side of a random hyperplane through the
/// origin.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableData {
    pub set: LabeledSet,
    /// Normal of the separating hyperplane.
    pub direction: Vec<f64>,
}

/// `n` draws of `x ~ N(0, I_d)` labelled `1` when `x . w > 0` and `0`
/// otherwise, for one `w ~ N(0, I_d)`. Points exactly on the plane are
/// redrawn.
pub fn gen_separable(n: usize, d: usize, rng: &mut Rng) -> SeparableData {
    assert!(n >= 1 && d >= 1, "gen_separable: n and d must be positive");
    let w: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let mut x = Vec::with_capacity(n * d);
    let mut classes = Vec::with_capacity(n);
    for _ in 0..n {
        loop {
            let row: Vec<f32> = (0..d).map(|_| rng.normal() as f32).collect();
            let dot: f64 = row.iter().zip(&w).map(|(&a, b)| a as f64 * b).sum();
            if dot != 0.0 {
                classes.push((dot > 0.0) as usize);
                x.extend(row);
                break;
            }
        }
    }
    SeparableData {
        set: LabeledSet {
            inputs: Tensor::new(vec![n, d], x).expect("length matches shape"),
            labels: one_hot(&classes, 2),
        },
        direction: w,
    }
}

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Training examples held out, from the end of the training file, as the
/// validation split.
pub const MNIST_VALIDATION: usize = 10_000;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::file(path, e))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

/// IDX image file (`0x00000803`) as `[n, rows, cols, 1]` with pixels mapped
/// from `[0, 255]` to `[-0.5, 0.5]`.
pub fn read_idx_images(path: &Path) -> Result<Tensor> {
    let bytes = read(path)?;
    let bad = |reason: String| Error::Idx {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 {
        return Err(bad("truncated header".into()));
    }
    let magic = be_u32(&bytes, 0);
    if magic != 0x0803 {
        return Err(bad(format!("bad magic {magic:#010x}, expected 0x00000803")));
    }
    let (n, h, w) = (
        be_u32(&bytes, 4) as usize,
        be_u32(&bytes, 8) as usize,
        be_u32(&bytes, 12) as usize,
    );
    let want = 16 + n * h * w;
    if bytes.len() != want {
        return Err(bad(format!("expected {want} bytes, found {}", bytes.len())));
    }
    let data = bytes[16..].iter().map(|&p| p as f32 / 255.0 - 0.5).collect();
    Tensor::new(vec![n, h, w, 1], data)
}

/// IDX label file (`0x00000801`) as class indices.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read(path)?;
    let bad = |reason: String| Error::Idx {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 8 {
        return Err(bad("truncated header".into()));
    }
    let magic = be_u32(&bytes, 0);
    if magic != 0x0801 {
        return Err(bad(format!("bad magic {magic:#010x}, expected 0x00000801")));
    }
    let n = be_u32(&bytes, 4) as usize;
    if bytes.len() != 8 + n {
        return Err(bad(format!("expected {} bytes, found {}", 8 + n, bytes.len())));
    }
    Ok(bytes[8..].to_vec())
}

/// One image file and its label file as a labelled set with 10 classes.
pub fn load_mnist_pair(images: &Path, labels: &Path) -> Result<LabeledSet> {
    let x = read_idx_images(images)?;
    let y = read_idx_labels(labels)?;
    if x.rows() != y.len() {
        return Err(Error::Idx {
            path: labels.to_path_buf(),
            reason: format!("{} labels for {} images", y.len(), x.rows()),
        });
    }
    if let Some(&bad) = y.iter().find(|&&c| c > 9) {
        return Err(Error::Idx {
            path: labels.to_path_buf(),
            reason: format!("label {bad} outside 0..=9"),
        });
    }
    let classes: Vec<usize> = y.iter().map(|&c| c as usize).collect();
    LabeledSet::new(x, one_hot(&classes, 10))
}

/// The four standard MNIST files under `dir`; the last
/// [`MNIST_VALIDATION`] training examples become the validation split.
pub fn load_mnist(dir: &Path) -> Result<Dataset> {
    let path = |name: &str| -> Result<PathBuf> {
        let p = dir.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingData(p))
        }
    };
    let train = load_mnist_pair(&path(MNIST_TRAIN_IMAGES)?, &path(MNIST_TRAIN_LABELS)?)?;
    let test = load_mnist_pair(&path(MNIST_TEST_IMAGES)?, &path(MNIST_TEST_LABELS)?)?;
    let n = train.len();
    if n <= MNIST_VALIDATION {
        return Err(Error::Idx {
            path: dir.join(MNIST_TRAIN_IMAGES),
            reason: format!("only {n} training images, need more than {MNIST_VALIDATION}"),
        });
    }
    Ok(Dataset {
        validation: train.slice(n - MNIST_VALIDATION..n),
        train: train.slice(0..n - MNIST_VALIDATION),
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, h: u32, w: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = 0x0803u32.to_be_bytes().to_vec();
        for v in [n, h, w] {
            b.extend(v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn idx_round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        fs::write(&img, idx_images(2, 2, 2, &[0, 255, 128, 0, 1, 2, 3, 4])).unwrap();
        let mut l = 0x0801u32.to_be_bytes().to_vec();
        l.extend(2u32.to_be_bytes());
        l.extend([3, 7]);
        fs::write(&lab, l).unwrap();
        let set = load_mnist_pair(&img, &lab).unwrap();
        assert_eq!(set.inputs.shape(), &[2, 2, 2, 1]);
        assert_eq!(set.inputs.data()[0], -0.5);
        assert_eq!(set.inputs.data()[1], 0.5);
        assert_eq!(set.class_counts()[3], 1);
        assert_eq!(set.class_counts()[7], 1);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let mut bytes = idx_images(1, 2, 2, &[0, 0, 0, 0]);
        bytes[3] = 0x01;
        fs::write(&img, &bytes).unwrap();
        assert!(matches!(read_idx_images(&img), Err(Error::Idx { .. })));
        fs::write(&img, idx_images(2, 2, 2, &[0; 5])).unwrap();
        assert!(matches!(read_idx_images(&img), Err(Error::Idx { .. })));
        assert!(matches!(
            load_mnist(&dir.path().join("nothing")),
            Err(Error::MissingData(_))
        ));
    }

    #[test]
    fn separable_labels_follow_the_plane() {
        let data = gen_separable(500, 7, &mut Rng::new(2));
        for (row, lab) in data
            .set
            .inputs
            .data()
            .chunks_exact(7)
            .zip(data.set.labels.data().chunks_exact(2))
        {
            let dot: f64 = row.iter().zip(&data.direction).map(|(&a, b)| a as f64 * b).sum();
            assert_eq!(dot > 0.0, lab[1] == 1.0);
        }
    }

    #[test]
    fn split_sizes() {
        let data = gen_separable(100, 3, &mut Rng::new(2));
        let ds = Dataset::split(data.set, 80, 10).unwrap();
        assert_eq!((ds.train.len(), ds.validation.len(), ds.test.len()), (80, 10, 10));
    }
}
