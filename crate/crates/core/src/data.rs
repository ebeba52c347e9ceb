//! MNIST ingestion from big-endian IDX files and seeded batch iteration.
//!
//! Image files carry magic `0x00000803` and dims `[N, rows, cols]`, label files
//! magic `0x00000801` and dims `[N]`. Gzip-compressed files are detected by
//! their header and decompressed transparently. Pixels are scaled by `1/255`.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::seed;
use crate::tensor::{Tensor, TensorError};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const MNIST_TRAIN_LEN: usize = 60_000;
pub const MNIST_TEST_LEN: usize = 10_000;
pub const DEFAULT_BATCH_SIZE: usize = 128;

/// Canonical file names; a `.gz` suffix is also accepted.
pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// SHA-256 of each decompressed MNIST file, in [`MNIST_FILES`] order.
pub const MNIST_SHA256: [&str; 4] = [
    "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{what}: expected magic {expected:#010x}, found {found:#010x}")]
    Magic {
        what: &'static str,
        expected: u32,
        found: u32,
    },
    #[error("{what}: truncated file, expected {expected} bytes, got {actual}")]
    Truncated {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("image file has {images} samples but label file has {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is outside 0..10")]
    LabelRange { index: usize, label: u8 },
    #[error("{split:?} split has {actual} samples, expected {expected}")]
    UnexpectedSize {
        split: Split,
        expected: usize,
        actual: usize,
    },
    #[error("MNIST file {0} not found (with or without .gz)")]
    Missing(PathBuf),
    #[error("batch size must be positive")]
    ZeroBatch,
    #[error("dataset is empty")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

/// Images as `[N, pixels]` in `[0, 1]` plus labels in `0..10`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<u8>, split: Split) -> Result<Self, DataError> {
        let (n, _) = images.dims2("Dataset")?;
        if n != labels.len() {
            return Err(DataError::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= 10) {
            return Err(DataError::LabelRange { index, label });
        }
        Ok(Self { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.images.shape()[1]
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> Result<Self, DataError> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        Ok(Self {
            images: self.images.gather_rows(&idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        })
    }

    /// FNV-1a over pixel bit patterns and labels; stable across platforms.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |b: u8| h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        for v in self.images.data() {
            v.to_bits().to_le_bytes().into_iter().for_each(&mut feed);
        }
        self.labels.iter().copied().for_each(feed);
        h
    }
}

/// Decompresses gzip input; anything else is returned unchanged.
pub fn maybe_gunzip(raw: Vec<u8>) -> std::io::Result<Vec<u8>> {
    if !raw.starts_with(&[0x1f, 0x8b]) {
        return Ok(raw);
    }
    let mut out = Vec::new();
    GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
    Ok(out)
}

/// Reads a file, transparently decompressing gzip.
pub fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    maybe_gunzip(fs::read(path).map_err(io)?).map_err(io)
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated {
            what,
            expected: at + 4,
            actual: bytes.len(),
        })
}

/// Parses an IDX image payload into `[N, rows * cols]` pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f32>, DataError> {
    const WHAT: &str = "image file";
    let magic = be_u32(bytes, 0, WHAT)?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::Magic {
            what: WHAT,
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, WHAT)? as usize;
    let rows = be_u32(bytes, 8, WHAT)? as usize;
    let cols = be_u32(bytes, 12, WHAT)? as usize;
    let too_big = || DataError::Truncated {
        what: WHAT,
        expected: usize::MAX,
        actual: bytes.len(),
    };
    let pixels = rows.checked_mul(cols).ok_or_else(too_big)?;
    let expected = n.checked_mul(pixels).and_then(|v| v.checked_add(16)).ok_or_else(too_big)?;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            what: WHAT,
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes[16..expected].iter().map(|&p| p as f32 / 255.0).collect();
    Ok(Tensor::new(vec![n, pixels], data)?)
}

/// Parses an IDX label payload.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    const WHAT: &str = "label file";
    let magic = be_u32(bytes, 0, WHAT)?;
    if magic != LABEL_MAGIC {
        return Err(DataError::Magic {
            what: WHAT,
            expected: LABEL_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4, WHAT)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            what: WHAT,
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes[8..expected].to_vec())
}

/// Loads a matching image/label file pair (raw or gzip).
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset, DataError> {
    let images = parse_idx_images(&read_file(images_path)?)?;
    let labels = parse_idx_labels(&read_file(labels_path)?)?;
    Dataset::new(images, labels, split)
}

/// Resolves `dir/name` or `dir/name.gz`.
pub fn find_idx_file(dir: &Path, name: &str) -> Result<PathBuf, DataError> {
    let plain = dir.join(name);
    if plain.is_file() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    Err(DataError::Missing(plain))
}

/// Finds an MNIST directory: `BITLINEAR_MNIST_DIR`, then `./data/mnist`, then
/// `data/mnist` at the workspace root of this source tree.
pub fn locate_mnist() -> Option<PathBuf> {
    let candidates = [
        std::env::var_os("BITLINEAR_MNIST_DIR").map(PathBuf::from),
        Some(PathBuf::from("data/mnist")),
        Some(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")),
    ];
    candidates
        .into_iter()
        .flatten()
        .find(|d| MNIST_FILES.iter().all(|f| find_idx_file(d, f).is_ok()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mnist {
    pub train: Dataset,
    pub test: Dataset,
}

impl Mnist {
    /// Loads the four canonical files from `dir`, checking the split sizes.
    pub fn load_dir(dir: &Path) -> Result<Self, DataError> {
        let f = |name| find_idx_file(dir, name);
        let train = load_idx(&f(MNIST_FILES[0])?, &f(MNIST_FILES[1])?, Split::Train)?;
        let test = load_idx(&f(MNIST_FILES[2])?, &f(MNIST_FILES[3])?, Split::Test)?;
        for (ds, expected) in [(&train, MNIST_TRAIN_LEN), (&test, MNIST_TEST_LEN)] {
            if ds.len() != expected {
                return Err(DataError::UnexpectedSize {
                    split: ds.split,
                    expected,
                    actual: ds.len(),
                });
            }
        }
        Ok(Self { train, test })
    }
}

/// Seeded, reshuffling batch iterator. Each call to [`BatchIterator::next_epoch`]
/// draws a fresh permutation from the run seed and the epoch counter.
#[derive(Debug)]
pub struct BatchIterator<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
}

impl<'a> BatchIterator<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, seed: u64) -> Result<Self, DataError> {
        if batch_size == 0 {
            return Err(DataError::ZeroBatch);
        }
        if dataset.is_empty() {
            return Err(DataError::Empty);
        }
        Ok(Self {
            dataset,
            batch_size,
            seed,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.dataset.len().div_ceil(self.batch_size)
    }

    pub fn next_epoch(&mut self) -> EpochBatches<'a> {
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        order.shuffle(&mut seed::rng_for(self.seed, "shuffle", self.epoch));
        self.epoch += 1;
        EpochBatches {
            dataset: self.dataset,
            order,
            batch_size: self.batch_size,
            pos: 0,
        }
    }
}

/// One epoch's batches; the final batch may be short.
#[derive(Debug)]
pub struct EpochBatches<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for EpochBatches<'_> {
    type Item = (Tensor<f32>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let images = self.dataset.images.gather_rows(idx).expect("indices in range");
        let labels = idx.iter().map(|&i| self.dataset.labels[i] as usize).collect();
        Some((images, labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGE_MAGIC, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    fn toy(n: usize) -> Dataset {
        let images = Tensor::new(vec![n, 2], (0..2 * n).map(|i| i as f32).collect()).unwrap();
        Dataset::new(images, (0..n).map(|i| (i % 10) as u8).collect(), Split::Train).unwrap()
    }

    #[test]
    fn parses_images_and_labels() {
        let img = parse_idx_images(&idx_images(2, 1, 2, &[0, 255, 51, 102])).unwrap();
        assert_eq!(img.shape(), &[2, 2]);
        assert_eq!(img.data(), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(parse_idx_labels(&idx_labels(&[3, 7])).unwrap(), vec![3, 7]);
    }

    #[test]
    fn label_magic_in_image_slot_is_rejected() {
        let err = parse_idx_images(&idx_labels(&[1, 2])).unwrap_err();
        assert!(matches!(err, DataError::Magic { found: LABEL_MAGIC, expected: IMAGE_MAGIC, .. }));
    }

    #[test]
    fn truncated_payload_reports_sizes() {
        let err = parse_idx_images(&idx_images(2, 2, 2, &[0; 5])).unwrap_err();
        match err {
            DataError::Truncated { expected, actual, .. } => {
                assert_eq!((expected, actual), (24, 21));
                assert!(err.to_string().contains("expected 24 bytes, got 21"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn count_mismatch_and_bad_labels() {
        let images = Tensor::zeros(vec![2, 4]);
        assert!(matches!(
            Dataset::new(images.clone(), vec![1], Split::Test),
            Err(DataError::CountMismatch { images: 2, labels: 1 })
        ));
        assert!(matches!(
            Dataset::new(images, vec![1, 12], Split::Test),
            Err(DataError::LabelRange { index: 1, label: 12 })
        ));
    }

    #[test]
    fn gzip_files_are_transparent() {
        use flate2::{write::GzEncoder, Compression};
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let raw = idx_labels(&[4, 5, 6]);
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&raw).unwrap();
        let gz_path = dir.path().join("l.gz");
        fs::write(&gz_path, enc.finish().unwrap()).unwrap();
        let img_path = dir.path().join("i");
        fs::write(&img_path, idx_images(3, 1, 1, &[0, 1, 2])).unwrap();
        let ds = load_idx(&img_path, &gz_path, Split::Test).unwrap();
        assert_eq!(ds.labels, vec![4, 5, 6]);
    }

    #[test]
    fn batch_counts_and_partition() {
        let ds = toy(1000);
        let mut it = BatchIterator::new(&ds, 128, 5).unwrap();
        assert_eq!(it.batches_per_epoch(), 8);
        let batches: Vec<_> = it.next_epoch().collect();
        assert_eq!(batches.len(), 8);
        assert_eq!(batches.last().unwrap().1.len(), 1000 - 7 * 128);
        let mut seen: Vec<usize> = batches.iter().flat_map(|(x, _)| x.rows().map(|r| r[0] as usize / 2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..1000).collect::<Vec<_>>());
        let mut labels: Vec<usize> = batches.iter().flat_map(|(_, l)| l.clone()).collect();
        labels.sort_unstable();
        let mut expect: Vec<usize> = ds.labels.iter().map(|&l| l as usize).collect();
        expect.sort_unstable();
        assert_eq!(labels, expect);
    }

    #[test]
    fn sixty_thousand_makes_469_batches() {
        let ds = Dataset::new(Tensor::zeros(vec![60_000, 1]), vec![0; 60_000], Split::Train).unwrap();
        let mut it = BatchIterator::new(&ds, 128, 0).unwrap();
        let sizes: Vec<usize> = it.next_epoch().map(|(_, l)| l.len()).collect();
        assert_eq!(sizes.len(), 469);
        assert_eq!(*sizes.last().unwrap(), 96);
    }

    #[test]
    fn shuffles_are_seeded_and_reshuffled() {
        let ds = toy(300);
        let order = |seed| {
            let mut it = BatchIterator::new(&ds, 64, seed).unwrap();
            let e0: Vec<Vec<usize>> = it.next_epoch().map(|(_, l)| l).collect();
            let e1: Vec<Vec<usize>> = it.next_epoch().map(|(_, l)| l).collect();
            (e0, e1)
        };
        let (a0, a1) = order(9);
        let (b0, b1) = order(9);
        assert_eq!((a0.clone(), a1.clone()), (b0, b1));
        assert_ne!(a0, a1);
        assert!(BatchIterator::new(&ds, 0, 1).is_err());
    }

    #[test]
    fn checksum_is_stable() {
        let a = toy(10);
        assert_eq!(a.checksum(), toy(10).checksum());
        assert_ne!(a.checksum(), toy(11).checksum());
    }
}
