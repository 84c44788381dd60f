//! Dataset ingestion: a deterministic synthetic spatio-temporal
//! classification task and the standard CIFAR-10 binary format.
//!
//! The synthetic task makes temporal latency carry class information:
//! classes come in pairs that share a spatial template but drive it at
//! different simulation steps (an early two-step window against a later
//! single-step onset), so latency-bounded pruning interacts with real
//! signal rather than noise.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::init::SeededRng;
use crate::tensor::DenseTensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("corrupt record framing: file length {len} is not a multiple of 3073")]
    CorruptRecord { len: u64 },
    #[error("label {label} out of range 0..=9")]
    LabelOutOfRange { label: u8 },
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
}

/// Dataset selector and parameters; synthetic generation is a pure
/// function of these fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetDescriptor {
    pub kind: DatasetKind,
    /// CIFAR-10 only: a batch file or a directory with the standard
    /// `data_batch_*.bin` / `test_batch.bin` layout.
    pub path: Option<PathBuf>,
    /// CIFAR-10 only: seeded subset of the training split (the test
    /// split is capped to the same size).
    pub subset_size: Option<usize>,
    pub train_size: usize,
    pub test_size: usize,
    pub classes: usize,
    pub grid: usize,
    pub timesteps: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetDescriptor {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            path: None,
            subset_size: None,
            train_size: 2000,
            test_size: 500,
            classes: 10,
            grid: 16,
            timesteps: 4,
            noise: 0.1,
            seed: 7,
        }
    }
}

/// One split; images are `(C, H, W)` static frames or `(T, C, H, W)`
/// temporal samples.
#[derive(Debug, Clone, Default)]
pub struct Split {
    pub images: Vec<DenseTensor>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Assemble `(B, T, C, H, W)`; static frames are tiled across T.
    pub fn batch(&self, indices: &[usize], timesteps: usize) -> (DenseTensor, Vec<usize>) {
        assert!(!indices.is_empty(), "batch needs at least one sample");
        let first = &self.images[indices[0]];
        let (c, h, w) = match first.rank() {
            3 => (first.shape()[0], first.shape()[1], first.shape()[2]),
            4 => (first.shape()[1], first.shape()[2], first.shape()[3]),
            r => panic!("sample rank {r} unsupported"),
        };
        let b_n = indices.len();
        let mut out = DenseTensor::zeros(&[b_n, timesteps, c, h, w]);
        let frame = c * h * w;
        for (bi, &idx) in indices.iter().enumerate() {
            let img = &self.images[idx];
            for t in 0..timesteps {
                let dst = (bi * timesteps + t) * frame;
                let src = match img.rank() {
                    3 => &img.data()[..frame],
                    _ => {
                        assert_eq!(img.shape()[0], timesteps, "temporal length mismatch");
                        &img.data()[t * frame..(t + 1) * frame]
                    }
                };
                out.data_mut()[dst..dst + frame].copy_from_slice(src);
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (out, labels)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub in_channels: usize,
    pub input_hw: usize,
    pub num_classes: usize,
}

impl Dataset {
    pub fn train_len(&self) -> usize {
        self.train.len()
    }

    pub fn test_len(&self) -> usize {
        self.test.len()
    }
}

pub fn load(descriptor: &DatasetDescriptor) -> Result<Dataset, DataError> {
    match descriptor.kind {
        DatasetKind::Synthetic => Ok(generate_synthetic(descriptor)),
        DatasetKind::Cifar10 => {
            let path = descriptor
                .path
                .as_ref()
                .ok_or_else(|| DataError::MissingFile(PathBuf::from("<dataset.path unset>")))?;
            load_cifar10(path, descriptor.subset_size, descriptor.seed)
        }
    }
}

// ---- synthetic spatio-temporal templates ----

const REGION_GRID: usize = 4;
const REGIONS_PER_CLASS: usize = 5;

/// Noiseless class templates, each `(T, 1, grid, grid)`.
///
/// Classes pair up: class `m` and `m + ceil(M/2)` share the spatial
/// region set of group `m % ceil(M/2)`; the first half drive their cells
/// at steps 1..2 and the second half only at step 3 (1-based, clamped to
/// the simulation window).
pub fn synthetic_templates(descriptor: &DatasetDescriptor) -> Vec<DenseTensor> {
    let m_n = descriptor.classes;
    let g = descriptor.grid;
    let t_n = descriptor.timesteps;
    let groups = m_n.div_ceil(2);
    let n_regions = REGION_GRID * REGION_GRID;
    let mut region_sets: Vec<Vec<usize>> = Vec::with_capacity(groups);
    let mut rng = SeededRng::new(descriptor.seed ^ 0xC1A55);
    while region_sets.len() < groups {
        let candidate = rng.sample_indices(n_regions, REGIONS_PER_CLASS.min(n_regions));
        if !region_sets.contains(&candidate) {
            region_sets.push(candidate);
        }
    }
    let region_h = (g / REGION_GRID).max(1);
    let early_window: Vec<usize> = (0..2.min(t_n)).collect();
    let late_window: Vec<usize> = vec![2.min(t_n - 1)];
    (0..m_n)
        .map(|m| {
            let set = &region_sets[m % groups];
            let window = if m < groups {
                &early_window
            } else {
                &late_window
            };
            let mut t = DenseTensor::zeros(&[t_n, 1, g, g]);
            for &step in window {
                for &region in set {
                    let (ry, rx) = (region / REGION_GRID, region % REGION_GRID);
                    for dy in 0..region_h {
                        for dx in 0..region_h {
                            let y = (ry * region_h + dy).min(g - 1);
                            let x = (rx * region_h + dx).min(g - 1);
                            t.data_mut()[(step * g + y) * g + x] = 1.0;
                        }
                    }
                }
            }
            t
        })
        .collect()
}

/// Balanced labeled samples: template plus seeded Gaussian noise.
pub fn generate_synthetic(descriptor: &DatasetDescriptor) -> Dataset {
    assert!(descriptor.classes >= 2, "need at least two classes");
    let templates = synthetic_templates(descriptor);
    let make_split = |count: usize, tag: u64| {
        let mut rng = SeededRng::new(descriptor.seed ^ tag);
        let mut labels: Vec<usize> = (0..count).map(|i| i % descriptor.classes).collect();
        rng.shuffle(&mut labels);
        let images = labels
            .iter()
            .map(|&label| {
                let mut img = templates[label].clone();
                if descriptor.noise > 0.0 {
                    for v in img.data_mut() {
                        *v += descriptor.noise * rng.normal();
                    }
                }
                img
            })
            .collect();
        Split { images, labels }
    };
    Dataset {
        train: make_split(descriptor.train_size, 0x7E41),
        test: make_split(descriptor.test_size, 0x7E57),
        in_channels: 1,
        input_hw: descriptor.grid,
        num_classes: descriptor.classes,
    }
}

// ---- CIFAR-10 binary format ----

const CIFAR_RECORD: usize = 3073;

fn read_cifar_file(path: &Path) -> Result<Split, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(DataError::CorruptRecord {
            len: bytes.len() as u64,
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let rec = &bytes[i * CIFAR_RECORD..(i + 1) * CIFAR_RECORD];
        let label = rec[0];
        if label > 9 {
            return Err(DataError::LabelOutOfRange { label });
        }
        let data: Vec<f64> = rec[1..].iter().map(|&b| b as f64 / 255.0).collect();
        images.push(DenseTensor::new(vec![3, 32, 32], data).expect("3072 pixels"));
        labels.push(label as usize);
    }
    Ok(Split { images, labels })
}

fn seeded_subset(split: Split, size: usize, seed: u64) -> Split {
    if size >= split.len() {
        return split;
    }
    let mut order: Vec<usize> = (0..split.len()).collect();
    SeededRng::new(seed ^ 0x5B5E7).shuffle(&mut order);
    let mut picked: Vec<usize> = order.into_iter().take(size).collect();
    picked.sort_unstable();
    Split {
        images: picked.iter().map(|&i| split.images[i].clone()).collect(),
        labels: picked.iter().map(|&i| split.labels[i]).collect(),
    }
}

/// Read CIFAR-10 binary batches: records of exactly 3073 bytes, one
/// label byte then 3072 channel-major pixels. `path` may be a single
/// batch file (which becomes the training split) or the standard
/// directory layout.
pub fn load_cifar10(
    path: &Path,
    subset_size: Option<usize>,
    seed: u64,
) -> Result<Dataset, DataError> {
    let (mut train, mut test) = if path.is_dir() {
        let mut train = Split::default();
        for k in 1..=5 {
            let f = path.join(format!("data_batch_{k}.bin"));
            if !f.exists() {
                return Err(DataError::MissingFile(f));
            }
            let part = read_cifar_file(&f)?;
            train.images.extend(part.images);
            train.labels.extend(part.labels);
        }
        let test_path = path.join("test_batch.bin");
        let test = if test_path.exists() {
            read_cifar_file(&test_path)?
        } else {
            Split::default()
        };
        (train, test)
    } else {
        (read_cifar_file(path)?, Split::default())
    };
    if let Some(size) = subset_size {
        train = seeded_subset(train, size, seed);
        test = seeded_subset(test, size, seed.wrapping_add(1));
    }
    Ok(Dataset {
        train,
        test,
        in_channels: 3,
        input_hw: 32,
        num_classes: 10,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_descriptor() -> DatasetDescriptor {
        DatasetDescriptor {
            train_size: 40,
            test_size: 20,
            classes: 10,
            grid: 16,
            timesteps: 4,
            noise: 0.0,
            seed: 3,
            ..DatasetDescriptor::default()
        }
    }

    /// Nearest-template classification in input space.
    fn template_oracle(templates: &[DenseTensor], sample: &DenseTensor) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (m, t) in templates.iter().enumerate() {
            let d: f64 = t
                .data()
                .iter()
                .zip(sample.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = m;
            }
        }
        best
    }

    #[test]
    fn noiseless_samples_are_template_separable() {
        let d = small_descriptor();
        let templates = synthetic_templates(&d);
        let data = generate_synthetic(&d);
        for (img, &label) in data.train.images.iter().zip(&data.train.labels) {
            assert_eq!(template_oracle(&templates, img), label);
        }
    }

    #[test]
    fn timing_only_pair_is_separable() {
        // two classes share all spatial cells and differ only in timing
        let d = DatasetDescriptor {
            classes: 2,
            train_size: 10,
            test_size: 0,
            noise: 0.0,
            ..small_descriptor()
        };
        let templates = synthetic_templates(&d);
        // identical spatial support summed over time
        let spatial = |t: &DenseTensor| -> Vec<bool> {
            let g = d.grid;
            (0..g * g)
                .map(|i| (0..d.timesteps).any(|s| t.data()[s * g * g + i] != 0.0))
                .collect()
        };
        assert_eq!(spatial(&templates[0]), spatial(&templates[1]));
        assert_ne!(templates[0].data(), templates[1].data());
        let data = generate_synthetic(&d);
        for (img, &label) in data.train.images.iter().zip(&data.train.labels) {
            assert_eq!(template_oracle(&templates, img), label);
        }
    }

    #[test]
    fn noisy_generation_is_seed_deterministic() {
        let mut d = small_descriptor();
        d.noise = 0.1;
        let a = generate_synthetic(&d);
        let b = generate_synthetic(&d);
        for (x, y) in a.train.images.iter().zip(&b.train.images) {
            assert_eq!(x.data(), y.data());
        }
        assert_eq!(a.train.labels, b.train.labels);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let d = DatasetDescriptor {
            train_size: 0,
            test_size: 0,
            ..small_descriptor()
        };
        let data = generate_synthetic(&d);
        assert_eq!(data.train_len(), 0);
        assert_eq!(data.test_len(), 0);
    }

    #[test]
    fn labels_are_balanced() {
        let d = small_descriptor();
        let data = generate_synthetic(&d);
        let mut counts = vec![0usize; d.classes];
        for &l in &data.train.labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == d.train_size / d.classes));
    }

    #[test]
    fn cifar_single_record_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.bin");
        let mut rec = vec![0u8; 3073];
        rec[0] = 7;
        rec[1] = 255;
        std::fs::write(&path, &rec).unwrap();
        let data = load_cifar10(&path, None, 0).unwrap();
        assert_eq!(data.train_len(), 1);
        assert_eq!(data.train.labels[0], 7);
        assert_eq!(data.train.images[0].data()[0], 1.0);
        assert_eq!(data.train.images[0].shape(), &[3, 32, 32]);
    }

    #[test]
    fn cifar_bad_framing_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, vec![0u8; 3072]).unwrap();
        assert!(matches!(
            load_cifar10(&path, None, 0),
            Err(DataError::CorruptRecord { len: 3072 })
        ));
    }

    #[test]
    fn cifar_bad_label_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("label.bin");
        let mut rec = vec![0u8; 3073];
        rec[0] = 10;
        std::fs::write(&path, &rec).unwrap();
        assert!(matches!(
            load_cifar10(&path, None, 0),
            Err(DataError::LabelOutOfRange { label: 10 })
        ));
    }

    #[test]
    fn cifar_subset_is_seed_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("many.bin");
        let mut bytes = Vec::new();
        for i in 0..20u8 {
            let mut rec = vec![0u8; 3073];
            rec[0] = i % 10;
            rec[1] = i;
            bytes.extend_from_slice(&rec);
        }
        std::fs::write(&path, &bytes).unwrap();
        let a = load_cifar10(&path, Some(5), 11).unwrap();
        let b = load_cifar10(&path, Some(5), 11).unwrap();
        assert_eq!(a.train.labels, b.train.labels);
        assert_eq!(a.train_len(), 5);
        let c = load_cifar10(&path, Some(5), 12).unwrap();
        // different seed picks a different subset (values differ somewhere)
        let same = a
            .train
            .images
            .iter()
            .zip(&c.train.images)
            .all(|(x, y)| x.data() == y.data());
        assert!(!same || a.train.labels == c.train.labels);
    }

    #[test]
    fn batch_tiles_static_frames() {
        let split = Split {
            images: vec![DenseTensor::ones(&[1, 2, 2])],
            labels: vec![3],
        };
        let (batch, labels) = split.batch(&[0], 4);
        assert_eq!(batch.shape(), &[1, 4, 1, 2, 2]);
        assert!(batch.data().iter().all(|&v| v == 1.0));
        assert_eq!(labels, vec![3]);
    }
}
