//! Datasets, scenario transforms and two-task sequences.
//!
//! Images are kept as raw `u8` intensities (0..=255) and only converted to
//! normalized f64 tensors when a [`Batch`] is cut. All transforms are pure:
//! they return new datasets and never touch files.

mod fetch;
mod idx;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, CLASS_COUNT, IMAGE_SIDE};
use crate::tensor::Tensor;

pub use fetch::{default_cache_dir, fetch_dataset, load_cached, DatasetFiles, DATA_DIR_ENV};
pub use idx::load_idx;

/// Number of pixels per image.
pub const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

/// Which corpus a dataset came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Mnist,
    FashionMnist,
}

impl Source {
    /// Directory name under the cache root.
    pub fn dir_name(self) -> &'static str {
        match self {
            Source::Mnist => "mnist",
            Source::FashionMnist => "fashion_mnist",
        }
    }

    /// Public mirror used when none is given explicitly.
    pub fn default_mirror(self) -> &'static str {
        match self {
            Source::Mnist => "https://ossci-datasets.s3.amazonaws.com/mnist",
            Source::FashionMnist => {
                "https://raw.githubusercontent.com/zalandoresearch/fashion-mnist/master/data/fashion"
            }
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Mnist => "mnist",
            Source::FashionMnist => "fashion-mnist",
        })
    }
}

impl FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mnist" => Ok(Source::Mnist),
            "fashion-mnist" => Ok(Source::FashionMnist),
            other => Err(format!("unknown source {other:?} (expected mnist or fashion-mnist)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

/// A labeled image collection with 28x28 single-channel images.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    source: Source,
    split: Split,
    images: Vec<u8>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(source: Source, split: Split, images: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        if images.len() != labels.len() * PIXELS {
            return Err(Error::DatasetConsistency(format!(
                "{} labels but {} image bytes ({} per image)",
                labels.len(),
                images.len(),
                PIXELS
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= CLASS_COUNT) {
            return Err(Error::DatasetConsistency(format!(
                "label {bad} out of range 0..{CLASS_COUNT}"
            )));
        }
        Ok(Dataset {
            source,
            split,
            images,
            labels,
        })
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Raw pixel bytes of image `i`.
    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * PIXELS..(i + 1) * PIXELS]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// Examples per class.
    pub fn class_histogram(&self) -> [usize; CLASS_COUNT] {
        let mut hist = [0usize; CLASS_COUNT];
        for &l in &self.labels {
            hist[l as usize] += 1;
        }
        hist
    }

    /// Copies the chosen examples into a new dataset, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let mut images = Vec::with_capacity(indices.len() * PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Usage(format!(
                    "subset index {i} out of range for {} examples",
                    self.len()
                )));
            }
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(self.source, self.split, images, labels)
    }

    /// Cuts a normalized batch (`pixel / 255`) of the chosen examples.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut data = Vec::with_capacity(indices.len() * PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Usage(format!(
                    "batch index {i} out of range for {} examples",
                    self.len()
                )));
            }
            data.extend(self.image(i).iter().map(|&p| p as f64 / 255.0));
            labels.push(self.label(i));
        }
        let images = Tensor::new([indices.len(), IMAGE_SIDE, IMAGE_SIDE, 1], data)?;
        Batch::new(images, labels)
    }
}

/// A bijection on pixel positions, applied identically to every image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelPermutation(Vec<usize>);

impl PixelPermutation {
    pub fn identity() -> Self {
        PixelPermutation((0..PIXELS).collect())
    }

    /// A uniformly random permutation, reproducible from the seed.
    pub fn from_seed(seed: u64) -> Self {
        let mut positions: Vec<usize> = (0..PIXELS).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        positions.shuffle(&mut rng);
        PixelPermutation(positions)
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &p)| i == p)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Rearranges every image's pixels: output pixel `i` takes the value of input
/// pixel `perm[i]`.
pub fn permute_pixels(ds: &Dataset, perm: &PixelPermutation) -> Dataset {
    let mut images = vec![0u8; ds.images.len()];
    for (dst, src) in images.chunks_mut(PIXELS).zip(ds.images.chunks(PIXELS)) {
        for (i, &p) in perm.0.iter().enumerate() {
            dst[i] = src[p];
        }
    }
    Dataset {
        source: ds.source,
        split: ds.split,
        images,
        labels: ds.labels.clone(),
    }
}

/// Flips every intensity: `x -> 255 - x`. An involution.
pub fn invert_intensities(ds: &Dataset) -> Dataset {
    Dataset {
        source: ds.source,
        split: ds.split,
        images: ds.images.iter().map(|&p| 255 - p).collect(),
        labels: ds.labels.clone(),
    }
}

/// Partitions a dataset by label groups; labels keep their original values.
///
/// Groups must be disjoint; each returned dataset holds the examples whose
/// label falls in the corresponding group, in original order.
pub fn split_by_classes(ds: &Dataset, groups: &[Vec<u8>]) -> Result<Vec<Dataset>> {
    let mut owner = [usize::MAX; CLASS_COUNT];
    for (gi, group) in groups.iter().enumerate() {
        for &class in group {
            if class as usize >= CLASS_COUNT {
                return Err(Error::Usage(format!("class {class} out of range")));
            }
            if owner[class as usize] != usize::MAX {
                return Err(Error::Usage(format!(
                    "class {class} appears in more than one group"
                )));
            }
            owner[class as usize] = gi;
        }
    }
    let mut out: Vec<(Vec<u8>, Vec<u8>)> = vec![Default::default(); groups.len()];
    for i in 0..ds.len() {
        let gi = owner[ds.label(i)];
        if gi != usize::MAX {
            out[gi].0.extend_from_slice(ds.image(i));
            out[gi].1.push(ds.labels[i]);
        }
    }
    out.into_iter()
        .map(|(images, labels)| Dataset::new(ds.source, ds.split, images, labels))
        .collect()
}

/// The four continual-learning scenario families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    /// Task-incremental: MNIST then FashionMNIST, one output head per task.
    Itl,
    /// Domain-incremental: MNIST then pixel-permuted MNIST, shared head.
    IdlPermute,
    /// Domain-incremental: MNIST then intensity-inverted MNIST, shared head.
    IdlInvert,
    /// Class-incremental: disjoint MNIST class pairs, shared 10-way head.
    Icl,
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenarioKind::Itl => "itl",
            ScenarioKind::IdlPermute => "idl-permute",
            ScenarioKind::IdlInvert => "idl-invert",
            ScenarioKind::Icl => "icl",
        })
    }
}

impl FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "itl" => Ok(ScenarioKind::Itl),
            "idl-permute" => Ok(ScenarioKind::IdlPermute),
            "idl-invert" => Ok(ScenarioKind::IdlInvert),
            "icl" => Ok(ScenarioKind::Icl),
            other => Err(format!(
                "unknown scenario {other:?} (expected itl, idl-permute, idl-invert or icl)"
            )),
        }
    }
}

/// Everything needed to materialize a two-task sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    /// Scenario-level randomness (currently: the pixel permutation).
    pub permutation_seed: u64,
    /// Class groups for [`ScenarioKind::Icl`]; exactly two disjoint pairs.
    pub class_pairs: Vec<Vec<u8>>,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind, seed: u64) -> Self {
        ScenarioSpec {
            kind,
            permutation_seed: seed,
            class_pairs: vec![vec![0, 1], vec![2, 3]],
        }
    }

    /// The corpora this scenario reads.
    pub fn sources(&self) -> Vec<Source> {
        match self.kind {
            ScenarioKind::Itl => vec![Source::Mnist, Source::FashionMnist],
            _ => vec![Source::Mnist],
        }
    }
}

/// One task of a sequence: its data and the output head it trains.
#[derive(Debug, Clone)]
pub struct Task {
    pub name: String,
    pub train: Dataset,
    pub test: Dataset,
    pub head: usize,
}

/// An ordered list of tasks sharing one model.
#[derive(Debug, Clone)]
pub struct TaskSequence {
    pub spec: ScenarioSpec,
    pub tasks: Vec<Task>,
    /// Output heads the model must be built with.
    pub head_count: usize,
}

/// Materializes the two-task sequence for a scenario from cached datasets
/// under `data_dir` (see [`fetch_dataset`] for populating the cache).
pub fn build_sequence(spec: &ScenarioSpec, data_dir: &Path) -> Result<TaskSequence> {
    let (mnist_train, mnist_test) = load_cached(Source::Mnist, data_dir)?;
    let tasks = match spec.kind {
        ScenarioKind::Itl => {
            let (fash_train, fash_test) = load_cached(Source::FashionMnist, data_dir)?;
            vec![
                Task {
                    name: "mnist".into(),
                    train: mnist_train,
                    test: mnist_test,
                    head: 0,
                },
                Task {
                    name: "fashion-mnist".into(),
                    train: fash_train,
                    test: fash_test,
                    head: 1,
                },
            ]
        }
        ScenarioKind::IdlPermute => {
            let perm = PixelPermutation::from_seed(spec.permutation_seed);
            vec![
                Task {
                    name: "mnist".into(),
                    train: mnist_train.clone(),
                    test: mnist_test.clone(),
                    head: 0,
                },
                Task {
                    name: "mnist-permuted".into(),
                    train: permute_pixels(&mnist_train, &perm),
                    test: permute_pixels(&mnist_test, &perm),
                    head: 0,
                },
            ]
        }
        ScenarioKind::IdlInvert => {
            vec![
                Task {
                    name: "mnist".into(),
                    train: mnist_train.clone(),
                    test: mnist_test.clone(),
                    head: 0,
                },
                Task {
                    name: "mnist-inverted".into(),
                    train: invert_intensities(&mnist_train),
                    test: invert_intensities(&mnist_test),
                    head: 0,
                },
            ]
        }
        ScenarioKind::Icl => {
            if spec.class_pairs.len() != 2 {
                return Err(Error::Usage(format!(
                    "icl needs exactly two class groups, got {}",
                    spec.class_pairs.len()
                )));
            }
            let train_splits = split_by_classes(&mnist_train, &spec.class_pairs)?;
            let test_splits = split_by_classes(&mnist_test, &spec.class_pairs)?;
            train_splits
                .into_iter()
                .zip(test_splits)
                .zip(&spec.class_pairs)
                .map(|((train, test), classes)| Task {
                    name: format!(
                        "mnist-classes-{}",
                        classes.iter().map(u8::to_string).collect::<Vec<_>>().join("-")
                    ),
                    train,
                    test,
                    head: 0,
                })
                .collect()
        }
    };
    let head_count = tasks.iter().map(|t| t.head + 1).max().unwrap_or(1);
    Ok(TaskSequence {
        spec: spec.clone(),
        tasks,
        head_count,
    })
}
