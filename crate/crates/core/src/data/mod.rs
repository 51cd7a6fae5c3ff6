//! Dataset representation, on-disk layout, validation and synthetic generation.

pub mod format;
mod io;
mod synthetic;

use std::fmt;

pub use io::{read_dataset, write_dataset, Meta};
pub use synthetic::{generate_synthetic, planted_signatures, SyntheticSpec};

use crate::tensor::Tensor;

const NORM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    TestSeen,
    TestUnseen,
}

impl Split {
    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::TestSeen => 1,
            Split::TestUnseen => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::TestSeen),
            2 => Some(Split::TestUnseen),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClassKind {
    Seen,
    Unseen,
}

impl ClassKind {
    pub fn code(self) -> u8 {
        match self {
            ClassKind::Seen => 0,
            ClassKind::Unseen => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ClassKind::Seen),
            1 => Some(ClassKind::Unseen),
            _ => None,
        }
    }
}

/// A generalized zero-shot dataset held in memory.
///
/// `raw_attributes` is what the files store; `attributes` is the same matrix
/// with every row scaled to unit L2 norm, and is what the model consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct GzslDataset {
    pub name: String,
    /// One `D x r` matrix per sample: column `j` is region `j`.
    pub descriptors: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub raw_attributes: Tensor,
    pub attributes: Tensor,
    /// `n x d_v` semantic embedding per attribute.
    pub embeddings: Tensor,
    pub class_kinds: Vec<ClassKind>,
    pub splits: Vec<Split>,
    pub spec: Option<SyntheticSpec>,
    /// For synthetic data: `ground_truth[sample][attribute]` is the planted
    /// region, or -1 when the attribute is inactive for that sample's class.
    pub ground_truth: Option<Vec<Vec<i64>>>,
}

impl GzslDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_kinds.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.cols()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn raw_dim(&self) -> usize {
        self.descriptors.first().map_or(0, Tensor::rows)
    }

    pub fn regions(&self) -> usize {
        self.descriptors.first().map_or(0, Tensor::cols)
    }

    pub fn classes_of(&self, kind: ClassKind) -> Vec<usize> {
        (0..self.num_classes())
            .filter(|&k| self.class_kinds[k] == kind)
            .collect()
    }

    pub fn seen_classes(&self) -> Vec<usize> {
        self.classes_of(ClassKind::Seen)
    }

    pub fn unseen_classes(&self) -> Vec<usize> {
        self.classes_of(ClassKind::Unseen)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Recomputes `attributes` from `raw_attributes`.
    pub fn renormalize(&mut self) {
        self.attributes = normalize_rows(&self.raw_attributes);
    }

    pub fn validate(&self) -> Vec<Violation> {
        validate_dataset(self)
    }
}

/// Scales each row to unit L2 norm; all-zero rows are left as they are.
pub fn normalize_rows(m: &Tensor) -> Tensor {
    let mut out = m.clone();
    let cols = m.cols();
    for row in out.data_mut().chunks_mut(cols) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Shape(String),
    LabelOutOfRange { sample: usize, label: usize },
    TrainSampleNotSeen { sample: usize, label: usize },
    TestSeenSampleNotSeen { sample: usize, label: usize },
    TestUnseenSampleNotUnseen { sample: usize, label: usize },
    ClassWithoutTestSample { class: usize },
    SeenClassWithoutTrainSample { class: usize },
    AttributeRowNotNormalized { class: usize, norm: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape(msg) => write!(f, "shape: {msg}"),
            Violation::LabelOutOfRange { sample, label } => {
                write!(f, "sample {sample}: label {label} out of range")
            }
            Violation::TrainSampleNotSeen { sample, label } => {
                write!(f, "train sample {sample} carries non-seen class {label}")
            }
            Violation::TestSeenSampleNotSeen { sample, label } => {
                write!(f, "test_seen sample {sample} carries non-seen class {label}")
            }
            Violation::TestUnseenSampleNotUnseen { sample, label } => {
                write!(f, "test_unseen sample {sample} carries non-unseen class {label}")
            }
            Violation::ClassWithoutTestSample { class } => {
                write!(f, "class {class} has no test sample")
            }
            Violation::SeenClassWithoutTrainSample { class } => {
                write!(f, "seen class {class} has no train sample")
            }
            Violation::AttributeRowNotNormalized { class, norm } => {
                write!(f, "attribute row of class {class} has norm {norm}, expected 1")
            }
        }
    }
}

/// Lists every broken dataset invariant; empty means the dataset is valid.
pub fn validate_dataset(d: &GzslDataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let k = d.num_classes();
    let n = d.len();

    if d.splits.len() != n {
        out.push(Violation::Shape(format!("{} splits for {n} samples", d.splits.len())));
    }
    if d.descriptors.len() != n {
        out.push(Violation::Shape(format!(
            "{} descriptors for {n} samples",
            d.descriptors.len()
        )));
    }
    if let Some(first) = d.descriptors.first() {
        if let Some(i) = d.descriptors.iter().position(|x| x.shape() != first.shape()) {
            out.push(Violation::Shape(format!("sample {i} descriptor shape differs")));
        }
    }
    if d.attributes.shape().len() != 2 || d.attributes.rows() != k {
        out.push(Violation::Shape(format!(
            "attribute matrix {:?} for {k} classes",
            d.attributes.shape()
        )));
    }
    if d.embeddings.rows() != d.num_attributes() {
        out.push(Violation::Shape(format!(
            "{} embeddings for {} attributes",
            d.embeddings.rows(),
            d.num_attributes()
        )));
    }
    if !out.is_empty() {
        return out;
    }

    let mut has_train = vec![false; k];
    let mut has_test = vec![false; k];
    for (i, (&label, &split)) in d.labels.iter().zip(&d.splits).enumerate() {
        if label >= k {
            out.push(Violation::LabelOutOfRange { sample: i, label });
            continue;
        }
        let kind = d.class_kinds[label];
        match split {
            Split::Train => {
                has_train[label] = true;
                if kind != ClassKind::Seen {
                    out.push(Violation::TrainSampleNotSeen { sample: i, label });
                }
            }
            Split::TestSeen => {
                has_test[label] = true;
                if kind != ClassKind::Seen {
                    out.push(Violation::TestSeenSampleNotSeen { sample: i, label });
                }
            }
            Split::TestUnseen => {
                has_test[label] = true;
                if kind != ClassKind::Unseen {
                    out.push(Violation::TestUnseenSampleNotUnseen { sample: i, label });
                }
            }
        }
    }
    for class in 0..k {
        if !has_test[class] {
            out.push(Violation::ClassWithoutTestSample { class });
        }
        if d.class_kinds[class] == ClassKind::Seen && !has_train[class] {
            out.push(Violation::SeenClassWithoutTrainSample { class });
        }
        let norm = d.attributes.row(class).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            out.push(Violation::AttributeRowNotNormalized { class, norm });
        }
    }
    out
}
