//! ZSL and GZSL evaluation: per-class top-1 accuracy and the harmonic mean.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::arc::ArcModel;
use crate::data::{ClassKind, GzslDataset, Split};
use crate::error::{Error, Result};
use crate::par::parallel_map;
use crate::tensor::Tensor;

/// Anything that scores a sample against every class.
pub trait LogitSource: Sync {
    fn logits(&self, x: &Tensor) -> Result<Vec<f64>>;
}

/// Class logits of an attribute-region classifier.
pub struct ModelScorer<'a> {
    pub model: &'a ArcModel,
    pub embeddings: &'a Tensor,
    pub attributes: &'a Tensor,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a ArcModel, dataset: &'a GzslDataset) -> Self {
        ModelScorer {
            model,
            embeddings: &dataset.embeddings,
            attributes: &dataset.attributes,
        }
    }
}

impl LogitSource for ModelScorer<'_> {
    fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.model.logits(x, self.embeddings, self.attributes)
    }
}

/// Argmax of `logits` restricted to `subset`; ties resolve to the lowest class.
pub fn predict(logits: &[f64], subset: &[usize]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for &c in subset {
        let z = *logits
            .get(c)
            .ok_or_else(|| Error::contract(format!("class {c} has no logit")))?;
        best = match best {
            Some(b) if logits[b] > z || (logits[b] == z && b < c) => Some(b),
            _ => Some(c),
        };
    }
    best.ok_or_else(|| Error::contract("prediction over an empty class subset"))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    PerClass,
    /// Diagnostic only: pools every test sample of a setting together.
    PerSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub kind: String,
    pub samples: usize,
    /// Top-1 accuracy with prediction over all classes.
    pub gzsl: f64,
    /// Top-1 accuracy with prediction over unseen classes only.
    pub zsl: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub struct GzslMetrics {
    pub t: f64,
    pub u: f64,
    pub s: f64,
    pub h: f64,
    #[serde(rename = "per_class")]
    pub per_class: BTreeMap<usize, ClassAccuracy>,
}

pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u > 0.0 {
        2.0 * s * u / (s + u)
    } else {
        0.0
    }
}

#[derive(Default, Clone, Copy)]
struct Tally {
    total: usize,
    gzsl_hits: usize,
    zsl_hits: usize,
}

pub fn evaluate(
    source: &dyn LogitSource,
    dataset: &GzslDataset,
    averaging: Averaging,
    threads: usize,
) -> Result<GzslMetrics> {
    let all: Vec<usize> = (0..dataset.num_classes()).collect();
    let unseen = dataset.unseen_classes();
    let test: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.splits[i] != Split::Train)
        .collect();

    let predictions = parallel_map(&test, threads, |&i| -> Result<(usize, Option<usize>)> {
        let z = source.logits(&dataset.descriptors[i])?;
        let gzsl = predict(&z, &all)?;
        let zsl = if dataset.class_kinds[dataset.labels[i]] == ClassKind::Unseen {
            Some(predict(&z, &unseen)?)
        } else {
            None
        };
        Ok((gzsl, zsl))
    });

    let mut tallies = vec![Tally::default(); dataset.num_classes()];
    for (&i, pred) in test.iter().zip(predictions) {
        let (gzsl, zsl) = pred?;
        let label = dataset.labels[i];
        let t = &mut tallies[label];
        t.total += 1;
        t.gzsl_hits += usize::from(gzsl == label);
        t.zsl_hits += usize::from(zsl == Some(label));
    }

    let mut per_class = BTreeMap::new();
    for (class, t) in tallies.iter().enumerate() {
        if t.total == 0 {
            return Err(Error::contract(format!("class {class} has no test samples")));
        }
        let kind = dataset.class_kinds[class];
        per_class.insert(
            class,
            ClassAccuracy {
                kind: match kind {
                    ClassKind::Seen => "seen".into(),
                    ClassKind::Unseen => "unseen".into(),
                },
                samples: t.total,
                gzsl: t.gzsl_hits as f64 / t.total as f64,
                zsl: (kind == ClassKind::Unseen).then(|| t.zsl_hits as f64 / t.total as f64),
            },
        );
    }

    let setting = |kind: ClassKind, hits: fn(&Tally) -> usize| -> f64 {
        let classes: Vec<&Tally> = tallies
            .iter()
            .enumerate()
            .filter(|(c, _)| dataset.class_kinds[*c] == kind)
            .map(|(_, t)| t)
            .collect();
        if classes.is_empty() {
            return 0.0;
        }
        match averaging {
            Averaging::PerClass => {
                classes.iter().map(|t| hits(t) as f64 / t.total as f64).sum::<f64>()
                    / classes.len() as f64
            }
            Averaging::PerSample => {
                classes.iter().map(|t| hits(t)).sum::<usize>() as f64
                    / classes.iter().map(|t| t.total).sum::<usize>() as f64
            }
        }
    };
    let t = setting(ClassKind::Unseen, |t| t.zsl_hits);
    let u = setting(ClassKind::Unseen, |t| t.gzsl_hits);
    let s = setting(ClassKind::Seen, |t| t.gzsl_hits);
    Ok(GzslMetrics {
        t,
        u,
        s,
        h: harmonic_mean(s, u),
        per_class,
    })
}

impl GzslMetrics {
    /// One row per class: `class,kind,samples,gzsl_accuracy,zsl_accuracy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,kind,samples,gzsl_accuracy,zsl_accuracy\n");
        for (class, acc) in &self.per_class {
            let zsl = acc.zsl.map(|z| z.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{class},{},{},{},{zsl}", acc.kind, acc.samples, acc.gzsl);
        }
        out
    }
}
