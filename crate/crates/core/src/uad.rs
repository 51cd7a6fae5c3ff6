//! Unseen-aware distillation.
//!
//! The teacher's class activation maps (gradients of its classification loss
//! with respect to its region features) for a sample's own class and for the
//! unseen classes whose attributes sit closest to that class are merged, then
//! reduced to one weight per region using the student's attention. The
//! student's features are pulled toward the teacher's in proportion to those
//! weights.

use std::cmp::Ordering;

use crate::arc::{self, ArcModel, ArcVars};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// For every seen class `k`, the unseen classes that picked `k` among their
/// `m` nearest seen classes by attribute distance.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilaritySets {
    pub m: usize,
    /// Indexed by class id; unseen classes map to an empty list.
    pub sets: Vec<Vec<usize>>,
}

impl SimilaritySets {
    pub fn get(&self, class: usize) -> &[usize] {
        self.sets.get(class).map_or(&[], Vec::as_slice)
    }

    pub fn total(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Selects, for each unseen class, the `m` seen classes with the smallest
/// Euclidean attribute distance (lower class id wins ties) and inverts the
/// selection into per-seen-class sets.
pub fn build_similarity_sets(
    attributes: &Tensor,
    seen: &[usize],
    unseen: &[usize],
    m: usize,
) -> Result<SimilaritySets> {
    if m == 0 || m > seen.len() {
        return Err(Error::Config(format!(
            "m = {m} must lie in 1..={} (number of seen classes)",
            seen.len()
        )));
    }
    let mut sets = vec![Vec::new(); attributes.rows()];
    for &u in unseen {
        let mut ranked: Vec<(f64, usize)> = seen
            .iter()
            .map(|&k| (euclidean(attributes.row(u), attributes.row(k)), k))
            .collect();
        ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
        for &(_, k) in &ranked[..m] {
            sets[k].push(u);
        }
    }
    for s in &mut sets {
        s.sort_unstable();
    }
    Ok(SimilaritySets { m, sets })
}

/// Min-max normalization over every entry. A constant tensor maps to zeros.
pub fn min_max_normalize(t: &Tensor) -> Tensor {
    let (lo, hi) = (t.min(), t.max());
    let range = hi - lo;
    if !(range > 0.0) {
        return Tensor::zeros(t.shape());
    }
    t.map(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

/// Raw gradients of the teacher's classification loss with respect to the
/// teacher's region features `f_t`, one per target class.
pub fn feature_gradients(
    teacher: &ArcModel,
    f_t: &Tensor,
    v: &Tensor,
    a: &Tensor,
    classes: &[usize],
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let vars = ArcVars::bind(&mut g, teacher, false);
    let f = g.param(f_t.clone());
    let (v, a) = (g.constant(v.clone()), g.constant(a.clone()));
    let p = arc::attention_scores(&mut g, f, v, vars.w1)?;
    let z = arc::class_logits(&mut g, f, p, v, vars.w2, a)?;
    classes
        .iter()
        .map(|&c| {
            let loss = arc::ce_loss(&mut g, z, c)?;
            Ok(g.backward(loss, &[f])?.remove(0))
        })
        .collect()
}

/// Normalized activation maps `tau(dL_CE(c)/df_t)` of the teacher for each class.
pub fn class_activation_maps(
    teacher: &ArcModel,
    x: &Tensor,
    v: &Tensor,
    a: &Tensor,
    classes: &[usize],
) -> Result<Vec<Tensor>> {
    let f_t = teacher.features(x)?;
    Ok(feature_gradients(teacher, &f_t, v, a, classes)?
        .iter()
        .map(min_max_normalize)
        .collect())
}

pub fn cam(teacher: &ArcModel, x: &Tensor, v: &Tensor, a: &Tensor, class: usize) -> Result<Tensor> {
    if class >= a.rows() {
        return Err(Error::contract(format!("class {class} out of range")));
    }
    Ok(class_activation_maps(teacher, x, v, a, &[class])?.remove(0))
}

/// `tau(own + mean(similar))`; the mean term is dropped when `similar` is empty.
pub fn combine_maps(own: &Tensor, similar: &[Tensor]) -> Result<Tensor> {
    if similar.is_empty() {
        return Ok(min_max_normalize(own));
    }
    let d = similar.len() as f64;
    let mut sum = own.clone();
    for m in similar {
        own.same_shape("combine_maps", m)?;
        for (s, &v) in sum.data_mut().iter_mut().zip(m.data()) {
            *s += v / d;
        }
    }
    Ok(min_max_normalize(&sum))
}

/// Activation map for a training sample of seen class `class`, merged with the
/// maps of the unseen classes in that class's similarity set.
pub fn unseen_aware_map(
    teacher: &ArcModel,
    x: &Tensor,
    v: &Tensor,
    a: &Tensor,
    class: usize,
    sets: &SimilaritySets,
) -> Result<Tensor> {
    let mut classes = vec![class];
    classes.extend_from_slice(sets.get(class));
    let maps = class_activation_maps(teacher, x, v, a, &classes)?;
    combine_maps(&maps[0], &maps[1..])
}

/// One weight in `[0, 1]` per region.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionWeight(pub Vec<f64>);

impl RegionWeight {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `w_j = mean_c g[c, j] * max_i p_hat[i, j]`.
pub fn attribute_reweight(map: &Tensor, p_hat: &Tensor) -> Result<RegionWeight> {
    if map.shape().len() != 2 || p_hat.shape().len() != 2 || map.cols() != p_hat.cols() {
        return Err(Error::Dimension {
            op: "attribute_reweight",
            lhs: map.shape().to_vec(),
            rhs: p_hat.shape().to_vec(),
        });
    }
    let (channels, regions) = (map.rows(), map.cols());
    let weights = (0..regions)
        .map(|j| {
            let mean = (0..channels).map(|c| map.at(c, j)).sum::<f64>() / channels as f64;
            let peak = (0..p_hat.rows()).map(|i| p_hat.at(i, j)).fold(f64::NEG_INFINITY, f64::max);
            mean * peak
        })
        .collect();
    Ok(RegionWeight(weights))
}

/// `(1/r) sum_j w_j mean_c (f_s[c, j] - f_t[c, j])^2`. Only `f_s` carries
/// gradient; the teacher features and weights enter as constants.
pub fn uad_loss(g: &mut Graph, f_s: Var, f_t: &Tensor, w: &RegionWeight) -> Result<Var> {
    let fs_shape = g.value(f_s).shape().to_vec();
    if fs_shape != f_t.shape() || fs_shape.len() != 2 || w.0.len() != fs_shape[1] {
        return Err(Error::Dimension {
            op: "uad_loss",
            lhs: fs_shape,
            rhs: f_t.shape().to_vec(),
        });
    }
    let regions = fs_shape[1];
    let target = g.constant(f_t.clone());
    let diff = g.sub(f_s, target)?;
    let sq = g.mul(diff, diff)?;
    let per_region = g.mean_axis(sq, 0)?;
    let weights = g.constant(Tensor::vector(w.0.clone()));
    let weighted = g.mul(per_region, weights)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, 1.0 / regions as f64))
}
