//! Attribute-guided learning: a pool of per-attribute visual prototypes that
//! is seeded from teacher features, mixed with batch prototypes from the
//! student at every step, and scored against class attributes.

use crate::arc::ArcModel;
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Graph, Tensor, Var};

pub const LAMBDA_INIT: f64 = 0.9;

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Prototype matrix `h` (`n x C`) and the mixing logit; `lambda = sigmoid(theta)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributePool {
    pub h: Tensor,
    pub theta: f64,
    pub initialized: bool,
}

impl AttributePool {
    pub fn new(attributes: usize, channels: usize) -> Self {
        AttributePool {
            h: Tensor::zeros(&[attributes, channels]),
            theta: logit(LAMBDA_INIT),
            initialized: false,
        }
    }

    pub fn lambda(&self) -> f64 {
        sigmoid(self.theta)
    }

    /// Seeds the pool from the teacher's features over the whole train set.
    /// May run only once.
    pub fn init_from_teacher<'a>(
        &mut self,
        teacher: &ArcModel,
        samples: impl IntoIterator<Item = &'a Tensor>,
        v: &Tensor,
    ) -> Result<()> {
        if self.initialized {
            return Err(Error::contract("attribute pool is already initialized"));
        }
        let mut features = Vec::new();
        let mut scores = Vec::new();
        for x in samples {
            features.push(teacher.features(x)?);
            scores.push(teacher.scores(x, v)?);
        }
        self.h = peak_region_prototypes(&features, &scores)?;
        self.initialized = true;
        Ok(())
    }
}

/// For each attribute `i`: the average, over samples, of the feature of the
/// region where `i` scores highest, weighted by that highest score. Ties go to
/// the lowest region index.
pub fn peak_region_prototypes(features: &[Tensor], scores: &[Tensor]) -> Result<Tensor> {
    let first = features
        .first()
        .ok_or_else(|| Error::contract("prototype initialization needs at least one sample"))?;
    if features.len() != scores.len() {
        return Err(Error::contract("features and scores differ in length"));
    }
    let channels = first.rows();
    let attributes = scores[0].rows();
    let mut num = Tensor::zeros(&[attributes, channels]);
    let mut den = vec![0.0; attributes];
    for (f, p) in features.iter().zip(scores) {
        if f.cols() != p.cols() || f.rows() != channels || p.rows() != attributes {
            return Err(Error::Dimension {
                op: "peak_region_prototypes",
                lhs: f.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        for i in 0..attributes {
            let row = p.row(i);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            let weight = row[best];
            den[i] += weight;
            for c in 0..channels {
                let cur = num.at(i, c);
                num.set(i, c, cur + weight * f.at(c, best));
            }
        }
    }
    for (i, d) in den.iter().enumerate() {
        for c in 0..channels {
            let cur = num.at(i, c);
            num.set(i, c, cur / d);
        }
    }
    Ok(num)
}

/// Batch prototypes `h_bar` (`n x C`): per sample, the attention-weighted mean
/// of region features for every attribute, then averaged over the batch.
///
/// With `literal` set, each sample contributes the plain sum of its region
/// features instead (the weights cancel).
pub fn batch_prototypes(g: &mut Graph, features: &[Var], scores: &[Var], literal: bool) -> Result<Var> {
    if features.is_empty() || features.len() != scores.len() {
        return Err(Error::contract("batch_prototypes needs matching non-empty batches"));
    }
    let mut protos = Vec::with_capacity(features.len());
    for (&f, &p) in features.iter().zip(scores) {
        let (attributes, channels) = (g.value(p).rows(), g.value(f).rows());
        let proto = if literal {
            let summed = g.sum_axis(f, 1)?;
            g.broadcast(summed, 0, attributes)?
        } else {
            let ft = g.transpose(f)?;
            let weighted = g.matmul(p, ft)?;
            let mass = g.sum_axis(p, 1)?;
            let mass = g.broadcast(mass, 1, channels)?;
            g.div(weighted, mass)?
        };
        protos.push(proto);
    }
    let total = g.add_n(&protos)?;
    Ok(g.scale(total, 1.0 / features.len() as f64))
}

/// `h' = lambda * h + (1 - lambda) * h_bar` with `lambda = sigmoid(theta)`.
pub fn update_pool(g: &mut Graph, h: Var, theta: Var, h_bar: Var) -> Result<Var> {
    let lambda = g.sigmoid(theta);
    let keep = g.scalar_mul(lambda, h)?;
    let rest = g.affine(lambda, -1.0, 1.0);
    let fresh = g.scalar_mul(rest, h_bar)?;
    g.add(keep, fresh)
}

/// Class logits `q_k = a_k . (h' w_p)`.
pub fn agl_logits(g: &mut Graph, pool: Var, a: Var, w_p: Var) -> Result<Var> {
    let channels = g.value(w_p).numel();
    let col = g.reshape(w_p, &[channels, 1])?;
    let projected = g.matmul(pool, col)?;
    let q = g.matmul(a, projected)?;
    let k = g.value(q).numel();
    g.reshape(q, &[k])
}

pub fn agl_loss(g: &mut Graph, pool: Var, a: Var, w_p: Var, target: usize) -> Result<Var> {
    let q = agl_logits(g, pool, a, w_p)?;
    g.cross_entropy(q, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn softmax_rows(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        crate::tensor::softmax(&random(rng, shape), 1).unwrap()
    }

    #[test]
    fn init_single_sample_single_region() {
        let f = Tensor::from_rows(&[vec![0.5], vec![-2.0], vec![3.0]]).unwrap();
        let p = Tensor::full(&[4, 1], 1.0);
        let h = peak_region_prototypes(std::slice::from_ref(&f), &[p]).unwrap();
        for i in 0..4 {
            assert_eq!(h.row(i), f.data());
        }
    }

    #[test]
    fn init_equal_peaks_average_features() {
        let f1 = Tensor::from_rows(&[vec![1.0, 9.0], vec![2.0, 9.0]]).unwrap();
        let f2 = Tensor::from_rows(&[vec![7.0, 3.0], vec![7.0, 5.0]]).unwrap();
        let p1 = Tensor::from_rows(&[vec![0.8, 0.2]]).unwrap();
        let p2 = Tensor::from_rows(&[vec![0.2, 0.8]]).unwrap();
        let h = peak_region_prototypes(&[f1, f2], &[p1, p2]).unwrap();
        assert!((h.at(0, 0) - 2.0).abs() < 1e-15);
        assert!((h.at(0, 1) - 3.5).abs() < 1e-15);
    }

    #[test]
    fn init_runs_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let teacher = ArcModel::init(&mut rng, 5, 3, 4);
        let xs = vec![random(&mut rng, &[5, 2])];
        let v = random(&mut rng, &[6, 4]);
        let mut pool = AttributePool::new(6, 3);
        pool.init_from_teacher(&teacher, &xs, &v).unwrap();
        assert!((pool.lambda() - 0.9).abs() < 1e-15);
        assert!(matches!(
            pool.init_from_teacher(&teacher, &xs, &v),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn uniform_scores_average_regions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random(&mut rng, &[3, 4]);
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let pv = g.constant(Tensor::full(&[5, 4], 0.25));
        let h = batch_prototypes(&mut g, &[fv], &[pv], false).unwrap();
        let h = g.value(h);
        for i in 0..5 {
            for c in 0..3 {
                let mean = f.row(c).iter().sum::<f64>() / 4.0;
                assert!((h.at(i, c) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_region_prototype_is_the_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random(&mut rng, &[3, 1]);
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let pv = g.constant(Tensor::full(&[2, 1], 1.0));
        let h = batch_prototypes(&mut g, &[fv], &[pv], false).unwrap();
        for i in 0..2 {
            assert_eq!(g.value(h).row(i), f.data());
        }
    }

    #[test]
    fn literal_variant_sums_regions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random(&mut rng, &[3, 4]);
        let p = softmax_rows(&mut rng, &[2, 4]);
        let mut g = Graph::new();
        let (fv, pv) = (g.constant(f.clone()), g.constant(p));
        let h = batch_prototypes(&mut g, &[fv], &[pv], true).unwrap();
        for c in 0..3 {
            let s: f64 = f.row(c).iter().sum();
            assert!((g.value(h).at(1, c) - s).abs() < 1e-15);
        }
    }

    fn mix(h: &Tensor, theta: f64, h_bar: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let (hv, tv, bv) = (
            g.param(h.clone()),
            g.param(Tensor::scalar(theta)),
            g.constant(h_bar.clone()),
        );
        let out = update_pool(&mut g, hv, tv, bv).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn update_pool_direct_arithmetic() {
        let h = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let h_bar = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let out = mix(&h, logit(0.9), &h_bar);
        assert!((out.at(0, 0) - 0.9).abs() < 1e-15);
        assert!((out.at(0, 1) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn update_pool_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random(&mut rng, &[3, 2]);
        let h_bar = random(&mut rng, &[3, 2]);
        let out = mix(&h, 20.0, &h_bar);
        let gap = h_bar.zip_map(&h, |a, b| a - b).unwrap().max_abs();
        let dev = out.zip_map(&h, |a, b| a - b).unwrap().max_abs();
        assert!(dev <= 1e-7 * gap);
        let fixed = mix(&h, -1.3, &h);
        for (a, b) in fixed.data().iter().zip(h.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_projection_gives_uniform_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let pool = g.constant(random(&mut rng, &[4, 3]));
        let a = g.constant(random(&mut rng, &[6, 4]));
        let wp = g.param(Tensor::zeros(&[3]));
        let l = agl_loss(&mut g, pool, a, wp, 2).unwrap();
        assert!((g.value(l).item() - 6f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn aligned_coordinate_lowers_loss() {
        // K = 2, one-hot class attributes; growing the projected score of
        // attribute 0 favors class 0.
        let a = Tensor::identity(2);
        let mut last = f64::INFINITY;
        for s in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let mut g = Graph::new();
            let pool = g.constant(Tensor::from_rows(&[vec![s], vec![0.0]]).unwrap());
            let av = g.constant(a.clone());
            let wp = g.constant(Tensor::vector(vec![1.0]));
            let l = agl_loss(&mut g, pool, av, wp, 0).unwrap();
            let v = g.value(l).item();
            assert!(v < last);
            last = v;
        }
    }
}
