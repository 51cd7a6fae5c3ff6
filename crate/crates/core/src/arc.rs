//! Attribute-region classifier: a per-region feature head, attribute-region
//! attention and attribute-weighted class logits.
//!
//! Shapes used throughout:
//!
//! * `x`: `D x r` raw region descriptors
//! * `f`: `C x r` region features
//! * `v`: `n x d_v` attribute embeddings
//! * `w1`, `w2`: `d_v x C`
//! * `p`: `n x r` attention, each row a softmax over regions
//! * `a`: `K x n` class attributes

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Affine map `D -> C` shared by every region, followed by softplus.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureHead {
    /// `C x D`
    pub weight: Tensor,
    /// `C`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArcParams {
    pub w1: Tensor,
    pub w2: Tensor,
}

/// One full classifier; the trainer keeps a student and a teacher copy.
#[derive(Clone, Debug, PartialEq)]
pub struct ArcModel {
    pub head: FeatureHead,
    pub arc: ArcParams,
}

pub const PARAM_NAMES: [&str; 4] = ["head_weight", "head_bias", "w1", "w2"];

impl ArcModel {
    pub fn init(rng: &mut impl Rng, raw_dim: usize, channels: usize, d_v: usize) -> Self {
        let mut gauss = |shape: &[usize], std: f64| {
            let n = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect(),
            )
            .expect("valid shape")
        };
        let head_std = 1.0 / (raw_dim as f64).sqrt();
        let arc_std = 1.0 / (channels as f64).sqrt();
        ArcModel {
            head: FeatureHead {
                weight: gauss(&[channels, raw_dim], head_std),
                bias: Tensor::zeros(&[channels]),
            },
            arc: ArcParams {
                w1: gauss(&[d_v, channels], arc_std),
                w2: gauss(&[d_v, channels], arc_std),
            },
        }
    }

    pub fn channels(&self) -> usize {
        self.head.weight.rows()
    }

    pub fn raw_dim(&self) -> usize {
        self.head.weight.cols()
    }

    pub fn embedding_dim(&self) -> usize {
        self.arc.w1.rows()
    }

    /// Parameters in [`PARAM_NAMES`] order.
    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.head.weight, &self.head.bias, &self.arc.w1, &self.arc.w2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.head.weight,
            &mut self.head.bias,
            &mut self.arc.w1,
            &mut self.arc.w2,
        ]
    }

    pub fn from_tensors([weight, bias, w1, w2]: [Tensor; 4]) -> Self {
        ArcModel {
            head: FeatureHead { weight, bias },
            arc: ArcParams { w1, w2 },
        }
    }

    /// Attribute-region scores `p` for one sample, outside any training graph.
    pub fn scores(&self, x: &Tensor, v: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = ArcVars::bind(&mut g, self, false);
        let (x, v) = (g.constant(x.clone()), g.constant(v.clone()));
        let f = extract(&mut g, &vars, x)?;
        let p = attention_scores(&mut g, f, v, vars.w1)?;
        Ok(g.value(p).clone())
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = ArcVars::bind(&mut g, self, false);
        let x = g.constant(x.clone());
        let f = extract(&mut g, &vars, x)?;
        Ok(g.value(f).clone())
    }

    /// Class logits over every row of `a`.
    pub fn logits(&self, x: &Tensor, v: &Tensor, a: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = ArcVars::bind(&mut g, self, false);
        let (x, v, a) = (
            g.constant(x.clone()),
            g.constant(v.clone()),
            g.constant(a.clone()),
        );
        let out = forward(&mut g, &vars, x, v, a)?;
        Ok(g.value(out.logits).data().to_vec())
    }
}

/// Graph handles for the four classifier tensors.
#[derive(Clone, Copy, Debug)]
pub struct ArcVars {
    pub head_weight: Var,
    pub head_bias: Var,
    pub w1: Var,
    pub w2: Var,
}

impl ArcVars {
    pub fn bind(g: &mut Graph, model: &ArcModel, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        ArcVars {
            head_weight: leaf(&model.head.weight),
            head_bias: leaf(&model.head.bias),
            w1: leaf(&model.arc.w1),
            w2: leaf(&model.arc.w2),
        }
    }

    /// In [`PARAM_NAMES`] order.
    pub fn all(&self) -> [Var; 4] {
        [self.head_weight, self.head_bias, self.w1, self.w2]
    }
}

/// `f = softplus(W x + b)` applied region by region.
pub fn extract(g: &mut Graph, vars: &ArcVars, x: Var) -> Result<Var> {
    let regions = g.value(x).cols();
    let lin = g.matmul(vars.head_weight, x)?;
    let bias = g.broadcast(vars.head_bias, 1, regions)?;
    let pre = g.add(lin, bias)?;
    Ok(g.softplus(pre))
}

/// `p[i, j] = softmax_j(v_i w1 f_j)`.
pub fn attention_scores(g: &mut Graph, f: Var, v: Var, w1: Var) -> Result<Var> {
    let vw = g.matmul(v, w1)?;
    let logits = g.matmul(vw, f)?;
    g.softmax(logits, 1)
}

/// Attribute evidence `s_i = sum_j (v w2 f)[i, j] p[i, j]`, an `n`-vector.
pub fn attribute_evidence(g: &mut Graph, f: Var, p: Var, v: Var, w2: Var) -> Result<Var> {
    let vw = g.matmul(v, w2)?;
    let vwf = g.matmul(vw, f)?;
    let weighted = g.mul(vwf, p)?;
    g.sum_axis(weighted, 1)
}

/// `z_k = a_k . s` for every class row of `a`.
pub fn class_logits(g: &mut Graph, f: Var, p: Var, v: Var, w2: Var, a: Var) -> Result<Var> {
    let s = attribute_evidence(g, f, p, v, w2)?;
    let n = g.value(s).numel();
    let col = g.reshape(s, &[n, 1])?;
    let z = g.matmul(a, col)?;
    let k = g.value(z).numel();
    g.reshape(z, &[k])
}

pub fn ce_loss(g: &mut Graph, z: Var, target: usize) -> Result<Var> {
    g.cross_entropy(z, target)
}

/// Nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub features: Var,
    pub scores: Var,
    pub logits: Var,
}

pub fn forward(g: &mut Graph, vars: &ArcVars, x: Var, v: Var, a: Var) -> Result<Forward> {
    let features = extract(g, vars, x)?;
    let scores = attention_scores(g, features, v, vars.w1)?;
    let logits = class_logits(g, features, scores, v, vars.w2, a)?;
    Ok(Forward {
        features,
        scores,
        logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softplus;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn model(rng: &mut ChaCha8Rng, d: usize, c: usize, dv: usize) -> ArcModel {
        ArcModel::init(rng, d, c, dv)
    }

    #[test]
    fn zero_head_gives_constant_softplus() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = model(&mut rng, 5, 3, 4);
        m.head.weight = Tensor::zeros(&[3, 5]);
        let f = m.features(&random(&mut rng, &[5, 2])).unwrap();
        assert!(f.data().iter().all(|&v| v == softplus(0.0)));
    }

    #[test]
    fn single_region_is_plain_affine_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = model(&mut rng, 4, 3, 2);
        m.head.bias = random(&mut rng, &[3]);
        let x = random(&mut rng, &[4, 1]);
        let f = m.features(&x).unwrap();
        for c in 0..3 {
            let pre: f64 = (0..4).map(|d| m.head.weight.at(c, d) * x.data()[d]).sum::<f64>()
                + m.head.bias.data()[c];
            assert!((f.data()[c] - softplus(pre)).abs() < 1e-14);
        }
        let p = m.scores(&x, &random(&mut rng, &[6, 2])).unwrap();
        assert_eq!(p.shape(), &[6, 1]);
        assert!(p.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_w1_gives_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = model(&mut rng, 4, 3, 2);
        m.arc.w1 = Tensor::zeros(&[2, 3]);
        let p = m.scores(&random(&mut rng, &[4, 5]), &random(&mut rng, &[6, 2])).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn zero_w2_gives_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = model(&mut rng, 4, 3, 2);
        m.arc.w2 = Tensor::zeros(&[2, 3]);
        let z = m
            .logits(&random(&mut rng, &[4, 5]), &random(&mut rng, &[6, 2]), &random(&mut rng, &[7, 6]))
            .unwrap();
        assert_eq!(z, vec![0.0; 7]);
    }

    #[test]
    fn one_hot_class_selects_attribute_evidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = model(&mut rng, 4, 3, 2);
        let x = random(&mut rng, &[4, 5]);
        let v = random(&mut rng, &[6, 2]);
        let mut a = Tensor::zeros(&[2, 6]);
        a.set(0, 4, 1.0);
        a.set(1, 1, 1.0);
        let mut g = Graph::new();
        let vars = ArcVars::bind(&mut g, &m, false);
        let (xv, vv, av) = (g.constant(x), g.constant(v), g.constant(a));
        let out = forward(&mut g, &vars, xv, vv, av).unwrap();
        let s = attribute_evidence(&mut g, out.features, out.scores, vv, vars.w2).unwrap();
        let (s, z) = (g.value(s).data().to_vec(), g.value(out.logits).data().to_vec());
        assert_eq!(z, vec![s[4], s[1]]);
    }

    #[test]
    fn ce_uniform_and_limit() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::full(&[7], 0.3));
        let l = ce_loss(&mut g, z, 2).unwrap();
        assert!((g.value(l).item() - 7f64.ln()).abs() < 1e-14);

        let mut prev = f64::INFINITY;
        for big in [1.0, 5.0, 10.0, 25.0, 50.0] {
            let mut z = vec![0.0; 4];
            z[1] = big;
            let mut g = Graph::new();
            let zv = g.constant(Tensor::vector(z));
            let lv = ce_loss(&mut g, zv, 1).unwrap();
            let l = g.value(lv).item();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
    }
}
