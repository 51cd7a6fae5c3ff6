use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{normalize_rows, ClassKind, GzslDataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fraction of each seen class's samples assigned to the train split.
const TRAIN_FRACTION: f64 = 0.8;
const MAX_REDRAWS: usize = 10_000;

/// Parameters of a synthetic dataset with planted attribute-region structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub k_seen: usize,
    /// May be zero for degenerate single-split fixtures.
    pub k_unseen: usize,
    /// Number of attributes.
    pub n: usize,
    /// Semantic embedding width.
    pub d_v: usize,
    /// Raw descriptor width `D`.
    pub raw_dim: usize,
    pub regions: usize,
    pub samples_per_class: usize,
    /// Each class activates `round(density * n)` attributes.
    pub attribute_density: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            k_seen: 9,
            k_unseen: 3,
            n: 16,
            d_v: 32,
            raw_dim: 24,
            regions: 4,
            samples_per_class: 60,
            attribute_density: 0.25,
            noise_sigma: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn active_per_class(&self) -> usize {
        (self.attribute_density * self.n as f64).round() as usize
    }

    pub fn check(&self) -> Result<()> {
        let positive = [
            ("k_seen", self.k_seen),
            ("n", self.n),
            ("d_v", self.d_v),
            ("raw_dim", self.raw_dim),
            ("regions", self.regions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.samples_per_class < 2 {
            return Err(Error::Config(
                "samples_per_class must be at least 2 (train and test)".into(),
            ));
        }
        if !(self.attribute_density > 0.0 && self.attribute_density < 1.0) {
            return Err(Error::Config(format!(
                "attribute_density {} outside (0, 1)",
                self.attribute_density
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma {} must be finite and non-negative",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Builds a dataset whose samples carry each active attribute's signature in
/// one random region, on top of Gaussian noise. Pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<GzslDataset> {
    spec.check()?;
    let active = spec.active_per_class();
    if active == 0 {
        return Err(Error::Generation(format!(
            "density {} gives classes zero active attributes out of {}",
            spec.attribute_density, spec.n
        )));
    }
    let k = spec.k_seen + spec.k_unseen;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let signatures = signatures(&mut rng, spec.n, spec.raw_dim);
    let embeddings = {
        let scale = 1.0 / (spec.d_v as f64).sqrt();
        let data = (0..spec.n * spec.d_v)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::new(vec![spec.n, spec.d_v], data)?
    };

    let mut class_sets: Vec<Vec<usize>> = Vec::with_capacity(k);
    let mut redraws = 0;
    while class_sets.len() < k {
        let mut set = rand::seq::index::sample(&mut rng, spec.n, active).into_vec();
        set.sort_unstable();
        if class_sets.contains(&set) {
            redraws += 1;
            if redraws > MAX_REDRAWS {
                return Err(Error::Generation(format!(
                    "cannot draw {k} distinct attribute sets of size {active} from {}",
                    spec.n
                )));
            }
            continue;
        }
        class_sets.push(set);
    }
    let mut raw = Tensor::zeros(&[k, spec.n]);
    for (c, set) in class_sets.iter().enumerate() {
        for &i in set {
            raw.set(c, i, 1.0);
        }
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng);
    let mut class_kinds = vec![ClassKind::Seen; k];
    for &c in &order[..spec.k_unseen] {
        class_kinds[c] = ClassKind::Unseen;
    }

    let n_train = ((spec.samples_per_class as f64 * TRAIN_FRACTION).round() as usize)
        .clamp(1, spec.samples_per_class - 1);
    let total = k * spec.samples_per_class;
    let mut descriptors = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    let mut splits = Vec::with_capacity(total);
    let mut ground_truth = Vec::with_capacity(total);
    let (d, r) = (spec.raw_dim, spec.regions);
    for (c, set) in class_sets.iter().enumerate() {
        for s in 0..spec.samples_per_class {
            let mut x: Vec<f64> = (0..d * r)
                .map(|_| spec.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mut planted = vec![-1i64; spec.n];
            for &i in set {
                let region = rng.gen_range(0..r);
                planted[i] = region as i64;
                for (row, &sv) in signatures[i].iter().enumerate() {
                    x[row * r + region] += sv;
                }
            }
            descriptors.push(Tensor::new(vec![d, r], x)?);
            labels.push(c);
            ground_truth.push(planted);
            splits.push(match class_kinds[c] {
                ClassKind::Unseen => Split::TestUnseen,
                ClassKind::Seen if s < n_train => Split::Train,
                ClassKind::Seen => Split::TestSeen,
            });
        }
    }

    Ok(GzslDataset {
        name: format!("synthetic-{}", spec.seed),
        descriptors,
        labels,
        attributes: normalize_rows(&raw),
        raw_attributes: raw,
        embeddings,
        class_kinds,
        splits,
        spec: Some(spec.clone()),
        ground_truth: Some(ground_truth),
    })
}

/// Unit attribute signatures in `R^dim`, orthonormal when `count <= dim`.
fn signatures(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if out.len() < dim {
            for u in &out {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        out.push(v);
    }
    out
}

/// The planted unit signature of every attribute, recovered by regenerating
/// from the spec's seed.
pub fn planted_signatures(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    signatures(&mut rng, spec.n, spec.raw_dim)
}
