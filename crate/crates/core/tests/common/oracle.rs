//! Naive-loop reimplementations of the model pieces. Each check returns the
//! worst absolute deviation from the library over its random instances
//! (`INFINITY` for a discrete mismatch).

use aarr_core::agl::{self, AttributePool};
use aarr_core::arc::{self, ArcModel, ArcVars};
use aarr_core::eval::predict;
use aarr_core::uad::{self, attribute_reweight, build_similarity_sets, RegionWeight};
use aarr_core::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// `(v w f)[i][j] = sum_e sum_c v[i][e] w[e][c] f[c][j]`.
fn bilinear(v: &[Vec<f64>], w: &[Vec<f64>], f: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, r) = (v.len(), f[0].len());
    let mut out = vec![vec![0.0; r]; n];
    for i in 0..n {
        for j in 0..r {
            let mut acc = 0.0;
            for (e, ve) in v[i].iter().enumerate() {
                for (c, fc) in f.iter().enumerate() {
                    acc += ve * w[e][c] * fc[j];
                }
            }
            out[i][j] = acc;
        }
    }
    out
}

pub fn softmax_rows(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return f64::INFINITY;
    }
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Naive class logits for features `f`.
fn logits_loop(f: &[Vec<f64>], v: &[Vec<f64>], w1: &[Vec<f64>], w2: &[Vec<f64>], a: &[Vec<f64>]) -> Vec<f64> {
    let p = softmax_rows(&bilinear(v, w1, f));
    let vwf = bilinear(v, w2, f);
    let evidence: Vec<f64> = (0..v.len())
        .map(|i| (0..f[0].len()).map(|j| vwf[i][j] * p[i][j]).sum())
        .collect();
    a.iter()
        .map(|ak| ak.iter().zip(&evidence).map(|(x, y)| x * y).sum())
        .collect()
}

struct Instance {
    f: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    w1: Vec<Vec<f64>>,
    w2: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, r, n, dv, k) = (
        rng.gen_range(1..9),
        rng.gen_range(1..7),
        rng.gen_range(1..11),
        rng.gen_range(1..8),
        rng.gen_range(1..9),
    );
    Instance {
        f: random(&mut rng, c, r),
        v: random(&mut rng, n, dv),
        w1: random(&mut rng, dv, c),
        w2: random(&mut rng, dv, c),
        a: random(&mut rng, k, n),
    }
}

pub fn attention_scores() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..30 {
        let s = instance(seed);
        let expected = softmax_rows(&bilinear(&s.v, &s.w1, &s.f));
        let mut g = Graph::new();
        let (f, v, w1) = (g.constant(tensor(&s.f)), g.constant(tensor(&s.v)), g.constant(tensor(&s.w1)));
        let p = arc::attention_scores(&mut g, f, v, w1).unwrap();
        worst = worst.max(max_diff(&rows_of(g.value(p)), &expected));
    }
    worst
}

pub fn class_logits() -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..30 {
        let s = instance(seed);
        let expected = logits_loop(&s.f, &s.v, &s.w1, &s.w2, &s.a);
        let mut g = Graph::new();
        let f = g.constant(tensor(&s.f));
        let v = g.constant(tensor(&s.v));
        let w1 = g.constant(tensor(&s.w1));
        let w2 = g.constant(tensor(&s.w2));
        let a = g.constant(tensor(&s.a));
        let p = arc::attention_scores(&mut g, f, v, w1).unwrap();
        let z = arc::class_logits(&mut g, f, p, v, w2, a).unwrap();
        worst = worst.max(max_diff(&[g.value(z).data().to_vec()], &[expected]));
    }
    worst
}

pub fn batch_prototypes() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (b, c, r, n) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..5), rng.gen_range(1..7));
        let feats: Vec<Vec<Vec<f64>>> = (0..b).map(|_| random(&mut rng, c, r)).collect();
        let scores: Vec<Vec<Vec<f64>>> = (0..b).map(|_| softmax_rows(&random(&mut rng, n, r))).collect();
        for literal in [false, true] {
            let mut expected = vec![vec![0.0; c]; n];
            for (f, p) in feats.iter().zip(&scores) {
                for i in 0..n {
                    let mass: f64 = p[i].iter().sum();
                    for ch in 0..c {
                        let proto = if literal {
                            (0..r).map(|j| f[ch][j]).sum::<f64>()
                        } else {
                            (0..r).map(|j| p[i][j] * f[ch][j]).sum::<f64>() / mass
                        };
                        expected[i][ch] += proto / b as f64;
                    }
                }
            }
            let mut g = Graph::new();
            let fv: Vec<_> = feats.iter().map(|f| g.constant(tensor(f))).collect();
            let pv: Vec<_> = scores.iter().map(|p| g.constant(tensor(p))).collect();
            let h = agl::batch_prototypes(&mut g, &fv, &pv, literal).unwrap();
            worst = worst.max(max_diff(&rows_of(g.value(h)), &expected));
        }
    }
    worst
}

pub fn pool_initialization() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let (d, c, r, n, dv) = (6, 5, 4, 7, 3);
        let teacher = ArcModel::init(&mut rng, d, c, dv);
        let v = tensor(&random(&mut rng, n, dv));
        let xs: Vec<Tensor> = (0..20).map(|_| tensor(&random(&mut rng, d, r))).collect();

        let mut num = vec![vec![0.0; c]; n];
        let mut den = vec![0.0; n];
        for x in &xs {
            let f = rows_of(&teacher.features(x).unwrap());
            let p = rows_of(&teacher.scores(x, &v).unwrap());
            for i in 0..n {
                let mut best = 0;
                for j in 0..r {
                    if p[i][j] > p[i][best] {
                        best = j;
                    }
                }
                den[i] += p[i][best];
                for ch in 0..c {
                    num[i][ch] += p[i][best] * f[ch][best];
                }
            }
        }
        let expected: Vec<Vec<f64>> = num
            .iter()
            .zip(&den)
            .map(|(row, d)| row.iter().map(|x| x / d).collect())
            .collect();

        let mut pool = AttributePool::new(n, c);
        pool.init_from_teacher(&teacher, &xs, &v).unwrap();
        worst = worst.max(max_diff(&rows_of(&pool.h), &expected));
        worst = worst.max((pool.lambda() - 0.9).abs());
    }
    worst
}

pub fn similarity_sets() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let k = rng.gen_range(3..12);
        let n = rng.gen_range(2..8);
        // Coarse values make distance ties common.
        let a: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.gen_range(0..3) as f64).collect()).collect();
        let n_unseen = rng.gen_range(1..k);
        let unseen: Vec<usize> = (0..n_unseen).collect();
        let seen: Vec<usize> = (n_unseen..k).collect();
        let m = rng.gen_range(1..=seen.len());
        let sets = build_similarity_sets(&tensor(&a), &seen, &unseen, m).unwrap();

        let dist = |x: usize, y: usize| -> f64 {
            (0..n).map(|i| (a[x][i] - a[y][i]).powi(2)).sum::<f64>().sqrt()
        };
        let mut expected = vec![Vec::new(); k];
        for &u in &unseen {
            // Repeated minimum; the lower id wins ties.
            let mut taken = vec![false; k];
            for _ in 0..m {
                let mut best: Option<usize> = None;
                for &s in &seen {
                    if !taken[s] && best.is_none_or(|b| dist(u, s) < dist(u, b)) {
                        best = Some(s);
                    }
                }
                let b = best.unwrap();
                taken[b] = true;
                expected[b].push(u);
            }
        }
        if sets.sets != expected {
            return f64::INFINITY;
        }
    }
    0.0
}

pub fn attribute_reweight_check() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (c, r, n) = (rng.gen_range(1..7), rng.gen_range(1..6), rng.gen_range(1..8));
        let map: Vec<Vec<f64>> = (0..c).map(|_| (0..r).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let p = softmax_rows(&random(&mut rng, n, r));
        let w = attribute_reweight(&tensor(&map), &tensor(&p)).unwrap();
        for j in 0..r {
            let mut mean = 0.0;
            for row in &map {
                mean += row[j];
            }
            mean /= c as f64;
            let mut peak = p[0][j];
            for row in &p {
                if row[j] > peak {
                    peak = row[j];
                }
            }
            worst = worst.max((w.as_slice()[j] - mean * peak).abs());
        }
    }
    worst
}

/// Predictions from the library against argmax over recomputed logits on 50
/// random samples and class subsets.
pub fn predictions() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (d, c, r, n, dv, k) = (5, 4, 3, 6, 4, 8);
    let model = ArcModel::init(&mut rng, d, c, dv);
    let v = random(&mut rng, n, dv);
    let a = random(&mut rng, k, n);
    let w1 = rows_of(&model.arc.w1);
    let w2 = rows_of(&model.arc.w2);
    let mut checked = 0;
    while checked < 50 {
        let x = random(&mut rng, d, r);
        let subset: Vec<usize> = (0..k).filter(|_| rng.gen_bool(0.6)).collect();
        if subset.is_empty() {
            continue;
        }
        let mut g = Graph::new();
        let vars = ArcVars::bind(&mut g, &model, false);
        let xv = g.constant(tensor(&x));
        let f = arc::extract(&mut g, &vars, xv).unwrap();
        let z = logits_loop(&rows_of(g.value(f)), &v, &w1, &w2, &a);
        let mut best = subset[0];
        for &class in &subset {
            if z[class] > z[best] {
                best = class;
            }
        }
        let logits = model.logits(&tensor(&x), &tensor(&v), &tensor(&a)).unwrap();
        if predict(&logits, &subset).unwrap() != best {
            return f64::INFINITY;
        }
        checked += 1;
    }
    0.0
}

/// Naive teacher loss for class `c` as a function of the region features.
fn ce_of_features(f: &[Vec<f64>], v: &[Vec<f64>], w1: &[Vec<f64>], w2: &[Vec<f64>], a: &[Vec<f64>], c: usize) -> f64 {
    let z = logits_loop(f, v, w1, w2, a);
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    lse - z[c]
}

fn normalize(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let lo = x.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    x.iter().map(|r| r.iter().map(|v| (v - lo) / (hi - lo)).collect()).collect()
}

/// Activation maps against finite differences of the naive loss, so the
/// tolerance is looser than the exact checks.
pub fn activation_maps() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (d, c, r, n, dv, k) = (5, 4, 3, 6, 4, 5);
    let teacher = ArcModel::init(&mut rng, d, c, dv);
    let v = random(&mut rng, n, dv);
    let a = random(&mut rng, k, n);
    let w1 = rows_of(&teacher.arc.w1);
    let w2 = rows_of(&teacher.arc.w2);
    let x = tensor(&random(&mut rng, d, r));
    let f = rows_of(&teacher.features(&x).unwrap());
    let classes = [1, 3, 4];
    let maps = uad::class_activation_maps(&teacher, &x, &tensor(&v), &tensor(&a), &classes).unwrap();

    let step = 1e-6;
    let mut worst = 0.0f64;
    let mut grads = Vec::new();
    for (&class, map) in classes.iter().zip(&maps) {
        let mut grad = vec![vec![0.0; r]; c];
        for ch in 0..c {
            for j in 0..r {
                let mut up = f.clone();
                up[ch][j] += step;
                let mut down = f.clone();
                down[ch][j] -= step;
                grad[ch][j] = (ce_of_features(&up, &v, &w1, &w2, &a, class)
                    - ce_of_features(&down, &v, &w1, &w2, &a, class))
                    / (2.0 * step);
            }
        }
        worst = worst.max(max_diff(&rows_of(map), &normalize(&grad)));
        grads.push(grad);
    }

    // Own map plus the mean of the others, renormalized.
    let own = normalize(&grads[0]);
    let others: Vec<Vec<Vec<f64>>> = grads[1..].iter().map(|g| normalize(g)).collect();
    let summed: Vec<Vec<f64>> = (0..c)
        .map(|ch| {
            (0..r)
                .map(|j| own[ch][j] + others.iter().map(|o| o[ch][j]).sum::<f64>() / others.len() as f64)
                .collect()
        })
        .collect();
    let merged = uad::combine_maps(&maps[0], &maps[1..]).unwrap();
    worst.max(max_diff(&rows_of(&merged), &normalize(&summed)))
}

pub fn uad_loss() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (c, r) = (rng.gen_range(1..7), rng.gen_range(1..6));
        let fs = random(&mut rng, c, r);
        let ft = random(&mut rng, c, r);
        let w: Vec<f64> = (0..r).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut expected = 0.0;
        for j in 0..r {
            let mut sq = 0.0;
            for ch in 0..c {
                sq += (fs[ch][j] - ft[ch][j]).powi(2);
            }
            expected += w[j] * sq / c as f64;
        }
        expected /= r as f64;
        let mut g = Graph::new();
        let f = g.param(tensor(&fs));
        let l = uad::uad_loss(&mut g, f, &tensor(&ft), &RegionWeight(w)).unwrap();
        worst = worst.max((g.value(l).item() - expected).abs());
    }
    worst
}

/// Exact checks run by the acceptance harness, by name.
pub const EXACT: [(&str, fn() -> f64); 7] = [
    ("attention_scores", attention_scores),
    ("class_logits", class_logits),
    ("batch_prototypes", batch_prototypes),
    ("init_pool", pool_initialization),
    ("build_similarity_sets", similarity_sets),
    ("attribute_reweight", attribute_reweight_check),
    ("predict", predictions),
];
