use aarr_core::agl;
use aarr_core::data::{generate_synthetic, GzslDataset, SyntheticSpec};
use aarr_core::eval::{evaluate, harmonic_mean, Averaging, LogitSource};
use aarr_core::tensor::softmax;
use aarr_core::uad::{min_max_normalize, uad_loss, RegionWeight};
use aarr_core::{Graph, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn sized_matrix(max_rows: usize, max_cols: usize, scale: f64) -> impl Strategy<Value = Tensor> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| matrix(r, c, scale))
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(x in sized_matrix(8, 8, 50.0)) {
        let p = softmax(&x, 1).unwrap();
        for i in 0..p.rows() {
            let row = p.row(i);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normalized_maps_stay_in_unit_range(x in sized_matrix(6, 6, 1e3)) {
        let t = min_max_normalize(&x);
        prop_assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        if x.max() > x.min() {
            prop_assert_eq!(t.max(), 1.0);
            prop_assert_eq!(t.min(), 0.0);
        }
    }

    #[test]
    fn pool_update_interpolates(
        (h, h_bar) in (1usize..6, 1usize..6).prop_flat_map(|(n, c)| (matrix(n, c, 5.0), matrix(n, c, 5.0))),
        theta in -30.0f64..30.0,
    ) {
        let mut g = Graph::new();
        let hv = g.param(h.clone());
        let hb = g.param(h_bar.clone());
        let th = g.param(Tensor::scalar(theta));
        let mixed = agl::update_pool(&mut g, hv, th, hb).unwrap();
        for ((&m, &a), &b) in g.value(mixed).data().iter().zip(h.data()).zip(h_bar.data()) {
            prop_assert!(m >= a.min(b) - 1e-12 && m <= a.max(b) + 1e-12);
        }
    }

    #[test]
    fn cross_entropy_ignores_logit_shift(
        z in prop::collection::vec(-20.0f64..20.0, 2..10),
        shift in -100.0f64..100.0,
        pick in 0usize..10,
    ) {
        let target = pick % z.len();
        let ce = |z: Vec<f64>| {
            let mut g = Graph::new();
            let v = g.constant(Tensor::vector(z));
            let l = g.cross_entropy(v, target).unwrap();
            g.value(l).item()
        };
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        prop_assert!((ce(z) - ce(shifted)).abs() < 1e-9);
    }

    #[test]
    fn uad_loss_ignores_region_order(
        (fs, ft, w) in (1usize..6, 1usize..6).prop_flat_map(|(c, r)| (
            matrix(c, r, 3.0),
            matrix(c, r, 3.0),
            prop::collection::vec(0.0f64..1.0, r),
        )),
        rot in 0usize..6,
    ) {
        let r = fs.cols();
        let perm: Vec<usize> = (0..r).map(|j| (j + rot) % r).collect();
        let permute = |t: &Tensor| {
            let mut out = t.clone();
            for c in 0..t.rows() {
                for (j, &src) in perm.iter().enumerate() {
                    out.set(c, j, t.at(c, src));
                }
            }
            out
        };
        let loss = |fs: &Tensor, ft: &Tensor, w: Vec<f64>| {
            let mut g = Graph::new();
            let f = g.param(fs.clone());
            let l = uad_loss(&mut g, f, ft, &RegionWeight(w)).unwrap();
            g.value(l).item()
        };
        let pw: Vec<f64> = perm.iter().map(|&src| w[src]).collect();
        let a = loss(&fs, &ft, w);
        let b = loss(&permute(&fs), &permute(&ft), pw);
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn harmonic_mean_is_bounded(s in 0.0f64..=1.0, u in 0.0f64..=1.0) {
        let h = harmonic_mean(s, u);
        prop_assert!(h <= (s + u) / 2.0 + 1e-15);
        prop_assert!(h >= s.min(u) - 1e-15);
    }

    #[test]
    fn lambda_stays_open(theta in -700.0f64..700.0) {
        let mut pool = agl::AttributePool::new(2, 2);
        pool.theta = theta;
        let l = pool.lambda();
        prop_assert!((0.0..=1.0).contains(&l));
        if theta.abs() < 30.0 {
            prop_assert!(l > 0.0 && l < 1.0);
        }
    }
}

/// Scores each class by a fixed slice of the descriptor, so predictions depend
/// only on the sample itself.
struct DescriptorLogits(usize);

impl LogitSource for DescriptorLogits {
    fn logits(&self, x: &Tensor) -> aarr_core::Result<Vec<f64>> {
        Ok(x.data()[..self.0].to_vec())
    }
}

fn permuted(d: &GzslDataset, order: &[usize]) -> GzslDataset {
    let mut out = d.clone();
    out.descriptors = order.iter().map(|&i| d.descriptors[i].clone()).collect();
    out.labels = order.iter().map(|&i| d.labels[i]).collect();
    out.splits = order.iter().map(|&i| d.splits[i]).collect();
    out.ground_truth = d.ground_truth.as_ref().map(|g| order.iter().map(|&i| g[i].clone()).collect());
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn metrics_ignore_sample_order(seed in 0u64..1000, shuffle_seed in any::<u64>(), per_sample in any::<bool>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let spec = SyntheticSpec { k_seen: 4, k_unseen: 2, samples_per_class: 10, seed, ..SyntheticSpec::default() };
        let d = generate_synthetic(&spec).unwrap();
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(shuffle_seed));
        let source = DescriptorLogits(d.num_classes());
        let avg = if per_sample { Averaging::PerSample } else { Averaging::PerClass };
        let a = evaluate(&source, &d, avg, 1).unwrap();
        let b = evaluate(&source, &permuted(&d, &order), avg, 2).unwrap();
        prop_assert_eq!(a, b);
    }
}
