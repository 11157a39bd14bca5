use proptest::prelude::*;

use rfvae::datagen::FactorSpace;
use rfvae::disent::{
    lambda_of_r, objective, permute_dims, Discriminator, DisentConfig, ObjectiveKind, ObjectiveTerms,
};
use rfvae::metrics::{lasso_fit, metric3, vote_metric, ImportanceMatrix, LatentTable, VoteParams, VoteRule};
use rfvae::nn::{Activation, AdamConfig, AdamState, Mlp, MlpSpec};
use rfvae::rng::Rng;
use rfvae::tensor::{Graph, Tensor};
use rfvae::vae::{prior_kl_per_dim, PosteriorBatch, VaeModel};

fn small_space() -> FactorSpace {
    FactorSpace::new(&["a", "b", "c"], &[4, 5, 3]).unwrap()
}

fn random_table(space: &FactorSpace, d: usize, seed: u64) -> LatentTable {
    let mut rng = Rng::new(seed);
    LatentTable::from_fn(space, |tu| {
        let base = space.scaled(tu);
        (0..d).map(|j| base[j % base.len()] * (j as f64 + 1.0) + 0.3 * rng.normal()).collect()
    })
    .unwrap()
}

fn quick() -> VoteParams {
    VoteParams {
        l: 20,
        num_pairs: 120,
        repeats: 2,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn permute_dims_keeps_column_multisets(rows in 2usize..40, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let z = rng.normal_tensor(&[rows, cols]);
        let p = permute_dims(&z, &mut rng).unwrap();
        for j in 0..cols {
            let mut a: Vec<f64> = (0..rows).map(|i| z.row(i)[j]).collect();
            let mut b: Vec<f64> = (0..rows).map(|i| p.row(i)[j]).collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn vote_choices_ignore_positive_affine_rescaling(
        scales in prop::collection::vec(0.01f64..100.0, 4),
        shifts in prop::collection::vec(-10.0f64..10.0, 4),
        seed in any::<u64>(),
    ) {
        let space = small_space();
        let a = random_table(&space, 4, seed);
        let b = LatentTable::from_fn(&space, |tu| {
            let i = space.index_of(tu).unwrap();
            a.row(i).iter().enumerate().map(|(j, v)| v * scales[j] + shifts[j]).collect()
        })
        .unwrap();
        for rule in [VoteRule::FixedArgmin, VoteRule::VariedArgmax] {
            let x = vote_metric(&a, &space, quick(), &Rng::new(seed ^ 1), rule).unwrap();
            let y = vote_metric(&b, &space, quick(), &Rng::new(seed ^ 1), rule).unwrap();
            prop_assert_eq!(x.tables, y.tables);
        }
    }

    #[test]
    fn vote_accuracy_is_bounded(d in 1usize..6, seed in any::<u64>()) {
        let space = small_space();
        let t = random_table(&space, d, seed);
        let p = quick();
        let k = space.num_factors() as f64;
        let sigma = ((1.0 / k) * (1.0 - 1.0 / k) / p.num_pairs as f64).sqrt();
        for rule in [VoteRule::FixedArgmin, VoteRule::VariedArgmax] {
            let s = vote_metric(&t, &space, p, &Rng::new(seed), rule).unwrap();
            for acc in s.accuracies {
                prop_assert!(acc >= 1.0 / k - 3.0 * sigma && acc <= 1.0, "{}", acc);
            }
        }
    }

    #[test]
    fn importance_scores_ignore_global_scale(
        cells in prop::collection::vec(0.0f64..5.0, 12),
        c in 0.001f64..1000.0,
    ) {
        prop_assume!(cells.iter().any(|v| *v > 1e-6));
        let rows = |s: f64| cells.chunks(3).map(|r| r.iter().map(|v| v * s).collect()).collect();
        let a = ImportanceMatrix::new(rows(1.0)).unwrap();
        let b = ImportanceMatrix::new(rows(c)).unwrap();
        prop_assert!((a.disentanglement() - b.disentanglement()).abs() < 1e-9);
        prop_assert!((a.completeness() - b.completeness()).abs() < 1e-9);
    }

    #[test]
    fn lasso_objective_never_increases(
        n in 5usize..40,
        p in 1usize..5,
        alpha in 0.0f64..0.5,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.normal()).collect()).collect();
        let y: Vec<f64> = x.iter().map(|r| r.iter().sum::<f64>() + rng.normal()).collect();
        let fit = lasso_fit(&x, &y, alpha).unwrap();
        for w in fit.objective_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0), "{:?}", fit.objective_trace);
        }
    }

    #[test]
    fn adam_with_zero_gradients_is_identity(sizes in prop::collection::vec(1usize..6, 1..4), steps in 1usize..5, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut params: Vec<Tensor> = sizes.iter().map(|&s| rng.normal_tensor(&[s])).collect();
        let before = params.clone();
        let mut adam = AdamState::new(AdamConfig::with_lr(1e-3), &sizes).unwrap();
        let zeros: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
        let grads: Vec<&[f64]> = zeros.iter().map(Vec::as_slice).collect();
        for _ in 0..steps {
            let mut ps: Vec<&mut Tensor> = params.iter_mut().collect();
            adam.step(&mut ps, &grads).unwrap();
        }
        prop_assert_eq!(params, before);
    }

    #[test]
    fn breakdown_recomposes_for_every_objective(kind_idx in 0usize..5, seed in any::<u64>(), gamma in 0.0f64..10.0) {
        let kind = [
            ObjectiveKind::Vanilla,
            ObjectiveKind::Beta,
            ObjectiveKind::Factor,
            ObjectiveKind::RfVae0,
            ObjectiveKind::RfVae,
        ][kind_idx];
        let mut rng = Rng::new(seed);
        let model = VaeModel::new(4, 3, &[8], &[8], &mut rng).unwrap();
        let x = Tensor::new(vec![6, 16], (0..96).map(|_| f64::from(rng.uniform() < 0.5)).collect()).unwrap();
        let eps = rng.normal_tensor(&[6, 3]);
        let mut cfg = DisentConfig::of_kind(kind);
        cfg.gamma = gamma;
        if kind == ObjectiveKind::RfVae0 {
            cfg.known_r = Some(vec![0, 2]);
        }
        let disc = Discriminator::new(cfg.discriminator_width(3), &[8], 0.01, &mut rng).unwrap();
        let mut g = Graph::new();
        let f = model.forward(&mut g, &x, &eps, false).unwrap();
        let rho = (kind == ObjectiveKind::RfVae).then(|| g.constant(rng.normal_tensor(&[3])));
        let terms = ObjectiveTerms { recon: f.recon, kl_per_dim: f.kl_per_dim, z_tc: f.z };
        let critic = cfg.uses_discriminator().then_some(&disc as &dyn rfvae::disent::Critic);
        let (_, b) = objective(&mut g, &cfg, terms, critic, rho).unwrap();
        prop_assert!((b.recomposed_total() - b.total).abs() < 1e-9);
    }

    #[test]
    fn lambda_is_decreasing_in_relevance(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(lambda_of_r(lo, 0.1, 10.0).unwrap() >= lambda_of_r(hi, 0.1, 10.0).unwrap());
    }

    #[test]
    fn prior_kl_is_non_negative(seed in any::<u64>(), spread in 0.1f64..5.0) {
        let mut rng = Rng::new(seed);
        let mut g = Graph::new();
        let m = rng.normal_tensor(&[5, 3]);
        let s = Tensor::new(vec![5, 3], (0..15).map(|_| spread * rng.normal()).collect()).unwrap();
        let means = g.constant(m);
        let log_stds = g.constant(s);
        let kl = prior_kl_per_dim(&mut g, PosteriorBatch { means, log_stds }).unwrap();
        prop_assert!(g.value(kl).data().iter().all(|v| *v >= -1e-12));
    }

    #[test]
    fn relu_mlp_without_biases_is_positively_homogeneous(seed in any::<u64>(), c in prop::sample::select(vec![0.5f64, 2.0])) {
        let spec = MlpSpec::new(&[3, 6, 5, 2], Activation::Relu, Activation::Identity).unwrap();
        let mut mlp = Mlp::init(spec, &mut Rng::new(seed)).unwrap();
        for (i, p) in mlp.params_mut().iter_mut().enumerate() {
            if i % 2 == 1 {
                p.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let x = Rng::new(seed ^ 7).normal_tensor(&[4, 3]);
        let cx = Tensor::new(vec![4, 3], x.data().iter().map(|v| v * c).collect()).unwrap();
        let a = mlp.eval(x).unwrap();
        let b = mlp.eval(cx).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((c * u - v).abs() < 1e-12 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn matmul_by_identity_is_exact(r in 1usize..6, k in 1usize..6, seed in any::<u64>()) {
        let a = Rng::new(seed).normal_tensor(&[r, k]);
        let mut g = Graph::new();
        let av = g.constant(a.clone());
        let right = g.constant(Tensor::identity(k));
        let left = g.constant(Tensor::identity(r));
        let ai = g.matmul(av, right).unwrap();
        let ia = g.matmul(left, av).unwrap();
        prop_assert_eq!(g.value(ai).data(), a.data());
        prop_assert_eq!(g.value(ia).data(), a.data());
    }

    #[test]
    fn index_and_tuple_round_trip(cards in prop::collection::vec(2usize..6, 1..5), pick in any::<prop::sample::Index>()) {
        let names: Vec<String> = (0..cards.len()).map(|i| format!("f{i}")).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let space = FactorSpace::new(&names, &cards).unwrap();
        let i = pick.index(space.total());
        let tuple = space.tuple_of(i).unwrap();
        prop_assert_eq!(space.index_of(&tuple).unwrap(), i);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn latent_order_does_not_change_metric3(seed in any::<u64>(), perm_seed in any::<u64>()) {
        let space = small_space();
        let a = random_table(&space, 4, seed);
        let perm = Rng::new(perm_seed).permutation(4);
        let b = LatentTable::from_fn(&space, |tu| {
            let row = a.row(space.index_of(tu).unwrap());
            perm.iter().map(|&j| row[j]).collect()
        })
        .unwrap();
        let x = metric3(&a, &space, 0.01, &Rng::new(3)).unwrap();
        let y = metric3(&b, &space, 0.01, &Rng::new(3)).unwrap();
        prop_assert!((x.d - y.d).abs() < 1e-4, "{} {}", x.d, y.d);
        prop_assert!((x.c - y.c).abs() < 1e-4, "{} {}", x.c, y.c);
        prop_assert!((x.i - y.i).abs() < 1e-4, "{} {}", x.i, y.i);
        for (new_row, &old) in perm.iter().enumerate() {
            for (u, v) in y.importance.r[new_row].iter().zip(&x.importance.r[old]) {
                prop_assert!((u - v).abs() < 1e-4);
            }
        }
    }
}

#[test]
fn shuffling_decorrelates_gaussian_pairs() {
    let batch = 64;
    let seeds = 50;
    let mut total = 0.0;
    for seed in 0..seeds {
        let mut rng = Rng::new(seed);
        let data: Vec<f64> = (0..batch)
            .flat_map(|_| {
                let a = rng.normal();
                [a, 0.8 * a + 0.6 * rng.normal()]
            })
            .collect();
        let z = Tensor::new(vec![batch, 2], data).unwrap();
        let p = permute_dims(&z, &mut rng).unwrap();
        let col = |j: usize| -> Vec<f64> { (0..batch).map(|i| p.row(i)[j]).collect() };
        let (x, y) = (col(0), col(1));
        let mx = x.iter().sum::<f64>() / batch as f64;
        let my = y.iter().sum::<f64>() / batch as f64;
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        total += (sxy / (sxx * syy).sqrt()).abs();
    }
    let mean = total / seeds as f64;
    assert!(mean < 3.0 / (batch as f64).sqrt(), "{mean}");
}
