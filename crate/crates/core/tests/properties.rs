use mmvl_core::checkpoint::Checkpoint;
use mmvl_core::data::{generate_toy_multimodal, make_splits, PairedDataset, ToyDatasetConfig};
use mmvl_core::dataset_io::{dataset_from_bytes, dataset_to_bytes};
use mmvl_core::distributions::{
    log_pdf, log_sum_exp, normalize_scale_values, poe_gaussian_product_values, Family, LocScaleParams,
};
use mmvl_core::models::{ModalityConfig, ModelConfig};
use mmvl_core::objectives::{weight_shares, BoundValue, ObjectiveKind};
use mmvl_core::train::{TrainConfig, Trainer};
use mmvl_core::{Tape, Tensor};
use proptest::prelude::*;

fn lw_tensor(s: usize, l: usize, b: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![s, l, b], data).unwrap()
}

/// `[S, L, B]` log-weights with S, L, B small.
fn log_weights() -> impl Strategy<Value = Tensor> {
    (1usize..4, 1usize..6, 1usize..4).prop_flat_map(|(s, l, b)| {
        prop::collection::vec(-30.0f64..30.0, s * l * b).prop_map(move |d| lw_tensor(s, l, b, d))
    })
}

fn agg(kind: ObjectiveKind, lw: &Tensor) -> f64 {
    BoundValue::aggregate(kind, lw).unwrap()
}

fn gaussian(loc: Vec<f64>, scale: Vec<f64>) -> LocScaleParams {
    LocScaleParams::new(Family::Gaussian, Tensor::vector(loc), Tensor::vector(scale)).unwrap()
}

proptest! {
    #[test]
    fn logsumexp_shifts_with_its_input(xs in prop::collection::vec(-700.0f64..700.0, 1..20), c in -500.0f64..500.0) {
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        let a = log_sum_exp(&xs) + c;
        let b = log_sum_exp(&shifted);
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(log_sum_exp(&xs) >= max && log_sum_exp(&xs) <= max + (xs.len() as f64).ln() + 1e-12);

        let tape = Tape::new();
        let v = tape.constant(Tensor::vector(xs.clone())).logsumexp(0).unwrap().item();
        prop_assert!((v - log_sum_exp(&xs)).abs() <= 1e-9 * v.abs().max(1.0));
    }

    #[test]
    fn normalized_scales_are_positive_and_sum_to_d(raw in prop::collection::vec(-40.0f64..40.0, 1..12), c in -50.0f64..50.0) {
        let s = normalize_scale_values(&raw);
        let d = raw.len() as f64;
        prop_assert!(s.iter().all(|&v| v > 0.0));
        prop_assert!((s.iter().sum::<f64>() - d).abs() < 1e-9 * d);
        let shifted: Vec<f64> = raw.iter().map(|x| x + c).collect();
        for (a, b) in s.iter().zip(normalize_scale_values(&shifted)) {
            prop_assert!((a - b).abs() < 1e-9 * a.max(1e-300).max(b));
        }
    }

    #[test]
    fn bounds_are_ordered_for_any_log_weights(lw in log_weights()) {
        let elbo = agg(ObjectiveKind::Elbo, &lw);
        let loose = agg(ObjectiveKind::MoeIwaeLoose, &lw);
        let tight = agg(ObjectiveKind::MoeIwaeTight, &lw);
        prop_assert!(elbo <= loose + 1e-9, "elbo {elbo} loose {loose}");
        prop_assert!(loose <= tight + 1e-9, "loose {loose} tight {tight}");
    }

    #[test]
    fn bounds_ignore_particle_order(lw in log_weights(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let (s, l, b) = (lw.shape()[0], lw.shape()[1], lw.shape()[2]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        // permute particles within every stratum and the strata themselves
        let mut strata: Vec<usize> = (0..s).collect();
        strata.shuffle(&mut rng);
        let mut out = vec![0.0; lw.len()];
        for (new_m, &m) in strata.iter().enumerate() {
            let mut perm: Vec<usize> = (0..l).collect();
            perm.shuffle(&mut rng);
            for (new_k, &k) in perm.iter().enumerate() {
                for j in 0..b {
                    out[(new_m * l + new_k) * b + j] = lw.data()[(m * l + k) * b + j];
                }
            }
        }
        let p = lw_tensor(s, l, b, out);
        for kind in [ObjectiveKind::Elbo, ObjectiveKind::MoeIwaeLoose, ObjectiveKind::MoeIwaeTight] {
            let (a, c) = (agg(kind, &lw), agg(kind, &p));
            prop_assert!((a - c).abs() <= 1e-10 * a.abs().max(1.0), "{kind}: {a} vs {c}");
        }
    }

    #[test]
    fn weight_shares_form_a_distribution(lw in log_weights()) {
        let shares = weight_shares(&lw);
        prop_assert_eq!(shares.len(), lw.shape()[0]);
        prop_assert!(shares.iter().all(|s| (0.0..=1.0 + 1e-12).contains(s)));
        prop_assert!((shares.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_stratum_collapses_loose_and_tight(l in 1usize..8, b in 1usize..4, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let lw = lw_tensor(1, l, b, (0..l * b).map(|_| rng.random_range(-20.0..20.0)).collect());
        let (loose, tight) = (agg(ObjectiveKind::MoeIwaeLoose, &lw), agg(ObjectiveKind::MoeIwaeTight, &lw));
        prop_assert!((loose - tight).abs() < 1e-12 * loose.abs().max(1.0));
    }

    #[test]
    fn poe_precisions_add_and_order_is_irrelevant(
        experts in prop::collection::vec((prop::collection::vec(-5.0f64..5.0, 3), prop::collection::vec(0.05f64..5.0, 3)), 1..5)
    ) {
        let ps: Vec<LocScaleParams> = experts.iter().map(|(l, s)| gaussian(l.clone(), s.clone())).collect();
        let prod = poe_gaussian_product_values(&ps).unwrap();
        let mut rev = ps.clone();
        rev.reverse();
        let back = poe_gaussian_product_values(&rev).unwrap();
        for d in 0..3 {
            let precision: f64 = ps.iter().map(|p| p.scale.data()[d].powi(-2)).sum();
            let mean: f64 = ps.iter().map(|p| p.loc.data()[d] * p.scale.data()[d].powi(-2)).sum::<f64>() / precision;
            prop_assert!((prod.scale.data()[d] - precision.powf(-0.5)).abs() < 1e-9);
            prop_assert!((prod.loc.data()[d] - mean).abs() < 1e-9);
            // never wider than its sharpest expert
            let sharpest = ps.iter().map(|p| p.scale.data()[d]).fold(f64::INFINITY, f64::min);
            prop_assert!(prod.scale.data()[d] <= sharpest + 1e-12);
            prop_assert!((back.loc.data()[d] - prod.loc.data()[d]).abs() < 1e-9);
            prop_assert!((back.scale.data()[d] - prod.scale.data()[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn poe_of_n_identical_experts_shrinks_by_root_n(loc in -5.0f64..5.0, s in 0.05f64..5.0, n in 1usize..6) {
        let ps = vec![gaussian(vec![loc], vec![s]); n];
        let prod = poe_gaussian_product_values(&ps).unwrap();
        prop_assert!((prod.loc.data()[0] - loc).abs() < 1e-9);
        prop_assert!((prod.scale.data()[0] - s / (n as f64).sqrt()).abs() < 1e-9 * s);
    }

    #[test]
    fn log_pdf_is_symmetric_and_peaks_at_the_location(x in -10.0f64..10.0, loc in -5.0f64..5.0, s in 0.1f64..4.0) {
        for f in [Family::Laplace, Family::Gaussian] {
            let a = log_pdf(f, loc + x, loc, s);
            let b = log_pdf(f, loc - x, loc, s);
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!(log_pdf(f, loc, loc, s) >= a);
        }
    }

    #[test]
    fn backward_is_linear(
        xs in prop::collection::vec(-2.0f64..2.0, 4),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let grad = |wa: f64, wb: f64| {
            let tape = Tape::new();
            let x = tape.var(Tensor::new(vec![2, 2], xs.clone()).unwrap());
            let f = x.tanh().sum_all();
            let g = x.mul(x).unwrap().exp().mean_all();
            let out = f.scale(wa).add(g.scale(wb)).unwrap();
            tape.backward(out).unwrap().wrt(x)
        };
        let (ga, gb, gab) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(a, b));
        for i in 0..4 {
            let want = a * ga.data()[i] + b * gb.data()[i];
            prop_assert!((gab.data()[i] - want).abs() < 1e-10 * want.abs().max(1.0));
        }
    }

    #[test]
    fn matmul_matches_the_definition(
        (n, k, m) in (1usize..5, 1usize..5, 1usize..5),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..n * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = Tensor::new(vec![n, k], a.clone()).unwrap().matmul(&Tensor::new(vec![k, m], b.clone()).unwrap()).unwrap();
        for i in 0..n {
            for j in 0..m {
                let want: f64 = (0..k).map(|t| a[i * k + t] * b[t * m + j]).sum();
                prop_assert!((c.data()[i * m + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn datasets_round_trip_through_bytes(
        rows in 1usize..12,
        dims in (1usize..6, 1usize..6),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let xa = Tensor::new(vec![rows, dims.0], (0..rows * dims.0).map(|_| rng.random::<f64>()).collect()).unwrap();
        let xb = Tensor::new(vec![rows, dims.1], (0..rows * dims.1).map(|_| rng.random_range(-9.0..9.0)).collect()).unwrap();
        let labels = (0..rows).map(|_| rng.random_range(0..4u16)).collect();
        let ds = PairedDataset::new(4, vec![xa, xb], labels).unwrap();
        let bytes = dataset_to_bytes(&ds).unwrap();
        prop_assert_eq!(&dataset_from_bytes(&bytes).unwrap(), &ds);
        // any flipped payload bit is caught
        let i = rng.random_range(8..bytes.len());
        let mut bad = bytes.clone();
        bad[i] ^= 1 << rng.random_range(0..8);
        prop_assert!(dataset_from_bytes(&bad).is_err());
    }
}

fn small_problem() -> (PairedDataset, PairedDataset, ModelConfig) {
    let cfg = ToyDatasetConfig {
        per_class: 20,
        dim_a: 12,
        dim_b: 6,
        style_dims: 3,
        pairs_per_instance: 2,
        ..Default::default()
    };
    let data = generate_toy_multimodal(&cfg).unwrap();
    let splits = make_splits(&data, &cfg).unwrap();
    let [la, lb] = cfg.likelihoods();
    let model = ModelConfig::mmvae(
        vec![
            ModalityConfig::new("a", cfg.dim_a, vec![8], la),
            ModalityConfig::new("b", cfg.dim_b, vec![8], lb),
        ],
        3,
    );
    (splits.train, splits.val, model)
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        k: 4,
        epochs: 3,
        batch_size: 16,
        validation_k: 4,
        validation_rows: 32,
        ..Default::default()
    }
}

#[test]
fn resuming_from_a_checkpoint_reproduces_the_uninterrupted_run() {
    let (train, val, model) = small_problem();
    let mut full = Trainer::new(model.clone(), quick_config()).unwrap();
    full.train(&train, Some(&val), &mut |_| {}).unwrap();

    let mut first = Trainer::new(model, TrainConfig { epochs: 1, ..quick_config() }).unwrap();
    first.train(&train, Some(&val), &mut |_| {}).unwrap();
    let bytes = Checkpoint::from_trainer(&first, None).to_bytes().unwrap();
    let mut resumed = Checkpoint::from_bytes(&bytes).unwrap().into_trainer(Some(quick_config())).unwrap();
    resumed.train(&train, Some(&val), &mut |_| {}).unwrap();

    assert_eq!(
        Checkpoint::from_trainer(&full, None).to_bytes().unwrap(),
        Checkpoint::from_trainer(&resumed, None).to_bytes().unwrap()
    );
}

#[test]
fn training_improves_the_validation_bound_for_every_objective() {
    let (train, val, model) = small_problem();
    for (objective, estimator) in [
        (ObjectiveKind::Elbo, "standard"),
        (ObjectiveKind::MoeIwaeLoose, "dreg"),
        (ObjectiveKind::MoeIwaeTight, "dreg"),
        (ObjectiveKind::MmisElbo, "standard"),
    ] {
        let config = TrainConfig {
            objective,
            estimator: estimator.parse().unwrap(),
            epochs: 4,
            ..quick_config()
        };
        let mut t = Trainer::new(model.clone(), config).unwrap();
        t.train(&train, Some(&val), &mut |_| {}).unwrap();
        let first = t.history.first().unwrap().validation.unwrap();
        let last = t.history.last().unwrap().validation.unwrap();
        assert!(last > first, "{objective}: {first} -> {last}");
    }
}

#[test]
fn poe_models_train_with_a_single_stratum() {
    let (train, val, mut model) = small_problem();
    model = ModelConfig::poe(model.modalities.clone(), model.latent_dim);
    let mut t = Trainer::new(model, TrainConfig { epochs: 1, ..quick_config() }).unwrap();
    let mut shares = Vec::new();
    t.train(&train, Some(&val), &mut |r| shares.push(r.weight_shares.clone())).unwrap();
    assert!(!shares.is_empty());
    assert!(shares.iter().all(|s| s.len() == 1 && (s[0] - 1.0).abs() < 1e-12), "{shares:?}");
}
