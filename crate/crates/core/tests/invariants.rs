use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use arfsfr::arf::{discretize_scale, lambda_from_raw, ArfConfig};
use arfsfr::checkpoint::Checkpoint;
use arfsfr::episodes::{sample_episode, ClassRecord, Dataset, Split};
use arfsfr::io::{encode_tensor, read_tensor};
use arfsfr::ops;
use arfsfr::spectral::{dct2_tensor, idct2_tensor};
use arfsfr::trainer::{accuracy, average_probabilities, EvalReport};
use arfsfr::{DType, Tape, Tensor};

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-10.0..10.0f64, n).prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
}

fn shape4() -> impl Strategy<Value = Vec<usize>> {
    (1..3usize, 1..4usize, 1..9usize, 1..9usize).prop_map(|(b, c, h, w)| vec![b, c, h, w])
}

fn toy_dataset(classes: usize, per_class: usize) -> Dataset {
    Dataset {
        classes: (0..classes)
            .map(|id| ClassRecord { id, split: Split::Train, samples: (0..per_class).map(|i| Tensor::scalar(i as f64)).collect() })
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dct_roundtrip_and_energy(x in shape4().prop_flat_map(tensor)) {
        let c = dct2_tensor(&x).unwrap();
        prop_assert!(idct2_tensor(&c).unwrap().max_abs_diff(&x) < 1e-9);
        prop_assert!((c.norm() - x.norm()).abs() < 1e-9 * (1.0 + x.norm()));
    }

    #[test]
    fn discrete_sizes_are_odd_and_bounded(raw in -50.0..50.0f64, rho in (1..6usize).prop_map(|k| 2 * k + 1), step in 1..4usize) {
        let lambda = lambda_from_raw(raw, rho);
        prop_assert!((1.0..=rho as f64).contains(&lambda));
        let n = discretize_scale(lambda, step, rho).unwrap();
        prop_assert!(n % 2 == 1 && n >= 1 && n <= 2 * (rho / step) + 1);
        let cfg = ArfConfig { rho_max: rho, sigma_step: step, ..ArfConfig::new(1, 1) };
        prop_assert!(cfg.achievable_sizes().contains(&n));
    }

    #[test]
    fn softmax_rows_sum_to_one(x in (1..5usize, 1..7usize).prop_flat_map(|(r, c)| tensor(vec![r, c])), shift in -100.0..100.0f64) {
        let tape = Tape::inference();
        let p = ops::softmax(tape.constant(x.clone()), 1).unwrap().value().clone();
        let cols = x.shape()[1];
        for row in p.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted = ops::softmax(tape.constant(x.map(|v| v + shift)), 1).unwrap().value().clone();
        prop_assert!(shifted.max_abs_diff(&p) < 1e-12);
    }

    #[test]
    fn grid_sample_with_identity_grid_is_identity(x in shape4().prop_flat_map(tensor)) {
        let (b, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let grid = ops::identity_grid(h, w);
        let grids: Vec<&Tensor> = (0..b).map(|_| &grid).collect();
        let grid = Tensor::stack(&grids).unwrap().into_reshape(&[b, 2, h, w]).unwrap();
        let y = ops::grid_sample_forward(&x, &grid).unwrap();
        prop_assert!(y.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn tensor_files_roundtrip(x in shape4().prop_flat_map(tensor)) {
        let bytes = encode_tensor(&x, DType::F64);
        prop_assert_eq!(bytes.len(), 7 + 4 * 4 + 8 * x.numel());
        let (back, dtype) = read_tensor(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(dtype, DType::F64);
        prop_assert_eq!(back, x.clone());
        let (narrow, _) = read_tensor(&mut encode_tensor(&x, DType::F32).as_slice()).unwrap();
        prop_assert!(narrow.max_abs_diff(&x) <= 1e-5 * 10.0);
    }

    #[test]
    fn truncated_checkpoints_are_rejected(cut in 0usize..60) {
        let mut tensors = std::collections::BTreeMap::new();
        tensors.insert("w".to_string(), Tensor::from_vec(vec![1.0, 2.0]));
        let bytes = Checkpoint { config_hash: [1; 32], tensors }.to_bytes().unwrap();
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
    }

    #[test]
    fn episodes_are_disjoint_and_class_major(
        classes in 2..12usize,
        way in 2..6usize,
        shot in 1..4usize,
        query in 0..4usize,
        seed in any::<u64>(),
    ) {
        prop_assume!(way <= classes);
        let ds = toy_dataset(classes, shot + query + 1);
        let pool: Vec<usize> = (0..classes).collect();
        let ep = sample_episode(&ds, &pool, way, shot, query, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(ep.support.len(), way * shot);
        prop_assert_eq!(ep.query.len(), way * query);
        let mut chosen = ep.classes.clone();
        chosen.sort();
        chosen.dedup();
        prop_assert_eq!(chosen.len(), way);
        let mut all: Vec<_> = ep.support.iter().chain(&ep.query).map(|r| (r.class, r.index)).collect();
        let n = all.len();
        all.sort();
        all.dedup();
        prop_assert_eq!(all.len(), n);
        for (r, l) in ep.support.iter().zip(ep.support_labels()) {
            prop_assert_eq!(ep.classes[l], r.class);
        }
    }

    #[test]
    fn averaged_probabilities_stay_on_the_simplex(
        logits in prop::collection::vec(tensor(vec![4, 5]), 1..5),
    ) {
        let probs: Vec<Tensor> = logits.iter().map(|l| ops::softmax_forward(l, 1).unwrap()).collect();
        let avg = average_probabilities(&probs).unwrap();
        for row in avg.data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        let acc = accuracy(&avg, &[0, 1, 2, 3]);
        prop_assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn report_interval_is_nonnegative(accs in prop::collection::vec(0.0..=1.0f64, 1..50)) {
        let r = EvalReport::from_accuracies(accs.clone());
        prop_assert!(r.ci95 >= 0.0);
        let lo = accs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(r.mean >= 100.0 * lo - 1e-9 && r.mean <= 100.0 * hi + 1e-9);
    }
}
