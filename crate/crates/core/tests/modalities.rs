//! Branch builders, the training loop and prediction paths.

use trimodal_core::dataio::{
    apply_normalization, fit_normalization, generate_trimodal, split_dataset, DatasetGeometry, SplitRatios,
    SyntheticSpec,
};
use trimodal_core::modalities::{
    build_biomarker_lstm, build_cognitive_lstm, build_for, build_mri_cnn, expected_layout, predict_batch,
    predict_modality, train_modality, LabeledSamples, Modality, TrainConfig,
};
use trimodal_core::nn::{Rng, Tensor};
use trimodal_core::Error;

fn random_samples(shape: &[usize], n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let mut t = Tensor::zeros(shape);
            t.data_mut().iter_mut().for_each(|v| *v = rng.normal(0.0, 1.0));
            t
        })
        .collect()
}

#[test]
fn structure_matches_expected_layout() {
    for m in Modality::ALL {
        let spec = build_for(m, DatasetGeometry::default().input(m), 3).unwrap();
        spec.validate_structure().unwrap();
        assert_eq!(spec.network.kinds(), expected_layout(m));
    }
    let cog = build_cognitive_lstm(4, 3, 1).unwrap();
    let bio = build_biomarker_lstm(4, 3, 1).unwrap();
    assert_eq!(cog.network.kinds(), bio.network.kinds());
    assert!(build_cognitive_lstm(1, 3, 1).is_ok());
}

#[test]
fn counting_contract_one_epoch() {
    let spec = build_cognitive_lstm(3, 2, 1).unwrap();
    let train = LabeledSamples::new(random_samples(&[3, 2], 4, 1), vec![0, 1, 0, 1]).unwrap();
    let val = LabeledSamples::new(random_samples(&[3, 2], 2, 2), vec![0, 1]).unwrap();
    let cfg = TrainConfig { epochs: 1, batch_size: 2, ..Default::default() };
    let (_, history) = train_modality(spec, &train, &val, &cfg).unwrap();
    assert_eq!(history.epochs(), 1);
    assert_eq!(history.train_loss.len(), 1);
    assert_eq!(history.optimizer_steps, 2);
}

#[test]
fn training_is_bit_reproducible_and_keeps_best_epoch() {
    let ds = generate_trimodal(4, &SyntheticSpec { n_subjects: 60, ..Default::default() }).unwrap();
    let train = ds.samples(Modality::Biomarker);
    let val = LabeledSamples::new(train.inputs[..12].to_vec(), train.labels[..12].to_vec()).unwrap();
    let cfg = TrainConfig { epochs: 4, batch_size: 8, ..Default::default() };
    let run = || train_modality(build_biomarker_lstm(4, 3, 9).unwrap(), &train, &val, &cfg).unwrap();
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(ha, hb);
    for ((ka, ta), (kb, tb)) in a.network.named_tensors().iter().zip(b.network.named_tensors()) {
        assert_eq!(ka, &kb);
        assert_eq!(ta.data(), tb.data());
    }
    let best = ha.val_loss[ha.best_epoch];
    assert!(best <= ha.val_loss[0]);
    assert!(ha.val_loss.iter().all(|&l| l >= best));
}

#[test]
fn rejects_bad_training_inputs() {
    let spec = build_cognitive_lstm(3, 2, 1).unwrap();
    let one_class = LabeledSamples::new(random_samples(&[3, 2], 4, 1), vec![1; 4]).unwrap();
    let val = LabeledSamples::new(random_samples(&[3, 2], 2, 2), vec![0, 1]).unwrap();
    let cfg = TrainConfig { epochs: 1, batch_size: 2, ..Default::default() };
    assert!(matches!(train_modality(spec.clone(), &one_class, &val, &cfg), Err(Error::Data(_))));
    let wrong = LabeledSamples::new(random_samples(&[3, 5], 4, 1), vec![0, 1, 0, 1]).unwrap();
    assert!(matches!(train_modality(spec.clone(), &wrong, &val, &cfg), Err(Error::Dimension { .. })));
    let tiny_batch = TrainConfig { batch_size: 1, ..cfg };
    assert!(train_modality(spec, &wrong, &val, &tiny_batch).is_err());
}

#[test]
fn batch_and_single_prediction_agree() {
    for (spec, shape) in [
        (build_mri_cnn(16, 3, 2).unwrap(), vec![16, 16, 3]),
        (build_cognitive_lstm(6, 3, 2).unwrap(), vec![6, 3]),
    ] {
        let xs = random_samples(&shape, 7, 5);
        let batch = predict_batch(&spec, &xs).unwrap();
        for (x, p) in xs.iter().zip(&batch) {
            let single = predict_modality(&spec, x).unwrap();
            let q = single.probabilities.unwrap();
            assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
            assert!((q[0] + q[1] - 1.0).abs() < 1e-12 && q.iter().all(|v| *v >= 0.0));
            assert_eq!(predict_modality(&spec, x).unwrap(), single);
        }
        let bad = Tensor::zeros(&[2, 2]);
        assert!(matches!(predict_modality(&spec, &bad), Err(Error::Dimension { .. })));
    }
}

#[test]
fn cognitive_branch_learns_synthetic_cohort() {
    let ds = generate_trimodal(42, &SyntheticSpec { n_subjects: 800, ..Default::default() }).unwrap();
    let split = split_dataset(&ds, SplitRatios::default(), 42).unwrap();
    let stats = fit_normalization(&ds.subset(&split.train));
    let train = apply_normalization(&stats, &ds.subset(&split.train)).unwrap();
    let val = apply_normalization(&stats, &ds.subset(&split.val)).unwrap();
    let spec = build_cognitive_lstm(6, 3, 42).unwrap();
    let cfg = TrainConfig { epochs: 30, ..Default::default() };
    let (_, history) =
        train_modality(spec, &train.samples(Modality::Cognitive), &val.samples(Modality::Cognitive), &cfg).unwrap();
    let acc = history.val_accuracy[history.best_epoch];
    assert!(acc >= 0.80, "validation accuracy {acc}");
}
