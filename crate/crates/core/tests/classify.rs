mod common;

use common::{exact_hinge_ovr_predict, gaussian_blobs};
use framegan::classify::{
    accuracy, argmax, evaluate_softmax, evaluate_svm, svm_predict, svm_train, svm_train_with_history, EvalReport, Route,
    SvmConfig, SvmModel,
};
use framegan::data::{FrameDataset, FrameItem};
use framegan::gan::GanConfig;
use framegan::transfer::{xavier_classifier, ClassifierVariant, FeatureMatrix, VariantKind};
use framegan::{Error, Tensor};
use proptest::prelude::*;

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}

fn names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("c{i}")).collect()
}

fn separable() -> (Vec<Vec<f64>>, Vec<usize>) {
    (vec![vec![2.0, 1.0], vec![3.0, 2.5], vec![-1.0, -2.0], vec![-2.5, -0.5]], vec![0, 0, 1, 1])
}

#[test]
fn separable_points_are_fit_exactly() {
    let (rows, labels) = separable();
    let model = svm_train(&tensor(&rows), &labels, &names(2), &SvmConfig::default()).unwrap();
    assert_eq!(svm_predict(&model, &tensor(&rows)).unwrap(), labels);
    assert_eq!(model.num_classes(), 2);
    assert_eq!(model.dim(), 2);
}

#[test]
fn xor_cannot_be_fit() {
    let rows = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]];
    let labels = vec![0, 0, 1, 1];
    for seed in 0..5 {
        let model = svm_train(&tensor(&rows), &labels, &names(2), &SvmConfig { seed, ..Default::default() }).unwrap();
        let pred = svm_predict(&model, &tensor(&rows)).unwrap();
        assert!(accuracy(&pred, &labels).unwrap() <= 0.75);
    }
}

#[test]
fn blobs_match_exact_hinge_solver() {
    let (rows, labels) = gaussian_blobs(&[[0.0, 0.0], [2.5, 0.5], [0.5, 2.5]], 67, 4);
    let model = svm_train(&tensor(&rows), &labels, &names(3), &SvmConfig::default()).unwrap();
    let ours = accuracy(&svm_predict(&model, &tensor(&rows)).unwrap(), &labels).unwrap();
    let oracle = accuracy(&exact_hinge_ovr_predict(&rows, &labels, 3, 1.0), &labels).unwrap();
    assert!((ours - oracle).abs() <= 0.02, "ours {ours}, oracle {oracle}");
}

fn hand_model() -> SvmModel {
    SvmModel {
        weights: vec![vec![1.0, -2.0, 0.5], vec![-0.5, 1.0, -1.0]],
        c: 1.0,
        class_names: names(2),
        mean: vec![1.0, 0.0],
        scale: vec![0.5, 2.0],
    }
}

#[test]
fn decision_values_by_hand() {
    let m = hand_model();
    // standardized: ((3 - 1) * 0.5, (1 - 0) * 2) = (1, 2)
    let v = m.decision_values(&[3.0, 1.0]).unwrap();
    assert_eq!(v, vec![1.0 * 1.0 - 2.0 * 2.0 + 0.5, -0.5 * 1.0 + 1.0 * 2.0 - 1.0]);
    assert_eq!(m.biases(), vec![0.5, -1.0]);
    assert_eq!(svm_predict(&m, &tensor(&[vec![3.0, 1.0]])).unwrap(), vec![1]);
    assert!(matches!(m.decision_values(&[1.0]), Err(Error::Shape(_))));
    assert!(matches!(svm_predict(&m, &tensor(&[vec![1.0, 2.0, 3.0]])), Err(Error::Shape(_))));
}

#[test]
fn zero_model_predicts_class_zero() {
    let m = SvmModel { weights: vec![vec![0.0; 3]; 4], c: 1.0, class_names: names(4), mean: vec![0.0; 2], scale: vec![1.0; 2] };
    let x = tensor(&[vec![5.0, -1.0], vec![0.0, 0.0], vec![-3.0, 7.0]]);
    assert_eq!(svm_predict(&m, &x).unwrap(), vec![0, 0, 0]);
}

#[test]
fn training_errors() {
    let (rows, _) = separable();
    assert!(matches!(svm_train(&tensor(&rows), &[1, 1, 1, 1], &names(2), &SvmConfig::default()), Err(Error::ClassCount(_))));
    let mut bad = rows.clone();
    bad[2][1] = f64::NAN;
    assert!(matches!(svm_train(&tensor(&bad), &[0, 0, 1, 1], &names(2), &SvmConfig::default()), Err(Error::Data(_))));
    assert!(matches!(svm_train(&tensor(&rows), &[0, 1], &names(2), &SvmConfig::default()), Err(Error::Label(_))));
    let c0 = SvmConfig { c: 0.0, ..Default::default() };
    assert!(matches!(svm_train(&tensor(&rows), &[0, 0, 1, 1], &names(2), &c0), Err(Error::InvalidParameter(_))));
}

#[test]
fn accuracy_examples() {
    assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
    assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
    assert_eq!(accuracy(&[0, 1, 2, 2], &[0, 1, 2, 0]).unwrap(), 0.75);
    assert!(matches!(accuracy(&[0], &[0, 1]), Err(Error::Contract(_))));
    assert_eq!(argmax(&[0.2, 0.7, 0.7]), 1);
}

#[test]
fn objective_settles_over_the_second_half() {
    let (rows, labels) = gaussian_blobs(&[[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]], 40, 9);
    let cfg = SvmConfig { epochs: 200, ..Default::default() };
    let (_, history) = svm_train_with_history(&tensor(&rows), &labels, &names(3), &cfg).unwrap();
    assert_eq!(history.len(), 200);
    let means: Vec<f64> = history[100..].chunks(20).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for pair in means.windows(2) {
        assert!(pair[1] <= pair[0] * (1.0 + 1e-3), "windowed objective rose: {means:?}");
    }
}

#[test]
fn standardization_is_stored_and_centered() {
    let (rows, labels) = gaussian_blobs(&[[10.0, -3.0], [14.0, 1.0]], 30, 2);
    let scaled: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[0] * 1000.0, r[1]]).collect();
    let m = svm_train(&tensor(&scaled), &labels, &names(2), &SvmConfig::default()).unwrap();
    let z: Vec<Vec<f64>> = scaled.iter().map(|r| m.standardize(r)).collect();
    for j in 0..2 {
        let mean = z.iter().map(|r| r[j]).sum::<f64>() / z.len() as f64;
        let var = z.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / z.len() as f64;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-9);
    }
}

#[test]
fn model_file_round_trip() {
    let (rows, labels) = gaussian_blobs(&[[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]], 10, 1);
    let m = svm_train(&tensor(&rows), &labels, &["walk".into(), "run".into(), "jump".into()], &SvmConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("svm_model.bin");
    m.write(&p).unwrap();
    assert_eq!(SvmModel::read(&p).unwrap(), m);
    std::fs::write(&p, b"garbage").unwrap();
    assert!(matches!(SvmModel::read(&p), Err(Error::Checkpoint { .. })));
}

#[test]
fn svm_route_reports_per_video() {
    let (rows, labels) = gaussian_blobs(&[[0.0, 0.0], [4.0, 4.0]], 6, 3);
    let fm = |from: usize, to: usize| FeatureMatrix {
        ids: (from..to).map(|i| format!("v{i:02}")).collect(),
        labels: labels[from..to].iter().map(|&l| Some(l)).collect(),
        dim: 2,
        data: rows[from..to].concat(),
    };
    let (train, test) = (fm(0, 12), fm(4, 12));
    let (model, report) = evaluate_svm(&train, &test, &names(2), &SvmConfig::default()).unwrap();
    assert_eq!(model.num_classes(), 2);
    assert_eq!(report.route, Route::Svm);
    assert_eq!(report.video_ids, test.ids);
    assert_eq!(report.accuracy, report.confusion_accuracy());
    let unlabeled = FeatureMatrix { labels: vec![None; test.rows()], ..test.clone() };
    assert!(matches!(evaluate_svm(&train, &unlabeled, &names(2), &SvmConfig::default()), Err(Error::Data(_))));
}

#[test]
fn uniform_network_falls_back_to_class_zero() {
    let backbone = GanConfig { base_channels: 2, ..GanConfig::default() }.discriminator_spec();
    let mut net = xavier_classifier(&backbone, ClassifierVariant::new(VariantKind::Conv4Replace, 3), 0).unwrap();
    for (name, t) in net.network.params.iter_mut() {
        if name.starts_with("LOGITS") {
            *t = Tensor::zeros(t.shape()).unwrap();
        }
    }
    let mut items = Vec::new();
    for (v, label) in [0, 0, 1, 2, 2, 2].into_iter().enumerate() {
        for f in 0..2 {
            let frame = Tensor::randn(&[3, 64, 64], 0.0, 0.3, (v * 2 + f) as u64).unwrap();
            items.push(FrameItem { frame, label: Some(label), video_id: format!("v{v}") });
        }
    }
    let data = FrameDataset { items, class_names: names(3) };
    let report = evaluate_softmax(&net, &data).unwrap();
    assert_eq!(report.predictions, vec![0; 6]);
    assert!((report.accuracy - 2.0 / 6.0).abs() < 1e-15);
    assert_eq!(report.confusion[2], vec![3, 0, 0]);

    let mut unlabeled = data.clone();
    unlabeled.items[3].label = None;
    assert!(evaluate_softmax(&net, &unlabeled).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn confusion_matrix_is_consistent(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60)) {
        let (pred, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let ids = (0..pred.len()).map(|i| i.to_string()).collect();
        let r = EvalReport::new(Route::Softmax, ids, pred.clone(), labels.clone(), 4).unwrap();
        let total: usize = r.confusion.iter().flatten().sum();
        prop_assert_eq!(total, labels.len());
        for (k, row) in r.confusion.iter().enumerate() {
            prop_assert_eq!(row.iter().sum::<usize>(), labels.iter().filter(|&&l| l == k).count());
        }
        prop_assert!((r.accuracy - r.confusion_accuracy()).abs() < 1e-15);
        prop_assert!((r.accuracy - accuracy(&pred, &labels).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn predictions_survive_feature_rescaling(scale in 0.01f64..100.0, seed in 0u64..20) {
        let (rows, labels) = gaussian_blobs(&[[0.0, 0.0], [2.0, 1.0], [1.0, 2.0]], 10, seed);
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
        let cfg = SvmConfig { epochs: 20, seed, ..Default::default() };
        let a = svm_predict(&svm_train(&tensor(&rows), &labels, &names(3), &cfg).unwrap(), &tensor(&rows)).unwrap();
        let b = svm_predict(&svm_train(&tensor(&scaled), &labels, &names(3), &cfg).unwrap(), &tensor(&scaled)).unwrap();
        prop_assert_eq!(a, b);
    }
}
