use infotransfer::config::ExperimentConfig;
use infotransfer::data::{self, make_synthetic_transfer_pair, split_target, LabeledSet, Standardizer};
use infotransfer::linalg::Matrix;
use infotransfer::models::{Activation, MlpModel};
use infotransfer::pipeline::{
    evaluate, posttransfer_train, prepare_data, pretransfer_train, run_experiment, run_experiment_with, write_csv_rows,
    BatchOrigin, CSV_COLUMNS,
};
use infotransfer::regularizer::{LautumRegularizer, RegSetup, Regularizer, RegularizerRegistry, Standard};
use infotransfer::Error;

fn small(method: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        method: method.into(),
        pre_epochs: 3,
        post_epochs: 5,
        seed: 11,
        ..ExperimentConfig::benchmark()
    };
    c.dataset.n_source = 300;
    c.dataset.n_source_test = 100;
    c.dataset.n_target = 400;
    c.dataset.n_target_test = 100;
    c
}

#[test]
fn batches_are_tagged_by_origin() {
    for method in ["standard", "lautum", "mi", "lautum+mi"] {
        let art = run_experiment_with(&small(method), &RegularizerRegistry::with_builtins()).unwrap();
        let its = &art.pretrain.iterations;
        assert_eq!(its.len(), 3 * (300 / 50));
        for it in its {
            assert_eq!(it.ce_origin, BatchOrigin::SourceLabeled);
            let want = if method == "standard" { None } else { Some(BatchOrigin::TargetUnlabeled) };
            assert_eq!(it.reg_origin, want, "{method}");
            assert_eq!(it.lautum.is_some(), method.contains("lautum"));
            assert_eq!(it.mi.is_some(), method.contains("mi"));
        }
    }
}

#[test]
fn applied_loss_subtracts_lautum_and_adds_mi() {
    let cfg = small("lautum+mi");
    let art = run_experiment_with(&cfg, &RegularizerRegistry::with_builtins()).unwrap();
    for it in art.pretrain.iterations.iter().filter(|i| !i.skipped) {
        let want = it.ce - cfg.lambda_lautum * it.lautum.unwrap() + cfg.lambda_mi * it.mi.unwrap();
        assert!((it.applied_loss - want).abs() < 1e-9 * (1.0 + want.abs()));
    }
}

#[test]
fn projection_is_fixed_within_an_epoch_and_redrawn_across() {
    let cfg = small("lautum");
    let data = prepare_data(&cfg).unwrap();
    let model = MlpModel::new(&[16, 64, 32, 5], Activation::Tanh, 1).unwrap();
    let setup = RegSetup {
        config: &cfg,
        input_dim: 16,
        feature_dim: 32,
        classes: 5,
        target_unlabeled: &data.target.unlabeled,
    };
    let mut reg = LautumRegularizer::new(&setup, 1.0).unwrap();
    reg.begin_epoch(&model, 0).unwrap();
    let first = reg.projection().to_vec();
    let batch = data::select_rows(&data.target.unlabeled, &(0..50).collect::<Vec<_>>());
    reg.step(&model, &batch).unwrap();
    reg.step(&model, &batch).unwrap();
    assert_eq!(reg.projection(), &first[..]);
    reg.begin_epoch(&model, 1).unwrap();
    assert_ne!(reg.projection(), &first[..]);
    reg.begin_epoch(&model, 0).unwrap();
    assert_eq!(reg.projection(), &first[..], "projection depends only on (seed, epoch)");
}

#[test]
fn zero_post_epochs_leave_the_model_unchanged() {
    let cfg = ExperimentConfig { post_epochs: 0, ..small("standard") };
    let data = prepare_data(&cfg).unwrap();
    let mut model = MlpModel::new(&[16, 8, 5], Activation::Tanh, 2).unwrap();
    let before = model.flat_params();
    let trace = posttransfer_train(&cfg, &mut model, &data.target.labeled).unwrap();
    assert!(trace.is_empty());
    assert_eq!(model.flat_params(), before);
}

#[test]
fn ten_labeled_samples_are_memorized() {
    let cfg = ExperimentConfig { post_epochs: 200, ..small("standard") };
    let data = prepare_data(&cfg).unwrap();
    let mut model = MlpModel::new(&[16, 64, 32, 5], Activation::Tanh, 3).unwrap();
    posttransfer_train(&cfg, &mut model, &data.target.labeled).unwrap();
    assert_eq!(evaluate(&model, &data.target.labeled).unwrap(), 1.0);
}

#[test]
fn post_transfer_rejects_an_empty_labeled_set() {
    let cfg = small("standard");
    let mut model = MlpModel::new(&[2, 2], Activation::Tanh, 0).unwrap();
    let empty = LabeledSet::new(Matrix::zeros(0, 2), vec![], 2).unwrap();
    assert!(matches!(posttransfer_train(&cfg, &mut model, &empty), Err(Error::Validation(_))));
}

#[test]
fn evaluation_extremes() {
    // A constant-logit model always predicts class 0: chance on a balanced set.
    let model = MlpModel::zeros(&[3, 10], Activation::Tanh).unwrap();
    let labels: Vec<usize> = (0..1000).map(|i| i % 10).collect();
    let set = LabeledSet::new(Matrix::zeros(1000, 3), labels, 10).unwrap();
    assert_eq!(evaluate(&model, &set).unwrap(), 0.1);

    // A linear model reading off a one-hot input is exact.
    let mut eye = MlpModel::zeros(&[4, 4], Activation::Tanh).unwrap();
    eye.set_flat_params(&Matrix::identity(4).as_slice().iter().copied().chain([0.0; 4]).collect::<Vec<_>>()).unwrap();
    let onehot = LabeledSet::new(Matrix::identity(4), vec![0, 1, 2, 3], 4).unwrap();
    assert_eq!(evaluate(&eye, &onehot).unwrap(), 1.0);
    assert!(evaluate(&eye, &LabeledSet::new(Matrix::zeros(0, 4), vec![], 4).unwrap()).is_err());
}

fn train_plain(set: &LabeledSet, epochs: usize, seed: u64) -> MlpModel {
    let cfg = ExperimentConfig { post_epochs: epochs, seed, ..ExperimentConfig::default() };
    let mut model = MlpModel::new(&[set.dim(), 64, 32, set.classes], Activation::Tanh, seed).unwrap();
    posttransfer_train(&cfg, &mut model, set).unwrap();
    model
}

#[test]
fn benchmark_has_a_transfer_gap_and_is_solvable() {
    let (source, pool) = make_synthetic_transfer_pair(5, 16, 5, 1000, 1500, 1.5).unwrap();
    let split = split_target(&pool, 1000, 500, 5).unwrap();
    let st = Standardizer::fit(&source.inputs).unwrap();
    let std_set = |s: &LabeledSet| LabeledSet { inputs: st.apply(&s.inputs), ..s.clone() };
    let source = std_set(&source);
    let test = std_set(&split.test);
    let source_only = train_plain(&source, 20, 1);
    let target_only = train_plain(&std_set(&split.labeled), 20, 2);
    let gap = evaluate(&source_only, &test).unwrap();
    let solved = evaluate(&target_only, &test).unwrap();
    assert!(gap <= 0.5, "source-only model scores {gap} on target");
    assert!(solved >= 0.9, "target-trained model scores {solved}");
}

#[test]
fn results_reproduce_from_their_echoed_config() {
    let a = run_experiment(&small("lautum")).unwrap();
    let b = run_experiment(&a.config).unwrap();
    assert_eq!(a.target_test_accuracy.to_bits(), b.target_test_accuracy.to_bits());
    assert_eq!(a.source_test_accuracy.to_bits(), b.source_test_accuracy.to_bits());
    assert_eq!(a.lautum_trace.len(), 3);
    assert_eq!(a.post_loss_trace.len(), 5);
}

#[test]
fn result_rows_parse_back_with_a_fixed_schema() {
    let r = run_experiment(&small("mi")).unwrap();
    let mut buf = Vec::new();
    write_csv_rows(&mut buf, true, &[r.csv_row(), r.csv_row()]).unwrap();
    let mut rd = csv::Reader::from_reader(&buf[..]);
    assert_eq!(rd.headers().unwrap().iter().collect::<Vec<_>>(), CSV_COLUMNS);
    for rec in rd.records() {
        let rec = rec.unwrap();
        assert_eq!(&rec[0], "mi");
        assert_eq!(rec[3].parse::<f64>().unwrap(), r.target_test_accuracy);
        assert_eq!(&rec[12], "ok");
    }
}

#[test]
fn standard_regularizer_contributes_nothing() {
    let cfg = small("standard");
    let data = prepare_data(&cfg).unwrap();
    let mut a = MlpModel::new(&[16, 64, 32, 5], Activation::Tanh, 4).unwrap();
    let mut b = a.clone();
    let out_a = pretransfer_train(&cfg, &mut a, &data.source_train, &data.target.unlabeled, &mut Standard).unwrap();
    let zero_lambda = ExperimentConfig { lambda_lautum: 0.0, ..small("lautum") };
    let setup = RegSetup {
        config: &zero_lambda,
        input_dim: 16,
        feature_dim: 32,
        classes: 5,
        target_unlabeled: &data.target.unlabeled,
    };
    let mut reg = RegularizerRegistry::with_builtins().create("lautum", &setup).unwrap();
    assert!(!reg.is_active());
    let out_b = pretransfer_train(&cfg, &mut b, &data.source_train, &data.target.unlabeled, reg.as_mut()).unwrap();
    assert_eq!(a.flat_params(), b.flat_params());
    assert_eq!(out_a.epoch_ce, out_b.epoch_ce);
}

#[test]
fn csv_datasets_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (source, pool) = make_synthetic_transfer_pair(9, 6, 3, 200, 200, 1.5).unwrap();
    let sp = dir.path().join("source.csv");
    let tp = dir.path().join("target.csv");
    data::write_csv_dataset(&source, &sp).unwrap();
    data::write_csv_dataset(&pool, &tp).unwrap();
    let mut cfg = ExperimentConfig { method: "lautum".into(), pre_epochs: 2, post_epochs: 2, labeled_target_count: 6, ..Default::default() };
    cfg.dataset.kind = "csv".into();
    cfg.dataset.source_path = Some(sp);
    cfg.dataset.target_path = Some(tp);
    cfg.dataset.n_source_test = 50;
    cfg.dataset.n_target_test = 50;
    let r = run_experiment(&cfg).unwrap();
    assert!((0.0..=1.0).contains(&r.target_test_accuracy));
    assert_eq!(r.total_iterations, 2 * (150 / 50));
}
