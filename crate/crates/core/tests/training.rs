use faircon::dataset::{generate_synthetic, SkewSpec, SplitDataset, SplitSizes};
use faircon::evaluation::{accuracy, evaluate, leakage, EvalSplit, FairnessReport, ProbeConfig};
use faircon::numkit::{matmul_nn, Matrix};
use faircon::trainers::{run_inlp, train, Method, TrainConfig, TrainedModel};

fn sizes() -> SplitSizes {
    SplitSizes {
        train: 3_000,
        dev: 600,
        test: 600,
    }
}

fn skewed() -> SplitDataset {
    generate_synthetic(&SkewSpec::default(), sizes(), 41).unwrap()
}

fn config(method: Method, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::for_method(method);
    cfg.hidden = 32;
    cfg.max_epochs = 15;
    cfg.learning_rate = 2e-3;
    cfg.seed = seed;
    cfg
}

fn test_report(model: &TrainedModel, data: &SplitDataset) -> FairnessReport {
    evaluate(model, data, EvalSplit::Test, None, &ProbeConfig::default(), 3).unwrap()
}

fn without_time(mut r: FairnessReport) -> FairnessReport {
    r.time_seconds = 0.0;
    r.time_ratio = None;
    r
}

#[test]
fn ce_learns_separable_data() {
    let spec = SkewSpec {
        class_separation: 8.0,
        protected_shift: 0.0,
        ..SkewSpec::default()
    };
    let data = generate_synthetic(&spec, sizes(), 2).unwrap();
    let model = train(&data, &config(Method::Ce, 1)).unwrap();
    let report = test_report(&model, &data);
    assert!(report.accuracy >= 0.95, "{}", report.accuracy);
}

#[test]
fn every_method_is_deterministic() {
    let data = generate_synthetic(
        &SkewSpec::default(),
        SplitSizes {
            train: 600,
            dev: 200,
            test: 200,
        },
        4,
    )
    .unwrap();
    for method in Method::ALL {
        let mut cfg = config(method, 9);
        cfg.max_epochs = 3;
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a.history, b.history, "{method}");
        assert_eq!(a.encoder, b.encoder, "{method}");
        assert_eq!(a.head, b.head, "{method}");
        assert!(a.history.len() <= if method == Method::ConFt || method == Method::Inlp { 2 * cfg.max_epochs } else { cfg.max_epochs });
        assert!(a.train_seconds > 0.0);
        assert_eq!(without_time(test_report(&a, &data)), without_time(test_report(&b, &data)), "{method}");
    }
}

#[test]
fn debiasing_methods_lower_leakage_against_ce() {
    let data = skewed();
    let ce = test_report(&train(&data, &config(Method::Ce, 5)).unwrap(), &data);
    let con_ft = test_report(&train(&data, &config(Method::ConFt, 5)).unwrap(), &data);
    let mut adv_cfg = config(Method::Adv, 5);
    adv_cfg.adv.as_mut().unwrap().lambda = 1.0;
    let adv = test_report(&train(&data, &adv_cfg).unwrap(), &data);
    assert!(con_ft.leakage_h < ce.leakage_h, "con_ft {} vs ce {}", con_ft.leakage_h, ce.leakage_h);
    assert!(adv.leakage_h < ce.leakage_h, "adv {} vs ce {}", adv.leakage_h, ce.leakage_h);
}

#[test]
fn inlp_projector_is_an_orthogonal_projection() {
    let data = skewed();
    let cfg = config(Method::Inlp, 6);
    let mut ce_cfg = cfg.clone();
    ce_cfg.set_method(Method::Ce);
    let base = train(&data, &ce_cfg).unwrap();
    let projected = run_inlp(&base, &data, &cfg, 10).unwrap();
    let p = &projected.projector.as_ref().unwrap().matrix;
    let pp = matmul_nn(p, p).unwrap();
    assert!(pp.sub(p).unwrap().frobenius_norm() < 1e-8);
    assert!(p.sub(&p.transpose()).unwrap().frobenius_norm() < 1e-12);
    assert!(projected.projector.as_ref().unwrap().iterations >= 1);

    // projection only removes directions, so the main task fits no better
    let train_acc = |m: &TrainedModel| accuracy(&m.predict(&data.train.x).unwrap(), &data.train.labels).unwrap();
    assert!(train_acc(&projected) <= train_acc(&base) + 1e-12, "{} > {}", train_acc(&projected), train_acc(&base));
}

#[test]
fn probe_sits_at_chance_without_a_protected_signal() {
    let spec = SkewSpec {
        protected_shift: 0.0,
        ..SkewSpec::default()
    };
    let data = generate_synthetic(&spec, sizes(), 8).unwrap();
    // the train table is still skewed, so the probe can only pick the
    // attribute up through the class signal, which the balanced test undoes
    let score = leakage(
        &data.train.x,
        &data.train.protected,
        &data.test.x,
        &data.test.protected,
        &ProbeConfig::default(),
        1,
    )
    .unwrap();
    assert!((score - 0.5).abs() <= 0.03, "{score}");
}

#[test]
fn projected_representations_keep_their_shape() {
    let data = skewed();
    let cfg = config(Method::Inlp, 7);
    let model = train(&data, &cfg).unwrap();
    let h: Matrix = model.representations(&data.test.x).unwrap();
    assert_eq!((h.rows(), h.cols()), (data.test.len(), cfg.hidden));
}
