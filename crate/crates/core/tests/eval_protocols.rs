use vsfusion::eval::*;
use vsfusion::nnet::{ArchSpec, FusionKind, FusionVariant, Layer, Model};
use vsfusion::scenegen::{generate_dataset, CameraIntrinsics, Dataset, SceneConfig};
use vsfusion::train::TrainConfig;

/// Desk-sized images through a two-layer net: cheap enough for protocol
/// tests.
fn tiny_arch() -> ArchSpec {
    ArchSpec {
        name: "tiny".into(),
        input: [1, 64, 64],
        layers: vec![
            Layer::Conv { out_ch: 2, k: 4, stride: 4, pad: 0 },
            Layer::Relu,
            Layer::Flatten,
            Layer::Fc { out: 4 },
        ],
    }
}

fn data(seed: u64, n: usize, groups: u16) -> Dataset {
    let cfg = SceneConfig { seed, n_groups: groups, ..SceneConfig::default() };
    generate_dataset(&cfg, &CameraIntrinsics::desk(), n).unwrap().0
}

fn quick() -> TrainConfig {
    TrainConfig { epochs: 1, patience: 1, batch_size: 16, ..TrainConfig::default() }
}

#[test]
fn evaluate_is_deterministic_and_order_free() {
    let test = data(3, 60, 17);
    let m = Model::<f32>::new(&ArchSpec::desknet(), &FusionVariant::new(FusionKind::MlpBranch, 1).unwrap(), 4).unwrap();
    let a = evaluate(&m, &test, Some(4)).unwrap();
    assert_eq!(a, evaluate(&m, &test, Some(4)).unwrap());
    let mut rev = test.clone();
    rev.samples.reverse();
    let b = evaluate(&m, &rev, Some(4)).unwrap();
    assert_eq!(a.outputs, b.outputs);
    for o in &a.outputs {
        assert!((o.r2 - (1.0 - o.mse / o.dummy_mse)).abs() < 1e-9);
    }
    assert_eq!(a.output_names, ["x", "y", "z", "phi"]);
    assert_eq!(a.rotation_error_deg, None);
}

#[test]
fn mean_predictor_scores_zero() {
    let test = data(5, 40, 17);
    let k = test.label_dim;
    let mut mean = vec![0.0f64; k];
    for s in &test.samples {
        for (m, &v) in mean.iter_mut().zip(&s.label) {
            *m += v as f64 / test.len() as f64;
        }
    }
    let pred: Vec<f32> = (0..test.len()).flat_map(|_| mean.iter().map(|&v| v as f32)).collect();
    let r = report_from_predictions("mean", FusionKind::Stateless, None, &test, &pred).unwrap();
    for o in &r.outputs {
        // f32 rounding of the mean only
        assert!(o.r2.abs() < 1e-6, "{o:?}");
    }
}

#[test]
fn pose7_reports_rotation_error() {
    let mut d = data(6, 8, 17);
    d.label_dim = 7;
    for s in &mut d.samples {
        s.label = vec![s.label[0], s.label[1], s.label[2], 0.0, 0.0, 0.0, 1.0];
    }
    let pred: Vec<f32> = d.samples.iter().flat_map(|s| s.label.clone()).collect();
    let r = report_from_predictions("p", FusionKind::Stateless, None, &d, &pred);
    // quaternion columns are constant, so R2 on them is undefined
    assert!(matches!(r, Err(EvalError::ZeroVariance)));
    let mut pred = pred;
    for c in pred.chunks_mut(7) {
        c[6] = -1.0; // double cover
    }
    let q: Vec<[f64; 4]> = pred.chunks(7).map(|c| [c[3] as f64, c[4] as f64, c[5] as f64, c[6] as f64]).collect();
    let truth = vec![vsfusion::poses::Quaternion::IDENTITY; q.len()];
    assert_eq!(mean_rotation_error_deg(&truth, &q).unwrap(), 0.0);
}

#[test]
fn paired_experiment_pairs_by_seed() {
    let (tr, va, te) = (data(1, 48, 17), data(2, 16, 17), data(3, 24, 17));
    let split = Split { train: &tr, val: &va, test: &te };
    let plan = ExperimentPlan {
        arch: tiny_arch(),
        variants: vec![FusionVariant::stateless(), FusionVariant::new(FusionKind::SingleNeuron, 1).unwrap()],
        train: quick(),
        jobs: 2,
    };
    let exp = paired_experiment(&plan, &split, &[7, 3, 5], &|_| {}).unwrap();
    assert_eq!(exp.records.len(), 6);
    let cmp = exp.compare(FusionKind::Stateless, FusionKind::SingleNeuron).unwrap();
    assert_eq!(cmp.keys, [3, 5, 7]);
    for (oi, o) in cmp.outputs.iter().enumerate() {
        for (i, &k) in cmp.keys.iter().enumerate() {
            assert_eq!(o.baseline[i], exp.get(FusionKind::Stateless, k).unwrap().report.outputs[oi].r2);
            assert_eq!(o.candidate[i], exp.get(FusionKind::SingleNeuron, k).unwrap().report.outputs[oi].r2);
        }
    }
    // one job gives the same records
    let serial = paired_experiment(&ExperimentPlan { jobs: 1, ..plan.clone() }, &split, &[7, 3, 5], &|_| {}).unwrap();
    assert_eq!(serial.compare(FusionKind::Stateless, FusionKind::SingleNeuron).unwrap(), cmp);

    let same = ExperimentPlan { variants: vec![FusionVariant::stateless()], ..plan };
    let e = paired_experiment(&same, &split, &[1, 2], &|_| {}).unwrap();
    let c = e.compare(FusionKind::Stateless, FusionKind::Stateless).unwrap();
    for o in &c.outputs {
        assert!(o.deltas().iter().all(|&d| d == 0.0));
        assert_eq!(o.p_greater, None);
        assert!(matches!(wilcoxon_exact(&o.deltas(), Alternative::Greater), Err(EvalError::AllZero)));
    }
    assert!(paired_experiment(&same, &split, &[1], &|_| {}).is_err());
}

#[test]
fn loo_splits_partition_by_group() {
    let d = data(9, 90, 6);
    let splits = loo_splits(&d).unwrap();
    assert_eq!(splits.len(), 6);
    for s in &splits {
        assert!(s.test.iter().all(|&i| d.samples[i].group_id == s.group));
        assert!(s.train.iter().chain(&s.val).all(|&i| d.samples[i].group_id != s.group));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..d.len()).collect::<Vec<_>>());
        let rest = d.len() - s.test.len();
        assert_eq!(s.val.len(), rest / 10);
    }
    let mut missing = d.clone();
    missing.samples.retain(|s| s.group_id != 4);
    assert!(matches!(loo_splits(&missing), Err(EvalError::EmptyGroup(4))));
    let mut two = d.clone();
    two.n_groups = 2;
    assert!(loo_splits(&two).is_err());
}

#[test]
fn loo_crossval_yields_one_pair_per_group() {
    let d = data(10, 120, 4);
    let plan = ExperimentPlan {
        arch: tiny_arch(),
        variants: vec![FusionVariant::stateless(), FusionVariant::new(FusionKind::MlpBranch, 1).unwrap()],
        train: quick(),
        jobs: 1,
    };
    let exp = loo_crossval(&plan, &d, 1, &|_| {}).unwrap();
    let c = exp.compare(FusionKind::Stateless, FusionKind::MlpBranch).unwrap();
    assert_eq!(c.keys, [0, 1, 2, 3]);
    let z = c.output("z").unwrap();
    let mut sorted = z.deltas();
    sorted.sort_by(f64::total_cmp);
    assert_eq!(z.median_delta(), 0.5 * (sorted[1] + sorted[2]));
    assert!(summary_csv([&c]).lines().count() == 5);
    assert_eq!(reports_csv(exp.records.values().map(|r| &r.report)).lines().count(), 1 + 8 * 4);
}
