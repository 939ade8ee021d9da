use mixseg::data::{BenchmarkSpec, DatasetSplit};
use mixseg::mixing::Strategy;
use mixseg::numerics::OpKind;
use mixseg::selfcheck::run_selfcheck;
use mixseg::trainer::{run, LossSwitches, RunOptions, TrainConfig, Trainer};

fn small_data() -> DatasetSplit {
    BenchmarkSpec { size: 16, n_source: 12, n_target: 12, n_eval: 4, n_labeled: 3, ..BenchmarkSpec::default() }
        .build()
        .unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig { iters: 6, eval_every: 3, widths: vec![4, 4], ..TrainConfig::default() }
}

#[test]
fn teacher_tracks_the_ema_of_student_iterates() {
    let data = small_data();
    let config = TrainConfig { precision: mixseg::trainer::Precision::F64, ..small_config() };
    let mut trainer = Trainer::<f64>::new(config, &data).unwrap();
    let mut expected = trainer.teacher.params.clone();
    for _ in 0..10 {
        trainer.train_step().unwrap();
        for ((_, phi), (_, theta)) in expected.tensors.iter_mut().zip(&trainer.student.tensors) {
            phi.data_mut().iter_mut().zip(theta.data()).for_each(|(p, &t)| *p = 0.99 * *p + 0.01 * t);
        }
    }
    for ((_, a), (_, b)) in trainer.teacher.params.tensors.iter().zip(&expected.tensors) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    assert_eq!(trainer.teacher.step(), 10);
}

#[test]
fn zero_lambda_matches_disabled_inter_stream_bit_for_bit() {
    let data = small_data();
    let base = TrainConfig { precision: mixseg::trainer::Precision::F64, ..small_config() };
    let mut a = Trainer::<f64>::new(TrainConfig { lambda: 0.0, ..base.clone() }, &data).unwrap();
    let off = LossSwitches { use_inter: false, ..LossSwitches::ALL };
    let mut b = Trainer::<f64>::new(TrainConfig { switches: off, ..base }, &data).unwrap();
    for _ in 0..20 {
        let (ra, rb) = (a.train_step().unwrap(), b.train_step().unwrap());
        assert_eq!(ra.losses.l_intra.to_bits(), rb.losses.l_intra.to_bits());
    }
    for ((_, x), (_, y)) in a.student.tensors.iter().zip(&b.student.tensors) {
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn disabled_streams_record_no_work() {
    let data = small_data();
    let sup = LossSwitches { use_inter: false, use_intra: false, ..LossSwitches::ALL };
    let mut t = Trainer::<f32>::new(TrainConfig { switches: sup, ..small_config() }, &data).unwrap();
    let r = t.train_step().unwrap();
    assert_eq!((r.student_forwards, r.teacher_images), (2, 0));
    assert_eq!((r.losses.l_inter, r.losses.l_intra), (0.0, 0.0));

    let mut full = Trainer::<f32>::new(small_config(), &data).unwrap();
    let rf = full.train_step().unwrap();
    assert_eq!((rf.student_forwards, rf.teacher_images), (4, 2));
    assert!(rf.records > r.records);

    let one = TrainConfig { strategy: Strategy::OneXuOneStream, ..small_config() };
    let r1 = Trainer::<f32>::new(one, &data).unwrap().train_step().unwrap();
    assert_eq!((r1.student_forwards, r1.teacher_images), (3, 2));
    assert_eq!(r1.losses.l_intra, 0.0);

    let two = TrainConfig { strategy: Strategy::TwoXuTwoStreams, ..small_config() };
    let r2 = Trainer::<f32>::new(two, &data).unwrap().train_step().unwrap();
    assert_eq!(r2.teacher_images, 4);
}

#[test]
fn quality_weights_stay_in_unit_interval_and_losses_are_finite() {
    let data = small_data();
    let mut t = Trainer::<f32>::new(small_config(), &data).unwrap();
    for _ in 0..5 {
        let r = t.train_step().unwrap();
        assert!((0.0..=1.0).contains(&r.q_mean));
        assert!(r.losses.total.is_finite());
        let l = r.losses;
        let direct = l.l_s + l.l_t + l.lambda * l.l_inter + l.mu * l.l_intra;
        assert!((l.total - direct).abs() < 1e-4 * direct.abs().max(1.0));
    }
}

#[test]
fn runs_are_reproducible_and_write_their_artifacts() {
    let data = small_data();
    let dir = tempfile::tempdir().unwrap();
    let options = RunOptions { out_dir: Some(dir.path().to_path_buf()), ..RunOptions::default() };
    let a = run::<f32>(&small_config(), &data, &options).unwrap();
    let b = run::<f32>(&small_config(), &data, &RunOptions::default()).unwrap();
    assert_eq!(a.metrics_csv, b.metrics_csv);
    assert_eq!(a.evals.iter().map(|e| e.0).collect::<Vec<_>>(), vec![0, 3, 6]);
    assert_eq!(a.metrics_csv.lines().count(), 1 + 1 + 6);
    for name in ["config.resolved", "metrics.csv", "best.ckpt", "student_final.ckpt", "teacher_final.ckpt", "report.txt"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let resolved = std::fs::read_to_string(dir.path().join("config.resolved")).unwrap();
    let again = run::<f32>(&TrainConfig::from_kv(&resolved).unwrap(), &data, &RunOptions::default()).unwrap();
    assert_eq!(again.metrics_csv, a.metrics_csv);

    let other = run::<f32>(&TrainConfig { seed: 5, ..small_config() }, &data, &RunOptions::default()).unwrap();
    assert_ne!(other.metrics_csv, a.metrics_csv);
}

#[test]
fn zero_iterations_evaluate_once() {
    let data = small_data();
    let r = run::<f32>(&TrainConfig { iters: 0, ..small_config() }, &data, &RunOptions::default()).unwrap();
    assert_eq!(r.evals.len(), 1);
    assert_eq!(r.metrics_csv.lines().count(), 2);
}

#[test]
fn selfcheck_passes_and_localizes_faults() {
    let clean = run_selfcheck(None);
    for c in &clean {
        assert!(c.passed, "{}: {}", c.name, c.detail);
    }
    for kind in [OpKind::Conv2d, OpKind::Relu, OpKind::SoftmaxChannel, OpKind::CrossEntropy, OpKind::Mul, OpKind::Add, OpKind::Scale, OpKind::Sum] {
        for c in run_selfcheck(Some(kind)) {
            assert_eq!(c.passed, !c.uses.contains(&kind), "{kind:?} fault, check {}", c.name);
        }
    }
}
