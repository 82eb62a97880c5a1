use rand::Rng;

use super::*;
use crate::datamodel::{Grid2D, SampleRecord};
use crate::fno::save_checkpoint;
use crate::pretrain::blur_plane;

fn random_field(c: usize, h: usize, w: usize, seed: u64) -> Field {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Field::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn tiny_config() -> FnoConfig {
    FnoConfig {
        in_channels: 2,
        out_channels: 1,
        width: 4,
        modes1: 2,
        modes2: 2,
        layers: 1,
        proj_hidden: 4,
    }
}

fn adapter() -> TimeAdapter {
    TimeAdapter::Static {
        in_channels: 2,
        out_channels: 1,
    }
}

/// Solutions are a smoothed copy of the first input channel.
fn toy_dataset(n: usize) -> Dataset {
    let samples = (0..n)
        .map(|i| {
            let x = random_field(2, 16, 16, 200 + i as u64);
            let src: Vec<f64> = x.channel(0).iter().map(|&v| v as f64).collect();
            let y = Field::from_f64(1, 16, 16, &blur_plane(&src, 16, 16, 1.5)).unwrap();
            SampleRecord {
                input: x.into(),
                solution: Some(y.into()),
                params: Default::default(),
                source: "toy".into(),
            }
        })
        .collect();
    Dataset {
        pde: "toy".into(),
        grid: Grid2D::new(16, 16).unwrap(),
        channels: Vec::new(),
        solution_channels: Vec::new(),
        seed: 0,
        param_ranges: Default::default(),
        samples,
    }
}

fn run(init: InitMode, n: usize, epochs: usize) -> TrainRun {
    TrainRun {
        pde: "toy".into(),
        init,
        n,
        epochs,
        lr: 5e-3,
        seed: 3,
        split_seed: 5,
        test_fraction: 0.25,
        config: tiny_config(),
        adapter: adapter(),
        rollout_steps: None,
        threads: 0,
    }
}

#[test]
fn relative_l2_examples() {
    let t = random_field(1, 8, 8, 1);
    assert_eq!(relative_l2_field(&t, &t).unwrap(), 0.0);
    assert!((relative_l2_field(&Field::zeros(1, 8, 8), &t).unwrap() - 1.0).abs() < 1e-12);
    let double = Field::new(1, 8, 8, t.data().iter().map(|v| 2.0 * v).collect()).unwrap();
    assert!((relative_l2_field(&double, &t).unwrap() - 1.0).abs() < 1e-6);
    assert!(matches!(
        relative_l2_field(&t, &Field::zeros(1, 8, 8)),
        Err(Error::ZeroNorm)
    ));
    assert!(relative_l2_field(&t, &Field::zeros(2, 8, 8)).is_err());
    let mean = relative_l2(&[t.clone(), double.clone()], &[t.clone(), t.clone()]).unwrap();
    assert!((mean - 0.5).abs() < 1e-6);
}

#[test]
fn gap_is_test_minus_train() {
    let r = EvalReport::new(0.1, 0.25, vec![0.3, 0.4], 1.5, 7, 16);
    assert!((generalization_gap(&r) - 0.15).abs() < 1e-15);
    assert_eq!(r.gap, generalization_gap(&r));
    let back: EvalReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back, r);
    let mode: InitMode = serde_json::from_str(&serde_json::to_string(&InitMode::Frozen("a/b".into())).unwrap()).unwrap();
    assert_eq!(mode, InitMode::Frozen("a/b".into()));
}

fn constant_trajectory(t: usize, value: f32) -> Trajectory {
    Trajectory::new(vec![Field::new(1, 8, 8, vec![value; 64]).unwrap(); t], 0.1).unwrap()
}

#[test]
fn persistence_forecast_of_a_steady_state_is_exact() {
    let window = constant_trajectory(3, 1.5);
    let truth = constant_trajectory(5, 1.5);
    let (pred, errs) = rollout_with(|w| Ok(w.frame(w.len() - 1).clone()), &window, &truth, 5).unwrap();
    assert_eq!(pred.len(), 5);
    assert_eq!(errs, vec![0.0; 5]);
}

#[test]
fn rollout_feeds_predictions_back() {
    // Forecast = last frame + 1, so step t lands on 1 + t against a truth of 1.
    let window = constant_trajectory(2, 1.0);
    let truth = constant_trajectory(4, 1.0);
    let step = |w: &Trajectory| {
        let last = w.frame(w.len() - 1);
        Field::new(1, 8, 8, last.data().iter().map(|v| v + 1.0).collect())
    };
    let (_, errs) = rollout_with(step, &window, &truth, 4).unwrap();
    for (t, e) in errs.iter().enumerate() {
        assert!((e - (t + 1) as f64).abs() < 1e-9, "{errs:?}");
    }
    assert!(matches!(
        rollout_with(step, &window, &truth, 5),
        Err(Error::RolloutTooLong { available: 4, steps: 5 })
    ));
}

#[test]
fn single_step_rollout_is_one_forward_pass() {
    let mut cfg = tiny_config();
    cfg.in_channels = 3;
    let model = FnoModel::<f32>::new(cfg, 1, true, false).unwrap();
    let frames: Vec<Field> = (0..3).map(|i| random_field(1, 16, 16, i)).collect();
    let window = Trajectory::new(frames, 0.1).unwrap();
    let truth = Trajectory::new(vec![random_field(1, 16, 16, 9)], 0.1).unwrap();
    let (pred, errs) = rollout(&model, &window, &truth, 1).unwrap();
    let direct = model.forward(&window.fold()).unwrap();
    assert_eq!(pred.frame(0), &direct);
    assert_eq!(errs[0], relative_l2_field(&direct, truth.frame(0)).unwrap());
}

#[test]
fn training_is_deterministic_and_learns() {
    let ds = toy_dataset(16);
    let a = train_supervised(&ds, &run(InitMode::Random, 12, 40)).unwrap();
    let b = train_supervised(&ds, &run(InitMode::Random, 12, 40)).unwrap();
    assert_eq!(a.model.store, b.model.store);
    assert_eq!(a.report.test_rl2, b.report.test_rl2);
    let untrained = train_supervised(&ds, &run(InitMode::Random, 12, 0)).unwrap();
    assert!(a.report.train_rl2 < untrained.report.train_rl2);
    assert_eq!(a.provenance.stage, CheckpointStage::Finetuned);
    assert_eq!(a.report.n, 12);
    assert!(a.report.rollout.is_empty());
}

#[test]
fn zero_epochs_report_the_initial_error() {
    let ds = toy_dataset(8);
    let r = run(InitMode::Random, 6, 0);
    let out = train_supervised(&ds, &r).unwrap();
    let (train_split, _, test) = split(&ds, [0.75, 0.0, 0.25], 5).unwrap();
    let train = train_split.subset(&(0..6).collect::<Vec<_>>());
    let (xs, ys) = pairs(&train, &r.adapter).unwrap();
    let fresh = init_model(&r, &xs, &ys).unwrap();
    assert_eq!(out.report.test_rl2, evaluate(&fresh, &test, &r.adapter).unwrap());
}

#[test]
fn budget_beyond_the_split_is_rejected() {
    let ds = toy_dataset(8);
    assert!(matches!(
        train_supervised(&ds, &run(InitMode::Random, 7, 1)),
        Err(Error::Budget { n: 7, available: 6 })
    ));
    assert!(train_supervised(&ds, &run(InitMode::Random, 0, 1)).is_err());
}

#[test]
fn frozen_encoder_keeps_pretrained_weights() {
    let dir = tempfile::tempdir().unwrap();
    let mut pre = FnoModel::<f32>::new(tiny_config(), 8, false, true).unwrap();
    pre.input_norm = None;
    let prov = Provenance {
        stage: CheckpointStage::Pretrained,
        seed: 8,
        epochs: 0,
        fingerprint: String::new(),
        adapter: None,
    };
    save_checkpoint(&pre, &prov, dir.path()).unwrap();
    let ds = toy_dataset(12);
    let frozen = train_supervised(&ds, &run(InitMode::Frozen(dir.path().into()), 8, 10)).unwrap();
    let tuned = train_supervised(&ds, &run(InitMode::Pretrained(dir.path().into()), 8, 10)).unwrap();
    assert!(!frozen.model.has_decoder());
    let mut encoder_params = 0;
    for (_, p) in pre.store.iter().filter(|(_, p)| !p.name.starts_with("dec.")) {
        let find = |m: &FnoModel<f32>| m.store.iter().find(|(_, q)| q.name == p.name).map(|(_, q)| q.value.clone());
        assert_eq!(find(&frozen.model).as_ref(), Some(&p.value), "{}", p.name);
        assert_ne!(find(&tuned.model).as_ref(), Some(&p.value), "{}", p.name);
        encoder_params += 1;
    }
    assert!(encoder_params > 0);
}

#[test]
fn results_csv_has_one_row_per_rollout_step() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("results.csv");
    append_results(&path, "rd", "random", &EvalReport::new(0.1, 0.2, vec![0.3, 0.4, 0.5], 1.0, 1, 16)).unwrap();
    append_results(&path, "poisson", "pretrained", &EvalReport::new(0.1, 0.2, Vec::new(), 1.0, 2, 32)).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], RESULTS_HEADER.join(","));
    assert_eq!(lines.len(), 5);
    assert!(lines[3].starts_with("rd,random,16,1,") && lines[3].contains(",3,"));
    assert!(lines[4].starts_with("poisson,pretrained,32,2,") && lines[4].contains(",,,"));
}
