use sigctl::config::ExperimentConfig;
use sigctl::dynamics::{simulate, simulate_closed_loop, LoopMode, ProblemSpec};
use sigctl::noise::{FbmSampler, TimeGrid};
use sigctl::optim::{train, TrainConfig};
use sigctl::policy::{Policy, PolicyKind};
use sigctl::signature::{stream_signatures, SignatureStream};
use sigctl::tensor::TruncatedTensor;

fn driver(h: f64, n_steps: usize, refine: usize) -> (TimeGrid, Vec<f64>) {
    let grid = TimeGrid::uniform(1.0, n_steps, refine).unwrap();
    let path = FbmSampler::new(h, grid.fine(), 4).unwrap().sample_paths(1, 9).unwrap().path(0).to_vec();
    (grid, path)
}

#[test]
fn stream_and_tensor_csv_round_trip() {
    let (grid, path) = driver(0.3, 10, 3);
    let stream = stream_signatures(grid.fine(), &path, 1, grid.coarse(), 3).unwrap();
    let back = SignatureStream::from_csv(2, 3, &stream.to_csv()).unwrap();
    assert_eq!(back.len(), stream.len());
    for (a, b) in back.sigs().iter().zip(stream.sigs()) {
        assert!(a.max_abs_diff(b) < 1e-15);
    }
    let t = stream.terminal();
    let parsed = TruncatedTensor::from_csv(2, &t.to_csv()).unwrap();
    assert_eq!(parsed.level(), 3);
    assert!(parsed.max_abs_diff(t) < 1e-15);
}

#[test]
fn refinement_only_changes_the_signature_through_the_driver() {
    // the time coordinate is exact whatever the refinement
    for refine in [1, 4] {
        let (grid, path) = driver(0.7, 8, refine);
        let stream = stream_signatures(grid.fine(), &path, 1, grid.coarse(), 2).unwrap();
        for (t, s) in grid.coarse().iter().zip(stream.sigs()) {
            assert!((s.get(&[0]).unwrap() - t).abs() < 1e-14);
            assert!((s.get(&[0, 0]).unwrap() - 0.5 * t * t).abs() < 1e-14);
        }
    }
}

#[test]
fn trained_policy_survives_text_round_trip() {
    let problem = ProblemSpec::tracking(0.0, 0.1).unwrap();
    for kind in [PolicyKind::Linear, PolicyKind::Deep] {
        let mut cfg = TrainConfig::new(kind);
        cfg.level = 2;
        cfg.n_steps = 20;
        cfg.iterations = 10;
        cfg.batch_size = 64;
        cfg.test_paths = 128;
        cfg.eval_every = 0;
        cfg.hidden = Some(5);
        let report = train(&problem, &cfg, cfg.initial_policy(&problem).unwrap()).unwrap();
        let restored = Policy::from_text(&report.policy.to_text()).unwrap();
        assert_eq!(restored, report.policy);
    }
}

#[test]
fn open_and_closed_loop_agree_for_constant_policies() {
    // a policy reading only the empty word ignores its input signature
    let problem = ProblemSpec::tracking(0.2, 0.1).unwrap();
    let (grid, path) = driver(0.5, 25, 1);
    let mut p = Policy::linear(2, 2, 1).unwrap();
    let mut params = vec![0.0; p.num_params()];
    params[0] = -0.3;
    p.set_params(&params).unwrap();
    let stream = stream_signatures(grid.fine(), &path, 1, grid.coarse(), 2).unwrap();
    let open = simulate(&problem, &path, &stream, &p).unwrap();
    let closed = simulate_closed_loop(&problem, grid.coarse(), &path, &p).unwrap();
    assert!((open.cost - closed.cost).abs() < 1e-12, "{} vs {}", open.cost, closed.cost);
    let csv = open.to_csv();
    assert_eq!(csv.lines().next(), Some("t,y1,u1,running_cost"));
    assert_eq!(csv.lines().count(), 27);
}

#[test]
fn config_text_round_trip_drives_the_same_run() {
    let cfg = ExperimentConfig::parse(
        "problem = execution\nhurst = 0.25, 0.5\nlevel = 1\nloop = closed\ndt = 0.05\niterations = 3\n",
    )
    .unwrap();
    let again = ExperimentConfig::parse(&cfg.to_text()).unwrap();
    assert_eq!(again.to_text(), cfg.to_text());
    assert_eq!(again.hurst, vec![0.25, 0.5]);
    assert_eq!(again.loop_mode, LoopMode::Closed);
    let tc = again.train_config(0.25, 1);
    assert_eq!(tc.n_steps, 20);
    assert_eq!(tc.mode, LoopMode::Closed);
}
