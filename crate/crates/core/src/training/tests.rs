use super::*;
use crate::draft::DraftConfig;
use crate::numerics::finite_diff_grad;
use crate::target::TargetConfig;

fn tiny_target(seed: u64) -> TargetModel {
    TargetModel::new(TargetConfig {
        vocab_size: 8,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 16,
        d_patch: 4,
        max_seq: 32,
        logit_scale: 2.0,
        rng_seed: seed,
    })
    .unwrap()
}

fn prompt(n: usize, text: Vec<TokenId>, seed: u64) -> MultimodalPrompt {
    let mut rng = SeededRng::new(seed);
    MultimodalPrompt::new(Matrix::from_fn(n, 4, |_, _| rng.normal(0.0, 1.0)), text)
}

fn draft(t: &TargetModel, c: usize, k: usize, kp: usize, seed: u64) -> DraftModel {
    let mut cfg = DraftConfig::for_target(t.config(), c, k, kp);
    cfg.d_ff = 12;
    cfg.rng_seed = seed;
    DraftModel::new(cfg, t).unwrap()
}

fn traces(t: &TargetModel, len: usize) -> Vec<TrainTrace> {
    let prompts = [prompt(4, vec![1, 2], 1), prompt(4, vec![3], 2)];
    collect_traces(t, &prompts, 1.0, len, &mut SeededRng::new(3)).unwrap()
}

#[test]
fn traces_are_deterministic_and_capped() {
    let t = tiny_target(0);
    let a = traces(&t, 14);
    assert_eq!(a, traces(&t, 14));
    for tr in &a {
        assert_eq!(tr.len(), 14);
        assert_eq!(tr.target_features.rows(), 14);
        assert_eq!(tr.target_dists.len(), 14);
    }
    let capped = traces(&t, 1000);
    assert!(capped.iter().all(|tr| tr.len() == t.config().max_seq));
    let long = prompt(4, vec![0; 12], 0);
    assert!(collect_traces(&t, &[long], 1.0, 16, &mut SeededRng::new(0)).is_err());
    assert!(matches!(
        collect_traces(&t, &[], 1.0, 16, &mut SeededRng::new(0)),
        Err(Error::InvalidCount)
    ));
}

#[test]
fn trace_replays_through_prefill() {
    let t = tiny_target(1);
    for tr in traces(&t, 12) {
        let replay = MultimodalPrompt::new(tr.prompt.patches.clone(), tr.text_tokens());
        let (bundle, _, _) = t.encode_prompt(&replay, 1.0).unwrap();
        assert!(bundle.features.max_abs_diff(&tr.target_features) < 1e-8);
    }
}

#[test]
fn packed_loss_matches_incremental_loss() {
    let t = tiny_target(2);
    let trs = traces(&t, 16);
    for (c, k, kp) in [(2, 2, 2), (2, 2, 1), (3, 4, 2), (0, 3, 1)] {
        let d = draft(&t, c, k, kp, 5);
        let cfg = TrainConfig::default();
        for tr in &trs {
            let windows: Vec<usize> = (0..tr.num_windows(k)).collect();
            let (packed, _) = packed_gradient(&d, &t, tr, &windows, cfg.alpha, 1.0).unwrap();
            for (&s, p) in windows.iter().zip(&packed) {
                let inc = loss_on_window(&d, &t, tr, s, &cfg).unwrap();
                assert!((inc.total - p.total).abs() < 1e-10, "{inc:?} vs {p:?}");
                assert!((inc.reg - p.reg).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn alpha_zero_isolates_regression() {
    let t = tiny_target(2);
    let tr = &traces(&t, 12)[0];
    let d = draft(&t, 2, 2, 1, 1);
    let cfg = TrainConfig {
        alpha: 0.0,
        ..TrainConfig::default()
    };
    let l = loss_on_window(&d, &t, tr, 1, &cfg).unwrap();
    assert_eq!(l.total, l.reg);
    assert!(l.cls > 0.0);
}

#[test]
fn window_overflow_is_an_error() {
    let t = tiny_target(2);
    let tr = &traces(&t, 10)[0];
    let d = draft(&t, 2, 4, 2, 1);
    let s = tr.num_windows(4);
    assert!(matches!(
        loss_on_window(&d, &t, tr, s, &TrainConfig::default()),
        Err(Error::WindowOverflow { .. })
    ));
    assert!(window_gradient(&d, &t, tr, s, 0.1).is_err());
    assert!(loss_on_window(&d, &t, tr, s - 1, &TrainConfig::default()).is_ok());
}

#[test]
fn batch_gradient_is_sum_of_window_gradients() {
    let t = tiny_target(4);
    let tr = &traces(&t, 16)[0];
    let d = draft(&t, 2, 4, 2, 2);
    let windows = [0, 1, 2, 5];
    let (_, batch) = packed_gradient(&d, &t, tr, &windows, 0.1, 1.0).unwrap();
    let mut sum = vec![0.0; batch.num_params()];
    for &s in &windows {
        let (_, g) = window_gradient(&d, &t, tr, s, 0.1).unwrap();
        for (a, b) in sum.iter_mut().zip(g.flatten()) {
            *a += b;
        }
    }
    for (a, b) in batch.flatten().iter().zip(&sum) {
        assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()));
    }
}

fn check_gradient(seed: u64, c: usize, k: usize, kp: usize, compress: bool) {
    let t = tiny_target(seed);
    let tr = collect_traces(
        &t,
        &[prompt(4, vec![seed as usize % 8, 5], seed)],
        1.0,
        12,
        &mut SeededRng::new(seed),
    )
    .unwrap()
    .remove(0);
    let mut dcfg = DraftConfig::for_target(t.config(), c, k, kp);
    dcfg.compress = compress;
    dcfg.rng_seed = seed;
    let d = DraftModel::new(dcfg.clone(), &t).unwrap();
    let cfg = TrainConfig::default();
    let s = 2;
    let (_, grads) = window_gradient(&d, &t, &tr, s, cfg.alpha).unwrap();
    let base = d.params().flatten();
    let fd = finite_diff_grad(
        |v| {
            let mut p = d.params().clone();
            p.assign_flat(v).unwrap();
            let probe = DraftModel::from_params(dcfg.clone(), p, &t).unwrap();
            loss_on_window(&probe, &t, &tr, s, &cfg).unwrap().total
        },
        &base,
        1e-5,
    )
    .unwrap();
    let analytic = grads.flatten();
    let mut at = 0;
    for (name, tensor) in grads.tensors() {
        for i in at..at + tensor.len() {
            let (a, n) = (analytic[i], fd[i]);
            if a.abs().max(n.abs()) > 1e-8 {
                let rel = (a - n).abs() / a.abs().max(n.abs());
                assert!(
                    rel < 1e-4 || (a - n).abs() < 1e-9,
                    "seed {seed} {name}[{}]: {a} vs {n}",
                    i - at
                );
            }
        }
        at += tensor.len();
    }
}

#[test]
fn gradients_match_finite_differences() {
    for seed in [11, 12, 13] {
        check_gradient(seed, 2, 2, 2, true);
        check_gradient(seed, 2, 2, 1, true);
    }
    check_gradient(14, 2, 2, 1, false);
    check_gradient(15, 0, 2, 2, true);
}

#[test]
fn zero_learning_rate_leaves_parameters_bitwise() {
    let t = tiny_target(6);
    let trs = traces(&t, 12);
    let mut d = draft(&t, 2, 2, 1, 3);
    let before = d.clone();
    let checksum = t.weights_checksum();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 2,
        ..TrainConfig::default()
    };
    train(&mut d, &t, &trs, &cfg, &mut SeededRng::new(0), None).unwrap();
    assert_eq!(d, before);
    assert_eq!(t.weights_checksum(), checksum);
}

#[test]
fn loss_decreases_over_first_epochs() {
    let t = tiny_target(7);
    let trs = collect_traces(&t, &[prompt(4, vec![2, 6], 9)], 1.0, 20, &mut SeededRng::new(1)).unwrap();
    let mut d = draft(&t, 2, 2, 1, 4);
    let checksum = t.weights_checksum();
    let cfg = TrainConfig {
        epochs: 12,
        ..TrainConfig::default()
    };
    let mut log = Vec::new();
    let stats = train(&mut d, &t, &trs, &cfg, &mut SeededRng::new(2), Some(&mut log)).unwrap();
    for w in stats.windows(2).take(10) {
        assert!(w[1].mean_loss < w[0].mean_loss, "{} -> {}", w[0].mean_loss, w[1].mean_loss);
    }
    assert_eq!(t.weights_checksum(), checksum);
    let text = String::from_utf8(log).unwrap();
    let first: StepRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first.epoch, 0);
    assert_eq!(text.lines().count(), stats.iter().map(|s| s.steps.len()).sum::<usize>());
}

#[test]
fn empty_trace_set_rejected() {
    let t = tiny_target(0);
    let mut d = draft(&t, 2, 2, 1, 0);
    let mut tr = Trainer::new(TrainConfig::default(), &d).unwrap();
    assert!(tr.train_epoch(&mut d, &t, &[], &mut SeededRng::new(0)).is_err());
    assert!(TrainConfig {
        alpha: -1.0,
        ..TrainConfig::default()
    }
    .validate()
    .is_err());
}
