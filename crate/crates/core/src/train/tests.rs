use proptest::prelude::*;

use super::*;
use crate::data::{gen_dataset, SceneSpec};
use crate::nn::{NetConfig, NormPolicy, ParamKind, ParamStore};
use crate::tensor::Tensor;

fn default_schedule() -> OptimConfig {
    OptimConfig {
        warmup_iters: 1000,
        constant_iters: 7000,
        poly_iters: 17000,
        ..Default::default()
    }
}

#[test]
fn schedule_examples() {
    let cfg = default_schedule();
    assert_eq!(lr_at(&cfg, 999).unwrap(), 0.01);
    assert_eq!(lr_at(&cfg, 8000).unwrap(), 0.01);
    assert!((lr_at(&cfg, 16500).unwrap() - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-12);
    assert!((lr_at(&cfg, 0).unwrap() - 1e-5).abs() < 1e-18);
    assert!(lr_at(&cfg, 25000).is_err());

    let toy = OptimConfig::default();
    assert_eq!(toy.total_iters(), 2000);
    assert_eq!(lr_at(&toy, toy.warmup_iters - 1).unwrap(), toy.base_lr);
    assert_eq!(lr_at(&toy, 640).unwrap(), toy.base_lr);
    let mid = 640 + 680;
    assert!((lr_at(&toy, mid).unwrap() - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-12);
}

#[test]
fn schedule_without_warmup() {
    let cfg = OptimConfig {
        warmup_iters: 0,
        constant_iters: 0,
        poly_iters: 4,
        ..Default::default()
    };
    assert_eq!(lr_at(&cfg, 0).unwrap(), cfg.base_lr);
    assert!(lr_at(&cfg, 3).unwrap() > 0.0);
}

proptest! {
    #[test]
    fn schedule_is_monotone_within_phases(w in 1usize..50, k in 0usize..50, p in 1usize..50) {
        let cfg = OptimConfig { warmup_iters: w, constant_iters: k, poly_iters: p, ..Default::default() };
        let lrs: Vec<f64> = (0..cfg.total_iters()).map(|i| lr_at(&cfg, i).unwrap()).collect();
        prop_assert!(lrs[..w].windows(2).all(|x| x[0] < x[1]));
        prop_assert!(lrs[w..].windows(2).all(|x| x[0] >= x[1]));
        prop_assert!(lrs.iter().all(|&l| l > 0.0 && l <= cfg.base_lr));
    }
}

#[test]
fn sgd_examples() {
    let (mut p, mut v) = (vec![1.0], vec![0.0]);
    sgd_update(&mut p, &[0.0], &mut v, 0.1, 0.9, 0.0);
    assert_eq!(p, vec![1.0]);

    let (mut p, mut v) = (vec![0.0], vec![0.0]);
    sgd_update(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0);
    assert!((p[0] + 0.1).abs() < 1e-15);
    sgd_update(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0);
    assert!((p[0] + 0.1 + 0.19).abs() < 1e-15);

    let (mut p, mut v) = (vec![1.0], vec![0.0]);
    sgd_update(&mut p, &[0.0], &mut v, 0.1, 0.0, 5e-4);
    assert!((p[0] - 0.99995).abs() < 1e-15);
}

#[test]
fn plain_gradient_descent_without_momentum() {
    let (mut p, mut v) = (vec![0.5, -2.0], vec![0.0, 0.0]);
    for _ in 0..3 {
        let before = p.clone();
        sgd_update(&mut p, &[0.3, -0.7], &mut v, 0.05, 0.0, 0.0);
        assert_eq!(p, vec![before[0] - 0.05 * 0.3, before[1] - 0.05 * -0.7]);
    }
}

fn tiny_store() -> ParamStore {
    let mut s = ParamStore::default();
    s.insert("w", ParamKind::Weight, Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
    s.insert("gamma", ParamKind::NormAffine, Tensor::vector(vec![1.0]).unwrap()).unwrap();
    s.insert("running", ParamKind::Buffer, Tensor::vector(vec![3.0]).unwrap()).unwrap();
    s
}

#[test]
fn sgd_step_rules() {
    let cfg = OptimConfig {
        momentum: 0.0,
        weight_decay: 0.1,
        exempt_norm_decay: true,
        ..Default::default()
    };
    let mut store = tiny_store();
    let mut state = SgdState::new(&store).unwrap();
    sgd_step(&mut store, &[None, None, None], &mut state, 1.0, &cfg).unwrap();
    assert_eq!(store.get("w").unwrap().data(), &[0.9, 1.8]);
    assert_eq!(store.get("gamma").unwrap().data(), &[1.0]);
    assert_eq!(store.get("running").unwrap().data(), &[3.0]);

    let bad = Some(Tensor::vector(vec![f64::NAN, 0.0]).unwrap());
    let before = store.clone();
    let err = sgd_step(&mut store, &[bad, None, None], &mut state, 1.0, &cfg).unwrap_err();
    assert!(matches!(&err, Error::NonFinite(m) if m.contains("`w`")), "{err}");
    assert_eq!(store, before);
}

fn toy_setup(policy: NormPolicy) -> (ToyNet, crate::data::Dataset) {
    let spec = SceneSpec {
        height: 16,
        width: 16,
        ..Default::default()
    };
    let ds = gen_dataset(&spec, 12, 1).unwrap();
    let net = ToyNet::build(
        NetConfig {
            policy,
            ..Default::default()
        },
        9,
    )
    .unwrap();
    (net, ds)
}

fn short_optim() -> OptimConfig {
    OptimConfig {
        warmup_iters: 2,
        constant_iters: 3,
        poly_iters: 5,
        batch_size: 3,
        base_lr: 0.05,
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn zero_iterations_leave_net_unchanged() {
    let (mut net, ds) = toy_setup(NormPolicy::PlainBn);
    let before = net.clone();
    let optim = OptimConfig {
        warmup_iters: 0,
        constant_iters: 0,
        poly_iters: 0,
        ..Default::default()
    };
    let log = train(&mut net, &ds, &LossConfig::default(), &optim, &TrainOptions::default(), None).unwrap();
    assert_eq!(net, before);
    assert_eq!(log, RunLog::default());
}

#[test]
fn training_is_deterministic() {
    for policy in NormPolicy::ALL {
        let loss = LossConfig::new(1.0, 1.0).unwrap();
        let opts = TrainOptions {
            eval_every: 4,
            eval_batch: 5,
            ..Default::default()
        };
        let run = || {
            let (mut net, ds) = toy_setup(policy);
            let log = train(&mut net, &ds, &loss, &short_optim(), &opts, Some(&ds)).unwrap();
            (net, log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        let bits = |n: &ToyNet| {
            n.store()
                .entries()
                .iter()
                .flat_map(|e| e.tensor.data().iter().map(|v| v.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(la.steps_csv(), lb.steps_csv());
        assert_eq!(la.steps.len(), 10);
        assert_eq!(la.evals.iter().map(|e| e.iter).collect::<Vec<_>>(), vec![3, 7, 9]);
        assert!(la.steps.iter().all(|s| s.loss.is_finite()));
        assert_ne!(bits(&a), bits(&toy_setup(policy).0), "{policy} did not move");
    }
}

#[test]
fn different_seeds_differ() {
    let (mut a, ds) = toy_setup(NormPolicy::PlainBn);
    let mut b = a.clone();
    let loss = LossConfig::default();
    let opts = TrainOptions::default();
    train(&mut a, &ds, &loss, &short_optim(), &opts, None).unwrap();
    let other = OptimConfig {
        seed: 6,
        ..short_optim()
    };
    train(&mut b, &ds, &loss, &other, &opts, None).unwrap();
    assert_ne!(a, b);
}

#[test]
fn divergent_training_names_the_iteration() {
    let (mut net, ds) = toy_setup(NormPolicy::PlainBn);
    let optim = OptimConfig {
        base_lr: 1e200,
        ..short_optim()
    };
    let err = train(&mut net, &ds, &LossConfig::default(), &optim, &TrainOptions::default(), None).unwrap_err();
    assert!(matches!(&err, Error::NonFinite(m) if m.contains("iteration")), "{err}");
}

#[test]
fn class_count_mismatch_rejected() {
    let (_, ds) = toy_setup(NormPolicy::PlainBn);
    let mut net = ToyNet::build(
        NetConfig {
            num_classes: 3,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    let r = train(&mut net, &ds, &LossConfig::default(), &short_optim(), &TrainOptions::default(), None);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn evaluation_is_repeatable() {
    let (net, ds) = toy_setup(NormPolicy::IbnA);
    let a = evaluate(&net, &ds, Modality::A, 5).unwrap();
    let b = evaluate(&net, &ds, Modality::A, 12).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.per_class.len(), 7);
    let row = cross_modality_eval(&net, &ds, Modality::A, 4).unwrap();
    assert_eq!(row.same, a);
    assert_eq!(row.decay, row.same.mean - row.cross.mean);
    let csv = cross_modality_csv(&[row]);
    assert!(csv.starts_with("trained_on,test_A,test_B,decay\nA,"));
}

#[test]
fn run_log_csv_round_trip() {
    let log = RunLog {
        steps: vec![
            StepRecord { iter: 0, lr: 1e-3, loss: 0.7 },
            StepRecord { iter: 1, lr: 2e-3, loss: 0.1 + 0.2 },
        ],
        evals: vec![EvalRecord {
            iter: 1,
            per_class: vec![0.25, 1.0 / 3.0],
            miou: 7.0 / 24.0,
        }],
    };
    let back = RunLog::read_csv(log.steps_csv().as_bytes(), log.evals_csv().as_bytes()).unwrap();
    assert_eq!(back, log);
    assert!(RunLog::read_csv("bad\n".as_bytes(), log.evals_csv().as_bytes()).is_err());
}

#[test]
fn ema_smooths_losses() {
    let log = RunLog {
        steps: (0..5)
            .map(|i| StepRecord { iter: i, lr: 0.1, loss: if i % 2 == 0 { 1.0 } else { 0.0 } })
            .collect(),
        evals: Vec::new(),
    };
    let ema = log.loss_ema(3);
    assert_eq!(ema[0], 1.0);
    assert_eq!(ema[1], 0.5);
    assert!(ema.iter().all(|&v| (0.0..=1.0).contains(&v)));
}
