use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check;

fn t4(shape: [usize; 4], data: &[f64]) -> Tensor {
    Tensor::new(&shape, data.to_vec()).unwrap()
}

type LossFn = fn(&mut Graph, &BinaryTaskBatch) -> Result<Var>;

fn eval(f: LossFn, logits: &Tensor, targets: &Tensor) -> f64 {
    let mut g = Graph::new();
    let s = g.constant(logits.clone());
    let batch = BinaryTaskBatch::new(&mut g, s, targets).unwrap();
    let l = f(&mut g, &batch).unwrap();
    g.value(l).item().unwrap()
}

fn lovasz_default(g: &mut Graph, b: &BinaryTaskBatch) -> Result<Var> {
    lovasz_hinge(g, b, true, DeltaRule::SortedLabels)
}

fn lovasz_batch(g: &mut Graph, b: &BinaryTaskBatch) -> Result<Var> {
    lovasz_hinge(g, b, false, DeltaRule::SortedLabels)
}

fn random_case(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> (Tensor, Tensor) {
    let n: usize = shape.iter().product();
    let s = (0..n).map(|_| rng.random_range(-2.5..2.5)).collect::<Vec<_>>();
    let y = (0..n).map(|_| f64::from(rng.random_bool(0.4))).collect::<Vec<_>>();
    (t4(shape, &s), t4(shape, &y))
}

#[test]
fn bce_examples() {
    let one = t4([1, 1, 1, 1], &[1.0]);
    let v = eval(bce_loss, &t4([1, 1, 1, 1], &[0.0]), &one);
    assert!((v - std::f64::consts::LN_2).abs() < 1e-12);

    let y = t4([1, 1, 1, 2], &[1.0, 0.0]);
    assert!(eval(bce_loss, &t4([1, 1, 1, 2], &[100.0, -100.0]), &y) < 1e-10);

    let zero = t4([1, 1, 1, 1], &[0.0]);
    let v = eval(bce_loss, &t4([1, 1, 1, 1], &[100.0]), &zero);
    assert!((v - 100.0).abs() < 1e-10, "{v}");
    let v = eval(bce_loss, &t4([1, 1, 1, 1], &[1e4]), &zero);
    assert!(v.is_finite() && (v - 1e4).abs() < 1e-8);
}

#[test]
fn dice_examples() {
    let y = t4([1, 1, 1, 2], &[1.0, 0.0]);
    let v = eval(dice_loss, &t4([1, 1, 1, 2], &[0.0, 0.0]), &y);
    assert!((v + 1.0 / 3.0).abs() < 1e-15);

    let ones = Tensor::ones(&[1, 2, 2, 2]).unwrap();
    let v = eval(dice_loss, &Tensor::full(&[1, 2, 2, 2], 60.0).unwrap(), &ones);
    assert!((v + 1.0).abs() < 1e-15);

    let zeros = Tensor::zeros(&[2, 1, 2, 2]).unwrap();
    for s in [-1e4, -3.0, 0.0, 7.0, 1e4] {
        let v = eval(dice_loss, &Tensor::full(&[2, 1, 2, 2], s).unwrap(), &zeros);
        assert_eq!(v, 0.0);
        assert!(v.is_sign_positive());
    }
}

#[test]
fn batch_rejects_bad_targets() {
    let mut g = Graph::new();
    let s = g.constant(Tensor::zeros(&[1, 1, 1, 2]).unwrap());
    let bad = t4([1, 1, 1, 2], &[0.5, 1.0]);
    assert!(BinaryTaskBatch::new(&mut g, s, &bad).is_err());
    let wrong_shape = t4([1, 1, 2, 1], &[0.0, 1.0]);
    assert!(BinaryTaskBatch::new(&mut g, s, &wrong_shape).is_err());
}

#[test]
fn overlapping_classes_accepted() {
    let y = t4([1, 2, 1, 1], &[1.0, 1.0]);
    let s = t4([1, 2, 1, 1], &[0.3, -0.2]);
    assert!(eval(bce_loss, &s, &y).is_finite());
}

#[test]
fn lovasz_matches_oracle_exhaustively_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for p in 1..=6usize {
        for labels in 0u32..(1 << p) {
            for signs in 0u32..(1 << p) {
                let y: Vec<u8> = (0..p).map(|i| ((labels >> i) & 1) as u8).collect();
                let m: Vec<f64> = (0..p)
                    .map(|i| {
                        let mag = rng.random_range(0.05..3.0);
                        if (signs >> i) & 1 == 1 { mag } else { -mag }
                    })
                    .collect();
                // Invert m = 1 − sign(y)·s.
                let s: Vec<f64> = (0..p)
                    .map(|i| (1.0 - m[i]) * if y[i] == 1 { 1.0 } else { -1.0 })
                    .collect();
                let yf: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
                let got = eval(lovasz_default, &t4([1, 1, 1, p], &s), &t4([1, 1, 1, p], &yf));
                let want = lovasz_extension_oracle(&m, &y).unwrap();
                assert!((got - want).abs() < 1e-9, "p={p} y={y:?} m={m:?}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn lovasz_spec_examples() {
    let one = t4([1, 1, 1, 1], &[1.0]);
    assert_eq!(eval(lovasz_default, &t4([1, 1, 1, 1], &[2.0]), &one), 0.0);
    assert_eq!(eval(lovasz_default, &t4([1, 1, 1, 1], &[-1.0]), &one), 2.0);
    let y = t4([1, 1, 1, 2], &[1.0, 0.0]);
    assert_eq!(eval(lovasz_default, &t4([1, 1, 1, 2], &[-1.0, 1.0]), &y), 2.0);
}

#[test]
fn lovasz_zero_when_all_margins_nonpositive() {
    let y = t4([2, 2, 1, 3], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    let s = y.map(|v| if v > 0.0 { 1.5 } else { -2.0 });
    assert_eq!(eval(lovasz_default, &s, &y), 0.0);
    assert_eq!(eval(lovasz_batch, &s, &y), 0.0);
}

#[test]
fn lovasz_empty_tasks_count_in_the_average() {
    // Two images; the second has no foreground and contributes 0.
    let y = t4([2, 1, 1, 1], &[1.0, 0.0]);
    let s = t4([2, 1, 1, 1], &[-1.0, 5.0]);
    assert_eq!(eval(lovasz_default, &s, &y), 1.0);
    // Flattened over the batch the negative pixel now shares a task.
    let flat = eval(lovasz_batch, &s, &y);
    let want = lovasz_extension_oracle(&[2.0, 6.0], &[1, 0]).unwrap();
    assert!((flat - want).abs() < 1e-12);
}

#[test]
fn margin_scaling_property() {
    let y = t4([1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let base = t4([1, 1, 2, 2], &[1.5, -1.2, -2.0, 1.1]);
    let mut prev_bce = f64::INFINITY;
    for alpha in [1.0, 2.0, 4.0, 8.0] {
        let s = base.map(|v| alpha * v);
        assert_eq!(eval(lovasz_default, &s, &y), 0.0);
        let b = eval(bce_loss, &s, &y);
        assert!(b < prev_bce, "alpha={alpha}");
        prev_bce = b;
    }
}

#[test]
fn hybrid_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (s, y) = random_case(&mut rng, [2, 3, 3, 3]);
    let bce = eval(bce_loss, &s, &y);
    let dice = eval(dice_loss, &s, &y);
    let lov = eval(lovasz_default, &s, &y);
    let hybrid = |l1: f64, l2: f64| {
        let cfg = LossConfig::new(l1, l2).unwrap();
        let mut g = Graph::new();
        let sv = g.constant(s.clone());
        let batch = BinaryTaskBatch::new(&mut g, sv, &y).unwrap();
        let l = hybrid_loss(&mut g, &batch, &cfg).unwrap();
        g.value(l).item().unwrap()
    };
    assert_eq!(hybrid(0.0, 0.0).to_bits(), bce.to_bits());
    assert!((hybrid(1.0, 0.0) - (bce + dice) / 2.0).abs() < 1e-14);
    assert!((hybrid(1.0, 1.0) - (bce + dice + lov) / 3.0).abs() < 1e-14);
    assert!(LossConfig::new(-0.1, 0.0).is_err());
    assert!(LossConfig::new(0.0, f64::NAN).is_err());
}

fn loss_grad(f: &dyn Fn(&mut Graph, &BinaryTaskBatch) -> Result<Var>, s: &Tensor, y: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let sv = g.param(s.clone());
    let batch = BinaryTaskBatch::new(&mut g, sv, y).unwrap();
    let l = f(&mut g, &batch).unwrap();
    g.backward(l).unwrap().get(sv).cloned().unwrap_or_else(|| Tensor::zeros(s.shape()).unwrap())
}

#[test]
fn hybrid_gradient_is_linear_in_parts() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (l1, l2) in [(0.5, 0.0), (1.0, 1.0), (0.2, 3.0)] {
        let (s, y) = random_case(&mut rng, [2, 2, 3, 3]);
        let cfg = LossConfig::new(l1, l2).unwrap();
        let h = loss_grad(&|g, b| hybrid_loss(g, b, &cfg), &s, &y);
        let gb = loss_grad(&bce_loss, &s, &y);
        let gd = loss_grad(&dice_loss, &s, &y);
        let gl = loss_grad(&lovasz_default, &s, &y);
        let norm = 1.0 + l1 + l2;
        for i in 0..s.numel() {
            let want = (gb.data()[i] + l1 * gd.data()[i] + l2 * gl.data()[i]) / norm;
            assert!((h.data()[i] - want).abs() < 1e-10);
        }
    }
}

fn checked(f: LossFn, s: &Tensor, y: &Tensor) -> f64 {
    let y = y.clone();
    grad_check(
        |g, x| {
            let batch = BinaryTaskBatch::new(g, x, &y)?;
            f(g, &batch)
        },
        s,
        1e-6,
    )
    .unwrap()
    .max_rel_error
}

#[test]
fn losses_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..4 {
        let (s, y) = random_case(&mut rng, [2, 2, 2, 3]);
        // Keep margins away from the hinge kink.
        let s = s.map(|v| if (v.abs() - 1.0).abs() < 0.05 { v * 1.2 } else { v });
        for f in [bce_loss as LossFn, dice_loss, lovasz_default, lovasz_batch] {
            let e = checked(f, &s, &y);
            assert!(e < 1e-5, "{e}");
        }
    }
}

#[test]
fn miou_examples() {
    let target = t4([1, 2, 2, 2], &[1.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    let r = miou(&target, &target).unwrap();
    assert_eq!(r.per_class, vec![1.0, 1.0]);
    assert_eq!(r.mean, 1.0);

    let pred = t4([1, 2, 2, 2], &[1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    let r = miou(&pred, &target).unwrap();
    assert_eq!(r.per_class, vec![0.5, 0.0]);

    let empty = Tensor::zeros(&[1, 1, 2, 2]).unwrap();
    let r = miou(&empty, &empty).unwrap();
    assert_eq!((r.per_class[0], r.empty[0]), (1.0, true));

    assert!(miou(&pred, &empty).is_err());
    assert_eq!(binarize_logits(&t4([1, 1, 1, 3], &[-0.1, 0.0, 0.2])).data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn iou_aggregates_over_the_dataset() {
    let mut acc = IouAccumulator::new(1);
    acc.add(&t4([1, 1, 1, 2], &[1.0, 0.0]), &t4([1, 1, 1, 2], &[1.0, 0.0])).unwrap();
    acc.add(&t4([1, 1, 1, 2], &[1.0, 1.0]), &t4([1, 1, 1, 2], &[0.0, 1.0])).unwrap();
    // Pooled counts give 2/3, unlike the mean of per-image IoU (0.75).
    assert!((acc.report().mean - 2.0 / 3.0).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_ranges(
        s in prop::collection::vec(-30.0f64..30.0, 6),
        y in prop::collection::vec(prop::bool::ANY, 6),
    ) {
        let s = t4([1, 2, 1, 3], &s);
        let y = t4([1, 2, 1, 3], &y.iter().map(|&b| f64::from(b)).collect::<Vec<_>>());
        let d = eval(dice_loss, &s, &y);
        prop_assert!((-1.0..=0.0).contains(&d));
        prop_assert!(eval(bce_loss, &s, &y) >= 0.0);
        prop_assert!(eval(lovasz_default, &s, &y) >= 0.0);
        prop_assert!(eval(lovasz_batch, &s, &y) >= 0.0);
    }
}
