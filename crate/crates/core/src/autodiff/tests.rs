use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::Tensor;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn vec1(v: &[f64]) -> Tensor {
    Tensor::vector(v.to_vec()).unwrap()
}

/// Direct six-loop cross-correlation, independent of the im2col path.
fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (cout, _, kh, kw) = w.dims4().unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()
                                    [((ni * cin + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((co * cin + ci) * kh + ki) * kw + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, ho, wo], out).unwrap()
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let a = g.constant(vec1(&[-1.0, 0.0, 2.0]));
    let r = g.relu(a);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = g.constant(vec1(&[0.0]));
    let s = g.sigmoid(z);
    assert_eq!(g.value(s).data(), &[0.5]);
    let one = g.constant(vec1(&[1.0]));
    let l = g.log(one);
    assert_eq!(g.value(l).data(), &[0.0]);
}

#[test]
fn elementwise_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]).unwrap());
    let b = g.constant(Tensor::zeros(&[3, 2]).unwrap());
    let err = g.add(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
}

#[test]
fn scalar_broadcast_both_sides() {
    let mut g = Graph::new();
    let a = g.param(vec1(&[1.0, 2.0, 3.0]));
    let s = g.param(Tensor::scalar(2.0));
    let p = g.mul(s, a).unwrap();
    assert_eq!(g.value(p).data(), &[2.0, 4.0, 6.0]);
    let total = g.sum_all(p).unwrap();
    let grads = g.backward(total).unwrap();
    assert_eq!(grads.get(s).unwrap().data(), &[6.0]);
    assert_eq!(grads.get(a).unwrap().data(), &[2.0, 2.0, 2.0]);
}

#[test]
fn reduce_examples() {
    let mut g = Graph::new();
    let ones = g.constant(Tensor::ones(&[2, 3]).unwrap());
    let s = g.sum_all(ones).unwrap();
    assert_eq!(g.value(s).item().unwrap(), 6.0);
    let v = g.constant(vec1(&[1.0, 2.0, 3.0]));
    let m = g.mean_all(v).unwrap();
    assert_eq!(g.value(m).item().unwrap(), 2.0);
    let x = g.constant(
        Tensor::new(&[1, 2, 2, 2], (1..=8).map(f64::from).collect()).unwrap(),
    );
    let hw = g.mean(x, &[2, 3], false).unwrap();
    assert_eq!(g.shape(hw), &[1, 2]);
    assert_eq!(g.value(hw).data(), &[2.5, 6.5]);
    let kept = g.mean(x, &[2, 3], true).unwrap();
    assert_eq!(g.shape(kept), &[1, 2, 1, 1]);
    assert!(g.mean(x, &[4], false).is_err());
    assert!(g.mean(x, &[1, 1], false).is_err());
}

#[test]
fn conv_trivial_cases() {
    let mut g = Graph::new();
    let x = g.constant(
        Tensor::new(&[1, 1, 2, 3], vec![1.0, -2.0, 3.0, 4.0, 5.5, 6.0]).unwrap(),
    );
    let w = g.constant(Tensor::ones(&[1, 1, 1, 1]).unwrap());
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let img = g.constant(Tensor::ones(&[1, 1, 3, 3]).unwrap());
    let k = g.constant(Tensor::ones(&[1, 1, 3, 3]).unwrap());
    let y = g.conv2d(img, k, None, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).item().unwrap(), 9.0);
}

#[test]
fn conv_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[1, 2, 3, 3]).unwrap());
    let w = g.constant(Tensor::ones(&[1, 3, 3, 3]).unwrap());
    assert!(g.conv2d(x, w, None, 1, 0).is_err());
    let w = g.constant(Tensor::ones(&[1, 2, 5, 5]).unwrap());
    assert!(g.conv2d(x, w, None, 1, 0).is_err());
    assert!(g.conv2d(x, w, None, 1, 1).is_ok());
}

#[test]
fn conv_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cases = [
        ([2, 2, 5, 5], [3, 2, 3, 3], 1, 1),
        ([2, 3, 8, 8], [4, 3, 3, 3], 2, 1),
        ([1, 3, 8, 7], [2, 3, 1, 1], 1, 0),
        ([2, 3, 8, 8], [2, 3, 1, 1], 2, 0),
        ([2, 2, 6, 6], [2, 2, 3, 3], 1, 0),
    ];
    for (xs, ws, stride, pad) in cases {
        let x = rand_tensor(&mut rng, &xs, -2.0, 2.0);
        let w = rand_tensor(&mut rng, &ws, -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[ws[0]], -1.0, 1.0);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let expected = naive_conv(&x, &w, Some(&b), stride, pad);
        assert!(g.value(y).max_abs_diff(&expected).unwrap() < 1e-12);
    }
}

#[test]
fn sort_examples() {
    let mut g = Graph::new();
    let m = g.param(vec1(&[1.0, 3.0, 2.0]));
    let (sorted, perm) = g.sort_desc_detached(m).unwrap();
    assert_eq!(g.value(sorted).data(), &[3.0, 2.0, 1.0]);
    assert_eq!(perm, vec![1, 2, 0]);
    let s = g.sum_all(sorted).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(m).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let t = g.constant(vec1(&[2.0, 2.0]));
    let (_, perm) = g.sort_desc_detached(t).unwrap();
    assert_eq!(perm, vec![0, 1]);
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(vec1(&[0.3, -1.0, 4.0]));
    let s = g.sum_all(x).unwrap();
    assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[1.0; 3]);

    let mut g = Graph::new();
    let x = g.param(vec1(&[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum_all(sq).unwrap();
    assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[2.0, 4.0]);

    assert!(g.backward(sq).is_err(), "non-scalar root");
    assert!(Graph::new().backward(s).is_err(), "empty tape");
}

#[test]
fn constants_are_skipped() {
    let mut g = Graph::new();
    let c = g.constant(vec1(&[1.0, 2.0]));
    let p = g.param(vec1(&[3.0, 4.0]));
    let prod = g.mul(c, p).unwrap();
    let s = g.sum_all(prod).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.len(), 1);
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.param(vec1(&[0.0, 1.0]));
    let r = g.relu(x);
    let s = g.sum_all(r).unwrap();
    assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn grad_check_sum_is_exact() {
    let x = vec1(&[0.1, -0.7, 1.3]);
    let r = grad_check(|g, x| g.sum_all(x), &x, 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-10);
}

/// Random-projection wrapper so that every output entry carries a generic
/// weight in the scalar being differentiated.
fn project(g: &mut Graph, y: Var, seed: u64) -> crate::error::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(y), -1.0, 1.0);
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    g.sum_all(p)
}

#[test]
fn unary_ops_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for op in [
        UnaryOp::Neg,
        UnaryOp::Exp,
        UnaryOp::Relu,
        UnaryOp::Sigmoid,
        UnaryOp::Softplus,
    ] {
        let x = loop {
            let t = rand_tensor(&mut rng, &[2, 3, 2], -2.0, 2.0);
            if t.data().iter().all(|v| v.abs() > 1e-3) {
                break t;
            }
        };
        let r = grad_check(
            |g, x| {
                let y = g.unary(op, x);
                project(g, y, 5)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{op:?}: {r:?}");
    }
    for op in [UnaryOp::Log, UnaryOp::Sqrt] {
        let x = rand_tensor(&mut rng, &[7], 0.2, 2.0);
        let r = grad_check(
            |g, x| {
                let y = g.unary(op, x);
                project(g, y, 6)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{op:?}: {r:?}");
    }
}

#[test]
fn binary_and_structural_ops_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let other = rand_tensor(&mut rng, &[2, 3, 2, 2], 0.5, 2.0);
    for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
        let x = rand_tensor(&mut rng, &[2, 3, 2, 2], 0.5, 2.0);
        for swap in [false, true] {
            let r = grad_check(
                |g, x| {
                    let o = g.constant(other.clone());
                    let y = if swap { g.binary(op, o, x)? } else { g.binary(op, x, o)? };
                    project(g, y, 9)
                },
                &x,
                1e-6,
            )
            .unwrap();
            assert!(r.max_rel_error < 1e-6, "{op:?} swap={swap}: {r:?}");
        }
    }

    let x = rand_tensor(&mut rng, &[2, 3, 4, 2], -2.0, 2.0);
    let structural = |g: &mut Graph, x: Var| -> crate::error::Result<Var> {
        let m = g.mean(x, &[0, 2], true)?;
        let e = g.expand(m, &[2, 3, 4, 2])?;
        let a = g.narrow(x, 1, 1, 2)?;
        let b = g.narrow(e, 1, 0, 1)?;
        let c = g.concat(&[b, a], 1)?;
        let r = g.reshape(c, &[6, 8])?;
        let s = g.sum(r, &[1], false)?;
        let t = g.affine(s, 0.5, 3.0);
        let sorted = g.sort_desc_detached(t)?.0;
        let picked = g.gather(sorted, &[0, 2, 2, 5])?;
        project(g, picked, 1)
    };
    let r = grad_check(structural, &x, 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-7, "{r:?}");
}

#[test]
fn conv_and_upsample_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[2, 2, 5, 5], -2.0, 2.0);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[3], -1.0, 1.0);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let r = grad_check(
            |g, x| {
                let (wv, bv) = (g.constant(w.clone()), g.constant(b.clone()));
                let y = g.conv2d(x, wv, Some(bv), stride, pad)?;
                project(g, y, 2)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "input grad {stride}/{pad}: {r:?}");
        let r = grad_check(
            |g, w| {
                let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
                let y = g.conv2d(xv, w, Some(bv), stride, pad)?;
                project(g, y, 2)
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "weight grad {stride}/{pad}: {r:?}");
    }
    let r = grad_check(
        |g, b| {
            let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
            let y = g.conv2d(xv, wv, Some(b), 1, 1)?;
            project(g, y, 2)
        },
        &b,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-7, "bias grad: {r:?}");

    let small = rand_tensor(&mut rng, &[1, 2, 3, 4], -2.0, 2.0);
    let r = grad_check(
        |g, x| {
            let y = g.upsample_bilinear(x, 7, 9)?;
            project(g, y, 4)
        },
        &small,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-7, "upsample: {r:?}");
}

#[test]
fn upsample_preserves_constants_and_identity() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[1, 1, 3, 3], 2.5).unwrap());
    let up = g.upsample_bilinear(c, 12, 12).unwrap();
    assert!(g.value(up).data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    let x = g.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let same = g.upsample_bilinear(x, 2, 2).unwrap();
    assert_eq!(g.value(same), g.value(x));
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..10 {
        let x0 = rand_tensor(&mut rng, &[2, 3], -2.0, 2.0);
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let build = |g: &mut Graph, x: Var| {
            let s = g.sigmoid(x);
            let f = g.sum_all(s).unwrap();
            let e = g.mul(x, x).unwrap();
            let h = g.exp(e);
            let gg = g.mean_all(h).unwrap();
            (f, gg)
        };
        let grad = |which: u8| {
            let mut g = Graph::new();
            let x = g.param(x0.clone());
            let (f, gg) = build(&mut g, x);
            let root = match which {
                0 => f,
                1 => gg,
                _ => {
                    let fa = g.scale(f, a);
                    let gb = g.scale(gg, b);
                    g.add(fa, gb).unwrap()
                }
            };
            g.backward(root).unwrap().get(x).unwrap().clone()
        };
        let (gf, gg, gc) = (grad(0), grad(1), grad(2));
        for i in 0..x0.numel() {
            let lin = a * gf.data()[i] + b * gg.data()[i];
            assert!((gc.data()[i] - lin).abs() < 1e-12, "trial {trial} entry {i}");
        }
    }
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = rand_tensor(&mut rng, &[2, 2, 6, 6], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x), g.param(w));
        let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
        let s = g.sigmoid(y);
        let l = g.mean_all(s).unwrap();
        let grads = g.backward(l).unwrap();
        (g.value(l).clone(), grads.get(wv).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data()[0].to_bits(), b.0.data()[0].to_bits());
    assert!(a.1.data().iter().zip(b.1.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn softplus_is_stable() {
    let mut g = Graph::new();
    let x = g.constant(vec1(&[1000.0, -1000.0, 0.0]));
    let s = g.softplus(x);
    let v = g.value(s).data();
    assert_eq!(v[0], 1000.0);
    assert_eq!(v[1], 0.0);
    assert!((v[2] - std::f64::consts::LN_2).abs() < 1e-15);
}
