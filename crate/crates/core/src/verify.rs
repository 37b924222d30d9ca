//! Self-check suites that can be run from the command line: finite-difference
//! gradient checks, the Lovász set-function cross-check, Gaussian divergence
//! hand values and the learning-rate schedule.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, BinaryOp, Graph, UnaryOp, Var};
use crate::divergence::{kl_gaussian, layer_divergence, sym_kl, Gaussian, LayerStats, DEFAULT_FLOOR};
use crate::error::{Error, Result};
use crate::loss::{
    bce_loss, dice_loss, hybrid_loss, lovasz_extension_oracle, lovasz_hinge, lovasz_hinge_flat, BinaryTaskBatch,
    DeltaRule, LossConfig,
};
use crate::nn::norm::{
    batch_norm, instance_norm, layer_norm, switchable_norm, Affine, BranchSet, SwitchableVars,
};
use crate::nn::{Mode, NormConfig, NormParams};
use crate::tensor::Tensor;
use crate::train::{lr_at, OptimConfig};

pub const GRAD_TOL: f64 = 1e-5;
pub const LOVASZ_TOL: f64 = 1e-9;
pub const HAND_TOL: f64 = 1e-12;

/// Rounds of randomly drawn gradient-check cases; each round covers every op.
const GRAD_ROUNDS: u64 = 7;
const LOVASZ_DRAWS: usize = 50;
const LOVASZ_MAX_LEN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Gradcheck,
    LovaszOracle,
    DivergenceMath,
    Schedule,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Gradcheck, Suite::LovaszOracle, Suite::DivergenceMath, Suite::Schedule];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Gradcheck => "gradcheck",
            Suite::LovaszOracle => "lovasz-oracle",
            Suite::DivergenceMath => "divergence-math",
            Suite::Schedule => "schedule",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown verification suite `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CaseResult {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CaseResult {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn within(name: impl Into<String>, got: f64, want: f64, tol: f64) -> Self {
        let err = (got - want).abs();
        CaseResult::new(name, err <= tol, format!("got {got:.15}, want {want:.15}, |diff| {err:.2e}"))
    }
}

pub fn run_suite(suite: Suite) -> Vec<CaseResult> {
    match suite {
        Suite::Gradcheck => gradcheck_suite(),
        Suite::LovaszOracle => lovasz_suite(),
        Suite::DivergenceMath => divergence_suite(),
        Suite::Schedule => schedule_suite(),
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("valid shape")
}

/// Redraw until no entry sits within `gap` of a kink at `points`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, points: &[f64], gap: f64) -> Tensor {
    loop {
        let t = rand_tensor(rng, shape, lo, hi);
        if t.data().iter().all(|v| points.iter().all(|p| (v - p).abs() > gap)) {
            return t;
        }
    }
}

fn binary_targets(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| f64::from(rng.random_bool(0.4))).collect()).expect("valid shape")
}

/// Lovász margins `1 − sign(y)·s` must be pairwise distinct and away from
/// zero so central differences do not straddle a sort swap or hinge kink.
fn lovasz_generic(rng: &mut ChaCha8Rng, shape: &[usize], y: &Tensor) -> Tensor {
    loop {
        let s = rand_tensor(rng, shape, -2.0, 2.0);
        let mut m: Vec<f64> = s
            .data()
            .iter()
            .zip(y.data())
            .map(|(s, y)| 1.0 - if *y > 0.0 { *s } else { -*s })
            .collect();
        m.push(0.0);
        m.sort_by(f64::total_cmp);
        if m.windows(2).all(|w| w[1] - w[0] > 1e-3) {
            return s;
        }
    }
}

type CaseFn = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

struct GradCase {
    name: String,
    f: CaseFn,
    x: Tensor,
    eps: f64,
}

/// Multiply every output entry by a fixed random weight and sum.
fn projected(seed: u64, f: impl Fn(&mut Graph, Var) -> Result<Var> + 'static) -> CaseFn {
    Box::new(move |g: &mut Graph, x: Var| {
        let y = f(g, x)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_tensor(&mut rng, g.shape(y), -1.0, 1.0);
        let w = g.constant(w);
        let p = g.mul(y, w)?;
        g.sum_all(p)
    })
}

fn norm_params(rng: &mut ChaCha8Rng, c: usize) -> NormParams {
    let mut p = NormParams::new(c, NormConfig::default()).expect("positive eps");
    p.gamma = rand_tensor(rng, &[c], 0.5, 1.5);
    p.beta = rand_tensor(rng, &[c], -0.5, 0.5);
    p
}

fn bind_const(g: &mut Graph, p: &NormParams) -> Affine {
    Affine {
        gamma: g.constant(p.gamma.clone()),
        beta: g.constant(p.beta.clone()),
    }
}

fn loss_case(name: &str, y: Tensor, s: Tensor, f: fn(&mut Graph, &BinaryTaskBatch) -> Result<Var>) -> GradCase {
    GradCase {
        name: name.into(),
        f: Box::new(move |g, x| {
            let batch = BinaryTaskBatch::new(g, x, &y)?;
            f(g, &batch)
        }),
        x: s,
        eps: 1e-6,
    }
}

fn round_cases(round: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9c_0000 + round);
    let r = &mut rng;
    let mut cases = Vec::new();
    let mut push = |name: String, f: CaseFn, x: Tensor, eps: f64| cases.push(GradCase { name, f, x, eps });
    let proj = round * 101;

    for op in [UnaryOp::Neg, UnaryOp::Exp, UnaryOp::Relu, UnaryOp::Sigmoid, UnaryOp::Softplus] {
        let x = away_from(r, &[2, 3, 2], -2.0, 2.0, &[0.0], 1e-3);
        push(format!("{op:?}"), projected(proj, move |g, x| Ok(g.unary(op, x))), x, 1e-5);
    }
    for op in [UnaryOp::Log, UnaryOp::Sqrt] {
        let x = rand_tensor(r, &[7], 0.2, 2.0);
        push(format!("{op:?}"), projected(proj, move |g, x| Ok(g.unary(op, x))), x, 1e-6);
    }
    for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
        let other = rand_tensor(r, &[2, 3, 2], 0.5, 2.0);
        for swap in [false, true] {
            let o = other.clone();
            let f = projected(proj, move |g, x| {
                let o = g.constant(o.clone());
                if swap {
                    g.binary(op, o, x)
                } else {
                    g.binary(op, x, o)
                }
            });
            push(format!("{op:?}{}", if swap { " rhs" } else { "" }), f, rand_tensor(r, &[2, 3, 2], 0.5, 2.0), 1e-6);
        }
    }
    let scalar = rand_tensor(r, &[1], 0.5, 2.0);
    let big = rand_tensor(r, &[3, 2], 0.5, 2.0);
    push(
        "Mul scalar broadcast".into(),
        projected(proj, move |g, s| {
            let b = g.constant(big.clone());
            g.mul(b, s)
        }),
        scalar,
        1e-6,
    );

    let x = rand_tensor(r, &[2, 3, 4, 2], -2.0, 2.0);
    push("sum axes".into(), projected(proj, |g, x| g.sum(x, &[1, 3], false)), x.clone(), 1e-5);
    push("mean keepdims".into(), projected(proj, |g, x| g.mean(x, &[0, 2], true)), x.clone(), 1e-5);
    let structural = |g: &mut Graph, x: Var| -> Result<Var> {
        let m = g.mean(x, &[0, 2], true)?;
        let e = g.expand(m, &[2, 3, 4, 2])?;
        let a = g.narrow(x, 1, 1, 2)?;
        let b = g.narrow(e, 1, 0, 1)?;
        let c = g.concat(&[b, a], 1)?;
        let r = g.reshape(c, &[6, 8])?;
        let s = g.sum(r, &[1], false)?;
        let t = g.affine(s, 0.5, 3.0);
        g.gather(t, &[0, 2, 2, 5])
    };
    push("expand/narrow/concat/reshape/gather".into(), projected(proj, structural), x, 1e-5);

    let xc = rand_tensor(r, &[2, 2, 5, 5], -2.0, 2.0);
    let w = rand_tensor(r, &[3, 2, 3, 3], -1.0, 1.0);
    let b = rand_tensor(r, &[3], -1.0, 1.0);
    for (stride, pad) in [(1, 1), (2, 1)] {
        let (w1, b1) = (w.clone(), b.clone());
        push(
            format!("conv2d input s{stride}p{pad}"),
            projected(proj, move |g, x| {
                let (wv, bv) = (g.constant(w1.clone()), g.constant(b1.clone()));
                g.conv2d(x, wv, Some(bv), stride, pad)
            }),
            xc.clone(),
            1e-5,
        );
    }
    let (x1, b1) = (xc.clone(), b.clone());
    push(
        "conv2d weight".into(),
        projected(proj, move |g, w| {
            let (xv, bv) = (g.constant(x1.clone()), g.constant(b1.clone()));
            g.conv2d(xv, w, Some(bv), 1, 1)
        }),
        w.clone(),
        1e-5,
    );
    let (x1, w1) = (xc.clone(), w.clone());
    push(
        "conv2d bias".into(),
        projected(proj, move |g, b| {
            let (xv, wv) = (g.constant(x1.clone()), g.constant(w1.clone()));
            g.conv2d(xv, wv, Some(b), 2, 0)
        }),
        b,
        1e-5,
    );
    let pw = rand_tensor(r, &[3, 2, 1, 1], -1.0, 1.0);
    push(
        "conv2d pointwise".into(),
        projected(proj, move |g, x| {
            let wv = g.constant(pw.clone());
            g.conv2d(x, wv, None, 1, 0)
        }),
        xc,
        1e-5,
    );
    push(
        "upsample_bilinear".into(),
        projected(proj, |g, x| g.upsample_bilinear(x, 7, 9)),
        rand_tensor(r, &[1, 2, 3, 4], -2.0, 2.0),
        1e-5,
    );

    let xn = rand_tensor(r, &[2, 3, 3, 3], -2.0, 2.0);
    let p = norm_params(r, 3);
    let sw_mean = rand_tensor(r, &[3], -1.0, 1.0);
    let sw_var = rand_tensor(r, &[3], -1.0, 1.0);
    let pc = p.clone();
    push(
        "batch_norm".into(),
        projected(proj, move |g, x| {
            let a = bind_const(g, &pc);
            Ok(batch_norm(g, x, &a, &pc.running, pc.eps, Mode::Train)?.0)
        }),
        xn.clone(),
        1e-5,
    );
    let pc = p.clone();
    push(
        "instance_norm".into(),
        projected(proj, move |g, x| {
            let a = bind_const(g, &pc);
            instance_norm(g, x, &a, pc.eps)
        }),
        xn.clone(),
        1e-5,
    );
    let pc = p.clone();
    push(
        "layer_norm".into(),
        projected(proj, move |g, x| {
            let a = bind_const(g, &pc);
            layer_norm(g, x, &a, pc.eps)
        }),
        xn.clone(),
        1e-5,
    );
    let pc = p.clone();
    let (m0, v0) = (sw_mean.clone(), sw_var.clone());
    push(
        "switchable_norm input".into(),
        projected(proj, move |g, x| {
            let a = bind_const(g, &pc);
            let s = SwitchableVars {
                mean_logits: g.constant(m0.clone()),
                var_logits: g.constant(v0.clone()),
                branches: BranchSet::all(),
            };
            Ok(switchable_norm(g, x, &a, &s, &pc.running, pc.eps, Mode::Train)?.0)
        }),
        xn.clone(),
        1e-5,
    );
    for which in ["mean", "variance"] {
        let pc = p.clone();
        let xc = xn.clone();
        let other = if which == "mean" { sw_var.clone() } else { sw_mean.clone() };
        let f = projected(proj, move |g, l| {
            let xv = g.constant(xc.clone());
            let a = bind_const(g, &pc);
            let o = g.constant(other.clone());
            let (mean_logits, var_logits) = if which == "mean" { (l, o) } else { (o, l) };
            let s = SwitchableVars {
                mean_logits,
                var_logits,
                branches: BranchSet::all(),
            };
            Ok(switchable_norm(g, xv, &a, &s, &pc.running, pc.eps, Mode::Train)?.0)
        });
        let at = if which == "mean" { sw_mean.clone() } else { sw_var.clone() };
        push(format!("switchable_norm {which} logits"), f, at, 1e-5);
    }
    let pc = p.clone();
    let xc = xn.clone();
    let beta = p.beta.clone();
    push(
        "batch_norm gamma".into(),
        projected(proj, move |g, gamma| {
            let xv = g.constant(xc.clone());
            let beta = g.constant(beta.clone());
            Ok(batch_norm(g, xv, &Affine { gamma, beta }, &pc.running, pc.eps, Mode::Train)?.0)
        }),
        p.gamma.clone(),
        1e-5,
    );

    let shape = [2, 2, 3, 3];
    let y = binary_targets(r, &shape);
    let s = rand_tensor(r, &shape, -2.5, 2.5);
    cases.push(loss_case("bce_loss", y.clone(), s.clone(), bce_loss));
    cases.push(loss_case("dice_loss", y.clone(), s, dice_loss));
    let s = lovasz_generic(r, &shape, &y);
    cases.push(loss_case("lovasz_hinge per image", y.clone(), s.clone(), |g, b| {
        lovasz_hinge(g, b, true, DeltaRule::SortedLabels)
    }));
    cases.push(loss_case("lovasz_hinge per batch", y.clone(), s.clone(), |g, b| {
        lovasz_hinge(g, b, false, DeltaRule::SortedLabels)
    }));
    cases.push(loss_case("hybrid_loss", y, s, |g, b| {
        hybrid_loss(g, b, &LossConfig::new(0.7, 1.3)?)
    }));

    for c in &mut cases {
        c.name = format!("round {round}: {}", c.name);
    }
    cases
}

fn gradcheck_suite() -> Vec<CaseResult> {
    (0..GRAD_ROUNDS)
        .flat_map(round_cases)
        .map(|c| match grad_check(|g, x| (c.f)(g, x), &c.x, c.eps) {
            Ok(r) => CaseResult::new(
                c.name,
                r.max_rel_error < GRAD_TOL,
                format!("max relative error {:.2e} at entry {}", r.max_rel_error, r.worst_index),
            ),
            Err(e) => CaseResult::new(c.name, false, e.to_string()),
        })
        .collect()
}

fn lovasz_suite() -> Vec<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x10fa);
    let mut out = Vec::new();
    for p in 1..=LOVASZ_MAX_LEN {
        let mut worst = 0.0f64;
        let mut failure = None;
        for pattern in 0u32..(1 << p) {
            let labels: Vec<u8> = (0..p).map(|i| ((pattern >> i) & 1) as u8).collect();
            let targets: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();
            for _ in 0..LOVASZ_DRAWS {
                let s: Vec<f64> = (0..p).map(|_| rng.random_range(-3.0..3.0)).collect();
                let margins: Vec<f64> = s
                    .iter()
                    .zip(&labels)
                    .map(|(s, &y)| 1.0 - if y == 1 { *s } else { -*s })
                    .collect();
                let got = (|| {
                    let mut g = Graph::new();
                    let v = g.constant(Tensor::vector(s.clone())?);
                    let l = lovasz_hinge_flat(&mut g, v, &targets, DeltaRule::SortedLabels)?;
                    g.value(l).item()
                })();
                let want = lovasz_extension_oracle(&margins, &labels);
                match (got, want) {
                    (Ok(a), Ok(b)) => worst = worst.max((a - b).abs()),
                    (Err(e), _) | (_, Err(e)) => {
                        failure.get_or_insert(e.to_string());
                    }
                }
            }
        }
        let name = format!("p = {p}: {} label patterns × {LOVASZ_DRAWS} draws", 1u32 << p);
        out.push(match failure {
            Some(e) => CaseResult::new(name, false, e),
            None => CaseResult::new(name, worst <= LOVASZ_TOL, format!("max |diff| {worst:.2e}")),
        });
    }
    out
}

fn layer(means: &[f64], vars: &[f64]) -> LayerStats {
    // Two samples per channel at mean ± sd give exactly the wanted moments.
    let c = means.len();
    let mut data = vec![0.0; 2 * c];
    for k in 0..c {
        let sd = vars[k].sqrt();
        data[k] = means[k] - sd;
        data[c + k] = means[k] + sd;
    }
    let mut s = LayerStats::new("probe", c);
    s.accumulate(&Tensor::new(&[2, c, 1, 1], data).expect("valid shape"))
        .expect("matching channels");
    s
}

fn divergence_suite() -> Vec<CaseResult> {
    let f = DEFAULT_FLOOR;
    let g = Gaussian::new;
    let (unit, shifted, wide) = (g(0.0, 1.0), g(1.0, 1.0), g(0.0, 4.0));
    let mut out = vec![
        CaseResult::within("KL((0,1) || (1,1))", kl_gaussian(unit, shifted, f), 0.5, HAND_TOL),
        CaseResult::within(
            "KL((0,1) || (0,4))",
            kl_gaussian(unit, wide, f),
            2f64.ln() + 0.125 - 0.5,
            HAND_TOL,
        ),
        CaseResult::within("D((0,1), (1,1))", sym_kl(unit, shifted, f), 1.0, HAND_TOL),
        CaseResult::within("D((0,1), (0,4))", sym_kl(unit, wide, f), 1.125, HAND_TOL),
        CaseResult::within("D(a, a)", sym_kl(g(0.3, 2.5), g(0.3, 2.5), f), 0.0, HAND_TOL),
    ];
    // The log terms of the two directions cancel, so flipping their sign
    // leaves the symmetric sum unchanged.
    let flipped = |a: Gaussian, b: Gaussian| {
        let d = a.mean - b.mean;
        -0.5 * (b.var / a.var).ln() + (a.var + d * d) / (2.0 * b.var) - 0.5
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0xd1);
    let worst = (0..1000)
        .map(|_| {
            let a = g(rng.random_range(-3.0..3.0), rng.random_range(0.05..5.0));
            let b = g(rng.random_range(-3.0..3.0), rng.random_range(0.05..5.0));
            (sym_kl(a, b, f) - (flipped(a, b) + flipped(b, a))).abs()
        })
        .fold(0.0, f64::max);
    out.push(CaseResult::within("orientation invariance", worst, 0.0, HAND_TOL));

    let a = layer(&[0.0, 0.0], &[1.0, 1.0]);
    let b = layer(&[1.0, 0.0], &[1.0, 4.0]);
    out.push(match layer_divergence(&a, &b, f) {
        Ok(d) => CaseResult::within("layer mean of {1.0, 1.125}", d.value, 1.0625, HAND_TOL),
        Err(e) => CaseResult::new("layer mean of {1.0, 1.125}", false, e.to_string()),
    });
    out.push(match layer_divergence(&b, &b, f) {
        Ok(d) => CaseResult::within("layer D(A, A)", d.value, 0.0, HAND_TOL),
        Err(e) => CaseResult::new("layer D(A, A)", false, e.to_string()),
    });
    out
}

fn schedule_suite() -> Vec<CaseResult> {
    let mut out = Vec::new();
    let full = OptimConfig {
        warmup_iters: 1000,
        constant_iters: 7000,
        poly_iters: 17000,
        ..Default::default()
    };
    let toy = OptimConfig::default();
    let lr = |cfg: &OptimConfig, i: usize| lr_at(cfg, i).unwrap_or(f64::NAN);
    let mid = 0.01 * 0.5f64.powf(0.9);
    for (label, cfg) in [("full", &full), ("toy", &toy)] {
        let (w, k, p) = (cfg.warmup_iters, cfg.constant_iters, cfg.poly_iters);
        out.push(CaseResult::within(format!("{label}: warmup end"), lr(cfg, w - 1), cfg.base_lr, 0.0));
        out.push(CaseResult::within(format!("{label}: poly start"), lr(cfg, w + k), cfg.base_lr, 0.0));
        out.push(CaseResult::within(format!("{label}: poly midpoint"), lr(cfg, w + k + p / 2), mid, HAND_TOL));
        out.push(CaseResult::new(
            format!("{label}: out of range rejected"),
            lr_at(cfg, w + k + p).is_err(),
            "",
        ));
    }
    out
}
