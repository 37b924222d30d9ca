//! Momentum SGD with a warmup/constant/poly schedule, evaluation, and the
//! cross-modality comparison.

mod log;
mod optim;

pub use log::{EvalRecord, RunLog, StepRecord};
pub use optim::{lr_at, sgd_step, sgd_update, OptimConfig, SgdState};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batch, Modality, SampleSource};
use crate::error::{Error, Result};
use crate::loss::{binarize_logits, hybrid_loss, BinaryTaskBatch, IouAccumulator, IouReport, LossConfig};
use crate::nn::{Mode, ToyNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub modality: Modality,
    /// Validate every this many iterations (and after the last); 0 disables.
    pub eval_every: usize,
    pub eval_batch: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            modality: Modality::A,
            eval_every: 0,
            eval_batch: 16,
        }
    }
}

/// Sample indices drawn epoch by epoch from seeded permutations.
struct BatchOrder {
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    pos: usize,
}

impl BatchOrder {
    fn new(seed: u64, n: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        BatchOrder {
            rng,
            perm: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, k: usize) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.pos == self.perm.len() {
                    self.perm.sort_unstable();
                    self.perm.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.perm[self.pos - 1]
            })
            .collect()
    }
}

fn with_iter(e: Error, iter: usize) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("{msg} at iteration {iter}")),
        other => other,
    }
}

/// Train `net` in place for `optim.total_iters()` iterations on one
/// modality of `stream`. Initialization is the caller's; batch order is
/// seeded by `optim.seed`.
pub fn train(
    net: &mut ToyNet,
    stream: &dyn SampleSource,
    loss: &LossConfig,
    optim: &OptimConfig,
    opts: &TrainOptions,
    val: Option<&dyn SampleSource>,
) -> Result<RunLog> {
    loss.validate()?;
    optim.validate()?;
    if stream.is_empty() {
        return Err(Error::invalid("empty training stream"));
    }
    if stream.classes() != net.config().num_classes {
        return Err(Error::Config(format!(
            "data has {} classes but the model predicts {}",
            stream.classes(),
            net.config().num_classes
        )));
    }
    let mut log = RunLog::default();
    let mut state = SgdState::new(net.store())?;
    let mut order = BatchOrder::new(optim.seed, stream.len());
    let total = optim.total_iters();
    for iter in 0..total {
        let lr = lr_at(optim, iter)?;
        let samples = order
            .next(optim.batch_size)
            .into_iter()
            .map(|i| stream.sample(i))
            .collect::<Result<Vec<_>>>()?;
        let (x, y) = make_batch(&samples, opts.modality)?;
        let pass = net.forward(&x, Mode::Train, &[])?;
        let mut g = pass.graph;
        let batch = BinaryTaskBatch::new(&mut g, pass.logits, &y)?;
        let l = hybrid_loss(&mut g, &batch, loss)?;
        let value = g.value(l).item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss {value} at iteration {iter}")));
        }
        let grads = g.backward(l)?;
        let per_entry = pass.bindings.collect(net.store(), &grads);
        sgd_step(net.store_mut(), &per_entry, &mut state, lr, optim).map_err(|e| with_iter(e, iter))?;
        net.apply_running_updates(&pass.running_updates)?;
        log.steps.push(StepRecord { iter, lr, loss: value });

        if let Some(val) = val {
            let due = opts.eval_every > 0 && ((iter + 1) % opts.eval_every == 0 || iter + 1 == total);
            if due {
                let r = evaluate(net, val, opts.modality, opts.eval_batch)?;
                log.evals.push(EvalRecord {
                    iter,
                    per_class: r.per_class,
                    miou: r.mean,
                });
            }
        }
    }
    Ok(log)
}

/// Dataset-level IoU in eval mode, thresholding logits at 0.
pub fn evaluate(net: &ToyNet, source: &dyn SampleSource, modality: Modality, batch: usize) -> Result<IouReport> {
    let batch = batch.max(1);
    let mut acc = IouAccumulator::new(source.classes());
    let mut start = 0;
    while start < source.len() {
        let end = (start + batch).min(source.len());
        let samples = (start..end).map(|i| source.sample(i)).collect::<Result<Vec<_>>>()?;
        let (x, y) = make_batch(&samples, modality)?;
        let pass = net.forward(&x, Mode::Eval, &[])?;
        acc.add(&binarize_logits(pass.graph.value(pass.logits)), &y)?;
        start = end;
    }
    Ok(acc.report())
}

/// One row of the cross-modality table: a net trained on one modality,
/// tested on both.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrossModalityRow {
    pub trained_on: Modality,
    pub same: IouReport,
    pub cross: IouReport,
    /// Same-modality mIoU minus cross-modality mIoU.
    pub decay: f64,
}

impl CrossModalityRow {
    pub fn miou_on(&self, m: Modality) -> f64 {
        if m == self.trained_on {
            self.same.mean
        } else {
            self.cross.mean
        }
    }
}

pub fn cross_modality_eval(
    net: &ToyNet,
    source: &dyn SampleSource,
    trained_on: Modality,
    batch: usize,
) -> Result<CrossModalityRow> {
    let same = evaluate(net, source, trained_on, batch)?;
    let cross = evaluate(net, source, trained_on.other(), batch)?;
    Ok(CrossModalityRow {
        trained_on,
        decay: same.mean - cross.mean,
        same,
        cross,
    })
}

/// Rows `train on X` × columns `test on A, test on B`, plus the decay.
pub fn cross_modality_csv(rows: &[CrossModalityRow]) -> String {
    use crate::csvfmt::fmt_real;
    let mut out = String::from("trained_on,test_A,test_B,decay\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.trained_on,
            fmt_real(r.miou_on(Modality::A)),
            fmt_real(r.miou_on(Modality::B)),
            fmt_real(r.decay)
        ));
    }
    out
}

#[cfg(test)]
mod tests;
