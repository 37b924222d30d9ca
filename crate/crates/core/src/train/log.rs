use std::io::BufRead;
use std::path::Path;

use crate::csvfmt::{fields, fmt_real, parse_int, parse_real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub iter: usize,
    pub per_class: Vec<f64>,
    pub miou: f64,
}

/// Per-iteration losses and periodic validation results of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

const STEP_HEADER: &str = "iter,lr,loss";
const EVAL_HEADER: &str = "iter,class,iou";

impl RunLog {
    /// Exponential moving average of the loss with `α = 2/(window + 1)`,
    /// seeded with the first loss.
    pub fn loss_ema(&self, window: usize) -> Vec<f64> {
        let alpha = 2.0 / (window as f64 + 1.0);
        let mut out = Vec::with_capacity(self.steps.len());
        let mut ema = None;
        for s in &self.steps {
            let next = match ema {
                None => s.loss,
                Some(e) => e + alpha * (s.loss - e),
            };
            ema = Some(next);
            out.push(next);
        }
        out
    }

    pub fn steps_csv(&self) -> String {
        let mut out = format!("{STEP_HEADER}\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{}\n", s.iter, fmt_real(s.lr), fmt_real(s.loss)));
        }
        out
    }

    /// One row per (evaluation, class); class `mean` carries the mIoU.
    pub fn evals_csv(&self) -> String {
        let mut out = format!("{EVAL_HEADER}\n");
        for e in &self.evals {
            for (c, iou) in e.per_class.iter().enumerate() {
                out.push_str(&format!("{},{c},{}\n", e.iter, fmt_real(*iou)));
            }
            out.push_str(&format!("{},mean,{}\n", e.iter, fmt_real(e.miou)));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, text) in [("loss.csv", self.steps_csv()), ("iou.csv", self.evals_csv())] {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        }
        Ok(())
    }

    pub fn read_csv<R1: BufRead, R2: BufRead>(steps: R1, evals: R2) -> Result<Self> {
        let mut log = RunLog::default();
        for line in data_lines(steps, STEP_HEADER)? {
            let f = fields(&line, 3)?;
            log.steps.push(StepRecord {
                iter: parse_int(f[0])?,
                lr: parse_real(f[1])?,
                loss: parse_real(f[2])?,
            });
        }
        let mut current: Option<EvalRecord> = None;
        for line in data_lines(evals, EVAL_HEADER)? {
            let f = fields(&line, 3)?;
            let iter: usize = parse_int(f[0])?;
            let value = parse_real(f[2])?;
            let rec = current.get_or_insert_with(|| EvalRecord {
                iter,
                per_class: Vec::new(),
                miou: f64::NAN,
            });
            if rec.iter != iter {
                return Err(Error::Format(format!("evaluation at {} lacks a mean row", rec.iter)));
            }
            if f[1] == "mean" {
                rec.miou = value;
                log.evals.extend(current.take());
            } else {
                let class: usize = parse_int(f[1])?;
                if class != rec.per_class.len() {
                    return Err(Error::Format(format!("unexpected class index in `{line}`")));
                }
                rec.per_class.push(value);
            }
        }
        if current.is_some() {
            return Err(Error::Format("truncated evaluation table".into()));
        }
        Ok(log)
    }
}

fn data_lines<R: BufRead>(r: R, header: &str) -> Result<Vec<String>> {
    let mut lines = r.lines();
    let first = lines
        .next()
        .transpose()
        .map_err(|e| Error::io("reading csv", e))?;
    if first.as_deref() != Some(header) {
        return Err(Error::Format(format!("expected header `{header}`")));
    }
    lines
        .map(|l| l.map_err(|e| Error::io("reading csv", e)))
        .collect()
}
