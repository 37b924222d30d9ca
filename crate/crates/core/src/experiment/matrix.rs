use std::fmt::Write as _;
use std::fs;
use std::io::BufRead;
use std::path::Path;

use super::{run_train_with, RunConfig, Split};
use crate::csvfmt::{fields, fmt_real, parse_int, parse_real};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::nn::NormPolicy;

/// One point of the policy × loss × seed grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixCell {
    pub policy: NormPolicy,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
}

impl MatrixCell {
    pub fn dir_name(&self) -> String {
        format!("{}_l{}_{}_s{}", self.policy, self.lambda1, self.lambda2, self.seed)
    }

    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        let mut cfg = base.clone();
        cfg.model.policy = self.policy;
        cfg.loss = LossConfig {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            ..base.loss.clone()
        };
        cfg.optim.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn matrix_cells(policies: &[NormPolicy], lambdas: &[(f64, f64)], seeds: &[u64]) -> Result<Vec<MatrixCell>> {
    if policies.is_empty() || lambdas.is_empty() || seeds.is_empty() {
        return Err(Error::Config("matrix needs at least one policy, loss setting and seed".into()));
    }
    let mut cells = Vec::new();
    for &policy in policies {
        for &(lambda1, lambda2) in lambdas {
            LossConfig::new(lambda1, lambda2)?;
            for &seed in seeds {
                cells.push(MatrixCell {
                    policy,
                    lambda1,
                    lambda2,
                    seed,
                });
            }
        }
    }
    Ok(cells)
}

/// One line of the summary table.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixRow {
    pub cell: MatrixCell,
    pub per_class: Vec<f64>,
    pub miou: f64,
    pub decay: f64,
    pub mean_div: f64,
}

#[derive(Debug, Default)]
pub struct MatrixOutcome {
    pub rows: Vec<MatrixRow>,
    pub failures: Vec<(MatrixCell, Error)>,
}

/// Run every cell into `out/<cell>/` and write `out/summary.csv` plus
/// `out/divergence_by_probe.csv`. A failing cell is recorded and the rest
/// still run. `progress` sees each cell as it finishes.
pub fn run_matrix(
    base: &RunConfig,
    cells: &[MatrixCell],
    out: &Path,
    mut progress: impl FnMut(&MatrixCell, std::result::Result<&MatrixRow, &Error>),
) -> Result<MatrixOutcome> {
    base.validate()?;
    let configs = cells.iter().map(|c| c.apply(base)).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let train_set = base.data.load(Split::Train)?;
    let val_set = base.data.load(Split::Val)?;

    let mut outcome = MatrixOutcome::default();
    let mut by_probe = String::from("policy,l1,l2,seed,probe,depth,divergence\n");
    for (cell, cfg) in cells.iter().zip(&configs) {
        match run_train_with(cfg, &train_set, &val_set, &out.join(cell.dir_name())) {
            Ok(s) => {
                for r in &s.divergence.rows {
                    let _ = writeln!(
                        by_probe,
                        "{},{},{},{},{},{},{}",
                        cell.policy,
                        fmt_real(cell.lambda1),
                        fmt_real(cell.lambda2),
                        cell.seed,
                        r.probe,
                        r.depth,
                        fmt_real(r.divergence)
                    );
                }
                let row = MatrixRow {
                    cell: cell.clone(),
                    per_class: s.eval.same.per_class.clone(),
                    miou: s.eval.same.mean,
                    decay: s.eval.decay,
                    mean_div: s.mean_divergence(),
                };
                progress(cell, Ok(&row));
                outcome.rows.push(row);
            }
            Err(e) => {
                progress(cell, Err(&e));
                outcome.failures.push((cell.clone(), e));
            }
        }
    }
    let classes = base.model.num_classes;
    for (name, text) in [("summary.csv", summary_csv(&outcome.rows, classes)), ("divergence_by_probe.csv", by_probe)] {
        let path = out.join(name);
        fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(outcome)
}

fn header(classes: usize) -> String {
    let mut h = String::from("policy,l1,l2,seed");
    for c in 1..=classes {
        let _ = write!(h, ",iou_c{c}");
    }
    h.push_str(",miou,decay,mean_div");
    h
}

/// `policy,l1,l2,seed,iou_c1..iou_cm,miou,decay,mean_div`, where `iou_ck`
/// is mask channel `k − 1` (so `iou_c1` is the background).
pub fn summary_csv(rows: &[MatrixRow], classes: usize) -> String {
    let mut out = header(classes);
    out.push('\n');
    for r in rows {
        let c = &r.cell;
        let _ = write!(out, "{},{},{},{}", c.policy, fmt_real(c.lambda1), fmt_real(c.lambda2), c.seed);
        for v in &r.per_class {
            let _ = write!(out, ",{}", fmt_real(*v));
        }
        let _ = writeln!(out, ",{},{},{}", fmt_real(r.miou), fmt_real(r.decay), fmt_real(r.mean_div));
    }
    out
}

pub fn read_summary_csv<R: BufRead>(r: R) -> Result<Vec<MatrixRow>> {
    let mut lines = r.lines();
    let first = lines
        .next()
        .transpose()
        .map_err(|e| Error::io("reading summary", e))?
        .ok_or_else(|| Error::Format("empty summary".into()))?;
    let cols = first.split(',').count();
    if cols < 8 {
        return Err(Error::Format("summary header is too short".into()));
    }
    let classes = cols - 7;
    if first != header(classes) {
        return Err(Error::Format(format!("unexpected summary header `{first}`")));
    }
    let mut rows = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::io("reading summary", e))?;
        let f = fields(&line, cols)?;
        rows.push(MatrixRow {
            cell: MatrixCell {
                policy: f[0].parse()?,
                lambda1: parse_real(f[1])?,
                lambda2: parse_real(f[2])?,
                seed: parse_int(f[3])?,
            },
            per_class: f[4..4 + classes].iter().map(|s| parse_real(s)).collect::<Result<_>>()?,
            miou: parse_real(f[4 + classes])?,
            decay: parse_real(f[5 + classes])?,
            mean_div: parse_real(f[6 + classes])?,
        });
    }
    Ok(rows)
}
