//! Run configuration files and the end-to-end train / evaluate / profile
//! pipeline shared by the command line and the experiment matrix.

mod matrix;

pub use matrix::{matrix_cells, read_summary_csv, run_matrix, summary_csv, MatrixCell, MatrixOutcome, MatrixRow};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{gen_dataset, import_dataset, Modality, SampleSet, SampleSource, SceneSpec};
use crate::divergence::{divergence_profile, DivergenceReport, DEFAULT_FLOOR};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::nn::{checkpoint, NetConfig, ToyNet, INPUT_PROBE};
use crate::train::{cross_modality_csv, cross_modality_eval, train, CrossModalityRow, OptimConfig, RunLog, TrainOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub scene: SceneSpec,
    pub train_samples: usize,
    pub val_samples: usize,
    pub train_seed: u64,
    pub val_seed: u64,
    /// Modality the network is trained on.
    pub modality: Modality,
    /// Exported datasets used instead of live generation when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scene: SceneSpec::default(),
            train_samples: 512,
            val_samples: 128,
            train_seed: 1,
            val_seed: 2,
            modality: Modality::A,
            train_dir: None,
            val_dir: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl DataConfig {
    /// Render (or load) one split fully into memory.
    pub fn load(&self, split: Split) -> Result<SampleSet> {
        let (dir, n, seed) = match split {
            Split::Train => (&self.train_dir, self.train_samples, self.train_seed),
            Split::Val => (&self.val_dir, self.val_samples, self.val_seed),
        };
        match dir {
            Some(d) => import_dataset(d),
            None => SampleSet::collect(&gen_dataset(&self.scene, n, seed)?),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Validation interval in iterations; 0 evaluates only at the end.
    pub eval_every: usize,
    pub eval_batch: usize,
    pub floor: f64,
    /// Probes for the divergence profile; empty means all of them.
    pub probes: Vec<String>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            eval_every: 0,
            eval_batch: 16,
            floor: DEFAULT_FLOOR,
            probes: Vec::new(),
        }
    }
}

/// Everything one training run needs. The model is initialized from
/// `optim.seed`, which also seeds the batch order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: NetConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub report: ReportConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.train_dir.is_none() {
            d.scene.validate()?;
            if d.train_samples == 0 {
                return Err(Error::Config("data.train_samples must be at least 1".into()));
            }
        }
        if d.val_dir.is_none() && d.val_samples == 0 {
            return Err(Error::Config("data.val_samples must be at least 1".into()));
        }
        self.model.validate()?;
        if self.data.train_dir.is_none() && self.model.num_classes != d.scene.classes() {
            return Err(Error::Config(format!(
                "model.num_classes is {} but the scene has {} mask channels",
                self.model.num_classes,
                d.scene.classes()
            )));
        }
        self.loss.validate()?;
        self.optim.validate()?;
        let r = &self.report;
        if !(r.floor > 0.0 && r.floor.is_finite()) {
            return Err(Error::Config(format!("report.floor must be positive, got {}", r.floor)));
        }
        if r.eval_batch == 0 {
            return Err(Error::Config("report.eval_batch must be at least 1".into()));
        }
        Ok(())
    }

    fn train_options(&self) -> TrainOptions {
        TrainOptions {
            modality: self.data.modality,
            eval_every: self.report.eval_every,
            eval_batch: self.report.eval_batch,
        }
    }
}

/// Results of one run, also written to its output directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub config: RunConfig,
    pub log: RunLog,
    pub eval: CrossModalityRow,
    pub divergence: DivergenceReport,
}

impl RunSummary {
    /// Mean divergence over the network probes; the raw input is left out
    /// because it does not depend on the model.
    pub fn mean_divergence(&self) -> f64 {
        network_mean(&self.divergence)
    }
}

pub(crate) fn network_mean(report: &DivergenceReport) -> f64 {
    let rows: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r.probe != INPUT_PROBE)
        .map(|r| r.divergence)
        .collect();
    if rows.is_empty() {
        report.mean_divergence()
    } else {
        rows.iter().sum::<f64>() / rows.len() as f64
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

/// Profile `net` on modality A versus modality B of `source`.
pub fn profile(net: &ToyNet, source: &dyn SampleSource, report: &ReportConfig) -> Result<DivergenceReport> {
    profile_streams(net, source, Modality::A, source, Modality::B, report)
}

pub fn profile_streams(
    net: &ToyNet,
    a: &dyn SampleSource,
    modality_a: Modality,
    b: &dyn SampleSource,
    modality_b: Modality,
    report: &ReportConfig,
) -> Result<DivergenceReport> {
    let probes = if report.probes.is_empty() {
        let mut all = vec![INPUT_PROBE.to_string()];
        all.extend(net.probe_names().iter().cloned());
        all
    } else {
        report.probes.clone()
    };
    let mut rep = divergence_profile(
        net,
        a.input_batches(modality_a, report.eval_batch)?,
        b.input_batches(modality_b, report.eval_batch)?,
        &probes,
        report.floor,
    )?;
    rep.meta.model = net.policy().to_string();
    rep.meta.modality_a = modality_a.to_string();
    rep.meta.modality_b = modality_b.to_string();
    Ok(rep)
}

/// Train per `cfg` and write into `out`: `config.toml`, `checkpoint/`,
/// `loss.csv`, `iou.csv`, `cross_modality.csv` and `divergence.csv`.
pub fn run_train(cfg: &RunConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let train_set = cfg.data.load(Split::Train)?;
    let val_set = cfg.data.load(Split::Val)?;
    run_train_with(cfg, &train_set, &val_set, out)
}

/// As [`run_train`], with the data already in memory.
pub fn run_train_with(
    cfg: &RunConfig,
    train_set: &dyn SampleSource,
    val_set: &dyn SampleSource,
    out: &Path,
) -> Result<RunSummary> {
    cfg.validate()?;
    ensure_dir(out)?;
    write(&out.join("config.toml"), cfg.to_toml()?)?;
    let mut net = ToyNet::build(cfg.model.clone(), cfg.optim.seed)?;
    let val = (cfg.report.eval_every > 0).then_some(val_set);
    let log = train(&mut net, train_set, &cfg.loss, &cfg.optim, &cfg.train_options(), val)?;
    checkpoint::save(&net, &out.join("checkpoint"))?;
    log.write(out)?;
    let eval = cross_modality_eval(&net, val_set, cfg.data.modality, cfg.report.eval_batch)?;
    write(&out.join("cross_modality.csv"), cross_modality_csv(std::slice::from_ref(&eval)))?;
    let divergence = profile(&net, val_set, &cfg.report)?;
    divergence.save(&out.join("divergence.csv"))?;
    Ok(RunSummary {
        config: cfg.clone(),
        log,
        eval,
        divergence,
    })
}
