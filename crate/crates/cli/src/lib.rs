//! Pipeline commands behind the `gfnrom` binary: dataset generation,
//! training, cross-resolution evaluation, bound verification and reports.
//!
//! Every command writes plain files (JSON, CSV, SVG) under its output
//! directory. Metrics files carry no timings, so identical configurations
//! and seeds give byte-identical metrics.

pub mod config;
pub mod report;

use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use gfnrom::baseline::{pod_basis, pod_projection_error, snapshot_matrix};
use gfnrom::bounds::{verify_bounds, BoundReport, BoundSample};
use gfnrom::datagen::{self, analytic_field, Family, SnapshotSet};
use gfnrom::io;
use gfnrom::rom::{self, RomModel, TrainConfig};
use gfnrom::Mesh;
use serde::{Deserialize, Serialize};

pub use config::{load_config, AssignmentConfig, Profile, RunConfig};

pub const METRICS_FILE: &str = "metrics.json";

/// Generates the mesh hierarchy and the snapshot dataset into `out`.
pub fn run_gen(cfg: &RunConfig, out: &Path) -> Result<SnapshotSet> {
    cfg.validate()?;
    let base = datagen::jittered_grid(cfg.base_grid, cfg.jitter, cfg.seed)?;
    let h = datagen::make_hierarchy_with(&base, &cfg.fractions)?;
    let meshes: Vec<(String, Arc<Mesh>)> = h
        .levels()
        .iter()
        .map(|(name, m)| (name.to_string(), (*m).clone()))
        .collect();
    let set = datagen::generate_dataset(cfg.family, &cfg.grid, &meshes, &cfg.assignment.resolve(cfg.seed))?;
    set.save(out)
        .with_context(|| format!("cannot write dataset to {}", out.display()))?;
    io::write_json(&out.join("config.json"), cfg)?;
    log::info!(
        "generated {} samples of {:?} on meshes {:?}",
        set.n_samples(),
        set.family,
        h.levels().iter().map(|l| l.1.len()).collect::<Vec<_>>()
    );
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub family: Family,
    pub train_meshes: Vec<String>,
    pub model_nodes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub epochs: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

/// Train/test indices implied by a training configuration.
pub fn split_for(data: &SnapshotSet, train: &TrainConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    Ok(datagen::stratified_split(&data.params, train.train_fraction, train.seed)?)
}

fn train_mesh_ids(data: &SnapshotSet, train_idx: &[usize]) -> Vec<String> {
    let mut used: Vec<usize> = train_idx.iter().map(|&t| data.assignment[t]).collect();
    used.sort_unstable();
    used.dedup();
    used.into_iter().map(|m| data.mesh_ids[m].clone()).collect()
}

/// Trains on the dataset at `data_dir`; writes `checkpoint/`, `loss.csv`
/// and `train_summary.json` into `out`.
pub fn run_train(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = SnapshotSet::load(data_dir)
        .with_context(|| format!("cannot load dataset {}", data_dir.display()))?;
    let (train_idx, test_idx) = split_for(&data, &cfg.train)?;
    let samples = data.samples(&train_idx);
    // start from the largest training mesh
    let init = samples
        .iter()
        .map(|s| &s.mesh)
        .fold(None::<&Arc<Mesh>>, |best, m| match best {
            Some(b) if b.len() >= m.len() => Some(b),
            _ => Some(m),
        })
        .context("empty training set")?
        .clone();
    let mut model = RomModel::new(init, data.family.n_params(), &cfg.architecture, cfg.train.omega, cfg.seed)?;
    io::create_dir(out)?;
    let history = match rom::train(&mut model, &samples, &cfg.train) {
        Ok(h) => h,
        Err(gfnrom::Error::NonFiniteLoss { epoch, history }) => {
            rom::write_loss_csv(&out.join("loss.csv"), &history)?;
            bail!("training diverged: non-finite loss at epoch {epoch}");
        }
        Err(e) => return Err(e.into()),
    };
    rom::write_loss_csv(&out.join("loss.csv"), &history)?;
    model.save(&out.join("checkpoint"), &cfg.train)?;
    let summary = TrainSummary {
        family: data.family,
        train_meshes: train_mesh_ids(&data, &train_idx),
        model_nodes: model.mesh().len(),
        n_train: train_idx.len(),
        n_test: test_idx.len(),
        epochs: history.len(),
        initial_loss: history.first().map(|r| r.total),
        final_loss: history.last().map(|r| r.total),
    };
    io::write_json(&out.join("train_summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PodMetrics {
    pub rank: usize,
    pub mean_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub index: usize,
    pub mu: Vec<f64>,
    pub error: Option<f64>,
    pub pod_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub family: Family,
    pub train_meshes: Vec<String>,
    pub model_nodes: usize,
    pub eval_mesh: String,
    pub eval_nodes: usize,
    pub latent_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub mean_relative_error: f64,
    pub pod: Option<PodMetrics>,
    pub train_params: Vec<Vec<f64>>,
    pub test: Vec<TestRecord>,
}

/// Evaluates a checkpoint on the test split at mesh `eval_mesh`; writes
/// `metrics.json` and `errors.csv` into `out`.
pub fn run_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    data_dir: &Path,
    eval_mesh: &str,
    with_pod: bool,
    out: &Path,
) -> Result<Metrics> {
    let (model, train_cfg) = RomModel::load(checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", checkpoint.display()))?;
    let data = SnapshotSet::load(data_dir)
        .with_context(|| format!("cannot load dataset {}", data_dir.display()))?;
    if model.n_params != data.family.n_params() {
        bail!(
            "checkpoint expects {} parameters, dataset has {}",
            model.n_params,
            data.family.n_params()
        );
    }
    let (train_idx, test_idx) = split_for(&data, &train_cfg)?;
    let mesh = data.mesh(eval_mesh)?.clone();
    let fields = data.fields_on(eval_mesh)?;
    let mus: Vec<Vec<f64>> = test_idx.iter().map(|&t| data.params[t].clone()).collect();
    let truth: Vec<Vec<f64>> = test_idx.iter().map(|&t| fields[t].clone()).collect();
    let summary = rom::mean_relative_error(&model, &mus, &truth, &mesh)?;

    let (pod, pod_errors) = if with_pod {
        let rank = cfg.pod_rank.unwrap_or(model.latent_dim);
        let basis = pod_basis(snapshot_matrix(fields, &train_idx)?.view(), rank)?;
        let test = snapshot_matrix(fields, &test_idx)?;
        let pod_summary = pod_projection_error(&basis, test.view())?;
        (
            Some(PodMetrics {
                rank,
                mean_relative_error: pod_summary.mean,
            }),
            pod_summary.per_sample,
        )
    } else {
        (None, vec![None; test_idx.len()])
    };

    let metrics = Metrics {
        family: data.family,
        train_meshes: train_mesh_ids(&data, &train_idx),
        model_nodes: model.mesh().len(),
        eval_mesh: eval_mesh.to_string(),
        eval_nodes: mesh.len(),
        latent_dim: model.latent_dim,
        n_train: train_idx.len(),
        n_test: test_idx.len(),
        mean_relative_error: summary.mean,
        pod,
        train_params: train_idx.iter().map(|&t| data.params[t].clone()).collect(),
        test: test_idx
            .iter()
            .zip(summary.per_sample.iter().zip(&pod_errors))
            .map(|(&t, (&e, &p))| TestRecord {
                index: t,
                mu: data.params[t].clone(),
                error: e,
                pod_error: p,
            })
            .collect(),
    };
    io::create_dir(out)?;
    io::write_json(&out.join(METRICS_FILE), &metrics)?;
    write_errors_csv(&out.join("errors.csv"), &metrics)?;
    Ok(metrics)
}

fn write_errors_csv(path: &Path, m: &Metrics) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n_mu = m.test.first().map_or(0, |r| r.mu.len());
    let mut header = vec!["index".to_string()];
    header.extend((1..=n_mu).map(|k| format!("mu_{k}")));
    header.push("error".into());
    header.push("pod_error".into());
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &m.test {
        let mut row = vec![r.index.to_string()];
        row.extend(r.mu.iter().map(|v| v.to_string()));
        row.push(opt(r.error));
        row.push(opt(r.pod_error));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Checks the three error bounds on the test split, from the checkpoint's
/// mesh to `mesh_id`; writes `bounds.json` and `bounds_summary.csv`.
pub fn run_bounds(checkpoint: &Path, data_dir: &Path, mesh_id: &str, out: &Path) -> Result<BoundReport> {
    let (model, train_cfg) = RomModel::load(checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", checkpoint.display()))?;
    let data = SnapshotSet::load(data_dir)
        .with_context(|| format!("cannot load dataset {}", data_dir.display()))?;
    let (_, test_idx) = split_for(&data, &train_cfg)?;
    let m_new = data.mesh(mesh_id)?.clone();
    let samples = test_idx
        .iter()
        .map(|&t| {
            let mu = data.params[t].clone();
            Ok(BoundSample {
                u_old: analytic_field(data.family, &mu, model.mesh())?,
                u_new: analytic_field(data.family, &mu, &m_new)?,
                mu,
            })
        })
        .collect::<gfnrom::Result<Vec<_>>>()?;
    let report = verify_bounds(&model, &samples, &m_new)?;
    io::create_dir(out)?;
    report.write_json(&out.join("bounds.json"))?;
    report.write_summary_csv(&out.join("bounds_summary.csv"))?;
    Ok(report)
}

/// Directory layout written by [`run_pipeline`].
pub struct PipelinePaths {
    pub data: std::path::PathBuf,
    pub train: std::path::PathBuf,
    pub eval: std::path::PathBuf,
    pub bounds: std::path::PathBuf,
    pub report: std::path::PathBuf,
}

impl PipelinePaths {
    pub fn under(out: &Path) -> Self {
        PipelinePaths {
            data: out.join("data"),
            train: out.join("train"),
            eval: out.join("eval"),
            bounds: out.join("bounds"),
            report: out.join("report"),
        }
    }
}

/// gen → train → eval → bounds → report under `out`.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<BoundReport> {
    let p = PipelinePaths::under(out);
    run_gen(cfg, &p.data)?;
    run_train(cfg, &p.data, &p.train)?;
    let ckpt = p.train.join("checkpoint");
    run_eval(cfg, &ckpt, &p.data, &cfg.eval_mesh, cfg.with_pod, &p.eval)?;
    let report = run_bounds(&ckpt, &p.data, &cfg.bounds_mesh, &p.bounds)?;
    report::run_report(out, &p.report)?;
    Ok(report)
}
