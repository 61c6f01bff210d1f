//! The GFN-ROM: a GFN autoencoder whose mesh-facing weights live on a master
//! mesh, plus a mapper from parameters to the latent space.
//!
//! Training minimizes
//! `(1/T) Σ_t (|M_t| / Σ_s |M_s|) (recon_t + ω map_t)` where
//! `recon_t = ‖dec(enc(u_t)) − u_t‖² / |M_t|` and
//! `map_t = ‖enc(u_t) − map(μ_t)‖² / N`, with every sample seen through the
//! transfer of the master-mesh weights onto its own mesh.

use std::borrow::Cow;
use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gfn::{self, BundleManifest, Transfer, WeightBundle};
use crate::io;
use crate::mesh::{master_mesh_union, Mesh, NeighborMap};
use crate::neural::{
    self, Activation, Dense, DenseNet, DenseNetGrad, Optimizer, OptimizerKind, ParamSlot,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// The model mesh never changes.
    Fixed,
    /// The model mesh grows to the master union before each sample; SGD only.
    Adaptive,
    /// The final master mesh is built up front; then trained as `Fixed`.
    #[default]
    PrecomputedAdaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub omega: f64,
    pub mode: TrainMode,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub train_fraction: f64,
    /// Min-max scale fields to `[0, 1]` using the training set range.
    pub normalize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5000,
            lr: 1e-3,
            l2: 1e-5,
            omega: 10.0,
            mode: TrainMode::default(),
            optimizer: OptimizerKind::Adam,
            seed: 0,
            train_fraction: 0.30,
            normalize: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::Config(format!("l2 must be non-negative, got {}", self.l2)));
        }
        if !(self.omega > 0.0) {
            return Err(Error::Config(format!("omega must be positive, got {}", self.omega)));
        }
        if self.mode == TrainMode::Adaptive && self.optimizer == OptimizerKind::Adam {
            return Err(Error::Config(
                "adaptive mode changes the parameter count during training and cannot use adam; \
                 use sgd or precomputed_adaptive"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Layer sizes of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    /// Width of the GFN layers.
    pub width: usize,
    /// Latent size; `⌊1.5 N_μ⌋` when absent.
    pub latent_dim: Option<usize>,
    /// Extra encoder layer sizes between `width` and the latent space; the
    /// decoder mirrors them.
    pub encoder_hidden: Vec<usize>,
    pub mapper_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            width: 200,
            latent_dim: None,
            encoder_hidden: Vec::new(),
            mapper_hidden: vec![50; 4],
        }
    }
}

impl Architecture {
    pub fn latent_for(&self, n_params: usize) -> usize {
        self.latent_dim.unwrap_or((3 * n_params) / 2)
    }
}

/// Affine field scaling `u = offset + scale * u_work`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldScale {
    pub offset: f64,
    pub scale: f64,
}

impl Default for FieldScale {
    fn default() -> Self {
        FieldScale {
            offset: 0.0,
            scale: 1.0,
        }
    }
}

impl FieldScale {
    fn to_work(self, u: f64) -> f64 {
        (u - self.offset) / self.scale
    }

    fn from_work(self, v: f64) -> f64 {
        self.offset + self.scale * v
    }

    pub fn is_identity(self) -> bool {
        self.offset == 0.0 && self.scale == 1.0
    }
}

/// One training or evaluation sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub mu: Vec<f64>,
    pub u: Vec<f64>,
    pub mesh: Arc<Mesh>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    /// The training objective, including the `1/T` factor.
    pub total: f64,
    /// Mesh-size weighted mean reconstruction loss.
    pub recon: f64,
    /// Mesh-size weighted mean mapper loss.
    pub map: f64,
}

pub type LossHistory = Vec<LossRecord>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub map: f64,
}

#[derive(Debug, Clone)]
pub struct RomModel {
    /// GFN weights on the model (master) mesh.
    pub bundle: WeightBundle,
    /// Layers from the GFN encoder output to the latent space (tanh).
    pub enc_hidden: DenseNet,
    /// Layers from the latent space to the GFN decoder input (tanh).
    pub dec_hidden: DenseNet,
    pub mapper: DenseNet,
    pub omega: f64,
    pub latent_dim: usize,
    pub n_params: usize,
    pub scale: FieldScale,
}

/// Gradient of the training objective, laid out like [`RomModel`].
#[derive(Debug, Clone)]
pub struct RomGrad {
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
    pub enc_hidden: DenseNetGrad,
    pub dec_hidden: DenseNetGrad,
    pub mapper: DenseNetGrad,
}

impl RomGrad {
    fn zeros_like(model: &RomModel) -> Self {
        let wb = &model.bundle;
        RomGrad {
            w_enc: Array2::zeros(wb.w_enc.dim()),
            b_enc: Array1::zeros(wb.b_enc.len()),
            w_dec: Array2::zeros(wb.w_dec.dim()),
            b_dec: Array1::zeros(wb.b_dec.len()),
            enc_hidden: DenseNetGrad::zeros_like(&model.enc_hidden),
            dec_hidden: DenseNetGrad::zeros_like(&model.dec_hidden),
            mapper: DenseNetGrad::zeros_like(&model.mapper),
        }
    }

    /// Flat views in the order of [`RomModel::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.w_enc.as_slice().unwrap(),
            self.b_enc.as_slice().unwrap(),
            self.w_dec.as_slice().unwrap(),
            self.b_dec.as_slice().unwrap(),
        ];
        for g in [&self.enc_hidden, &self.dec_hidden, &self.mapper] {
            for (w, b) in g.w.iter().zip(&g.b) {
                out.push(w.as_slice().unwrap());
                out.push(b.as_slice().unwrap());
            }
        }
        out
    }
}

impl RomModel {
    /// Glorot-initialized model on `mesh` for `n_params` parameters.
    pub fn new(mesh: Arc<Mesh>, n_params: usize, arch: &Architecture, omega: f64, seed: u64) -> Result<Self> {
        if mesh.is_empty() {
            return Err(Error::EmptyMesh);
        }
        let latent = arch.latent_for(n_params);
        if n_params == 0 || latent == 0 || arch.width == 0 {
            return Err(Error::Config(format!(
                "model needs positive sizes, got {n_params} parameters, latent {latent}, width {}",
                arch.width
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bundle = WeightBundle::glorot(arch.width, mesh, &mut rng);
        let mut enc_sizes = vec![arch.width];
        enc_sizes.extend(&arch.encoder_hidden);
        enc_sizes.push(latent);
        let dec_sizes: Vec<usize> = enc_sizes.iter().rev().copied().collect();
        let enc_hidden = DenseNet::glorot(&enc_sizes, Activation::Tanh, Activation::Tanh, &mut rng);
        let dec_hidden = DenseNet::glorot(&dec_sizes, Activation::Tanh, Activation::Tanh, &mut rng);
        let mut map_sizes = vec![n_params];
        map_sizes.extend(&arch.mapper_hidden);
        map_sizes.push(latent);
        let mapper = DenseNet::glorot(&map_sizes, Activation::Tanh, Activation::Identity, &mut rng);
        Ok(RomModel {
            bundle,
            enc_hidden,
            dec_hidden,
            mapper,
            omega,
            latent_dim: latent,
            n_params,
            scale: FieldScale::default(),
        })
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.bundle.mesh
    }

    /// Transfer from the model mesh onto `mesh`.
    pub fn transfer_to(&self, mesh: &Arc<Mesh>) -> Result<Transfer> {
        check_dim(self.mesh(), mesh)?;
        Transfer::new(self.mesh(), mesh)
    }

    /// GFN weights as seen on `mesh`.
    pub fn bundle_on(&self, mesh: &Arc<Mesh>) -> Result<Cow<'_, WeightBundle>> {
        if Arc::ptr_eq(mesh, self.mesh()) || mesh.same_nodes(self.mesh()) {
            return Ok(Cow::Borrowed(&self.bundle));
        }
        Ok(Cow::Owned(self.transfer_to(mesh)?.apply(&self.bundle)))
    }

    fn work_field(&self, u: &[f64]) -> Vec<f64> {
        if self.scale.is_identity() {
            return u.to_vec();
        }
        u.iter().map(|&v| self.scale.to_work(v)).collect()
    }

    fn physical_field(&self, mut v: Vec<f64>) -> Vec<f64> {
        if !self.scale.is_identity() {
            v.iter_mut().for_each(|x| *x = self.scale.from_work(*x));
        }
        v
    }

    /// Latent code of `u` with GFN weights already on the field's mesh.
    pub fn encode_with(&self, wb: &WeightBundle, u: &[f64]) -> Result<Vec<f64>> {
        neural::encode(wb, &self.enc_hidden, &self.work_field(u))
    }

    /// Field decoded from `z` with GFN weights already on the target mesh.
    pub fn decode_with(&self, wb: &WeightBundle, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.physical_field(neural::decode(wb, &self.dec_hidden, z)?))
    }

    pub fn encode(&self, u: &[f64], mesh: &Arc<Mesh>) -> Result<Vec<f64>> {
        self.encode_with(&*self.bundle_on(mesh)?, u)
    }

    pub fn decode(&self, z: &[f64], mesh: &Arc<Mesh>) -> Result<Vec<f64>> {
        self.decode_with(&*self.bundle_on(mesh)?, z)
    }

    pub fn map(&self, mu: &[f64]) -> Result<Vec<f64>> {
        neural::map_params(&self.mapper, mu)
    }

    /// `dec(map(μ))` on `mesh`; the encoder is not used.
    pub fn predict(&self, mu: &[f64], mesh: &Arc<Mesh>) -> Result<Vec<f64>> {
        self.decode(&self.map(mu)?, mesh)
    }

    /// Predictions for many parameter vectors on one mesh.
    pub fn predict_many(&self, mus: &[Vec<f64>], mesh: &Arc<Mesh>) -> Result<Vec<Vec<f64>>> {
        let wb = self.bundle_on(mesh)?;
        mus.par_iter()
            .map(|mu| self.decode_with(&wb, &self.map(mu)?))
            .collect()
    }

    /// Mutable flat views of every trainable tensor, with the L2 flag.
    pub fn param_slices_mut(&mut self) -> Vec<(&mut [f64], bool)> {
        let wb = &mut self.bundle;
        let mut out: Vec<(&mut [f64], bool)> = vec![
            (wb.w_enc.as_slice_mut().unwrap(), true),
            (wb.b_enc.as_slice_mut().unwrap(), false),
            (wb.w_dec.as_slice_mut().unwrap(), true),
            (wb.b_dec.as_slice_mut().unwrap(), false),
        ];
        for net in [&mut self.enc_hidden, &mut self.dec_hidden, &mut self.mapper] {
            for layer in &mut net.layers {
                out.push((layer.w.as_slice_mut().unwrap(), true));
                out.push((layer.b.as_slice_mut().unwrap(), false));
            }
        }
        out
    }

    fn check_sample(&self, s: &Sample) -> Result<()> {
        check_dim(self.mesh(), &s.mesh)?;
        if s.u.len() != s.mesh.len() {
            return Err(Error::Shape(format!(
                "field has {} values on a mesh of {} nodes",
                s.u.len(),
                s.mesh.len()
            )));
        }
        if s.mu.len() != self.n_params {
            return Err(Error::Shape(format!(
                "parameter vector has length {}, model expects {}",
                s.mu.len(),
                self.n_params
            )));
        }
        Ok(())
    }

    /// Loss and gradient over `samples`, transfers built on the fly.
    pub fn loss_and_gradient(&self, samples: &[Sample]) -> Result<(LossBreakdown, RomGrad)> {
        let mut cache = TransferCache::default();
        let all: Vec<usize> = (0..samples.len()).collect();
        self.batch_gradient(samples, &all, &mut cache)
    }

    pub fn total_loss(&self, samples: &[Sample]) -> Result<LossBreakdown> {
        Ok(self.loss_and_gradient(samples)?.0)
    }

    fn batch_gradient(
        &self,
        samples: &[Sample],
        batch: &[usize],
        cache: &mut TransferCache,
    ) -> Result<(LossBreakdown, RomGrad)> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("training batch".into()));
        }
        for &t in batch {
            self.check_sample(&samples[t])?;
        }
        let n_batch = batch.len();
        let node_sum: usize = batch.iter().map(|&t| samples[t].mesh.len()).sum();
        let weight = |t: usize| samples[t].mesh.len() as f64 / (n_batch as f64 * node_sum as f64);
        let lat = self.latent_dim as f64;

        let mu = Array2::from_shape_fn((self.n_params, n_batch), |(i, c)| samples[batch[c]].mu[i]);
        let map_trace = self.mapper.forward_trace(mu)?;
        let mapped = map_trace.output();
        let mut d_mapped = Array2::zeros(mapped.dim());

        let mut grad = RomGrad::zeros_like(self);
        let (mut total, mut recon_w, mut map_w) = (0.0, 0.0, 0.0);

        // groups of batch columns sharing a mesh, in order of first appearance
        let mut groups: Vec<(Arc<Mesh>, Vec<usize>)> = Vec::new();
        for (c, &t) in batch.iter().enumerate() {
            match groups.iter_mut().find(|g| Arc::ptr_eq(&g.0, &samples[t].mesh)) {
                Some(g) => g.1.push(c),
                None => groups.push((samples[t].mesh.clone(), vec![c])),
            }
        }

        for (mesh, cols) in &groups {
            let transfer = cache.get(self.mesh(), mesh)?;
            let wb: Cow<WeightBundle> = if transfer.is_identity() {
                Cow::Borrowed(&self.bundle)
            } else {
                Cow::Owned(transfer.apply(&self.bundle))
            };
            let n_t = mesh.len();
            let x = Array2::from_shape_fn((n_t, cols.len()), |(i, c)| {
                self.scale.to_work(samples[batch[cols[c]]].u[i])
            });
            let h1 = neural::gfn_encode_layer(&wb, x.view())?;
            let enc_trace = self.enc_hidden.forward_trace(h1)?;
            let z = enc_trace.output().clone();
            let dec_trace = self.dec_hidden.forward_trace(z.clone())?;
            let u_hat = neural::gfn_decode_layer(&wb, dec_trace.output().view())?;

            let mut d_uhat = u_hat - &x;
            let mut d_z_map = Array2::zeros(z.dim());
            for (k, &c) in cols.iter().enumerate() {
                let w = weight(batch[c]);
                let mut r_col = d_uhat.column_mut(k);
                let recon = r_col.dot(&r_col) / n_t as f64;
                r_col *= 2.0 * w / n_t as f64;
                let diff = &z.column(k) - &mapped.column(c);
                let map = diff.dot(&diff) / lat;
                let g = &diff * (2.0 * w * self.omega / lat);
                d_z_map.column_mut(k).assign(&g);
                d_mapped.column_mut(c).assign(&(-&g));
                total += w * (recon + self.omega * map);
                recon_w += w * n_batch as f64 * recon;
                map_w += w * n_batch as f64 * map;
            }

            let h2 = dec_trace.output();
            let g_w_dec = d_uhat.dot(&h2.t());
            let g_b_dec = d_uhat.sum_axis(Axis(1));
            let d_h2 = wb.w_dec.t().dot(&d_uhat);
            let mut d_z = self.dec_hidden.backward(&dec_trace, d_h2, &mut grad.dec_hidden);
            d_z += &d_z_map;
            let mut d_a1 = self.enc_hidden.backward(&enc_trace, d_z, &mut grad.enc_hidden);
            d_a1.zip_mut_with(&enc_trace.outputs[0], |d, &y| *d *= 1.0 - y * y);
            let g_w_enc = d_a1.dot(&x.t());
            grad.b_enc += &d_a1.sum_axis(Axis(1));
            grad.w_enc += &transfer.adjoint_enc(&g_w_enc);
            grad.w_dec += &transfer.adjoint_dec(&g_w_dec);
            grad.b_dec += &transfer.adjoint_dec_bias(&g_b_dec);
        }
        self.mapper.backward(&map_trace, d_mapped, &mut grad.mapper);

        let loss = LossBreakdown {
            total,
            recon: recon_w,
            map: map_w,
        };
        Ok((loss, grad))
    }

    /// Replaces the GFN weights by their expansion onto `mesh`, which must
    /// contain the current model mesh's relations expansively.
    pub fn expand_to(&mut self, mesh: &Arc<Mesh>) -> Result<()> {
        if mesh.same_nodes(self.mesh()) {
            return Ok(());
        }
        self.bundle = gfn::expand(&self.bundle, mesh)?;
        Ok(())
    }

    pub fn save(&self, dir: &Path, train_config: &TrainConfig) -> Result<()> {
        io::create_dir(dir)?;
        let bundle = self.bundle.save_blobs(dir)?;
        let manifest = CheckpointManifest {
            bundle,
            enc_hidden: save_net(dir, "enc_hidden", &self.enc_hidden)?,
            dec_hidden: save_net(dir, "dec_hidden", &self.dec_hidden)?,
            mapper: save_net(dir, "mapper", &self.mapper)?,
            omega: self.omega,
            latent_dim: self.latent_dim,
            n_params: self.n_params,
            scale: self.scale,
            train_config: train_config.clone(),
        };
        io::write_json(&dir.join("manifest.json"), &manifest)
    }

    /// Loads a checkpoint, returning the model and its training configuration.
    pub fn load(dir: &Path) -> Result<(Self, TrainConfig)> {
        let m: CheckpointManifest = io::read_json(&dir.join("manifest.json"))?;
        let bundle = WeightBundle::load_blobs(dir, &m.bundle)?;
        let model = RomModel {
            bundle,
            enc_hidden: load_net(dir, &m.enc_hidden)?,
            dec_hidden: load_net(dir, &m.dec_hidden)?,
            mapper: load_net(dir, &m.mapper)?,
            omega: m.omega,
            latent_dim: m.latent_dim,
            n_params: m.n_params,
            scale: m.scale,
        };
        model.check_consistent().map_err(|e| Error::format(dir.join("manifest.json"), e.to_string()))?;
        Ok((model, m.train_config))
    }

    fn check_consistent(&self) -> Result<()> {
        let enc = self.enc_hidden.sizes();
        let dec = self.dec_hidden.sizes();
        let map = self.mapper.sizes();
        let ok = enc.first() == Some(&self.bundle.width())
            && enc.last() == Some(&self.latent_dim)
            && dec.first() == Some(&self.latent_dim)
            && dec.last() == Some(&self.bundle.width())
            && map.first() == Some(&self.n_params)
            && map.last() == Some(&self.latent_dim);
        if !ok {
            return Err(Error::Shape(format!(
                "inconsistent layer sizes: encoder {enc:?}, decoder {dec:?}, mapper {map:?}, width {}, latent {}",
                self.bundle.width(),
                self.latent_dim
            )));
        }
        Ok(())
    }
}

fn check_dim(a: &Mesh, b: &Mesh) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    if b.is_empty() {
        return Err(Error::EmptyMesh);
    }
    Ok(())
}

/// Transfers from the current model mesh, keyed by target mesh identity.
#[derive(Default)]
struct TransferCache {
    source: Option<Arc<Mesh>>,
    source_ptr: usize,
    map: HashMap<usize, Transfer>,
}

impl TransferCache {
    fn get(&mut self, src: &Arc<Mesh>, dst: &Arc<Mesh>) -> Result<&Transfer> {
        let src_ptr = Arc::as_ptr(src) as usize;
        if self.source.is_none() || self.source_ptr != src_ptr {
            self.map.clear();
            self.source = Some(src.clone());
            self.source_ptr = src_ptr;
        }
        let key = Arc::as_ptr(dst) as usize;
        if !self.map.contains_key(&key) {
            check_dim(src, dst)?;
            let t = Transfer::new(src, dst)?;
            self.map.insert(key, t);
        }
        Ok(&self.map[&key])
    }
}

/// Union of the model mesh and every training mesh, grown in sample order.
pub fn final_master_mesh(start: &Arc<Mesh>, meshes: &[Arc<Mesh>]) -> Result<Arc<Mesh>> {
    let mut master = start.clone();
    for m in meshes {
        master = grow_master(&master, m)?;
    }
    Ok(master)
}

fn grow_master(master: &Arc<Mesh>, m: &Arc<Mesh>) -> Result<Arc<Mesh>> {
    if Arc::ptr_eq(master, m) {
        return Ok(master.clone());
    }
    check_dim(master, m)?;
    let nm = NeighborMap::build(master, m)?;
    if nm.unmatched_new().is_empty() {
        return Ok(master.clone());
    }
    Ok(Arc::new(master_mesh_union(master, m, &nm)))
}

fn apply_step(model: &mut RomModel, opt: &mut Optimizer, grad: &RomGrad) -> Result<()> {
    let grads = grad.slices();
    let mut slots: Vec<ParamSlot> = model
        .param_slices_mut()
        .into_iter()
        .zip(grads)
        .map(|((value, decay), grad)| ParamSlot { value, grad, decay })
        .collect();
    opt.step(&mut slots)
}

fn training_scale(samples: &[Sample]) -> FieldScale {
    let (lo, hi) = samples
        .iter()
        .flat_map(|s| s.u.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return FieldScale::default();
    }
    FieldScale {
        offset: lo,
        scale: hi - lo,
    }
}

/// Trains `model` in place and returns the per-epoch loss history.
///
/// Each record holds the loss measured before that epoch's update (for
/// adaptive mode: accumulated over the epoch's per-sample steps).
pub fn train(model: &mut RomModel, samples: &[Sample], cfg: &TrainConfig) -> Result<LossHistory> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("training set".into()));
    }
    for s in samples {
        model.check_sample(s)?;
    }
    model.omega = cfg.omega;
    if cfg.normalize {
        model.scale = training_scale(samples);
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.l2);
    let mut cache = TransferCache::default();
    let mut history = Vec::with_capacity(cfg.epochs);

    if cfg.mode == TrainMode::PrecomputedAdaptive {
        let mut meshes: Vec<Arc<Mesh>> = Vec::new();
        for s in samples {
            if !meshes.iter().any(|m| Arc::ptr_eq(m, &s.mesh)) {
                meshes.push(s.mesh.clone());
            }
        }
        let master = final_master_mesh(model.mesh(), &meshes)?;
        model.expand_to(&master)?;
    }

    match cfg.mode {
        TrainMode::Fixed | TrainMode::PrecomputedAdaptive => {
            let all: Vec<usize> = (0..samples.len()).collect();
            for epoch in 0..cfg.epochs {
                let (loss, grad) = model.batch_gradient(samples, &all, &mut cache)?;
                history.push(LossRecord {
                    epoch,
                    total: loss.total,
                    recon: loss.recon,
                    map: loss.map,
                });
                if !loss.total.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, history });
                }
                apply_step(model, &mut opt, &grad)?;
            }
        }
        TrainMode::Adaptive => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut order: Vec<usize> = (0..samples.len()).collect();
            let node_sum: usize = samples.iter().map(|s| s.mesh.len()).sum();
            let n = samples.len() as f64;
            for epoch in 0..cfg.epochs {
                order.shuffle(&mut rng);
                let (mut total, mut recon, mut map) = (0.0, 0.0, 0.0);
                for &t in &order {
                    let master = grow_master(model.mesh(), &samples[t].mesh)?;
                    if !Arc::ptr_eq(&master, model.mesh()) {
                        model.expand_to(&master)?;
                    }
                    let (loss, grad) = model.batch_gradient(samples, &[t], &mut cache)?;
                    let w = samples[t].mesh.len() as f64 / node_sum as f64;
                    total += w * loss.total / n;
                    recon += w * loss.recon;
                    map += w * loss.map;
                    if !loss.total.is_finite() {
                        break;
                    }
                    apply_step(model, &mut opt, &grad)?;
                }
                history.push(LossRecord {
                    epoch,
                    total,
                    recon,
                    map,
                });
                if !total.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, history });
                }
            }
        }
    }
    Ok(history)
}

pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_record(["epoch", "total", "recon", "map"])
        .map_err(|e| Error::format(path, e.to_string()))?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.total.to_string(),
            r.recon.to_string(),
            r.map.to_string(),
        ])
        .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_csv(path: &Path) -> Result<LossHistory> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize()
        .map(|rec| rec.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

/// `100 ‖pred − truth‖ / ‖truth‖`, or `None` when `truth` is zero.
pub fn relative_error_percent(pred: &[f64], truth: &[f64]) -> Option<f64> {
    let norm = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return None;
    }
    let err = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        .sqrt();
    Some(100.0 * err / norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    /// Mean over samples with nonzero reference norm, in percent.
    pub mean: f64,
    /// Per-sample errors; `None` for excluded zero-norm samples.
    pub per_sample: Vec<Option<f64>>,
}

/// Averages per-sample relative errors, skipping (and logging) zero-norm references.
pub fn summarize_errors(per_sample: Vec<Option<f64>>) -> Result<ErrorSummary> {
    let kept: Vec<f64> = per_sample.iter().flatten().copied().collect();
    let skipped = per_sample.len() - kept.len();
    if skipped > 0 {
        log::warn!("excluded {skipped} sample(s) with zero reference norm from the error mean");
    }
    if kept.is_empty() {
        return Err(Error::EmptyInput("no sample with nonzero reference norm".into()));
    }
    Ok(ErrorSummary {
        mean: kept.iter().sum::<f64>() / kept.len() as f64,
        per_sample,
    })
}

/// Mean relative prediction error (%) of `model` on `mesh`.
pub fn mean_relative_error(
    model: &RomModel,
    mus: &[Vec<f64>],
    fields: &[Vec<f64>],
    mesh: &Arc<Mesh>,
) -> Result<ErrorSummary> {
    if mus.len() != fields.len() {
        return Err(Error::Shape(format!(
            "{} parameter vectors for {} fields",
            mus.len(),
            fields.len()
        )));
    }
    if mus.is_empty() {
        return Err(Error::EmptyInput("test set".into()));
    }
    let preds = model.predict_many(mus, mesh)?;
    summarize_errors(
        preds
            .iter()
            .zip(fields)
            .map(|(p, u)| relative_error_percent(p, u))
            .collect(),
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerManifest {
    n_in: usize,
    n_out: usize,
    w: String,
    b: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NetManifest {
    activation: Activation,
    last_activation: Activation,
    layers: Vec<LayerManifest>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    bundle: BundleManifest,
    enc_hidden: NetManifest,
    dec_hidden: NetManifest,
    mapper: NetManifest,
    omega: f64,
    latent_dim: usize,
    n_params: usize,
    scale: FieldScale,
    train_config: TrainConfig,
}

fn save_net(dir: &Path, name: &str, net: &DenseNet) -> Result<NetManifest> {
    let mut layers = Vec::new();
    for (k, l) in net.layers.iter().enumerate() {
        let w = format!("{name}_{k}_w.bin");
        let b = format!("{name}_{k}_b.bin");
        io::write_f64_blob(&dir.join(&w), l.w.as_slice().unwrap())?;
        io::write_f64_blob(&dir.join(&b), l.b.as_slice().unwrap())?;
        layers.push(LayerManifest {
            n_in: l.n_in(),
            n_out: l.n_out(),
            w,
            b,
        });
    }
    Ok(NetManifest {
        activation: net.activation,
        last_activation: net.last_activation,
        layers,
    })
}

fn load_net(dir: &Path, m: &NetManifest) -> Result<DenseNet> {
    let layers = m
        .layers
        .iter()
        .map(|l| {
            let w = io::read_f64_blob(&dir.join(&l.w), l.n_out * l.n_in)?;
            let b = io::read_f64_blob(&dir.join(&l.b), l.n_out)?;
            Dense::new(
                Array2::from_shape_vec((l.n_out, l.n_in), w).unwrap(),
                Array1::from(b),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let net = DenseNet::new(layers, m.activation, m.last_activation)?;
    if !net.is_finite() {
        return Err(Error::format(dir, "checkpoint contains non-finite weights"));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn line(n: usize, offset: f64) -> Arc<Mesh> {
        let xs: Vec<f64> = (0..n).map(|i| offset + i as f64 / (n - 1) as f64).collect();
        Arc::new(Mesh::from_1d(&xs).unwrap())
    }

    fn tiny_arch() -> Architecture {
        Architecture {
            width: 3,
            latent_dim: Some(2),
            encoder_hidden: vec![],
            mapper_hidden: vec![4],
        }
    }

    fn zero_model(mesh: Arc<Mesh>) -> RomModel {
        let mut m = RomModel::new(mesh, 1, &tiny_arch(), 10.0, 0).unwrap();
        for (v, _) in m.param_slices_mut() {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        m
    }

    fn toy_samples(mesh: &Arc<Mesh>, n: usize) -> Vec<Sample> {
        (0..n)
            .map(|k| {
                let mu = 0.5 + k as f64 / n as f64;
                Sample {
                    mu: vec![mu],
                    u: mesh.nodes().map(|x| (mu * x[0]).sin()).collect(),
                    mesh: mesh.clone(),
                }
            })
            .collect()
    }

    #[test]
    fn latent_defaults_to_one_and_a_half_params() {
        let a = Architecture::default();
        assert_eq!(a.latent_for(2), 3);
        assert_eq!(a.latent_for(3), 4);
        assert_eq!(a.latent_for(7), 10);
    }

    #[test]
    fn adaptive_with_adam_is_rejected() {
        let cfg = TrainConfig {
            mode: TrainMode::Adaptive,
            optimizer: OptimizerKind::Adam,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            train_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_model_recon_loss() {
        // u = [2, 0], |M| = 2: recon = 4 / 2
        let mesh = line(2, 0.0);
        let m = zero_model(mesh.clone());
        let s = Sample {
            mu: vec![0.3],
            u: vec![2.0, 0.0],
            mesh,
        };
        let loss = m.total_loss(&[s]).unwrap();
        assert_eq!(loss.recon, 2.0);
        assert_eq!(loss.map, 0.0);
        assert_eq!(loss.total, 2.0);
    }

    #[test]
    fn two_sample_total_has_double_half() {
        let mesh = line(2, 0.0);
        let m = zero_model(mesh.clone());
        let a = Sample { mu: vec![0.1], u: vec![2.0, 0.0], mesh: mesh.clone() };
        let b = Sample { mu: vec![0.2], u: vec![1.0, 1.0], mesh };
        let (la, lb) = (2.0, 1.0);
        let loss = m.total_loss(&[a, b]).unwrap();
        assert!((loss.total - (la + lb) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn total_loss_is_permutation_invariant() {
        let mesh = line(6, 0.0);
        let coarse = line(3, 0.0);
        let m = RomModel::new(mesh.clone(), 1, &tiny_arch(), 10.0, 4).unwrap();
        let mut s = toy_samples(&mesh, 3);
        s.extend(toy_samples(&coarse, 2));
        let a = m.total_loss(&s).unwrap().total;
        s.reverse();
        let b = m.total_loss(&s).unwrap().total;
        assert!((a - b).abs() <= 1e-14 * a.abs());
    }

    #[test]
    fn prediction_of_zero_model_is_decoder_bias_on_any_mesh() {
        let mesh = line(4, 0.0);
        let mut m = zero_model(mesh);
        m.bundle.b_dec.fill(0.7);
        let other = line(7, 0.05);
        assert_eq!(m.predict(&[0.4], &other).unwrap(), vec![0.7; 7]);
    }

    #[test]
    fn relative_error_examples() {
        let u = [1.0, -2.0, 2.0];
        assert_eq!(relative_error_percent(&u, &u), Some(0.0));
        assert_eq!(relative_error_percent(&[0.0; 3], &u), Some(100.0));
        let scaled: Vec<f64> = u.iter().map(|v| 1.1 * v).collect();
        assert!((relative_error_percent(&scaled, &u).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(relative_error_percent(&u, &[0.0; 3]), None);
        let s = summarize_errors(vec![Some(10.0), None, Some(20.0)]).unwrap();
        assert_eq!(s.mean, 15.0);
        assert!(summarize_errors(vec![None]).is_err());
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let mesh = line(8, 0.0);
        let samples = toy_samples(&mesh, 6);
        let cfg = TrainConfig {
            epochs: 200,
            lr: 5e-3,
            mode: TrainMode::Fixed,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = RomModel::new(mesh.clone(), 1, &tiny_arch(), 10.0, 1).unwrap();
            train(&mut m, &samples, &cfg).unwrap()
        };
        let h1 = run();
        let h2 = run();
        assert_eq!(h1, h2);
        assert!(h1.last().unwrap().total < h1[0].total / 5.0);
    }

    #[test]
    fn adaptive_master_mesh_grows_by_union() {
        let tiny = line(3, 0.0);
        let big = line(5, 0.0);
        let mut samples = toy_samples(&tiny, 2);
        samples.extend(toy_samples(&big, 2));
        let mut m = RomModel::new(tiny.clone(), 1, &tiny_arch(), 10.0, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            mode: TrainMode::Adaptive,
            optimizer: OptimizerKind::Sgd,
            ..TrainConfig::default()
        };
        train(&mut m, &samples, &cfg).unwrap();
        assert_eq!(m.mesh().len(), big.len());
        assert!(m.mesh().contains_all(&big));
        assert!(m.mesh().contains_all(&tiny));

        let mut p = RomModel::new(tiny.clone(), 1, &tiny_arch(), 10.0, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            mode: TrainMode::PrecomputedAdaptive,
            ..TrainConfig::default()
        };
        train(&mut p, &samples, &cfg).unwrap();
        assert_eq!(p.mesh().len(), big.len());
        assert!(p.mesh().contains_all(&big));
    }

    #[test]
    fn expand_then_agglomerate_back_keeps_predictions() {
        let coarse = line(4, 0.0);
        let fine = line(10, 0.0);
        let m = RomModel::new(coarse.clone(), 1, &tiny_arch(), 10.0, 3).unwrap();
        let mut e = m.clone();
        e.expand_to(&fine).unwrap();
        let back = gfn::gfn_transform(&e.bundle, &coarse).unwrap();
        let mut r = m.clone();
        r.bundle = back;
        let samples = toy_samples(&coarse, 3);
        let a = m.predict(&[0.7], &coarse).unwrap();
        let b = r.predict(&[0.7], &coarse).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
        let la = m.total_loss(&samples).unwrap().total;
        let lb = r.total_loss(&samples).unwrap().total;
        assert!((la - lb).abs() < 1e-14);
    }

    #[test]
    fn super_resolution_copies_coarse_values_at_coarse_nodes() {
        let fine = line(9, 0.0);
        let idx = [0usize, 4, 8];
        let coarse = Arc::new(fine.select(&idx).unwrap());
        let m = RomModel::new(coarse.clone(), 1, &tiny_arch(), 10.0, 8).unwrap();
        let pc = m.predict(&[0.9], &coarse).unwrap();
        let pf = m.predict(&[0.9], &fine).unwrap();
        for (k, &i) in idx.iter().enumerate() {
            assert_eq!(pc[k], pf[i]);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = line(5, 0.0);
        let mut m = RomModel::new(mesh.clone(), 1, &tiny_arch(), 3.0, 5).unwrap();
        m.scale = FieldScale { offset: -1.0, scale: 2.0 };
        let cfg = TrainConfig { epochs: 7, ..TrainConfig::default() };
        m.save(dir.path(), &cfg).unwrap();
        let (back, cfg2) = RomModel::load(dir.path()).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(back.predict(&[0.3], &mesh).unwrap(), m.predict(&[0.3], &mesh).unwrap());
        assert_eq!(back.mapper, m.mapper);
        assert_eq!(back.scale, m.scale);
    }

    #[test]
    fn corrupted_checkpoint_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = RomModel::new(line(5, 0.0), 1, &tiny_arch(), 3.0, 5).unwrap();
        m.save(dir.path(), &TrainConfig::default()).unwrap();
        std::fs::write(dir.path().join("w_enc.bin"), [0u8; 5]).unwrap();
        assert!(RomModel::load(dir.path()).is_err());
    }

    #[test]
    fn loss_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h: LossHistory = (0..5)
            .map(|epoch| LossRecord {
                epoch,
                total: rng.gen(),
                recon: rng.gen(),
                map: rng.gen(),
            })
            .collect();
        write_loss_csv(&path, &h).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("epoch,total,recon,map\n"));
        assert_eq!(read_loss_csv(&path).unwrap(), h);
    }
}
