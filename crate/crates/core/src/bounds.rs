//! Empirical checks of the cross-resolution error bounds of a trained model.
//!
//! With `δ` the largest field difference between related nodes of the model
//! mesh `M_o` and a new mesh `M_n`, and `τ`, `α`, `β` the largest errors
//! measured on `M_o`:
//!
//! - prediction: `|u_n − dec(map μ)| ≤ τ + δ` at every node of `M_n`;
//! - mapper: `|map μ − enc(u_n)| ≤ α + δ C^{P+1} ‖Wᵉ‖∞ ∏ ‖W⁽ᵖ⁾‖∞` per latent index;
//! - autoencoder: `|u_n − dec(enc u_n)| ≤ β + δ + δ C^{Q+1} ‖W^d‖∞ ‖Wᵉ‖∞ ∏ ‖W⁽ᵖ⁾‖∞`.
//!
//! `P` counts the encoder hidden layers, `Q` the encoder and decoder hidden
//! layers, and `‖·‖∞` is the largest absolute row sum. The right-hand sides
//! are evaluated per sample with that sample's `δ`.

use std::borrow::Cow;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gfn::WeightBundle;
use crate::io;
use crate::mesh::{Mesh, NeighborMap};
use crate::rom::RomModel;

/// Relative allowance for rounding when comparing the two sides.
pub const ROUNDING_TOLERANCE: f64 = 1e-12;

/// Max absolute row sum.
pub fn infinity_norm(w: &Array2<f64>) -> f64 {
    w.outer_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest `|u_o(i) − u_n(j)|` over related node pairs.
pub fn compute_delta(u_old: &[f64], u_new: &[f64], nm: &NeighborMap) -> f64 {
    nm.related_pairs()
        .map(|(i, j)| (u_old[i] - u_new[j]).abs())
        .fold(0.0, f64::max)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// One sample: parameters and the exact field on both meshes.
#[derive(Debug, Clone)]
pub struct BoundSample {
    pub mu: Vec<f64>,
    pub u_old: Vec<f64>,
    pub u_new: Vec<f64>,
}

/// Left-hand sides of one bound for one sample, against a common right-hand side.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeCheck {
    pub lhs: Vec<f64>,
    pub rhs: f64,
}

impl NodeCheck {
    pub fn max_lhs(&self) -> f64 {
        self.lhs.iter().copied().fold(0.0, f64::max)
    }

    /// `max(lhs) − rhs`; non-positive when the bound holds.
    pub fn slack(&self) -> f64 {
        self.max_lhs() - self.rhs
    }

    pub fn violations(&self) -> usize {
        let tol = ROUNDING_TOLERANCE * (1.0 + self.rhs.abs());
        self.lhs.iter().filter(|&&l| !(l <= self.rhs + tol)).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightNorms {
    pub w_enc: f64,
    pub w_dec: f64,
    pub enc_hidden: Vec<f64>,
    pub dec_hidden: Vec<f64>,
    pub enc_product: f64,
    pub dec_product: f64,
}

impl WeightNorms {
    pub fn of(model: &RomModel) -> Self {
        let enc_hidden: Vec<f64> = model.enc_hidden.layers.iter().map(|l| infinity_norm(&l.w)).collect();
        let dec_hidden: Vec<f64> = model.dec_hidden.layers.iter().map(|l| infinity_norm(&l.w)).collect();
        WeightNorms {
            w_enc: infinity_norm(&model.bundle.w_enc),
            w_dec: infinity_norm(&model.bundle.w_dec),
            enc_product: enc_hidden.iter().product(),
            dec_product: dec_hidden.iter().product(),
            enc_hidden,
            dec_hidden,
        }
    }
}

/// Everything fixed by the model and the mesh pair.
pub struct BoundContext<'a> {
    model: &'a RomModel,
    wb_new: Cow<'a, WeightBundle>,
    nm: NeighborMap,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub c: f64,
    pub norms: WeightNorms,
    /// Multiplier of `δ` in the mapper bound (field units).
    pub mapper_gain: f64,
    /// Multiplier of `δ` in the autoencoder bound beyond the `+δ` term.
    pub autoencoder_gain: f64,
}

impl<'a> BoundContext<'a> {
    /// Measures `τ`, `α`, `β` on the model mesh over `reference`.
    pub fn new(model: &'a RomModel, m_new: &Arc<Mesh>, reference: &[BoundSample]) -> Result<Self> {
        let m_old = model.mesh();
        let nm = NeighborMap::build(m_old, m_new)?;
        let wb_new = model.bundle_on(m_new)?;
        let per_sample = reference
            .par_iter()
            .map(|s| {
                check_lengths(s, m_old.len(), m_new.len())?;
                let z_map = model.map(&s.mu)?;
                let pred = model.decode_with(&model.bundle, &z_map)?;
                let z = model.encode_with(&model.bundle, &s.u_old)?;
                let rec = model.decode_with(&model.bundle, &z)?;
                Ok((
                    max_abs_diff(&s.u_old, &pred),
                    max_abs_diff(&z_map, &z),
                    max_abs_diff(&s.u_old, &rec),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let (tau, alpha, beta) = per_sample
            .iter()
            .fold((0.0f64, 0.0f64, 0.0f64), |acc, v| (acc.0.max(v.0), acc.1.max(v.1), acc.2.max(v.2)));
        let c = model
            .enc_hidden
            .activation
            .lipschitz()
            .max(model.dec_hidden.activation.lipschitz());
        let p = model.enc_hidden.layers.len() as i32;
        let q = p + model.dec_hidden.layers.len() as i32;
        let norms = WeightNorms::of(model);
        let enc_gain = c.powi(p + 1) * norms.w_enc * norms.enc_product;
        let mapper_gain = enc_gain / model.scale.scale;
        let autoencoder_gain = c.powi(q + 1) * norms.w_dec * norms.w_enc * norms.enc_product * norms.dec_product;
        Ok(BoundContext {
            model,
            wb_new,
            nm,
            tau,
            alpha,
            beta,
            c,
            norms,
            mapper_gain,
            autoencoder_gain,
        })
    }

    pub fn delta(&self, s: &BoundSample) -> f64 {
        compute_delta(&s.u_old, &s.u_new, &self.nm)
    }

    /// Prediction error at each node of the new mesh.
    pub fn verify_rom_bound(&self, s: &BoundSample) -> Result<NodeCheck> {
        let pred = self.model.decode_with(&self.wb_new, &self.model.map(&s.mu)?)?;
        Ok(NodeCheck {
            lhs: s.u_new.iter().zip(&pred).map(|(u, p)| (u - p).abs()).collect(),
            rhs: self.tau + self.delta(s),
        })
    }

    /// Mapper-versus-encoder gap at each latent index.
    pub fn verify_mapper_bound(&self, s: &BoundSample) -> Result<NodeCheck> {
        let z_map = self.model.map(&s.mu)?;
        let z = self.model.encode_with(&self.wb_new, &s.u_new)?;
        Ok(NodeCheck {
            lhs: z_map.iter().zip(&z).map(|(a, b)| (a - b).abs()).collect(),
            rhs: self.alpha + self.delta(s) * self.mapper_gain,
        })
    }

    /// Autoencoder reconstruction error at each node of the new mesh.
    pub fn verify_autoencoder_bound(&self, s: &BoundSample) -> Result<NodeCheck> {
        let z = self.model.encode_with(&self.wb_new, &s.u_new)?;
        let rec = self.model.decode_with(&self.wb_new, &z)?;
        let d = self.delta(s);
        Ok(NodeCheck {
            lhs: s.u_new.iter().zip(&rec).map(|(u, r)| (u - r).abs()).collect(),
            rhs: self.beta + d + d * self.autoencoder_gain,
        })
    }
}

fn check_lengths(s: &BoundSample, n_old: usize, n_new: usize) -> Result<()> {
    if s.u_old.len() != n_old || s.u_new.len() != n_new {
        return Err(Error::Shape(format!(
            "bound sample fields have {} / {} values for meshes of {n_old} / {n_new} nodes",
            s.u_old.len(),
            s.u_new.len()
        )));
    }
    Ok(())
}

/// Aggregate of one bound over all samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub bound: String,
    pub samples: usize,
    pub checks: usize,
    pub max_lhs: f64,
    pub min_rhs: f64,
    /// Largest `lhs − rhs` over samples; non-positive when every check holds.
    pub max_slack: f64,
    pub violations: usize,
    pub pass: bool,
}

impl BoundCheck {
    fn from_checks(name: &str, checks: &[NodeCheck]) -> Self {
        let violations: usize = checks.iter().map(NodeCheck::violations).sum();
        BoundCheck {
            bound: name.to_string(),
            samples: checks.len(),
            checks: checks.iter().map(|c| c.lhs.len()).sum(),
            max_lhs: checks.iter().map(NodeCheck::max_lhs).fold(0.0, f64::max),
            min_rhs: checks.iter().map(|c| c.rhs).fold(f64::INFINITY, f64::min),
            max_slack: checks.iter().map(NodeCheck::slack).fold(f64::NEG_INFINITY, f64::max),
            violations,
            pass: violations == 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBounds {
    pub mu: Vec<f64>,
    pub delta: f64,
    pub rom_max_lhs: f64,
    pub rom_rhs: f64,
    pub mapper_max_lhs: f64,
    pub mapper_rhs: f64,
    pub autoencoder_max_lhs: f64,
    pub autoencoder_rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub old_nodes: usize,
    pub new_nodes: usize,
    pub delta: f64,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub c: f64,
    pub weight_norms: WeightNorms,
    pub rounding_tolerance: f64,
    pub rom: BoundCheck,
    pub mapper: BoundCheck,
    pub autoencoder: BoundCheck,
    pub samples: Vec<SampleBounds>,
}

impl BoundReport {
    pub fn pass(&self) -> bool {
        self.rom.pass && self.mapper.pass && self.autoencoder.pass
    }

    pub fn checks(&self) -> [&BoundCheck; 3] {
        [&self.rom, &self.mapper, &self.autoencoder]
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    /// `bound,samples,max_lhs,min_rhs,max_slack,pass`.
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_record(["bound", "samples", "max_lhs", "min_rhs", "max_slack", "pass"])
            .map_err(|e| Error::format(path, e.to_string()))?;
        for c in self.checks() {
            w.write_record([
                c.bound.clone(),
                c.samples.to_string(),
                c.max_lhs.to_string(),
                c.min_rhs.to_string(),
                c.max_slack.to_string(),
                c.pass.to_string(),
            ])
            .map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Checks all three bounds for every sample; `τ`, `α`, `β` are measured
/// on the model mesh over the same samples.
pub fn verify_bounds(model: &RomModel, samples: &[BoundSample], m_new: &Arc<Mesh>) -> Result<BoundReport> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("bound samples".into()));
    }
    let ctx = BoundContext::new(model, m_new, samples)?;
    let results = samples
        .par_iter()
        .map(|s| {
            Ok((
                ctx.delta(s),
                ctx.verify_rom_bound(s)?,
                ctx.verify_mapper_bound(s)?,
                ctx.verify_autoencoder_bound(s)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let rom: Vec<NodeCheck> = results.iter().map(|r| r.1.clone()).collect();
    let mapper: Vec<NodeCheck> = results.iter().map(|r| r.2.clone()).collect();
    let ae: Vec<NodeCheck> = results.iter().map(|r| r.3.clone()).collect();
    let per_sample = samples
        .iter()
        .zip(&results)
        .map(|(s, (d, r, m, a))| SampleBounds {
            mu: s.mu.clone(),
            delta: *d,
            rom_max_lhs: r.max_lhs(),
            rom_rhs: r.rhs,
            mapper_max_lhs: m.max_lhs(),
            mapper_rhs: m.rhs,
            autoencoder_max_lhs: a.max_lhs(),
            autoencoder_rhs: a.rhs,
        })
        .collect();
    Ok(BoundReport {
        old_nodes: model.mesh().len(),
        new_nodes: m_new.len(),
        delta: results.iter().map(|r| r.0).fold(0.0, f64::max),
        tau: ctx.tau,
        alpha: ctx.alpha,
        beta: ctx.beta,
        c: ctx.c,
        weight_norms: ctx.norms.clone(),
        rounding_tolerance: ROUNDING_TOLERANCE,
        rom: BoundCheck::from_checks("rom", &rom),
        mapper: BoundCheck::from_checks("mapper", &mapper),
        autoencoder: BoundCheck::from_checks("autoencoder", &ae),
        samples: per_sample,
    })
}
