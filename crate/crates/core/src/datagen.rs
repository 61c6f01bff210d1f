//! Synthetic parametric snapshot families on the unit square, mesh
//! hierarchies built by farthest-point subsampling, and dataset I/O.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::kdtree::squared_distance;
use crate::mesh::Mesh;

const BUMP_WIDTH: f64 = 0.05;
const MULTIMODE_TERMS: usize = 7;

/// Closed-form field families `u(x, y; μ)` on `[0, 1]²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// `sin(π μ₁ x) sin(π μ₂ y)`, `μ ∈ [0.5, 2]²`.
    Smooth,
    /// `1 − exp(−x/μ₂) (4y(1−y))^μ₁`, `μ₁ ∈ [1, 3]`, `μ₂ ∈ [0.01, 0.1]`.
    BoundaryLayer,
    /// Gaussian bump of width 0.05 centred at `μ ∈ [0.2, 0.8]²`.
    Bump,
    /// `Σ_k μ_k sin(kπx) sin(πy) / k` for `k = 1..7`, `μ ∈ [−1, 1]⁷`.
    Multimode,
}

impl Family {
    pub fn n_params(self) -> usize {
        match self {
            Family::Multimode => MULTIMODE_TERMS,
            _ => 2,
        }
    }

    /// Parameter box as `(lo, hi)` per component.
    pub fn bounds(self) -> Vec<(f64, f64)> {
        match self {
            Family::Smooth => vec![(0.5, 2.0); 2],
            Family::BoundaryLayer => vec![(1.0, 3.0), (0.01, 0.1)],
            Family::Bump => vec![(0.2, 0.8); 2],
            Family::Multimode => vec![(-1.0, 1.0); MULTIMODE_TERMS],
        }
    }

    pub fn check_params(self, mu: &[f64]) -> Result<()> {
        let bounds = self.bounds();
        if mu.len() != bounds.len() {
            return Err(Error::DimensionMismatch {
                expected: bounds.len(),
                found: mu.len(),
            });
        }
        for (index, (&value, &(lo, hi))) in mu.iter().zip(&bounds).enumerate() {
            if !(value >= lo && value <= hi) {
                return Err(Error::ParameterOutOfBox { index, value, lo, hi });
            }
        }
        Ok(())
    }

    /// Pointwise evaluation; `mu` is assumed inside the box.
    pub fn eval(self, mu: &[f64], p: &[f64]) -> f64 {
        use std::f64::consts::PI;
        let (x, y) = (p[0], p[1]);
        match self {
            Family::Smooth => (PI * mu[0] * x).sin() * (PI * mu[1] * y).sin(),
            Family::BoundaryLayer => {
                let g = (4.0 * y * (1.0 - y)).max(0.0);
                1.0 - (-x / mu[1]).exp() * g.powf(mu[0])
            }
            Family::Bump => {
                let r2 = (x - mu[0]).powi(2) + (y - mu[1]).powi(2);
                (-r2 / (2.0 * BUMP_WIDTH * BUMP_WIDTH)).exp()
            }
            Family::Multimode => {
                let sy = (PI * y).sin();
                mu.iter()
                    .enumerate()
                    .map(|(k, &m)| {
                        let k = (k + 1) as f64;
                        m * (k * PI * x).sin() * sy / k
                    })
                    .sum()
            }
        }
    }

    /// Upper bound on `‖∇u‖` over the unit square, so that
    /// `|u(a) − u(b)| ≤ G ‖a − b‖`.
    pub fn gradient_bound(self, mu: &[f64]) -> f64 {
        use std::f64::consts::PI;
        match self {
            Family::Smooth => PI * mu[0].hypot(mu[1]),
            Family::BoundaryLayer => (1.0 / mu[1]).hypot(4.0 * mu[0]),
            Family::Bump => (-0.5f64).exp() / BUMP_WIDTH,
            Family::Multimode => {
                let dx: f64 = mu.iter().map(|m| m.abs()).sum::<f64>() * PI;
                let dy: f64 = mu
                    .iter()
                    .enumerate()
                    .map(|(k, m)| m.abs() / (k + 1) as f64)
                    .sum::<f64>()
                    * PI;
                dx.hypot(dy)
            }
        }
    }
}

/// Field of `family` at every node of `mesh`.
pub fn analytic_field(family: Family, mu: &[f64], mesh: &Mesh) -> Result<Vec<f64>> {
    family.check_params(mu)?;
    if mesh.dim() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            found: mesh.dim(),
        });
    }
    Ok(mesh.nodes().map(|p| family.eval(mu, p)).collect())
}

/// `n × n` grid on the unit square, each node shifted by up to `jitter`
/// grid spacings per axis and clamped to the square.
pub fn jittered_grid(n: usize, jitter: f64, seed: u64) -> Result<Mesh> {
    if n < 2 {
        return Err(Error::TooFewNodes(format!("grid needs n >= 2, got {n}")));
    }
    let h = 1.0 / (n - 1) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::with_capacity(2 * n * n);
    for i in 0..n {
        for j in 0..n {
            for base in [i as f64 * h, j as f64 * h] {
                let shift = if jitter > 0.0 {
                    rng.gen_range(-jitter..jitter) * h
                } else {
                    0.0
                };
                coords.push((base + shift).clamp(0.0, 1.0));
            }
        }
    }
    Mesh::new(2, coords)
}

fn target_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Farthest-point subsample keeping `⌈fraction · N⌉` nodes.
pub fn subsample_mesh(mesh: &Mesh, fraction: f64) -> Result<Mesh> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidFraction(fraction));
    }
    if mesh.is_empty() {
        return Err(Error::EmptyMesh);
    }
    subsample_count(mesh, target_count(mesh.len(), fraction))
}

/// Farthest-point subsample with exactly `count` nodes, in parent order.
///
/// The first pick is the node nearest the centroid; each further pick
/// maximizes the distance to the picked set, ties to the lowest index.
pub fn subsample_count(mesh: &Mesh, count: usize) -> Result<Mesh> {
    let n = mesh.len();
    if count == 0 || count > n {
        return Err(Error::TooFewNodes(format!("cannot pick {count} of {n} nodes")));
    }
    if count == n {
        return Ok(mesh.clone());
    }
    let d = mesh.dim();
    let mut centroid = vec![0.0; d];
    for p in mesh.nodes() {
        for (c, v) in centroid.iter_mut().zip(p) {
            *c += v;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n as f64);
    let first = mesh.nearest_neighbor(&centroid)?;

    let mut picked = vec![first];
    let mut chosen = vec![false; n];
    chosen[first] = true;
    let mut min_d: Vec<f64> = mesh
        .nodes()
        .map(|p| squared_distance(p, mesh.node(first)))
        .collect();
    while picked.len() < count {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &dist) in min_d.iter().enumerate() {
            if !chosen[i] && dist > best_d {
                best = i;
                best_d = dist;
            }
        }
        chosen[best] = true;
        picked.push(best);
        let q = mesh.node(best).to_vec();
        for (i, p) in mesh.nodes().enumerate() {
            let dist = squared_distance(p, &q);
            if dist < min_d[i] {
                min_d[i] = dist;
            }
        }
    }
    picked.sort_unstable();
    mesh.select(&picked)
}

/// Level fractions of [`make_hierarchy`], relative to the largest mesh.
pub const HIERARCHY_FRACTIONS: [f64; 4] = [1.0, 0.31, 0.105, 0.04];
pub const HIERARCHY_NAMES: [&str; 4] = ["large", "medium", "small", "tiny"];

#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub large: Arc<Mesh>,
    pub medium: Arc<Mesh>,
    pub small: Arc<Mesh>,
    pub tiny: Arc<Mesh>,
}

impl Hierarchy {
    /// Levels from finest to coarsest with their names.
    pub fn levels(&self) -> [(&'static str, &Arc<Mesh>); 4] {
        [
            ("large", &self.large),
            ("medium", &self.medium),
            ("small", &self.small),
            ("tiny", &self.tiny),
        ]
    }
}

/// Four nested meshes with the default fractions.
pub fn make_hierarchy(mesh: &Mesh) -> Result<Hierarchy> {
    make_hierarchy_with(mesh, &HIERARCHY_FRACTIONS)
}

/// Nested meshes at `fractions` (of the input size), each subsampled from
/// the previous level.
pub fn make_hierarchy_with(mesh: &Mesh, fractions: &[f64; 4]) -> Result<Hierarchy> {
    let n = mesh.len();
    if n < 50 {
        return Err(Error::TooFewNodes(format!("hierarchy needs at least 50 nodes, got {n}")));
    }
    let mut prev = fractions[0];
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) || f > prev {
            return Err(Error::InvalidFraction(f));
        }
        prev = f;
    }
    let counts: Vec<usize> = fractions.iter().map(|&f| target_count(n, f)).collect();
    if counts[3] < 2 {
        return Err(Error::TooFewNodes(format!(
            "coarsest level would have {} node(s)",
            counts[3]
        )));
    }
    let large = subsample_count(mesh, counts[0])?;
    let medium = subsample_count(&large, counts[1])?;
    let small = subsample_count(&medium, counts[2])?;
    let tiny = subsample_count(&small, counts[3])?;
    Ok(Hierarchy {
        large: Arc::new(large),
        medium: Arc::new(medium),
        small: Arc::new(small),
        tiny: Arc::new(tiny),
    })
}

/// Equispaced parameter grid over the family's box; the first component
/// varies slowest.
pub fn parameter_grid(family: Family, counts: &[usize]) -> Result<Vec<Vec<f64>>> {
    let bounds = family.bounds();
    if counts.len() != bounds.len() {
        return Err(Error::DimensionMismatch {
            expected: bounds.len(),
            found: counts.len(),
        });
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::EmptyInput("parameter grid with a zero count".into()));
    }
    let axes: Vec<Vec<f64>> = counts
        .iter()
        .zip(&bounds)
        .map(|(&c, &(lo, hi))| {
            if c == 1 {
                vec![0.5 * (lo + hi)]
            } else {
                (0..c)
                    .map(|i| if i + 1 == c { hi } else { lo + (hi - lo) * i as f64 / (c - 1) as f64 })
                    .collect()
            }
        })
        .collect();
    let mut out = vec![Vec::new()];
    for axis in &axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect();
    }
    Ok(out)
}

/// Which mesh each sample is trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Assignment {
    /// Every sample on one mesh.
    Single { mesh: String },
    /// A seeded random half (rounded down) on `second`, the rest on `first`.
    Split { first: String, second: String, seed: u64 },
}

/// Parameters, and each sample's field on every mesh.
#[derive(Debug, Clone)]
pub struct SnapshotSet {
    pub family: Family,
    pub grid: Vec<usize>,
    pub mesh_ids: Vec<String>,
    pub meshes: Vec<Arc<Mesh>>,
    pub params: Vec<Vec<f64>>,
    /// `fields[m][t]`: sample `t` evaluated on mesh `m`.
    pub fields: Vec<Vec<Vec<f64>>>,
    /// Index into `meshes` of each sample's training mesh.
    pub assignment: Vec<usize>,
    pub split_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetManifest {
    family: Family,
    n_params: usize,
    grid: Vec<usize>,
    mesh_ids: Vec<String>,
    n_samples: usize,
    split_seed: u64,
    assignment: Vec<String>,
}

impl SnapshotSet {
    pub fn n_samples(&self) -> usize {
        self.params.len()
    }

    pub fn mesh_index(&self, id: &str) -> Result<usize> {
        self.mesh_ids
            .iter()
            .position(|m| m == id)
            .ok_or_else(|| Error::Config(format!("unknown mesh id {id:?}; have {:?}", self.mesh_ids)))
    }

    pub fn mesh(&self, id: &str) -> Result<&Arc<Mesh>> {
        Ok(&self.meshes[self.mesh_index(id)?])
    }

    /// Fields of all samples on mesh `id`.
    pub fn fields_on(&self, id: &str) -> Result<&[Vec<f64>]> {
        Ok(&self.fields[self.mesh_index(id)?])
    }

    /// Training samples at `indices`, each on its assigned mesh.
    pub fn samples(&self, indices: &[usize]) -> Vec<crate::rom::Sample> {
        indices
            .iter()
            .map(|&t| {
                let m = self.assignment[t];
                crate::rom::Sample {
                    mu: self.params[t].clone(),
                    u: self.fields[m][t].clone(),
                    mesh: self.meshes[m].clone(),
                }
            })
            .collect()
    }

    /// Samples at `indices`, all on mesh `id`.
    pub fn samples_on(&self, indices: &[usize], id: &str) -> Result<Vec<crate::rom::Sample>> {
        let m = self.mesh_index(id)?;
        Ok(indices
            .iter()
            .map(|&t| crate::rom::Sample {
                mu: self.params[t].clone(),
                u: self.fields[m][t].clone(),
                mesh: self.meshes[m].clone(),
            })
            .collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::create_dir(dir)?;
        for (id, mesh) in self.mesh_ids.iter().zip(&self.meshes) {
            mesh.write_csv(dir.join(format!("mesh_{id}.csv")))?;
        }
        io::write_csv_rows(&dir.join("params.csv"), self.params.iter().map(Vec::as_slice))?;
        for (id, fields) in self.mesh_ids.iter().zip(&self.fields) {
            io::write_csv_rows(
                &dir.join(format!("snapshots_{id}.csv")),
                fields.iter().map(Vec::as_slice),
            )?;
        }
        let manifest = DatasetManifest {
            family: self.family,
            n_params: self.family.n_params(),
            grid: self.grid.clone(),
            mesh_ids: self.mesh_ids.clone(),
            n_samples: self.n_samples(),
            split_seed: self.split_seed,
            assignment: self.assignment.iter().map(|&m| self.mesh_ids[m].clone()).collect(),
        };
        io::write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let m: DatasetManifest = io::read_json(&manifest_path)?;
        let meshes = m
            .mesh_ids
            .iter()
            .map(|id| Mesh::read_csv(dir.join(format!("mesh_{id}.csv"))).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let params_path = dir.join("params.csv");
        let params = io::read_csv_rows(&params_path)?;
        if params.len() != m.n_samples || params.iter().any(|p| p.len() != m.n_params) {
            return Err(Error::format(params_path, "parameter rows do not match the manifest"));
        }
        let mut fields = Vec::with_capacity(meshes.len());
        for (id, mesh) in m.mesh_ids.iter().zip(&meshes) {
            let path = dir.join(format!("snapshots_{id}.csv"));
            let rows = io::read_csv_rows(&path)?;
            if rows.len() != m.n_samples || rows.iter().any(|r| r.len() != mesh.len()) {
                return Err(Error::format(path, "snapshot rows do not match the manifest"));
            }
            fields.push(rows);
        }
        let assignment = m
            .assignment
            .iter()
            .map(|id| {
                m.mesh_ids
                    .iter()
                    .position(|x| x == id)
                    .ok_or_else(|| Error::format(&manifest_path, format!("unknown mesh id {id:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if assignment.len() != m.n_samples {
            return Err(Error::format(manifest_path, "assignment length does not match samples"));
        }
        Ok(SnapshotSet {
            family: m.family,
            grid: m.grid,
            mesh_ids: m.mesh_ids,
            meshes,
            params,
            fields,
            assignment,
            split_seed: m.split_seed,
        })
    }
}

/// Evaluates `family` on a parameter grid over every mesh in `meshes`.
pub fn generate_dataset(
    family: Family,
    grid: &[usize],
    meshes: &[(String, Arc<Mesh>)],
    assignment: &Assignment,
) -> Result<SnapshotSet> {
    if meshes.is_empty() {
        return Err(Error::EmptyInput("no meshes".into()));
    }
    let params = parameter_grid(family, grid)?;
    let mesh_ids: Vec<String> = meshes.iter().map(|m| m.0.clone()).collect();
    let index = |id: &str| {
        mesh_ids
            .iter()
            .position(|m| m == id)
            .ok_or_else(|| Error::Config(format!("unknown mesh id {id:?}")))
    };
    let n = params.len();
    let (assignment, split_seed) = match assignment {
        Assignment::Single { mesh } => (vec![index(mesh)?; n], 0),
        Assignment::Split { first, second, seed } => {
            let (a, b) = (index(first)?, index(second)?);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            let mut out = vec![a; n];
            for &t in &order[..n / 2] {
                out[t] = b;
            }
            (out, *seed)
        }
    };
    let fields = meshes
        .iter()
        .map(|(_, mesh)| {
            params
                .par_iter()
                .map(|mu| analytic_field(family, mu, mesh))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SnapshotSet {
        family,
        grid: grid.to_vec(),
        mesh_ids,
        meshes: meshes.iter().map(|m| m.1.clone()).collect(),
        params,
        fields,
        assignment,
        split_seed,
    })
}

/// Seeded train/test split stratified by the first parameter: within each
/// group of equal `μ₁`, `round(fraction · size)` samples go to training.
/// Both index lists are ascending.
pub fn stratified_split(params: &[Vec<f64>], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidFraction(fraction));
    }
    if params.is_empty() {
        return Err(Error::EmptyInput("parameter list".into()));
    }
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (t, p) in params.iter().enumerate() {
        let key = p.first().copied().unwrap_or(0.0);
        // order-preserving key for finite floats
        let bits = key.to_bits();
        let key = if key.is_sign_negative() { !bits } else { bits | (1 << 63) };
        groups.entry(key).or_default().push(t);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (_, mut members) in groups {
        members.shuffle(&mut rng);
        let k = (fraction * members.len() as f64).round() as usize;
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config(format!(
            "split of {} samples at fraction {fraction} leaves an empty side",
            params.len()
        )));
    }
    Ok((train, test))
}
