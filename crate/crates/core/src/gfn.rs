//! GFN weight transfer between meshes.
//!
//! A [`WeightBundle`] holds the only mesh-dependent parameters of a GFN
//! autoencoder: encoder columns `w_enc[:, k]`, decoder rows `w_dec[k, :]`
//! and decoder biases `b_dec[k]` all belong to node `k` of the bundle's
//! mesh. Moving the bundle to a new mesh:
//!
//! - splits each old encoder column evenly over the new nodes related to
//!   its node, summing the shares landing on each new node;
//! - averages the decoder rows and biases of the old nodes related to each
//!   new node;
//! - leaves the encoder bias alone (it belongs to the latent side).
//!
//! Three routes compute the same map. [`gfn_transform`] evaluates the
//! relation sets directly. [`gfn_transform_decomposed`] goes through the
//! master mesh with an expansion followed by an agglomeration, and
//! [`Transfer`] stores the resulting linear map as sparse coefficients so
//! that training can apply it and its adjoint repeatedly.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::mesh::{is_agglomerative, is_expansive, master_mesh_union, Mesh, NeighborMap};

/// Mesh-facing GFN parameters.
#[derive(Debug, Clone)]
pub struct WeightBundle {
    /// `L × N` encoder weights; column `k` belongs to node `k`.
    pub w_enc: Array2<f64>,
    /// Length-`L` encoder bias (mesh independent).
    pub b_enc: Array1<f64>,
    /// `N × L` decoder weights; row `k` belongs to node `k`.
    pub w_dec: Array2<f64>,
    /// Length-`N` decoder bias.
    pub b_dec: Array1<f64>,
    pub mesh: Arc<Mesh>,
}

impl WeightBundle {
    pub fn new(
        w_enc: Array2<f64>,
        b_enc: Array1<f64>,
        w_dec: Array2<f64>,
        b_dec: Array1<f64>,
        mesh: Arc<Mesh>,
    ) -> Result<Self> {
        let n = mesh.len();
        let l = w_enc.nrows();
        if w_enc.ncols() != n || w_dec.nrows() != n || b_dec.len() != n {
            return Err(Error::Shape(format!(
                "bundle on {n} nodes got w_enc {:?}, w_dec {:?}, b_dec {}",
                w_enc.dim(),
                w_dec.dim(),
                b_dec.len()
            )));
        }
        if b_enc.len() != l || w_dec.ncols() != l {
            return Err(Error::Shape(format!(
                "width {l} inconsistent with b_enc {} / w_dec {:?}",
                b_enc.len(),
                w_dec.dim()
            )));
        }
        Ok(WeightBundle {
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            mesh,
        })
    }

    pub fn zeros(width: usize, mesh: Arc<Mesh>) -> Self {
        let n = mesh.len();
        WeightBundle {
            w_enc: Array2::zeros((width, n)),
            b_enc: Array1::zeros(width),
            w_dec: Array2::zeros((n, width)),
            b_dec: Array1::zeros(n),
            mesh,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng>(width: usize, mesh: Arc<Mesh>, rng: &mut R) -> Self {
        let n = mesh.len();
        let mut b = WeightBundle::zeros(width, mesh);
        b.w_enc = crate::neural::glorot_uniform(width, n, rng);
        b.w_dec = crate::neural::glorot_uniform(n, width, rng);
        b
    }

    /// First-hidden-layer width `L`.
    pub fn width(&self) -> usize {
        self.w_enc.nrows()
    }

    pub fn n_nodes(&self) -> usize {
        self.mesh.len()
    }

    /// Writes `manifest.json`, `mesh.csv` and the four blobs into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = self.save_blobs(dir)?;
        io::write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: BundleManifest = io::read_json(&dir.join("manifest.json"))?;
        WeightBundle::load_blobs(dir, &manifest)
    }

    /// Writes the mesh and blobs, returning the manifest describing them.
    pub fn save_blobs(&self, dir: &Path) -> Result<BundleManifest> {
        io::create_dir(dir)?;
        self.mesh.write_csv(dir.join("mesh.csv"))?;
        io::write_f64_blob(&dir.join("w_enc.bin"), self.w_enc.as_slice().unwrap())?;
        io::write_f64_blob(&dir.join("b_enc.bin"), self.b_enc.as_slice().unwrap())?;
        io::write_f64_blob(&dir.join("w_dec.bin"), self.w_dec.as_slice().unwrap())?;
        io::write_f64_blob(&dir.join("b_dec.bin"), self.b_dec.as_slice().unwrap())?;
        Ok(BundleManifest {
            width: self.width(),
            n_nodes: self.n_nodes(),
            dim: self.mesh.dim(),
            mesh: "mesh.csv".into(),
            w_enc: "w_enc.bin".into(),
            b_enc: "b_enc.bin".into(),
            w_dec: "w_dec.bin".into(),
            b_dec: "b_dec.bin".into(),
        })
    }

    pub fn load_blobs(dir: &Path, manifest: &BundleManifest) -> Result<Self> {
        let mesh = Mesh::read_csv(dir.join(&manifest.mesh))?;
        let (l, n) = (manifest.width, manifest.n_nodes);
        if mesh.len() != n || mesh.dim() != manifest.dim {
            return Err(Error::format(
                dir.join(&manifest.mesh),
                format!(
                    "mesh has {} nodes in {} dimensions, manifest says {n} in {}",
                    mesh.len(),
                    mesh.dim(),
                    manifest.dim
                ),
            ));
        }
        let w_enc = io::read_f64_blob(&dir.join(&manifest.w_enc), l * n)?;
        let b_enc = io::read_f64_blob(&dir.join(&manifest.b_enc), l)?;
        let w_dec = io::read_f64_blob(&dir.join(&manifest.w_dec), n * l)?;
        let b_dec = io::read_f64_blob(&dir.join(&manifest.b_dec), n)?;
        WeightBundle::new(
            Array2::from_shape_vec((l, n), w_enc).unwrap(),
            Array1::from(b_enc),
            Array2::from_shape_vec((n, l), w_dec).unwrap(),
            Array1::from(b_dec),
            Arc::new(mesh),
        )
    }
}

/// On-disk description of a saved [`WeightBundle`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleManifest {
    pub width: usize,
    pub n_nodes: usize,
    pub dim: usize,
    pub mesh: String,
    pub w_enc: String,
    pub b_enc: String,
    pub w_dec: String,
    pub b_dec: String,
}

/// Transfer by direct evaluation of the relation sets.
pub fn gfn_transform(wb: &WeightBundle, m_n: &Arc<Mesh>) -> Result<WeightBundle> {
    let nm = NeighborMap::build(&wb.mesh, m_n)?;
    Ok(Transfer::from_relations(&nm, m_n.clone()).apply(wb))
}

/// Transfer through the master mesh: expansion onto `m_o ∪ extra`, then
/// agglomeration onto `m_n`.
pub fn gfn_transform_decomposed(wb: &WeightBundle, m_n: &Arc<Mesh>) -> Result<WeightBundle> {
    if m_n.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let nm = NeighborMap::build(&wb.mesh, m_n)?;
    let master = Arc::new(master_mesh_union(&wb.mesh, m_n, &nm));
    let expanded = expand_unchecked(wb, &master, &master.nearest_in(&wb.mesh)?);
    agglomerate_unchecked(&expanded, m_n, &expanded.mesh.nearest_in(m_n)?)
}

/// Simplified transfer for expansive mesh pairs (only `←` arrows needed).
///
/// The expansive condition is verified when debug assertions are enabled.
pub fn expand(wb: &WeightBundle, m_n: &Arc<Mesh>) -> Result<WeightBundle> {
    if m_n.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let bwd = m_n.nearest_in(&wb.mesh)?;
    if cfg!(debug_assertions) && !is_expansive(&wb.mesh.nearest_in(m_n)?, &bwd) {
        return Err(Error::NotExpansive);
    }
    Ok(expand_unchecked(wb, m_n, &bwd))
}

/// Simplified transfer for agglomerative mesh pairs (only `→` arrows needed).
///
/// The agglomerative condition is verified when debug assertions are enabled.
pub fn agglomerate(wb: &WeightBundle, m_n: &Arc<Mesh>) -> Result<WeightBundle> {
    if m_n.is_empty() {
        return Err(Error::EmptyMesh);
    }
    let fwd = wb.mesh.nearest_in(m_n)?;
    if cfg!(debug_assertions) && !is_agglomerative(&fwd, &m_n.nearest_in(&wb.mesh)?) {
        return Err(Error::NotAgglomerative);
    }
    agglomerate_unchecked(wb, m_n, &fwd)
}

/// Expansion step given `bwd[j_n]` = nearest old node of each new node.
pub(crate) fn expand_unchecked(wb: &WeightBundle, m_n: &Arc<Mesh>, bwd: &[usize]) -> WeightBundle {
    let n_o = wb.n_nodes();
    let mut counts = vec![0usize; n_o];
    for &k in bwd {
        counts[k] += 1;
    }
    let mut out = WeightBundle::zeros(wb.width(), m_n.clone());
    out.b_enc.assign(&wb.b_enc);
    for (j, &k) in bwd.iter().enumerate() {
        let c = counts[k] as f64;
        out.w_enc
            .column_mut(j)
            .zip_mut_with(&wb.w_enc.column(k), |d, &s| *d = s / c);
        out.w_dec.row_mut(j).assign(&wb.w_dec.row(k));
        out.b_dec[j] = wb.b_dec[k];
    }
    out
}

/// Agglomeration step given `fwd[i_o]` = nearest new node of each old node.
/// Decoder rows use the running-mean update.
pub(crate) fn agglomerate_unchecked(
    wb: &WeightBundle,
    m_n: &Arc<Mesh>,
    fwd: &[usize],
) -> Result<WeightBundle> {
    let n_n = m_n.len();
    let mut counts = vec![0usize; n_n];
    let mut out = WeightBundle::zeros(wb.width(), m_n.clone());
    out.b_enc.assign(&wb.b_enc);
    for (i, &j) in fwd.iter().enumerate() {
        counts[j] += 1;
        let c = counts[j] as f64;
        out.w_enc
            .column_mut(j)
            .zip_mut_with(&wb.w_enc.column(i), |d, &s| *d += s);
        out.w_dec
            .row_mut(j)
            .zip_mut_with(&wb.w_dec.row(i), |d, &s| *d = ((c - 1.0) * *d + s) / c);
        out.b_dec[j] = ((c - 1.0) * out.b_dec[j] + wb.b_dec[i]) / c;
    }
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Shape(format!(
            "new node {j} receives no old node under agglomeration"
        )));
    }
    Ok(out)
}

/// Sparse rows: `entries[offsets[r]..offsets[r + 1]]` are the `(source, coefficient)`
/// terms of destination `r`, ascending in source index.
#[derive(Debug, Clone, Default)]
struct Sparse {
    offsets: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

impl Sparse {
    fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut s = Sparse {
            offsets: Vec::with_capacity(rows.len() + 1),
            entries: Vec::new(),
        };
        s.offsets.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            s.entries.extend(row);
            s.offsets.push(s.entries.len());
        }
        s
    }

    fn row(&self, r: usize) -> &[(usize, f64)] {
        &self.entries[self.offsets[r]..self.offsets[r + 1]]
    }

    fn n_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    /// `self ∘ inner`: destination rows of `self` expressed in the sources of `inner`.
    fn compose(&self, inner: &Sparse) -> Sparse {
        let rows = (0..self.n_rows())
            .map(|r| {
                let mut acc: Vec<(usize, f64)> = Vec::new();
                for &(mid, c) in self.row(r) {
                    for &(src, c2) in inner.row(mid) {
                        acc.push((src, c * c2));
                    }
                }
                acc.sort_by_key(|e| e.0);
                let mut merged: Vec<(usize, f64)> = Vec::with_capacity(acc.len());
                for (src, c) in acc {
                    match merged.last_mut() {
                        Some(last) if last.0 == src => last.1 += c,
                        _ => merged.push((src, c)),
                    }
                }
                merged
            })
            .collect();
        Sparse::from_rows(rows)
    }
}

/// A mesh-to-mesh GFN transfer stored as a sparse linear map, with its
/// adjoint for back-propagating into the source weights.
#[derive(Debug, Clone)]
pub struct Transfer {
    n_src: usize,
    dst: Arc<Mesh>,
    /// destination encoder column ← weighted source columns
    enc: Sparse,
    /// destination decoder row / bias ← weighted source rows
    dec: Sparse,
    identity: bool,
}

impl Transfer {
    /// Transfer from `src` to `dst`, built through the master-mesh
    /// decomposition.
    pub fn new(src: &Mesh, dst: &Arc<Mesh>) -> Result<Self> {
        if src.same_nodes(dst) {
            return Ok(Transfer::identity(dst.clone()));
        }
        let nm = NeighborMap::build(src, dst)?;
        let master = master_mesh_union(src, dst, &nm);
        let expansion = Transfer::expansion(src.len(), &master.nearest_in(src)?);
        let agglomeration = Transfer::agglomeration(master.len(), &master.nearest_in(dst)?, dst.len())?;
        Ok(Transfer {
            n_src: src.len(),
            dst: dst.clone(),
            enc: agglomeration.0.compose(&expansion.0),
            dec: agglomeration.1.compose(&expansion.1),
            identity: false,
        })
    }

    pub fn identity(mesh: Arc<Mesh>) -> Self {
        let rows: Vec<Vec<(usize, f64)>> = (0..mesh.len()).map(|j| vec![(j, 1.0)]).collect();
        Transfer {
            n_src: mesh.len(),
            dst: mesh,
            enc: Sparse::from_rows(rows.clone()),
            dec: Sparse::from_rows(rows),
            identity: true,
        }
    }

    /// Coefficients of the relation-set formula evaluated directly.
    pub fn from_relations(nm: &NeighborMap, dst: Arc<Mesh>) -> Self {
        let (n_o, n_n) = (nm.n_old(), nm.n_new());
        // |{h : k related to h}| per old node, and related old nodes per new node
        let mut count = vec![0usize; n_o];
        let mut related: Vec<Vec<usize>> = vec![Vec::new(); n_n];
        for (o, n) in nm.related_pairs() {
            count[o] += 1;
            related[n].push(o);
        }
        let enc = related
            .iter()
            .map(|ks| ks.iter().map(|&k| (k, 1.0 / count[k] as f64)).collect())
            .collect();
        let dec = related
            .iter()
            .map(|ks| {
                let w = 1.0 / ks.len() as f64;
                ks.iter().map(|&k| (k, w)).collect()
            })
            .collect();
        Transfer {
            n_src: n_o,
            dst,
            enc: Sparse::from_rows(enc),
            dec: Sparse::from_rows(dec),
            identity: false,
        }
    }

    fn expansion(n_src: usize, bwd: &[usize]) -> (Sparse, Sparse) {
        let mut counts = vec![0usize; n_src];
        for &k in bwd {
            counts[k] += 1;
        }
        let enc = bwd.iter().map(|&k| vec![(k, 1.0 / counts[k] as f64)]).collect();
        let dec = bwd.iter().map(|&k| vec![(k, 1.0)]).collect();
        (Sparse::from_rows(enc), Sparse::from_rows(dec))
    }

    fn agglomeration(_n_src: usize, fwd: &[usize], n_dst: usize) -> Result<(Sparse, Sparse)> {
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_dst];
        for (i, &j) in fwd.iter().enumerate() {
            members[j].push(i);
        }
        if let Some(j) = members.iter().position(Vec::is_empty) {
            return Err(Error::Shape(format!(
                "new node {j} receives no old node under agglomeration"
            )));
        }
        let enc = members
            .iter()
            .map(|m| m.iter().map(|&i| (i, 1.0)).collect())
            .collect();
        let dec = members
            .iter()
            .map(|m| {
                let w = 1.0 / m.len() as f64;
                m.iter().map(|&i| (i, w)).collect()
            })
            .collect();
        Ok((Sparse::from_rows(enc), Sparse::from_rows(dec)))
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub fn n_src(&self) -> usize {
        self.n_src
    }

    pub fn dst(&self) -> &Arc<Mesh> {
        &self.dst
    }

    /// Encoder coefficients of destination node `j` as `(source, weight)`.
    pub fn enc_terms(&self, j: usize) -> &[(usize, f64)] {
        self.enc.row(j)
    }

    /// Decoder coefficients of destination node `i` as `(source, weight)`.
    pub fn dec_terms(&self, i: usize) -> &[(usize, f64)] {
        self.dec.row(i)
    }

    pub fn apply(&self, wb: &WeightBundle) -> WeightBundle {
        assert_eq!(wb.n_nodes(), self.n_src, "bundle does not live on the transfer source");
        WeightBundle {
            w_enc: self.apply_enc(&wb.w_enc),
            b_enc: wb.b_enc.clone(),
            w_dec: self.apply_dec(&wb.w_dec),
            b_dec: self.apply_dec_bias(&wb.b_dec),
            mesh: self.dst.clone(),
        }
    }

    /// `L × N_src` encoder weights to `L × N_dst`.
    pub fn apply_enc(&self, w: &Array2<f64>) -> Array2<f64> {
        if self.identity {
            return w.clone();
        }
        let n_dst = self.enc.n_rows();
        let mut out = Array2::zeros((w.nrows(), n_dst));
        for (src_row, mut dst_row) in w.outer_iter().zip(out.outer_iter_mut()) {
            for j in 0..n_dst {
                dst_row[j] = self.enc.row(j).iter().map(|&(k, c)| c * src_row[k]).sum();
            }
        }
        out
    }

    /// `N_src × L` decoder weights to `N_dst × L`.
    pub fn apply_dec(&self, w: &Array2<f64>) -> Array2<f64> {
        if self.identity {
            return w.clone();
        }
        let n_dst = self.dec.n_rows();
        let mut out = Array2::zeros((n_dst, w.ncols()));
        for (i, mut row) in out.outer_iter_mut().enumerate() {
            for &(k, c) in self.dec.row(i) {
                row.scaled_add(c, &w.row(k));
            }
        }
        out
    }

    pub fn apply_dec_bias(&self, b: &Array1<f64>) -> Array1<f64> {
        if self.identity {
            return b.clone();
        }
        (0..self.dec.n_rows())
            .map(|i| self.dec.row(i).iter().map(|&(k, c)| c * b[k]).sum())
            .collect()
    }

    /// Adjoint of [`apply_enc`](Self::apply_enc).
    pub fn adjoint_enc(&self, g: &Array2<f64>) -> Array2<f64> {
        if self.identity {
            return g.clone();
        }
        let mut out = Array2::zeros((g.nrows(), self.n_src));
        for (g_row, mut src_row) in g.outer_iter().zip(out.outer_iter_mut()) {
            for j in 0..self.enc.n_rows() {
                for &(k, c) in self.enc.row(j) {
                    src_row[k] += c * g_row[j];
                }
            }
        }
        out
    }

    /// Adjoint of [`apply_dec`](Self::apply_dec).
    pub fn adjoint_dec(&self, g: &Array2<f64>) -> Array2<f64> {
        if self.identity {
            return g.clone();
        }
        let mut out = Array2::zeros((self.n_src, g.ncols()));
        for (i, g_row) in g.axis_iter(Axis(0)).enumerate() {
            for &(k, c) in self.dec.row(i) {
                out.row_mut(k).scaled_add(c, &g_row);
            }
        }
        out
    }

    /// Adjoint of [`apply_dec_bias`](Self::apply_dec_bias).
    pub fn adjoint_dec_bias(&self, g: &Array1<f64>) -> Array1<f64> {
        if self.identity {
            return g.clone();
        }
        let mut out = Array1::zeros(self.n_src);
        for (i, &gi) in g.iter().enumerate() {
            for &(k, c) in self.dec.row(i) {
                out[k] += c * gi;
            }
        }
        out
    }
}
