//! Meshes as ordered, duplicate-free node sets, and the nearest-neighbour
//! relations between two meshes.
//!
//! For a transfer from an old mesh `m_o` to a new mesh `m_n`:
//! - `fwd[i_o]` is the node of `m_n` nearest to `m_o[i_o]` (the `→` arrow),
//! - `bwd[j_n]` is the node of `m_o` nearest to `m_n[j_n]` (the `←` arrow).
//!
//! Two nodes are *related* when either arrow joins them.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kdtree::KdTree;

/// Ordered node coordinates with a spatial index. Immutable once built.
#[derive(Debug, Clone)]
pub struct Mesh {
    dim: usize,
    coords: Vec<f64>,
    tree: KdTree,
}

/// Bit pattern used for exact coordinate equality (`-0.0` folds onto `0.0`).
fn coord_key(point: &[f64]) -> Vec<u64> {
    point
        .iter()
        .map(|&c| if c == 0.0 { 0.0f64.to_bits() } else { c.to_bits() })
        .collect()
}

impl Mesh {
    /// Builds a mesh from a flat row-major buffer of `coords.len() / dim` nodes.
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                found: 0,
            });
        }
        if coords.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "{} coordinates do not split into nodes of dimension {dim}",
                coords.len()
            )));
        }
        let mut seen = std::collections::HashMap::with_capacity(coords.len() / dim);
        for (i, p) in coords.chunks_exact(dim).enumerate() {
            if p.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFiniteCoordinate(i));
            }
            if let Some(&first) = seen.get(&coord_key(p)) {
                return Err(Error::DuplicateNode { index: i, first });
            }
            seen.insert(coord_key(p), i);
        }
        let tree = KdTree::build(&coords, dim);
        Ok(Mesh { dim, coords, tree })
    }

    /// Builds a mesh from one coordinate vector per node.
    pub fn from_points<P: AsRef<[f64]>>(points: &[P]) -> Result<Self> {
        let dim = points.first().map(|p| p.as_ref().len()).unwrap_or(1);
        let mut coords = Vec::with_capacity(points.len() * dim);
        for p in points {
            let p = p.as_ref();
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: p.len(),
                });
            }
            coords.extend_from_slice(p);
        }
        Mesh::new(dim, coords)
    }

    /// One-dimensional mesh from scalar node positions.
    pub fn from_1d(xs: &[f64]) -> Result<Self> {
        Mesh::new(1, xs.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// Coordinates of node `i`.
    pub fn node(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn nodes(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.dim)
    }

    /// Index of the node nearest to `query`; ties go to the lowest index.
    pub fn nearest_neighbor(&self, query: &[f64]) -> Result<usize> {
        if self.is_empty() {
            return Err(Error::EmptyMesh);
        }
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: query.len(),
            });
        }
        Ok(self.tree.nearest(&self.coords, query).map(|(i, _)| i).unwrap())
    }

    /// For every node of `self`, the index of its nearest node in `target`.
    pub fn nearest_in(&self, target: &Mesh) -> Result<Vec<usize>> {
        if target.is_empty() {
            return Err(Error::EmptyMesh);
        }
        check_dims(self, target)?;
        Ok(self
            .coords
            .par_chunks_exact(self.dim)
            .map(|p| target.tree.nearest(&target.coords, p).unwrap().0)
            .collect())
    }

    /// True when every node of `other` is also a node of `self`.
    pub fn contains_all(&self, other: &Mesh) -> bool {
        if other.dim != self.dim {
            return false;
        }
        let keys: HashSet<Vec<u64>> = self.nodes().map(coord_key).collect();
        other.nodes().all(|p| keys.contains(&coord_key(p)))
    }

    /// Exact node-for-node equality, ordering included.
    pub fn same_nodes(&self, other: &Mesh) -> bool {
        self.dim == other.dim
            && self.coords.len() == other.coords.len()
            && self
                .nodes()
                .zip(other.nodes())
                .all(|(a, b)| coord_key(a) == coord_key(b))
    }

    /// Mesh holding the nodes at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Mesh> {
        let mut coords = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            coords.extend_from_slice(self.node(i));
        }
        Mesh::new(self.dim, coords)
    }

    /// Reads a headerless CSV with one node per row.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Mesh> {
        let path = path.as_ref();
        let rows = crate::io::read_csv_rows(path)?;
        let dim = rows.first().map(Vec::len).unwrap_or(1);
        let mut coords = Vec::with_capacity(rows.len() * dim);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::format(
                    path,
                    format!("row {r} has {} columns, expected {dim}", row.len()),
                ));
            }
            coords.extend_from_slice(row);
        }
        Mesh::new(dim, coords).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_csv_rows(path.as_ref(), self.nodes())
    }
}

fn check_dims(a: &Mesh, b: &Mesh) -> Result<()> {
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch {
            expected: a.dim,
            found: b.dim,
        });
    }
    Ok(())
}

/// Nearest-neighbour arrows between an old mesh and a new mesh.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborMap {
    /// For each old node, its nearest new node.
    pub fwd: Vec<usize>,
    /// For each new node, its nearest old node.
    pub bwd: Vec<usize>,
}

/// Which simplified transfer applies to a mesh pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TransformKind {
    pub expansive: bool,
    pub agglomerative: bool,
}

impl NeighborMap {
    pub fn build(m_o: &Mesh, m_n: &Mesh) -> Result<Self> {
        if m_o.is_empty() || m_n.is_empty() {
            return Err(Error::EmptyMesh);
        }
        check_dims(m_o, m_n)?;
        Ok(NeighborMap {
            fwd: m_o.nearest_in(m_n)?,
            bwd: m_n.nearest_in(m_o)?,
        })
    }

    pub fn n_old(&self) -> usize {
        self.fwd.len()
    }

    pub fn n_new(&self) -> usize {
        self.bwd.len()
    }

    pub fn classify(&self) -> TransformKind {
        TransformKind {
            expansive: is_expansive(&self.fwd, &self.bwd),
            agglomerative: is_agglomerative(&self.fwd, &self.bwd),
        }
    }

    /// Every related `(old, new)` pair exactly once, `→` pairs first in old
    /// order, then `←`-only pairs in new order.
    pub fn related_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let forward = self.fwd.iter().enumerate().map(|(o, &n)| (o, n));
        let backward = self
            .bwd
            .iter()
            .enumerate()
            .filter(|&(n, &o)| self.fwd[o] != n)
            .map(|(n, &o)| (o, n));
        forward.chain(backward)
    }

    /// New-mesh nodes pointing into the old mesh without being pointed back
    /// to, in new-mesh order.
    pub fn unmatched_new(&self) -> Vec<usize> {
        self.bwd
            .iter()
            .enumerate()
            .filter(|&(n, &o)| self.fwd[o] != n)
            .map(|(n, _)| n)
            .collect()
    }
}

/// Every old node is the nearest neighbour of its own nearest neighbour.
pub(crate) fn is_expansive(fwd: &[usize], bwd: &[usize]) -> bool {
    fwd.iter().enumerate().all(|(o, &n)| bwd[n] == o)
}

/// Every new node is the nearest neighbour of its own nearest neighbour.
pub(crate) fn is_agglomerative(fwd: &[usize], bwd: &[usize]) -> bool {
    bwd.iter().enumerate().all(|(n, &o)| fwd[o] == n)
}

pub fn build_neighbor_map(m_o: &Mesh, m_n: &Mesh) -> Result<NeighborMap> {
    NeighborMap::build(m_o, m_n)
}

pub fn classify_transform(nm: &NeighborMap) -> TransformKind {
    nm.classify()
}

/// The intermediate mesh through which any transfer factors into an
/// expansion followed by an agglomeration: all of `m_o`, then the nodes of
/// `m_n` that point into `m_o` without being pointed back to.
pub fn master_mesh_union(m_o: &Mesh, m_n: &Mesh, nm: &NeighborMap) -> Mesh {
    let mut keys: HashSet<Vec<u64>> = m_o.nodes().map(coord_key).collect();
    let mut coords = m_o.coords.clone();
    for n in nm.unmatched_new() {
        let p = m_n.node(n);
        if keys.insert(coord_key(p)) {
            coords.extend_from_slice(p);
        }
    }
    Mesh::new(m_o.dim, coords).expect("union of duplicate-free meshes")
}

/// Shared handle used wherever several owners refer to one mesh.
pub type MeshRef = Arc<Mesh>;

#[cfg(test)]
mod tests {
    use super::*;

    fn m1(xs: &[f64]) -> Mesh {
        Mesh::from_1d(xs).unwrap()
    }

    #[test]
    fn nearest_neighbor_examples() {
        let m = m1(&[0.0, 1.0]);
        assert_eq!(m.nearest_neighbor(&[0.4]).unwrap(), 0);
        assert_eq!(m.nearest_neighbor(&[0.5]).unwrap(), 0);
        let tri = Mesh::from_points(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(tri.nearest_neighbor(&[0.9, 0.2]).unwrap(), 1);
    }

    #[test]
    fn nearest_neighbor_errors() {
        let empty = Mesh::new(2, vec![]).unwrap();
        assert!(matches!(
            empty.nearest_neighbor(&[0.0, 0.0]),
            Err(Error::EmptyMesh)
        ));
        let m = m1(&[0.0, 1.0]);
        assert!(matches!(
            m.nearest_neighbor(&[0.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn duplicates_rejected_exactly() {
        assert!(matches!(
            Mesh::from_1d(&[0.0, 1.0, 0.0]),
            Err(Error::DuplicateNode { index: 2, first: 0 })
        ));
        assert!(Mesh::from_1d(&[0.0, -0.0]).is_err());
        assert!(Mesh::from_1d(&[0.0, 1e-300]).is_ok());
        assert!(matches!(
            Mesh::from_1d(&[f64::NAN]),
            Err(Error::NonFiniteCoordinate(0))
        ));
    }

    #[test]
    fn neighbor_map_examples() {
        let nm = build_neighbor_map(&m1(&[0.0, 1.0]), &m1(&[0.0, 0.4, 1.0])).unwrap();
        assert_eq!(nm.fwd, vec![0, 2]);
        assert_eq!(nm.bwd, vec![0, 0, 1]);

        let nm = build_neighbor_map(&m1(&[0.0, 1.0]), &m1(&[0.0, 1.0])).unwrap();
        assert_eq!((nm.fwd, nm.bwd), (vec![0, 1], vec![0, 1]));

        let nm = build_neighbor_map(&m1(&[0.0, 0.4, 1.0]), &m1(&[0.0, 1.0])).unwrap();
        assert_eq!(nm.fwd, vec![0, 0, 1]);
        assert_eq!(nm.bwd, vec![0, 2]);
    }

    #[test]
    fn neighbor_map_dimension_mismatch() {
        let a = m1(&[0.0]);
        let b = Mesh::from_points(&[[0.0, 0.0]]).unwrap();
        assert!(matches!(
            build_neighbor_map(&a, &b),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn classify_examples() {
        let kind = |a: &[f64], b: &[f64]| {
            let nm = build_neighbor_map(&m1(a), &m1(b)).unwrap();
            let k = classify_transform(&nm);
            (k.expansive, k.agglomerative)
        };
        assert_eq!(kind(&[0.0, 1.0], &[0.0, 0.4, 1.0]), (true, false));
        assert_eq!(kind(&[0.0, 0.4, 1.0], &[0.0, 1.0]), (false, true));
        assert_eq!(kind(&[0.0, 0.4, 1.0], &[0.0, 0.4, 1.0]), (true, true));
        assert_eq!(kind(&[0.0, 0.3, 1.0], &[0.1, 1.0, 2.0]), (false, false));
    }

    #[test]
    fn master_mesh_examples() {
        let union = |a: &[f64], b: &[f64]| {
            let (ma, mb) = (m1(a), m1(b));
            let nm = build_neighbor_map(&ma, &mb).unwrap();
            master_mesh_union(&ma, &mb, &nm).coords().to_vec()
        };
        assert_eq!(union(&[0.0, 1.0], &[0.0, 0.4, 1.0]), vec![0.0, 1.0, 0.4]);
        assert_eq!(union(&[0.0, 0.4, 1.0], &[0.0, 1.0]), vec![0.0, 0.4, 1.0]);
        assert_eq!(union(&[0.0, 0.5, 1.0], &[0.0, 0.5, 1.0]), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn master_mesh_to_new_mesh_need_not_be_agglomerative() {
        // 4.5 is appended; 4.0 then has 4.5 as nearest master node, which
        // points to itself rather than back to 4.0.
        let (mo, mn) = (m1(&[0.0, 10.0]), m1(&[4.0, 4.5, 9.0]));
        let nm = build_neighbor_map(&mo, &mn).unwrap();
        let master = master_mesh_union(&mo, &mn, &nm);
        assert_eq!(master.coords(), &[0.0, 10.0, 4.5]);
        let k = build_neighbor_map(&master, &mn).unwrap().classify();
        assert!(!k.agglomerative);
        assert!(build_neighbor_map(&mo, &master).unwrap().classify().expansive);
    }

    #[test]
    fn related_pairs_are_unique() {
        let nm = build_neighbor_map(&m1(&[0.0, 0.3, 1.0]), &m1(&[0.1, 1.0, 2.0])).unwrap();
        let pairs: Vec<_> = nm.related_pairs().collect();
        let set: HashSet<_> = pairs.iter().copied().collect();
        assert_eq!(pairs.len(), set.len());
        // 0.0→0.1, 0.3→0.1, 1.0↔1.0, 1.0←2.0
        assert_eq!(set, HashSet::from([(0, 0), (1, 0), (2, 1), (2, 2)]));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mesh.csv");
        let m = Mesh::from_points(&[[0.1, 1.0 / 3.0], [2.5e-17, -4.0]]).unwrap();
        m.write_csv(&path).unwrap();
        let back = Mesh::read_csv(&path).unwrap();
        assert!(m.same_nodes(&back));
    }
}
