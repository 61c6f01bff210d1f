#![allow(dead_code)]

use std::collections::HashSet;
use std::sync::Arc;

use gfnrom::{Mesh, WeightBundle};
use ndarray::{Array1, Array2};
use rand::Rng;

/// `n` distinct points in `[0, 1]^dim`; on a coarse lattice when `lattice`
/// is set, which produces many equidistant neighbours.
pub fn random_mesh<R: Rng>(rng: &mut R, n: usize, dim: usize, lattice: bool) -> Arc<Mesh> {
    let mut seen = HashSet::new();
    let mut coords = Vec::with_capacity(n * dim);
    while seen.len() < n {
        let p: Vec<f64> = (0..dim)
            .map(|_| if lattice { rng.gen_range(0..12) as f64 / 11.0 } else { rng.gen::<f64>() })
            .collect();
        if seen.insert(p.iter().map(|x| x.to_bits()).collect::<Vec<_>>()) {
            coords.extend_from_slice(&p);
        }
    }
    Arc::new(Mesh::new(dim, coords).unwrap())
}

/// Subset of `mesh` with `k` nodes, keeping parent order.
pub fn random_subset<R: Rng>(rng: &mut R, mesh: &Mesh, k: usize) -> Arc<Mesh> {
    let mut idx = rand::seq::index::sample(rng, mesh.len(), k).into_vec();
    idx.sort_unstable();
    Arc::new(mesh.select(&idx).unwrap())
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

pub fn random_vector<R: Rng>(rng: &mut R, n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0))
}

pub fn random_bundle<R: Rng>(rng: &mut R, width: usize, mesh: Arc<Mesh>) -> WeightBundle {
    let n = mesh.len();
    WeightBundle::new(
        random_matrix(rng, width, n),
        random_vector(rng, width),
        random_matrix(rng, n, width),
        random_vector(rng, n),
        mesh,
    )
    .unwrap()
}

/// Nearest node by exhaustive scan, lowest index on ties.
pub fn scan_nearest(mesh: &Mesh, q: &[f64]) -> usize {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, p) in mesh.nodes().enumerate() {
        let d: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Transferred `(w_enc, w_dec, b_dec)` by enumerating every related pair.
pub fn oracle_transfer(wb: &WeightBundle, m_n: &Mesh) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let m_o = &wb.mesh;
    let (n_o, n_n, l) = (m_o.len(), m_n.len(), wb.width());
    let fwd: Vec<usize> = m_o.nodes().map(|p| scan_nearest(m_n, p)).collect();
    let bwd: Vec<usize> = m_n.nodes().map(|p| scan_nearest(m_o, p)).collect();
    let related = |k: usize, j: usize| fwd[k] == j || bwd[j] == k;
    let count: Vec<usize> = (0..n_o).map(|k| (0..n_n).filter(|&j| related(k, j)).count()).collect();
    let mut enc = Array2::zeros((l, n_n));
    let mut dec = Array2::zeros((n_n, l));
    let mut bias = Array1::zeros(n_n);
    for j in 0..n_n {
        let set: Vec<usize> = (0..n_o).filter(|&k| related(k, j)).collect();
        for &k in &set {
            for i in 0..l {
                enc[[i, j]] += wb.w_enc[[i, k]] / count[k] as f64;
                dec[[j, i]] += wb.w_dec[[k, i]] / set.len() as f64;
            }
            bias[j] += wb.b_dec[k] / set.len() as f64;
        }
    }
    (enc, dec, bias)
}

pub fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest entrywise difference relative to the largest magnitude.
pub fn rel_diff(a: &WeightBundle, b: &WeightBundle) -> f64 {
    let scale = a
        .w_enc
        .iter()
        .chain(a.w_dec.iter())
        .chain(a.b_dec.iter())
        .fold(1e-300f64, |m, x| m.max(x.abs()));
    let d = max_abs_diff(a.w_enc.iter(), b.w_enc.iter())
        .max(max_abs_diff(a.w_dec.iter(), b.w_dec.iter()))
        .max(max_abs_diff(a.b_dec.iter(), b.b_dec.iter()))
        .max(max_abs_diff(a.b_enc.iter(), b.b_enc.iter()));
    d / scale
}
