//! POD by the method of snapshots: the left singular vectors of the
//! snapshot matrix `S` (`N_h × T`) come from the eigenvectors of the
//! `T × T` Gram matrix `SᵀS`, `ψ_i = S v_i / σ_i`.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::rom::{relative_error_percent, summarize_errors, ErrorSummary};

/// Relative energy below which singular directions are dropped.
const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct PodBasis {
    /// `N_h × r` orthonormal modes, `r` ≤ requested rank (numerical rank).
    pub modes: Array2<f64>,
    /// Requested-rank singular values, descending, zero past the numerical rank.
    pub singular_values: Vec<f64>,
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and eigenvectors as columns.
pub fn symmetric_eigen(a: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!("matrix {:?} is not square", a.dim())));
    }
    let mut a = a.clone();
    let mut v = Array2::<f64>::eye(n);
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[[i, j]] * a[[i, j]])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].total_cmp(&a[[i, i]]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[[i, i]]).collect();
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| v[[r, order[c]]]);
    Ok((values, vectors))
}

/// Rank-`rank` POD basis of the columns of `snapshots` (`N_h × T`).
pub fn pod_basis(snapshots: ArrayView2<f64>, rank: usize) -> Result<PodBasis> {
    let (n_h, t) = snapshots.dim();
    let max = n_h.min(t);
    if rank == 0 || rank > max {
        return Err(Error::RankTooLarge { rank, max });
    }
    let gram = snapshots.t().dot(&snapshots);
    let (values, vectors) = symmetric_eigen(&gram)?;
    let lead = values[0].max(0.0);
    let mut singular_values = vec![0.0; rank];
    let mut modes: Vec<Array1<f64>> = Vec::new();
    for k in 0..rank {
        let lambda = values[k];
        if !(lambda > RANK_TOLERANCE * lead) || lead == 0.0 {
            break;
        }
        let sigma = lambda.sqrt();
        let mut psi = snapshots.dot(&vectors.column(k)) / sigma;
        // two passes of Gram-Schmidt against earlier modes
        for _ in 0..2 {
            for m in &modes {
                let proj = m.dot(&psi);
                psi.scaled_add(-proj, m);
            }
        }
        let norm = psi.dot(&psi).sqrt();
        if norm < 0.5 {
            break;
        }
        psi /= norm;
        singular_values[k] = sigma;
        modes.push(psi);
    }
    let r = modes.len();
    let mut m = Array2::zeros((n_h, r));
    for (k, psi) in modes.iter().enumerate() {
        m.column_mut(k).assign(psi);
    }
    Ok(PodBasis {
        modes: m,
        singular_values,
    })
}

impl PodBasis {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `V Vᵀ u`.
    pub fn project(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.modes.nrows() {
            return Err(Error::Shape(format!(
                "field has {} values, basis has {} rows",
                u.len(),
                self.modes.nrows()
            )));
        }
        let u = ndarray::ArrayView1::from(u);
        let coeffs = self.modes.t().dot(&u);
        Ok(self.modes.dot(&coeffs).to_vec())
    }

    /// Writes `pod_modes.bin`, `pod_singular_values.bin` and `pod_manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        io::create_dir(dir)?;
        io::write_f64_blob(&dir.join("pod_modes.bin"), self.modes.as_standard_layout().as_slice().unwrap())?;
        io::write_f64_blob(&dir.join("pod_singular_values.bin"), &self.singular_values)?;
        io::write_json(
            &dir.join("pod_manifest.json"),
            &PodManifest {
                n_rows: self.modes.nrows(),
                n_modes: self.modes.ncols(),
                rank: self.rank(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: PodManifest = io::read_json(&dir.join("pod_manifest.json"))?;
        let modes = io::read_f64_blob(&dir.join("pod_modes.bin"), m.n_rows * m.n_modes)?;
        let singular_values = io::read_f64_blob(&dir.join("pod_singular_values.bin"), m.rank)?;
        Ok(PodBasis {
            modes: Array2::from_shape_vec((m.n_rows, m.n_modes), modes).unwrap(),
            singular_values,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PodManifest {
    n_rows: usize,
    n_modes: usize,
    rank: usize,
}

/// Mean relative error (%) of projecting each test column onto the basis.
pub fn pod_projection_error(basis: &PodBasis, test: ArrayView2<f64>) -> Result<ErrorSummary> {
    if test.ncols() == 0 {
        return Err(Error::EmptyInput("test snapshots".into()));
    }
    let per_sample = test
        .axis_iter(Axis(1))
        .map(|col| {
            let u = col.to_vec();
            Ok(relative_error_percent(&basis.project(&u)?, &u))
        })
        .collect::<Result<Vec<_>>>()?;
    summarize_errors(per_sample)
}

/// Columns `fields[t]` for `t` in `indices`, as an `N_h × |indices|` matrix.
pub fn snapshot_matrix(fields: &[Vec<f64>], indices: &[usize]) -> Result<Array2<f64>> {
    let n_h = indices.first().map(|&t| fields[t].len()).unwrap_or(0);
    if indices.iter().any(|&t| fields[t].len() != n_h) {
        return Err(Error::Shape("snapshots live on different meshes".into()));
    }
    Ok(Array2::from_shape_fn((n_h, indices.len()), |(i, c)| fields[indices[c]][i]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn repeated_snapshot_gives_one_mode() {
        let v = [3.0, 4.0, 0.0];
        let s = Array2::from_shape_fn((3, 4), |(i, _)| v[i]);
        let b = pod_basis(s.view(), 3).unwrap();
        assert_eq!(b.modes.ncols(), 1);
        assert!((b.singular_values[0] - 10.0).abs() < 1e-12);
        assert_eq!(&b.singular_values[1..], &[0.0, 0.0]);
        let m = b.modes.column(0);
        let sign = m[0].signum();
        assert!((sign * m[0] - 0.6).abs() < 1e-14);
        assert!((sign * m[1] - 0.8).abs() < 1e-14);
    }

    #[test]
    fn orthogonal_snapshots() {
        let s = array![[2.0, 0.0], [0.0, 1.0], [0.0, 0.0]];
        let b = pod_basis(s.view(), 2).unwrap();
        assert!((b.singular_values[0] - 2.0).abs() < 1e-14);
        assert!((b.singular_values[1] - 1.0).abs() < 1e-14);
        assert!((b.modes[[0, 0]].abs() - 1.0).abs() < 1e-14);
        assert!((b.modes[[1, 1]].abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rank_limits() {
        let s = Array2::<f64>::ones((3, 2));
        assert!(matches!(pod_basis(s.view(), 3), Err(Error::RankTooLarge { rank: 3, max: 2 })));
        assert!(pod_basis(s.view(), 0).is_err());
    }

    #[test]
    fn projection_error_examples() {
        let s = array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]];
        let b1 = pod_basis(s.view(), 1).unwrap();
        let inside = array![[2.0], [0.0], [0.0]];
        assert!(pod_projection_error(&b1, inside.view()).unwrap().mean < 1e-12);
        let outside = array![[0.0], [0.0], [5.0]];
        assert_eq!(pod_projection_error(&b1, outside.view()).unwrap().mean, 100.0);
        // equal energy: either vector can lead, the other is lost entirely
        let other = if b1.modes[[0, 0]].abs() > 0.5 { array![[0.0], [1.0], [0.0]] } else { array![[1.0], [0.0], [0.0]] };
        assert!((pod_projection_error(&b1, other.view()).unwrap().mean - 100.0).abs() < 1e-12);
    }

    #[test]
    fn jacobi_diagonalizes() {
        let a = array![[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 1.0]];
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        let recon = vecs.dot(&Array2::from_diag(&Array1::from(vals.clone()))).dot(&vecs.t());
        for (x, y) in recon.iter().zip(a.iter()) {
            assert!((x - y).abs() < 1e-13);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = array![[2.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 0.5, 0.0]];
        let b = pod_basis(s.view(), 2).unwrap();
        b.save(dir.path()).unwrap();
        let back = PodBasis::load(dir.path()).unwrap();
        assert_eq!(back.modes, b.modes);
        assert_eq!(back.singular_values, b.singular_values);
    }
}
