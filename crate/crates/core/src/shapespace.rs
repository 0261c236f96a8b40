//! Eigenface shape space.
//!
//! Training meshes are flattened row-major (`x0 y0 z0 x1 y1 z1 ...`, the same
//! layout as [`crate::geometry::AmGradient::to_dense`]) and centred. Because
//! the flattened dimension 3T is much larger than the number of training
//! shapes n, the principal directions are obtained from the n x n Gram matrix
//! of centred samples and lifted back to 3T-space; the 3T x 3T covariance is
//! never formed. Eigenvalues follow the population convention (divide by n).
//!
//! Input meshes are assumed to be rigidly pre-aligned.

use std::fs;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::geometry::{Mesh, Point};

const BASIS_MAGIC: &[u8; 8] = b"VXBASIS1";

/// Default basis size: `min(n - 1, 199)`.
pub fn default_dim(n_samples: usize) -> usize {
    n_samples.saturating_sub(1).min(199)
}

pub fn flatten(mesh: &Mesh) -> Vec<f64> {
    mesh.vertices.iter().flat_map(|v| [v.x, v.y, v.z]).collect()
}

pub fn unflatten(flat: &[f64], vertex_count: usize, topology_id: &str) -> Result<Mesh> {
    if flat.len() != 3 * vertex_count {
        return Err(Error::DimensionMismatch {
            expected: 3 * vertex_count,
            actual: flat.len(),
            context: "flattened mesh",
        });
    }
    Mesh::new(
        flat.chunks_exact(3)
            .map(|c| Point::new(c[0], c[1], c[2]))
            .collect(),
        topology_id,
    )
}

/// Coefficients in a [`ShapeBasis`].
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeCoefficients {
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeBasis {
    pub vertex_count: usize,
    pub topology_id: String,
    pub mean: DVector<f64>,
    /// 3T x d, orthonormal columns.
    pub components: DMatrix<f64>,
    /// Non-increasing, population-convention variances.
    pub eigenvalues: Vec<f64>,
}

impl ShapeBasis {
    pub fn dim(&self) -> usize {
        self.components.ncols()
    }

    pub fn flat_len(&self) -> usize {
        3 * self.vertex_count
    }

    pub fn mean_mesh(&self) -> Mesh {
        unflatten(self.mean.as_slice(), self.vertex_count, &self.topology_id)
            .expect("mean has 3T entries")
    }

    fn check_flat(&self, len: usize) -> Result<()> {
        if len != self.flat_len() {
            return Err(Error::DimensionMismatch {
                expected: self.flat_len(),
                actual: len,
                context: "flattened shape",
            });
        }
        Ok(())
    }

    pub fn project(&self, flat: &[f64]) -> Result<ShapeCoefficients> {
        self.check_flat(flat.len())?;
        let centered = DVector::from_column_slice(flat) - &self.mean;
        let beta = self.components.tr_mul(&centered);
        Ok(ShapeCoefficients {
            beta: beta.as_slice().to_vec(),
        })
    }

    pub fn reconstruct(&self, beta: &[f64]) -> Result<Vec<f64>> {
        if beta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: beta.len(),
                context: "shape coefficients",
            });
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("shape coefficients"));
        }
        let out = &self.mean + &self.components * DVector::from_column_slice(beta);
        Ok(out.as_slice().to_vec())
    }

    pub fn reconstruct_mesh(&self, beta: &[f64]) -> Result<Mesh> {
        unflatten(&self.reconstruct(beta)?, self.vertex_count, &self.topology_id)
    }

    /// Keep the leading `d` components.
    pub fn truncated(&self, d: usize) -> ShapeBasis {
        let d = d.min(self.dim());
        ShapeBasis {
            vertex_count: self.vertex_count,
            topology_id: self.topology_id.clone(),
            mean: self.mean.clone(),
            components: self.components.columns(0, d).into_owned(),
            eigenvalues: self.eigenvalues[..d].to_vec(),
        }
    }

    /// `max |P^T P - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let g = self.components.tr_mul(&self.components);
        let d = self.dim();
        (g - DMatrix::identity(d, d)).amax()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(BASIS_MAGIC);
        buf.extend_from_slice(&(self.vertex_count as u64).to_le_bytes());
        buf.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        let floats = self
            .mean
            .iter()
            .chain(self.eigenvalues.iter())
            .chain(self.components.as_slice().iter());
        for x in floats {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], topology_id: &str) -> std::result::Result<Self, String> {
        if bytes.len() < 24 || &bytes[..8] != BASIS_MAGIC {
            return Err("missing basis magic".into());
        }
        let t = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let d = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let n_floats = 3 * t + d + 3 * t * d;
        if bytes.len() != 24 + 8 * n_floats {
            return Err("length does not match header".into());
        }
        let f: Vec<f64> = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(ShapeBasis {
            vertex_count: t,
            topology_id: topology_id.to_string(),
            mean: DVector::from_column_slice(&f[..3 * t]),
            eigenvalues: f[3 * t..3 * t + d].to_vec(),
            components: DMatrix::from_column_slice(3 * t, d, &f[3 * t + d..]),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, topology_id: &str) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, topology_id).map_err(|msg| Error::Format {
            path: path.to_path_buf(),
            msg,
        })
    }
}

/// Build a `d`-dimensional eigenface basis from `meshes`.
///
/// If the centred data has numerical rank below `d`, the basis is shrunk to
/// that rank and a warning is logged.
pub fn build_basis(meshes: &[Mesh], d: usize) -> Result<ShapeBasis> {
    let n = meshes.len();
    if n < 2 {
        return Err(Error::NotEnoughSamples {
            needed: 2,
            got: n,
            context: "shape basis",
        });
    }
    if d > n - 1 {
        return Err(Error::Config(format!(
            "basis dimension {d} exceeds n - 1 = {}",
            n - 1
        )));
    }
    let first = &meshes[0];
    for m in &meshes[1..] {
        first.check_same_topology(m)?;
    }
    let dim = 3 * first.len();

    let mut data = DMatrix::<f64>::zeros(dim, n);
    for (j, m) in meshes.iter().enumerate() {
        data.set_column(j, &DVector::from_vec(flatten(m)));
    }
    let scale = data.amax().max(f64::MIN_POSITIVE);
    let mean = data.column_mean();
    for mut col in data.column_iter_mut() {
        col -= &mean;
    }

    let gram = data.tr_mul(&data);
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    // relative cut, plus an absolute floor at the rounding level of the data
    let tol = (top * 1e-10).max((n * dim) as f64 * (1e-13 * scale).powi(2));
    let rank = order
        .iter()
        .take_while(|&&i| eig.eigenvalues[i] > tol && eig.eigenvalues[i] > 0.0)
        .count();
    let keep = if rank < d {
        warn!("shape data has numerical rank {rank}; reducing basis dimension from {d} to {rank}");
        rank
    } else {
        d
    };

    let mut components = DMatrix::<f64>::zeros(dim, keep);
    let mut eigenvalues = Vec::with_capacity(keep);
    for (c, &i) in order.iter().take(keep).enumerate() {
        let lambda = eig.eigenvalues[i];
        let lifted = &data * eig.eigenvectors.column(i) / lambda.sqrt();
        components.set_column(c, &lifted);
        eigenvalues.push(lambda / n as f64);
    }
    reorthonormalize(&mut components);
    for mut col in components.column_iter_mut() {
        let (imax, _) = col
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |(bi, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) });
        if col[imax] < 0.0 {
            col.neg_mut();
        }
    }

    Ok(ShapeBasis {
        vertex_count: first.len(),
        topology_id: first.topology_id.clone(),
        mean,
        components,
        eigenvalues,
    })
}

/// Two passes of modified Gram-Schmidt; lifted Gram eigenvectors lose
/// orthogonality for small eigenvalues.
fn reorthonormalize(m: &mut DMatrix<f64>) {
    for _ in 0..2 {
        for j in 0..m.ncols() {
            for i in 0..j {
                let proj = m.column(i).dot(&m.column(j));
                let ci = m.column(i).into_owned();
                m.column_mut(j).axpy(-proj, &ci, 1.0);
            }
            let norm = m.column(j).norm();
            m.column_mut(j).unscale_mut(norm);
        }
    }
}
