//! Principal motion subspace of a training embedding and the offset that
//! moves a generated trajectory onto a new identity.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde_json::{json, Map};

use crate::archive::{Archive, Dtype};
use crate::dataio::LatentDataset;
use crate::error::{Error, Result};
use crate::latent_model::{LatentCode, LatentSequence};
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_COMPONENTS: usize = 32;
/// Above this many frames the basis is found by randomized SVD.
pub const EXACT_PCA_MAX_FRAMES: usize = 20_000;
const OVERSAMPLING: usize = 10;
const POWER_ITERATIONS: usize = 4;
const BASIS_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct MotionBasis {
    pub layers: usize,
    pub dim: usize,
    pub mean: Vec<f64>,
    pub directions: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn remove_components(v: &mut [f64], basis: &[Vec<f64>]) {
    // Two passes keep the result orthogonal to working precision.
    for _ in 0..2 {
        for d in basis {
            let c = dot(v, d);
            v.iter_mut().zip(d).for_each(|(x, y)| *x -= c * y);
        }
    }
}

/// Make the largest-magnitude entry positive.
fn fix_sign(v: &mut [f64]) {
    let idx = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    if v[idx] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Eigenpairs of a symmetric matrix, eigenvalues descending.
fn sorted_eigen(m: DMatrix<f64>) -> Vec<(f64, Vec<f64>)> {
    let eig = SymmetricEigen::new(m);
    let mut pairs: Vec<(f64, Vec<f64>)> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .map(|(j, &l)| (l, eig.eigenvectors.column(j).iter().copied().collect()))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    pairs
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

/// Orthonormalize the columns of `t` (rows x p), returned as a tensor.
fn orthonormal_columns(t: &Tensor) -> Tensor {
    let q = to_dmatrix(t).qr().q();
    let mut data = Vec::with_capacity(q.nrows() * q.ncols());
    for r in 0..q.nrows() {
        data.extend(q.row(r).iter());
    }
    Tensor::from_vec(q.nrows(), q.ncols(), data)
}

/// `(variance, direction)` candidates from the centered data matrix.
fn principal_pairs(x: &Tensor, k: usize, seed: u64) -> Vec<(f64, Vec<f64>)> {
    let (n, f) = x.shape();
    let denom = (n - 1) as f64;
    let from_left = |b: &Tensor, pairs: Vec<(f64, Vec<f64>)>| {
        // Right singular vectors from left ones: v = B^T u / sigma.
        pairs
            .into_iter()
            .map(|(l, u)| {
                let u = Tensor::from_vec(u.len(), 1, u);
                let mut v = b.matmul_tn(&u).into_vec();
                normalize(&mut v);
                (l.max(0.0) / denom, v)
            })
            .collect::<Vec<_>>()
    };
    if n <= EXACT_PCA_MAX_FRAMES {
        if n <= f {
            from_left(x, sorted_eigen(to_dmatrix(&x.matmul_nt(x))))
        } else {
            sorted_eigen(to_dmatrix(&x.matmul_tn(x)))
                .into_iter()
                .map(|(l, v)| (l.max(0.0) / denom, v))
                .collect()
        }
    } else {
        let p = (k + OVERSAMPLING).min(f);
        let mut r = rng::stream(seed, rng::PCA, 0);
        let omega = rng::normal_tensor(&mut r, f, p);
        let mut q = orthonormal_columns(&x.matmul(&omega));
        for _ in 0..POWER_ITERATIONS {
            let z = orthonormal_columns(&x.matmul_tn(&q));
            q = orthonormal_columns(&x.matmul(&z));
        }
        let b = q.matmul_tn(x);
        from_left(&b, sorted_eigen(to_dmatrix(&b.matmul_nt(&b))))
    }
}

/// Mean and top-`k` principal directions of the dataset's flattened frames.
pub fn fit_motion_basis(dataset: &LatentDataset, k: usize) -> Result<MotionBasis> {
    let n = dataset.num_frames();
    let f = dataset.code_len();
    if k == 0 {
        return Err(Error::Argument("number of components must be positive".into()));
    }
    if n < k + 1 {
        return Err(Error::Argument(format!(
            "{k} components need at least {} frames, got {n}",
            k + 1
        )));
    }
    if k > f {
        return Err(Error::Argument(format!("{k} components exceed the code length {f}")));
    }
    let mut mean = vec![0.0; f];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(dataset.frame(i)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = Vec::with_capacity(n * f);
    for i in 0..n {
        centered.extend(dataset.frame(i).iter().zip(&mean).map(|(&v, m)| v as f64 - m));
    }
    let x = Tensor::from_vec(n, f, centered);
    let pairs = principal_pairs(&x, k, 0);

    let top = pairs.first().map(|p| p.0).unwrap_or(0.0);
    let tol = top * 1e-10;
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for (var, mut v) in pairs.into_iter().take(k) {
        if var <= tol || var == 0.0 {
            break;
        }
        remove_components(&mut v, &directions);
        if normalize(&mut v) < 0.5 {
            break;
        }
        fix_sign(&mut v);
        directions.push(v);
        explained_variance.push(var);
    }
    // Directions without variance: complete the basis with standard axes.
    let mut axis = 0;
    while directions.len() < k {
        let mut v = vec![0.0; f];
        v[axis] = 1.0;
        axis += 1;
        remove_components(&mut v, &directions);
        if normalize(&mut v) > 1e-3 {
            fix_sign(&mut v);
            directions.push(v);
            explained_variance.push(0.0);
        }
    }
    Ok(MotionBasis {
        layers: dataset.layers,
        dim: dataset.dim,
        mean,
        directions,
        explained_variance,
    })
}

impl MotionBasis {
    pub fn k(&self) -> usize {
        self.directions.len()
    }

    pub fn code_len(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, code: &LatentCode) -> Result<()> {
        if (code.layers, code.dim) != (self.layers, self.dim) {
            return Err(Error::Argument(format!(
                "code is {}x{} but the basis is {}x{}",
                code.layers, code.dim, self.layers, self.dim
            )));
        }
        Ok(())
    }

    /// Coordinates of `w - mean` along each direction.
    pub fn coefficients(&self, values: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = values.iter().zip(&self.mean).map(|(w, m)| w - m).collect();
        self.directions.iter().map(|d| dot(&centered, d)).collect()
    }

    /// Orthogonal projection onto the affine subspace through the mean.
    pub fn project(&self, w: &LatentCode) -> Result<LatentCode> {
        self.check(w)?;
        let mut out = self.mean.clone();
        for (c, d) in self.coefficients(&w.values).iter().zip(&self.directions) {
            out.iter_mut().zip(d).for_each(|(o, x)| *o += c * x);
        }
        LatentCode::new(self.layers, self.dim, out)
    }

    /// Identity offset `w - project(w)`, rounded to f32 like every stored
    /// code. With f32-valued frames the shifted frames are then exact sums,
    /// so `apply_offset` leaves frame-to-frame differences bit-identical.
    pub fn compute_offset(&self, w: &LatentCode) -> Result<LatentCode> {
        let p = self.project(w)?;
        let delta = w
            .values
            .iter()
            .zip(&p.values)
            .map(|(a, b)| (a - b) as f32 as f64)
            .collect();
        LatentCode::new(self.layers, self.dim, delta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = Map::new();
        meta.insert("format_version".into(), json!(BASIS_FORMAT_VERSION));
        meta.insert("k".into(), json!(self.k()));
        meta.insert("layers".into(), json!(self.layers));
        meta.insert("dim".into(), json!(self.dim));
        let mut a = Archive::new(meta);
        let f = self.code_len();
        a.push("mean", vec![f], Dtype::F32, self.mean.clone());
        a.push("directions", vec![self.k(), f], Dtype::F32, self.directions.concat());
        a.push(
            "explained_variance",
            vec![self.k()],
            Dtype::F32,
            self.explained_variance.clone(),
        );
        a.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::read(path)?;
        let k: usize = a.meta_field("k", path)?;
        let layers: usize = a.meta_field("layers", path)?;
        let dim: usize = a.meta_field("dim", path)?;
        let f = layers * dim;
        let mean = a.require("mean", path)?;
        let dirs = a.require("directions", path)?;
        let var = a.require("explained_variance", path)?;
        if mean.shape != [f] || dirs.shape != [k, f] || var.shape != [k] {
            return Err(Error::format(path, "basis tensor shapes disagree with the header"));
        }
        Ok(MotionBasis {
            layers,
            dim,
            mean: mean.data.clone(),
            directions: dirs.data.chunks(f.max(1)).map(|c| c.to_vec()).collect(),
            explained_variance: var.data.clone(),
        })
    }
}

/// Shift every frame of `traj` by `delta`.
pub fn apply_offset(traj: &LatentSequence, delta: &LatentCode) -> Result<LatentSequence> {
    if (traj.layers, traj.dim) != (delta.layers, delta.dim) {
        return Err(Error::Argument(format!(
            "trajectory frames are {}x{} but the offset is {}x{}",
            traj.layers, traj.dim, delta.layers, delta.dim
        )));
    }
    let mut out = traj.clone();
    for k in 0..out.len() {
        out.frame_mut(k)
            .iter_mut()
            .zip(&delta.values)
            .for_each(|(v, d)| *v += d);
    }
    Ok(out)
}
