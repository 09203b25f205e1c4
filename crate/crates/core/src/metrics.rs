//! Fréchet distances between Gaussian fits of extracted features, and the
//! average content distance of generated videos.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::LatentDataset;
use crate::error::{Error, Result};
use crate::latent_model::{Generator, LatentSequence};
use crate::parallel;
use crate::rng;
use crate::tensor::Tensor;

pub const FID_FRAMES: usize = 8000;
pub const FVD_VIDEOS: usize = 2048;
pub const FVD_CLIP_LEN: usize = 25;
pub const ACD_SAMPLES: usize = 128;
pub const ACD_LEN: usize = 250;
pub const RIDGE: f64 = 1e-6;
/// Seed of the random-projection extractor's matrix, fixed so that scores
/// from different evaluation seeds share one feature space.
const PROJECTION_SEED: u64 = 0x5eed;
const EXTRACT_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// F x F, row-major.
    pub covariance: Vec<f64>,
    pub count: usize,
}

impl GaussianStats {
    /// Mean and unbiased covariance of the rows of `features`.
    pub fn from_features(features: &Tensor) -> Result<Self> {
        let (n, f) = features.shape();
        if n < 2 {
            return Err(Error::Argument(format!("need at least 2 feature vectors, got {n}")));
        }
        if !features.all_finite() {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        let mean = features.sum_rows().map(|v| v / n as f64);
        let centered = features.row_op(&mean, |a, m| a - m);
        let mut cov = centered.matmul_tn(&centered).map(|v| v / (n - 1) as f64);
        // Symmetrize away rounding.
        let c = cov.data_mut();
        for i in 0..f {
            for j in 0..i {
                let v = 0.5 * (c[i * f + j] + c[j * f + i]);
                c[i * f + j] = v;
                c[j * f + i] = v;
            }
        }
        Ok(GaussianStats {
            mean: mean.into_vec(),
            covariance: cov.into_vec(),
            count: n,
        })
    }

    pub fn features(&self) -> usize {
        self.mean.len()
    }

    fn matrix(&self) -> DMatrix<f64> {
        let f = self.features();
        DMatrix::from_row_slice(f, f, &self.covariance)
    }

    fn with_ridge(&self, ridge: f64) -> GaussianStats {
        let f = self.features();
        let mut out = self.clone();
        for i in 0..f {
            out.covariance[i * f + i] += ridge;
        }
        out
    }

    /// True when the covariance is (numerically) singular.
    pub fn is_degenerate(&self) -> bool {
        if self.count <= self.features() {
            return true;
        }
        let eig = SymmetricEigen::new(self.matrix()).eigenvalues;
        let max = eig.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let min = eig.iter().fold(f64::INFINITY, |m, &v| m.min(v));
        max == 0.0 || min <= max * 1e-12
    }
}

/// Square root of a symmetric positive semidefinite matrix via its eigendecomposition.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// `||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`, clamped at zero.
///
/// The trace of `(S_a S_b)^(1/2)` is computed from the eigenvalues of the
/// symmetric matrix `S_a^(1/2) S_b S_a^(1/2)`, which is similar to `S_a S_b`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.features() != b.features() {
        return Err(Error::shape(
            format!("{} features", a.features()),
            format!("{} features", b.features()),
        ));
    }
    for s in [a, b] {
        crate::error::ensure_finite(&s.mean, "Gaussian mean")?;
        crate::error::ensure_finite(&s.covariance, "Gaussian covariance")?;
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let (sa, sb) = (a.matrix(), b.matrix());
    let root = sqrt_psd(&sa);
    let inner = &root * &sb * &root;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let d = mean_term + sa.trace() + sb.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::Numeric("Fréchet distance is not finite".into()));
    }
    Ok(d.max(0.0))
}

/// Fréchet distance with a ridge added to both covariances when either is singular.
pub fn frechet_with_ridge(a: &GaussianStats, b: &GaussianStats) -> Result<(f64, bool)> {
    if a.is_degenerate() || b.is_degenerate() {
        Ok((frechet_distance(&a.with_ridge(RIDGE), &b.with_ridge(RIDGE))?, true))
    } else {
        Ok((frechet_distance(a, b)?, false))
    }
}

/// Named feature extractors over latent codes and clips.
#[derive(Clone, Debug, PartialEq)]
pub enum Extractor {
    /// The flattened code (or concatenated clip) itself.
    IdentityFlatten,
    /// Fixed Gaussian projection of the flattened input to `k` dims.
    RandomProjection(usize),
    /// Per-frame identity features averaged over the clip.
    TemporalMean,
}

impl Extractor {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "identity-flatten" => Ok(Extractor::IdentityFlatten),
            "temporal-mean" => Ok(Extractor::TemporalMean),
            _ => {
                let k = name
                    .strip_prefix("random-projection-")
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|&k| k > 0);
                k.map(Extractor::RandomProjection).ok_or_else(|| {
                    Error::config(
                        "eval.extractor",
                        format!("unknown extractor {name:?} (expected identity-flatten, temporal-mean, or random-projection-K)"),
                    )
                })
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            Extractor::IdentityFlatten => "identity-flatten".into(),
            Extractor::RandomProjection(k) => format!("random-projection-{k}"),
            Extractor::TemporalMean => "temporal-mean".into(),
        }
    }

    fn projection(k: usize, input: usize) -> Tensor {
        static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Tensor>>> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        let mut cache = cache.lock().expect("projection cache poisoned");
        cache
            .entry((k, input))
            .or_insert_with(|| {
                let mut r = rng::stream(PROJECTION_SEED, rng::PROJECTION, input as u64);
                rng::normal_tensor(&mut r, input, k).map(|v| v / (k as f64).sqrt())
            })
            .clone()
    }

    /// Features for a batch of frames (rows of `frames`).
    pub fn frames(&self, frames: &Tensor) -> Tensor {
        match self {
            Extractor::IdentityFlatten | Extractor::TemporalMean => frames.clone(),
            Extractor::RandomProjection(k) => frames.matmul(&Self::projection(*k, frames.cols())),
        }
    }

    /// Features for a batch of clips; each row is `clip_len` concatenated frames.
    pub fn clips(&self, clips: &Tensor, clip_len: usize) -> Tensor {
        match self {
            Extractor::TemporalMean => {
                let f = clips.cols() / clip_len;
                let mut out = Tensor::zeros(clips.rows(), f);
                let o = out.data_mut();
                for r in 0..clips.rows() {
                    for frame in clips.row_slice(r).chunks(f) {
                        for (acc, v) in o[r * f..(r + 1) * f].iter_mut().zip(frame) {
                            *acc += v / clip_len as f64;
                        }
                    }
                }
                out
            }
            other => other.frames(clips),
        }
    }
}

/// Where evaluation samples come from.
#[derive(Clone, Copy)]
pub enum Source<'a> {
    Dataset(&'a LatentDataset),
    Sequences(&'a [LatentSequence]),
    /// Sampled on demand from the generator with the evaluation seed.
    Model(&'a Generator),
}

fn stack(rows: &[Vec<f64>]) -> Tensor {
    let cols = rows.first().map_or(0, |r| r.len());
    Tensor::from_vec(rows.len(), cols, rows.concat())
}

fn concat_rows(parts: Vec<Tensor>) -> Tensor {
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::concat_rows(&refs)
}

/// Clip features for `n` clips of `clip_len` frames drawn from `source`.
fn clip_features(source: Source, n: usize, clip_len: usize, seed: u64, ex: &Extractor) -> Result<Tensor> {
    let chunks = n.div_ceil(EXTRACT_CHUNK);
    let range = |c: usize| c * EXTRACT_CHUNK..((c + 1) * EXTRACT_CHUNK).min(n);
    let parts = match source {
        Source::Model(g) => {
            let seed = rng::derive_seed(seed, rng::EVAL, 1);
            parallel::map_indexed(chunks, |c| {
                let seqs = g.generate_range(range(c), clip_len, seed);
                let rows: Vec<Vec<f64>> = seqs.iter().map(|s| s.data().to_vec()).collect();
                ex.clips(&stack(&rows), clip_len)
            })
        }
        Source::Dataset(ds) => {
            if ds.num_frames() < clip_len {
                return Err(Error::Argument(format!(
                    "dataset has {} frames, fewer than one clip of {clip_len}",
                    ds.num_frames()
                )));
            }
            let mut r = rng::stream(seed, rng::EVAL, 0);
            let starts: Vec<usize> = (0..n).map(|_| r.random_range(0..=ds.num_frames() - clip_len)).collect();
            parallel::map_indexed(chunks, |c| {
                let rows: Vec<Vec<f64>> = starts[range(c)]
                    .iter()
                    .map(|&s| ds.window_values(s, clip_len).iter().map(|&v| v as f64).collect())
                    .collect();
                ex.clips(&stack(&rows), clip_len)
            })
        }
        Source::Sequences(seqs) => {
            if seqs.is_empty() || seqs.iter().any(|s| s.len() < clip_len) {
                return Err(Error::Argument(format!(
                    "every sequence needs at least {clip_len} frames"
                )));
            }
            let mut r = rng::stream(seed, rng::EVAL, 0);
            let picks: Vec<(usize, usize)> = (0..n)
                .map(|_| {
                    let i = r.random_range(0..seqs.len());
                    (i, r.random_range(0..=seqs[i].len() - clip_len))
                })
                .collect();
            parallel::map_indexed(chunks, |c| {
                let rows: Vec<Vec<f64>> = picks[range(c)]
                    .iter()
                    .map(|&(i, s)| seqs[i].window(s, clip_len).data().to_vec())
                    .collect();
                ex.clips(&stack(&rows), clip_len)
            })
        }
    };
    Ok(concat_rows(parts))
}

/// Frame features for `n` frames drawn from `source`.
fn frame_features(source: Source, n: usize, seed: u64, ex: &Extractor) -> Result<Tensor> {
    match source {
        Source::Model(g) => {
            // Whole rollouts of the training window length, truncated to n frames.
            let t = g.config().train_window_t;
            let videos = n.div_ceil(t);
            let feats = clip_features(Source::Model(g), videos, t, seed, &Extractor::IdentityFlatten)?;
            let f = g.config().code_len();
            let frames = Tensor::from_vec(videos * t, f, feats.into_vec()).slice_rows(0, n);
            Ok(ex.frames(&frames))
        }
        Source::Dataset(ds) => {
            let mut r = rng::stream(seed, rng::EVAL, 0);
            let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..ds.num_frames())).collect();
            let chunks = n.div_ceil(EXTRACT_CHUNK);
            let parts = parallel::map_indexed(chunks, |c| {
                let rows: Vec<Vec<f64>> = idx[c * EXTRACT_CHUNK..((c + 1) * EXTRACT_CHUNK).min(n)]
                    .iter()
                    .map(|&i| ds.frame_f64(i))
                    .collect();
                ex.frames(&stack(&rows))
            });
            Ok(concat_rows(parts))
        }
        Source::Sequences(_) => clip_features(source, n, 1, seed, ex),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
    pub extractor: String,
    pub ridge_applied: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_len: Option<usize>,
}

fn check_count(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Argument(format!("need at least 2 samples, got {n}")));
    }
    Ok(())
}

/// Fréchet distance between frame-feature distributions.
pub fn eval_fid(
    real: &LatentDataset,
    fake: Source,
    ex: &Extractor,
    n_frames: usize,
    seed: u64,
) -> Result<MetricReport> {
    check_count(n_frames)?;
    let a = GaussianStats::from_features(&frame_features(Source::Dataset(real), n_frames, seed, ex)?)?;
    let b = GaussianStats::from_features(&frame_features(fake, n_frames, seed, ex)?)?;
    let (value, ridge_applied) = frechet_with_ridge(&a, &b)?;
    Ok(MetricReport {
        metric: "fid".into(),
        value,
        n: n_frames,
        seed,
        extractor: ex.name(),
        ridge_applied,
        clip_len: None,
        sample_len: None,
    })
}

/// Fréchet distance between clip-feature distributions.
pub fn eval_fvd(
    real: &LatentDataset,
    fake: Source,
    ex: &Extractor,
    n_videos: usize,
    clip_len: usize,
    seed: u64,
) -> Result<MetricReport> {
    check_count(n_videos)?;
    if clip_len < 2 && matches!(fake, Source::Model(_)) {
        return Err(Error::Argument("clip length must be at least 2".into()));
    }
    let a = GaussianStats::from_features(&clip_features(Source::Dataset(real), n_videos, clip_len, seed, ex)?)?;
    let b = GaussianStats::from_features(&clip_features(fake, n_videos, clip_len, seed, ex)?)?;
    let (value, ridge_applied) = frechet_with_ridge(&a, &b)?;
    Ok(MetricReport {
        metric: "fvd".into(),
        value,
        n: n_videos,
        seed,
        extractor: ex.name(),
        ridge_applied,
        clip_len: Some(clip_len),
        sample_len: None,
    })
}

/// Mean over videos of the mean pairwise feature distance between frames.
pub fn eval_acd(samples: &[LatentSequence], ex: &Extractor) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Argument("no samples to evaluate".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.len() < 2) {
        return Err(Error::Argument(format!(
            "sequences need at least 2 frames, got {}",
            s.len()
        )));
    }
    let per_video = parallel::map_indexed(samples.len(), |i| {
        let s = &samples[i];
        let feats = ex.frames(&Tensor::from_vec(s.len(), s.code_len(), s.data().to_vec()));
        // Pairwise distances from the Gram matrix of the features.
        let gram = feats.matmul_nt(&feats);
        let t = s.len();
        let mut total = 0.0;
        for a in 0..t {
            for b in a + 1..t {
                let d2 = gram.get(a, a) + gram.get(b, b) - 2.0 * gram.get(a, b);
                total += d2.max(0.0).sqrt();
            }
        }
        total / (t * (t - 1) / 2) as f64
    });
    Ok(per_video.iter().sum::<f64>() / samples.len() as f64)
}

/// ACD over `count` rollouts of length `len` drawn from `generator`.
pub fn eval_acd_model(
    generator: &Generator,
    ex: &Extractor,
    count: usize,
    len: usize,
    seed: u64,
) -> Result<MetricReport> {
    let samples = generator.generate(count, len, rng::derive_seed(seed, rng::EVAL, 1))?;
    Ok(MetricReport {
        metric: "acd".into(),
        value: eval_acd(&samples, ex)?,
        n: count,
        seed,
        extractor: ex.name(),
        ridge_applied: false,
        clip_len: None,
        sample_len: Some(len),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub fid_frames: usize,
    pub fvd_videos: usize,
    pub fvd_clip_len: usize,
    pub acd_samples: usize,
    pub acd_len: usize,
    pub extractor: String,
    pub seed: Option<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            fid_frames: FID_FRAMES,
            fvd_videos: FVD_VIDEOS,
            fvd_clip_len: FVD_CLIP_LEN,
            acd_samples: ACD_SAMPLES,
            acd_len: ACD_LEN,
            extractor: "random-projection-64".into(),
            seed: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats_1d(mean: f64, var: f64) -> GaussianStats {
        GaussianStats {
            mean: vec![mean],
            covariance: vec![var],
            count: 10,
        }
    }

    #[test]
    fn one_dimensional_cases() {
        assert_eq!(frechet_distance(&stats_1d(0.0, 1.0), &stats_1d(1.0, 1.0)).unwrap(), 1.0);
        // (sqrt 4 - sqrt 1)^2 = 1
        assert!((frechet_distance(&stats_1d(0.0, 4.0), &stats_1d(0.0, 1.0)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn extractor_names_round_trip() {
        for name in ["identity-flatten", "temporal-mean", "random-projection-32"] {
            assert_eq!(Extractor::parse(name).unwrap().name(), name);
        }
        assert!(Extractor::parse("random-projection-0").is_err());
        assert!(Extractor::parse("inception").is_err());
    }

    #[test]
    fn acd_two_frames() {
        let s = LatentSequence::new(1, 2, 25.0, vec![0.0, 0.0, 3.0, 0.0]).unwrap();
        assert!((eval_acd(&[s], &Extractor::IdentityFlatten).unwrap() - 3.0).abs() < 1e-12);
        assert!(eval_acd(&[], &Extractor::IdentityFlatten).is_err());
    }

    #[test]
    fn covariance_is_unbiased() {
        let x = Tensor::from_vec(3, 1, vec![1.0, 2.0, 3.0]);
        let s = GaussianStats::from_features(&x).unwrap();
        assert_eq!(s.mean, vec![2.0]);
        assert_eq!(s.covariance, vec![1.0]);
    }
}
