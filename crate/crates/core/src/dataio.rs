//! Latent datasets on disk, window sampling, synthetic trajectories, and the
//! decoder/embedder adapter contracts.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::archive::{Archive, Dtype};
use crate::error::{Error, Result};
use crate::latent_model::{LatentCode, LatentSequence, DEFAULT_FPS};
use crate::rng;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "latents.bin";

/// Frames of latent codes in temporal order, stored as 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDataset {
    pub layers: usize,
    pub dim: usize,
    pub fps: f64,
    pub source_id: String,
    data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    num_frames: usize,
    layers: usize,
    dim: usize,
    fps: f64,
    dtype: String,
    byte_order: String,
    #[serde(default)]
    source_id: String,
}

impl LatentDataset {
    pub fn new(layers: usize, dim: usize, fps: f64, source_id: impl Into<String>, data: Vec<f32>) -> Result<Self> {
        let n = layers * dim;
        if n == 0 {
            return Err(Error::config("dataset", "layers and dim must be positive"));
        }
        if data.is_empty() || !data.len().is_multiple_of(n) {
            return Err(Error::shape(
                format!("a positive multiple of {layers}x{dim}"),
                format!("{} values", data.len()),
            ));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::config("dataset.fps", format!("must be positive, got {fps}")));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("dataset value {i} is not finite")));
        }
        Ok(LatentDataset {
            layers,
            dim,
            fps,
            source_id: source_id.into(),
            data,
        })
    }

    pub fn from_sequence(seq: &LatentSequence, source_id: impl Into<String>) -> Result<Self> {
        let data = seq.data().iter().map(|&v| v as f32).collect();
        LatentDataset::new(seq.layers, seq.dim, seq.fps, source_id, data)
    }

    pub fn code_len(&self) -> usize {
        self.layers * self.dim
    }

    pub fn num_frames(&self) -> usize {
        self.data.len() / self.code_len()
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, k: usize) -> &[f32] {
        let n = self.code_len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn frame_f64(&self, k: usize) -> Vec<f64> {
        self.frame(k).iter().map(|&v| v as f64).collect()
    }

    pub fn code(&self, k: usize) -> LatentCode {
        LatentCode {
            layers: self.layers,
            dim: self.dim,
            values: self.frame_f64(k),
        }
    }

    /// Raw values of frames `start..start + len`.
    pub fn window_values(&self, start: usize, len: usize) -> &[f32] {
        let n = self.code_len();
        &self.data[start * n..(start + len) * n]
    }

    pub fn window(&self, start: usize, len: usize) -> LatentSequence {
        let data = self.window_values(start, len).iter().map(|&v| v as f64).collect();
        LatentSequence::new(self.layers, self.dim, self.fps, data).expect("consistent shape")
    }

    pub fn to_sequence(&self) -> LatentSequence {
        self.window(0, self.num_frames())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            format_version: DATASET_FORMAT_VERSION,
            num_frames: self.num_frames(),
            layers: self.layers,
            dim: self.dim,
            fps: self.fps,
            dtype: "f32".into(),
            byte_order: "little".into(),
            source_id: self.source_id.clone(),
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(PAYLOAD_FILE);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        if m.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::format(
                &mpath,
                format!(
                    "unknown format_version {} (supported: {DATASET_FORMAT_VERSION})",
                    m.format_version
                ),
            ));
        }
        if m.dtype != "f32" || m.byte_order != "little" {
            return Err(Error::format(
                &mpath,
                format!(
                    "unsupported encoding {}/{} (expected f32/little)",
                    m.dtype, m.byte_order
                ),
            ));
        }
        let ppath = dir.join(PAYLOAD_FILE);
        let bytes = std::fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
        let expected = m.num_frames * m.layers * m.dim * 4;
        if bytes.len() != expected {
            return Err(Error::format(
                &ppath,
                format!("expected {expected} bytes, found {}", bytes.len()),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        LatentDataset::new(m.layers, m.dim, m.fps, m.source_id, data).map_err(|e| Error::format(&ppath, e.to_string()))
    }
}

/// Seeded enumeration of all `t`-frame window starts, reshuffled each epoch.
#[derive(Clone, Debug)]
pub struct WindowSampler {
    num_frames: usize,
    t: usize,
    seed: u64,
}

impl WindowSampler {
    pub fn new(dataset: &LatentDataset, t: usize, seed: u64) -> Result<Self> {
        if t == 0 || dataset.num_frames() < t {
            return Err(Error::Argument(format!(
                "dataset has {} frames, fewer than one window of {t}",
                dataset.num_frames()
            )));
        }
        Ok(WindowSampler {
            num_frames: dataset.num_frames(),
            t,
            seed,
        })
    }

    pub fn windows_per_epoch(&self) -> usize {
        self.num_frames - self.t + 1
    }

    pub fn window_len(&self) -> usize {
        self.t
    }

    /// Start positions for `epoch`, a permutation of `0..windows_per_epoch()`.
    pub fn epoch(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.windows_per_epoch()).collect();
        order.shuffle(&mut rng::stream(self.seed, rng::EPOCH_SHUFFLE, epoch));
        order
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub latent_dim_motion: usize,
    pub num_frames: usize,
    pub layers: usize,
    pub dim: usize,
    pub num_sinusoids: usize,
    pub noise_scale: f64,
    /// When positive, the first `motif_frames` frames repeat for the whole dataset.
    pub motif_frames: usize,
    pub fps: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            latent_dim_motion: 8,
            num_frames: 2000,
            layers: 4,
            dim: 16,
            num_sinusoids: 4,
            noise_scale: 0.05,
            motif_frames: 0,
            fps: 25.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("latent_dim_motion", self.latent_dim_motion),
            ("num_frames", self.num_frames),
            ("layers", self.layers),
            ("dim", self.dim),
            ("num_sinusoids", self.num_sinusoids),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::config("noise_scale", "must be finite and >= 0"));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::config("fps", "must be positive"));
        }
        Ok(())
    }
}

/// Trajectories `frame_k = M z_k + b (+ noise)` with `z_k` a sum of sinusoids.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LatentDataset> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, rng::SYNTHETIC, 0);
    let m = spec.latent_dim_motion;
    let n = spec.layers * spec.dim;
    let scale = 1.0 / (m as f64).sqrt();
    let embed: Vec<f64> = rng::normal_vec(&mut r, n * m).into_iter().map(|v| v * scale).collect();
    let offset: Vec<f64> = rng::normal_vec(&mut r, n).into_iter().map(|v| 0.5 * v).collect();
    // (amplitude, cycles per frame, phase) for every motion coordinate.
    let waves: Vec<Vec<(f64, f64, f64)>> = (0..m)
        .map(|_| {
            (0..spec.num_sinusoids)
                .map(|_| {
                    let amp = r.random_range(0.5..1.5) / (spec.num_sinusoids as f64).sqrt();
                    let freq = r.random_range(0.01..0.1);
                    let phase = r.random_range(0.0..std::f64::consts::TAU);
                    (amp, freq, phase)
                })
                .collect()
        })
        .collect();
    let period = if spec.motif_frames > 0 {
        spec.motif_frames
    } else {
        usize::MAX
    };
    let mut data = Vec::with_capacity(spec.num_frames * n);
    let mut z = vec![0.0; m];
    for k in 0..spec.num_frames {
        let kk = (k % period) as f64;
        for (zj, w) in z.iter_mut().zip(&waves) {
            *zj = w
                .iter()
                .map(|(a, f, p)| a * (std::f64::consts::TAU * f * kk + p).sin())
                .sum();
        }
        for row in 0..n {
            let mut v = offset[row];
            for (j, zj) in z.iter().enumerate() {
                v += embed[row * m + j] * zj;
            }
            data.push(v);
        }
    }
    if spec.noise_scale > 0.0 {
        let mut nr = rng::stream(spec.seed, rng::SYNTHETIC, 1);
        for (v, e) in data.iter_mut().zip(rng::normal_vec(&mut nr, spec.num_frames * n)) {
            *v += spec.noise_scale * e;
        }
    }
    let data = data.into_iter().map(|v| v as f32).collect();
    LatentDataset::new(
        spec.layers,
        spec.dim,
        spec.fps,
        format!("synthetic-seed-{}", spec.seed),
        data,
    )
}

/// An RGB image, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

/// Renders one latent code to an image (an external image generator in practice).
pub trait DecoderAdapter: Send + Sync {
    fn name(&self) -> &str;
    fn resolution(&self) -> (u32, u32);
    fn decode(&self, code: &LatentCode) -> std::result::Result<Image, String>;
}

/// Embeds an image into a latent code; no built-in implementation exists.
pub trait EmbedderAdapter: Send + Sync {
    fn name(&self) -> &str;
    fn embed(&self, image: &Image) -> std::result::Result<LatentCode, String>;
}

/// False-color rendering of the code matrix: layers run down, dims across.
#[derive(Clone, Debug)]
pub struct NullDecoder {
    pub width: u32,
    pub height: u32,
}

impl DecoderAdapter for NullDecoder {
    fn name(&self) -> &str {
        "null"
    }

    fn resolution(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    fn decode(&self, code: &LatentCode) -> std::result::Result<Image, String> {
        if code.values.is_empty() {
            return Err("empty code".into());
        }
        let (w, h) = (self.width as usize, self.height as usize);
        let mut pixels = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            let layer = y * code.layers / h;
            let blue = (255 * layer / code.layers.max(1)) as u8;
            for x in 0..w {
                let v = code.get(layer, x * code.dim / w).tanh();
                pixels.push((127.5 + 127.5 * v).round() as u8);
                pixels.push((127.5 - 127.5 * v).round() as u8);
                pixels.push(blue);
            }
        }
        Ok(Image {
            width: self.width,
            height: self.height,
            pixels,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub name: String,
    pub width: u32,
    pub height: u32,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            name: "null".into(),
            width: 64,
            height: 64,
        }
    }
}

/// Look up a decoder adapter by its registry name.
pub fn decoder_from_config(cfg: &DecoderConfig) -> Result<Box<dyn DecoderAdapter>> {
    if cfg.width == 0 || cfg.height == 0 {
        return Err(Error::config("decoder", "width and height must be positive"));
    }
    match cfg.name.as_str() {
        "null" => Ok(Box::new(NullDecoder {
            width: cfg.width,
            height: cfg.height,
        })),
        other => Err(Error::config(
            "decoder.name",
            format!("unknown decoder adapter {other:?} (registered: \"null\")"),
        )),
    }
}

/// Look up an embedder adapter by name. None are built in.
pub fn embedder_by_name(name: &str) -> Result<Box<dyn EmbedderAdapter>> {
    Err(Error::config(
        "embedder",
        format!("unknown embedder adapter {name:?}; no embedders are registered"),
    ))
}

pub fn decode_sequence(adapter: &dyn DecoderAdapter, seq: &LatentSequence) -> Result<Vec<Image>> {
    (0..seq.len())
        .map(|k| {
            adapter.decode(&seq.code(k)).map_err(|reason| Error::Adapter {
                adapter: adapter.name().to_string(),
                frame: k,
                reason,
            })
        })
        .collect()
}

/// Tensor name of a stacked `[count, t, layers, dim]` sequence batch.
pub const SEQUENCES_TENSOR: &str = "sequences";
/// Tensor name of a single `[layers, dim]` code.
pub const CODE_TENSOR: &str = "code";

/// Write equal-length sequences as one `[count, t, layers, dim]` f32 tensor.
pub fn write_sequences(path: &Path, seqs: &[LatentSequence], mut meta: Map<String, Value>) -> Result<()> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::Argument("no sequences to write".into()))?;
    let (t, layers, dim) = (first.len(), first.layers, first.dim);
    let mut data = Vec::with_capacity(seqs.len() * t * layers * dim);
    for (i, s) in seqs.iter().enumerate() {
        if (s.len(), s.layers, s.dim) != (t, layers, dim) {
            return Err(Error::shape(
                format!("{t}x{layers}x{dim}"),
                format!("{}x{}x{} (sequence {i})", s.len(), s.layers, s.dim),
            ));
        }
        data.extend_from_slice(s.data());
    }
    meta.insert("fps".into(), json!(first.fps));
    let mut a = Archive::new(meta);
    a.push(SEQUENCES_TENSOR, vec![seqs.len(), t, layers, dim], Dtype::F32, data);
    a.write(path)
}

pub fn read_sequences(path: &Path) -> Result<Vec<LatentSequence>> {
    let a = Archive::read(path)?;
    let fps = a.meta.get("fps").and_then(Value::as_f64).unwrap_or(DEFAULT_FPS);
    let tensor = a.require(SEQUENCES_TENSOR, path)?;
    let [count, t, layers, dim] = tensor.shape[..] else {
        return Err(Error::format(
            path,
            format!(
                "{SEQUENCES_TENSOR} must be 4-d [count, t, layers, dim], got {:?}",
                tensor.shape
            ),
        ));
    };
    let frame = t * layers * dim;
    (0..count)
        .map(|i| LatentSequence::new(layers, dim, fps, tensor.data[i * frame..(i + 1) * frame].to_vec()))
        .collect()
}

pub fn write_code(path: &Path, code: &LatentCode) -> Result<()> {
    let mut a = Archive::new(Map::new());
    a.push(
        CODE_TENSOR,
        vec![code.layers, code.dim],
        Dtype::F64,
        code.values.clone(),
    );
    a.write(path)
}

/// Read a code from an archive, or from a `.json` file holding `layers` rows of `dim` numbers.
pub fn read_code(path: &Path) -> Result<LatentCode> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rows: Vec<Vec<f64>> = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let dim = rows.first().map_or(0, |r| r.len());
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::format(path, "code rows must be non-empty and of equal length"));
        }
        return LatentCode::new(rows.len(), dim, rows.concat());
    }
    let a = Archive::read(path)?;
    let tensor = a.require(CODE_TENSOR, path)?;
    let [layers, dim] = tensor.shape[..] else {
        return Err(Error::format(
            path,
            format!("{CODE_TENSOR} must be 2-d [layers, dim], got {:?}", tensor.shape),
        ));
    };
    LatentCode::new(layers, dim, tensor.data.clone())
}
