//! Per-second context feature matrices and the `CFMATRX1` file format.
//!
//! Synthesised scenes carry proxy features: each second's saliency state
//! (a one-hot of the dominant class followed by the class weights) is
//! embedded through a fixed random projection per stream, plus noise.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::scene::{HighlightSchedule, SourceClass};
use crate::seed::rng_for;

pub const CFM_MAGIC: &[u8; 8] = b"CFMATRX1";

/// Width of the saliency state vector embedded into proxy features.
pub const STATE_DIM: usize = 6;

/// Time-major feature matrix at one frame per second.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextFeatureMatrix {
    frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl ContextFeatureMatrix {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(input_err!("context matrix needs at least one frame and one feature"));
        }
        if data.len() != frames * dim {
            return Err(input_err!("context data has {} values, expected {frames}x{dim}", data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(input_err!("context features must be finite"));
        }
        Ok(Self { frames, dim, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    /// Copy with rows reordered by `order` (row `i` of the result is row `order[i]`).
    pub fn permuted_rows(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.frames || order.iter().any(|&i| i >= self.frames) {
            return Err(input_err!("row permutation does not match {} frames", self.frames));
        }
        let data = order.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Self::new(self.frames, self.dim, data)
    }
}

/// Which context modality a feature stream stands in for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextStream {
    Vision,
    Text,
}

impl ContextStream {
    pub const ALL: [ContextStream; 2] = [ContextStream::Vision, ContextStream::Text];

    pub fn file_name(self) -> &'static str {
        match self {
            ContextStream::Vision => "ctx_vid.cfm",
            ContextStream::Text => "ctx_text.cfm",
        }
    }

    fn projection_seed(self) -> u64 {
        match self {
            ContextStream::Vision => 0x7669_6400,
            ContextStream::Text => 0x7465_7874,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ContextStream::Vision => "vid",
            ContextStream::Text => "text",
        }
    }
}

/// Saliency state of one second: one-hot dominant class then the weights.
pub fn saliency_state(schedule: &HighlightSchedule, second: usize) -> [f64; STATE_DIM] {
    let mut z = [0.0; STATE_DIM];
    if let Some(c) = schedule.dominant(second) {
        z[c.index()] = 1.0;
    }
    z[3..].copy_from_slice(&schedule.weights()[second]);
    z
}

/// Fixed `STATE_DIM x dim` projection for a stream, row-major.
pub fn projection(stream: ContextStream, dim: usize) -> DMatrix<f64> {
    let mut rng = rng_for(stream.projection_seed() ^ dim as u64, "projection");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    DMatrix::from_fn(STATE_DIM, dim, |_, _| normal.sample(&mut rng))
}

/// Proxy features for `schedule`; `noise_seed` drives the additive noise.
pub fn synthesize_context(
    schedule: &HighlightSchedule,
    stream: ContextStream,
    dim: usize,
    noise_std: f64,
    noise_seed: u64,
) -> Result<ContextFeatureMatrix> {
    if dim < STATE_DIM {
        return Err(input_err!("context dim {dim} is smaller than the {STATE_DIM}-wide state"));
    }
    let proj = projection(stream, dim);
    let mut rng = rng_for(noise_seed, &format!("context-{}", stream.label()));
    let noise = Normal::new(0.0, noise_std.max(0.0)).map_err(|e| input_err!("noise std: {e}"))?;
    let mut data = Vec::with_capacity(schedule.seconds() * dim);
    for t in 0..schedule.seconds() {
        let z = saliency_state(schedule, t);
        for j in 0..dim {
            let clean: f64 = (0..STATE_DIM).map(|i| z[i] * proj[(i, j)]).sum();
            data.push((clean + noise.sample(&mut rng)) as f32);
        }
    }
    ContextFeatureMatrix::new(schedule.seconds(), dim, data)
}

/// Least-squares recovery of the per-second saliency states from features.
pub fn decode_states(ctx: &ContextFeatureMatrix, stream: ContextStream) -> Result<Vec<[f64; STATE_DIM]>> {
    let proj = projection(stream, ctx.dim());
    let gram = &proj * proj.transpose();
    let gram_inv = gram.try_inverse().ok_or_else(|| Error::Internal("context projection is rank deficient".into()))?;
    let decoder = proj.transpose() * gram_inv; // dim x STATE_DIM
    Ok((0..ctx.frames())
        .map(|t| {
            let row = ctx.row(t);
            let mut z = [0.0; STATE_DIM];
            for (i, zi) in z.iter_mut().enumerate() {
                *zi = row.iter().enumerate().map(|(j, &v)| v as f64 * decoder[(j, i)]).sum();
            }
            z
        })
        .collect())
}

/// Decoded dominant class for each second (`None` when no class stands out).
pub fn decode_dominant(ctx: &ContextFeatureMatrix, stream: ContextStream) -> Result<Vec<Option<SourceClass>>> {
    Ok(decode_states(ctx, stream)?
        .into_iter()
        .map(|z| {
            let (best, value) = (0..3).map(|i| (i, z[i])).max_by(|a, b| a.1.total_cmp(&b.1)).expect("three classes");
            (value > 0.5).then(|| SourceClass::ALL[best])
        })
        .collect())
}

/// Decoded schedule weights per second, clamped to the simplex.
pub fn decode_weights(ctx: &ContextFeatureMatrix, stream: ContextStream) -> Result<Vec<[f64; 3]>> {
    Ok(decode_states(ctx, stream)?
        .into_iter()
        .map(|z| {
            let mut w = [z[3].max(0.0), z[4].max(0.0), z[5].max(0.0)];
            let sum: f64 = w.iter().sum();
            if sum > 0.0 {
                w.iter_mut().for_each(|v| *v /= sum);
            } else {
                w = [1.0 / 3.0; 3];
            }
            w
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CfmHeader {
    frames: usize,
    dim: usize,
    dtype: String,
    layout: String,
}

/// Serialises a matrix: magic, u64 little-endian header length, JSON header,
/// then `frames * dim` little-endian f32 values.
pub fn encode_cfm(ctx: &ContextFeatureMatrix) -> Vec<u8> {
    let header = serde_json::to_vec(&CfmHeader {
        frames: ctx.frames,
        dim: ctx.dim,
        dtype: "f32".into(),
        layout: "row-major".into(),
    })
    .expect("header serialises");
    let mut out = Vec::with_capacity(16 + header.len() + ctx.data.len() * 4);
    out.extend_from_slice(CFM_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for v in &ctx.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_cfm(bytes: &[u8], path: &Path) -> Result<ContextFeatureMatrix> {
    let fail = |msg: &str| Error::format(path, msg);
    if bytes.len() < 16 || &bytes[..8] != CFM_MAGIC {
        return Err(fail("missing CFMATRX1 magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..).ok_or_else(|| fail("truncated header"))?;
    if body.len() < header_len {
        return Err(fail("truncated header"));
    }
    let header: CfmHeader =
        serde_json::from_slice(&body[..header_len]).map_err(|e| fail(&format!("bad header: {e}")))?;
    if header.dtype != "f32" || header.layout != "row-major" {
        return Err(fail("only row-major f32 matrices are supported"));
    }
    let payload = &body[header_len..];
    if payload.len() != header.frames * header.dim * 4 {
        return Err(fail("payload length does not match header"));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    ContextFeatureMatrix::new(header.frames, header.dim, data).map_err(|e| fail(&e.to_string()))
}

pub fn write_cfm(path: impl AsRef<Path>, ctx: &ContextFeatureMatrix) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode_cfm(ctx)).map_err(|e| Error::io(path, e))
}

pub fn read_cfm(path: impl AsRef<Path>) -> Result<ContextFeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cfm(&bytes, path)
}
