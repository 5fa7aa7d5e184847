//! Trainable toy encoders standing in for pretrained video and language
//! models, plus a reader/writer for externally computed frame features.
//!
//! Tokens and frames are mapped to rows of learned lookup tables through a
//! seeded hash, so no vocabulary has to be built or stored.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, SpanLabelMap, VideoDoc};
use crate::error::{Error, Result};
use crate::globalspan::position_table;
use crate::numcore::{glorot_bound, uniform, Axis, ParameterSet, Tape, Tensor, Var, SENTINEL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Hidden size shared by every module downstream of the encoders.
    pub d: usize,
    /// Raw visual feature size before projection.
    pub d_v: usize,
    /// Rows in each hashed lookup table.
    pub buckets: usize,
    /// Pseudo-frames per second of video.
    pub fps: f64,
    /// Hash seed.
    pub seed: u64,
    /// Enables the self-attention layer that lets question and subtitle
    /// tokens see each other.
    pub mixing: bool,
    /// Initial query and key projections are `sqrt(match_init) * I`, so
    /// equal tokens start out attending to each other with logit gain
    /// `match_init`. Zero draws them at random instead.
    pub match_init: f64,
    /// Init range of the question/subtitle segment embedding.
    pub segment_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 64,
            d_v: 64,
            buckets: 4096,
            fps: 1.0,
            seed: 0,
            mixing: true,
            match_init: 6.0,
            segment_scale: 0.3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || self.d_v < 2 {
            return Err(Error::InvalidArgument(format!(
                "d and d_v must be at least 2, got d={} d_v={}",
                self.d, self.d_v
            )));
        }
        if self.buckets == 0 {
            return Err(Error::InvalidArgument("buckets must be positive".into()));
        }
        if !(self.match_init.is_finite() && self.match_init >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "match_init must be non-negative, got {}",
                self.match_init
            )));
        }
        if !(self.segment_scale.is_finite() && self.segment_scale >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "segment_scale must be non-negative, got {}",
                self.segment_scale
            )));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::InvalidArgument(format!("fps must be positive, got {}", self.fps)));
        }
        Ok(())
    }
}

/// Per-video frame features before projection.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures {
    /// `m x d_v`.
    pub matrix: Tensor,
    /// Seconds, strictly increasing, one per row.
    pub timestamps: Vec<f64>,
}

impl VisualFeatures {
    pub fn new(matrix: Tensor, timestamps: Vec<f64>) -> Result<Self> {
        if matrix.rows() == 0 {
            return Err(Error::InvalidArgument("visual features need at least one frame".into()));
        }
        if timestamps.len() != matrix.rows() {
            return Err(Error::InvalidArgument(format!(
                "{} timestamps for {} frames",
                timestamps.len(),
                matrix.rows()
            )));
        }
        if timestamps.windows(2).any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less)) {
            return Err(Error::InvalidArgument("frame timestamps must strictly increase".into()));
        }
        Ok(Self { matrix, timestamps })
    }

    pub fn frames(&self) -> usize {
        self.matrix.rows()
    }
}

/// Question and subtitle token features, `(p + r) x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures {
    pub matrix: Tensor,
    pub question_len: usize,
    pub subtitle_len: usize,
}

pub const TEXT_EMBED: &str = "text.embed";
pub const TEXT_SEGMENT: &str = "text.segment";
pub const TEXT_POS_GAIN: &str = "text.pos_gain";
pub const TEXT_WQ: &str = "text.attn.wq";
pub const TEXT_WK: &str = "text.attn.wk";
pub const TEXT_WV: &str = "text.attn.wv";
pub const VISUAL_EMBED: &str = "visual.embed";
pub const VISUAL_PROJ_W: &str = "visual.proj.w";
pub const VISUAL_PROJ_B: &str = "visual.proj.b";

/// Registers every encoder parameter.
pub fn init_params(cfg: &EncoderConfig, params: &mut ParameterSet, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d;
    params.insert(TEXT_EMBED, uniform(rng, cfg.buckets, d, 1.0))?;
    params.insert(TEXT_SEGMENT, uniform(rng, 2, d, cfg.segment_scale))?;
    params.insert(TEXT_POS_GAIN, Tensor::full(1, d, 0.5))?;
    let b = glorot_bound(d, d);
    if cfg.match_init > 0.0 {
        params.insert(TEXT_WQ, scaled_identity(rng, d, cfg.match_init.sqrt()))?;
        params.insert(TEXT_WK, scaled_identity(rng, d, cfg.match_init.sqrt()))?;
    } else {
        params.insert(TEXT_WQ, uniform(rng, d, d, b))?;
        params.insert(TEXT_WK, uniform(rng, d, d, b))?;
    }
    params.insert(TEXT_WV, uniform(rng, d, d, b))?;
    params.insert(VISUAL_EMBED, uniform(rng, cfg.buckets, cfg.d_v, 1.0))?;
    params.insert(VISUAL_PROJ_W, uniform(rng, cfg.d_v, d, glorot_bound(cfg.d_v, d)))?;
    params.insert(VISUAL_PROJ_B, Tensor::zeros(1, d))?;
    Ok(())
}

/// `scale * I` plus small uniform noise.
fn scaled_identity(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Tensor {
    let mut w = uniform(rng, d, d, 0.01);
    for i in 0..d {
        w.set(i, i, w.get(i, i) + scale);
    }
    w
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded FNV-1a over length-delimited parts, finished with a splitmix
/// round. Stable across platforms and toolchains.
pub fn stable_hash(seed: u64, parts: &[&[u8]]) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01B3;
    let mut h = 0xCBF2_9CE4_8422_2325 ^ splitmix64(seed);
    for part in parts {
        for &b in (part.len() as u32).to_le_bytes().iter().chain(part.iter()) {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    }
    splitmix64(h)
}

fn bucket(cfg: &EncoderConfig, parts: &[&[u8]]) -> usize {
    (stable_hash(cfg.seed, parts) % cfg.buckets as u64) as usize
}

pub fn token_bucket(cfg: &EncoderConfig, token: &str) -> usize {
    bucket(cfg, &[b"tok", token.as_bytes()])
}

/// Hash ids feeding each pseudo-frame: one id for `(video_id, frame)` and
/// one per token of the subtitle unit covering the frame midpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameIds {
    pub ids: Vec<Vec<usize>>,
    pub timestamps: Vec<f64>,
}

pub fn frame_ids(video: &VideoDoc, cfg: &EncoderConfig) -> FrameIds {
    let m = ((video.duration * cfg.fps).ceil() as usize).max(1);
    let mut ids = Vec::with_capacity(m);
    let mut timestamps = Vec::with_capacity(m);
    for f in 0..m {
        let t = f as f64 / cfg.fps;
        let mid = (f as f64 + 0.5) / cfg.fps;
        let mut row = vec![bucket(
            cfg,
            &[b"frame", video.video_id.as_bytes(), &(f as u64).to_le_bytes()],
        )];
        if let Some(u) = video
            .units
            .iter()
            .find(|u| u.interval.start <= mid && mid < u.interval.end)
        {
            row.extend(tokenize(&u.text).iter().map(|tok| bucket(cfg, &[b"vtok", tok.as_bytes()])));
        }
        ids.push(row);
        timestamps.push(t);
    }
    FrameIds { ids, timestamps }
}

/// Raw `m x d_v` frame features on the tape: the mean of the lookup rows
/// selected by each frame's hash ids.
pub fn visual_raw_on_tape(tape: &mut Tape, params: &ParameterSet, frames: &FrameIds) -> Result<Var> {
    let table = tape.param(params, VISUAL_EMBED)?;
    let flat: Vec<usize> = frames.ids.iter().flatten().copied().collect();
    let rows = tape.gather_rows(table, &flat)?;
    let mut avg = Tensor::zeros(frames.ids.len(), flat.len());
    let mut col = 0;
    for (f, ids) in frames.ids.iter().enumerate() {
        for _ in ids {
            avg.set(f, col, 1.0 / ids.len() as f64);
            col += 1;
        }
    }
    let avg = tape.constant(avg);
    tape.matmul(avg, rows)
}

/// Linear projection `d_v -> d` applied to each frame.
pub fn project_visual(tape: &mut Tape, params: &ParameterSet, raw: Var) -> Result<Var> {
    let w = tape.param(params, VISUAL_PROJ_W)?;
    let b = tape.param(params, VISUAL_PROJ_B)?;
    let h = tape.matmul(raw, w)?;
    tape.add_row(h, b)
}

/// Evaluates the toy visual encoder for one video.
pub fn encode_video_toy(video: &VideoDoc, params: &ParameterSet, cfg: &EncoderConfig) -> Result<VisualFeatures> {
    let frames = frame_ids(video, cfg);
    let mut tape = Tape::new();
    let raw = visual_raw_on_tape(&mut tape, params, &frames)?;
    VisualFeatures::new(tape.value(raw).clone(), frames.timestamps)
}

/// Text features on the tape for a question paired with one video's
/// subtitle tokens. Returns the `(p + r) x d` variable.
pub fn text_on_tape(
    tape: &mut Tape,
    params: &ParameterSet,
    question: &[String],
    map: &SpanLabelMap,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let (p, r) = (question.len(), map.token_count());
    if p == 0 {
        return Err(Error::InvalidArgument("question has no tokens".into()));
    }
    if r == 0 {
        return Err(Error::InvalidArgument(format!("video `{}` has no subtitle tokens", map.video_id)));
    }
    let n = p + r;
    let ids: Vec<usize> = question
        .iter()
        .chain(&map.tokens)
        .map(|t| token_bucket(cfg, t))
        .collect();
    let segments: Vec<usize> = (0..n).map(|i| usize::from(i >= p)).collect();

    let table = tape.param(params, TEXT_EMBED)?;
    let seg_table = tape.param(params, TEXT_SEGMENT)?;
    let gain = tape.param(params, TEXT_POS_GAIN)?;
    let tok = tape.gather_rows(table, &ids)?;
    let seg = tape.gather_rows(seg_table, &segments)?;
    let ones = tape.constant(Tensor::full(n, 1, 1.0));
    let gain_rows = tape.matmul(ones, gain)?;
    let sinusoid = tape.constant(position_table(n, cfg.d));
    let pos = tape.mul(sinusoid, gain_rows)?;
    let x = tape.add(tok, seg)?;
    let x = tape.add(x, pos)?;
    if !cfg.mixing {
        return Ok(x);
    }

    let wq = tape.param(params, TEXT_WQ)?;
    let wk = tape.param(params, TEXT_WK)?;
    let wv = tape.param(params, TEXT_WV)?;
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (cfg.d as f64).sqrt());
    // Tokens attend only to other tokens; the residual keeps their own row.
    let diag: Vec<bool> = (0..n * n).map(|i| i / n == i % n).collect();
    let scores = tape.masked_fill(scores, &diag, SENTINEL)?;
    let attn = tape.softmax(scores, Axis::Cols);
    let mixed = tape.matmul(attn, v)?;
    tape.add(x, mixed)
}

/// Evaluates the toy text encoder.
pub fn encode_text_toy(
    question: &[String],
    map: &SpanLabelMap,
    params: &ParameterSet,
    cfg: &EncoderConfig,
) -> Result<TextFeatures> {
    let mut tape = Tape::new();
    let t = text_on_tape(&mut tape, params, question, map, cfg)?;
    Ok(TextFeatures {
        matrix: tape.value(t).clone(),
        question_len: question.len(),
        subtitle_len: map.token_count(),
    })
}

pub const FEATURE_MAGIC: &[u8; 4] = b"CCGF";
pub const FEATURE_VERSION: u32 = 1;

/// Encodes features as `"CCGF" | u32 version | u32 m | u32 d_v |
/// m*d_v f32 | m f32 timestamps`, little-endian.
pub fn encode_features(features: &VisualFeatures) -> Vec<u8> {
    let (m, dv) = (features.matrix.rows(), features.matrix.cols());
    let mut out = Vec::with_capacity(16 + 4 * (m * dv + m));
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    out.extend_from_slice(&(dv as u32).to_le_bytes());
    for v in features.matrix.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for t in &features.timestamps {
        out.extend_from_slice(&(*t as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], expected_d_v: usize) -> Result<VisualFeatures> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::Format("feature header truncated".into()))
    };
    if bytes.get(0..4) != Some(FEATURE_MAGIC.as_slice()) {
        return Err(Error::Format("bad feature magic".into()));
    }
    let version = word(4)?;
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported feature version {version}")));
    }
    let m = word(8)? as usize;
    let dv = word(12)? as usize;
    if dv != expected_d_v {
        return Err(Error::Format(format!("feature width {dv}, expected {expected_d_v}")));
    }
    let floats = m
        .checked_mul(dv)
        .and_then(|n| n.checked_add(m))
        .ok_or_else(|| Error::Format("feature header overflows".into()))?;
    let payload = &bytes[16..];
    if payload.len() != floats * 4 {
        return Err(Error::Format(format!(
            "feature payload has {} bytes, header implies {}",
            payload.len(),
            floats * 4
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let (matrix, stamps) = values.split_at(m * dv);
    VisualFeatures::new(Tensor::new(m, dv, matrix.to_vec())?, stamps.to_vec())
}

pub fn write_features(path: &Path, features: &VisualFeatures) -> Result<()> {
    std::fs::File::create(path)?.write_all(&encode_features(features))?;
    Ok(())
}

pub fn load_precomputed_features(path: &Path, expected_d_v: usize) -> Result<VisualFeatures> {
    decode_features(&std::fs::read(path)?, expected_d_v)
}

/// Fresh encoder parameters from a seed; handy for tests and tools.
pub fn seeded_params(cfg: &EncoderConfig, seed: u64) -> Result<ParameterSet> {
    let mut params = ParameterSet::new();
    init_params(cfg, &mut params, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(params)
}
