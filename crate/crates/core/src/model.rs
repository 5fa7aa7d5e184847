//! Scores one (question, video) pair end to end: encoders, fusion, and the
//! global-span matrix, all reading one shared [`ParameterSet`].

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_span_label_map, tokenize, SpanLabelMap, VideoDoc};
use crate::encoders::{self, EncoderConfig, FrameIds, VisualFeatures};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionConfig};
use crate::globalspan::{self, GlobalSpanMatrix, SpanConfig};
use crate::numcore::{ParameterSet, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub span: SpanConfig,
    /// Subtitle token cap per video.
    pub max_length: usize,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            span: SpanConfig::default(),
            max_length: 1300,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.max_length == 0 {
            return Err(Error::InvalidArgument("max_length must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.fusion.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} not in [0, 1)", self.fusion.dropout)));
        }
        Ok(())
    }

    pub fn init_params(&self) -> Result<ParameterSet> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.init_seed);
        let mut params = ParameterSet::new();
        let d = self.encoder.d;
        encoders::init_params(&self.encoder, &mut params, &mut rng)?;
        fusion::init_params(d, &self.fusion, &mut params, &mut rng)?;
        globalspan::init_params(d, &self.span, &mut params, &mut rng)?;
        Ok(params)
    }
}

/// Where frame features come from.
#[derive(Clone, Debug, Default)]
pub enum VisualSource {
    /// Hashed toy encoder with trainable lookup table.
    #[default]
    Toy,
    /// Fixed features per video id, e.g. loaded with
    /// [`encoders::load_precomputed_features`].
    Precomputed(HashMap<String, VisualFeatures>),
}

/// Per-video data that does not depend on the question.
#[derive(Clone, Debug)]
pub struct PreparedVideo {
    pub video_id: String,
    pub map: SpanLabelMap,
    pub frames: FrameIds,
}

#[derive(Clone, Debug)]
pub struct CcgsModel {
    pub config: ModelConfig,
    pub params: ParameterSet,
    pub visual: VisualSource,
}

impl CcgsModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = config.init_params()?;
        Ok(Self {
            config,
            params,
            visual: VisualSource::Toy,
        })
    }

    /// Wraps existing parameters, checking names and shapes against what
    /// `config` would initialize.
    pub fn with_params(config: ModelConfig, params: ParameterSet) -> Result<Self> {
        let expected = config.init_params()?;
        if expected.len() != params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, config expects {}",
                params.len(),
                expected.len()
            )));
        }
        for p in expected.iter() {
            let got = params
                .get(&p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{}`", p.name)))?;
            if got.value.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter `{}` has shape {:?}, config expects {:?}",
                    p.name,
                    got.value.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(Self {
            config,
            params,
            visual: VisualSource::Toy,
        })
    }

    pub fn prepare(&self, video: &VideoDoc) -> Result<PreparedVideo> {
        Ok(PreparedVideo {
            video_id: video.video_id.clone(),
            map: build_span_label_map(video, self.config.max_length)?,
            frames: encoders::frame_ids(video, &self.config.encoder),
        })
    }

    pub fn prepare_all(&self, videos: &[VideoDoc]) -> Result<Vec<PreparedVideo>> {
        videos.iter().map(|v| self.prepare(v)).collect()
    }

    /// Projected frame features `m x d` on the tape.
    fn frames_on_tape(&self, tape: &mut Tape, video: &PreparedVideo) -> Result<Var> {
        let raw = match &self.visual {
            VisualSource::Toy => encoders::visual_raw_on_tape(tape, &self.params, &video.frames)?,
            VisualSource::Precomputed(features) => {
                let f = features.get(&video.video_id).ok_or_else(|| {
                    Error::InvalidArgument(format!("no precomputed features for `{}`", video.video_id))
                })?;
                if f.matrix.cols() != self.config.encoder.d_v {
                    return Err(Error::Format(format!(
                        "features for `{}` have width {}, expected {}",
                        video.video_id,
                        f.matrix.cols(),
                        self.config.encoder.d_v
                    )));
                }
                tape.constant(f.matrix.clone())
            }
        };
        encoders::project_visual(tape, &self.params, raw)
    }

    /// Records the forward pass for one pair and returns the masked
    /// `r x r` global-span matrix.
    pub fn forward(
        &self,
        tape: &mut Tape,
        question: &[String],
        video: &PreparedVideo,
        train: bool,
        dropout_seed: u64,
    ) -> Result<Var> {
        let cfg = &self.config;
        let frames = self.frames_on_tape(tape, video)?;
        let text = encoders::text_on_tape(tape, &self.params, question, &video.map, &cfg.encoder)?;
        let fused = fusion::fuse(
            tape,
            &self.params,
            &cfg.fusion,
            frames,
            text,
            question.len(),
            train,
            dropout_seed,
        )?;
        let split = globalspan::split_features(tape, &self.params, &cfg.span, fused)?;
        globalspan::build_matrix_on_tape(tape, split.x_hat, split.y_hat)
    }

    /// Inference-mode matrix for a raw question string.
    pub fn score(&self, question: &str, video: &PreparedVideo) -> Result<GlobalSpanMatrix> {
        self.score_tokens(&tokenize(question), video)
    }

    pub fn score_tokens(&self, question: &[String], video: &PreparedVideo) -> Result<GlobalSpanMatrix> {
        let mut tape = Tape::new();
        let m = self.forward(&mut tape, question, video, false, 0)?;
        GlobalSpanMatrix::new(tape.value(m).clone())
    }
}
