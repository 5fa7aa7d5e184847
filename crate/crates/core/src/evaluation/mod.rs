//! Corpus-level inference and scoring.
//!
//! Ranking only ever sees question text; the gold video of a question is
//! consulted when metrics are computed, never while ranking.

mod bm25;
mod metrics;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bm25::{bm25_build, bm25_rank, idf, Bm25Index};
pub use metrics::{
    iou, localization_metrics, retrieval_metrics, GoldAnswer, IouRate, LocalizationAtRank, LocalizationRule,
    MetricsReport, Prediction, RankedVideo, RecallAt, RetrievalMetrics,
};

use crate::corpus::CorpusSplit;
use crate::error::{Error, Result};
use crate::model::{CcgsModel, PreparedVideo};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    /// Rank and localize with the global-span model.
    #[default]
    #[serde(rename = "ccgs")]
    Ccgs,
    /// Rank with BM25, localize with the model.
    #[serde(rename = "bm25+ccgs-span")]
    Bm25CcgsSpan,
    /// BM25 ranking only; no localization.
    #[serde(rename = "bm25")]
    Bm25,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Ccgs => "ccgs",
            EvalMode::Bm25CcgsSpan => "bm25+ccgs-span",
            EvalMode::Bm25 => "bm25",
        }
    }

    pub fn needs_model(self) -> bool {
        self != EvalMode::Bm25
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ccgs" => Ok(EvalMode::Ccgs),
            "bm25+ccgs-span" => Ok(EvalMode::Bm25CcgsSpan),
            "bm25" => Ok(EvalMode::Bm25),
            other => Err(Error::InvalidArgument(format!(
                "unknown mode `{other}` (expected ccgs, bm25+ccgs-span or bm25)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Cutoffs for R@k.
    pub recall_ks: Vec<usize>,
    /// Cutoffs for Rank@k localization.
    pub rank_ks: Vec<usize>,
    pub thresholds: Vec<f64>,
    pub rule: LocalizationRule,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            recall_ks: vec![1, 5, 10],
            rank_ks: vec![1, 10, 100],
            thresholds: vec![0.3, 0.5, 0.7],
            rule: LocalizationRule::GoldVideo,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if self.recall_ks.iter().chain(&self.rank_ks).any(|&k| k == 0) {
            return Err(Error::InvalidArgument("cutoffs must be at least 1".into()));
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::InvalidArgument(format!("IoU threshold {t} not in [0, 1]")));
        }
        Ok(())
    }

    fn max_rank_k(&self) -> usize {
        self.rank_ks.iter().copied().max().unwrap_or(0)
    }
}

fn sort_ranked(ranked: &mut [RankedVideo]) {
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.video_id.cmp(&b.video_id)));
}

fn localize(model: &CcgsModel, question: &str, video: &PreparedVideo) -> Result<(f64, RankedVideo)> {
    let decoded = model.score(question, video)?.decode();
    let interval = video.map.span_to_time(decoded.point)?;
    Ok((
        decoded.score,
        RankedVideo {
            video_id: video.video_id.clone(),
            score: decoded.score,
            span: Some(decoded.point),
            interval: Some(interval),
        },
    ))
}

/// Scores every video by the best cell of its global-span matrix and sorts
/// best first, ties by video id.
pub fn rank_videos(model: &CcgsModel, question_id: &str, question: &str, videos: &[PreparedVideo]) -> Result<Prediction> {
    let mut ranked = videos
        .iter()
        .map(|v| localize(model, question, v).map(|(_, r)| r))
        .collect::<Result<Vec<_>>>()?;
    sort_ranked(&mut ranked);
    Ok(Prediction {
        question_id: question_id.to_string(),
        ranked,
    })
}

/// BM25 ranking; when `model` is given, the top `localize_top` videos also
/// get a decoded span.
pub fn rank_videos_bm25(
    index: &Bm25Index,
    model: Option<&CcgsModel>,
    question_id: &str,
    question: &str,
    videos: &[PreparedVideo],
    localize_top: usize,
) -> Result<Prediction> {
    let ids = index.video_ids();
    let mut ranked = Vec::with_capacity(ids.len());
    for (pos, (doc, score)) in bm25_rank(question, index).into_iter().enumerate() {
        let mut entry = RankedVideo {
            video_id: ids[doc].clone(),
            score,
            span: None,
            interval: None,
        };
        if let Some(model) = model.filter(|_| pos < localize_top) {
            let (_, located) = localize(model, question, &videos[doc])?;
            entry.span = located.span;
            entry.interval = located.interval;
        }
        ranked.push(entry);
    }
    Ok(Prediction {
        question_id: question_id.to_string(),
        ranked,
    })
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub predictions: Vec<Prediction>,
}

/// Predictions for every question of `split`, in question order.
pub fn predict_split(
    model: Option<&CcgsModel>,
    split: &CorpusSplit,
    mode: EvalMode,
    opts: &EvalOptions,
) -> Result<Vec<Prediction>> {
    let model = match (mode.needs_model(), model) {
        (true, None) => return Err(Error::InvalidArgument(format!("mode {mode} needs a model"))),
        (true, m) => m,
        (false, _) => None,
    };
    let prepared = match model {
        Some(m) => m.prepare_all(split.videos())?,
        None => Vec::new(),
    };
    let index = match mode {
        EvalMode::Ccgs => None,
        _ => Some(bm25_build(split.videos())?),
    };
    split
        .qa
        .par_iter()
        .map(|qa| match (&index, model) {
            (Some(index), m) => {
                rank_videos_bm25(index, m, &qa.question_id, &qa.question, &prepared, opts.max_rank_k())
            }
            (None, Some(m)) => rank_videos(m, &qa.question_id, &qa.question, &prepared),
            (None, None) => unreachable!("ccgs mode always has a model"),
        })
        .collect()
}

pub fn report(mode: EvalMode, preds: &[Prediction], split: &CorpusSplit, opts: &EvalOptions) -> Result<MetricsReport> {
    let gold: Vec<GoldAnswer> = split.qa.iter().map(GoldAnswer::from).collect();
    let localization = if mode == EvalMode::Bm25 {
        Vec::new()
    } else {
        localization_metrics(preds, &gold, &opts.rank_ks, &opts.thresholds, opts.rule)?
    };
    Ok(MetricsReport {
        mode: mode.to_string(),
        questions: gold.len(),
        retrieval: Some(retrieval_metrics(preds, &gold, &opts.recall_ks)?),
        localization,
    })
}

pub fn evaluate(model: Option<&CcgsModel>, split: &CorpusSplit, mode: EvalMode, opts: &EvalOptions) -> Result<EvalOutcome> {
    opts.validate()?;
    let predictions = predict_split(model, split, mode, opts)?;
    Ok(EvalOutcome {
        report: report(mode, &predictions, split, opts)?,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SynthConfig};
    use crate::encoders::EncoderConfig;
    use crate::model::ModelConfig;

    fn small_model() -> CcgsModel {
        CcgsModel::new(ModelConfig {
            encoder: EncoderConfig {
                d: 8,
                d_v: 8,
                buckets: 256,
                ..EncoderConfig::default()
            },
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn corpus() -> CorpusSplit {
        generate_synthetic_corpus(
            &SynthConfig {
                n_videos: 4,
                n_questions: 6,
                ..SynthConfig::default()
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn one_entry_per_video_sorted() {
        let model = small_model();
        let c = corpus();
        let prepared = model.prepare_all(c.videos()).unwrap();
        let p = rank_videos(&model, "q", &c.qa[0].question, &prepared).unwrap();
        assert_eq!(p.ranked.len(), 4);
        assert!(p.ranked.windows(2).all(|w| w[0].score >= w[1].score));
        for r in &p.ranked {
            let s = r.span.unwrap();
            assert!(s.start <= s.end);
            assert!(r.interval.unwrap().length() >= 0.0);
        }
    }

    #[test]
    fn random_model_report_is_monotone() {
        let model = small_model();
        let c = corpus();
        let out = evaluate(Some(&model), &c, EvalMode::Ccgs, &EvalOptions::default()).unwrap();
        let r = out.report;
        let rec = &r.retrieval.as_ref().unwrap().recall;
        assert!(rec.windows(2).all(|w| w[0].rate <= w[1].rate));
        for t in [0.3, 0.5, 0.7] {
            let a = r.rank_iou(1, t).unwrap();
            let b = r.rank_iou(10, t).unwrap();
            let c = r.rank_iou(100, t).unwrap();
            assert!(a <= b && b <= c);
        }
        assert_eq!(r.questions, 6);
    }

    #[test]
    fn pipeline_localizes_top_videos_only() {
        let model = small_model();
        let c = corpus();
        let opts = EvalOptions {
            rank_ks: vec![1, 2],
            ..EvalOptions::default()
        };
        let preds = predict_split(Some(&model), &c, EvalMode::Bm25CcgsSpan, &opts).unwrap();
        for p in &preds {
            assert!(p.ranked[..2].iter().all(|r| r.span.is_some()));
            assert!(p.ranked[2..].iter().all(|r| r.span.is_none()));
        }
        assert!(predict_split(None, &c, EvalMode::Ccgs, &opts).is_err());
        let bm25 = evaluate(None, &c, EvalMode::Bm25, &opts).unwrap();
        assert!(bm25.report.localization.is_empty());
        assert_eq!(bm25.report.recall(1), Some(100.0));
    }

    #[test]
    fn mode_strings_round_trip() {
        for m in [EvalMode::Ccgs, EvalMode::Bm25CcgsSpan, EvalMode::Bm25] {
            assert_eq!(m.as_str().parse::<EvalMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("dpr".parse::<EvalMode>().is_err());
    }
}
