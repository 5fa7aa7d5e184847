//! Retrieval and localization metrics, reported as percentages.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{QaInstance, SpanPoint, TimeInterval};
use crate::error::{Error, Result};

/// Intersection over union. Two zero-length intervals score 1 when they are
/// the same instant and 0 otherwise.
pub fn iou(a: &TimeInterval, b: &TimeInterval) -> f64 {
    let inter = a.overlap(b);
    let union = a.length() + b.length() - inter;
    if union <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    inter / union
}

/// One candidate video for a question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedVideo {
    pub video_id: String,
    pub score: f64,
    /// Decoded answer span; absent when the video was not localized.
    pub span: Option<SpanPoint>,
    pub interval: Option<TimeInterval>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub question_id: String,
    /// Best first.
    pub ranked: Vec<RankedVideo>,
}

impl Prediction {
    /// 1-based rank of `video_id`, if present.
    pub fn rank_of(&self, video_id: &str) -> Option<usize> {
        self.ranked.iter().position(|r| r.video_id == video_id).map(|i| i + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GoldAnswer {
    pub question_id: String,
    pub video_id: String,
    pub interval: TimeInterval,
}

impl From<&QaInstance> for GoldAnswer {
    fn from(qa: &QaInstance) -> Self {
        Self {
            question_id: qa.question_id.clone(),
            video_id: qa.video_id.clone(),
            interval: qa.answer,
        }
    }
}

/// Which span a Rank@k hit is scored with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalizationRule {
    /// The span decoded in the gold video, credited only when that video is
    /// within the top k.
    #[default]
    GoldVideo,
    /// The best-IoU span among the top k videos.
    BestInTopK,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallAt {
    pub k: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub mrr: f64,
    pub recall: Vec<RecallAt>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouRate {
    pub threshold: f64,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationAtRank {
    pub k: usize,
    pub iou: Vec<IouRate>,
    pub miou: f64,
}

fn lookup(preds: &[Prediction]) -> HashMap<&str, &Prediction> {
    preds.iter().map(|p| (p.question_id.as_str(), p)).collect()
}

fn prediction_for<'a>(map: &HashMap<&str, &'a Prediction>, question_id: &str) -> Result<&'a Prediction> {
    map.get(question_id)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("no prediction for question `{question_id}`")))
}

fn pct(count: usize, total: usize) -> f64 {
    100.0 * count as f64 / total as f64
}

/// MRR and R@k over `gold`, in percent. A gold video missing from the
/// ranking contributes reciprocal rank 0.
pub fn retrieval_metrics(preds: &[Prediction], gold: &[GoldAnswer], ks: &[usize]) -> Result<RetrievalMetrics> {
    if gold.is_empty() {
        return Err(Error::InvalidArgument("no questions to score".into()));
    }
    let map = lookup(preds);
    let mut ranks = Vec::with_capacity(gold.len());
    for g in gold {
        ranks.push(prediction_for(&map, &g.question_id)?.rank_of(&g.video_id));
    }
    let rr: f64 = ranks.iter().map(|r| r.map_or(0.0, |r| 1.0 / r as f64)).sum();
    let recall = ks
        .iter()
        .map(|&k| RecallAt {
            k,
            rate: pct(ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count(), gold.len()),
        })
        .collect();
    Ok(RetrievalMetrics {
        mrr: 100.0 * rr / gold.len() as f64,
        recall,
    })
}

/// Per-question IoU at cutoff `k`.
fn question_iou(pred: &Prediction, gold: &GoldAnswer, k: usize, rule: LocalizationRule) -> Result<f64> {
    let top = &pred.ranked[..k.min(pred.ranked.len())];
    let span_iou = |r: &RankedVideo| -> Result<f64> {
        let interval = r.interval.ok_or_else(|| {
            Error::InvalidArgument(format!(
                "question `{}`: video `{}` ranked in the top {k} has no decoded span",
                pred.question_id, r.video_id
            ))
        })?;
        Ok(iou(&interval, &gold.interval))
    };
    match rule {
        LocalizationRule::GoldVideo => match top.iter().find(|r| r.video_id == gold.video_id) {
            Some(r) => span_iou(r),
            None => Ok(0.0),
        },
        LocalizationRule::BestInTopK => {
            let mut best = 0.0f64;
            for r in top {
                best = best.max(span_iou(r)?);
            }
            Ok(best)
        }
    }
}

/// Rank@k IoU@threshold rates and mIoU, in percent.
pub fn localization_metrics(
    preds: &[Prediction],
    gold: &[GoldAnswer],
    ks: &[usize],
    thresholds: &[f64],
    rule: LocalizationRule,
) -> Result<Vec<LocalizationAtRank>> {
    if gold.is_empty() {
        return Err(Error::InvalidArgument("no questions to score".into()));
    }
    let map = lookup(preds);
    let mut out = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut ious = Vec::with_capacity(gold.len());
        for g in gold {
            ious.push(question_iou(prediction_for(&map, &g.question_id)?, g, k, rule)?);
        }
        out.push(LocalizationAtRank {
            k,
            iou: thresholds
                .iter()
                .map(|&threshold| IouRate {
                    threshold,
                    rate: pct(ious.iter().filter(|&&v| v >= threshold).count(), gold.len()),
                })
                .collect(),
            miou: 100.0 * ious.iter().sum::<f64>() / gold.len() as f64,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub mode: String,
    pub questions: usize,
    pub retrieval: Option<RetrievalMetrics>,
    pub localization: Vec<LocalizationAtRank>,
}

const CSV_HEADER: [&str; 3] = ["group", "metric", "value"];

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Rank@k rate for one threshold, if reported.
    pub fn rank_iou(&self, k: usize, threshold: f64) -> Option<f64> {
        self.localization
            .iter()
            .find(|l| l.k == k)?
            .iou
            .iter()
            .find(|r| r.threshold == threshold)
            .map(|r| r.rate)
    }

    pub fn rank_miou(&self, k: usize) -> Option<f64> {
        self.localization.iter().find(|l| l.k == k).map(|l| l.miou)
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.retrieval.as_ref()?.recall.iter().find(|r| r.k == k).map(|r| r.rate)
    }

    /// Rows of `group,metric,value` with two-decimal values, e.g.
    /// `Rank@1,IoU=0.3,59.31` or `Retrieval,MRR,86.70`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Format(format!("csv: {e}"));
        w.write_record(CSV_HEADER).map_err(io)?;
        w.write_record(["Meta", "mode", &self.mode]).map_err(io)?;
        w.write_record(["Meta", "questions", &self.questions.to_string()]).map_err(io)?;
        for l in &self.localization {
            let group = format!("Rank@{}", l.k);
            for r in &l.iou {
                w.write_record([group.as_str(), &format!("IoU={}", r.threshold), &format!("{:.2}", r.rate)])
                    .map_err(io)?;
            }
            w.write_record([group.as_str(), "mIoU", &format!("{:.2}", l.miou)]).map_err(io)?;
        }
        if let Some(ret) = &self.retrieval {
            for r in &ret.recall {
                w.write_record(["Retrieval", &format!("R@{}", r.k), &format!("{:.2}", r.rate)])
                    .map_err(io)?;
            }
            w.write_record(["Retrieval", "MRR", &format!("{:.2}", ret.mrr)]).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    /// Parses the layout written by [`MetricsReport::to_csv`]. Values keep
    /// the two-decimal precision of the file.
    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Format(format!("metrics csv: {msg}"));
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
        if header.iter().ne(CSV_HEADER) {
            return Err(bad(format!("unexpected header {header:?}")));
        }
        let mut report = MetricsReport {
            mode: String::new(),
            questions: 0,
            retrieval: None,
            localization: Vec::new(),
        };
        for record in reader.records() {
            let record = record.map_err(|e| bad(e.to_string()))?;
            let [group, metric, value] = [0, 1, 2].map(|i| record.get(i).unwrap_or(""));
            match (group, metric) {
                ("Meta", "mode") => report.mode = value.to_string(),
                ("Meta", "questions") => {
                    report.questions = value.parse().map_err(|e| bad(format!("questions: {e}")))?
                }
                ("Retrieval", "MRR") => {
                    report.retrieval.get_or_insert_with(empty_retrieval).mrr = num(value)?;
                }
                ("Retrieval", m) => {
                    let k = m
                        .strip_prefix("R@")
                        .and_then(|k| k.parse().ok())
                        .ok_or_else(|| bad(format!("unknown retrieval metric `{m}`")))?;
                    let rate = num(value)?;
                    report.retrieval.get_or_insert_with(empty_retrieval).recall.push(RecallAt { k, rate });
                }
                (g, m) => {
                    let k: usize = g
                        .strip_prefix("Rank@")
                        .and_then(|k| k.parse().ok())
                        .ok_or_else(|| bad(format!("unknown group `{g}`")))?;
                    if report.localization.last().is_none_or(|l| l.k != k) {
                        report.localization.push(LocalizationAtRank {
                            k,
                            iou: Vec::new(),
                            miou: 0.0,
                        });
                    }
                    let entry = report.localization.last_mut().expect("just pushed");
                    if m == "mIoU" {
                        entry.miou = num(value)?;
                    } else {
                        let threshold = m
                            .strip_prefix("IoU=")
                            .ok_or_else(|| bad(format!("unknown metric `{m}`")))?;
                        entry.iou.push(IouRate {
                            threshold: num(threshold)?,
                            rate: num(value)?,
                        });
                    }
                }
            }
        }
        Ok(report)
    }

    /// Aligned plain-text table, one line per metric.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode: {} ({} questions)", self.mode, self.questions);
        for l in &self.localization {
            for r in &l.iou {
                let _ = writeln!(s, "  Rank@{:<4} IoU={:<5} {:>7.2}", l.k, r.threshold, r.rate);
            }
            let _ = writeln!(s, "  Rank@{:<4} mIoU      {:>7.2}", l.k, l.miou);
        }
        if let Some(ret) = &self.retrieval {
            for r in &ret.recall {
                let _ = writeln!(s, "  R@{:<17} {:>7.2}", r.k, r.rate);
            }
            let _ = writeln!(s, "  MRR                 {:>7.2}", ret.mrr);
        }
        s
    }
}

fn empty_retrieval() -> RetrievalMetrics {
    RetrievalMetrics {
        mrr: 0.0,
        recall: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(a: f64, b: f64) -> TimeInterval {
        TimeInterval::new(a, b).unwrap()
    }

    fn ranked(ids: &[&str], gold_span: Option<TimeInterval>) -> Vec<RankedVideo> {
        ids.iter()
            .map(|id| RankedVideo {
                video_id: id.to_string(),
                score: 0.0,
                span: None,
                interval: gold_span,
            })
            .collect()
    }

    fn gold(q: &str, v: &str, i: TimeInterval) -> GoldAnswer {
        GoldAnswer {
            question_id: q.into(),
            video_id: v.into(),
            interval: i,
        }
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&iv(1.0, 4.0), &iv(1.0, 4.0)), 1.0);
        assert_eq!(iou(&iv(0.0, 1.0), &iv(2.0, 3.0)), 0.0);
        assert!((iou(&iv(0.0, 10.0), &iv(5.0, 15.0)) - 5.0 / 15.0).abs() < 1e-12);
        assert_eq!(iou(&iv(2.0, 2.0), &iv(2.0, 2.0)), 1.0);
        assert_eq!(iou(&iv(2.0, 2.0), &iv(3.0, 3.0)), 0.0);
    }

    #[test]
    fn perfect_retrieval() {
        let preds = vec![Prediction {
            question_id: "q".into(),
            ranked: ranked(&["a", "b"], None),
        }];
        let m = retrieval_metrics(&preds, &[gold("q", "a", iv(0.0, 1.0))], &[1, 5, 10]).unwrap();
        assert_eq!(m.mrr, 100.0);
        assert!(m.recall.iter().all(|r| r.rate == 100.0));
    }

    #[test]
    fn mrr_closed_form() {
        let ids = ["a", "b", "c", "d", "e"];
        let preds: Vec<Prediction> = (0..3)
            .map(|i| Prediction {
                question_id: format!("q{i}"),
                ranked: ranked(&ids, None),
            })
            .collect();
        let g = [
            gold("q0", "a", iv(0.0, 1.0)),
            gold("q1", "b", iv(0.0, 1.0)),
            gold("q2", "d", iv(0.0, 1.0)),
        ];
        let m = retrieval_metrics(&preds, &g, &[1]).unwrap();
        assert!((m.mrr - 100.0 * (1.0 + 0.5 + 0.25) / 3.0).abs() < 1e-9);
        assert!((m.mrr - 58.33).abs() < 5e-3);
    }

    #[test]
    fn rank_six_threshold() {
        let ids = ["a", "b", "c", "d", "e", "f", "g"];
        let preds = vec![Prediction {
            question_id: "q".into(),
            ranked: ranked(&ids, None),
        }];
        let m = retrieval_metrics(&preds, &[gold("q", "f", iv(0.0, 1.0))], &[5, 10]).unwrap();
        assert_eq!(m.recall[0].rate, 0.0);
        assert_eq!(m.recall[1].rate, 100.0);
    }

    #[test]
    fn missing_prediction_is_an_error() {
        assert!(retrieval_metrics(&[], &[gold("q", "a", iv(0.0, 1.0))], &[1]).is_err());
        assert!(localization_metrics(&[], &[gold("q", "a", iv(0.0, 1.0))], &[1], &[0.5], LocalizationRule::GoldVideo).is_err());
    }

    #[test]
    fn perfect_localization_and_outside_top_k() {
        let span = iv(3.0, 7.0);
        let preds = vec![
            Prediction {
                question_id: "q0".into(),
                ranked: ranked(&["a", "b"], Some(span)),
            },
            Prediction {
                question_id: "q1".into(),
                ranked: ranked(&["a", "b"], Some(span)),
            },
        ];
        let g = [gold("q0", "a", span), gold("q1", "b", span)];
        let l = localization_metrics(&preds, &g, &[1, 10], &[0.3, 0.5, 0.7], LocalizationRule::GoldVideo).unwrap();
        assert!(l[0].iou.iter().all(|r| r.rate == 50.0));
        assert_eq!(l[0].miou, 50.0);
        assert!(l[1].iou.iter().all(|r| r.rate == 100.0));
        assert_eq!(l[1].miou, 100.0);
        let best = localization_metrics(&preds, &g, &[1], &[0.5], LocalizationRule::BestInTopK).unwrap();
        assert_eq!(best[0].miou, 100.0);
    }

    fn sample_report() -> MetricsReport {
        MetricsReport {
            mode: "ccgs".into(),
            questions: 8,
            retrieval: Some(RetrievalMetrics {
                mrr: 86.7,
                recall: vec![RecallAt { k: 1, rate: 75.0 }, RecallAt { k: 5, rate: 87.5 }],
            }),
            localization: vec![
                LocalizationAtRank {
                    k: 1,
                    iou: vec![IouRate { threshold: 0.3, rate: 59.31 }, IouRate { threshold: 0.5, rate: 37.5 }],
                    miou: 41.25,
                },
                LocalizationAtRank {
                    k: 10,
                    iou: vec![IouRate { threshold: 0.3, rate: 62.5 }, IouRate { threshold: 0.5, rate: 50.0 }],
                    miou: 48.0,
                },
            ],
        }
    }

    #[test]
    fn json_and_csv_round_trip() {
        let r = sample_report();
        assert_eq!(MetricsReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        let csv = r.to_csv().unwrap();
        assert!(csv.starts_with("group,metric,value\n"));
        assert!(csv.contains("Rank@1,IoU=0.3,59.31\n"));
        assert!(csv.contains("Retrieval,MRR,86.70\n"));
        assert_eq!(MetricsReport::from_csv(&csv).unwrap(), r);
    }

    #[test]
    fn csv_rejects_unknown_rows() {
        assert!(MetricsReport::from_csv("group,metric,value\nWhat,x,1\n").is_err());
        assert!(MetricsReport::from_csv("a,b,c\n").is_err());
    }
}
