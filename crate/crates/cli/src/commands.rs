use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use log::info;
use serde::Serialize;

use ccgs::corpus::{generate_synthetic_corpus, parse_corpus, serialize_corpus, split_questions, CorpusSplit, SplitName};
use ccgs::evaluation::{evaluate, EvalMode, MetricsReport, Prediction};
use ccgs::model::CcgsModel;
use ccgs::numcore::checkpoint::{self, Precision};
use ccgs::training::{fit, log_to_jsonl, Trainer};

use crate::config::RunConfig;
use crate::failure::{Failure, ResultExt};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "log.jsonl";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";

pub fn split_file(name: SplitName) -> String {
    format!("{}.json", name.as_str())
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .runtime()
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    let path = dir.join(name);
    fs::write(&path, bytes)
        .with_context(|| format!("writing {}", path.display()))
        .runtime()
}

/// Reads a corpus file, or `<dir>/<split>.json` when `path` is a directory.
/// Returns `None` for a directory that lacks that split.
pub fn read_split(path: &Path, split: SplitName) -> Result<Option<CorpusSplit>, Failure> {
    let file = if path.is_dir() { path.join(split_file(split)) } else { path.to_path_buf() };
    if path.is_dir() && !file.exists() {
        return Ok(None);
    }
    let bytes = fs::read(&file)
        .with_context(|| format!("reading corpus {}", file.display()))
        .validation()?;
    parse_corpus(&bytes)
        .with_context(|| format!("parsing corpus {}", file.display()))
        .validation()
        .map(Some)
}

fn require_split(path: &Path, split: SplitName) -> Result<CorpusSplit, Failure> {
    read_split(path, split)?
        .ok_or_else(|| anyhow!("{} has no {}", path.display(), split_file(split)))
        .validation()
}

pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<CcgsModel, Failure> {
    if !path.is_file() {
        return Err(Failure::validation(anyhow!("checkpoint {} does not exist", path.display())));
    }
    let (params, _)= checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .runtime()?;
    CcgsModel::with_params(cfg.train.model.clone(), params)
        .with_context(|| format!("checkpoint {} does not match the model config", path.display()))
        .runtime()
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let pool = generate_synthetic_corpus(&cfg.synth, cfg.seed).map_err(Failure::from)?;
    let counts = cfg.split_counts();
    let splits = split_questions(&pool, counts).map_err(Failure::from)?;
    create_dir(out)?;
    for split in &splits {
        write(out, &split_file(split.split), serialize_corpus(split).map_err(Failure::from)?)?;
    }
    write(out, CONFIG_FILE, cfg.to_json().runtime()?)?;
    info!(
        "wrote {} train / {} val / {} test questions to {}",
        counts[0],
        counts[1],
        counts[2],
        out.display()
    );
    Ok(())
}

pub fn train(
    cfg: &RunConfig,
    corpus: &Path,
    val: Option<&Path>,
    resume: Option<&Path>,
    out: &Path,
) -> Result<(), Failure> {
    let train_split = require_split(corpus, SplitName::Train)?;
    let val_split = match val {
        Some(p) => Some(require_split(p, SplitName::Val)?),
        None if corpus.is_dir() => read_split(corpus, SplitName::Val)?,
        None => None,
    };
    let mut trainer = match resume {
        Some(path) => Trainer::with_model(cfg.train.clone(), &train_split, load_model(cfg, path)?),
        None => Trainer::new(cfg.train.clone(), &train_split),
    }
    .map_err(Failure::from)?;
    create_dir(out)?;
    write(out, CONFIG_FILE, cfg.to_json().runtime()?)?;

    let outcome = fit(&mut trainer, val_split.as_ref()).map_err(Failure::from)?;
    write(out, LOG_FILE, log_to_jsonl(&outcome.log).map_err(Failure::from)?)?;
    write(out, CHECKPOINT_FILE, checkpoint::encode(&outcome.best, Precision::F64))?;
    info!("kept parameters from step {}", outcome.best_step);

    if let Some(val_split) = &val_split {
        let model = CcgsModel::with_params(cfg.train.model.clone(), outcome.best).map_err(Failure::from)?;
        let report = evaluate(Some(&model), val_split, EvalMode::Ccgs, &cfg.eval)
            .map_err(Failure::from)?
            .report;
        write_report(out, &report)?;
        print!("{}", report.to_table());
    }
    Ok(())
}

fn write_report(out: &Path, report: &MetricsReport) -> Result<(), Failure> {
    write(out, METRICS_JSON, report.to_json().map_err(Failure::from)? + "\n")?;
    write(out, METRICS_CSV, report.to_csv().map_err(Failure::from)?)
}

fn model_for(cfg: &RunConfig, mode: EvalMode, checkpoint: Option<&Path>) -> Result<Option<CcgsModel>, Failure> {
    match (mode.needs_model(), checkpoint) {
        (false, _) => Ok(None),
        (true, Some(path)) => load_model(cfg, path).map(Some),
        (true, None) => Err(Failure::validation(anyhow!("mode {mode} needs --checkpoint"))),
    }
}

pub fn eval(
    cfg: &RunConfig,
    corpus: &Path,
    split: SplitName,
    checkpoint: Option<&Path>,
    out: Option<&Path>,
) -> Result<MetricsReport, Failure> {
    let data = require_split(corpus, split)?;
    let model = model_for(cfg, cfg.mode, checkpoint)?;
    let report = evaluate(model.as_ref(), &data, cfg.mode, &cfg.eval)
        .map_err(Failure::from)?
        .report;
    if let Some(out) = out {
        create_dir(out)?;
        write(out, CONFIG_FILE, cfg.to_json().runtime()?)?;
        write_report(out, &report)?;
    }
    print!("{}", report.to_table());
    Ok(report)
}

#[derive(Debug, Serialize)]
pub struct PredictedSpan {
    pub video_id: String,
    pub start_s: Option<f64>,
    pub end_s: Option<f64>,
    pub score: f64,
}

#[derive(Debug, Serialize)]
pub struct PredictOutput {
    pub question_id: String,
    pub question: String,
    /// The top-ranked video and its span.
    #[serde(flatten)]
    pub best: PredictedSpan,
    /// Leading entries of the full ranking, best first.
    pub ranked: Vec<PredictedSpan>,
}

fn predicted_span(p: &Prediction, i: usize) -> PredictedSpan {
    let r = &p.ranked[i];
    PredictedSpan {
        video_id: r.video_id.clone(),
        start_s: r.interval.map(|t| t.start),
        end_s: r.interval.map(|t| t.end),
        score: r.score,
    }
}

pub fn predict(
    cfg: &RunConfig,
    corpus: &Path,
    split: SplitName,
    checkpoint: Option<&Path>,
    question_id: &str,
    top: usize,
) -> Result<PredictOutput, Failure> {
    let data = require_split(corpus, split)?;
    let qa = data
        .question(question_id)
        .ok_or_else(|| anyhow!("no question `{question_id}` in {}", split.as_str()))
        .validation()?;
    // Only the question is kept, so the answer and video id never reach ranking.
    let single = data.with_questions(split, vec![qa.clone()]).map_err(Failure::from)?;
    let model = model_for(cfg, cfg.mode, checkpoint)?;
    let pred = evaluate(model.as_ref(), &single, cfg.mode, &cfg.eval)
        .map_err(Failure::from)?
        .predictions
        .remove(0);
    let out = PredictOutput {
        question_id: qa.question_id.clone(),
        question: qa.question.clone(),
        best: predicted_span(&pred, 0),
        ranked: (0..pred.ranked.len().min(top)).map(|i| predicted_span(&pred, i)).collect(),
    };
    println!("{}", serde_json::to_string_pretty(&out).runtime()?);
    Ok(out)
}

pub const COMPARE_MODES: [EvalMode; 3] = [EvalMode::Ccgs, EvalMode::Bm25, EvalMode::Bm25CcgsSpan];

/// Metric rows present in `report`, as (label, value).
fn metric_rows(report: &MetricsReport) -> Vec<(String, f64)> {
    let mut rows = Vec::new();
    if let Some(ret) = &report.retrieval {
        for r in &ret.recall {
            rows.push((format!("R@{}", r.k), r.rate));
        }
        rows.push(("MRR".to_string(), ret.mrr));
    }
    for l in &report.localization {
        for r in &l.iou {
            rows.push((format!("Rank@{} IoU={}", l.k, r.threshold), r.rate));
        }
        rows.push((format!("Rank@{} mIoU", l.k), l.miou));
    }
    rows
}

/// Side-by-side table; metrics a mode does not produce show as `-`.
pub fn compare_table(reports: &[MetricsReport]) -> String {
    let per_mode: Vec<Vec<(String, f64)>> = reports.iter().map(metric_rows).collect();
    let mut labels: Vec<String> = Vec::new();
    for rows in &per_mode {
        for (label, _) in rows {
            if !labels.contains(label) {
                labels.push(label.clone());
            }
        }
    }
    let mut s = String::new();
    let _ = write!(s, "{:<20}", "metric");
    for r in reports {
        let _ = write!(s, " {:>16}", r.mode);
    }
    s.push('\n');
    for label in &labels {
        let _ = write!(s, "{label:<20}");
        for rows in &per_mode {
            match rows.iter().find(|(l, _)| l == label) {
                Some((_, v)) => {
                    let _ = write!(s, " {v:>16.2}");
                }
                None => {
                    let _ = write!(s, " {:>16}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

fn compare_csv(reports: &[MetricsReport]) -> String {
    let mut s = String::from("mode,metric,value\n");
    for r in reports {
        for (label, v) in metric_rows(r) {
            let _ = writeln!(s, "{},{label},{v:.2}", r.mode);
        }
    }
    s
}

pub fn compare(
    cfg: &RunConfig,
    corpus: &Path,
    split: SplitName,
    checkpoint: Option<&Path>,
    out: Option<&Path>,
) -> Result<Vec<MetricsReport>, Failure> {
    let data = require_split(corpus, split)?;
    let path = checkpoint.ok_or_else(|| anyhow!("compare needs --checkpoint")).validation()?;
    let model = load_model(cfg, path)?;
    let reports = COMPARE_MODES
        .iter()
        .map(|&mode| {
            evaluate(Some(&model), &data, mode, &cfg.eval)
                .map(|o| o.report)
                .map_err(Failure::from)
        })
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(out) = out {
        create_dir(out)?;
        write(out, CONFIG_FILE, cfg.to_json().runtime()?)?;
        write(out, METRICS_JSON, serde_json::to_string_pretty(&reports).runtime()? + "\n")?;
        write(out, METRICS_CSV, compare_csv(&reports))?;
    }
    print!("{}", compare_table(&reports));
    Ok(reports)
}

/// `config.json` next to a checkpoint, if any.
pub fn sibling_config(checkpoint: &Path) -> Option<PathBuf> {
    let p = checkpoint.parent()?.join(CONFIG_FILE);
    p.exists().then_some(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ccgs::evaluation::{RecallAt, RetrievalMetrics};

    fn report(mode: &str, r1: f64) -> MetricsReport {
        MetricsReport {
            mode: mode.into(),
            questions: 2,
            retrieval: Some(RetrievalMetrics {
                mrr: r1,
                recall: vec![RecallAt { k: 1, rate: r1 }],
            }),
            localization: Vec::new(),
        }
    }

    #[test]
    fn table_has_one_column_per_mode() {
        let t = compare_table(&[report("ccgs", 50.0), report("bm25", 100.0)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("ccgs") && lines[0].contains("bm25"));
        assert!(lines[1].starts_with("R@1") && lines[1].contains("50.00") && lines[1].contains("100.00"));
    }

    #[test]
    fn csv_rows_carry_mode() {
        let csv = compare_csv(&[report("bm25", 100.0)]);
        assert_eq!(csv, "mode,metric,value\nbm25,R@1,100.00\nbm25,MRR,100.00\n");
    }
}
