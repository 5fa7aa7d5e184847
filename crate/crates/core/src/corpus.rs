//! Subtitled video corpora, questions, and the mapping between subtitle
//! time intervals and token positions.
//!
//! A [`SpanLabelMap`] assigns every subtitle unit of a video a contiguous,
//! inclusive range of token indices. Answer intervals in seconds become
//! span points `(start token, end token)` through [`SpanLabelMap::time_to_span`]
//! and decoded span points turn back into seconds through
//! [`SpanLabelMap::span_to_time`].

use std::collections::{HashMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Closed time interval in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeInterval {
    pub start: f64,
    pub end: f64,
}

impl TimeInterval {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !start.is_finite() || !end.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite interval [{start}, {end}]")));
        }
        if start < 0.0 {
            return Err(Error::InvalidArgument(format!("negative start {start}")));
        }
        if start > end {
            return Err(Error::InvalidArgument(format!("start {start} after end {end}")));
        }
        Ok(Self { start, end })
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    /// Length of the intersection, zero when disjoint.
    pub fn overlap(&self, other: &TimeInterval) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }

    pub fn contains(&self, t: f64) -> bool {
        self.start <= t && t <= self.end
    }
}

impl fmt::Display for TimeInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:.2}s, {:.2}s]", self.start, self.end)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubtitleUnit {
    /// 1-based ordinal within the video.
    pub index: usize,
    pub text: String,
    pub interval: TimeInterval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoDoc {
    pub video_id: String,
    pub units: Vec<SubtitleUnit>,
    pub duration: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaInstance {
    pub question_id: String,
    pub question: String,
    pub video_id: String,
    pub answer: TimeInterval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

/// One split of a corpus: the candidate videos and the questions asked
/// against them.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub split: SplitName,
    videos: Vec<VideoDoc>,
    by_id: HashMap<String, usize>,
    pub qa: Vec<QaInstance>,
}

impl CorpusSplit {
    /// Builds a split, checking every invariant.
    pub fn new(split: SplitName, videos: Vec<VideoDoc>, qa: Vec<QaInstance>) -> Result<Self> {
        let mut by_id = HashMap::new();
        for (i, v) in videos.iter().enumerate() {
            validate_video(v)?;
            if by_id.insert(v.video_id.clone(), i).is_some() {
                return Err(corpus_err(&v.video_id, "duplicate video_id"));
            }
        }
        let mut seen = HashSet::new();
        for q in &qa {
            if !seen.insert(q.question_id.as_str()) {
                return Err(corpus_err(&q.question_id, "duplicate question_id"));
            }
            let Some(&vi) = by_id.get(&q.video_id) else {
                return Err(corpus_err(
                    &q.question_id,
                    format!("video_id `{}` not in corpus", q.video_id),
                ));
            };
            let duration = videos[vi].duration;
            if q.answer.start > duration {
                return Err(corpus_err(
                    &q.question_id,
                    format!("answer {} lies beyond video duration {duration}", q.answer),
                ));
            }
        }
        Ok(Self {
            split,
            videos,
            by_id,
            qa,
        })
    }

    pub fn videos(&self) -> &[VideoDoc] {
        &self.videos
    }

    pub fn video(&self, id: &str) -> Option<&VideoDoc> {
        self.by_id.get(id).map(|&i| &self.videos[i])
    }

    pub fn video_index(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn question(&self, id: &str) -> Option<&QaInstance> {
        self.qa.iter().find(|q| q.question_id == id)
    }

    /// Same videos, different question list.
    pub fn with_questions(&self, split: SplitName, qa: Vec<QaInstance>) -> Result<Self> {
        Self::new(split, self.videos.clone(), qa)
    }
}

fn corpus_err(record: &str, reason: impl Into<String>) -> Error {
    Error::Corpus {
        record: record.to_string(),
        reason: reason.into(),
    }
}

fn validate_video(v: &VideoDoc) -> Result<()> {
    if v.units.is_empty() {
        return Err(corpus_err(&v.video_id, "video has no subtitle units"));
    }
    if !v.duration.is_finite() || v.duration < 0.0 {
        return Err(corpus_err(&v.video_id, format!("bad duration {}", v.duration)));
    }
    for (i, u) in v.units.iter().enumerate() {
        if u.index != i + 1 {
            return Err(corpus_err(&v.video_id, format!("unit {i} has ordinal {}", u.index)));
        }
        if i > 0 && v.units[i - 1].interval.end > u.interval.start {
            return Err(corpus_err(
                &v.video_id,
                format!("subtitle {} overlaps or precedes its predecessor", u.index),
            ));
        }
    }
    let last = v.units.last().expect("non-empty").interval.end;
    if last > v.duration {
        return Err(corpus_err(
            &v.video_id,
            format!("last subtitle ends at {last} after duration {}", v.duration),
        ));
    }
    Ok(())
}

// JSON wire format.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCorpus {
    split: SplitName,
    videos: Vec<RawVideo>,
    qa: Vec<RawQa>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVideo {
    video_id: String,
    duration: f64,
    subtitles: Vec<RawSubtitle>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSubtitle {
    start: f64,
    end: f64,
    text: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQa {
    question_id: String,
    question: String,
    video_id: String,
    answer_start: f64,
    answer_end: f64,
}

/// Parses and validates a corpus JSON document.
pub fn parse_corpus(bytes: &[u8]) -> Result<CorpusSplit> {
    let raw: RawCorpus = serde_json::from_slice(bytes)?;
    let mut videos = Vec::with_capacity(raw.videos.len());
    for rv in raw.videos {
        let mut units = Vec::with_capacity(rv.subtitles.len());
        for (i, s) in rv.subtitles.into_iter().enumerate() {
            let interval = TimeInterval::new(s.start, s.end)
                .map_err(|e| corpus_err(&rv.video_id, format!("subtitle {}: {e}", i + 1)))?;
            units.push(SubtitleUnit {
                index: i + 1,
                text: s.text,
                interval,
            });
        }
        videos.push(VideoDoc {
            video_id: rv.video_id,
            units,
            duration: rv.duration,
        });
    }
    let mut qa = Vec::with_capacity(raw.qa.len());
    for q in raw.qa {
        let answer = TimeInterval::new(q.answer_start, q.answer_end)
            .map_err(|e| corpus_err(&q.question_id, format!("answer: {e}")))?;
        qa.push(QaInstance {
            question_id: q.question_id,
            question: q.question,
            video_id: q.video_id,
            answer,
        });
    }
    CorpusSplit::new(raw.split, videos, qa)
}

/// Serializes a split to the corpus JSON document.
pub fn serialize_corpus(split: &CorpusSplit) -> Result<Vec<u8>> {
    let raw = RawCorpus {
        split: split.split,
        videos: split
            .videos
            .iter()
            .map(|v| RawVideo {
                video_id: v.video_id.clone(),
                duration: v.duration,
                subtitles: v
                    .units
                    .iter()
                    .map(|u| RawSubtitle {
                        start: u.interval.start,
                        end: u.interval.end,
                        text: u.text.clone(),
                    })
                    .collect(),
            })
            .collect(),
        qa: split
            .qa
            .iter()
            .map(|q| RawQa {
                question_id: q.question_id.clone(),
                question: q.question.clone(),
                video_id: q.video_id.clone(),
                answer_start: q.answer.start,
                answer_end: q.answer.end,
            })
            .collect(),
    };
    Ok(serde_json::to_vec_pretty(&raw)?)
}

/// Lowercases, drops every character that is neither alphanumeric nor
/// whitespace, and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Token range owned by one subtitle unit.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitSpan {
    /// 1-based unit ordinal in the source video.
    pub unit: usize,
    /// First token index, inclusive.
    pub first: usize,
    /// Last token index, inclusive.
    pub last: usize,
    pub interval: TimeInterval,
}

/// Start/end token indices of an answer; `start <= end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpanPoint {
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpanLabelMap {
    pub video_id: String,
    pub spans: Vec<UnitSpan>,
    pub tokens: Vec<String>,
    /// True when units were dropped to respect `max_length`.
    pub truncated: bool,
}

impl SpanLabelMap {
    /// Total token count `r`.
    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    fn unit_of_token(&self, token: usize) -> Option<&UnitSpan> {
        let i = self.spans.partition_point(|s| s.last < token);
        self.spans.get(i).filter(|s| s.first <= token)
    }

    /// Maps a ground-truth interval to the span point covering every unit
    /// that overlaps it with positive length. A zero-length interval selects
    /// the first unit containing that instant.
    pub fn time_to_span(&self, gt: &TimeInterval) -> Result<SpanPoint> {
        let hits: Vec<&UnitSpan> = if gt.length() > 0.0 {
            self.spans.iter().filter(|s| s.interval.overlap(gt) > 0.0).collect()
        } else {
            self.spans.iter().filter(|s| s.interval.contains(gt.start)).take(1).collect()
        };
        match (hits.first(), hits.last()) {
            (Some(a), Some(b)) => Ok(SpanPoint {
                start: a.first,
                end: b.last,
            }),
            _ => Err(corpus_err(
                &self.video_id,
                format!("interval {gt} overlaps no mapped subtitle unit"),
            )),
        }
    }

    /// Time interval from the start of the unit holding `point.start` to the
    /// end of the unit holding `point.end`.
    pub fn span_to_time(&self, point: SpanPoint) -> Result<TimeInterval> {
        let r = self.token_count();
        if point.end >= r {
            return Err(Error::OutOfRange { index: point.end, len: r });
        }
        if point.start > point.end {
            return Err(Error::InvalidArgument(format!(
                "span start {} after end {}",
                point.start, point.end
            )));
        }
        let a = self.unit_of_token(point.start).expect("ranges cover [0, r)");
        let b = self.unit_of_token(point.end).expect("ranges cover [0, r)");
        TimeInterval::new(a.interval.start, b.interval.end)
    }
}

/// Lays out the tokens of every unit back to back. Units whose text has no
/// tokens own no range. Units are dropped from the first one that would
/// push the total past `max_length`.
pub fn build_span_label_map(video: &VideoDoc, max_length: usize) -> Result<SpanLabelMap> {
    let mut spans = Vec::new();
    let mut tokens = Vec::new();
    let mut truncated = false;
    for u in &video.units {
        let toks = tokenize(&u.text);
        if toks.is_empty() {
            continue;
        }
        if tokens.len() + toks.len() > max_length {
            truncated = true;
            break;
        }
        spans.push(UnitSpan {
            unit: u.index,
            first: tokens.len(),
            last: tokens.len() + toks.len() - 1,
            interval: u.interval,
        });
        tokens.extend(toks);
    }
    if tokens.is_empty() {
        return Err(corpus_err(
            &video.video_id,
            format!("no subtitle tokens within max_length {max_length}"),
        ));
    }
    Ok(SpanLabelMap {
        video_id: video.video_id.clone(),
        spans,
        tokens,
        truncated,
    })
}

/// Shape of a generated corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_videos: usize,
    pub units_per_video: usize,
    pub tokens_per_unit: usize,
    pub vocab_size: usize,
    pub n_questions: usize,
    /// Longest answer, in units.
    pub max_answer_units: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_videos: 16,
            units_per_video: 8,
            tokens_per_unit: 4,
            vocab_size: 96,
            n_questions: 32,
            max_answer_units: 3,
        }
    }
}

impl SynthConfig {
    /// Tokens set aside for topics and answer markers.
    pub fn reserved_tokens(&self) -> usize {
        self.n_videos + 2 * self.units_per_video
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_videos < 2 {
            return bad(format!("need at least 2 videos, got {}", self.n_videos));
        }
        if self.units_per_video == 0 {
            return bad("units_per_video must be positive".into());
        }
        if self.tokens_per_unit < 3 {
            return bad(format!(
                "tokens_per_unit must be at least 3 (head marker, topic, tail marker), got {}",
                self.tokens_per_unit
            ));
        }
        if self.vocab_size < self.reserved_tokens() {
            return bad(format!(
                "vocab_size {} below the {} reserved topic and marker tokens",
                self.vocab_size,
                self.reserved_tokens()
            ));
        }
        if self.max_answer_units == 0 {
            return bad("max_answer_units must be positive".into());
        }
        let per_video = self.distinct_spans_per_video();
        let capacity = per_video * self.n_videos;
        if self.n_questions > capacity {
            return bad(format!(
                "{} questions exceed the {capacity} distinct answer spans available",
                self.n_questions
            ));
        }
        Ok(())
    }

    fn distinct_spans_per_video(&self) -> usize {
        let longest = self.max_answer_units.min(self.units_per_video);
        (1..=longest).map(|len| self.units_per_video - len + 1).sum()
    }
}

pub fn topic_token(video: usize) -> String {
    format!("topic{video}")
}

pub fn head_marker(k: usize) -> String {
    format!("hmark{k}")
}

pub fn tail_marker(k: usize) -> String {
    format!("tmark{k}")
}

/// Generates a seeded corpus in which every question is answerable from
/// subtitle text alone.
///
/// Video `i` owns the topic token `topic{i}`, which appears in every one of
/// its units. Unit `j` of a video opens with a head marker and closes with a
/// tail marker; within a video each marker is used by exactly one unit, but
/// the same marker pool is shared by all videos. The remaining slots are
/// filler words shared across videos. A question about units `s..=e` of
/// video `i` carries `topic{i}`, the head marker of unit `s`, the tail
/// marker of unit `e`, and two filler words. Question `q` targets video
/// `q % n_videos` and no (video, span) pair repeats.
pub fn generate_synthetic_corpus(cfg: &SynthConfig, seed: u64) -> Result<CorpusSplit> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_fillers = cfg.vocab_size - cfg.reserved_tokens();
    let filler = |rng: &mut ChaCha8Rng| -> String {
        if n_fillers == 0 {
            "the".to_string()
        } else {
            format!("w{}", rng.random_range(0..n_fillers))
        }
    };

    let mut videos = Vec::with_capacity(cfg.n_videos);
    for vi in 0..cfg.n_videos {
        let mut heads: Vec<usize> = (0..cfg.units_per_video).collect();
        let mut tails = heads.clone();
        heads.shuffle(&mut rng);
        tails.shuffle(&mut rng);
        let mut t = rng.random_range(0.0..2.0_f64).round();
        let mut units = Vec::with_capacity(cfg.units_per_video);
        for j in 0..cfg.units_per_video {
            let mut words = vec![head_marker(heads[j]), topic_token(vi)];
            for _ in 0..cfg.tokens_per_unit - 3 {
                words.push(filler(&mut rng));
            }
            words.push(tail_marker(tails[j]));
            let len = rng.random_range(2..=6) as f64;
            let interval = TimeInterval::new(t, t + len)?;
            units.push(SubtitleUnit {
                index: j + 1,
                text: words.join(" "),
                interval,
            });
            t += len;
            if rng.random_bool(0.3) {
                t += 1.0;
            }
        }
        videos.push(VideoDoc {
            video_id: format!("vid{vi:03}"),
            units,
            duration: t + 1.0,
        });
    }

    let mut used = HashSet::new();
    let mut qa = Vec::with_capacity(cfg.n_questions);
    for qi in 0..cfg.n_questions {
        let vi = qi % cfg.n_videos;
        let video = &videos[vi];
        let (s, e) = loop {
            let len = rng.random_range(1..=cfg.max_answer_units.min(cfg.units_per_video));
            let s = rng.random_range(0..=cfg.units_per_video - len);
            if used.insert((vi, s, s + len - 1)) {
                break (s, s + len - 1);
            }
        };
        let head = tokenize(&video.units[s].text).remove(0);
        let tail = tokenize(&video.units[e].text).pop().expect("unit has tokens");
        let question = format!(
            "{} {} {} {} {}",
            filler(&mut rng),
            topic_token(vi),
            head,
            filler(&mut rng),
            tail
        );
        qa.push(QaInstance {
            question_id: format!("q{qi:04}"),
            question,
            video_id: video.video_id.clone(),
            answer: TimeInterval::new(video.units[s].interval.start, video.units[e].interval.end)?,
        });
    }
    CorpusSplit::new(SplitName::Train, videos, qa)
}

/// Splits a generated question pool into train/val/test over one shared
/// video collection. Counts are taken in order from the pool.
pub fn split_questions(corpus: &CorpusSplit, counts: [usize; 3]) -> Result<[CorpusSplit; 3]> {
    let total: usize = counts.iter().sum();
    if total > corpus.qa.len() {
        return Err(Error::InvalidArgument(format!(
            "requested {total} questions from a pool of {}",
            corpus.qa.len()
        )));
    }
    let mut rest = corpus.qa.iter().cloned();
    let mut take = |n: usize| rest.by_ref().take(n).collect::<Vec<_>>();
    Ok([
        corpus.with_questions(SplitName::Train, take(counts[0]))?,
        corpus.with_questions(SplitName::Val, take(counts[1]))?,
        corpus.with_questions(SplitName::Test, take(counts[2]))?,
    ])
}

/// Splits `total` into train/val/test counts in the proportions 2710:145:155.
pub fn default_split_counts(total: usize) -> [usize; 3] {
    const RATIO: [usize; 3] = [2710, 145, 155];
    let sum: usize = RATIO.iter().sum();
    let val = (total * RATIO[1] + sum / 2) / sum;
    let test = (total * RATIO[2] + sum / 2) / sum;
    [total - val - test, val, test]
}
