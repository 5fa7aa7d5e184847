//! Okapi BM25 over whole-video subtitle text.

use std::collections::HashMap;

use crate::corpus::{tokenize, VideoDoc};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Bm25Index {
    pub k1: f64,
    pub b: f64,
    video_ids: Vec<String>,
    term_freqs: Vec<HashMap<String, usize>>,
    doc_lens: Vec<usize>,
    doc_freq: HashMap<String, usize>,
    avgdl: f64,
}

/// `ln((N - df + 0.5) / (df + 0.5) + 1)`.
pub fn idf(n: usize, df: usize) -> f64 {
    let (n, df) = (n as f64, df as f64);
    ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
}

pub fn bm25_build(videos: &[VideoDoc]) -> Result<Bm25Index> {
    Bm25Index::with_params(videos, 1.2, 0.75)
}

impl Bm25Index {
    pub fn with_params(videos: &[VideoDoc], k1: f64, b: f64) -> Result<Self> {
        if videos.is_empty() {
            return Err(Error::InvalidArgument("BM25 index needs at least one video".into()));
        }
        let mut term_freqs = Vec::with_capacity(videos.len());
        let mut doc_lens = Vec::with_capacity(videos.len());
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        for v in videos {
            let mut tf: HashMap<String, usize> = HashMap::new();
            let mut len = 0;
            for u in &v.units {
                for t in tokenize(&u.text) {
                    *tf.entry(t).or_default() += 1;
                    len += 1;
                }
            }
            for t in tf.keys() {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
            term_freqs.push(tf);
            doc_lens.push(len);
        }
        let avgdl = doc_lens.iter().sum::<usize>() as f64 / videos.len() as f64;
        Ok(Self {
            k1,
            b,
            video_ids: videos.iter().map(|v| v.video_id.clone()).collect(),
            term_freqs,
            doc_lens,
            doc_freq,
            avgdl,
        })
    }

    pub fn n_docs(&self) -> usize {
        self.video_ids.len()
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.doc_freq.get(term).copied().unwrap_or(0)
    }

    pub fn idf(&self, term: &str) -> f64 {
        idf(self.n_docs(), self.doc_freq(term))
    }

    /// Score of document `doc` for the query tokens; repeated query tokens
    /// count once per occurrence.
    pub fn score(&self, query: &[String], doc: usize) -> f64 {
        let len_norm = if self.avgdl > 0.0 {
            1.0 - self.b + self.b * self.doc_lens[doc] as f64 / self.avgdl
        } else {
            1.0
        };
        query
            .iter()
            .map(|t| {
                let tf = self.term_freqs[doc].get(t).copied().unwrap_or(0) as f64;
                if tf == 0.0 {
                    return 0.0;
                }
                self.idf(t) * tf * (self.k1 + 1.0) / (tf + self.k1 * len_norm)
            })
            .sum()
    }

    pub fn video_ids(&self) -> &[String] {
        &self.video_ids
    }
}

/// All videos as `(index into the indexed videos, score)`, best first, ties
/// by video id.
pub fn bm25_rank(question: &str, index: &Bm25Index) -> Vec<(usize, f64)> {
    let query = tokenize(question);
    let mut ranked: Vec<(usize, f64)> = (0..index.n_docs()).map(|i| (i, index.score(&query, i))).collect();
    ranked.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| index.video_ids[a.0].cmp(&index.video_ids[b.0]))
    });
    ranked
}
