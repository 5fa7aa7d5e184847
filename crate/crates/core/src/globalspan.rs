//! The global-span matrix: one logit per candidate answer span, shared by
//! answer localization within a video and retrieval across videos.
//!
//! Fused subtitle features `r x d` are split by a `d -> 2d` linear layer
//! into tail-axis features `X` and head-axis features `Y`, each shifted by a
//! position table. Cell `(y, x)` of the `r x r` matrix scores the span that
//! starts at token `y` and ends at token `x`:
//!
//! ```text
//! logit[y, x] = (Y_hat[y] . X_hat[x]) / d     for y <= x
//! logit[y, x] = SENTINEL                       for y >  x
//! ```
//!
//! The matrix is flattened row-major, so cell `(y, x)` sits at `y * r + x`.
//! Localization is a softmax over one video's cells; the contrastive
//! objective softmaxes over the positive's cells followed by the cells of
//! every negative video, with the single gold cell as target.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SpanPoint;
use crate::error::{Error, Result};
use crate::numcore::{glorot_bound, is_masked, uniform, Axis, ParameterSet, Tape, Tensor, Var, SENTINEL};

pub const ES_W: &str = "span.es.w";
pub const ES_B: &str = "span.es.b";
pub const POS_TABLE: &str = "span.pos";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionKind {
    /// Fixed sinusoid table.
    #[default]
    Sinusoid,
    /// Trainable table initialized to the sinusoid.
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpanConfig {
    pub position: PositionKind,
    /// Rows of the learned position table; unused for the sinusoid.
    pub max_positions: usize,
}

impl Default for SpanConfig {
    fn default() -> Self {
        Self {
            position: PositionKind::Sinusoid,
            max_positions: 1300,
        }
    }
}

pub fn init_params(d: usize, cfg: &SpanConfig, params: &mut ParameterSet, rng: &mut ChaCha8Rng) -> Result<()> {
    params.insert(ES_W, uniform(rng, d, 2 * d, glorot_bound(d, 2 * d)))?;
    params.insert(ES_B, Tensor::zeros(1, 2 * d))?;
    if cfg.position == PositionKind::Learned {
        params.insert(POS_TABLE, position_table(cfg.max_positions, d))?;
    }
    Ok(())
}

/// `P[j, 2k] = sin(j / 10000^(2k/d))`, `P[j, 2k+1] = cos(j / 10000^(2k/d))`.
pub fn position_table(rows: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(rows, d);
    for j in 0..rows {
        for k in (0..d).step_by(2) {
            let angle = j as f64 / 10000f64.powf(k as f64 / d as f64);
            t.set(j, k, angle.sin());
            if k + 1 < d {
                t.set(j, k + 1, angle.cos());
            }
        }
    }
    t
}

/// Tail-axis and head-axis features of one video, before and after the
/// position shift.
#[derive(Clone, Copy, Debug)]
pub struct SplitFeatures {
    pub x: Var,
    pub y: Var,
    pub x_hat: Var,
    pub y_hat: Var,
    pub positions: Var,
}

/// Linear `d -> 2d` over each row; the first `d` outputs form `X`, the
/// last `d` form `Y`.
pub fn es_layer(tape: &mut Tape, params: &ParameterSet, fused: Var) -> Result<(Var, Var)> {
    let w = tape.param(params, ES_W)?;
    let b = tape.param(params, ES_B)?;
    let d = tape.shape(fused)[1];
    if tape.shape(w) != [d, 2 * d] {
        return Err(Error::ShapeMismatch {
            op: "es_layer",
            lhs: tape.shape(fused),
            rhs: tape.shape(w),
        });
    }
    let h = tape.matmul(fused, w)?;
    let h = tape.add_row(h, b)?;
    let r = tape.shape(h)[0];
    let x = tape.slice(h, 0..r, 0..d)?;
    let y = tape.slice(h, 0..r, d..2 * d)?;
    Ok((x, y))
}

/// Runs the split layer and adds positions to both axes.
pub fn split_features(tape: &mut Tape, params: &ParameterSet, cfg: &SpanConfig, fused: Var) -> Result<SplitFeatures> {
    let (x, y) = es_layer(tape, params, fused)?;
    let [r, d] = tape.shape(x);
    let positions = match cfg.position {
        PositionKind::Sinusoid => tape.constant(position_table(r, d)),
        PositionKind::Learned => {
            let table = tape.param(params, POS_TABLE)?;
            let rows = tape.shape(table)[0];
            if r > rows {
                return Err(Error::InvalidArgument(format!(
                    "{r} tokens exceed the {rows}-row position table"
                )));
            }
            tape.slice(table, 0..r, 0..d)?
        }
    };
    let x_hat = tape.add(x, positions)?;
    let y_hat = tape.add(y, positions)?;
    Ok(SplitFeatures {
        x,
        y,
        x_hat,
        y_hat,
        positions,
    })
}

/// Lower-triangle mask, row-major: true where `y > x`.
pub fn invalid_mask(r: usize) -> Vec<bool> {
    (0..r * r).map(|i| i / r > i % r).collect()
}

/// Builds the `r x r` logit matrix on the tape with rows from the head
/// features and columns from the tail features.
pub fn build_matrix_on_tape(tape: &mut Tape, x_hat: Var, y_hat: Var) -> Result<Var> {
    if tape.shape(x_hat) != tape.shape(y_hat) {
        return Err(Error::ShapeMismatch {
            op: "build_matrix",
            lhs: tape.shape(x_hat),
            rhs: tape.shape(y_hat),
        });
    }
    let [r, d] = tape.shape(x_hat);
    let xt = tape.transpose(x_hat);
    let dots = tape.matmul(y_hat, xt)?;
    let scaled = tape.scale(dots, 1.0 / d as f64);
    tape.masked_fill(scaled, &invalid_mask(r), SENTINEL)
}

/// A materialized global-span matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalSpanMatrix {
    pub r: usize,
    /// `r x r`, row = head (start) token, column = tail (end) token.
    pub logits: Tensor,
}

impl GlobalSpanMatrix {
    pub fn new(logits: Tensor) -> Result<Self> {
        let [r, c] = logits.shape();
        if r != c || r == 0 {
            return Err(Error::InvalidArgument(format!("span matrix must be square and non-empty, got {r}x{c}")));
        }
        let mut logits = logits;
        for (i, v) in logits.data_mut().iter_mut().enumerate() {
            if i / r > i % r {
                *v = SENTINEL;
            }
        }
        Ok(Self { r, logits })
    }

    /// Value-level construction from materialized `X_hat` and `Y_hat`.
    pub fn build(x_hat: &Tensor, y_hat: &Tensor) -> Result<Self> {
        let mut tape = Tape::new();
        let x = tape.constant(x_hat.clone());
        let y = tape.constant(y_hat.clone());
        let m = build_matrix_on_tape(&mut tape, x, y)?;
        Ok(Self {
            r: x_hat.rows(),
            logits: tape.value(m).clone(),
        })
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        y <= x && x < self.r
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.logits.get(y, x)
    }

    /// Row-major flatten; masked cells keep the sentinel.
    pub fn flatten(&self) -> Vec<f64> {
        self.logits.data().to_vec()
    }

    pub fn valid_count(&self) -> usize {
        self.logits.data().iter().filter(|v| !is_masked(**v)).count()
    }

    /// Highest-scoring valid cell. Ties go to the smallest head, then the
    /// smallest tail.
    pub fn decode(&self) -> DecodedSpan {
        let mut best = DecodedSpan {
            point: SpanPoint { start: 0, end: 0 },
            score: self.get(0, 0),
        };
        for y in 0..self.r {
            for x in y..self.r {
                let v = self.get(y, x);
                if v > best.score {
                    best = DecodedSpan {
                        point: SpanPoint { start: y, end: x },
                        score: v,
                    };
                }
            }
        }
        best
    }

    /// JSON dump for inspection tools: `{"r": r, "logits": [...], "mask": [...]}`
    /// where `mask[i]` is true for valid cells.
    pub fn to_debug_json(&self) -> serde_json::Value {
        let logits: Vec<Option<f64>> = self
            .logits
            .data()
            .iter()
            .map(|v| if is_masked(*v) { None } else { Some(*v) })
            .collect();
        let mask: Vec<bool> = (0..self.r * self.r).map(|i| i / self.r <= i % self.r).collect();
        serde_json::json!({ "r": self.r, "logits": logits, "mask": mask })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodedSpan {
    pub point: SpanPoint,
    pub score: f64,
}

/// Flat index of cell `(y, x)` in an `r x r` matrix.
pub fn flat_index(point: SpanPoint, r: usize) -> Result<usize> {
    if point.end >= r {
        return Err(Error::OutOfRange { index: point.end, len: r });
    }
    if point.start > point.end {
        return Err(Error::InvalidArgument(format!(
            "span point ({}, {}) lies in the masked region",
            point.start, point.end
        )));
    }
    Ok(point.start * r + point.end)
}

pub fn unflatten_index(index: usize, r: usize) -> SpanPoint {
    SpanPoint {
        start: index / r,
        end: index % r,
    }
}

/// Localization loss: cross-entropy of the flattened matrix against the
/// gold cell.
pub fn predictor_loss(tape: &mut Tape, matrix: Var, target: SpanPoint) -> Result<Var> {
    let r = tape.shape(matrix)[0];
    let index = flat_index(target, r)?;
    let flat = tape.flatten(matrix);
    tape.cross_entropy(flat, index)
}

/// Positive and negative matrices flattened end to end.
#[derive(Clone, Debug)]
pub struct GlobalLogits {
    pub logits: Var,
    /// Index of the gold cell; always inside the first segment.
    pub target: usize,
    /// Start offset of each segment; segment 0 is the positive.
    pub offsets: Vec<usize>,
}

/// Concatenates the positive matrix with each negative. Every negative cell
/// is a non-target, and masked cells carry the sentinel, so matrices of
/// different sizes need no further padding.
pub fn contrastive_concat(tape: &mut Tape, positive: Var, negatives: &[Var], target: SpanPoint) -> Result<GlobalLogits> {
    let r = tape.shape(positive)[0];
    let target = flat_index(target, r)?;
    let mut parts = Vec::with_capacity(1 + negatives.len());
    let mut offsets = Vec::with_capacity(1 + negatives.len());
    let mut offset = 0;
    for &m in std::iter::once(&positive).chain(negatives) {
        offsets.push(offset);
        let flat = tape.flatten(m);
        offset += tape.shape(flat)[1];
        parts.push(flat);
    }
    let logits = tape.concat(&parts, Axis::Cols)?;
    Ok(GlobalLogits {
        logits,
        target,
        offsets,
    })
}

pub fn contrastive_loss(tape: &mut Tape, global: &GlobalLogits) -> Result<Var> {
    tape.cross_entropy(global.logits, global.target)
}

/// `Loss = Loss1 + Loss2`.
pub fn total_loss(tape: &mut Tape, predictor: Var, contrastive: Var) -> Result<Var> {
    tape.add(predictor, contrastive)
}
