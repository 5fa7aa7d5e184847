//! Cross-modal fusion of frame features with the question, condensed into a
//! single visual vector that is broadcast onto every subtitle token.
//!
//! Shapes through the pipeline, for `m` frames, `p` question tokens, `r`
//! subtitle tokens and hidden size `d`:
//!
//! ```text
//! context_query_attention   (m x d, p x d) -> m x d
//! context_query_concat      (m x d, p x d) -> m x d
//! visual_condense            m x d         -> 1 x d
//! elementwise_fuse          (1 x d, (p+r) x d) -> r x d
//! ```

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{glorot_bound, uniform, Axis, ParameterSet, Tape, Tensor, Var};

pub const SIM_W_CONTEXT: &str = "fusion.sim.w_context";
pub const SIM_W_QUERY: &str = "fusion.sim.w_query";
pub const SIM_W_PRODUCT: &str = "fusion.sim.w_product";
pub const FFN_W: &str = "fusion.cqa.ffn.w";
pub const FFN_B: &str = "fusion.cqa.ffn.b";
pub const CONCAT_W: &str = "fusion.cqc.conv.w";
pub const CONCAT_B: &str = "fusion.cqc.conv.b";
pub const CONDENSE_SCORE_W: &str = "fusion.condense.score.w";
pub const CONDENSE_SCORE_B: &str = "fusion.condense.score.b";
pub const CONDENSE_B: &str = "fusion.condense.b";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    /// `S[i, j] = V[i] . Q[j] / sqrt(d)`.
    #[default]
    Dot,
    /// `S[i, j] = w_c . V[i] + w_q . Q[j] + w_p . (V[i] * Q[j])`.
    Trilinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub similarity: Similarity,
    /// Dropout on the frame features before condensation.
    pub dropout: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            similarity: Similarity::Dot,
            dropout: 0.1,
        }
    }
}

pub fn init_params(d: usize, cfg: &FusionConfig, params: &mut ParameterSet, rng: &mut ChaCha8Rng) -> Result<()> {
    if cfg.similarity == Similarity::Trilinear {
        let b = glorot_bound(d, 1);
        params.insert(SIM_W_CONTEXT, uniform(rng, d, 1, b))?;
        params.insert(SIM_W_QUERY, uniform(rng, d, 1, b))?;
        params.insert(SIM_W_PRODUCT, uniform(rng, 1, d, b))?;
    }
    params.insert(FFN_W, uniform(rng, 4 * d, d, glorot_bound(4 * d, d)))?;
    params.insert(FFN_B, Tensor::zeros(1, d))?;
    params.insert(CONCAT_W, uniform(rng, 2 * d, d, glorot_bound(2 * d, d)))?;
    params.insert(CONCAT_B, Tensor::zeros(1, d))?;
    params.insert(CONDENSE_SCORE_W, uniform(rng, d, 1, glorot_bound(d, 1)))?;
    params.insert(CONDENSE_SCORE_B, Tensor::zeros(1, 1))?;
    params.insert(CONDENSE_B, Tensor::zeros(1, d))?;
    Ok(())
}

fn check_width(tape: &Tape, a: Var, b: Var, op: &'static str) -> Result<usize> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa[1] != sb[1] {
        return Err(Error::ShapeMismatch { op, lhs: sa, rhs: sb });
    }
    Ok(sa[1])
}

/// Broadcasts a `1 x c` row to `n x c`.
fn repeat_row(tape: &mut Tape, row: Var, n: usize) -> Result<Var> {
    let ones = tape.constant(Tensor::full(n, 1, 1.0));
    tape.matmul(ones, row)
}

fn similarity(tape: &mut Tape, params: &ParameterSet, cfg: &FusionConfig, v: Var, q: Var) -> Result<Var> {
    let d = tape.shape(v)[1];
    match cfg.similarity {
        Similarity::Dot => {
            let qt = tape.transpose(q);
            let s = tape.matmul(v, qt)?;
            Ok(tape.scale(s, 1.0 / (d as f64).sqrt()))
        }
        Similarity::Trilinear => {
            let (m, p) = (tape.shape(v)[0], tape.shape(q)[0]);
            let wc = tape.param(params, SIM_W_CONTEXT)?;
            let wq = tape.param(params, SIM_W_QUERY)?;
            let wp = tape.param(params, SIM_W_PRODUCT)?;
            let ones_p = tape.constant(Tensor::full(1, p, 1.0));
            let ones_m = tape.constant(Tensor::full(m, 1, 1.0));
            let vc = tape.matmul(v, wc)?;
            let ctx = tape.matmul(vc, ones_p)?;
            let qc = tape.matmul(q, wq)?;
            let qct = tape.transpose(qc);
            let qry = tape.matmul(ones_m, qct)?;
            let wp_rows = repeat_row(tape, wp, m)?;
            let vw = tape.mul(v, wp_rows)?;
            let qt = tape.transpose(q);
            let prod = tape.matmul(vw, qt)?;
            let s = tape.add(ctx, qry)?;
            tape.add(s, prod)
        }
    }
}

/// Context-query attention. With `S_r` the row-wise and `S_c` the
/// column-wise softmax of the similarity matrix:
///
/// ```text
/// A  = S_r Q                 (m x d)
/// B  = S_c S_r^T V           (m x d)
/// V' = relu([V; A; V*A; V*B] W + b)
/// ```
pub fn context_query_attention(
    tape: &mut Tape,
    params: &ParameterSet,
    cfg: &FusionConfig,
    visual: Var,
    query: Var,
) -> Result<Var> {
    check_width(tape, visual, query, "context_query_attention")?;
    let s = similarity(tape, params, cfg, visual, query)?;
    let s_r = tape.softmax(s, Axis::Cols);
    let s_c = tape.softmax(s, Axis::Rows);
    let a = tape.matmul(s_r, query)?;
    let s_rt = tape.transpose(s_r);
    let cc = tape.matmul(s_c, s_rt)?;
    let b = tape.matmul(cc, visual)?;
    let va = tape.mul(visual, a)?;
    let vb = tape.mul(visual, b)?;
    let cat = tape.concat(&[visual, a, va, vb], Axis::Cols)?;
    let w = tape.param(params, FFN_W)?;
    let bias = tape.param(params, FFN_B)?;
    let h = tape.matmul(cat, w)?;
    let h = tape.add_row(h, bias)?;
    Ok(tape.relu(h))
}

/// Context-query concatenation: cross-attention from frames to question
/// tokens, concatenated with the mean-pooled question on every row, then a
/// kernel-1 convolution `2d -> d`.
pub fn context_query_concat(tape: &mut Tape, params: &ParameterSet, visual: Var, query: Var) -> Result<Var> {
    let d = check_width(tape, visual, query, "context_query_concat")?;
    let m = tape.shape(visual)[0];
    let qt = tape.transpose(query);
    let scores = tape.matmul(visual, qt)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax(scores, Axis::Cols);
    let attended = tape.matmul(weights, query)?;
    let pooled = tape.mean(query, Axis::Rows);
    let pooled = repeat_row(tape, pooled, m)?;
    let cat = tape.concat(&[attended, pooled], Axis::Cols)?;
    let w = tape.param(params, CONCAT_W)?;
    let b = tape.param(params, CONCAT_B)?;
    let h = tape.matmul(cat, w)?;
    tape.add_row(h, b)
}

/// `out[k] = sum_i weights[i] * frames[i, k] + bias[k]` with `weights`
/// an `m x 1` column.
pub fn condense_with_weights(tape: &mut Tape, frames: Var, weights: Var, bias: Var) -> Result<Var> {
    let wt = tape.transpose(weights);
    let pooled = tape.matmul(wt, frames)?;
    tape.add_row(pooled, bias)
}

/// Dropout, then a kernel-1 convolution `d -> 1` scores each frame; the
/// scores are softmaxed over frames and used to pool the frames into one
/// `1 x d` row.
pub fn visual_condense(
    tape: &mut Tape,
    params: &ParameterSet,
    cfg: &FusionConfig,
    frames: Var,
    train: bool,
    seed: u64,
) -> Result<Var> {
    let dropped = tape.dropout(frames, cfg.dropout, train, seed)?;
    let sw = tape.param(params, CONDENSE_SCORE_W)?;
    let sb = tape.param(params, CONDENSE_SCORE_B)?;
    let scores = tape.matmul(dropped, sw)?;
    let scores = tape.add_row(scores, sb)?;
    let weights = tape.softmax(scores, Axis::Rows);
    let bias = tape.param(params, CONDENSE_B)?;
    condense_with_weights(tape, dropped, weights, bias)
}

/// Drops the question rows of the text features and adds the condensed
/// visual row to every remaining row.
pub fn elementwise_fuse(tape: &mut Tape, condensed: Var, text: Var, question_len: usize) -> Result<Var> {
    let [n, d] = tape.shape(text);
    if question_len >= n {
        return Err(Error::InvalidArgument(format!(
            "question length {question_len} leaves no subtitle rows in {n}"
        )));
    }
    let subtitles = tape.slice(text, question_len..n, 0..d)?;
    tape.add_row(subtitles, condensed)
}

/// Full fusion pipeline: projected frames `m x d` and text `(p+r) x d` to
/// fused subtitle features `r x d`.
#[allow(clippy::too_many_arguments)]
pub fn fuse(
    tape: &mut Tape,
    params: &ParameterSet,
    cfg: &FusionConfig,
    frames: Var,
    text: Var,
    question_len: usize,
    train: bool,
    seed: u64,
) -> Result<Var> {
    let d = tape.shape(text)[1];
    let query = tape.slice(text, 0..question_len, 0..d)?;
    let v1 = context_query_attention(tape, params, cfg, frames, query)?;
    let v2 = context_query_concat(tape, params, v1, query)?;
    let v3 = visual_condense(tape, params, cfg, v2, train, seed)?;
    elementwise_fuse(tape, v3, text, question_len)
}
