//! Adaptive tail–head alignment.
//!
//! At every layer the patch tokens are scored against the episode's class
//! text embeddings `T'`. The `⌊Lρ⌋` best-matching tokens (heads) are pulled
//! towards their most similar text row, and the `⌊Lγ⌋` worst-matching tokens
//! (tails) are pushed away from their least similar one:
//!
//! ```text
//! ṽ_i = v_i + α_l · t'_{j⁺(i)}   for i ∈ heads
//! ṽ_i = v_i − β_l · t'_{j⁻(i)}   for i ∈ tails
//! ```
//!
//! Selection indices are recomputed on every forward pass and treated as
//! constants; gradients flow through the arithmetic into `α`, `β` and the
//! token values.

use serde::{Deserialize, Serialize};

use crate::backbone::{ProjectedText, TokenHook, TokenSequence};
use crate::error::{Error, Result};
use crate::tensor::{dot, norm, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    None,
    Full,
    PushTailOnly,
    WeightedAvg,
    LossConstraint,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::None,
        Variant::Full,
        Variant::PushTailOnly,
        Variant::WeightedAvg,
        Variant::LossConstraint,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::Full => "full",
            Variant::PushTailOnly => "push_tail_only",
            Variant::WeightedAvg => "weighted_avg",
            Variant::LossConstraint => "loss_constraint",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }

    /// Whether the hook modifies tokens at all.
    pub fn modulates(&self) -> bool {
        matches!(self, Variant::Full | Variant::PushTailOnly | Variant::WeightedAvg)
    }

    fn pulls(&self) -> bool {
        matches!(self, Variant::Full | Variant::WeightedAvg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    /// Negated Euclidean distance, so larger still means more similar.
    Euclidean,
}

impl Metric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            _ => Err(Error::config(format!("unknown metric {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AthaParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub rho: f64,
    pub gamma: f64,
    pub variant: Variant,
    pub metric: Metric,
    pub learnable: bool,
    /// Weights of the pull/push alignment losses (loss-constraint variant).
    #[serde(default = "default_lambda")]
    pub lambda_pull: f64,
    #[serde(default = "default_lambda")]
    pub lambda_push: f64,
}

fn default_lambda() -> f64 {
    0.1
}

/// Layer that starts with a non-zero pull strength: block 8 of 12, scaled to
/// `depth`.
pub fn pull_layer(depth: usize) -> usize {
    ((8.0 * depth as f64 / 12.0).round() as usize).min(depth.saturating_sub(1))
}

impl AthaParams {
    /// Default initialisation: `α = 0.8` at [`pull_layer`], zero elsewhere;
    /// `β = 0.01` everywhere; `ρ = γ = 0.1`.
    pub fn new(depth: usize, variant: Variant) -> Self {
        let mut alpha = vec![0.0; depth];
        if depth > 0 {
            alpha[pull_layer(depth)] = 0.8;
        }
        AthaParams {
            alpha,
            beta: vec![0.01; depth],
            rho: 0.1,
            gamma: 0.1,
            variant,
            metric: Metric::Cosine,
            learnable: true,
            lambda_pull: default_lambda(),
            lambda_push: default_lambda(),
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.alpha.len() != depth || self.beta.len() != depth {
            return Err(Error::config(format!(
                "alpha/beta have {}/{} entries for depth {depth}",
                self.alpha.len(),
                self.beta.len()
            )));
        }
        check_ratios(self.rho, self.gamma)?;
        if self.alpha.iter().chain(&self.beta).any(|x| !x.is_finite()) {
            return Err(Error::config("alpha and beta must be finite"));
        }
        if !(self.lambda_pull.is_finite() && self.lambda_push.is_finite()) {
            return Err(Error::config("loss weights must be finite"));
        }
        Ok(())
    }
}

fn check_ratios(rho: f64, gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) || !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config(format!("rho {rho} and gamma {gamma} must lie in [0, 1]")));
    }
    if rho + gamma > 1.0 + 1e-12 {
        return Err(Error::config(format!("rho + gamma = {} exceeds 1", rho + gamma)));
    }
    Ok(())
}

/// `⌊L·ratio⌋`, robust to ratios like `0.29` whose binary value sits just
/// below the decimal one.
pub fn selection_count(l: usize, ratio: f64) -> usize {
    ((l as f64) * ratio + 1e-9).floor() as usize
}

/// Head/tail selection for one image. Token indices are sequence rows
/// (`1..=L`), never the `[CLS]` row 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub head: Vec<usize>,
    pub tail: Vec<usize>,
    /// Best similarity of every patch token, indexed by `row - 1`.
    pub s_max: Vec<f64>,
    pub j_plus: Vec<usize>,
    pub j_minus: Vec<usize>,
}

/// `L×N` similarities between patch rows and text rows.
pub fn similarity_matrix(patches: &Tensor, text: &Tensor, metric: Metric) -> Result<Tensor> {
    let d = patches.last_dim();
    if text.last_dim() != d || patches.rank() != 2 || text.rank() != 2 {
        return Err(Error::Shape {
            op: "token_text_similarity",
            left: patches.shape().to_vec(),
            right: text.shape().to_vec(),
        });
    }
    let (l, n) = (patches.rows(), text.rows());
    let mut out = Vec::with_capacity(l * n);
    match metric {
        Metric::Cosine => {
            let text_norms: Vec<f64> = (0..n).map(|j| norm(text.row(j))).collect();
            if text_norms.iter().any(|&x| x == 0.0) {
                return Err(Error::DegenerateVector {
                    op: "token_text_similarity",
                });
            }
            for i in 0..l {
                let v = patches.row(i);
                let nv = norm(v);
                if nv == 0.0 {
                    return Err(Error::DegenerateVector {
                        op: "token_text_similarity",
                    });
                }
                for j in 0..n {
                    out.push(dot(v, text.row(j)) / (nv * text_norms[j]));
                }
            }
        }
        Metric::Euclidean => {
            for i in 0..l {
                let v = patches.row(i);
                for j in 0..n {
                    let d2: f64 = v.iter().zip(text.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                    out.push(-d2.sqrt());
                }
            }
        }
    }
    Tensor::new(vec![l, n], out)
}

pub fn token_text_similarity(seq: &TokenSequence, text: &ProjectedText, metric: Metric) -> Result<Tensor> {
    similarity_matrix(&seq.patch_tokens()?, &text.rows, metric)
}

fn arg_extreme(row: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = 0;
    for j in 1..row.len() {
        if better(row[j], row[best]) {
            best = j;
        }
    }
    best
}

/// Top `⌊Lρ⌋` tokens by `s_max` become heads and the bottom `⌊Lγ⌋` of the
/// rest become tails. Ties go to the lower token index, which therefore wins
/// the more extreme set; class ties go to the lower class index.
pub fn select_head_tail(s: &Tensor, rho: f64, gamma: f64) -> Result<SelectionResult> {
    check_ratios(rho, gamma)?;
    if s.rank() != 2 || s.last_dim() == 0 {
        return Err(Error::EmptyAxis { op: "select_head_tail" });
    }
    let (l, n) = (s.rows(), s.last_dim());
    let rows: Vec<&[f64]> = (0..l).map(|i| &s.data()[i * n..(i + 1) * n]).collect();
    let s_max: Vec<f64> = rows.iter().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    let k = selection_count(l, rho);
    let r = selection_count(l, gamma).min(l - k);

    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| s_max[b].total_cmp(&s_max[a]).then(a.cmp(&b)));
    let head: Vec<usize> = order[..k].to_vec();
    let mut rest: Vec<usize> = order[k..].to_vec();
    rest.sort_by(|&a, &b| s_max[a].total_cmp(&s_max[b]).then(a.cmp(&b)));
    let tail: Vec<usize> = rest[..r].to_vec();

    Ok(SelectionResult {
        j_plus: head.iter().map(|&i| arg_extreme(rows[i], |a, b| a > b)).collect(),
        j_minus: tail.iter().map(|&i| arg_extreme(rows[i], |a, b| a < b)).collect(),
        head: head.into_iter().map(|i| i + 1).collect(),
        tail: tail.into_iter().map(|i| i + 1).collect(),
        s_max,
    })
}

/// `tokens[rows] += scale · text[classes]` on the tape.
fn add_text_rows(tape: &mut Tape, tokens: Var, text: Var, rows: &[usize], classes: &[usize], scale: Var, sign: f64) -> Result<Var> {
    if rows.is_empty() {
        return Ok(tokens);
    }
    let t = tape.gather_rows(text, classes)?;
    let upd = tape.scale_by(t, scale)?;
    let upd = if sign < 0.0 { tape.scale(upd, -1.0)? } else { upd };
    tape.index_add_rows(tokens, rows, upd)
}

fn add_weighted_text(tape: &mut Tape, tokens: Var, text: Var, rows: &[usize], weights: Tensor, scale: Var, sign: f64) -> Result<Var> {
    if rows.is_empty() {
        return Ok(tokens);
    }
    let w = tape.constant(weights);
    let t = tape.matmul(w, text)?;
    let upd = tape.scale_by(t, scale)?;
    let upd = if sign < 0.0 { tape.scale(upd, -1.0)? } else { upd };
    tape.index_add_rows(tokens, rows, upd)
}

fn softmax_rows(s: &Tensor, rows: &[usize], sign: f64) -> Tensor {
    let n = s.last_dim();
    let mut out = Vec::with_capacity(rows.len() * n);
    for &i in rows {
        let row: Vec<f64> = s.row(i).iter().map(|x| sign * x).collect();
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|x| x / z));
    }
    Tensor::new(vec![rows.len(), n], out).expect("row-major weights")
}

fn run_single(
    seq: &TokenSequence,
    text: &ProjectedText,
    alpha: f64,
    beta: f64,
    f: impl FnOnce(&mut Tape, Var, Var, Var, Var) -> Result<Var>,
) -> Result<TokenSequence> {
    let mut tape = Tape::new();
    let tokens = tape.constant(seq.tokens.clone());
    let t = tape.constant(text.rows.clone());
    let a = tape.constant(Tensor::scalar(alpha));
    let b = tape.constant(Tensor::scalar(beta));
    let out = f(&mut tape, tokens, t, a, b)?;
    Ok(TokenSequence {
        tokens: tape.value(out).clone(),
        layer: seq.layer,
    })
}

/// Applies the pull to heads and the push to tails; every other row,
/// including `[CLS]`, is copied unchanged.
pub fn modulate(seq: &TokenSequence, text: &ProjectedText, sel: &SelectionResult, alpha: f64, beta: f64) -> Result<TokenSequence> {
    run_single(seq, text, alpha, beta, |tape, tokens, t, a, b| {
        let x = add_text_rows(tape, tokens, t, &sel.head, &sel.j_plus, a, 1.0)?;
        add_text_rows(tape, x, t, &sel.tail, &sel.j_minus, b, -1.0)
    })
}

/// Ablation: heads move along the softmax(S)-weighted mean of all text rows,
/// tails against the softmax(−S)-weighted mean. The weights enter the tape
/// as constants, like the selection itself.
pub fn weighted_avg_modulate(
    seq: &TokenSequence,
    text: &ProjectedText,
    s: &Tensor,
    sel: &SelectionResult,
    alpha: f64,
    beta: f64,
) -> Result<TokenSequence> {
    let head_rows: Vec<usize> = sel.head.iter().map(|i| i - 1).collect();
    let tail_rows: Vec<usize> = sel.tail.iter().map(|i| i - 1).collect();
    let wh = softmax_rows(s, &head_rows, 1.0);
    let wt = softmax_rows(s, &tail_rows, -1.0);
    run_single(seq, text, alpha, beta, |tape, tokens, t, a, b| {
        let x = add_weighted_text(tape, tokens, t, &sel.head, wh, a, 1.0)?;
        add_weighted_text(tape, x, t, &sel.tail, wt, b, -1.0)
    })
}

/// `L_pull = −mean_{heads} S[i, j⁺]`, `L_push = mean_{tails} S[i, j⁻]`;
/// empty sets contribute zero.
pub fn alignment_losses(s: &Tensor, sel: &SelectionResult) -> (f64, f64) {
    let mean = |rows: &[usize], cols: &[usize]| {
        if rows.is_empty() {
            0.0
        } else {
            rows.iter().zip(cols).map(|(&i, &j)| s.at2(i - 1, j)).sum::<f64>() / rows.len() as f64
        }
    };
    (-mean(&sel.head, &sel.j_plus), mean(&sel.tail, &sel.j_minus))
}

/// One image's selection at one layer, as written to trace files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    pub layer: usize,
    pub image: usize,
    #[serde(flatten)]
    pub selection: SelectionResult,
}

/// Selection for every image in a batched `(B·(L+1))×D` token matrix.
pub fn select_batch(tokens: &Tensor, text: &Tensor, seq_len: usize, params: &AthaParams) -> Result<Vec<(Tensor, SelectionResult)>> {
    let d = tokens.last_dim();
    let batch = tokens.rows() / seq_len;
    (0..batch)
        .map(|b| {
            let start = (b * seq_len + 1) * d;
            let patches = Tensor::new(vec![seq_len - 1, d], tokens.data()[start..start + (seq_len - 1) * d].to_vec())?;
            let s = similarity_matrix(&patches, text, params.metric)?;
            let sel = select_head_tail(&s, params.rho, params.gamma)?;
            Ok((s, sel))
        })
        .collect()
}

/// The per-layer token transform for [`crate::backbone::encode_images`].
pub struct AthaHook<'a> {
    pub params: &'a AthaParams,
    /// `T'` as a constant on the tape.
    pub text: Var,
    /// `α` and `β` as `[depth]` vectors, trainable or constant.
    pub alpha: Var,
    pub beta: Var,
    pub seq_len: usize,
    pub trace: Option<Vec<LayerTrace>>,
}

impl<'a> AthaHook<'a> {
    pub fn new(tape: &mut Tape, params: &'a AthaParams, text: &Tensor, seq_len: usize, trainable: bool) -> Self {
        let text = tape.constant(text.clone());
        let a = Tensor::vector(params.alpha.clone());
        let b = Tensor::vector(params.beta.clone());
        let (alpha, beta) = if trainable && params.learnable {
            (tape.param(a), tape.param(b))
        } else {
            (tape.constant(a), tape.constant(b))
        };
        AthaHook {
            params,
            text,
            alpha,
            beta,
            seq_len,
            trace: None,
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }
}

impl TokenHook for AthaHook<'_> {
    fn apply(&mut self, tape: &mut Tape, layer: usize, tokens: Var, _batch: usize) -> Result<Var> {
        let variant = self.params.variant;
        if !variant.modulates() {
            return Ok(tokens);
        }
        let text_values = tape.value(self.text).clone();
        let selections = select_batch(tape.value(tokens), &text_values, self.seq_len, self.params)?;
        let mut head_rows = Vec::new();
        let mut j_plus = Vec::new();
        let mut tail_rows = Vec::new();
        let mut j_minus = Vec::new();
        let mut head_w = Vec::new();
        let mut tail_w = Vec::new();
        for (b, (s, sel)) in selections.iter().enumerate() {
            let base = b * self.seq_len;
            head_rows.extend(sel.head.iter().map(|i| base + i));
            tail_rows.extend(sel.tail.iter().map(|i| base + i));
            j_plus.extend_from_slice(&sel.j_plus);
            j_minus.extend_from_slice(&sel.j_minus);
            if variant == Variant::WeightedAvg {
                let h: Vec<usize> = sel.head.iter().map(|i| i - 1).collect();
                let t: Vec<usize> = sel.tail.iter().map(|i| i - 1).collect();
                head_w.extend_from_slice(softmax_rows(s, &h, 1.0).data());
                tail_w.extend_from_slice(softmax_rows(s, &t, -1.0).data());
            }
        }
        if let Some(trace) = &mut self.trace {
            for (image, (_, sel)) in selections.into_iter().enumerate() {
                trace.push(LayerTrace {
                    layer,
                    image,
                    selection: sel,
                });
            }
        }
        let a = tape.pick(self.alpha, layer)?;
        let b = tape.pick(self.beta, layer)?;
        let n = text_values.rows();
        let mut x = tokens;
        if variant == Variant::WeightedAvg {
            let wh = Tensor::new(vec![head_rows.len(), n], head_w)?;
            let wt = Tensor::new(vec![tail_rows.len(), n], tail_w)?;
            x = add_weighted_text(tape, x, self.text, &head_rows, wh, a, 1.0)?;
            x = add_weighted_text(tape, x, self.text, &tail_rows, wt, b, -1.0)?;
        } else {
            if variant.pulls() {
                x = add_text_rows(tape, x, self.text, &head_rows, &j_plus, a, 1.0)?;
            }
            x = add_text_rows(tape, x, self.text, &tail_rows, &j_minus, b, -1.0)?;
        }
        Ok(x)
    }
}

/// Differentiable alignment losses on a batched token matrix. Selection uses
/// the configured metric; the penalised similarities are cosines.
pub fn alignment_losses_on_tape(tape: &mut Tape, tokens: Var, text: Var, seq_len: usize, params: &AthaParams) -> Result<(Var, Var)> {
    let text_values = tape.value(text).clone();
    let selections = select_batch(tape.value(tokens), &text_values, seq_len, params)?;
    let mut heads = Vec::new();
    let mut tails = Vec::new();
    for (b, (_, sel)) in selections.iter().enumerate() {
        heads.extend(sel.head.iter().zip(&sel.j_plus).map(|(&i, &j)| (b * seq_len + i, j)));
        tails.extend(sel.tail.iter().zip(&sel.j_minus).map(|(&i, &j)| (b * seq_len + i, j)));
    }
    let mut mean_sim = |pairs: &[(usize, usize)]| -> Result<Var> {
        if pairs.is_empty() {
            return Ok(tape.constant(Tensor::scalar(0.0)));
        }
        let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let v = tape.gather_rows(tokens, &rows)?;
        let s = tape.cosine_matrix(v, text)?;
        let idx: Vec<(usize, usize)> = pairs.iter().enumerate().map(|(r, p)| (r, p.1)).collect();
        let picked = tape.gather_elements(s, &idx)?;
        tape.reduce_mean(picked)
    };
    let pull = mean_sim(&heads)?;
    let push = mean_sim(&tails)?;
    let pull = tape.scale(pull, -1.0)?;
    Ok((pull, push))
}
