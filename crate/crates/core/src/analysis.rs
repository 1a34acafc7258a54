//! Diagnostics: linear CKA between domain feature sets, sorted token–text
//! similarity curves, and cross-run comparison tables.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{forward, Adapted};
use crate::atha::{similarity_matrix, Metric};
use crate::backbone::{project_text, Model};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tape, Tensor};

fn centered_gram(x: &Tensor) -> Vec<f64> {
    let (n, d) = (x.rows(), x.last_dim());
    let mut k = vec![0.0; n * n];
    gemm(n, d, n, x.data(), false, x.data(), true, &mut k, false);
    let row_mean: Vec<f64> = (0..n).map(|i| k[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    for i in 0..n {
        for j in 0..n {
            // K is symmetric, so column means equal row means.
            k[i * n + j] += grand - row_mean[i] - row_mean[j];
        }
    }
    k
}

/// Linear-kernel CKA: `Tr(K_c L_c) / √(Tr(K_c²) Tr(L_c²))` with
/// `K = XXᵀ`, `L = YYᵀ` and `K_c = HKH`.
pub fn cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.rank() != 2 || y.rank() != 2 || x.rows() != y.rows() {
        return Err(Error::Shape {
            op: "cka",
            left: x.shape().to_vec(),
            right: y.shape().to_vec(),
        });
    }
    if x.rows() < 2 {
        return Err(Error::EmptyAxis { op: "cka" });
    }
    let kc = centered_gram(x);
    let lc = centered_gram(y);
    // Both matrices are symmetric, so Tr(AB) is the elementwise dot product.
    let tr = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let kk = tr(&kc, &kc);
    let ll = tr(&lc, &lc);
    if kk == 0.0 || ll == 0.0 {
        return Err(Error::DegenerateInput { op: "cka" });
    }
    Ok(tr(&kc, &lc) / (kk.sqrt() * ll.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaReport {
    pub value: f64,
    pub n_samples: usize,
    pub feature_dim: usize,
    pub model_tag: String,
    pub domain_pair: String,
}

/// Final `[CLS]` embeddings (after the output LayerNorm) of `images`, with
/// the adapted model's hooks active. `class_ids` selects the text rows the
/// hooks align against.
pub fn cls_features(model: &Model, adapted: &Adapted, images: &[Tensor], class_ids: &[usize]) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(images.len() * model.cfg.width);
    for chunk in images.chunks(64) {
        let mut tape = Tape::new();
        let fwd = forward(&mut tape, model, adapted, chunk, class_ids, false, false)?;
        rows.extend_from_slice(tape.value(fwd.cls).data());
    }
    Tensor::new(vec![images.len(), model.cfg.width], rows)
}

/// Index draws for a paired domain comparison. When both datasets have the
/// same length, image `i` of one is paired with image `i` of the other.
pub fn paired_indices(len_a: usize, len_b: usize, n_samples: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_samples < 2 || n_samples > len_a.min(len_b) {
        return Err(Error::config(format!(
            "n_samples {n_samples} must be in 2..={}",
            len_a.min(len_b)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = sample(&mut rng, len_a, n_samples).into_vec();
    let b = if len_a == len_b {
        a.clone()
    } else {
        sample(&mut rng, len_b, n_samples).into_vec()
    };
    Ok((a, b))
}

pub fn domain_cka(
    model: &Model,
    adapted: &Adapted,
    class_ids: &[usize],
    source: &Dataset,
    target: &Dataset,
    n_samples: usize,
    seed: u64,
    model_tag: &str,
) -> Result<CkaReport> {
    let (ia, ib) = paired_indices(source.len(), target.len(), n_samples, seed)?;
    let xa: Vec<Tensor> = ia.iter().map(|&i| source.images[i].clone()).collect();
    let xb: Vec<Tensor> = ib.iter().map(|&i| target.images[i].clone()).collect();
    let fa = cls_features(model, adapted, &xa, class_ids)?;
    let fb = cls_features(model, adapted, &xb, class_ids)?;
    Ok(CkaReport {
        value: cka(&fa, &fb)?,
        n_samples,
        feature_dim: model.cfg.width,
        model_tag: model_tag.to_string(),
        domain_pair: format!("{:?}-{:?}", source.domain, target.domain).to_lowercase(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCurve {
    /// Per-token best cosine similarity to any class text, ascending.
    pub values: Vec<f64>,
    pub layer: usize,
    pub model_tag: String,
    pub dataset_tag: String,
}

impl SimilarityCurve {
    fn tail_mean(&self, from_top: bool) -> f64 {
        let n = self.values.len();
        let k = (n / 10).max(1).min(n);
        let slice = if from_top { &self.values[n - k..] } else { &self.values[..k] };
        slice.iter().sum::<f64>() / k as f64
    }

    pub fn bottom_decile_mean(&self) -> f64 {
        self.tail_mean(false)
    }

    pub fn top_decile_mean(&self) -> f64 {
        self.tail_mean(true)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,similarity\n");
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{i},{v}");
        }
        out
    }
}

/// Sorted per-token `s_max` (cosine against the episode's `T'`) of the
/// tokens `V^(layer)` over `images`; `layer = depth` is the encoder output.
pub fn similarity_curve(
    model: &Model,
    adapted: &Adapted,
    images: &[Tensor],
    class_ids: &[usize],
    layer: usize,
    model_tag: &str,
    dataset_tag: &str,
) -> Result<SimilarityCurve> {
    if layer > model.cfg.depth {
        return Err(Error::config(format!("layer {layer} exceeds depth {}", model.cfg.depth)));
    }
    let text = project_text(&model.text, class_ids, model.cfg.ln_eps)?;
    let seq = model.cfg.seq_len();
    let d = model.cfg.width;
    let mut values = Vec::with_capacity(images.len() * (seq - 1));
    for chunk in images.chunks(64) {
        let mut tape = Tape::new();
        let fwd = forward(&mut tape, model, adapted, chunk, class_ids, false, false)?;
        let tokens = tape.value(fwd.layers[layer]);
        for b in 0..chunk.len() {
            let start = (b * seq + 1) * d;
            let patches = Tensor::new(vec![seq - 1, d], tokens.data()[start..start + (seq - 1) * d].to_vec())?;
            let s = similarity_matrix(&patches, &text.rows, Metric::Cosine)?;
            for i in 0..s.rows() {
                values.push(s.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max));
            }
        }
    }
    values.sort_by(f64::total_cmp);
    Ok(SimilarityCurve {
        values,
        layer,
        model_tag: model_tag.to_string(),
        dataset_tag: dataset_tag.to_string(),
    })
}

/// Mean and `1.96·stderr` half-width (sample standard deviation).
pub fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * (var / n as f64).sqrt())
}

/// Per-episode results of one run, as needed by [`compare_report`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEpisodes {
    pub tag: String,
    pub variant: String,
    pub episodes: Vec<EpisodeSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub accuracy: f64,
    #[serde(default)]
    pub cka: Option<f64>,
    #[serde(default)]
    pub curve_bottom_decile: Option<f64>,
    #[serde(default)]
    pub curve_top_decile: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run_tag: String,
    pub variant: String,
    pub episodes: usize,
    pub accuracy_mean: f64,
    pub accuracy_ci95: f64,
    pub cka_mean: Option<f64>,
    pub curve_bottom_decile_mean: Option<f64>,
    pub curve_top_decile_mean: Option<f64>,
    /// Paired difference to the first run, over shared episode indices.
    pub diff_vs_first_mean: f64,
    pub diff_vs_first_ci95: f64,
}

fn optional_mean(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.collect::<Option<Vec<f64>>>()?;
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn compare_report(runs: &[RunEpisodes]) -> Result<Vec<ComparisonRow>> {
    let first = runs.first().ok_or_else(|| Error::Lookup("no runs to compare".into()))?;
    runs.iter()
        .map(|r| {
            if r.episodes.is_empty() {
                return Err(Error::Lookup(format!("run {} has no episodes", r.tag)));
            }
            let acc: Vec<f64> = r.episodes.iter().map(|e| e.accuracy).collect();
            let (m, ci) = mean_ci95(&acc);
            let diffs: Vec<f64> = r
                .episodes
                .iter()
                .filter_map(|e| {
                    first
                        .episodes
                        .iter()
                        .find(|f| f.episode == e.episode)
                        .map(|f| e.accuracy - f.accuracy)
                })
                .collect();
            let (dm, dci) = mean_ci95(&diffs);
            Ok(ComparisonRow {
                run_tag: r.tag.clone(),
                variant: r.variant.clone(),
                episodes: r.episodes.len(),
                accuracy_mean: m,
                accuracy_ci95: ci,
                cka_mean: optional_mean(r.episodes.iter().map(|e| e.cka)),
                curve_bottom_decile_mean: optional_mean(r.episodes.iter().map(|e| e.curve_bottom_decile)),
                curve_top_decile_mean: optional_mean(r.episodes.iter().map(|e| e.curve_top_decile)),
                diff_vs_first_mean: dm,
                diff_vs_first_ci95: dci,
            })
        })
        .collect()
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    let mut out = String::from(
        "run_tag,variant,episodes,accuracy_mean,accuracy_ci95,cka_mean,curve_bottom_decile_mean,curve_top_decile_mean,diff_vs_first_mean,diff_vs_first_ci95\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.run_tag,
            r.variant,
            r.episodes,
            r.accuracy_mean,
            r.accuracy_ci95,
            opt(r.cka_mean),
            opt(r.curve_bottom_decile_mean),
            opt(r.curve_top_decile_mean),
            r.diff_vs_first_mean,
            r.diff_vs_first_ci95
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_features_give_one() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 0.0]]).unwrap();
        assert!((cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_features_are_degenerate() {
        let x = Tensor::full(&[4, 3], 2.0);
        let y = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap();
        assert!(matches!(cka(&x, &y), Err(Error::DegenerateInput { .. })));
        assert!(matches!(cka(&y, &x), Err(Error::DegenerateInput { .. })));
    }

    #[test]
    fn row_count_mismatch_is_shape_error() {
        let x = Tensor::zeros(&[3, 2]);
        let y = Tensor::zeros(&[4, 2]);
        assert!(matches!(cka(&x, &y), Err(Error::Shape { .. })));
    }

    #[test]
    fn ci_of_constant_sample_is_zero() {
        assert_eq!(mean_ci95(&[0.5, 0.5, 0.5]), (0.5, 0.0));
        let (m, ci) = mean_ci95(&[0.0, 1.0]);
        assert_eq!(m, 0.5);
        assert!((ci - 1.96 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_run_is_one_row() {
        let run = RunEpisodes {
            tag: "a".into(),
            variant: "none".into(),
            episodes: vec![EpisodeSummary {
                episode: 0,
                accuracy: 0.6,
                cka: None,
                curve_bottom_decile: None,
                curve_top_decile: None,
            }],
        };
        let rows = compare_report(std::slice::from_ref(&run)).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].accuracy_mean, 0.6);
        assert!(compare_report(&[]).is_err());
    }
}
