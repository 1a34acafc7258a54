//! Source-free episodic fine-tuning: LoRA adapters on the attention query and
//! value projections, AdamW, and the per-episode training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::atha::{alignment_losses_on_tape, AthaHook, AthaParams, LayerTrace, Variant};
use crate::backbone::{self, encode_images, BlockAdapters, LowRankDelta, Model, TAU};
use crate::data::{Domain, Sample, SupportSet};
use crate::error::{Error, Result};
use crate::fsio::derive_seed;
use crate::tensor::gradcheck::{relative_error, GradCheck};
use crate::tensor::{Tape, Tensor, Var};

/// Low-rank update `s · B · A` for a frozen `D_out×D_in` weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    /// `r×D_in`, random.
    pub a: Tensor,
    /// `D_out×r`, zero at initialisation.
    pub b: Tensor,
    pub scaling: f64,
}

impl LoraAdapter {
    pub fn new<R: Rng + ?Sized>(d_out: usize, d_in: usize, rank: usize, scaling: f64, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(Error::config(format!(
                "LoRA rank {rank} outside 1..={} for a {d_out}×{d_in} weight",
                d_in.min(d_out)
            )));
        }
        Ok(LoraAdapter {
            a: Tensor::randn(&[rank, d_in], 1.0 / (d_in as f64).sqrt(), rng),
            b: Tensor::zeros(&[d_out, rank]),
            scaling,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    /// `W + s · B · A`.
    pub fn effective_weight(&self, w: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let wv = tape.constant(w.clone());
        let delta = self.on_tape(&mut tape, false);
        let ba = tape.matmul(delta.b, delta.a)?;
        let ba = tape.scale(ba, self.scaling)?;
        let out = tape.add(wv, ba)?;
        Ok(tape.value(out).clone())
    }

    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> LowRankDelta {
        let (a, b) = if trainable {
            (tape.param(self.a.clone()), tape.param(self.b.clone()))
        } else {
            (tape.constant(self.a.clone()), tape.constant(self.b.clone()))
        };
        LowRankDelta {
            a,
            b,
            scaling: self.scaling,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockLora {
    pub q: LoraAdapter,
    pub v: LoraAdapter,
}

/// Everything fine-tuning may change: the LoRA pairs and the ATHA scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapted {
    pub lora: Option<Vec<BlockLora>>,
    pub atha: AthaParams,
}

impl Adapted {
    /// The pretrained model as-is: no adapters, no modulation.
    pub fn pretrained(depth: usize) -> Self {
        Adapted {
            lora: None,
            atha: AthaParams::new(depth, Variant::None),
        }
    }

    /// Named tensors of the adapter state (`lora.{block}.{q|v}.{a|b}`,
    /// `atha.alpha`, `atha.beta`).
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, blk) in self.lora.iter().flatten().enumerate() {
            for (n, ad) in [("q", &blk.q), ("v", &blk.v)] {
                out.push((format!("lora.{i}.{n}.a"), ad.a.clone()));
                out.push((format!("lora.{i}.{n}.b"), ad.b.clone()));
            }
        }
        out.push(("atha.alpha".into(), Tensor::vector(self.atha.alpha.clone())));
        out.push(("atha.beta".into(), Tensor::vector(self.atha.beta.clone())));
        out
    }
}

pub fn init_lora(model: &Model, rank: usize, scaling: f64, seed: u64) -> Result<Vec<BlockLora>> {
    let d = model.cfg.width;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..model.cfg.depth)
        .map(|_| {
            Ok(BlockLora {
                q: LoraAdapter::new(d, d, rank, scaling, &mut rng)?,
                v: LoraAdapter::new(d, d, rank, scaling, &mut rng)?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(cfg: AdamWConfig, sizes: &[usize]) -> Self {
        OptimState {
            cfg,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One decoupled-weight-decay Adam step. Non-finite gradients abort before
/// any parameter is touched.
pub fn adamw_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut OptimState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::config(format!(
            "{} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() {
            return Err(Error::Shape {
                op: "adamw_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::Numeric {
                context: format!("adamw step {}", state.step + 1),
                seed: 0,
                reason: format!("non-finite gradient in parameter {i}"),
            });
        }
    }
    state.step += 1;
    let c = state.cfg;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (k, (x, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            *x *= 1.0 - c.lr * c.weight_decay;
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            *x -= c.lr * mh / (vh.sqrt() + c.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub optim: AdamWConfig,
    pub lora_rank: usize,
    pub lora_scaling: f64,
    pub augment: bool,
    pub crop_padding: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 100,
            optim: AdamWConfig::default(),
            lora_rank: 4,
            lora_scaling: 1.0,
            augment: true,
            crop_padding: 4,
        }
    }
}

/// Zero-padded random crop back to the original size, then a horizontal
/// flip with probability ½.
pub fn augment<R: Rng + ?Sized>(image: &Tensor, padding: usize, rng: &mut R) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let dy = rng.random_range(0..=2 * padding) as isize - padding as isize;
    let dx = rng.random_range(0..=2 * padding) as isize - padding as isize;
    let flip = rng.random::<bool>();
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = xx as isize + dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("shape preserved")
}

/// Handles to one forward pass of the adapted model.
pub struct Forward {
    pub logits: Var,
    pub cls: Var,
    pub layers: Vec<Var>,
    pub text: Var,
    pub alpha: Var,
    pub beta: Var,
    /// LoRA leaves in `Adapted::named_tensors` order.
    pub lora: Vec<Var>,
    pub trace: Option<Vec<LayerTrace>>,
}

/// Runs the frozen backbone with the given adapters and ATHA hook on `tape`.
/// With `trainable`, LoRA factors and (when learnable) `α`, `β` become
/// gradient leaves; backbone and text bank are always constants.
pub fn forward(
    tape: &mut Tape,
    model: &Model,
    adapted: &Adapted,
    images: &[Tensor],
    class_ids: &[usize],
    trainable: bool,
    trace: bool,
) -> Result<Forward> {
    let cfg = &model.cfg;
    adapted.atha.validate(cfg.depth)?;
    let vars = model.register(tape, &|_| false)?;
    let text = backbone::project_text(&model.text, class_ids, cfg.ln_eps)?;
    let mut lora = Vec::new();
    let adapters: Option<Vec<BlockAdapters>> = adapted.lora.as_ref().map(|blocks| {
        blocks
            .iter()
            .map(|b| {
                let q = b.q.on_tape(tape, trainable);
                let v = b.v.on_tape(tape, trainable);
                lora.extend([q.a, q.b, v.a, v.b]);
                BlockAdapters { q: Some(q), v: Some(v) }
            })
            .collect()
    });
    let mut hook = AthaHook::new(tape, &adapted.atha, &text.rows, cfg.seq_len(), trainable);
    if trace {
        hook = hook.with_trace();
    }
    let enc = encode_images(tape, cfg, &vars.vit, adapters.as_deref(), images, &mut hook)?;
    let logits = backbone::classify(tape, enc.cls, hook.text)?;
    Ok(Forward {
        logits,
        cls: enc.cls,
        layers: enc.layers,
        text: hook.text,
        alpha: hook.alpha,
        beta: hook.beta,
        lora,
        trace: hook.trace,
    })
}

/// Episode loss: temperature-scaled cross-entropy, plus the weighted
/// alignment losses for the loss-constraint variant.
pub fn episode_loss(tape: &mut Tape, model: &Model, fwd: &Forward, labels: &[usize], atha: &AthaParams) -> Result<Var> {
    let ce = tape.cross_entropy(fwd.logits, labels, TAU)?;
    if atha.variant != Variant::LossConstraint {
        return Ok(ce);
    }
    let last = *fwd.layers.last().expect("depth ≥ 1");
    let (pull, push) = alignment_losses_on_tape(tape, last, fwd.text, model.cfg.seq_len(), atha)?;
    let pull = tape.scale(pull, atha.lambda_pull)?;
    let push = tape.scale(push, atha.lambda_push)?;
    let x = tape.add(ce, pull)?;
    tape.add(x, push)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub adapted: Adapted,
    pub log: Vec<EpochLog>,
}

/// Fine-tunes fresh adapters on one support set. Only the support set and the
/// pretrained model are inputs; source-domain data is refused.
pub fn finetune(model: &Model, support: &SupportSet, atha: &AthaParams, cfg: &FinetuneConfig) -> Result<FinetuneOutcome> {
    if support.domain == Domain::Source {
        return Err(Error::config("fine-tuning accepts target-domain support sets only"));
    }
    atha.validate(model.cfg.depth)?;
    let seed = support.seed;
    let lora = init_lora(model, cfg.lora_rank, cfg.lora_scaling, derive_seed(seed, 0x10fa, 0))?;
    let mut adapted = Adapted {
        lora: Some(lora),
        atha: atha.clone(),
    };
    let train_scalars = atha.learnable && atha.variant.modulates();
    let images = support.images();
    let labels = support.labels();
    let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xa06, 0));
    let mut state: Option<OptimState> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let numeric = |epoch: usize, reason: String| Error::Numeric {
        context: format!("fine-tune epoch {epoch}"),
        seed,
        reason,
    };
    for epoch in 0..cfg.epochs {
        let batch: Vec<Tensor> = if cfg.augment {
            images.iter().map(|im| augment(im, cfg.crop_padding, &mut aug_rng)).collect()
        } else {
            images.clone()
        };
        let mut tape = Tape::new();
        let fwd = forward(&mut tape, model, &adapted, &batch, &support.class_ids, true, false)?;
        let loss = episode_loss(&mut tape, model, &fwd, &labels, &adapted.atha)?;
        let loss_value = tape.value(loss).item()?;
        if !loss_value.is_finite() {
            return Err(numeric(epoch, format!("loss is {loss_value}")));
        }
        tape.backward(loss)?;
        log.push(EpochLog {
            epoch,
            loss: loss_value,
            alpha: adapted.atha.alpha.clone(),
            beta: adapted.atha.beta.clone(),
        });

        let mut leaves = fwd.lora.clone();
        if train_scalars {
            leaves.push(fwd.alpha);
            leaves.push(fwd.beta);
        }
        let grads: Vec<Tensor> = leaves
            .iter()
            .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
            .collect();
        let mut params = flat_params(&adapted, train_scalars);
        let st = state.get_or_insert_with(|| {
            OptimState::new(cfg.optim, &params.iter().map(|p| p.len()).collect::<Vec<_>>())
        });
        let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        adamw_step(&mut refs, &grad_refs, st).map_err(|e| match e {
            Error::Numeric { reason, .. } => numeric(epoch, reason),
            other => other,
        })?;
        write_back(&mut adapted, params, train_scalars);
        if adapted.atha.alpha.iter().chain(&adapted.atha.beta).any(|x| !x.is_finite()) {
            return Err(numeric(epoch, "alpha/beta became non-finite".into()));
        }
    }
    Ok(FinetuneOutcome { adapted, log })
}

fn flat_params(adapted: &Adapted, scalars: bool) -> Vec<Tensor> {
    let mut out = Vec::new();
    for b in adapted.lora.iter().flatten() {
        out.extend([b.q.a.clone(), b.q.b.clone(), b.v.a.clone(), b.v.b.clone()]);
    }
    if scalars {
        out.push(Tensor::vector(adapted.atha.alpha.clone()));
        out.push(Tensor::vector(adapted.atha.beta.clone()));
    }
    out
}

fn write_back(adapted: &mut Adapted, params: Vec<Tensor>, scalars: bool) {
    let mut it = params.into_iter();
    for b in adapted.lora.iter_mut().flatten() {
        b.q.a = it.next().expect("q.a");
        b.q.b = it.next().expect("q.b");
        b.v.a = it.next().expect("v.a");
        b.v.b = it.next().expect("v.b");
    }
    if scalars {
        adapted.atha.alpha = it.next().expect("alpha").into_data();
        adapted.atha.beta = it.next().expect("beta").into_data();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

/// Query accuracy of an adapted model; no augmentation.
pub fn evaluate(model: &Model, adapted: &Adapted, query: &[Sample], class_ids: &[usize]) -> Result<EvalOutcome> {
    if query.is_empty() {
        return Err(Error::EmptyAxis { op: "evaluate" });
    }
    let images: Vec<Tensor> = query.iter().map(|s| s.image.clone()).collect();
    let logits = predict_logits(model, adapted, &images, class_ids)?;
    let predictions = backbone::predict(&logits);
    let correct = predictions.iter().zip(query).filter(|(p, s)| **p == s.label).count();
    Ok(EvalOutcome {
        accuracy: correct as f64 / query.len() as f64,
        predictions,
    })
}

pub fn predict_logits(model: &Model, adapted: &Adapted, images: &[Tensor], class_ids: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let fwd = forward(&mut tape, model, adapted, images, class_ids, false, false)?;
    Ok(tape.value(fwd.logits).clone())
}

/// Compares the tape gradient of [`episode_loss`] with respect to every
/// trainable adapter tensor (LoRA factors, then `α`, `β` when they train)
/// against central differences with step `h`.
pub fn check_episode_gradients(
    model: &Model,
    adapted: &Adapted,
    images: &[Tensor],
    labels: &[usize],
    class_ids: &[usize],
    h: f64,
) -> Result<GradCheck> {
    let scalars = adapted.atha.learnable && adapted.atha.variant.modulates();
    let mut tape = Tape::new();
    let fwd = forward(&mut tape, model, adapted, images, class_ids, true, false)?;
    let loss = episode_loss(&mut tape, model, &fwd, labels, &adapted.atha)?;
    tape.backward(loss)?;
    let mut leaves = fwd.lora.clone();
    if scalars {
        leaves.extend([fwd.alpha, fwd.beta]);
    }
    let analytic: Vec<Tensor> = leaves
        .iter()
        .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
        .collect();

    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut probe = adapted.clone();
        write_back(&mut probe, params.to_vec(), scalars);
        let mut tape = Tape::new();
        let fwd = forward(&mut tape, model, &probe, images, class_ids, false, false)?;
        let loss = episode_loss(&mut tape, model, &fwd, labels, &probe.atha)?;
        tape.value(loss).item()
    };
    let mut work = flat_params(adapted, scalars);
    let mut numeric = Vec::with_capacity(work.len());
    for i in 0..work.len() {
        let mut g = Tensor::zeros(work[i].shape());
        for j in 0..work[i].len() {
            let x0 = work[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            g.data_mut()[j] = (up - down) / (2.0 * h);
        }
        numeric.push(g);
    }
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a.data(), n.data()))
        .fold(0.0, f64::max);
    Ok(GradCheck {
        analytic,
        numeric,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(LoraAdapter::new(4, 3, 0, 1.0, &mut rng).is_err());
        assert!(LoraAdapter::new(4, 3, 4, 1.0, &mut rng).is_err());
        assert!(LoraAdapter::new(4, 3, 3, 1.0, &mut rng).is_ok());
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::randn(&[5, 5], 1.0, &mut rng);
        let ad = LoraAdapter::new(5, 5, 2, 1.0, &mut rng).unwrap();
        assert_eq!(ad.effective_weight(&w).unwrap(), w);
    }

    #[test]
    fn full_rank_adapter_can_cancel_weight() {
        let w = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let ad = LoraAdapter {
            a: Tensor::eye(2),
            b: w.map(|x| -x),
            scaling: 1.0,
        };
        let eff = ad.effective_weight(&w).unwrap();
        assert!(eff.data().iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn adamw_zero_grad_no_decay_is_noop() {
        let mut p = Tensor::vector(vec![1.5, -2.0]);
        let g = Tensor::zeros(&[2]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimState::new(cfg, &[2]);
        adamw_step(&mut [&mut p], &[&g], &mut st).unwrap();
        assert_eq!(p.data(), &[1.5, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adamw_decay_only_scales() {
        let mut p = Tensor::vector(vec![3.0]);
        let g = Tensor::zeros(&[1]);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut st = OptimState::new(cfg, &[1]);
        adamw_step(&mut [&mut p], &[&g], &mut st).unwrap();
        assert_eq!(p.data()[0], 3.0 * (1.0 - 0.1 * 0.5));
    }

    #[test]
    fn adamw_first_step_matches_scalar_oracle() {
        // First step: m̂ = g, v̂ = g², so the move is lr·g/(|g| + eps).
        let (lr, eps, g0, p0) = (0.01, 1e-8, 1.0, 0.25);
        let mut p = Tensor::vector(vec![p0]);
        let g = Tensor::vector(vec![g0]);
        let cfg = AdamWConfig {
            lr,
            weight_decay: 0.0,
            eps,
            ..Default::default()
        };
        let mut st = OptimState::new(cfg, &[1]);
        adamw_step(&mut [&mut p], &[&g], &mut st).unwrap();
        let want = p0 - lr * g0 / (g0.abs() + eps);
        assert!((p.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn adamw_rejects_non_finite() {
        let mut p = Tensor::vector(vec![1.0]);
        let g = Tensor::vector(vec![f64::NAN]);
        let mut st = OptimState::new(AdamWConfig::default(), &[1]);
        let r = adamw_step(&mut [&mut p], &[&g], &mut st);
        assert!(matches!(r, Err(Error::Numeric { .. })));
        assert_eq!(p.data(), &[1.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn augment_without_shift_or_flip_is_identity_or_mirror() {
        let img = Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let out = augment(&img, 0, &mut rng);
            assert!(out == img || out.data() == [3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        }
    }
}
