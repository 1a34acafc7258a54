//! Source-domain warm-up that produces the "pretrained" toy model.
//!
//! The whole visual encoder and the text projection `W_p` are trained with
//! the image–text cross-entropy over every source class. The raw class table
//! and its LayerNorm stay at their random initialisation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{adamw_step, augment, AdamWConfig, OptimState};
use crate::backbone::{self, encode_images, project_text_on_tape, Identity, Model, VitConfig, TAU};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fsio::derive_seed;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub model: VitConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub augment: bool,
    pub crop_padding: usize,
    /// Fraction of each source class held out for validation.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            model: VitConfig::default(),
            epochs: 30,
            batch_size: 32,
            optim: AdamWConfig {
                lr: 1e-3,
                weight_decay: 1e-4,
                ..AdamWConfig::default()
            },
            augment: true,
            crop_padding: 4,
            holdout: 0.2,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    /// The small backbone and schedule used for the bundled experiments:
    /// width 32, depth 4, 60 epochs at lr 2e-3.
    pub fn desk(seed: u64) -> Self {
        PretrainConfig {
            model: VitConfig {
                width: 32,
                depth: 4,
                mlp_ratio: 2,
                ..VitConfig::default()
            },
            epochs: 60,
            optim: AdamWConfig {
                lr: 2e-3,
                weight_decay: 1e-4,
                ..AdamWConfig::default()
            },
            seed,
            ..PretrainConfig::default()
        }
    }
}

pub fn is_pretrained(name: &str) -> bool {
    name.starts_with("vit.") || name == "text.proj"
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub n_train: usize,
    pub n_val: usize,
}

/// Accuracy of the unadapted model over all classes of `ds`.
pub fn accuracy(model: &Model, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyAxis { op: "accuracy" });
    }
    let mut correct = 0;
    for chunk in (0..ds.len()).collect::<Vec<_>>().chunks(64) {
        let images: Vec<Tensor> = chunk.iter().map(|&i| ds.images[i].clone()).collect();
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, &|_| false)?;
        let enc = encode_images(&mut tape, &model.cfg, &vars.vit, None, &images, &mut Identity)?;
        let text = project_text_on_tape(&mut tape, &vars.text, &ds.class_names, model.cfg.ln_eps)?;
        let logits = backbone::classify(&mut tape, enc.cls, text)?;
        let pred = backbone::predict(tape.value(logits));
        correct += chunk.iter().zip(pred).filter(|(&i, p)| ds.labels[i] == *p).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

pub fn pretrain(source: &Dataset, cfg: &PretrainConfig) -> Result<(Model, PretrainReport)> {
    cfg.model.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    if let Some(&c) = source.class_names.iter().find(|&&c| c >= cfg.model.n_classes_max) {
        return Err(Error::config(format!(
            "class id {c} exceeds the text bank size {}",
            cfg.model.n_classes_max
        )));
    }
    let (train, val) = source.split_holdout(cfg.holdout);
    let mut model = Model::init(&cfg.model, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x9e7, 0));
    let mut state: Option<OptimState> = None;
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<Tensor> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        augment(&train.images[i], cfg.crop_padding, &mut rng)
                    } else {
                        train.images[i].clone()
                    }
                })
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let mut tape = Tape::new();
            let vars = model.register(&mut tape, &is_pretrained)?;
            let enc = encode_images(&mut tape, &model.cfg, &vars.vit, None, &images, &mut Identity)?;
            let text = project_text_on_tape(&mut tape, &vars.text, &train.class_names, model.cfg.ln_eps)?;
            let logits = backbone::classify(&mut tape, enc.cls, text)?;
            let loss = tape.cross_entropy(logits, &labels, TAU)?;
            let lv = tape.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::Numeric {
                    context: format!("pretrain epoch {epoch}"),
                    seed: cfg.seed,
                    reason: format!("loss is {lv}"),
                });
            }
            total += lv * chunk.len() as f64;
            tape.backward(loss)?;

            let mut leaves = Vec::new();
            vars.vit.visit(&mut |n, &v| leaves.push((format!("vit.{n}"), v)));
            vars.text.visit("text.", &mut |n, &v| leaves.push((n, v)));
            let grads: Vec<Tensor> = leaves
                .iter()
                .filter(|(n, _)| is_pretrained(n))
                .map(|(_, v)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(*v))))
                .collect();
            let mut params: Vec<&mut Tensor> = Vec::new();
            model.visit_mut(&mut |n, t| {
                if is_pretrained(&n) {
                    params.push(t);
                }
            });
            let st = state.get_or_insert_with(|| {
                OptimState::new(cfg.optim, &params.iter().map(|p| p.len()).collect::<Vec<_>>())
            });
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            adamw_step(&mut params, &grad_refs, st).map_err(|e| match e {
                Error::Numeric { reason, .. } => Error::Numeric {
                    context: format!("pretrain epoch {epoch}"),
                    seed: cfg.seed,
                    reason,
                },
                other => other,
            })?;
        }
        epoch_loss.push(total / train.len().max(1) as f64);
    }
    let report = PretrainReport {
        epoch_loss,
        train_accuracy: accuracy(&model, &train)?,
        val_accuracy: accuracy(&model, &val)?,
        n_train: train.len(),
        n_val: val.len(),
    };
    Ok((model, report))
}
