//! Toy CLIP-style dual encoder.
//!
//! The visual side is a pre-norm ViT that exposes its token sequence before
//! every block through a [`TokenHook`]. The text side is a frozen table of
//! class embeddings mapped into the visual token space by
//! `T' = LayerNorm(T) · W_pᵀ`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Logit temperature for every image–text classification (logit scale 100).
pub const TAU: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub text_dim: usize,
    pub n_classes_max: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_size: 32,
            patch_size: 8,
            depth: 6,
            width: 64,
            heads: 4,
            text_dim: 48,
            n_classes_max: 16,
            mlp_ratio: default_mlp_ratio(),
            ln_eps: default_ln_eps(),
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_patches() < 4 {
            return fail(format!("need at least 4 patches, got {}", self.num_patches()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return fail(format!("width {} is not divisible by {} heads", self.width, self.heads));
        }
        if self.text_dim == 0 || self.n_classes_max == 0 || self.mlp_ratio == 0 {
            return fail("text_dim, n_classes_max and mlp_ratio must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            return fail("ln_eps must be positive".into());
        }
        Ok(())
    }

    /// `L`, the number of patch tokens.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size.max(1);
        side * side
    }

    /// `L + 1`, including `[CLS]`.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }
}

macro_rules! param_group {
    ($(#[$meta:meta])* $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T,)*
        }

        impl<T> $name<T> {
            pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
                $(f(format!("{prefix}{}", stringify!($field)), &self.$field);)*
            }

            pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
                $(f(format!("{prefix}{}", stringify!($field)), &mut self.$field);)*
            }

            pub fn try_map<U>(&self, prefix: &str, f: &mut dyn FnMut(String, &T) -> Result<U>) -> Result<$name<U>> {
                Ok($name {
                    $($field: f(format!("{prefix}{}", stringify!($field)), &self.$field)?,)*
                })
            }
        }
    };
}

param_group!(
    /// One pre-norm transformer block. Linear weights are stored `out×in`.
    BlockParams {
        ln1_gain, ln1_bias, wq, bq, wk, bk, wv, bv, wo, bo,
        ln2_gain, ln2_bias, w1, b1, w2, b2,
    }
);

param_group!(
    /// Frozen class-text side: raw embeddings `T` (`classes×D_t`), the
    /// LayerNorm applied to them, and the projection `W_p` (`D×D_t`).
    TextBank { raw, ln_gain, ln_bias, proj }
);

#[derive(Clone, Debug, PartialEq)]
pub struct VitParams<T> {
    pub patch_w: T,
    pub patch_b: T,
    pub cls: T,
    pub pos: T,
    pub blocks: Vec<BlockParams<T>>,
    pub ln_post_gain: T,
    pub ln_post_bias: T,
}

impl<T> VitParams<T> {
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("patch_w".into(), &self.patch_w);
        f("patch_b".into(), &self.patch_b);
        f("cls".into(), &self.cls);
        f("pos".into(), &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}."), f);
        }
        f("ln_post_gain".into(), &self.ln_post_gain);
        f("ln_post_bias".into(), &self.ln_post_bias);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut T)) {
        f("patch_w".into(), &mut self.patch_w);
        f("patch_b".into(), &mut self.patch_b);
        f("cls".into(), &mut self.cls);
        f("pos".into(), &mut self.pos);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}."), f);
        }
        f("ln_post_gain".into(), &mut self.ln_post_gain);
        f("ln_post_bias".into(), &mut self.ln_post_bias);
    }

    pub fn try_map<U>(&self, f: &mut dyn FnMut(String, &T) -> Result<U>) -> Result<VitParams<U>> {
        Ok(VitParams {
            patch_w: f("patch_w".into(), &self.patch_w)?,
            patch_b: f("patch_b".into(), &self.patch_b)?,
            cls: f("cls".into(), &self.cls)?,
            pos: f("pos".into(), &self.pos)?,
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.try_map(&format!("blocks.{i}."), f))
                .collect::<Result<_>>()?,
            ln_post_gain: f("ln_post_gain".into(), &self.ln_post_gain)?,
            ln_post_bias: f("ln_post_bias".into(), &self.ln_post_bias)?,
        })
    }
}

/// Pretrained visual encoder plus its frozen text bank.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: VitConfig,
    pub vit: VitParams<Tensor>,
    pub text: TextBank<Tensor>,
}

impl Model {
    /// Random initialisation. The text bank is drawn from a separate stream,
    /// so the raw class table depends only on `seed`.
    pub fn init(cfg: &VitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.width;
        let hidden = cfg.hidden();
        let pd = cfg.patch_dim();
        let resid = 1.0 / (2.0 * cfg.depth as f64).sqrt();
        let lin = |out: usize, inp: usize, gain: f64, rng: &mut ChaCha8Rng| {
            Tensor::randn(&[out, inp], gain / (inp as f64).sqrt(), rng)
        };
        let vit = VitParams {
            patch_w: lin(d, pd, 1.0, &mut rng),
            patch_b: Tensor::zeros(&[d]),
            cls: Tensor::randn(&[d], 0.5, &mut rng),
            pos: Tensor::randn(&[cfg.seq_len(), d], 0.5, &mut rng),
            blocks: (0..cfg.depth)
                .map(|_| BlockParams {
                    ln1_gain: Tensor::ones(&[d]),
                    ln1_bias: Tensor::zeros(&[d]),
                    wq: lin(d, d, 1.0, &mut rng),
                    bq: Tensor::zeros(&[d]),
                    wk: lin(d, d, 1.0, &mut rng),
                    bk: Tensor::zeros(&[d]),
                    wv: lin(d, d, 1.0, &mut rng),
                    bv: Tensor::zeros(&[d]),
                    wo: lin(d, d, resid, &mut rng),
                    bo: Tensor::zeros(&[d]),
                    ln2_gain: Tensor::ones(&[d]),
                    ln2_bias: Tensor::zeros(&[d]),
                    w1: lin(hidden, d, 1.0, &mut rng),
                    b1: Tensor::zeros(&[hidden]),
                    w2: lin(d, hidden, resid, &mut rng),
                    b2: Tensor::zeros(&[d]),
                })
                .collect(),
            ln_post_gain: Tensor::ones(&[d]),
            ln_post_bias: Tensor::zeros(&[d]),
        };
        let mut text_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47_ba4c);
        let text = TextBank {
            raw: Tensor::randn(&[cfg.n_classes_max, cfg.text_dim], 1.0, &mut text_rng),
            ln_gain: Tensor::ones(&[cfg.text_dim]),
            ln_bias: Tensor::zeros(&[cfg.text_dim]),
            proj: Tensor::randn(&[d, cfg.text_dim], 1.0 / (cfg.text_dim as f64).sqrt(), &mut text_rng),
        };
        Ok(Model {
            cfg: cfg.clone(),
            vit,
            text,
        })
    }

    /// Every tensor with a stable dotted name (`vit.blocks.0.wq`, `text.raw`, …).
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.vit.visit(&mut |n, t| out.push((format!("vit.{n}"), t)));
        self.text.visit("text.", &mut |n, t| out.push((n, t)));
        out
    }

    /// Mutable access to every tensor, in [`Model::named_tensors`] order.
    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        self.vit.visit_mut(&mut |n, t| f(format!("vit.{n}"), t));
        self.text.visit_mut("text.", f);
    }

    /// SHA-256 of every tensor, keyed by name.
    pub fn digests(&self) -> BTreeMap<String, String> {
        self.named_tensors().into_iter().map(|(n, t)| (n, t.digest())).collect()
    }

    /// Registers all tensors on `tape`; `trainable(name)` decides which become
    /// gradient-carrying leaves.
    pub fn register(&self, tape: &mut Tape, trainable: &dyn Fn(&str) -> bool) -> Result<ModelVars> {
        let vit = self.vit.try_map(&mut |n, t| {
            let name = format!("vit.{n}");
            Ok(if trainable(&name) { tape.param(t.clone()) } else { tape.constant(t.clone()) })
        })?;
        let text = self.text.try_map("text.", &mut |n, t| {
            Ok(if trainable(&n) { tape.param(t.clone()) } else { tape.constant(t.clone()) })
        })?;
        Ok(ModelVars { vit, text })
    }
}

/// The model's tensors as they sit on one tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub vit: VitParams<Var>,
    pub text: TextBank<Var>,
}

/// Class text embeddings projected into the visual token space (`N×D`),
/// shared by every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedText {
    pub rows: Tensor,
    pub class_ids: Vec<usize>,
}

/// One layer's token matrix `(L+1)×D`; row 0 is `[CLS]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub layer: usize,
}

impl TokenSequence {
    pub fn patch_tokens(&self) -> Result<Tensor> {
        let d = self.tokens.last_dim();
        let rows = self.tokens.rows();
        Tensor::new(vec![rows - 1, d], self.tokens.data()[d..].to_vec())
    }
}

/// `T'` on a tape, differentiable in the bank's tensors when they are
/// trainable (pretraining only).
pub fn project_text_on_tape(tape: &mut Tape, bank: &TextBank<Var>, class_ids: &[usize], eps: f64) -> Result<Var> {
    let n_max = tape.shape(bank.raw)[0];
    if let Some(&bad) = class_ids.iter().find(|&&c| c >= n_max) {
        return Err(Error::Index {
            what: "class id",
            index: bad,
            len: n_max,
        });
    }
    let rows = tape.gather_rows(bank.raw, class_ids)?;
    let normed = tape.layer_norm(rows, bank.ln_gain, bank.ln_bias, eps)?;
    tape.matmul_nt(normed, bank.proj)
}

/// `T' = LayerNorm(T[class_ids]) · W_pᵀ`, detached.
pub fn project_text(bank: &TextBank<Tensor>, class_ids: &[usize], eps: f64) -> Result<ProjectedText> {
    let mut tape = Tape::new();
    let vars = bank.try_map("", &mut |_, t| Ok(tape.constant(t.clone())))?;
    let out = project_text_on_tape(&mut tape, &vars, class_ids, eps)?;
    Ok(ProjectedText {
        rows: tape.value(out).clone(),
        class_ids: class_ids.to_vec(),
    })
}

/// Flattens `B` images (each `3×H×W`) into `(B·L)×(3·p²)` patch rows,
/// patches in raster order, each patch laid out channel, row, column.
pub fn patch_rows(cfg: &VitConfig, images: &[Tensor]) -> Result<Tensor> {
    let p = cfg.patch_size;
    let s = cfg.image_size;
    let side = s / p;
    let pd = cfg.patch_dim();
    let mut out = Vec::with_capacity(images.len() * cfg.num_patches() * pd);
    for img in images {
        if img.shape() != [3, s, s] {
            return Err(Error::Config(format!(
                "image shape {:?} does not match configured 3×{s}×{s}",
                img.shape()
            )));
        }
        let x = img.data();
        for py in 0..side {
            for px in 0..side {
                for c in 0..3 {
                    for y in 0..p {
                        let row = (c * s + py * p + y) * s + px * p;
                        out.extend_from_slice(&x[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![images.len() * cfg.num_patches(), pd], out)
}

/// Layer-0 token sequences for a batch: patch projection, `[CLS]` prepended
/// per image, positional embeddings added. Result is `(B·(L+1))×D`.
pub fn patchify(tape: &mut Tape, cfg: &VitConfig, vit: &VitParams<Var>, images: &[Tensor]) -> Result<Var> {
    let b = images.len();
    let l = cfg.num_patches();
    let x = tape.constant(patch_rows(cfg, images)?);
    let proj = tape.matmul_nt(x, vit.patch_w)?;
    let proj = tape.add_row(proj, vit.patch_b)?;
    let cls = tape.reshape(vit.cls, &[1, cfg.width])?;
    let cls_rows = tape.gather_rows(cls, &vec![0; b])?;
    let stacked = tape.concat_rows(&[cls_rows, proj])?;
    let mut order = Vec::with_capacity(b * (l + 1));
    for i in 0..b {
        order.push(i);
        order.extend((0..l).map(|j| b + i * l + j));
    }
    let seq = tape.gather_rows(stacked, &order)?;
    tape.add_tiled(seq, vit.pos)
}

/// Low-rank weight delta `scaling · B · A` for one projection.
#[derive(Clone, Copy, Debug)]
pub struct LowRankDelta {
    pub a: Var,
    pub b: Var,
    pub scaling: f64,
}

/// Adapters attached to one block's query and value projections.
#[derive(Clone, Copy, Debug, Default)]
pub struct BlockAdapters {
    pub q: Option<LowRankDelta>,
    pub v: Option<LowRankDelta>,
}

fn effective_weight(tape: &mut Tape, w: Var, delta: Option<LowRankDelta>) -> Result<Var> {
    match delta {
        None => Ok(w),
        Some(d) => {
            let ba = tape.matmul(d.b, d.a)?;
            let ba = tape.scale(ba, d.scaling)?;
            tape.add(w, ba)
        }
    }
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul_nt(x, w)?;
    tape.add_row(y, b)
}

/// Pre-norm block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
pub fn transformer_block(
    tape: &mut Tape,
    cfg: &VitConfig,
    blk: &BlockParams<Var>,
    adapters: BlockAdapters,
    x: Var,
    batch: usize,
) -> Result<Var> {
    let h = tape.layer_norm(x, blk.ln1_gain, blk.ln1_bias, cfg.ln_eps)?;
    let wq = effective_weight(tape, blk.wq, adapters.q)?;
    let wv = effective_weight(tape, blk.wv, adapters.v)?;
    let q = linear(tape, h, wq, blk.bq)?;
    let k = linear(tape, h, blk.wk, blk.bk)?;
    let v = linear(tape, h, wv, blk.bv)?;
    let a = tape.attention(q, k, v, batch, cfg.seq_len(), cfg.heads)?;
    let o = linear(tape, a, blk.wo, blk.bo)?;
    let x = tape.add(x, o)?;
    let h = tape.layer_norm(x, blk.ln2_gain, blk.ln2_bias, cfg.ln_eps)?;
    let m = linear(tape, h, blk.w1, blk.b1)?;
    let m = tape.gelu(m)?;
    let m = linear(tape, m, blk.w2, blk.b2)?;
    tape.add(x, m)
}

/// Per-layer token transform applied to `V^(l)` before block `l`.
pub trait TokenHook {
    /// `tokens` is `(batch·(L+1))×D`. Must keep the shape and leave row 0 of
    /// every sequence addressable as `[CLS]`.
    fn apply(&mut self, tape: &mut Tape, layer: usize, tokens: Var, batch: usize) -> Result<Var>;
}

/// The no-op hook.
pub struct Identity;

impl TokenHook for Identity {
    fn apply(&mut self, _tape: &mut Tape, _layer: usize, tokens: Var, _batch: usize) -> Result<Var> {
        Ok(tokens)
    }
}

#[derive(Clone, Debug)]
pub struct Encoded {
    /// Final `[CLS]` after the output LayerNorm, `B×D`.
    pub cls: Var,
    /// `V^(0)..=V^(depth)`, each before that layer's hook.
    pub layers: Vec<Var>,
    pub batch: usize,
}

/// Batched forward pass of the visual encoder.
pub fn encode_images(
    tape: &mut Tape,
    cfg: &VitConfig,
    vit: &VitParams<Var>,
    adapters: Option<&[BlockAdapters]>,
    images: &[Tensor],
    hook: &mut dyn TokenHook,
) -> Result<Encoded> {
    if let Some(a) = adapters {
        if a.len() != cfg.depth {
            return Err(Error::Config(format!("{} adapter sets for depth {}", a.len(), cfg.depth)));
        }
    }
    let batch = images.len();
    let mut x = patchify(tape, cfg, vit, images)?;
    let mut layers = Vec::with_capacity(cfg.depth + 1);
    for (l, blk) in vit.blocks.iter().enumerate() {
        layers.push(x);
        let modulated = hook.apply(tape, l, x, batch)?;
        if tape.shape(modulated) != tape.shape(x) {
            return Err(Error::Shape {
                op: "token hook",
                left: tape.shape(x).to_vec(),
                right: tape.shape(modulated).to_vec(),
            });
        }
        let ad = adapters.map(|a| a[l]).unwrap_or_default();
        x = transformer_block(tape, cfg, blk, ad, modulated, batch)?;
    }
    layers.push(x);
    let cls_idx: Vec<usize> = (0..batch).map(|b| b * cfg.seq_len()).collect();
    let cls = tape.gather_rows(x, &cls_idx)?;
    let cls = tape.layer_norm(cls, vit.ln_post_gain, vit.ln_post_bias, cfg.ln_eps)?;
    Ok(Encoded { cls, layers, batch })
}

/// Single-image convenience wrapper returning the `[CLS]` embedding `[D]`.
pub fn encode_image(model: &Model, image: &Tensor, hook: &mut dyn TokenHook) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, &|_| false)?;
    let enc = encode_images(&mut tape, &model.cfg, &vars.vit, None, std::slice::from_ref(image), hook)?;
    tape.value(enc.cls).reshape(&[model.cfg.width])
}

/// Cosine similarity of each `[CLS]` row against each class text row
/// (`B×N`), the logits fed to the cross-entropy at temperature [`TAU`].
pub fn classify(tape: &mut Tape, cls: Var, text: Var) -> Result<Var> {
    tape.cosine_matrix(cls, text)
}

/// Index of the largest logit per row, lower index on ties.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let n = logits.last_dim();
    (0..logits.rows())
        .map(|r| {
            let row = &logits.data()[r * n..(r + 1) * n];
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
