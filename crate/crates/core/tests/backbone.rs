use atha_core::backbone::{encode_images, transformer_block, BlockAdapters, BlockParams, Identity, Model, VitConfig};
use atha_core::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cfg() -> VitConfig {
    VitConfig { image_size: 8, patch_size: 4, depth: 2, width: 8, heads: 2, text_dim: 6, n_classes_max: 4, mlp_ratio: 2, ..VitConfig::default() }
}

fn naive_ln(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    x.iter().enumerate().map(|(i, v)| (v - mean) / (var + eps).sqrt() * g[i] + b[i]).collect()
}

fn naive_linear(x: &[f64], w: &Tensor, b: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|o| w.row(o).iter().zip(x).map(|(a, c)| a * c).sum::<f64>() + b[o]).collect()
}

fn naive_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// One sequence through a pre-norm block with explicit per-head loops.
fn naive_block(cfg: &VitConfig, p: &BlockParams<Tensor>, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (s, d, heads) = (x.len(), cfg.width, cfg.heads);
    let dh = d / heads;
    let h: Vec<Vec<f64>> = x.iter().map(|r| naive_ln(r, p.ln1_gain.data(), p.ln1_bias.data(), cfg.ln_eps)).collect();
    let q: Vec<Vec<f64>> = h.iter().map(|r| naive_linear(r, &p.wq, p.bq.data())).collect();
    let k: Vec<Vec<f64>> = h.iter().map(|r| naive_linear(r, &p.wk, p.bk.data())).collect();
    let v: Vec<Vec<f64>> = h.iter().map(|r| naive_linear(r, &p.wv, p.bv.data())).collect();
    let mut attn = vec![vec![0.0; d]; s];
    for hd in 0..heads {
        let cols = hd * dh..(hd + 1) * dh;
        for i in 0..s {
            let scores: Vec<f64> = (0..s)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|z| (z - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                attn[i][c] = (0..s).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    let mut out = Vec::with_capacity(s);
    for i in 0..s {
        let o = naive_linear(&attn[i], &p.wo, p.bo.data());
        let x1: Vec<f64> = x[i].iter().zip(&o).map(|(a, b)| a + b).collect();
        let h2 = naive_ln(&x1, p.ln2_gain.data(), p.ln2_bias.data(), cfg.ln_eps);
        let m: Vec<f64> = naive_linear(&h2, &p.w1, p.b1.data()).into_iter().map(naive_gelu).collect();
        let m = naive_linear(&m, &p.w2, p.b2.data());
        out.push(x1.iter().zip(&m).map(|(a, b)| a + b).collect());
    }
    out
}

#[test]
fn transformer_block_matches_per_head_loops() {
    let cfg = cfg();
    let s = cfg.seq_len();
    for seed in 0..20 {
        let model = Model::init(&cfg, seed).unwrap();
        let blk = &model.vit.blocks[seed as usize % cfg.depth];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = 2;
        let x = Tensor::randn(&[batch * s, cfg.width], 1.0, &mut rng);
        let mut tape = Tape::new();
        let vars = blk.try_map("", &mut |_, t| Ok(tape.constant(t.clone()))).unwrap();
        let xv = tape.constant(x.clone());
        let y = transformer_block(&mut tape, &cfg, &vars, BlockAdapters::default(), xv, batch).unwrap();
        let got = tape.value(y);
        for b in 0..batch {
            let rows: Vec<Vec<f64>> = (0..s).map(|i| x.row(b * s + i).to_vec()).collect();
            let want = naive_block(&cfg, blk, &rows);
            for i in 0..s {
                for (g, w) in got.row(b * s + i).iter().zip(&want[i]) {
                    assert!((g - w).abs() < 1e-10, "seed {seed}: {g} vs {w}");
                }
            }
        }
    }
}

#[test]
fn encoding_is_deterministic_and_batch_independent() {
    let cfg = cfg();
    let model = Model::init(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let images: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[3, 8, 8], 1.0, &mut rng)).collect();
    let run = |imgs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, &|_| false).unwrap();
        let enc = encode_images(&mut tape, &cfg, &vars.vit, None, imgs, &mut Identity).unwrap();
        assert_eq!(enc.layers.len(), cfg.depth + 1);
        tape.value(enc.cls).clone()
    };
    let all = run(&images);
    assert_eq!(all, run(&images));
    let single = run(&images[1..2]);
    for (a, b) in all.row(1).iter().zip(single.row(0)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn default_geometry() {
    let c = VitConfig::default();
    assert_eq!(c.num_patches(), 16);
    assert_eq!(c.seq_len(), 17);
    assert!(VitConfig { image_size: 30, ..VitConfig::default() }.validate().is_err());
    assert!(VitConfig { heads: 3, ..VitConfig::default() }.validate().is_err());
}

#[test]
fn model_init_is_seeded() {
    let a = Model::init(&cfg(), 1).unwrap();
    assert_eq!(a.digests(), Model::init(&cfg(), 1).unwrap().digests());
    assert_ne!(a.digests(), Model::init(&cfg(), 2).unwrap().digests());
}
