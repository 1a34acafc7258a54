use atha_core::adaptation::{evaluate, finetune, init_lora, AdamWConfig, FinetuneConfig};
use atha_core::atha::{AthaParams, Variant};
use atha_core::backbone::{Model, VitConfig};
use atha_core::data::{gen_synthetic_domains, sample_episode, DataSpec, Domain, Episode};
use atha_core::fsio::derive_seed;
use atha_core::Error;

fn cfg() -> VitConfig {
    VitConfig { image_size: 8, patch_size: 2, depth: 2, width: 8, heads: 2, text_dim: 6, n_classes_max: 8, mlp_ratio: 2, ..VitConfig::default() }
}

fn episode(seed: u64) -> Episode {
    let spec = DataSpec { n_classes: 6, images_per_class: 12, image_size: 8, sigma_shift: 0.8, ..DataSpec::default() };
    let (_, target) = gen_synthetic_domains(&spec, 11).unwrap();
    sample_episode(&target, 3, 2, 4, seed).unwrap()
}

fn ft(epochs: usize, lr: f64, augment: bool) -> FinetuneConfig {
    FinetuneConfig { epochs, optim: AdamWConfig { lr, ..AdamWConfig::default() }, lora_rank: 2, augment, ..FinetuneConfig::default() }
}

#[test]
fn zero_epochs_returns_initial_adapters() {
    let model = Model::init(&cfg(), 0).unwrap();
    let ep = episode(1);
    let atha = AthaParams::new(2, Variant::Full);
    let out = finetune(&model, &ep.support, &atha, &ft(0, 1e-3, true)).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.adapted.atha, atha);
    let fresh = init_lora(&model, 2, 1.0, derive_seed(ep.seed(), 0x10fa, 0)).unwrap();
    assert_eq!(out.adapted.lora.unwrap(), fresh);
}

#[test]
fn support_loss_is_non_increasing_in_most_seeded_runs() {
    let model = Model::init(&cfg(), 3).unwrap();
    let atha = AthaParams::new(2, Variant::Full);
    let mut monotone = 0;
    for seed in 0..20 {
        let ep = episode(100 + seed);
        let out = finetune(&model, &ep.support, &atha, &ft(8, 1e-4, false)).unwrap();
        if out.log.windows(2).all(|w| w[1].loss <= w[0].loss) {
            monotone += 1;
        }
    }
    assert!(monotone >= 18, "{monotone}/20 runs were monotone");
}

#[test]
fn frozen_weights_and_text_bank_are_untouched() {
    let model = Model::init(&cfg(), 4).unwrap();
    let before = model.digests();
    let ep = episode(2);
    for v in [Variant::None, Variant::Full, Variant::LossConstraint] {
        let out = finetune(&model, &ep.support, &AthaParams::new(2, v), &ft(3, 1e-2, true)).unwrap();
        assert_eq!(out.log.len(), 3);
        assert!(out.log.iter().all(|l| l.loss.is_finite()));
    }
    assert_eq!(model.digests(), before);
}

#[test]
fn fixed_scalars_stay_fixed() {
    let model = Model::init(&cfg(), 5).unwrap();
    let ep = episode(3);
    let mut atha = AthaParams::new(2, Variant::Full);
    atha.learnable = false;
    let out = finetune(&model, &ep.support, &atha, &ft(4, 1e-2, true)).unwrap();
    assert_eq!(out.adapted.atha, atha);
    let mut learn = atha.clone();
    learn.learnable = true;
    let out = finetune(&model, &ep.support, &learn, &ft(4, 1e-2, true)).unwrap();
    assert_ne!(out.adapted.atha.alpha, atha.alpha);
}

#[test]
fn zero_strength_full_equals_none_bit_for_bit() {
    let model = Model::init(&cfg(), 6).unwrap();
    for seed in 0..5 {
        let ep = episode(200 + seed);
        let none = AthaParams::new(2, Variant::None);
        let mut full = AthaParams::new(2, Variant::Full);
        full.alpha = vec![0.0; 2];
        full.beta = vec![0.0; 2];
        full.learnable = false;
        let a = finetune(&model, &ep.support, &none, &ft(3, 1e-2, true)).unwrap();
        let b = finetune(&model, &ep.support, &full, &ft(3, 1e-2, true)).unwrap();
        assert_eq!(a.adapted.lora, b.adapted.lora);
        let ea = evaluate(&model, &a.adapted, &ep.query, ep.class_ids()).unwrap();
        let eb = evaluate(&model, &b.adapted, &ep.query, ep.class_ids()).unwrap();
        assert_eq!(ea.accuracy.to_bits(), eb.accuracy.to_bits());
    }
}

#[test]
fn source_support_is_refused() {
    let model = Model::init(&cfg(), 0).unwrap();
    let mut ep = episode(1);
    ep.support.domain = Domain::Source;
    let r = finetune(&model, &ep.support, &AthaParams::new(2, Variant::Full), &ft(1, 1e-3, false));
    assert!(matches!(r, Err(Error::Config(_))));
}
