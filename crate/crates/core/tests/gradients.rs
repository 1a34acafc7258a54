use atha_core::adaptation::{check_episode_gradients, init_lora, Adapted};
use atha_core::atha::{AthaParams, Variant};
use atha_core::backbone::{Model, VitConfig};
use atha_core::tensor::gradcheck::op_cases;
use atha_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[test]
fn every_op_matches_central_differences() {
    for op in op_cases() {
        let mut worst = 0.0f64;
        for i in 0..100 {
            let case = op.instance(1000 + i);
            let r = op.check(&case, H).unwrap();
            assert!(r.max_rel_error < TOL, "{} instance {i}: {:e}", op.name, r.max_rel_error);
            worst = worst.max(r.max_rel_error);
        }
        println!("{:<18} worst {:.2e}", op.name, worst);
    }
}

pub fn tiny_config() -> VitConfig {
    VitConfig {
        image_size: 8,
        patch_size: 2,
        depth: 2,
        width: 8,
        heads: 2,
        text_dim: 6,
        n_classes_max: 6,
        mlp_ratio: 2,
        ..VitConfig::default()
    }
}

#[test]
fn episode_loss_gradients_cover_alpha_beta_and_lora() {
    let cfg = tiny_config();
    // weighted_avg keeps its softmax weights off the tape, so its tape gradient
    // is not the derivative of the loss and is left out here.
    let variants = [Variant::Full, Variant::PushTailOnly, Variant::LossConstraint, Variant::None];
    for i in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let model = Model::init(&cfg, i).unwrap();
        let mut lora = init_lora(&model, 2, 1.0, i + 7).unwrap();
        for b in &mut lora {
            b.q.b = Tensor::randn(b.q.b.shape(), 0.3, &mut rng);
            b.v.b = Tensor::randn(b.v.b.shape(), 0.3, &mut rng);
        }
        let variant = variants[i as usize % variants.len()];
        let mut atha = AthaParams::new(cfg.depth, variant);
        atha.alpha = (0..cfg.depth).map(|_| rng.random_range(-1.0..1.0)).collect();
        atha.beta = (0..cfg.depth).map(|_| rng.random_range(-0.5..0.5)).collect();
        atha.rho = 0.25;
        atha.gamma = 0.25;
        let adapted = Adapted { lora: Some(lora), atha };
        let n = 3;
        let class_ids: Vec<usize> = rand::seq::index::sample(&mut rng, cfg.n_classes_max, n).into_vec();
        let images: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[3, 8, 8], 1.0, &mut rng)).collect();
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..n)).collect();
        let r = check_episode_gradients(&model, &adapted, &images, &labels, &class_ids, H).unwrap();
        let expected = 4 * cfg.depth + if variant.modulates() { 2 } else { 0 };
        assert_eq!(r.analytic.len(), expected);
        assert!(r.max_rel_error < TOL, "instance {i} ({variant:?}): {:e}", r.max_rel_error);
    }
}
