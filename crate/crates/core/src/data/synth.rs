//! Procedural image classes and the target-domain transform.
//!
//! Every class is a spatial pattern (stripes, blobs, rings, …) painted with a
//! random foreground/background colour pair, so colour carries no label
//! information. All patterns are mirror-symmetric in distribution, which keeps
//! labels valid under horizontal flips.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Domain};
use crate::error::{Error, Result};
use crate::fsio::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    HorizontalStripes(u32),
    VerticalStripes(u32),
    Checker(u32),
    Blobs(u32),
    Ring(u32),
    Disk,
    Cross,
    /// Vertical brightness ramp.
    Ramp,
}

impl Family {
    pub fn name(&self) -> String {
        match self {
            Family::HorizontalStripes(f) => format!("hstripes{f}"),
            Family::VerticalStripes(f) => format!("vstripes{f}"),
            Family::Checker(f) => format!("checker{f}"),
            Family::Blobs(n) => format!("blobs{n}"),
            Family::Ring(r) => format!("ring{r}"),
            Family::Disk => "disk".into(),
            Family::Cross => "cross".into(),
            Family::Ramp => "ramp".into(),
        }
    }
}

/// Class `c` of every generated dataset renders `FAMILIES[c]`; its TextBank
/// row is `c` as well.
pub const FAMILIES: [Family; 12] = [
    Family::HorizontalStripes(2),
    Family::HorizontalStripes(4),
    Family::VerticalStripes(2),
    Family::VerticalStripes(4),
    Family::Disk,
    Family::Ring(5),
    Family::Ring(11),
    Family::Cross,
    Family::Blobs(1),
    Family::Ramp,
    Family::Checker(2),
    Family::Blobs(3),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub n_classes: usize,
    pub images_per_class: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    pub sigma_shift: f64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
}

fn default_image_size() -> usize {
    32
}

fn default_noise() -> f64 {
    0.05
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            n_classes: 10,
            images_per_class: 40,
            image_size: default_image_size(),
            sigma_shift: 0.8,
            noise_std: default_noise(),
        }
    }
}

impl DataSpec {
    /// Ten classes with 60 images each, the dataset size used with
    /// `PretrainConfig::desk`.
    pub fn desk(sigma_shift: f64) -> Self {
        DataSpec {
            images_per_class: 60,
            sigma_shift,
            ..DataSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sigma_shift) {
            return Err(Error::config(format!("sigma_shift {} outside [0, 1]", self.sigma_shift)));
        }
        if self.n_classes == 0 || self.n_classes > FAMILIES.len() {
            return Err(Error::config(format!(
                "n_classes must be in 1..={}, got {}",
                FAMILIES.len(),
                self.n_classes
            )));
        }
        if self.images_per_class == 0 || self.image_size < 8 {
            return Err(Error::config("images_per_class ≥ 1 and image_size ≥ 8 required"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise_std must be non-negative"));
        }
        Ok(())
    }
}

/// Pattern intensity in `[0, 1]` for one image, `size×size` row-major.
pub fn render<R: Rng + ?Sized>(family: Family, size: usize, rng: &mut R) -> Vec<f64> {
    let s = size as f64;
    let scale = s / 32.0;
    let mut p = vec![0.0; size * size];
    let phase = rng.random::<f64>() * 2.0 * PI;
    let cx = s / 2.0 + rng.random_range(-3.0..3.0) * scale;
    let cy = s / 2.0 + rng.random_range(-3.0..3.0) * scale;
    let centres: Vec<(f64, f64)> = match family {
        Family::Blobs(n) => place_blobs(n as usize, s, rng),
        _ => Vec::new(),
    };
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let v = match family {
                Family::HorizontalStripes(f) => 0.5 + 0.5 * (2.0 * PI * f as f64 * fy / s + phase).sin(),
                Family::VerticalStripes(f) => 0.5 + 0.5 * (2.0 * PI * f as f64 * fx / s + phase).sin(),
                Family::Checker(f) => {
                    let a = (2.0 * PI * f as f64 * fx / s + phase).sin();
                    let b = (2.0 * PI * f as f64 * fy / s).sin();
                    0.5 + 0.5 * (a * b).signum() * (a * b).abs().sqrt()
                }
                Family::Blobs(_) => {
                    let sig = 2.5 * scale;
                    centres
                        .iter()
                        .map(|&(bx, by)| (-((fx - bx).powi(2) + (fy - by).powi(2)) / (2.0 * sig * sig)).exp())
                        .sum::<f64>()
                        .min(1.0)
                }
                Family::Ring(r) => {
                    let d = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();
                    let w = 1.3 * scale;
                    (-(d - r as f64 * scale).powi(2) / (2.0 * w * w)).exp()
                }
                Family::Disk => {
                    let d = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt();
                    1.0 / (1.0 + ((d - 8.0 * scale) / (0.8 * scale)).exp())
                }
                Family::Cross => {
                    let w = 1.5 * scale;
                    let h = (-(fy - cy).powi(2) / (2.0 * w * w)).exp();
                    let v = (-(fx - cx).powi(2) / (2.0 * w * w)).exp();
                    h.max(v)
                }
                Family::Ramp => fy / s,
            };
            p[y * size + x] = v;
        }
    }
    p
}

fn place_blobs<R: Rng + ?Sized>(n: usize, s: f64, rng: &mut R) -> Vec<(f64, f64)> {
    let margin = 5.0 * s / 32.0;
    let min_gap = 8.0 * s / 32.0;
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(n);
    let mut tries = 0;
    while out.len() < n {
        let c = (rng.random_range(margin..s - margin), rng.random_range(margin..s - margin));
        tries += 1;
        let clear = out.iter().all(|&(x, y)| (x - c.0).hypot(y - c.1) >= min_gap);
        if clear || tries > 200 {
            out.push(c);
        }
    }
    out
}

fn paint<R: Rng + ?Sized>(pattern: &[f64], size: usize, noise: f64, rng: &mut R) -> Tensor {
    let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.55..1.0));
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.35));
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite std");
    let mut data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for &p in pattern {
            let n = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
            data.push(bg[c] + (fg[c] - bg[c]) * p + n);
        }
    }
    Tensor::new(vec![3, size, size], data).expect("shape matches buffer")
}

fn box_blur(x: &[f64], size: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for c in 0..3 {
        let plane = &x[c * size * size..(c + 1) * size * size];
        for y in 0..size {
            for xx in 0..size {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xc) = (y as i64 + dy, xx as i64 + dx);
                        if yy >= 0 && yy < size as i64 && xc >= 0 && xc < size as i64 {
                            acc += plane[yy as usize * size + xc as usize];
                            n += 1.0;
                        }
                    }
                }
                out[c * size * size + y * size + xx] = acc / n;
            }
        }
    }
    out
}

/// Target-domain style transform of strength `sigma ∈ [0, 1]`: a channel
/// remap, a high-frequency boost and a contrast/brightness shift.
/// `sigma = 0` returns the image unchanged.
pub fn apply_domain_shift(image: &Tensor, sigma: f64) -> Tensor {
    if sigma == 0.0 {
        return image.clone();
    }
    let size = image.shape()[1];
    let plane = size * size;
    let x = image.data();
    let mut remapped = vec![0.0; x.len()];
    for i in 0..plane {
        let (r, g, b) = (x[i], x[plane + i], x[2 * plane + i]);
        let swapped = [b, 1.0 - r, g];
        let orig = [r, g, b];
        for c in 0..3 {
            remapped[c * plane + i] = (1.0 - sigma) * orig[c] + sigma * swapped[c];
        }
    }
    let blurred = box_blur(&remapped, size);
    let data = remapped
        .iter()
        .zip(&blurred)
        .map(|(&v, &bl)| {
            let sharp = v + 2.5 * sigma * (v - bl);
            0.5 + (1.0 - 0.5 * sigma) * (sharp - 0.5) + 0.25 * sigma
        })
        .collect();
    Tensor::new(image.shape().to_vec(), data).expect("shape preserved")
}

/// Source and target datasets with paired latents: target image `i` is
/// source image `i` passed through [`apply_domain_shift`].
pub fn gen_synthetic_domains(spec: &DataSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut images = Vec::with_capacity(spec.n_classes * spec.images_per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for c in 0..spec.n_classes {
        for k in 0..spec.images_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, c as u64, k as u64));
            let pattern = render(FAMILIES[c], spec.image_size, &mut rng);
            images.push(paint(&pattern, spec.image_size, spec.noise_std, &mut rng));
            labels.push(c);
        }
    }
    let target_images = images.iter().map(|im| apply_domain_shift(im, spec.sigma_shift)).collect();
    let class_names: Vec<usize> = (0..spec.n_classes).collect();
    let source = Dataset {
        images,
        labels: labels.clone(),
        class_names: class_names.clone(),
        domain: Domain::Source,
        sigma_shift: spec.sigma_shift,
        seed,
    };
    let target = Dataset {
        images: target_images,
        labels,
        class_names,
        domain: Domain::Target,
        sigma_shift: spec.sigma_shift,
        seed,
    };
    Ok((source, target))
}
