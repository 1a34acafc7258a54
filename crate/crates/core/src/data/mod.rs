//! Synthetic two-domain image data, episode sampling and on-disk datasets.

pub mod container;
mod synth;

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::tensor::Tensor;

pub use synth::{apply_domain_shift, gen_synthetic_domains, render, DataSpec, Family, FAMILIES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

/// Immutable labelled image collection. `labels[i]` indexes `class_names`,
/// whose entries are TextBank rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub class_names: Vec<usize>,
    pub domain: Domain,
    pub sigma_shift: f64,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Image indices of each class, ascending.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let images_dir = dir.join("images");
        fsio::create_dir_all(&images_dir)?;
        let mut files = Vec::with_capacity(self.len());
        for (i, (img, &label)) in self.images.iter().zip(&self.labels).enumerate() {
            let name = format!("images/{i:06}.athd");
            container::write(&dir.join(&name), img)?;
            files.push(ManifestFile { file: name, label });
        }
        let counts = self.by_class().iter().map(Vec::len).collect::<Vec<_>>();
        let manifest = Manifest {
            format_version: MANIFEST_VERSION,
            domain: self.domain,
            sigma_shift: self.sigma_shift,
            seed: self.seed,
            classes: self
                .class_names
                .iter()
                .zip(counts)
                .enumerate()
                .map(|(label, (&text_id, count))| ManifestClass {
                    label,
                    text_id,
                    family: FAMILIES.get(text_id).map(|f| f.name().to_string()),
                    count,
                })
                .collect(),
            files,
        };
        fsio::write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = fsio::read_json(&dir.join("manifest.json"))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Version(format!(
                "dataset manifest version {} (expected {MANIFEST_VERSION})",
                manifest.format_version
            )));
        }
        let n_classes = manifest.classes.len();
        let mut images = Vec::with_capacity(manifest.files.len());
        let mut labels = Vec::with_capacity(manifest.files.len());
        for f in &manifest.files {
            if f.label >= n_classes {
                return Err(Error::Index {
                    what: "manifest label",
                    index: f.label,
                    len: n_classes,
                });
            }
            let path = dir.join(&f.file);
            images.push(container::read(&path).map_err(|e| match e {
                Error::Format { offset, reason } => Error::Format {
                    offset,
                    reason: format!("{}: {reason}", path.display()),
                },
                other => other,
            })?);
            labels.push(f.label);
        }
        Ok(Dataset {
            images,
            labels,
            class_names: manifest.classes.iter().map(|c| c.text_id).collect(),
            domain: manifest.domain,
            sigma_shift: manifest.sigma_shift,
            seed: manifest.seed,
        })
    }

    /// Splits each class into its first `1 - frac` and last `frac` images.
    pub fn split_holdout(&self, frac: f64) -> (Dataset, Dataset) {
        let mut train = self.empty_like();
        let mut hold = self.empty_like();
        for idx in self.by_class() {
            let n_hold = ((idx.len() as f64) * frac).round() as usize;
            let cut = idx.len() - n_hold.min(idx.len());
            for (k, &i) in idx.iter().enumerate() {
                let dst = if k < cut { &mut train } else { &mut hold };
                dst.images.push(self.images[i].clone());
                dst.labels.push(self.labels[i]);
            }
        }
        (train, hold)
    }

    fn empty_like(&self) -> Dataset {
        Dataset {
            images: Vec::new(),
            labels: Vec::new(),
            class_names: self.class_names.clone(),
            domain: self.domain,
            sigma_shift: self.sigma_shift,
            seed: self.seed,
        }
    }
}

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    domain: Domain,
    sigma_shift: f64,
    seed: u64,
    classes: Vec<ManifestClass>,
    files: Vec<ManifestFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestClass {
    label: usize,
    text_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    family: Option<String>,
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    file: String,
    label: usize,
}

/// A labelled image inside an episode. `label` is episode-local (`0..N`).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    /// Index of the image in its dataset.
    pub source_index: usize,
}

/// The part of an episode that fine-tuning is allowed to see.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSet {
    pub samples: Vec<Sample>,
    /// TextBank rows of the N episode classes, in episode-label order.
    pub class_ids: Vec<usize>,
    pub domain: Domain,
    pub seed: u64,
}

impl SupportSet {
    pub fn images(&self) -> Vec<Tensor> {
        self.samples.iter().map(|s| s.image.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: SupportSet,
    pub query: Vec<Sample>,
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
}

impl Episode {
    pub fn class_ids(&self) -> &[usize] {
        &self.support.class_ids
    }

    pub fn seed(&self) -> u64 {
        self.support.seed
    }
}

/// Uniform without-replacement N-way K-shot episode with M queries per class.
/// Support and query are listed class by class.
pub fn sample_episode(ds: &Dataset, n_way: usize, k_shot: usize, m_query: usize, seed: u64) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::config("episodes need N ≥ 1 and K ≥ 1"));
    }
    if n_way > ds.n_classes() {
        return Err(Error::config(format!(
            "{n_way}-way episode from a dataset with {} classes",
            ds.n_classes()
        )));
    }
    let by_class = ds.by_class();
    let need = k_shot + m_query;
    if let Some((class, idx)) = by_class.iter().enumerate().find(|(_, idx)| idx.len() < need) {
        return Err(Error::Sampling {
            class,
            needed: need,
            available: idx.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = sample(&mut rng, ds.n_classes(), n_way).into_vec();
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * m_query);
    for (episode_label, &c) in classes.iter().enumerate() {
        let pool = &by_class[c];
        let picks = sample(&mut rng, pool.len(), need).into_vec();
        for (k, &p) in picks.iter().enumerate() {
            let i = pool[p];
            let s = Sample {
                image: ds.images[i].clone(),
                label: episode_label,
                source_index: i,
            };
            if k < k_shot {
                support.push(s);
            } else {
                query.push(s);
            }
        }
    }
    Ok(Episode {
        support: SupportSet {
            samples: support,
            class_ids: classes.iter().map(|&c| ds.class_names[c]).collect(),
            domain: ds.domain,
            seed,
        },
        query,
        n_way,
        k_shot,
        m_query,
    })
}
