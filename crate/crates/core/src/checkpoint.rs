//! Model and adapter checkpoints: a directory holding `checkpoint.json` and
//! one `.athd` file per tensor.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptation::{Adapted, BlockLora, LoraAdapter};
use crate::atha::AthaParams;
use crate::backbone::{Model, VitConfig};
use crate::data::container;
use crate::error::{Error, Result};
use crate::fsio;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ModelIndex {
    format_version: u32,
    kind: String,
    config: VitConfig,
    /// Tensor name → SHA-256 of its contents.
    tensors: BTreeMap<String, String>,
}

fn file_name(name: &str) -> String {
    format!("{name}.athd")
}

fn check_version(found: u32, kind: &str, want_kind: &str) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(Error::Version(format!(
            "checkpoint format {found}, this build reads {FORMAT_VERSION}"
        )));
    }
    if kind != want_kind {
        return Err(Error::Version(format!("expected a {want_kind} checkpoint, found {kind}")));
    }
    Ok(())
}

pub fn save_model(model: &Model, dir: &Path) -> Result<()> {
    fsio::create_dir_all(dir)?;
    let mut tensors = BTreeMap::new();
    for (name, t) in model.named_tensors() {
        container::write(&dir.join(file_name(&name)), t)?;
        tensors.insert(name, t.digest());
    }
    fsio::write_json(
        &dir.join("checkpoint.json"),
        &ModelIndex {
            format_version: FORMAT_VERSION,
            kind: "model".into(),
            config: model.cfg.clone(),
            tensors,
        },
    )
}

/// Loads a model, verifying every tensor's shape against the stored
/// configuration and its digest against the index.
pub fn load_model(dir: &Path) -> Result<Model> {
    let index: ModelIndex = fsio::read_json(&dir.join("checkpoint.json"))?;
    check_version(index.format_version, &index.kind, "model")?;
    let mut model = Model::init(&index.config, 0)?;
    let mut failure = None;
    model.visit_mut(&mut |name, slot| {
        if failure.is_some() {
            return;
        }
        let result = (|| {
            let digest = index
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Lookup(format!("tensor {name} missing from checkpoint index")))?;
            let t = container::read(&dir.join(file_name(&name)))?;
            if t.shape() != slot.shape() {
                return Err(Error::Version(format!(
                    "tensor {name} has shape {:?}, configuration expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            if &t.digest() != digest {
                return Err(Error::Format {
                    offset: 0,
                    reason: format!("tensor {name} does not match its recorded digest"),
                });
            }
            *slot = t;
            Ok(())
        })();
        if let Err(e) = result {
            failure = Some(e);
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(model),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AdapterIndex {
    format_version: u32,
    kind: String,
    atha: AthaParams,
    lora_blocks: usize,
    lora_scaling: f64,
}

pub fn save_adapted(adapted: &Adapted, dir: &Path) -> Result<()> {
    fsio::create_dir_all(dir)?;
    let blocks = adapted.lora.as_ref().map_or(0, Vec::len);
    let scaling = adapted
        .lora
        .as_ref()
        .and_then(|l| l.first())
        .map_or(1.0, |b| b.q.scaling);
    for (name, t) in adapted.named_tensors() {
        if name.starts_with("lora.") {
            container::write(&dir.join(file_name(&name)), &t)?;
        }
    }
    fsio::write_json(
        &dir.join("adapter.json"),
        &AdapterIndex {
            format_version: FORMAT_VERSION,
            kind: "adapter".into(),
            atha: adapted.atha.clone(),
            lora_blocks: blocks,
            lora_scaling: scaling,
        },
    )
}

pub fn load_adapted(dir: &Path) -> Result<Adapted> {
    let index: AdapterIndex = fsio::read_json(&dir.join("adapter.json"))?;
    check_version(index.format_version, &index.kind, "adapter")?;
    let read = |name: String| -> Result<Tensor> { container::read(&dir.join(file_name(&name))) };
    let lora = if index.lora_blocks == 0 {
        None
    } else {
        let mut blocks = Vec::with_capacity(index.lora_blocks);
        for i in 0..index.lora_blocks {
            let pair = |n: &str| -> Result<LoraAdapter> {
                Ok(LoraAdapter {
                    a: read(format!("lora.{i}.{n}.a"))?,
                    b: read(format!("lora.{i}.{n}.b"))?,
                    scaling: index.lora_scaling,
                })
            };
            blocks.push(BlockLora {
                q: pair("q")?,
                v: pair("v")?,
            });
        }
        Some(blocks)
    };
    Ok(Adapted { lora, atha: index.atha })
}
