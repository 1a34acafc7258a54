//! Episodic fine-tune/evaluate runs and their on-disk layout.
//!
//! ```text
//! run-dir/
//!   config.json      the fully resolved RunConfig
//!   episodes.jsonl   one EpisodeRecord per line, in episode order
//!   train_log.jsonl  per-epoch loss and α/β of every episode
//!   metrics.json     aggregate accuracy (mean ± 95% CI) and analyses
//!   checkpoints/     adapters per episode, when requested
//!   analysis/        selection traces and similarity curves, when requested
//! ```

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::{evaluate, finetune, Adapted, EpochLog, FinetuneConfig};
use crate::analysis::{domain_cka, mean_ci95, similarity_curve, EpisodeSummary, RunEpisodes};
use crate::atha::{AthaParams, Metric, Variant};
use crate::backbone::{Model, VitConfig};
use crate::checkpoint;
use crate::data::{sample_episode, Dataset, Domain};
use crate::error::{Error, Result};
use crate::fsio::{self, derive_seed};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AthaSettings {
    pub variant: Variant,
    pub metric: Metric,
    pub rho: f64,
    pub gamma: f64,
    pub learnable: bool,
    #[serde(default = "default_lambda")]
    pub lambda_pull: f64,
    #[serde(default = "default_lambda")]
    pub lambda_push: f64,
    /// Per-layer initial values; the default initialisation when absent.
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
    #[serde(default)]
    pub beta: Option<Vec<f64>>,
}

fn default_lambda() -> f64 {
    0.1
}

impl Default for AthaSettings {
    fn default() -> Self {
        AthaSettings {
            variant: Variant::Full,
            metric: Metric::Cosine,
            rho: 0.1,
            gamma: 0.1,
            learnable: true,
            lambda_pull: default_lambda(),
            lambda_push: default_lambda(),
            alpha: None,
            beta: None,
        }
    }
}

impl AthaSettings {
    pub fn to_params(&self, depth: usize) -> Result<AthaParams> {
        let mut p = AthaParams::new(depth, self.variant);
        p.metric = self.metric;
        p.rho = self.rho;
        p.gamma = self.gamma;
        p.learnable = self.learnable;
        p.lambda_pull = self.lambda_pull;
        p.lambda_push = self.lambda_push;
        if let Some(a) = &self.alpha {
            p.alpha = a.clone();
        }
        if let Some(b) = &self.beta {
            p.beta = b.clone();
        }
        p.validate(depth)?;
        if p.beta.iter().any(|&b| b < 0.0) {
            return Err(Error::config("initial beta must be non-negative"));
        }
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Protocol {
    pub n_way: usize,
    pub k_shot: usize,
    pub m_query: usize,
    pub episodes: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            n_way: 5,
            k_shot: 1,
            m_query: 15,
            episodes: 800,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSettings {
    /// Source dataset for per-episode CKA. Never handed to fine-tuning.
    #[serde(default)]
    pub source: Option<PathBuf>,
    #[serde(default = "default_cka_samples")]
    pub cka_samples: usize,
    /// Compute similarity curves over each episode's query images.
    #[serde(default)]
    pub curves: bool,
    /// Token layer for curves; the encoder output when absent.
    #[serde(default)]
    pub curve_layer: Option<usize>,
    #[serde(default)]
    pub save_adapters: bool,
}

fn default_cka_samples() -> usize {
    100
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        AnalysisSettings {
            source: None,
            cka_samples: default_cka_samples(),
            curves: false,
            curve_layer: None,
            save_adapters: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_tag: String,
    pub checkpoint: PathBuf,
    pub target: PathBuf,
    pub seed: u64,
    /// Expected backbone configuration; checked against the checkpoint.
    #[serde(default)]
    pub backbone: Option<VitConfig>,
    pub atha: AthaSettings,
    pub finetune: FinetuneConfig,
    pub protocol: Protocol,
    #[serde(default)]
    pub analysis: AnalysisSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::new(PathBuf::new(), PathBuf::new())
    }
}

impl RunConfig {
    pub fn new(checkpoint: PathBuf, target: PathBuf) -> Self {
        RunConfig {
            run_tag: "run".into(),
            checkpoint,
            target,
            seed: 0,
            backbone: None,
            atha: AthaSettings::default(),
            finetune: FinetuneConfig::default(),
            protocol: Protocol::default(),
            analysis: AnalysisSettings::default(),
        }
    }

    /// Checks everything that can be checked without running an episode.
    pub fn validate(&self, model: &Model) -> Result<AthaParams> {
        if let Some(expected) = &self.backbone {
            if expected != &model.cfg {
                return Err(Error::Version(format!(
                    "checkpoint backbone {:?} does not match configured {:?}",
                    model.cfg, expected
                )));
            }
        }
        if self.run_tag.is_empty() || self.run_tag.contains(['/', '\\']) {
            return Err(Error::config(format!("run_tag {:?} is not a plain name", self.run_tag)));
        }
        if self.protocol.episodes == 0 {
            return Err(Error::config("episodes must be at least 1"));
        }
        if self.protocol.m_query == 0 {
            return Err(Error::config("m_query must be at least 1"));
        }
        if self.finetune.lora_rank == 0 || self.finetune.lora_rank > model.cfg.width {
            return Err(Error::config(format!("lora_rank {} out of range", self.finetune.lora_rank)));
        }
        if let Some(l) = self.analysis.curve_layer {
            if l > model.cfg.depth {
                return Err(Error::config(format!("curve_layer {l} exceeds depth {}", model.cfg.depth)));
            }
        }
        self.atha.to_params(model.cfg.depth)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub seed: u64,
    pub class_ids: Vec<usize>,
    pub accuracy: f64,
    pub final_loss: Option<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cka: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub curve_bottom_decile: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub curve_top_decile: Option<f64>,
}

pub struct EpisodeOutput {
    pub record: EpisodeRecord,
    pub log: Vec<EpochLog>,
    pub adapted: Adapted,
    pub curve: Option<Vec<f64>>,
}

pub fn episode_seed(run_seed: u64, episode: usize) -> u64 {
    derive_seed(run_seed, 0xe915, episode as u64)
}

/// Fine-tunes and evaluates one episode. `source` is used only for the CKA
/// probe after fine-tuning has finished.
pub fn run_episode(
    model: &Model,
    target: &Dataset,
    source: Option<&Dataset>,
    cfg: &RunConfig,
    atha: &AthaParams,
    episode: usize,
) -> Result<EpisodeOutput> {
    let seed = episode_seed(cfg.seed, episode);
    let p = &cfg.protocol;
    let ep = sample_episode(target, p.n_way, p.k_shot, p.m_query, seed)?;
    let outcome = finetune(model, &ep.support, atha, &cfg.finetune)?;
    let eval = evaluate(model, &outcome.adapted, &ep.query, ep.class_ids())?;
    let cka = match source {
        Some(src) => Some(
            domain_cka(
                model,
                &outcome.adapted,
                ep.class_ids(),
                src,
                target,
                cfg.analysis.cka_samples,
                derive_seed(seed, 0xc4a, 0),
                &cfg.run_tag,
            )?
            .value,
        ),
        None => None,
    };
    let curve = if cfg.analysis.curves {
        let images: Vec<_> = ep.query.iter().map(|s| s.image.clone()).collect();
        let layer = cfg.analysis.curve_layer.unwrap_or(model.cfg.depth);
        Some(similarity_curve(model, &outcome.adapted, &images, ep.class_ids(), layer, &cfg.run_tag, "target")?)
    } else {
        None
    };
    Ok(EpisodeOutput {
        record: EpisodeRecord {
            episode,
            seed,
            class_ids: ep.class_ids().to_vec(),
            accuracy: eval.accuracy,
            final_loss: outcome.log.last().map(|l| l.loss),
            alpha: outcome.adapted.atha.alpha.clone(),
            beta: outcome.adapted.atha.beta.clone(),
            cka,
            curve_bottom_decile: curve.as_ref().map(|c| c.bottom_decile_mean()),
            curve_top_decile: curve.as_ref().map(|c| c.top_decile_mean()),
        },
        log: outcome.log,
        adapted: outcome.adapted,
        curve: curve.map(|c| c.values),
    })
}

/// Runs every episode on a pool of `jobs` threads. Results are returned in
/// episode order and do not depend on `jobs`.
pub fn run_episodes(
    model: &Model,
    target: &Dataset,
    source: Option<&Dataset>,
    cfg: &RunConfig,
    jobs: usize,
) -> Result<Vec<EpisodeOutput>> {
    if target.domain != Domain::Target {
        return Err(Error::config("episodes are drawn from the target domain only"));
    }
    let atha = cfg.validate(model)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    pool.install(|| {
        (0..cfg.protocol.episodes)
            .into_par_iter()
            .map(|i| run_episode(model, target, source, cfg, &atha, i))
            .collect()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub run_tag: String,
    pub variant: Variant,
    pub metric: Metric,
    pub n_way: usize,
    pub k_shot: usize,
    pub episodes: usize,
    pub accuracy_mean: f64,
    pub accuracy_ci95: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cka_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub curve_bottom_decile_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub curve_top_decile_mean: Option<f64>,
}

fn mean_of(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v = xs.collect::<Option<Vec<f64>>>()?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn summarize(cfg: &RunConfig, records: &[EpisodeRecord]) -> Metrics {
    let acc: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
    let (m, ci) = mean_ci95(&acc);
    Metrics {
        run_tag: cfg.run_tag.clone(),
        variant: cfg.atha.variant,
        metric: cfg.atha.metric,
        n_way: cfg.protocol.n_way,
        k_shot: cfg.protocol.k_shot,
        episodes: records.len(),
        accuracy_mean: m,
        accuracy_ci95: ci,
        cka_mean: mean_of(records.iter().map(|r| r.cka)),
        curve_bottom_decile_mean: mean_of(records.iter().map(|r| r.curve_bottom_decile)),
        curve_top_decile_mean: mean_of(records.iter().map(|r| r.curve_top_decile)),
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, &item).map_err(|e| Error::json(path, e))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct TrainLogLine<'a> {
    episode: usize,
    #[serde(flatten)]
    log: &'a EpochLog,
}

/// Writes the run directory and returns the aggregate metrics.
pub fn write_run(dir: &Path, cfg: &RunConfig, outputs: &[EpisodeOutput]) -> Result<Metrics> {
    fsio::create_dir_all(dir)?;
    fsio::create_dir_all(&dir.join("checkpoints"))?;
    fsio::create_dir_all(&dir.join("analysis"))?;
    fsio::write_json(&dir.join("config.json"), cfg)?;
    let records: Vec<EpisodeRecord> = outputs.iter().map(|o| o.record.clone()).collect();
    write_jsonl(&dir.join("episodes.jsonl"), &records)?;
    write_jsonl(
        &dir.join("train_log.jsonl"),
        outputs
            .iter()
            .flat_map(|o| o.log.iter().map(move |l| TrainLogLine { episode: o.record.episode, log: l })),
    )?;
    if cfg.analysis.save_adapters {
        for o in outputs {
            checkpoint::save_adapted(&o.adapted, &dir.join("checkpoints").join(format!("episode_{:05}", o.record.episode)))?;
        }
    }
    if cfg.analysis.curves {
        let mut pooled: Vec<f64> = outputs.iter().filter_map(|o| o.curve.clone()).flatten().collect();
        pooled.sort_by(f64::total_cmp);
        let mut csv = String::from("rank,similarity\n");
        for (i, v) in pooled.iter().enumerate() {
            csv.push_str(&format!("{i},{v}\n"));
        }
        let path = dir.join("analysis").join(format!("{}__simcurve.csv", cfg.run_tag));
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    }
    let metrics = summarize(cfg, &records);
    fsio::write_json(&dir.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

/// Reads a run directory back as input for the comparison report.
pub fn load_run(dir: &Path) -> Result<RunEpisodes> {
    let cfg: RunConfig = fsio::read_json(&dir.join("config.json"))
        .map_err(|e| Error::Lookup(format!("run {}: {e}", dir.display())))?;
    let path = dir.join("episodes.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let episodes = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let r: EpisodeRecord = serde_json::from_str(l).map_err(|e| Error::json(&path, e))?;
            Ok(EpisodeSummary {
                episode: r.episode,
                accuracy: r.accuracy,
                cka: r.cka,
                curve_bottom_decile: r.curve_bottom_decile,
                curve_top_decile: r.curve_top_decile,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunEpisodes {
        tag: cfg.run_tag,
        variant: cfg.atha.variant.as_str().to_string(),
        episodes,
    })
}
