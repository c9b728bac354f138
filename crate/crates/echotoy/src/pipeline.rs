//! End-to-end pipeline orchestration.
//!
//! This module ties the library together into named stages that communicate
//! exclusively through files in an output directory:
//!
//! ```text
//! gen-data    -> real-{train,val,test}.etd
//! train-avae  -> avae.ckpt
//! encode      -> latents-{train,val,test}.elat
//! train-lifm  -> lifm.ckpt
//! train-reid  -> reid.ckpt
//! filter      -> reid-index.reid, anatomies.anat
//! train-lvfm  -> lvfm.ckpt
//! synthesize  -> {npc,pc}-{train,val,test}.etd
//! train-ef    -> ef-{real,recon,npc,pc}.ckpt, {npc,pc}-{split}-rl.etd
//! evaluate    -> metrics.json
//! report      -> report.json, report.csv
//! ```
//!
//! Each run is described by a [`PipelineConfig`] whose canonical rendering is
//! hashed; the hash is stamped into every checkpoint and into the run
//! manifest, so mixing artifacts from different configurations fails loudly
//! with [`Error::StaleArtifact`] instead of silently producing nonsense.
//! Stages only append to the manifest — re-running a stage adds a new record
//! rather than rewriting history.
//!
//! A "pc" (privacy-controlled) dataset contains only anatomies that passed
//! the re-identification filter; "npc" (non-privacy-controlled) takes the
//! candidate pool as it came out of the image flow. Rejected anatomies are
//! replaced from the unused accepted remainder of the pool, so both variants
//! have identical shape and share the videos of every anatomy they have in
//! common.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::avae::{
    self, mask_to_latent, Avae, AvaeArch, AvaeTrainSpec, AvaeWeights, Discriminator, LatentStats,
};
use crate::ckpt::{fnv1a, read_file, ByteReader, ByteWriter};
use crate::downstream::{
    feature_frechet, metrics, relabel, train_regressor, EfArch, EfRegressor, EfTrainSpec,
    RegressionMetrics,
};
use crate::echodata::{gen_dataset, load_dataset, save_dataset, ToyConfig, VideoSample};
use crate::error::{Error, Result};
use crate::flowmatch::{
    sample_euler_batch, train_image_flow, train_video_flow, Cond, FlowArch, FlowModel,
    FlowTrainSpec, FlowVariant, ImageExample, NegSelector, SamplerSpec, VideoExample,
};
use crate::reid::{
    build_index, calibrate_tau, filter_embeddings, load_index, pair_accuracy, pearson, save_index,
    train_reid, LatentVideo, ReIdArch, ReIdEncoder, ReIdTrainSpec,
};
use crate::rng::{self, domains};
use crate::Tensor;

// ───────────────────────── configuration ─────────────────────────

/// `[data]`: dataset sizes and the generator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub image_size: usize,
    pub frames: usize,
    pub beats: (f32, f32),
    pub d_ed: (f32, f32),
    pub d_es: (f32, f32),
    pub speckle: f32,
    pub texture: f32,
}

/// `[avae]`: autoencoder architecture and training budget.
#[derive(Debug, Clone, PartialEq)]
pub struct AvaeSection {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub disc_channels: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub lambda_adv: f32,
    pub gamma_kl: f32,
    pub warmup: f32,
}

/// `[lifm]` / `[lvfm]`: one flow-matching model each.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSection {
    pub channels: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub p_drop: f32,
    pub p_drop_all: f32,
}

/// `[sampler]`: Euler integration and guidance settings used by `filter`
/// (image variant) and `synthesize` (video variant).
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSection {
    pub steps: usize,
    pub image_lambda: f32,
    pub image_negative: NegSelector,
    pub video_lambda: f32,
    pub video_negative: NegSelector,
}

/// `[reid]`: re-identification encoder and threshold calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct ReidSection {
    pub dim: usize,
    pub channels: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub percentile: f64,
    /// Pair count for the validation accuracy probe recorded by `train-reid`.
    pub pairs: usize,
}

/// `[synthesize]`: synthetic dataset assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSection {
    pub videos_per_anatomy: usize,
    pub ef_lo: f32,
    pub ef_hi: f32,
    /// Candidate pool size as a multiple of the anatomies actually needed;
    /// the slack absorbs privacy rejections.
    pub pool_factor: f64,
}

/// `[ef]`: downstream regressor training.
#[derive(Debug, Clone, PartialEq)]
pub struct EfSection {
    pub channels: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
}

/// `[run]`: the master seed every stage derives its streams from.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSection {
    pub seed: u64,
}

/// Full pipeline configuration. Parsed from a line-oriented
/// `key = value` file with `[section]` headers; `#` starts a comment.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub data: DataSection,
    pub avae: AvaeSection,
    pub lifm: FlowSection,
    pub lvfm: FlowSection,
    pub sampler: SamplerSection,
    pub reid: ReidSection,
    pub synth: SynthSection,
    pub ef: EfSection,
    pub run: RunSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data: DataSection {
                train: 500,
                val: 100,
                test: 100,
                image_size: 32,
                frames: 16,
                beats: (1.0, 2.0),
                d_ed: (4.0, 4.4),
                d_es: (1.5, 3.9),
                speckle: 0.2,
                texture: 0.6,
            },
            avae: AvaeSection {
                latent_channels: 2,
                base_channels: 12,
                disc_channels: 8,
                steps: 2400,
                batch: 16,
                lr: 1e-3,
                lambda_adv: 0.1,
                gamma_kl: 1e-6,
                warmup: 0.3,
            },
            lifm: FlowSection {
                channels: 16,
                steps: 2400,
                batch: 16,
                lr: 1e-3,
                p_drop: 0.1,
                p_drop_all: 0.1,
            },
            lvfm: FlowSection {
                channels: 12,
                steps: 3000,
                batch: 8,
                lr: 1e-3,
                p_drop: 0.1,
                p_drop_all: 0.1,
            },
            sampler: SamplerSection {
                steps: 30,
                image_lambda: 1.0,
                image_negative: NegSelector::None,
                video_lambda: 1.0,
                video_negative: NegSelector::None,
            },
            reid: ReidSection {
                dim: 64,
                channels: 12,
                steps: 3000,
                batch: 16,
                lr: 1e-3,
                percentile: 95.0,
                pairs: 400,
            },
            synth: SynthSection {
                videos_per_anatomy: 2,
                ef_lo: 25.0,
                ef_hi: 95.0,
                pool_factor: 1.6,
            },
            ef: EfSection {
                channels: 8,
                epochs: 60,
                batch: 8,
                lr: 3e-3,
            },
            run: RunSection { seed: 7 },
        }
    }
}

fn parse_num<T: std::str::FromStr>(value: &str, line: usize, key: &str) -> Result<T> {
    value.parse::<T>().map_err(|_| {
        Error::Config(format!("line {line}: cannot parse `{value}` for key `{key}`"))
    })
}

impl PipelineConfig {
    /// Parse the line-oriented config format. Unknown sections, unknown keys
    /// and duplicate keys are errors; omitted keys keep their defaults.
    /// Syntax only — call [`PipelineConfig::validate`] before using the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let mut section = String::new();
        let mut seen: BTreeSet<(String, String)> = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| {
                    Error::Config(format!("line {ln}: unterminated section header `{raw}`"))
                })?;
                section = name.trim().to_string();
                if !SECTIONS.contains(&section.as_str()) {
                    return Err(Error::Config(format!(
                        "line {ln}: unknown section `[{section}]` (expected one of {})",
                        SECTIONS.join(", ")
                    )));
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {ln}: expected `key = value`, got `{raw}`"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if section.is_empty() {
                return Err(Error::Config(format!(
                    "line {ln}: key `{key}` appears before any [section] header"
                )));
            }
            if !seen.insert((section.clone(), key.to_string())) {
                return Err(Error::Config(format!(
                    "line {ln}: duplicate key `{key}` in section [{section}]"
                )));
            }
            cfg.set(&section, key, value, ln)?;
        }
        Ok(cfg)
    }

    /// Read, parse, and validate a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::parse(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, v: &str, ln: usize) -> Result<()> {
        match (section, key) {
            ("data", "train") => self.data.train = parse_num(v, ln, key)?,
            ("data", "val") => self.data.val = parse_num(v, ln, key)?,
            ("data", "test") => self.data.test = parse_num(v, ln, key)?,
            ("data", "image_size") => self.data.image_size = parse_num(v, ln, key)?,
            ("data", "frames") => self.data.frames = parse_num(v, ln, key)?,
            ("data", "beats_lo") => self.data.beats.0 = parse_num(v, ln, key)?,
            ("data", "beats_hi") => self.data.beats.1 = parse_num(v, ln, key)?,
            ("data", "d_ed_lo") => self.data.d_ed.0 = parse_num(v, ln, key)?,
            ("data", "d_ed_hi") => self.data.d_ed.1 = parse_num(v, ln, key)?,
            ("data", "d_es_lo") => self.data.d_es.0 = parse_num(v, ln, key)?,
            ("data", "d_es_hi") => self.data.d_es.1 = parse_num(v, ln, key)?,
            ("data", "speckle") => self.data.speckle = parse_num(v, ln, key)?,
            ("data", "texture") => self.data.texture = parse_num(v, ln, key)?,
            ("avae", "latent_channels") => self.avae.latent_channels = parse_num(v, ln, key)?,
            ("avae", "base_channels") => self.avae.base_channels = parse_num(v, ln, key)?,
            ("avae", "disc_channels") => self.avae.disc_channels = parse_num(v, ln, key)?,
            ("avae", "steps") => self.avae.steps = parse_num(v, ln, key)?,
            ("avae", "batch") => self.avae.batch = parse_num(v, ln, key)?,
            ("avae", "lr") => self.avae.lr = parse_num(v, ln, key)?,
            ("avae", "lambda_adv") => self.avae.lambda_adv = parse_num(v, ln, key)?,
            ("avae", "gamma_kl") => self.avae.gamma_kl = parse_num(v, ln, key)?,
            ("avae", "warmup") => self.avae.warmup = parse_num(v, ln, key)?,
            ("lifm", _) | ("lvfm", _) => {
                let s = if section == "lifm" { &mut self.lifm } else { &mut self.lvfm };
                match key {
                    "channels" => s.channels = parse_num(v, ln, key)?,
                    "steps" => s.steps = parse_num(v, ln, key)?,
                    "batch" => s.batch = parse_num(v, ln, key)?,
                    "lr" => s.lr = parse_num(v, ln, key)?,
                    "p_drop" => s.p_drop = parse_num(v, ln, key)?,
                    "p_drop_all" => s.p_drop_all = parse_num(v, ln, key)?,
                    _ => return unknown_key(section, key, ln),
                }
            }
            ("sampler", "steps") => self.sampler.steps = parse_num(v, ln, key)?,
            ("sampler", "image_lambda") => self.sampler.image_lambda = parse_num(v, ln, key)?,
            ("sampler", "image_negative") => self.sampler.image_negative = NegSelector::parse(v)?,
            ("sampler", "video_lambda") => self.sampler.video_lambda = parse_num(v, ln, key)?,
            ("sampler", "video_negative") => self.sampler.video_negative = NegSelector::parse(v)?,
            ("reid", "dim") => self.reid.dim = parse_num(v, ln, key)?,
            ("reid", "channels") => self.reid.channels = parse_num(v, ln, key)?,
            ("reid", "steps") => self.reid.steps = parse_num(v, ln, key)?,
            ("reid", "batch") => self.reid.batch = parse_num(v, ln, key)?,
            ("reid", "lr") => self.reid.lr = parse_num(v, ln, key)?,
            ("reid", "percentile") => self.reid.percentile = parse_num(v, ln, key)?,
            ("reid", "pairs") => self.reid.pairs = parse_num(v, ln, key)?,
            ("synthesize", "videos_per_anatomy") => {
                self.synth.videos_per_anatomy = parse_num(v, ln, key)?
            }
            ("synthesize", "ef_lo") => self.synth.ef_lo = parse_num(v, ln, key)?,
            ("synthesize", "ef_hi") => self.synth.ef_hi = parse_num(v, ln, key)?,
            ("synthesize", "pool_factor") => self.synth.pool_factor = parse_num(v, ln, key)?,
            ("ef", "channels") => self.ef.channels = parse_num(v, ln, key)?,
            ("ef", "epochs") => self.ef.epochs = parse_num(v, ln, key)?,
            ("ef", "batch") => self.ef.batch = parse_num(v, ln, key)?,
            ("ef", "lr") => self.ef.lr = parse_num(v, ln, key)?,
            ("run", "seed") => self.run.seed = parse_num(v, ln, key)?,
            _ => return unknown_key(section, key, ln),
        }
        Ok(())
    }

    /// Canonical rendering: every key in a fixed order. Parsing the result
    /// reproduces the config exactly, and its FNV-1a hash identifies the run.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let d = &self.data;
        let _ = writeln!(s, "[data]");
        let _ = writeln!(s, "train = {}", d.train);
        let _ = writeln!(s, "val = {}", d.val);
        let _ = writeln!(s, "test = {}", d.test);
        let _ = writeln!(s, "image_size = {}", d.image_size);
        let _ = writeln!(s, "frames = {}", d.frames);
        let _ = writeln!(s, "beats_lo = {}", d.beats.0);
        let _ = writeln!(s, "beats_hi = {}", d.beats.1);
        let _ = writeln!(s, "d_ed_lo = {}", d.d_ed.0);
        let _ = writeln!(s, "d_ed_hi = {}", d.d_ed.1);
        let _ = writeln!(s, "d_es_lo = {}", d.d_es.0);
        let _ = writeln!(s, "d_es_hi = {}", d.d_es.1);
        let _ = writeln!(s, "speckle = {}", d.speckle);
        let _ = writeln!(s, "texture = {}", d.texture);
        let a = &self.avae;
        let _ = writeln!(s, "\n[avae]");
        let _ = writeln!(s, "latent_channels = {}", a.latent_channels);
        let _ = writeln!(s, "base_channels = {}", a.base_channels);
        let _ = writeln!(s, "disc_channels = {}", a.disc_channels);
        let _ = writeln!(s, "steps = {}", a.steps);
        let _ = writeln!(s, "batch = {}", a.batch);
        let _ = writeln!(s, "lr = {}", a.lr);
        let _ = writeln!(s, "lambda_adv = {}", a.lambda_adv);
        let _ = writeln!(s, "gamma_kl = {}", a.gamma_kl);
        let _ = writeln!(s, "warmup = {}", a.warmup);
        for (name, f) in [("lifm", &self.lifm), ("lvfm", &self.lvfm)] {
            let _ = writeln!(s, "\n[{name}]");
            let _ = writeln!(s, "channels = {}", f.channels);
            let _ = writeln!(s, "steps = {}", f.steps);
            let _ = writeln!(s, "batch = {}", f.batch);
            let _ = writeln!(s, "lr = {}", f.lr);
            let _ = writeln!(s, "p_drop = {}", f.p_drop);
            let _ = writeln!(s, "p_drop_all = {}", f.p_drop_all);
        }
        let sm = &self.sampler;
        let _ = writeln!(s, "\n[sampler]");
        let _ = writeln!(s, "steps = {}", sm.steps);
        let _ = writeln!(s, "image_lambda = {}", sm.image_lambda);
        let _ = writeln!(s, "image_negative = {}", sm.image_negative.as_str());
        let _ = writeln!(s, "video_lambda = {}", sm.video_lambda);
        let _ = writeln!(s, "video_negative = {}", sm.video_negative.as_str());
        let r = &self.reid;
        let _ = writeln!(s, "\n[reid]");
        let _ = writeln!(s, "dim = {}", r.dim);
        let _ = writeln!(s, "channels = {}", r.channels);
        let _ = writeln!(s, "steps = {}", r.steps);
        let _ = writeln!(s, "batch = {}", r.batch);
        let _ = writeln!(s, "lr = {}", r.lr);
        let _ = writeln!(s, "percentile = {}", r.percentile);
        let _ = writeln!(s, "pairs = {}", r.pairs);
        let sy = &self.synth;
        let _ = writeln!(s, "\n[synthesize]");
        let _ = writeln!(s, "videos_per_anatomy = {}", sy.videos_per_anatomy);
        let _ = writeln!(s, "ef_lo = {}", sy.ef_lo);
        let _ = writeln!(s, "ef_hi = {}", sy.ef_hi);
        let _ = writeln!(s, "pool_factor = {}", sy.pool_factor);
        let e = &self.ef;
        let _ = writeln!(s, "\n[ef]");
        let _ = writeln!(s, "channels = {}", e.channels);
        let _ = writeln!(s, "epochs = {}", e.epochs);
        let _ = writeln!(s, "batch = {}", e.batch);
        let _ = writeln!(s, "lr = {}", e.lr);
        let _ = writeln!(s, "\n[run]");
        let _ = writeln!(s, "seed = {}", self.run.seed);
        s
    }

    /// FNV-1a hash of the canonical rendering.
    pub fn hash(&self) -> u64 {
        fnv1a(self.render().as_bytes())
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.hash())
    }

    pub fn toy(&self) -> ToyConfig {
        ToyConfig {
            image_size: self.data.image_size,
            frames: self.data.frames,
            beats_range: self.data.beats,
            d_ed_range: self.data.d_ed,
            d_es_range: self.data.d_es,
            speckle: self.data.speckle,
            texture: self.data.texture,
        }
    }

    fn avae_arch(&self) -> AvaeArch {
        AvaeArch {
            image_size: self.data.image_size,
            latent_channels: self.avae.latent_channels,
            base_channels: self.avae.base_channels,
        }
    }

    fn latent_size(&self) -> usize {
        self.data.image_size / avae::COMPRESSION
    }

    fn reid_arch(&self) -> ReIdArch {
        ReIdArch {
            latent_channels: self.avae.latent_channels,
            latent_size: self.latent_size(),
            channels: self.reid.channels,
            dim: self.reid.dim,
        }
    }

    fn ef_arch(&self) -> EfArch {
        EfArch {
            frames: self.data.frames,
            image_size: self.data.image_size,
            channels: self.ef.channels,
        }
    }

    fn image_sampler(&self) -> SamplerSpec {
        SamplerSpec {
            steps: self.sampler.steps,
            lambda_cfg: self.sampler.image_lambda,
            negative: self.sampler.image_negative,
            seed: 0,
        }
    }

    fn video_sampler(&self) -> SamplerSpec {
        SamplerSpec {
            steps: self.sampler.steps,
            lambda_cfg: self.sampler.video_lambda,
            negative: self.sampler.video_negative,
            seed: 0,
        }
    }

    /// Cross-field checks beyond what the individual module specs enforce.
    pub fn validate(&self) -> Result<()> {
        self.toy().validate()?;
        self.avae_arch().validate()?;
        self.reid_arch().validate()?;
        self.ef_arch().validate()?;
        FlowArch::image(self.avae.latent_channels, self.latent_size(), self.lifm.channels)
            .validate()?;
        FlowArch::video(
            self.avae.latent_channels,
            self.latent_size(),
            self.data.frames,
            self.lvfm.channels,
        )
        .validate()?;
        self.image_sampler().validate()?;
        self.video_sampler().validate()?;
        let d = &self.data;
        if d.train == 0 || d.val == 0 || d.test == 0 {
            return Err(Error::Config("every split needs at least one video".into()));
        }
        let vpa = self.synth.videos_per_anatomy;
        if vpa == 0 {
            return Err(Error::Config("videos_per_anatomy must be at least 1".into()));
        }
        for (name, count) in [("train", d.train), ("val", d.val), ("test", d.test)] {
            if count % vpa != 0 {
                return Err(Error::Config(format!(
                    "{name} count {count} is not divisible by videos_per_anatomy {vpa}; \
                     splits must hold whole anatomies"
                )));
            }
        }
        if !(0.0 < self.synth.ef_lo && self.synth.ef_lo < self.synth.ef_hi && self.synth.ef_hi < 100.0)
        {
            return Err(Error::Config(format!(
                "EF conditioning range ({}, {}) must satisfy 0 < lo < hi < 100",
                self.synth.ef_lo, self.synth.ef_hi
            )));
        }
        if !(self.synth.pool_factor >= 1.0) {
            return Err(Error::Config(format!(
                "pool_factor {} must be >= 1 so the pool covers the anatomy quota",
                self.synth.pool_factor
            )));
        }
        if !(0.0 < self.reid.percentile && self.reid.percentile <= 100.0) {
            return Err(Error::Config(format!(
                "percentile {} must lie in (0, 100]",
                self.reid.percentile
            )));
        }
        if self.reid.pairs == 0 {
            return Err(Error::Config("reid pairs must be at least 1".into()));
        }
        if self.avae.steps == 0 || self.lifm.steps == 0 || self.lvfm.steps == 0 || self.reid.steps == 0
        {
            return Err(Error::Config("every training stage needs at least one step".into()));
        }
        if self.ef.epochs == 0 {
            return Err(Error::Config("ef epochs must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of distinct anatomies the synthetic datasets require.
    pub fn anatomies_needed(&self) -> usize {
        let total = self.data.train + self.data.val + self.data.test;
        total / self.synth.videos_per_anatomy
    }

    /// Candidate pool size sampled by the `filter` stage.
    pub fn pool_size(&self) -> usize {
        (self.anatomies_needed() as f64 * self.synth.pool_factor).ceil() as usize
    }
}

const SECTIONS: [&str; 9] = [
    "data", "avae", "lifm", "lvfm", "sampler", "reid", "synthesize", "ef", "run",
];

fn unknown_key(section: &str, key: &str, ln: usize) -> Result<()> {
    Err(Error::Config(format!(
        "line {ln}: unknown key `{key}` in section [{section}]"
    )))
}

// ───────────────────────── run manifest ─────────────────────────

/// One completed stage execution. `wall_ms` is informational only and is
/// excluded from any determinism comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub wall_ms: u64,
    pub artifacts: Vec<String>,
    pub info: serde_json::Value,
}

/// Append-only journal of everything that ran in an output directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub master_seed: u64,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn new(config_hash: String, master_seed: u64) -> Self {
        RunManifest {
            config_hash,
            master_seed,
            stages: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            offset: 0,
            detail: format!("{}: {e}", path.display()),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            offset: 0,
            detail: format!("manifest serialization: {e}"),
        })?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Most recent record for a stage, if it ever ran.
    pub fn latest(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().rev().find(|s| s.name == name)
    }
}

// ───────────────────────── artifact formats ─────────────────────────

/// Per-video latent posteriors plus the conditioning attached to them.
#[derive(Debug, Clone)]
pub struct LatentSample {
    pub id: u64,
    pub view: u32,
    pub ef: f32,
    /// Ventricle mask at latent resolution, `[h,w]`.
    pub mask: Tensor,
    /// `[T,K,h,w]` posterior means.
    pub mu: Tensor,
    /// `[T,K,h,w]` posterior standard deviations.
    pub sigma: Tensor,
}

const LATENT_MAGIC: &[u8; 4] = b"ELT1";

pub fn save_latents(samples: &[LatentSample], path: &Path) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::contract("save_latents", "empty sample list"));
    }
    let s0 = samples[0].mu.shape().to_vec();
    if s0.len() != 4 {
        return Err(Error::shape("save_latents", format!("expected [t,k,h,w], got {s0:?}")));
    }
    let mut w = ByteWriter::new();
    w.bytes(LATENT_MAGIC);
    w.u32(samples.len() as u32);
    for d in &s0 {
        w.u32(*d as u32);
    }
    for s in samples {
        if s.mu.shape() != s0 || s.sigma.shape() != s0 {
            return Err(Error::shape(
                "save_latents",
                format!("mixed shapes: {:?} vs {s0:?}", s.mu.shape()),
            ));
        }
        if s.mask.shape() != [s0[2], s0[3]] {
            return Err(Error::shape(
                "save_latents",
                format!("mask {:?} vs latent [{},{}]", s.mask.shape(), s0[2], s0[3]),
            ));
        }
        w.u64(s.id);
        w.u32(s.view);
        w.f32(s.ef);
        w.f32_slice(s.mask.data());
        w.f32_slice(s.mu.data());
        w.f32_slice(s.sigma.data());
    }
    w.write_file(path)
}

pub fn load_latents(path: &Path) -> Result<Vec<LatentSample>> {
    let data = read_file(path)?;
    let mut r = ByteReader::new(&data);
    r.magic(LATENT_MAGIC)?;
    let count = r.u32()? as usize;
    let (t, k, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.u64()?;
        let view = r.u32()?;
        let ef = r.f32()?;
        let mask = Tensor::new([h, w], r.f32_vec(h * w)?)?;
        let mu = Tensor::new([t, k, h, w], r.f32_vec(t * k * h * w)?)?;
        let sigma = Tensor::new([t, k, h, w], r.f32_vec(t * k * h * w)?)?;
        out.push(LatentSample { id, view, ef, mask, mu, sigma });
    }
    r.done()?;
    Ok(out)
}

/// One candidate anatomy produced by the image flow, with its privacy verdict.
#[derive(Debug, Clone)]
pub struct AnatomySample {
    pub id: u64,
    pub view: u32,
    pub accepted: bool,
    /// Maximum correlation against the training index at filter time.
    pub rho_max: f64,
    /// Pixel-resolution ventricle mask inherited from the conditioning source.
    pub mask: Vec<u8>,
    /// `[K,h,w]` latent in raw (de-normalized) space.
    pub latent: Tensor,
}

/// The full candidate pool plus the threshold it was filtered with.
#[derive(Debug, Clone)]
pub struct AnatomyPool {
    pub tau: f64,
    pub percentile: f64,
    pub image_size: usize,
    pub entries: Vec<AnatomySample>,
}

const ANATOMY_MAGIC: &[u8; 4] = b"ANA1";

pub fn save_anatomies(pool: &AnatomyPool, path: &Path) -> Result<()> {
    if pool.entries.is_empty() {
        return Err(Error::contract("save_anatomies", "empty pool"));
    }
    let s0 = pool.entries[0].latent.shape().to_vec();
    if s0.len() != 3 {
        return Err(Error::shape("save_anatomies", format!("expected [k,h,w], got {s0:?}")));
    }
    let px = pool.image_size * pool.image_size;
    let mut w = ByteWriter::new();
    w.bytes(ANATOMY_MAGIC);
    w.u32(pool.entries.len() as u32);
    for d in &s0 {
        w.u32(*d as u32);
    }
    w.u32(pool.image_size as u32);
    w.u64(pool.tau.to_bits());
    w.u64(pool.percentile.to_bits());
    for e in &pool.entries {
        if e.latent.shape() != s0 {
            return Err(Error::shape(
                "save_anatomies",
                format!("mixed latent shapes: {:?} vs {s0:?}", e.latent.shape()),
            ));
        }
        if e.mask.len() != px {
            return Err(Error::shape(
                "save_anatomies",
                format!("mask length {} vs image {}^2", e.mask.len(), pool.image_size),
            ));
        }
        w.u64(e.id);
        w.u32(e.view);
        w.u8(e.accepted as u8);
        w.u64(e.rho_max.to_bits());
        w.bytes(&e.mask);
        w.f32_slice(e.latent.data());
    }
    w.write_file(path)
}

pub fn load_anatomies(path: &Path) -> Result<AnatomyPool> {
    let data = read_file(path)?;
    let mut r = ByteReader::new(&data);
    r.magic(ANATOMY_MAGIC)?;
    let count = r.u32()? as usize;
    let (k, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let image_size = r.u32()? as usize;
    let tau = f64::from_bits(r.u64()?);
    let percentile = f64::from_bits(r.u64()?);
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.u64()?;
        let view = r.u32()?;
        let accepted = r.u8()? != 0;
        let rho_max = f64::from_bits(r.u64()?);
        let mask = r.u8_vec(image_size * image_size)?;
        let latent = Tensor::new([k, h, w], r.f32_vec(k * h * w)?)?;
        entries.push(AnatomySample { id, view, accepted, rho_max, mask, latent });
    }
    r.done()?;
    Ok(AnatomyPool { tau, percentile, image_size, entries })
}

// ───────────────────────── assembly planning ─────────────────────────

/// Which pool indices each synthetic variant uses, in dataset order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssemblePlan {
    pub npc: Vec<usize>,
    pub pc: Vec<usize>,
}

/// Choose anatomies for both variants. The non-privacy-controlled list takes
/// the first `needed` pool entries verbatim; the privacy-controlled list
/// keeps the accepted ones among those and replaces every rejection with an
/// unused accepted entry from the remainder of the pool. Runs out of
/// replacements -> [`Error::Quota`] reporting the shortfall.
pub fn plan_assembly(accepted: &[bool], needed: usize) -> Result<AssemblePlan> {
    if needed == 0 {
        return Err(Error::contract("plan_assembly", "needed must be positive"));
    }
    if accepted.len() < needed {
        return Err(Error::contract(
            "plan_assembly",
            format!("pool of {} cannot cover {needed} anatomies", accepted.len()),
        ));
    }
    let npc: Vec<usize> = (0..needed).collect();
    let mut pc: Vec<usize> = (0..needed).filter(|&i| accepted[i]).collect();
    let mut spare = (needed..accepted.len()).filter(|&i| accepted[i]);
    while pc.len() < needed {
        match spare.next() {
            Some(i) => pc.push(i),
            None => {
                let have = accepted.iter().filter(|&&a| a).count();
                return Err(Error::Quota(format!(
                    "privacy filter accepted {have} of {} candidates but {needed} anatomies \
                     are required (short by {})",
                    accepted.len(),
                    needed - have
                )));
            }
        }
    }
    Ok(AssemblePlan { npc, pc })
}

// ───────────────────────── report document ─────────────────────────

/// The `{r2, mae, rmse}` block written per variant in `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricBlock {
    pub r2: f64,
    pub mae: f64,
    pub rmse: f64,
}

impl From<&RegressionMetrics> for MetricBlock {
    fn from(m: &RegressionMetrics) -> Self {
        MetricBlock { r2: m.r2, mae: m.mae, rmse: m.rmse }
    }
}

/// Top-level schema of `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportDoc {
    pub config_hash: String,
    pub stages: Vec<String>,
    pub metrics: BTreeMap<String, MetricBlock>,
    pub parity_gaps: BTreeMap<String, f64>,
}

/// R² gap of every non-real variant relative to `real` (positive = the
/// real-trained regressor was better). All variants must have been evaluated
/// on the same number of test samples.
pub fn parity_gaps(metrics: &BTreeMap<String, RegressionMetrics>) -> Result<BTreeMap<String, f64>> {
    let real = metrics
        .get("real")
        .ok_or_else(|| Error::contract("parity_gaps", "missing `real` variant"))?;
    let mut gaps = BTreeMap::new();
    for (name, m) in metrics {
        if name == "real" {
            continue;
        }
        if m.n != real.n {
            return Err(Error::contract(
                "parity_gaps",
                format!(
                    "variant `{name}` was evaluated on {} samples but `real` on {}; \
                     parity requires a common test set",
                    m.n, real.n
                ),
            ));
        }
        gaps.insert(name.clone(), real.r2 - m.r2);
    }
    Ok(gaps)
}

// ───────────────────────── stage runner ─────────────────────────

/// Stage names in dependency order; `run_e2e` executes them left to right.
pub const STAGE_NAMES: [&str; 11] = [
    "gen-data",
    "train-avae",
    "encode",
    "train-lifm",
    "train-reid",
    "filter",
    "train-lvfm",
    "synthesize",
    "train-ef",
    "evaluate",
    "report",
];

const ID_VAL: u64 = 1_000_000;
const ID_TEST: u64 = 2_000_000;
const ID_POOL: u64 = 3_000_000;

/// Everything a stage needs: the validated config, the artifact directory,
/// and whether staleness checks may be overridden.
#[derive(Debug, Clone)]
pub struct StageCtx {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
    pub force: bool,
}

impl StageCtx {
    pub fn new(cfg: PipelineConfig, out: impl Into<PathBuf>, force: bool) -> Self {
        StageCtx { cfg, out: out.into(), force }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn master(&self) -> u64 {
        self.cfg.run.seed
    }

    /// Resolve an artifact another stage must have produced.
    fn require(&self, name: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact { path: p, stage: producer.to_string() })
        }
    }

    /// Reject checkpoints written under a different configuration.
    fn check_hash(&self, path: &Path, found: u64) -> Result<()> {
        let want = self.cfg.hash();
        if found != want && !self.force {
            return Err(Error::StaleArtifact {
                path: path.to_path_buf(),
                detail: format!("built under config {found:016x}, current config is {want:016x}"),
            });
        }
        Ok(())
    }
}

fn open_manifest(ctx: &StageCtx) -> Result<RunManifest> {
    let path = ctx.path("manifest.json");
    let hex = ctx.cfg.hash_hex();
    if path.exists() {
        let m = RunManifest::load(&path)?;
        if m.config_hash != hex {
            if !ctx.force {
                return Err(Error::StaleArtifact {
                    path,
                    detail: format!(
                        "directory was produced under config {}, current config is {hex}",
                        m.config_hash
                    ),
                });
            }
            return Ok(RunManifest::new(hex, ctx.master()));
        }
        Ok(m)
    } else {
        Ok(RunManifest::new(hex, ctx.master()))
    }
}

/// Execute one named stage and append its record to the run manifest.
pub fn run_stage(ctx: &StageCtx, name: &str) -> Result<StageRecord> {
    ctx.cfg.validate()?;
    fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    let mut manifest = open_manifest(ctx)?;
    let started = Instant::now();
    log::info!("stage {name} starting");
    let (info, artifacts) = match name {
        "gen-data" => stage_gen_data(ctx)?,
        "train-avae" => stage_train_avae(ctx)?,
        "encode" => stage_encode(ctx)?,
        "train-lifm" => stage_train_lifm(ctx)?,
        "train-reid" => stage_train_reid(ctx)?,
        "filter" => stage_filter(ctx)?,
        "train-lvfm" => stage_train_lvfm(ctx)?,
        "synthesize" => stage_synthesize(ctx)?,
        "train-ef" => stage_train_ef(ctx)?,
        "evaluate" => stage_evaluate(ctx)?,
        "report" => stage_report(ctx, &manifest)?,
        other => {
            return Err(Error::Config(format!(
                "unknown stage `{other}` (expected one of {})",
                STAGE_NAMES.join(", ")
            )))
        }
    };
    let record = StageRecord {
        name: name.to_string(),
        wall_ms: started.elapsed().as_millis() as u64,
        artifacts,
        info,
    };
    manifest.stages.push(record.clone());
    manifest.save(&ctx.path("manifest.json"))?;
    log::info!("stage {name} done in {} ms", record.wall_ms);
    Ok(record)
}

/// Run every stage in order, stopping after `upto` when given.
pub fn run_e2e(ctx: &StageCtx, upto: Option<&str>) -> Result<Vec<StageRecord>> {
    if let Some(u) = upto {
        if !STAGE_NAMES.contains(&u) {
            return Err(Error::Config(format!(
                "unknown stage `{u}` (expected one of {})",
                STAGE_NAMES.join(", ")
            )));
        }
    }
    let mut records = Vec::new();
    for name in STAGE_NAMES {
        records.push(run_stage(ctx, name)?);
        if upto == Some(name) {
            break;
        }
    }
    Ok(records)
}

type StageOutput = (serde_json::Value, Vec<String>);

// ───────────────────────── stages ─────────────────────────

fn stage_gen_data(ctx: &StageCtx) -> Result<StageOutput> {
    let toy = ctx.cfg.toy();
    let d = &ctx.cfg.data;
    let mut artifacts = Vec::new();
    for (split, count, base) in [("train", d.train, 0), ("val", d.val, ID_VAL), ("test", d.test, ID_TEST)]
    {
        let vids = gen_dataset(&toy, count, ctx.master(), base)?;
        let name = format!("real-{split}.etd");
        save_dataset(&vids, &ctx.path(&name))?;
        artifacts.push(name);
    }
    Ok((json!({ "train": d.train, "val": d.val, "test": d.test }), artifacts))
}

fn stage_train_avae(ctx: &StageCtx) -> Result<StageOutput> {
    let train = load_dataset(&ctx.require("real-train.etd", "gen-data")?)?;
    let a = &ctx.cfg.avae;
    let mut model = Avae::new(ctx.cfg.avae_arch(), ctx.master())?;
    let mut disc = Discriminator::new(ctx.cfg.data.image_size, a.disc_channels, ctx.master())?;
    let spec = AvaeTrainSpec {
        steps: a.steps,
        batch: a.batch,
        lr: a.lr,
        warmup_frac: a.warmup,
        weights: AvaeWeights { lambda_adv: a.lambda_adv, gamma_kl: a.gamma_kl },
        seed: ctx.master(),
    };
    let reports = avae::train_avae(&mut model, &mut disc, &train, &spec)?;
    model.save(&ctx.path("avae.ckpt"), &disc, ctx.cfg.hash())?;
    let first = reports.first().expect("nonzero steps");
    let last = reports.last().expect("nonzero steps");
    let info = json!({
        "rec_first": first.rec,
        "rec_last": last.rec,
        "kl_last": last.kl,
        "disc_last": last.disc,
    });
    Ok((info, vec!["avae.ckpt".into()]))
}

fn load_avae(ctx: &StageCtx) -> Result<Avae> {
    let path = ctx.require("avae.ckpt", "train-avae")?;
    let (model, _disc, hash) = Avae::load(&path)?;
    ctx.check_hash(&path, hash)?;
    Ok(model)
}

fn require_stats(model: &Avae) -> Result<LatentStats> {
    model.stats.clone().ok_or_else(|| {
        Error::contract("pipeline", "avae checkpoint lacks latent statistics; re-run train-avae")
    })
}

fn stage_encode(ctx: &StageCtx) -> Result<StageOutput> {
    let model = load_avae(ctx)?;
    let mut artifacts = Vec::new();
    for split in ["train", "val", "test"] {
        let vids = load_dataset(&ctx.require(&format!("real-{split}.etd"), "gen-data")?)?;
        let mut out = Vec::with_capacity(vids.len());
        for v in &vids {
            let code = model.encode_video(&v.frames)?;
            let mask = mask_to_latent(&v.mask, ctx.cfg.data.image_size)?;
            out.push(LatentSample {
                id: v.id,
                view: v.view,
                ef: v.ef,
                mask,
                mu: code.mu,
                sigma: code.sigma,
            });
        }
        let name = format!("latents-{split}.elat");
        save_latents(&out, &ctx.path(&name))?;
        artifacts.push(name);
    }
    let info = json!({
        "latent_channels": ctx.cfg.avae.latent_channels,
        "latent_size": ctx.cfg.latent_size(),
    });
    Ok((info, artifacts))
}

/// Leading frame of a `[T,...]` tensor.
fn frame0(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    let row: usize = s[1..].iter().product();
    Tensor::new(s[1..].to_vec(), t.data()[..row].to_vec())
}

fn stage_train_lifm(ctx: &StageCtx) -> Result<StageOutput> {
    let stats = require_stats(&load_avae(ctx)?)?;
    let data = load_latents(&ctx.require("latents-train.elat", "encode")?)?;
    let examples: Vec<ImageExample> = data
        .iter()
        .map(|s| {
            Ok(ImageExample {
                mu: frame0(&s.mu)?,
                sigma: frame0(&s.sigma)?,
                mask: s.mask.clone(),
                view: s.view,
            })
        })
        .collect::<Result<_>>()?;
    let f = &ctx.cfg.lifm;
    let arch = FlowArch::image(ctx.cfg.avae.latent_channels, ctx.cfg.latent_size(), f.channels);
    let mut model = FlowModel::new(arch, ctx.master())?;
    let spec = FlowTrainSpec {
        steps: f.steps,
        batch: f.batch,
        lr: f.lr,
        p_drop: f.p_drop,
        p_drop_all: f.p_drop_all,
        seed: ctx.master(),
    };
    let losses = train_image_flow(&mut model, &examples, &stats, &spec)?;
    model.save(&ctx.path("lifm.ckpt"), ctx.cfg.hash())?;
    let info = json!({ "loss_first": losses[0], "loss_last": losses[losses.len() - 1] });
    Ok((info, vec!["lifm.ckpt".into()]))
}

fn latent_videos(samples: &[LatentSample]) -> Vec<LatentVideo> {
    samples
        .iter()
        .map(|s| LatentVideo { id: s.id, frames: s.mu.clone() })
        .collect()
}

fn stage_train_reid(ctx: &StageCtx) -> Result<StageOutput> {
    let train = latent_videos(&load_latents(&ctx.require("latents-train.elat", "encode")?)?);
    let val = latent_videos(&load_latents(&ctx.require("latents-val.elat", "encode")?)?);
    let r = &ctx.cfg.reid;
    let mut model = ReIdEncoder::new(ctx.cfg.reid_arch(), ctx.master())?;
    let spec = ReIdTrainSpec { steps: r.steps, batch: r.batch, lr: r.lr, seed: ctx.master() };
    let losses = train_reid(&mut model, &train, &spec)?;
    let acc = pair_accuracy(&model, &val, r.pairs, ctx.master())?;
    model.save(&ctx.path("reid.ckpt"), ctx.cfg.hash())?;
    let info = json!({
        "loss_last": losses[losses.len() - 1],
        "pair_accuracy_val": acc,
    });
    Ok((info, vec!["reid.ckpt".into()]))
}

fn stage_filter(ctx: &StageCtx) -> Result<StageOutput> {
    let lifm_path = ctx.require("lifm.ckpt", "train-lifm")?;
    let (lifm, h) = FlowModel::load(&lifm_path, FlowVariant::Image)?;
    ctx.check_hash(&lifm_path, h)?;
    let reid_path = ctx.require("reid.ckpt", "train-reid")?;
    let (reid_model, h) = ReIdEncoder::load(&reid_path)?;
    ctx.check_hash(&reid_path, h)?;
    let avae_model = load_avae(ctx)?;
    let stats = require_stats(&avae_model)?;
    let train_lat = load_latents(&ctx.require("latents-train.elat", "encode")?)?;
    let val_lat = load_latents(&ctx.require("latents-val.elat", "encode")?)?;
    let real_train = load_dataset(&ctx.require("real-train.etd", "gen-data")?)?;
    if real_train.len() != train_lat.len()
        || real_train.iter().zip(&train_lat).any(|(a, b)| a.id != b.id)
    {
        return Err(Error::contract(
            "filter",
            "latents-train.elat is out of sync with real-train.etd; re-run encode",
        ));
    }

    // Draw the candidate pool from the image flow, conditioning on (view,
    // mask) pairs resampled from the training set.
    let pool_n = ctx.cfg.pool_size();
    let mut conds = Vec::with_capacity(pool_n);
    let mut seeds = Vec::with_capacity(pool_n);
    let mut src = Vec::with_capacity(pool_n);
    for i in 0..pool_n {
        let mut r = rng::stream(ctx.master(), domains::SAMPLER, 500_000 + i as u64);
        let j = r.random_range(0..train_lat.len());
        src.push(j);
        conds.push(Cond::for_image(train_lat[j].view, train_lat[j].mask.clone()));
        seeds.push(rng::derive_seed(ctx.master(), domains::SAMPLER, i as u64));
    }
    let spec = ctx.cfg.image_sampler();
    let mut raw = Vec::with_capacity(pool_n);
    for start in (0..pool_n).step_by(16) {
        let end = (start + 16).min(pool_n);
        for z in sample_euler_batch(&lifm, &spec, &conds[start..end], &seeds[start..end])? {
            raw.push(avae::denormalize_latent(&z, &stats)?);
        }
    }

    // Calibrate the threshold on real embeddings and filter the pool.
    let train_index = build_index(&reid_model, &latent_videos(&train_lat), "train")?;
    save_index(&train_index, &ctx.path("reid-index.reid"))?;
    let val_index = build_index(&reid_model, &latent_videos(&val_lat), "val")?;
    let threshold = calibrate_tau(&train_index, &val_index, ctx.cfg.reid.percentile)?;
    let embeddings = reid_model.embed_batch(&raw)?;
    let mut rho = Vec::with_capacity(pool_n);
    for e in &embeddings {
        let mut m = f64::NEG_INFINITY;
        for t in &train_index.embeddings {
            m = m.max(pearson(e, t)?);
        }
        rho.push(m);
    }
    let outcome = filter_embeddings(&embeddings, &train_index, threshold.tau)?;
    let mut accepted = vec![false; pool_n];
    for &i in &outcome.accepted {
        accepted[i] = true;
    }
    let entries: Vec<AnatomySample> = (0..pool_n)
        .map(|i| AnatomySample {
            id: ID_POOL + i as u64,
            view: train_lat[src[i]].view,
            accepted: accepted[i],
            rho_max: rho[i],
            mask: real_train[src[i]].mask.clone(),
            latent: raw[i].clone(),
        })
        .collect();
    let pool = AnatomyPool {
        tau: threshold.tau,
        percentile: threshold.percentile,
        image_size: ctx.cfg.data.image_size,
        entries,
    };
    save_anatomies(&pool, &ctx.path("anatomies.anat"))?;
    let info = json!({
        "tau": threshold.tau,
        "percentile": threshold.percentile,
        "pool": pool_n,
        "accepted": outcome.accepted.len(),
        "rejection_rate": outcome.rejection_rate(),
        "needed": ctx.cfg.anatomies_needed(),
    });
    Ok((info, vec!["reid-index.reid".into(), "anatomies.anat".into()]))
}

fn stage_train_lvfm(ctx: &StageCtx) -> Result<StageOutput> {
    let stats = require_stats(&load_avae(ctx)?)?;
    let data = load_latents(&ctx.require("latents-train.elat", "encode")?)?;
    let examples: Vec<VideoExample> = data
        .iter()
        .map(|s| VideoExample { mu: s.mu.clone(), sigma: s.sigma.clone(), ef: s.ef })
        .collect();
    let f = &ctx.cfg.lvfm;
    let arch = FlowArch::video(
        ctx.cfg.avae.latent_channels,
        ctx.cfg.latent_size(),
        ctx.cfg.data.frames,
        f.channels,
    );
    let mut model = FlowModel::new(arch, ctx.master())?;
    let spec = FlowTrainSpec {
        steps: f.steps,
        batch: f.batch,
        lr: f.lr,
        p_drop: f.p_drop,
        p_drop_all: f.p_drop_all,
        seed: ctx.master(),
    };
    let losses = train_video_flow(&mut model, &examples, &stats, &spec)?;
    model.save(&ctx.path("lvfm.ckpt"), ctx.cfg.hash())?;
    let info = json!({ "loss_first": losses[0], "loss_last": losses[losses.len() - 1] });
    Ok((info, vec!["lvfm.ckpt".into()]))
}

fn stage_synthesize(ctx: &StageCtx) -> Result<StageOutput> {
    let lvfm_path = ctx.require("lvfm.ckpt", "train-lvfm")?;
    let (lvfm, h) = FlowModel::load(&lvfm_path, FlowVariant::Video)?;
    ctx.check_hash(&lvfm_path, h)?;
    let avae_model = load_avae(ctx)?;
    let stats = require_stats(&avae_model)?;
    let pool = load_anatomies(&ctx.require("anatomies.anat", "filter")?)?;
    let d = &ctx.cfg.data;
    let syn = &ctx.cfg.synth;
    let vpa = syn.videos_per_anatomy;
    let needed = ctx.cfg.anatomies_needed();
    let flags: Vec<bool> = pool.entries.iter().map(|e| e.accepted).collect();
    let plan = plan_assembly(&flags, needed)?;
    let unique: BTreeSet<usize> = plan.npc.iter().chain(plan.pc.iter()).copied().collect();

    // One sampling job per (anatomy, repeat); NPC and PC share the result
    // for every anatomy they have in common because draws are keyed by pool
    // index, not by dataset position.
    let jobs: Vec<(usize, usize)> =
        unique.iter().flat_map(|&a| (0..vpa).map(move |v| (a, v))).collect();
    let mut conds = Vec::with_capacity(jobs.len());
    let mut seeds = Vec::with_capacity(jobs.len());
    let mut efs = Vec::with_capacity(jobs.len());
    for &(a, v) in &jobs {
        let idx = (a * vpa + v) as u64;
        let mut r = rng::stream(ctx.master(), domains::ASSEMBLE, idx);
        let ef = r.random_range(syn.ef_lo..syn.ef_hi);
        efs.push(ef);
        let anatomy = avae::normalize_latent(&pool.entries[a].latent, &stats)?;
        conds.push(Cond::for_video(anatomy, ef));
        seeds.push(rng::derive_seed(ctx.master(), domains::ASSEMBLE, 1_000_000 + idx));
    }
    let spec = ctx.cfg.video_sampler();
    let mut clips = Vec::with_capacity(jobs.len());
    for start in (0..jobs.len()).step_by(8) {
        let end = (start + 8).min(jobs.len());
        clips.extend(sample_euler_batch(&lvfm, &spec, &conds[start..end], &seeds[start..end])?);
    }
    let mut by_anatomy: BTreeMap<usize, Vec<VideoSample>> = BTreeMap::new();
    for (i, &(a, _v)) in jobs.iter().enumerate() {
        let raw_clip = avae::denormalize_latent(&clips[i], &stats)?;
        let decoded = avae_model.decode(&raw_clip)?;
        let s = decoded.shape().to_vec();
        let frames = decoded.reshaped([s[0], s[2], s[3]])?;
        let e = &pool.entries[a];
        by_anatomy.entry(a).or_default().push(VideoSample {
            id: e.id,
            view: e.view,
            ef: efs[i],
            frames,
            mask: e.mask.clone(),
        });
    }

    let mut artifacts = Vec::new();
    for (variant, list) in [("npc", &plan.npc), ("pc", &plan.pc)] {
        let vids: Vec<VideoSample> =
            list.iter().flat_map(|a| by_anatomy[a].iter().cloned()).collect();
        let (tr, va) = (d.train, d.val);
        for (split, range) in [
            ("train", 0..tr),
            ("val", tr..tr + va),
            ("test", tr + va..tr + va + d.test),
        ] {
            let name = format!("{variant}-{split}.etd");
            save_dataset(&vids[range], &ctx.path(&name))?;
            artifacts.push(name);
        }
    }
    let shared = plan.npc.iter().filter(|a| plan.pc.contains(a)).count();
    let ef_min = efs.iter().cloned().fold(f32::INFINITY, f32::min);
    let ef_max = efs.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let info = json!({
        "anatomies": unique.len(),
        "videos": jobs.len(),
        "shared_anatomies": shared,
        "ef_min": ef_min,
        "ef_max": ef_max,
    });
    Ok((info, artifacts))
}

fn stage_train_ef(ctx: &StageCtx) -> Result<StageOutput> {
    let real_train = load_dataset(&ctx.require("real-train.etd", "gen-data")?)?;
    let videos: Vec<Tensor> = real_train.iter().map(|s| s.frames.clone()).collect();
    let labels: Vec<f32> = real_train.iter().map(|s| s.ef).collect();
    let arch = ctx.cfg.ef_arch();
    let spec = EfTrainSpec {
        epochs: ctx.cfg.ef.epochs,
        batch: ctx.cfg.ef.batch,
        lr: ctx.cfg.ef.lr,
        seed: ctx.master(),
    };
    let (ef_real, trace_real) = train_regressor(&videos, &labels, arch, &spec)?;
    ef_real.save(&ctx.path("ef-real.ckpt"), ctx.cfg.hash())?;

    // Reconstruction control: the same videos round-tripped through the
    // autoencoder (posterior means, no sampling), original labels kept.
    let avae_model = load_avae(ctx)?;
    let mut recon = Vec::with_capacity(videos.len());
    for v in &videos {
        let code = avae_model.encode_video(v)?;
        let decoded = avae_model.decode(&code.mu)?;
        let s = decoded.shape().to_vec();
        recon.push(decoded.reshaped([s[0], s[2], s[3]])?);
    }
    let (ef_recon, trace_recon) = train_regressor(&recon, &labels, arch, &spec)?;
    ef_recon.save(&ctx.path("ef-recon.ckpt"), ctx.cfg.hash())?;

    // Synthetic variants: replace the provisional conditioning labels with
    // the real-trained regressor's predictions, then train on the result.
    let mut artifacts: Vec<String> =
        vec!["ef-real.ckpt".into(), "ef-recon.ckpt".into()];
    let mut info = json!({
        "trace_real_last": trace_real[trace_real.len() - 1],
        "trace_recon_last": trace_recon[trace_recon.len() - 1],
    });
    for variant in ["npc", "pc"] {
        let mut train_videos = Vec::new();
        let mut train_labels = Vec::new();
        let mut delta_sum = 0.0f64;
        let mut delta_n = 0usize;
        for split in ["train", "val", "test"] {
            let name = format!("{variant}-{split}.etd");
            let mut vids = load_dataset(&ctx.require(&name, "synthesize")?)?;
            let tensors: Vec<Tensor> = vids.iter().map(|s| s.frames.clone()).collect();
            let new_labels = relabel(&tensors, &ef_real)?;
            for (s, &l) in vids.iter_mut().zip(&new_labels) {
                delta_sum += (s.ef - l).abs() as f64;
                delta_n += 1;
                s.ef = l;
            }
            let out_name = format!("{variant}-{split}-rl.etd");
            save_dataset(&vids, &ctx.path(&out_name))?;
            artifacts.push(out_name);
            if split == "train" {
                train_videos = tensors;
                train_labels = new_labels;
            }
        }
        let (model, trace) = train_regressor(&train_videos, &train_labels, arch, &spec)?;
        let ckpt = format!("ef-{variant}.ckpt");
        model.save(&ctx.path(&ckpt), ctx.cfg.hash())?;
        artifacts.push(ckpt);
        info[format!("trace_{variant}_last")] = json!(trace[trace.len() - 1]);
        info[format!("relabel_delta_{variant}")] = json!(delta_sum / delta_n as f64);
    }
    Ok((info, artifacts))
}

fn stage_evaluate(ctx: &StageCtx) -> Result<StageOutput> {
    let test = load_dataset(&ctx.require("real-test.etd", "gen-data")?)?;
    let videos: Vec<Tensor> = test.iter().map(|s| s.frames.clone()).collect();
    let labels: Vec<f32> = test.iter().map(|s| s.ef).collect();
    let mut metric_map: BTreeMap<String, RegressionMetrics> = BTreeMap::new();
    for variant in ["real", "recon", "npc", "pc"] {
        let name = format!("ef-{variant}.ckpt");
        let path = ctx.require(&name, "train-ef")?;
        let (model, h) = EfRegressor::load(&path)?;
        ctx.check_hash(&path, h)?;
        let preds = model.predict_batch(&videos)?;
        metric_map.insert(variant.to_string(), metrics(&labels, &preds)?);
    }

    // Post-hoc privacy audit: every anatomy in the PC variant must still
    // clear the threshold under an independent filter pass.
    let reid_path = ctx.require("reid.ckpt", "train-reid")?;
    let (reid_model, h) = ReIdEncoder::load(&reid_path)?;
    ctx.check_hash(&reid_path, h)?;
    let index = load_index(&ctx.require("reid-index.reid", "filter")?, "train")?;
    let pool = load_anatomies(&ctx.require("anatomies.anat", "filter")?)?;
    let flags: Vec<bool> = pool.entries.iter().map(|e| e.accepted).collect();
    let plan = plan_assembly(&flags, ctx.cfg.anatomies_needed())?;
    let pc_latents: Vec<Tensor> =
        plan.pc.iter().map(|&a| pool.entries[a].latent.clone()).collect();
    let embeddings = reid_model.embed_batch(&pc_latents)?;
    let mut max_rho = f64::NEG_INFINITY;
    for e in &embeddings {
        for t in &index.embeddings {
            max_rho = max_rho.max(pearson(e, t)?);
        }
    }
    let clean = max_rho < pool.tau;

    // Feature-space distribution distance between real training anatomies
    // and the accepted pool, when both sides have enough samples for a
    // full-rank covariance.
    let train_lat = load_latents(&ctx.require("latents-train.elat", "encode")?)?;
    let real_ed: Vec<Tensor> = train_lat.iter().map(|s| frame0(&s.mu)).collect::<Result<_>>()?;
    let accepted: Vec<Tensor> = pool
        .entries
        .iter()
        .filter(|e| e.accepted)
        .map(|e| e.latent.clone())
        .collect();
    let dim = ctx.cfg.reid.dim;
    let frechet = if real_ed.len() > dim && accepted.len() > dim {
        Some(feature_frechet(&real_ed, &accepted, &reid_model)?)
    } else {
        None
    };

    let doc = json!({
        "metrics": metric_map,
        "frechet_anatomy": frechet,
        "pc_refilter_max_rho": max_rho,
        "pc_refilter_clean": clean,
        "tau": pool.tau,
    });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Format {
        offset: 0,
        detail: format!("metrics serialization: {e}"),
    })?;
    let path = ctx.path("metrics.json");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok((doc, vec!["metrics.json".into()]))
}

fn stage_report(ctx: &StageCtx, manifest: &RunManifest) -> Result<StageOutput> {
    let path = ctx.require("metrics.json", "evaluate")?;
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let parsed: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format {
        offset: 0,
        detail: format!("{}: {e}", path.display()),
    })?;
    let metric_map: BTreeMap<String, RegressionMetrics> =
        serde_json::from_value(parsed["metrics"].clone()).map_err(|e| Error::Format {
            offset: 0,
            detail: format!("metrics.json schema: {e}"),
        })?;
    let gaps = parity_gaps(&metric_map)?;

    let mut stages: Vec<String> = Vec::new();
    for s in &manifest.stages {
        if !stages.contains(&s.name) {
            stages.push(s.name.clone());
        }
    }
    if !stages.iter().any(|s| s == "report") {
        stages.push("report".to_string());
    }
    let doc = ReportDoc {
        config_hash: ctx.cfg.hash_hex(),
        stages,
        metrics: metric_map.iter().map(|(k, v)| (k.clone(), MetricBlock::from(v))).collect(),
        parity_gaps: gaps.clone(),
    };
    let json_text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Format {
        offset: 0,
        detail: format!("report serialization: {e}"),
    })?;
    let json_path = ctx.path("report.json");
    fs::write(&json_path, json_text).map_err(|e| Error::io(&json_path, e))?;

    let mut csv = String::from("variant,metric,value\n");
    for (variant, m) in &metric_map {
        let _ = writeln!(csv, "{variant},r2,{:.6}", m.r2);
        let _ = writeln!(csv, "{variant},mae,{:.6}", m.mae);
        let _ = writeln!(csv, "{variant},rmse,{:.6}", m.rmse);
    }
    for (variant, gap) in &gaps {
        let _ = writeln!(csv, "{variant},parity_gap,{gap:.6}");
    }
    let csv_path = ctx.path("report.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    let info = json!({ "variants": doc.metrics.len(), "parity_gaps": doc.parity_gaps });
    Ok((info, vec!["report.json".into(), "report.csv".into()]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::echodata;

    /// A configuration small enough for the full pipeline to run in seconds.
    /// image_size stays at 32 because the re-identification encoder needs a
    /// latent grid divisible by 8.
    fn mini_config() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.data.train = 6;
        cfg.data.val = 4;
        cfg.data.test = 2;
        cfg.data.frames = 4;
        cfg.avae.base_channels = 4;
        cfg.avae.disc_channels = 4;
        cfg.avae.steps = 40;
        cfg.avae.batch = 4;
        cfg.lifm.channels = 8;
        cfg.lifm.steps = 30;
        cfg.lifm.batch = 4;
        cfg.lvfm.channels = 8;
        cfg.lvfm.steps = 30;
        cfg.lvfm.batch = 2;
        cfg.sampler.steps = 4;
        cfg.sampler.image_lambda = 1.0;
        cfg.sampler.video_lambda = 1.0;
        cfg.sampler.video_negative = NegSelector::AnatomyOnly;
        cfg.reid.dim = 8;
        cfg.reid.channels = 4;
        cfg.reid.steps = 40;
        cfg.reid.batch = 4;
        cfg.reid.pairs = 40;
        cfg.synth.pool_factor = 2.0;
        cfg.ef.channels = 4;
        cfg.ef.epochs = 2;
        cfg.ef.batch = 4;
        cfg.run.seed = 11;
        cfg
    }

    #[test]
    fn config_roundtrip_preserves_everything() {
        let cfg = PipelineConfig::default();
        let text = cfg.render();
        let back = PipelineConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());

        let mini = mini_config();
        let back = PipelineConfig::parse(&mini.render()).unwrap();
        assert_eq!(mini, back);
        assert_ne!(mini.hash(), cfg.hash());
    }

    #[test]
    fn config_parse_rejects_garbage() {
        assert!(matches!(
            PipelineConfig::parse("[nosuch]\nkey = 1\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::parse("[data]\nnosuch = 1\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::parse("[data]\ntrain = twelve\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::parse("[data]\ntrain = 5\ntrain = 6\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::parse("train = 5\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            PipelineConfig::parse("[data\ntrain = 5\n"),
            Err(Error::Config(_))
        ));
        // Comments and omitted keys are fine.
        let cfg = PipelineConfig::parse("# top comment\n[run]\nseed = 3 # trailing\n").unwrap();
        assert_eq!(cfg.run.seed, 3);
        assert_eq!(cfg.data.train, PipelineConfig::default().data.train);
    }

    #[test]
    fn config_validate_catches_cross_field_problems() {
        let mut cfg = mini_config();
        cfg.data.train = 5; // not divisible by videos_per_anatomy = 2
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");

        let mut cfg = mini_config();
        cfg.synth.ef_lo = 50.0;
        cfg.synth.ef_hi = 40.0;
        assert!(cfg.validate().is_err());

        let mut cfg = mini_config();
        cfg.synth.pool_factor = 0.5;
        assert!(cfg.validate().is_err());

        let mut cfg = mini_config();
        cfg.reid.percentile = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn plan_assembly_replaces_rejections_from_the_spare_pool() {
        // Pool of 8, need 5; indices 1 and 3 rejected, spare 5 rejected too.
        let accepted = [true, false, true, false, true, false, true, true];
        let plan = plan_assembly(&accepted, 5).unwrap();
        assert_eq!(plan.npc, vec![0, 1, 2, 3, 4]);
        assert_eq!(plan.pc, vec![0, 2, 4, 6, 7]);
        assert!(plan.pc.iter().all(|&i| accepted[i]));
        assert_eq!(plan.pc.len(), plan.npc.len());
    }

    #[test]
    fn plan_assembly_reports_the_shortfall() {
        let accepted = [true, false, false, true, false, false];
        let err = plan_assembly(&accepted, 4).unwrap_err();
        match err {
            Error::Quota(msg) => {
                assert!(msg.contains("accepted 2 of 6"), "{msg}");
                assert!(msg.contains("short by 2"), "{msg}");
            }
            other => panic!("expected quota error, got {other}"),
        }
        assert!(plan_assembly(&[true; 3], 0).is_err());
        assert!(plan_assembly(&[true; 3], 4).is_err());
    }

    #[test]
    fn latent_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.elat");
        let mut r = rng::stream(1, 99, 0);
        let samples: Vec<LatentSample> = (0..3)
            .map(|i| LatentSample {
                id: 100 + i,
                view: (i % 3) as u32,
                ef: 40.0 + i as f32,
                mask: Tensor::randn(vec![8, 8], &mut r),
                mu: Tensor::randn(vec![4, 2, 8, 8], &mut r),
                sigma: Tensor::randn(vec![4, 2, 8, 8], &mut r).map(|v| v.abs() + 0.1),
            })
            .collect();
        save_latents(&samples, &path).unwrap();
        let back = load_latents(&path).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.view, b.view);
            assert_eq!(a.ef, b.ef);
            assert_eq!(a.mu.data(), b.mu.data());
            assert_eq!(a.sigma.data(), b.sigma.data());
            assert_eq!(a.mask.data(), b.mask.data());
        }
        // Trailing garbage is rejected.
        let mut bytes = fs::read(&path).unwrap();
        bytes.push(0);
        fs::write(&path, bytes).unwrap();
        assert!(load_latents(&path).is_err());
    }

    #[test]
    fn anatomy_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.anat");
        let mut r = rng::stream(2, 99, 0);
        let pool = AnatomyPool {
            tau: 0.8125,
            percentile: 95.0,
            image_size: 16,
            entries: (0..4)
                .map(|i| AnatomySample {
                    id: ID_POOL + i,
                    view: (i % 3) as u32,
                    accepted: i % 2 == 0,
                    rho_max: 0.1 * i as f64,
                    mask: vec![(i % 2) as u8; 256],
                    latent: Tensor::randn(vec![2, 4, 4], &mut r),
                })
                .collect(),
        };
        save_anatomies(&pool, &path).unwrap();
        let back = load_anatomies(&path).unwrap();
        assert_eq!(back.tau, pool.tau);
        assert_eq!(back.percentile, pool.percentile);
        assert_eq!(back.image_size, pool.image_size);
        assert_eq!(back.entries.len(), 4);
        for (a, b) in pool.entries.iter().zip(&back.entries) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.accepted, b.accepted);
            assert_eq!(a.rho_max, b.rho_max);
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.latent.data(), b.latent.data());
        }
    }

    #[test]
    fn manifest_roundtrip_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let mut m = RunManifest::new("abc123".into(), 7);
        m.stages.push(StageRecord {
            name: "gen-data".into(),
            wall_ms: 5,
            artifacts: vec!["real-train.etd".into()],
            info: json!({"train": 6}),
        });
        m.save(&path).unwrap();
        let mut back = RunManifest::load(&path).unwrap();
        assert_eq!(back.config_hash, "abc123");
        assert_eq!(back.stages.len(), 1);
        back.stages.push(StageRecord {
            name: "gen-data".into(),
            wall_ms: 6,
            artifacts: vec![],
            info: json!({}),
        });
        back.save(&path).unwrap();
        let again = RunManifest::load(&path).unwrap();
        assert_eq!(again.stages.len(), 2);
        assert_eq!(again.latest("gen-data").unwrap().wall_ms, 6);
        assert!(again.latest("encode").is_none());
    }

    #[test]
    fn missing_artifact_names_the_producing_stage() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = StageCtx::new(mini_config(), dir.path(), false);
        let err = run_stage(&ctx, "encode").unwrap_err();
        match err {
            Error::MissingArtifact { path, stage } => {
                assert_eq!(stage, "train-avae");
                assert!(path.to_string_lossy().contains("avae.ckpt"));
            }
            other => panic!("expected missing artifact, got {other}"),
        }
        let err = run_stage(&ctx, "train-avae").unwrap_err();
        match err {
            Error::MissingArtifact { stage, .. } => assert_eq!(stage, "gen-data"),
            other => panic!("expected missing artifact, got {other}"),
        }
        assert!(matches!(run_stage(&ctx, "nosuch"), Err(Error::Config(_))));
    }

    #[test]
    fn stale_directory_is_rejected_unless_forced() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_a = mini_config();
        let ctx_a = StageCtx::new(cfg_a, dir.path(), false);
        run_stage(&ctx_a, "gen-data").unwrap();

        let mut cfg_b = mini_config();
        cfg_b.run.seed = 99;
        let ctx_b = StageCtx::new(cfg_b.clone(), dir.path(), false);
        let err = run_stage(&ctx_b, "gen-data").unwrap_err();
        assert!(matches!(err, Error::StaleArtifact { .. }), "{err}");

        let ctx_forced = StageCtx::new(cfg_b.clone(), dir.path(), true);
        run_stage(&ctx_forced, "gen-data").unwrap();
        let manifest = RunManifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(manifest.config_hash, cfg_b.hash_hex());
        // The forced manifest restarts the journal under the new hash.
        assert_eq!(manifest.stages.len(), 1);
    }

    #[test]
    fn parity_gaps_signs_and_contract() {
        let m = |r2: f64, n: usize| RegressionMetrics { r2, mae: 1.0, rmse: 2.0, n };
        let mut map = BTreeMap::new();
        map.insert("real".to_string(), m(0.9, 50));
        map.insert("npc".to_string(), m(0.8, 50));
        map.insert("pc".to_string(), m(0.95, 50));
        let gaps = parity_gaps(&map).unwrap();
        assert!((gaps["npc"] - 0.1).abs() < 1e-12);
        assert!((gaps["pc"] + 0.05).abs() < 1e-12);
        assert!(gaps.get("real").is_none());

        map.insert("recon".to_string(), m(0.85, 49));
        assert!(parity_gaps(&map).is_err());
        map.remove("real");
        map.remove("recon");
        assert!(parity_gaps(&map).is_err());
    }

    /// Full pipeline at toy scale: every stage runs, artifacts land where
    /// documented, the privacy audit passes, and re-running downstream
    /// stages neither disturbs upstream artifacts nor changes results.
    #[test]
    fn mini_e2e_produces_coherent_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = mini_config();
        let ctx = StageCtx::new(cfg.clone(), dir.path(), false);
        let records = run_e2e(&ctx, None).unwrap();
        assert_eq!(records.len(), STAGE_NAMES.len());

        // Every documented artifact exists.
        for name in [
            "real-train.etd",
            "real-val.etd",
            "real-test.etd",
            "avae.ckpt",
            "latents-train.elat",
            "latents-val.elat",
            "latents-test.elat",
            "lifm.ckpt",
            "reid.ckpt",
            "reid-index.reid",
            "anatomies.anat",
            "lvfm.ckpt",
            "npc-train.etd",
            "pc-test.etd",
            "npc-train-rl.etd",
            "pc-test-rl.etd",
            "ef-real.ckpt",
            "ef-recon.ckpt",
            "ef-npc.ckpt",
            "ef-pc.ckpt",
            "metrics.json",
            "report.json",
            "report.csv",
            "manifest.json",
        ] {
            assert!(ctx.path(name).exists(), "missing {name}");
        }

        // Synthetic datasets mirror the real split sizes, carry pool ids,
        // and conditioning labels stay in the configured range.
        let npc_train = echodata::load_dataset(&ctx.path("npc-train.etd")).unwrap();
        assert_eq!(npc_train.len(), cfg.data.train);
        let pc_test = echodata::load_dataset(&ctx.path("pc-test.etd")).unwrap();
        assert_eq!(pc_test.len(), cfg.data.test);
        for s in npc_train.iter().chain(&pc_test) {
            assert!(s.id >= ID_POOL);
            assert!(s.ef >= cfg.synth.ef_lo && s.ef <= cfg.synth.ef_hi);
            assert_eq!(s.frame_count(), cfg.data.frames);
        }
        // Relabeled labels live in the clamped range.
        let rl = echodata::load_dataset(&ctx.path("npc-train-rl.etd")).unwrap();
        assert_eq!(rl.len(), cfg.data.train);
        for s in &rl {
            assert!(s.ef >= 0.0 && s.ef < 100.0);
        }

        // The PC variant holds only accepted anatomies and passes the
        // post-hoc audit recorded by evaluate.
        let pool = load_anatomies(&ctx.path("anatomies.anat")).unwrap();
        let by_id: BTreeMap<u64, bool> =
            pool.entries.iter().map(|e| (e.id, e.accepted)).collect();
        for s in &pc_test {
            assert!(by_id[&s.id], "rejected anatomy {} in pc dataset", s.id);
        }
        let metrics_doc: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(ctx.path("metrics.json")).unwrap()).unwrap();
        assert_eq!(metrics_doc["pc_refilter_clean"], json!(true));
        assert!(metrics_doc["pc_refilter_max_rho"].as_f64().unwrap() < pool.tau);

        // report.json carries the documented schema.
        let report: ReportDoc =
            serde_json::from_str(&fs::read_to_string(ctx.path("report.json")).unwrap()).unwrap();
        assert_eq!(report.config_hash, cfg.hash_hex());
        assert_eq!(report.metrics.len(), 4);
        assert_eq!(report.parity_gaps.len(), 3);
        assert_eq!(report.stages.len(), STAGE_NAMES.len());
        let csv = fs::read_to_string(ctx.path("report.csv")).unwrap();
        assert!(csv.starts_with("variant,metric,value\n"));
        assert_eq!(csv.lines().count(), 1 + 4 * 3 + 3);

        // Determinism: regenerating the data in a fresh directory gives
        // byte-identical artifacts.
        let dir2 = tempfile::tempdir().unwrap();
        let ctx2 = StageCtx::new(cfg.clone(), dir2.path(), false);
        run_stage(&ctx2, "gen-data").unwrap();
        assert_eq!(
            fs::read(ctx.path("real-train.etd")).unwrap(),
            fs::read(ctx2.path("real-train.etd")).unwrap()
        );

        // Stage isolation: re-running evaluate and report appends manifest
        // records, reproduces metrics.json byte for byte, and leaves
        // upstream checkpoints untouched.
        let avae_before = fs::read(ctx.path("avae.ckpt")).unwrap();
        let metrics_before = fs::read(ctx.path("metrics.json")).unwrap();
        let stages_before = RunManifest::load(&ctx.path("manifest.json")).unwrap().stages.len();
        run_stage(&ctx, "evaluate").unwrap();
        run_stage(&ctx, "report").unwrap();
        assert_eq!(avae_before, fs::read(ctx.path("avae.ckpt")).unwrap());
        assert_eq!(metrics_before, fs::read(ctx.path("metrics.json")).unwrap());
        let manifest = RunManifest::load(&ctx.path("manifest.json")).unwrap();
        assert_eq!(manifest.stages.len(), stages_before + 2);
    }
}
