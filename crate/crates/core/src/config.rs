//! Flat `section.key = value` pipeline configuration.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Keys not present keep their defaults, unknown or repeated keys
//! are errors. If any `class.<name>.*` key appears, the class table is
//! replaced by the classes named in the file, in order of first appearance,
//! and each must set all five fields. Lists are comma-separated.
//!
//! [`PipelineConfig::to_text`] prints every key, and parsing that text gives
//! back an identical config.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::coords::{default_class_table, CoordConvention, ParticleClassSpec, DEFAULT_SPACING_F64};
use crate::losses::LossKind;
use crate::metric::EvalOptions;
use crate::net::{Downsample, NetConfig, Variant};
use crate::postproc::DEFAULT_NMS_KERNEL;
use crate::synth::SceneSpec;
use crate::tiler::{TileGeometry, DEFAULT_EDGE_FLOOR};
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: bad value `{value}` for `{key}`")]
    BadValue {
        line: usize,
        key: String,
        value: String,
    },
    #[error("class `{class}` is missing `{field}`")]
    IncompleteClass { class: String, field: &'static str },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
}

/// Sliding-window settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TilingConfig {
    pub window_depth: usize,
    pub window_hw: usize,
    pub xy_stride: usize,
    /// z stride for a window of `window_depth`; other depths scale it.
    pub z_stride: usize,
    pub pad_to: usize,
    pub edge_floor: f64,
    /// `false` averages overlapping windows without the tent weights.
    pub blend: bool,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self {
            window_depth: 16,
            window_hw: 128,
            xy_stride: 48,
            z_stride: 8,
            pad_to: 656,
            edge_floor: DEFAULT_EDGE_FLOOR,
            blend: true,
        }
    }
}

impl TilingConfig {
    /// Geometry for a window of the given depth and size. The z stride keeps
    /// the configured stride-to-depth ratio.
    pub fn geometry(&self, window_depth: usize, window_hw: usize) -> TileGeometry {
        let z_stride = (window_depth * self.z_stride / self.window_depth).max(1);
        TileGeometry {
            window: [window_depth, window_hw, window_hw],
            stride: [z_stride, self.xy_stride, self.xy_stride],
            pad_to_xy: self.pad_to,
        }
    }

    pub fn default_geometry(&self) -> TileGeometry {
        self.geometry(self.window_depth, self.window_hw)
    }
}

/// Synthetic scene settings for `gen`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    /// `(z, y, x)`.
    pub dims: [usize; 3],
    /// Particles per class.
    pub counts: Vec<usize>,
    pub noise_sigma: f64,
    pub min_separation: f64,
}

/// Network shape; the class count comes from the class table.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub in_depth: usize,
    pub window_hw: usize,
    pub widths: Vec<usize>,
    pub downsample: Downsample,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let a = NetConfig::variant_a(1);
        Self {
            variant: a.variant,
            in_depth: a.in_depth,
            window_hw: a.window_hw,
            widths: a.widths,
            downsample: a.downsample,
            seed: a.seed,
        }
    }
}

/// Training settings beyond [`TrainConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub optim: TrainConfig,
    pub windows_per_scene: usize,
    pub positive_fraction: f64,
    /// Save the EMA weights rather than the raw ones.
    pub save_ema: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            optim: TrainConfig::variant_a_preset(),
            windows_per_scene: 16,
            positive_fraction: 0.5,
            save_ema: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub spacing: f64,
    pub offset: f64,
    pub classes: Vec<ParticleClassSpec>,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainingConfig,
    pub tiling: TilingConfig,
    pub nms_kernel: usize,
    pub eval: EvalOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let classes = default_class_table(DEFAULT_SPACING_F64);
        Self {
            spacing: DEFAULT_SPACING_F64,
            offset: 1.0,
            scene: SceneConfig {
                dims: [184, 630, 630],
                counts: vec![5; classes.len()],
                noise_sigma: 0.5,
                min_separation: 200.0,
            },
            classes,
            model: ModelConfig::default(),
            train: TrainingConfig::default(),
            tiling: TilingConfig::default(),
            nms_kernel: DEFAULT_NMS_KERNEL,
            eval: EvalOptions::default(),
        }
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::A => "A",
        Variant::B => "B",
    }
}

fn downsample_name(d: Downsample) -> &'static str {
    match d {
        Downsample::DepthPool => "pool",
        Downsample::StridedConv3d => "strided3d",
    }
}

const CLASS_FIELDS: [&str; 5] = ["radius", "sigma_vox", "threshold", "tau", "weight"];

impl PipelineConfig {
    pub fn conv(&self) -> CoordConvention {
        CoordConvention::new(self.spacing, self.offset)
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            variant: self.model.variant,
            in_depth: self.model.in_depth,
            window_hw: self.model.window_hw,
            class_count: self.classes.len(),
            widths: self.model.widths.clone(),
            downsample: self.model.downsample,
            seed: self.model.seed,
        }
    }

    pub fn scene_spec(&self, seed: u64) -> SceneSpec {
        SceneSpec {
            dims: self.scene.dims,
            classes: self.classes.clone(),
            counts: self.scene.counts.clone(),
            noise_sigma: self.scene.noise_sigma,
            min_separation: self.scene.min_separation,
            seed,
            conv: self.conv(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return bad("spacing must be positive".into());
        }
        if !self.offset.is_finite() {
            return bad("offset must be finite".into());
        }
        if self.classes.is_empty() {
            return bad("at least one class is required".into());
        }
        let mut names = BTreeSet::new();
        for c in &self.classes {
            c.validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            if !names.insert(c.name.as_str()) {
                return bad(format!("class `{}` defined twice", c.name));
            }
        }
        if self.scene.counts.len() != self.classes.len() {
            return bad(format!(
                "scene.counts has {} entries for {} classes",
                self.scene.counts.len(),
                self.classes.len()
            ));
        }
        if self.nms_kernel.is_multiple_of(2) {
            return bad("nms.kernel must be odd".into());
        }
        let t = &self.tiling;
        if t.window_depth == 0 || t.window_hw == 0 || t.xy_stride == 0 || t.z_stride == 0 {
            return bad("tiling sizes and strides must be positive".into());
        }
        if !(0.0..1.0).contains(&t.edge_floor) {
            return bad("tiling.edge_floor must lie in [0, 1)".into());
        }
        if !(self.eval.beta > 0.0) {
            return bad("eval.beta must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.train.positive_fraction) {
            return bad("train.positive_fraction must lie in [0, 1]".into());
        }
        self.net_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train
            .optim
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Every key, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("spacing", self.spacing.to_string());
        kv("coords.offset", self.offset.to_string());
        for c in &self.classes {
            let n = &c.name;
            kv(&format!("class.{n}.radius"), c.radius.to_string());
            kv(&format!("class.{n}.sigma_vox"), c.sigma_vox.to_string());
            kv(
                &format!("class.{n}.threshold"),
                c.detect_threshold.to_string(),
            );
            kv(&format!("class.{n}.tau"), c.match_radius_tau.to_string());
            kv(&format!("class.{n}.weight"), c.metric_weight.to_string());
        }
        kv("scene.dims", list(&self.scene.dims));
        kv("scene.counts", list(&self.scene.counts));
        kv("scene.noise_sigma", self.scene.noise_sigma.to_string());
        kv(
            "scene.min_separation",
            self.scene.min_separation.to_string(),
        );
        kv("model.variant", variant_name(self.model.variant).into());
        kv("model.in_depth", self.model.in_depth.to_string());
        kv("model.window_hw", self.model.window_hw.to_string());
        kv("model.widths", list(&self.model.widths));
        kv(
            "model.downsample",
            downsample_name(self.model.downsample).into(),
        );
        kv("model.seed", self.model.seed.to_string());
        let o = &self.train.optim;
        kv("train.epochs", o.epochs.to_string());
        kv("train.lr", o.base_lr.to_string());
        kv("train.warmup_epochs", o.warmup_epochs.to_string());
        kv("train.weight_decay", o.weight_decay.to_string());
        kv("train.batch_size", o.batch_size.to_string());
        kv("train.ema_decay", o.ema_decay.to_string());
        kv("train.beta1", o.beta1.to_string());
        kv("train.beta2", o.beta2.to_string());
        kv("train.adam_eps", o.adam_eps.to_string());
        kv("train.loss", o.loss.name().into());
        kv("train.alpha", o.loss_config.alpha.to_string());
        kv("train.epsilon", o.loss_config.epsilon.to_string());
        kv("train.seed", o.seed.to_string());
        kv(
            "train.windows_per_scene",
            self.train.windows_per_scene.to_string(),
        );
        kv(
            "train.positive_fraction",
            self.train.positive_fraction.to_string(),
        );
        kv("train.save_ema", self.train.save_ema.to_string());
        let t = &self.tiling;
        kv("tiling.window_depth", t.window_depth.to_string());
        kv("tiling.window_hw", t.window_hw.to_string());
        kv("tiling.xy_stride", t.xy_stride.to_string());
        kv("tiling.z_stride", t.z_stride.to_string());
        kv("tiling.pad_to", t.pad_to.to_string());
        kv("tiling.edge_floor", t.edge_floor.to_string());
        kv("tiling.blend", t.blend.to_string());
        kv("nms.kernel", self.nms_kernel.to_string());
        kv("eval.beta", self.eval.beta.to_string());
        kv(
            "eval.empty_class_score",
            self.eval.empty_class_score.to_string(),
        );
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        std::fs::read_to_string(path)?.parse()
    }
}

/// Class fields gathered while parsing.
#[derive(Default)]
struct PartialClass {
    name: String,
    fields: [Option<f64>; 5],
}

fn parse_list<T: FromStr>(v: &str) -> Option<Vec<T>> {
    v.split(',').map(|p| p.trim().parse().ok()).collect()
}

impl FromStr for PipelineConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut cfg = PipelineConfig::default();
        let mut seen = BTreeSet::new();
        let mut classes: Vec<PartialClass> = Vec::new();

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            // `#` starts a comment anywhere on the line.
            let trimmed = raw.split('#').next().unwrap_or("").trim();
            if trimmed.is_empty() {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                reason: "expected `key = value`".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey {
                    line,
                    key: key.into(),
                });
            }
            let bad = || ConfigError::BadValue {
                line,
                key: key.into(),
                value: value.into(),
            };
            macro_rules! num {
                () => {
                    value.parse().map_err(|_| bad())?
                };
            }
            let bool_val = || match value {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(bad()),
            };

            if let Some(rest) = key.strip_prefix("class.") {
                let (name, field) =
                    rest.rsplit_once('.')
                        .ok_or_else(|| ConfigError::UnknownKey {
                            line,
                            key: key.into(),
                        })?;
                let slot = CLASS_FIELDS
                    .iter()
                    .position(|f| *f == field)
                    .ok_or_else(|| ConfigError::UnknownKey {
                        line,
                        key: key.into(),
                    })?;
                let idx = match classes.iter().position(|c| c.name == name) {
                    Some(idx) => idx,
                    None => {
                        classes.push(PartialClass {
                            name: name.to_string(),
                            ..Default::default()
                        });
                        classes.len() - 1
                    }
                };
                classes[idx].fields[slot] = Some(num!());
                continue;
            }

            let o = &mut cfg.train.optim;
            match key {
                "spacing" => cfg.spacing = num!(),
                "coords.offset" => cfg.offset = num!(),
                "scene.dims" => {
                    let v: Vec<usize> = parse_list(value).ok_or_else(bad)?;
                    cfg.scene.dims = v.try_into().map_err(|_| bad())?;
                }
                "scene.counts" => cfg.scene.counts = parse_list(value).ok_or_else(bad)?,
                "scene.noise_sigma" => cfg.scene.noise_sigma = num!(),
                "scene.min_separation" => cfg.scene.min_separation = num!(),
                "model.variant" => {
                    cfg.model.variant = match value {
                        "A" => Variant::A,
                        "B" => Variant::B,
                        _ => return Err(bad()),
                    }
                }
                "model.in_depth" => cfg.model.in_depth = num!(),
                "model.window_hw" => cfg.model.window_hw = num!(),
                "model.widths" => cfg.model.widths = parse_list(value).ok_or_else(bad)?,
                "model.downsample" => {
                    cfg.model.downsample = match value {
                        "pool" => Downsample::DepthPool,
                        "strided3d" => Downsample::StridedConv3d,
                        _ => return Err(bad()),
                    }
                }
                "model.seed" => cfg.model.seed = num!(),
                "train.epochs" => o.epochs = num!(),
                "train.lr" => o.base_lr = num!(),
                "train.warmup_epochs" => o.warmup_epochs = num!(),
                "train.weight_decay" => o.weight_decay = num!(),
                "train.batch_size" => o.batch_size = num!(),
                "train.ema_decay" => o.ema_decay = num!(),
                "train.beta1" => o.beta1 = num!(),
                "train.beta2" => o.beta2 = num!(),
                "train.adam_eps" => o.adam_eps = num!(),
                "train.loss" => o.loss = LossKind::from_name(value).ok_or_else(bad)?,
                "train.alpha" => o.loss_config.alpha = num!(),
                "train.epsilon" => o.loss_config.epsilon = num!(),
                "train.seed" => o.seed = num!(),
                "train.windows_per_scene" => cfg.train.windows_per_scene = num!(),
                "train.positive_fraction" => cfg.train.positive_fraction = num!(),
                "train.save_ema" => cfg.train.save_ema = bool_val()?,
                "tiling.window_depth" => cfg.tiling.window_depth = num!(),
                "tiling.window_hw" => cfg.tiling.window_hw = num!(),
                "tiling.xy_stride" => cfg.tiling.xy_stride = num!(),
                "tiling.z_stride" => cfg.tiling.z_stride = num!(),
                "tiling.pad_to" => cfg.tiling.pad_to = num!(),
                "tiling.edge_floor" => cfg.tiling.edge_floor = num!(),
                "tiling.blend" => cfg.tiling.blend = bool_val()?,
                "nms.kernel" => cfg.nms_kernel = num!(),
                "eval.beta" => cfg.eval.beta = num!(),
                "eval.empty_class_score" => cfg.eval.empty_class_score = num!(),
                _ => {
                    return Err(ConfigError::UnknownKey {
                        line,
                        key: key.into(),
                    })
                }
            }
        }

        if !classes.is_empty() {
            let mut table = Vec::with_capacity(classes.len());
            for c in classes {
                let get = |i: usize| {
                    c.fields[i].ok_or(ConfigError::IncompleteClass {
                        class: c.name.clone(),
                        field: CLASS_FIELDS[i],
                    })
                };
                table.push(ParticleClassSpec {
                    radius: get(0)?,
                    sigma_vox: get(1)?,
                    detect_threshold: get(2)?,
                    match_radius_tau: get(3)?,
                    metric_weight: get(4)?,
                    name: c.name,
                });
            }
            if !seen.contains("scene.counts") && table.len() != cfg.scene.counts.len() {
                cfg.scene.counts =
                    vec![cfg.scene.counts.first().copied().unwrap_or(5); table.len()];
            }
            cfg.classes = table;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
