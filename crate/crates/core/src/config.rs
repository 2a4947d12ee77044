//! Model, scene, loss and training configuration.
//!
//! [`TrainConfig`] is the single flat key-value document accepted by the
//! training driver. Every field has a stable key; unknown keys are
//! rejected.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write as _;
use core::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Toy-scale network dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// BEV rows (longitudinal, y axis).
    pub grid_h: usize,
    /// BEV columns (lateral, x axis).
    pub grid_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub queries: usize,
    pub points: usize,
    pub teacher_hidden: usize,
    pub student_hidden: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            grid_h: 8,
            grid_w: 8,
            channels: 16,
            patch: 2,
            queries: 12,
            points: 20,
            teacher_hidden: 32,
            student_hidden: 32,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("channels", self.channels),
            ("patch", self.patch),
            ("queries", self.queries),
            ("teacher_hidden", self.teacher_hidden),
            ("student_hidden", self.student_hidden),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.points < 2 {
            return Err(Error::Config("points must be at least 2".into()));
        }
        if self.grid_h % self.patch != 0 || self.grid_w % self.patch != 0 {
            return Err(Error::Config(format!(
                "patch size {} does not divide the {}x{} grid",
                self.patch, self.grid_h, self.grid_w
            )));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// `N = H * W / P^2`.
    pub fn num_patches(&self) -> usize {
        self.cells() / (self.patch * self.patch)
    }

    /// Patch embedding width `P^2 * C`, also used as the attention scale.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn d_k(&self) -> usize {
        self.patch_dim()
    }
}

/// Synthetic scene and sensor model.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// Std-dev of additive noise on the camera raster.
    pub camera_noise: f64,
    /// Ratio of camera to LiDAR additive noise std-dev.
    pub noise_ratio: f64,
    /// Std-dev (meters, at 30 m range) of per-element depth error seen by the camera.
    pub depth_jitter: f64,
    /// Probability that the camera misses an element entirely.
    pub camera_dropout: f64,
    pub min_per_class: usize,
    pub max_per_class: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            camera_noise: 0.3,
            noise_ratio: 4.0,
            depth_jitter: 2.0,
            camera_dropout: 0.1,
            min_per_class: 1,
            max_per_class: 4,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.camera_noise >= 0.0) || !(self.depth_jitter >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        if !(self.noise_ratio > 0.0) {
            return Err(Error::Config("noise_ratio must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.camera_dropout) {
            return Err(Error::Config("camera_dropout must lie in [0, 1)".into()));
        }
        if self.min_per_class == 0 || self.min_per_class > self.max_per_class {
            return Err(Error::Config("need 1 <= min_per_class <= max_per_class".into()));
        }
        Ok(())
    }

    pub fn lidar_noise(&self) -> f64 {
        self.camera_noise / self.noise_ratio
    }
}

/// Which attention pairs the relation loss compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelationMode {
    /// camera-to-LiDAR and LiDAR-to-camera.
    Cross,
    /// camera-to-camera and LiDAR-to-LiDAR.
    Uni,
    /// All four.
    Hybrid,
}

impl FromStr for RelationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross" => Ok(Self::Cross),
            "uni" => Ok(Self::Uni),
            "hybrid" => Ok(Self::Hybrid),
            other => Err(Error::Config(format!("unknown relation mode {other:?}"))),
        }
    }
}

impl RelationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cross => "cross",
            Self::Uni => "uni",
            Self::Hybrid => "hybrid",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub map_cls_weight: f64,
    pub map_pts_weight: f64,
    pub map_dir_weight: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub relation_mode: RelationMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            map_cls_weight: 1.0,
            map_pts_weight: 1.0,
            map_dir_weight: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            relation_mode: RelationMode::Cross,
        }
    }
}

/// Distillation loss weights with their ablation switches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillWeights {
    pub relation: f64,
    pub feature: f64,
    pub head: f64,
}

impl DistillWeights {
    pub const DEFAULT: Self = Self { relation: 0.3, feature: 0.6, head: 0.9 };
    pub const NONE: Self = Self { relation: 0.0, feature: 0.0, head: 0.0 };

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("lambda_relation", self.relation), ("lambda_feature", self.feature), ("lambda_head", self.head)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{k} must be a non-negative finite number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which phase(s) a training run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Teacher,
    Student,
    Both,
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Self::Teacher),
            "student" => Ok(Self::Student),
            "both" => Ok(Self::Both),
            other => Err(Error::Config(format!("unknown phase {other:?}"))),
        }
    }
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Teacher => "teacher",
            Self::Student => "student",
            Self::Both => "both",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub lambdas: DistillWeights,
    pub use_relation: bool,
    pub use_feature: bool,
    pub use_head: bool,
    pub lr0: f64,
    pub decay_factor: f64,
    /// Epochs at which the learning rate is multiplied by `decay_factor`.
    /// Empty means "at two thirds of the run".
    pub decay_milestones: Vec<usize>,
    pub batch: usize,
    pub epochs: usize,
    pub teacher_epochs: usize,
    pub teacher_lr0: f64,
    pub seed: u64,
    pub data_seed: u64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Evaluate every this many epochs; 0 evaluates only after the last epoch.
    pub eval_every: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub pipeline: PipelineConfig,
    pub scene: SceneConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Both,
            lambdas: DistillWeights::DEFAULT,
            use_relation: true,
            use_feature: true,
            use_head: true,
            lr0: 0.01,
            decay_factor: 0.1,
            decay_milestones: Vec::new(),
            batch: 8,
            epochs: 30,
            teacher_epochs: 30,
            teacher_lr0: 0.01,
            seed: 0,
            data_seed: 2024,
            train_scenes: 256,
            eval_scenes: 64,
            eval_every: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            pipeline: PipelineConfig::default(),
            scene: SceneConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for key {key}"))),
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "phase",
        "lambda_relation",
        "lambda_feature",
        "lambda_head",
        "use_relation",
        "use_feature",
        "use_head",
        "lr0",
        "decay_factor",
        "decay_milestones",
        "batch",
        "epochs",
        "teacher_epochs",
        "teacher_lr0",
        "seed",
        "data_seed",
        "train_scenes",
        "eval_scenes",
        "eval_every",
        "weight_decay",
        "beta1",
        "beta2",
        "eps",
        "grid_h",
        "grid_w",
        "channels",
        "patch",
        "queries",
        "points",
        "teacher_hidden",
        "student_hidden",
        "camera_noise",
        "noise_ratio",
        "depth_jitter",
        "camera_dropout",
        "min_per_class",
        "max_per_class",
        "map_cls_weight",
        "map_pts_weight",
        "map_dir_weight",
        "focal_gamma",
        "focal_alpha",
        "relation_mode",
    ];

    /// Sets one field from its textual key and value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "phase" => self.phase = v.trim().parse()?,
            "lambda_relation" => self.lambdas.relation = parse(key, v)?,
            "lambda_feature" => self.lambdas.feature = parse(key, v)?,
            "lambda_head" => self.lambdas.head = parse(key, v)?,
            "use_relation" => self.use_relation = parse_bool(key, v)?,
            "use_feature" => self.use_feature = parse_bool(key, v)?,
            "use_head" => self.use_head = parse_bool(key, v)?,
            "lr0" => self.lr0 = parse(key, v)?,
            "decay_factor" => self.decay_factor = parse(key, v)?,
            "decay_milestones" => {
                self.decay_milestones = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<Vec<usize>>>()?
            }
            "batch" => self.batch = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "teacher_epochs" => self.teacher_epochs = parse(key, v)?,
            "teacher_lr0" => self.teacher_lr0 = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "train_scenes" => self.train_scenes = parse(key, v)?,
            "eval_scenes" => self.eval_scenes = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "eps" => self.eps = parse(key, v)?,
            "grid_h" => self.pipeline.grid_h = parse(key, v)?,
            "grid_w" => self.pipeline.grid_w = parse(key, v)?,
            "channels" => self.pipeline.channels = parse(key, v)?,
            "patch" => self.pipeline.patch = parse(key, v)?,
            "queries" => self.pipeline.queries = parse(key, v)?,
            "points" => self.pipeline.points = parse(key, v)?,
            "teacher_hidden" => self.pipeline.teacher_hidden = parse(key, v)?,
            "student_hidden" => self.pipeline.student_hidden = parse(key, v)?,
            "camera_noise" => self.scene.camera_noise = parse(key, v)?,
            "noise_ratio" => self.scene.noise_ratio = parse(key, v)?,
            "depth_jitter" => self.scene.depth_jitter = parse(key, v)?,
            "camera_dropout" => self.scene.camera_dropout = parse(key, v)?,
            "min_per_class" => self.scene.min_per_class = parse(key, v)?,
            "max_per_class" => self.scene.max_per_class = parse(key, v)?,
            "map_cls_weight" => self.loss.map_cls_weight = parse(key, v)?,
            "map_pts_weight" => self.loss.map_pts_weight = parse(key, v)?,
            "map_dir_weight" => self.loss.map_dir_weight = parse(key, v)?,
            "focal_gamma" => self.loss.focal_gamma = parse(key, v)?,
            "focal_alpha" => self.loss.focal_alpha = parse(key, v)?,
            "relation_mode" => self.loss.relation_mode = v.trim().parse()?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Value of `key` in canonical textual form.
    pub fn get(&self, key: &str) -> Result<String> {
        let s = match key {
            "phase" => self.phase.as_str().to_string(),
            "lambda_relation" => format!("{}", self.lambdas.relation),
            "lambda_feature" => format!("{}", self.lambdas.feature),
            "lambda_head" => format!("{}", self.lambdas.head),
            "use_relation" => format!("{}", self.use_relation),
            "use_feature" => format!("{}", self.use_feature),
            "use_head" => format!("{}", self.use_head),
            "lr0" => format!("{}", self.lr0),
            "decay_factor" => format!("{}", self.decay_factor),
            "decay_milestones" => {
                let parts: Vec<String> = self.decay_milestones.iter().map(|m| format!("{m}")).collect();
                parts.join(",")
            }
            "batch" => format!("{}", self.batch),
            "epochs" => format!("{}", self.epochs),
            "teacher_epochs" => format!("{}", self.teacher_epochs),
            "teacher_lr0" => format!("{}", self.teacher_lr0),
            "seed" => format!("{}", self.seed),
            "data_seed" => format!("{}", self.data_seed),
            "train_scenes" => format!("{}", self.train_scenes),
            "eval_scenes" => format!("{}", self.eval_scenes),
            "eval_every" => format!("{}", self.eval_every),
            "weight_decay" => format!("{}", self.weight_decay),
            "beta1" => format!("{}", self.beta1),
            "beta2" => format!("{}", self.beta2),
            "eps" => format!("{}", self.eps),
            "grid_h" => format!("{}", self.pipeline.grid_h),
            "grid_w" => format!("{}", self.pipeline.grid_w),
            "channels" => format!("{}", self.pipeline.channels),
            "patch" => format!("{}", self.pipeline.patch),
            "queries" => format!("{}", self.pipeline.queries),
            "points" => format!("{}", self.pipeline.points),
            "teacher_hidden" => format!("{}", self.pipeline.teacher_hidden),
            "student_hidden" => format!("{}", self.pipeline.student_hidden),
            "camera_noise" => format!("{}", self.scene.camera_noise),
            "noise_ratio" => format!("{}", self.scene.noise_ratio),
            "depth_jitter" => format!("{}", self.scene.depth_jitter),
            "camera_dropout" => format!("{}", self.scene.camera_dropout),
            "min_per_class" => format!("{}", self.scene.min_per_class),
            "max_per_class" => format!("{}", self.scene.max_per_class),
            "map_cls_weight" => format!("{}", self.loss.map_cls_weight),
            "map_pts_weight" => format!("{}", self.loss.map_pts_weight),
            "map_dir_weight" => format!("{}", self.loss.map_dir_weight),
            "focal_gamma" => format!("{}", self.loss.focal_gamma),
            "focal_alpha" => format!("{}", self.loss.focal_alpha),
            "relation_mode" => self.loss.relation_mode.as_str().to_string(),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        };
        Ok(s)
    }

    /// Parses a `key = value` document on top of the defaults. Blank lines
    /// and `#` comments are ignored. Errors name the key and line.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv_text(text)?;
        Ok(cfg)
    }

    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {line:?}", lineno + 1))
            })?;
            let key = key.trim();
            self.set(key, value).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {} (key {key}): {msg}", lineno + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Canonical serialization: every key in [`Self::KEYS`] order.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    /// Hex SHA-256 prefix of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv_text().as_bytes());
        let mut s = String::with_capacity(16);
        for b in &digest[..8] {
            let _ = write!(s, "{b:02x}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.lambdas.validate()?;
        self.pipeline.validate()?;
        self.scene.validate()?;
        if !(self.lr0 > 0.0) || !(self.teacher_lr0 > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("decay_factor must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("need 0 <= beta1, beta2 < 1 and eps > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        let max_elements = self.scene.max_per_class * crate::map::NUM_CLASSES;
        if self.pipeline.queries < max_elements {
            return Err(Error::Config(format!(
                "{} queries cannot cover up to {max_elements} elements per scene",
                self.pipeline.queries
            )));
        }
        if self.train_scenes == 0 || self.eval_scenes == 0 {
            return Err(Error::Config("train_scenes and eval_scenes must be positive".into()));
        }
        Ok(())
    }

    /// Loss weights after applying the ablation switches.
    pub fn effective_weights(&self) -> DistillWeights {
        DistillWeights {
            relation: if self.use_relation { self.lambdas.relation } else { 0.0 },
            feature: if self.use_feature { self.lambdas.feature } else { 0.0 },
            head: if self.use_head { self.lambdas.head } else { 0.0 },
        }
    }

    pub fn milestones(&self) -> Vec<usize> {
        if self.decay_milestones.is_empty() {
            alloc::vec![(2 * self.epochs).div_ceil(3)]
        } else {
            self.decay_milestones.clone()
        }
    }

    pub fn teacher_milestones(&self) -> Vec<usize> {
        alloc::vec![(2 * self.teacher_epochs).div_ceil(3)]
    }
}
