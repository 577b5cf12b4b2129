//! Experiment configuration: one TOML document with nested sections.
//!
//! Relative paths inside the document resolve against the document's own
//! directory. Every section is optional; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use histoclass::cv::TrainConfig;
use histoclass::model::{self, build_base, build_hybrid, compact_extractor, default_head, Extractor, ModelSpec};
use histoclass::optim::ScheduleConfig;
use histoclass::patch::{AugmentPolicy, QcRule};
use histoclass::stain::MacenkoParams;
use histoclass::tensor::LayerSpec;
use serde::Deserialize;

use crate::error::{CliError, IoContext, Result};

/// Augmentation presets, one per dataset scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    TcgaLike,
    KmcLike,
    ColonLike,
}

impl Preset {
    pub fn policy(self, seed: u64) -> AugmentPolicy {
        match self {
            Self::TcgaLike => AugmentPolicy::tcga_like(seed),
            Self::KmcLike => AugmentPolicy::kmc_like(seed),
            Self::ColonLike => AugmentPolicy::colon_like(seed),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub preset: Option<Preset>,
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads, 0 for all cores.
    pub workers: usize,
    pub data: DataSection,
    pub tile: TileSection,
    pub qc: QcSection,
    pub stain: StainSection,
    pub augment: Option<AugmentSection>,
    pub model: ModelSection,
    pub train: TrainSection,
    pub pretrain: PretrainSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            preset: None,
            seed: 0,
            out: PathBuf::from("histoclass-out"),
            workers: 0,
            data: DataSection::default(),
            tile: TileSection::default(),
            qc: QcSection::default(),
            stain: StainSection::default(),
            augment: None,
            model: ModelSection::default(),
            train: TrainSection::default(),
            pretrain: PretrainSection::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Slide directory; images sit in `type<k>` subdirectories, one per class.
    pub slides: PathBuf,
    pub num_classes: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { slides: PathBuf::from("slides"), num_classes: 4 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TileSection {
    pub size: u32,
    /// Defaults to `size`.
    pub stride: Option<u32>,
    /// Side of the written patches.
    pub patch_side: u32,
    /// Cap per class after QC, 0 for none.
    pub per_class: usize,
    /// Pad smaller classes with flipped copies up to this count, 0 for none.
    pub target_per_class: usize,
}

impl Default for TileSection {
    fn default() -> Self {
        Self { size: 1024, stride: None, patch_side: 224, per_class: 0, target_per_class: 0 }
    }
}

impl TileSection {
    pub fn stride(&self) -> u32 {
        self.stride.unwrap_or(self.size)
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QcSection {
    pub mean_max: f64,
    pub std_min: f64,
}

impl Default for QcSection {
    fn default() -> Self {
        let q = QcRule::default();
        Self { mean_max: q.mean_max, std_min: q.std_min }
    }
}

impl QcSection {
    pub fn rule(&self) -> QcRule {
        QcRule { mean_max: self.mean_max, std_min: self.std_min }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StainSection {
    pub enabled: bool,
    /// Reference profile file; the bundled profile when absent.
    pub reference: Option<PathBuf>,
    pub alpha: f64,
    pub beta: f64,
    pub i0: f64,
    pub min_pixels: usize,
}

impl Default for StainSection {
    fn default() -> Self {
        let p = MacenkoParams::default();
        Self { enabled: true, reference: None, alpha: p.alpha, beta: p.beta, i0: p.i0, min_pixels: p.min_pixels }
    }
}

impl StainSection {
    pub fn params(&self) -> MacenkoParams {
        MacenkoParams { alpha: self.alpha, beta: self.beta, i0: self.i0, min_pixels: self.min_pixels }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Base,
    Hybrid,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Patches are resized to this side before training.
    pub input_side: usize,
    /// Extractor layers such as `"conv2d in=3 out=8 k=3 pad=1"`; empty for the
    /// built-in compact extractor.
    pub extractor: Vec<LayerSpec>,
    /// Required for a custom extractor; the compact extractor defaults to 7.
    pub freeze_boundary: Option<usize>,
    /// Empty for the halving default.
    pub head_widths: Vec<usize>,
    /// Start from `<out>/pretrain/extractor.ckpt`.
    pub use_pretrained: bool,
    /// Start from this checkpoint instead.
    pub pretrained_path: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Hybrid,
            input_side: 64,
            extractor: Vec::new(),
            freeze_boundary: None,
            head_widths: Vec::new(),
            use_pretrained: false,
            pretrained_path: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub eta_max: f64,
    pub eta_min: f64,
    pub restart_period: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub patience: usize,
    pub test_fraction: f64,
    pub k: usize,
    pub cache_budget_mb: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            epochs: t.schedule.total_epochs,
            eta_max: t.schedule.eta_max,
            eta_min: t.schedule.eta_min,
            restart_period: t.schedule.restart_period,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_epsilon: t.adam_epsilon,
            patience: t.patience,
            test_fraction: t.test_fraction,
            k: t.k,
            cache_budget_mb: t.cache_budget_mb,
        }
    }
}

/// Source-task pretraining of the extractor.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    /// Directory of `type<k>` image folders; synthetic textures when absent.
    pub source: Option<PathBuf>,
    /// Synthetic textures per class.
    pub per_class: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self { source: None, per_class: 100, epochs: 24, batch_size: 32 }
    }
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Config {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.out);
        join(&mut self.data.slides);
        for p in [&mut self.stain.reference, &mut self.model.pretrained_path, &mut self.pretrain.source].into_iter().flatten() {
            join(p);
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
    }

    /// Checks every value against the preconditions of the module that uses it.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.data.num_classes < 2 {
            return bad(format!("data.num_classes must be at least 2, got {}", self.data.num_classes));
        }
        let t = &self.tile;
        if t.size == 0 || t.stride() == 0 || t.patch_side == 0 {
            return bad("tile.size, tile.stride and tile.patch_side must be positive".into());
        }
        if !(self.qc.mean_max.is_finite() && self.qc.std_min.is_finite()) {
            return bad("qc thresholds must be finite".into());
        }
        let s = &self.stain;
        if !(s.alpha > 0.0 && s.alpha < 50.0) {
            return bad(format!("stain.alpha {} outside (0, 50)", s.alpha));
        }
        if !(s.beta > 0.0 && s.beta.is_finite()) || !(s.i0 > 0.0 && s.i0.is_finite()) {
            return bad("stain.beta and stain.i0 must be positive".into());
        }
        if s.min_pixels == 0 {
            return bad("stain.min_pixels must be at least 1".into());
        }
        if self.train.k < 2 {
            return bad(format!("train.k must be at least 2, got {}", self.train.k));
        }
        if self.pretrain.per_class == 0 || self.pretrain.epochs == 0 {
            return bad("pretrain.per_class and pretrain.epochs must be positive".into());
        }
        if self.model.use_pretrained && self.model.pretrained_path.is_some() {
            return bad("model.use_pretrained and model.pretrained_path are exclusive".into());
        }
        self.train_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.pretrain_config().validate().map_err(|e| CliError::Config(format!("pretrain: {e}")))?;
        self.model_spec()?;
        Ok(())
    }

    pub fn augment_policy(&self) -> AugmentPolicy {
        match (self.augment, self.preset) {
            (Some(a), _) => AugmentPolicy { allow_hflip: a.hflip, allow_vflip: a.vflip, allow_rot90: a.rot90, seed: 0 },
            (None, Some(p)) => p.policy(0),
            (None, None) => AugmentPolicy::default(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            schedule: ScheduleConfig {
                eta_max: t.eta_max,
                eta_min: t.eta_min,
                restart_period: t.restart_period,
                total_epochs: t.epochs,
            },
            beta1: t.beta1,
            beta2: t.beta2,
            adam_epsilon: t.adam_epsilon,
            patience: t.patience,
            seed: self.seed,
            augment: self.augment_policy(),
            test_fraction: t.test_fraction,
            k: t.k,
            cache_budget_mb: t.cache_budget_mb,
        }
    }

    /// Training settings for the source task; schedule and optimizer follow `[train]`.
    pub fn pretrain_config(&self) -> TrainConfig {
        let base = self.train_config();
        TrainConfig {
            batch_size: self.pretrain.batch_size,
            schedule: ScheduleConfig { total_epochs: self.pretrain.epochs, ..base.schedule },
            ..base
        }
    }

    pub fn extractor(&self) -> Extractor {
        let side = self.model.input_side;
        if self.model.extractor.is_empty() {
            compact_extractor(side)
        } else {
            Extractor::new(vec![3, side, side], self.model.extractor.clone())
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let cfg_err = |e: model::ModelError| CliError::Config(format!("model: {e}"));
        let ex = self.extractor();
        let nc = self.data.num_classes;
        let dim = ex.feature_dim().map_err(cfg_err)?;
        match self.model.kind {
            ModelKind::Base => build_base(&ex, nc).map_err(cfg_err),
            ModelKind::Hybrid => {
                let boundary = match (self.model.freeze_boundary, self.model.extractor.is_empty()) {
                    (Some(b), _) => b,
                    (None, true) => model::COMPACT_HYBRID_BOUNDARY,
                    (None, false) => return Err(CliError::Config("model.freeze_boundary is required for a custom extractor".into())),
                };
                let head = if self.model.head_widths.is_empty() {
                    default_head(dim, nc).map_err(cfg_err)?
                } else {
                    self.model.head_widths.clone()
                };
                build_hybrid(&ex, boundary, &head, nc).map_err(cfg_err)
            }
        }
    }
}
