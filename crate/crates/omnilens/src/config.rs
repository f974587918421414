//! Run configuration: one JSON document describing the modality, tokenizer,
//! lens, trunk, anchors, teachers, training, and evaluation settings.
//!
//! Validation happens once, up front, and checks every cross-module width
//! constraint so later stages can assume consistent shapes. Serialization
//! round-trips bit-stably (struct field order is the schema order).

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use omnilens_core::anchors::{AnchorModality, AnchorSpec, ImageTeacherConfig};
use omnilens_core::backbone::BackboneConfig;
use omnilens_core::lens::{LensConfig, LensVariant};
use omnilens_core::tokenize::augment::{AudioAugment, GridAugment, PointAugment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    PointCloud,
    Audio,
    Depth,
    Tactile,
    Eeg,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::PointCloud,
        Modality::Audio,
        Modality::Depth,
        Modality::Tactile,
        Modality::Eeg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::PointCloud => "point_cloud",
            Modality::Audio => "audio",
            Modality::Depth => "depth",
            Modality::Tactile => "tactile",
            Modality::Eeg => "eeg",
        }
    }

    pub fn parse(s: &str) -> Result<Modality> {
        Ok(match s {
            "point_cloud" | "pointcloud" | "points" | "3d" => Modality::PointCloud,
            "audio" => Modality::Audio,
            "depth" => Modality::Depth,
            "tactile" => Modality::Tactile,
            "eeg" => Modality::Eeg,
            other => bail!("unknown modality {other:?}"),
        })
    }
}

/// Tokenizer settings. One struct carries every modality's knobs; only the
/// group matching `RunConfig::modality` is read, and validation ignores the
/// rest. Keeping them flat makes the JSON schema stable and defaults easy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenizerConfig {
    // Point clouds.
    pub n_points: usize,
    pub groups: usize,
    pub neighbors: usize,
    pub pointnet_hidden1: usize,
    pub pointnet_hidden2: usize,
    pub fps_start: usize,
    // Audio.
    pub sample_rate: u32,
    pub n_mels: usize,
    pub win_ms: u32,
    pub hop_ms: u32,
    pub clip_seconds: f64,
    pub audio_patch: usize,
    pub audio_stride: usize,
    // Depth and tactile grids.
    pub grid_h: usize,
    pub grid_w: usize,
    pub grid_patch: usize,
    pub disparity_scale: f64,
    // EEG.
    pub eeg_channels: usize,
    pub eeg_steps: usize,
    pub eeg_group: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            n_points: 256,
            groups: 32,
            neighbors: 8,
            pointnet_hidden1: 32,
            pointnet_hidden2: 64,
            fps_start: 0,
            sample_rate: 16_000,
            n_mels: 64,
            win_ms: 25,
            hop_ms: 10,
            clip_seconds: 1.0,
            audio_patch: 8,
            audio_stride: 8,
            grid_h: 32,
            grid_w: 32,
            grid_patch: 8,
            disparity_scale: 1.0,
            eeg_channels: 16,
            eeg_steps: 128,
            eeg_group: 4,
        }
    }
}

impl TokenizerConfig {
    /// Number of spectrogram frames a full configured clip produces.
    pub fn audio_frames(&self) -> usize {
        let samples = (self.clip_seconds * self.sample_rate as f64) as usize;
        let hop = (self.sample_rate as usize * self.hop_ms as usize) / 1000;
        samples.div_ceil(hop)
    }

    /// Token count the configured modality feeds into the lens.
    pub fn token_count(&self, modality: Modality) -> Result<usize> {
        Ok(match modality {
            Modality::PointCloud => self.groups,
            Modality::Audio => {
                let nf = slide(self.n_mels, self.audio_patch, self.audio_stride)
                    .context("mel axis smaller than one patch")?;
                let nt = slide(self.audio_frames(), self.audio_patch, self.audio_stride)
                    .context("time axis smaller than one patch")?;
                nf * nt
            }
            Modality::Depth | Modality::Tactile => {
                if self.grid_h % self.grid_patch != 0 || self.grid_w % self.grid_patch != 0 {
                    bail!(
                        "grid {}x{} not divisible by patch {}",
                        self.grid_h,
                        self.grid_w,
                        self.grid_patch
                    );
                }
                (self.grid_h / self.grid_patch) * (self.grid_w / self.grid_patch)
            }
            Modality::Eeg => {
                if self.eeg_steps % self.eeg_group != 0 {
                    bail!(
                        "eeg length {} not divisible by group {}",
                        self.eeg_steps,
                        self.eeg_group
                    );
                }
                self.eeg_steps / self.eeg_group
            }
        })
    }

    /// Patch-grid geometry of the token sequence, for modalities that have one.
    pub fn token_grid(&self, modality: Modality) -> Option<(usize, usize)> {
        match modality {
            Modality::Audio => {
                let nf = slide(self.n_mels, self.audio_patch, self.audio_stride)?;
                let nt = slide(self.audio_frames(), self.audio_patch, self.audio_stride)?;
                Some((nf, nt))
            }
            Modality::Depth | Modality::Tactile => {
                Some((self.grid_h / self.grid_patch, self.grid_w / self.grid_patch))
            }
            Modality::PointCloud | Modality::Eeg => None,
        }
    }
}

fn slide(n: usize, p: usize, s: usize) -> Option<usize> {
    if n < p {
        None
    } else {
        Some((n - p) / s + 1)
    }
}

/// Synthetic dataset shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { classes: 5, train_per_class: 50, val_per_class: 10, test_per_class: 20 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub audio: AudioAugment,
    pub points: PointAugment,
    pub grid: GridAugment,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            audio: AudioAugment::default(),
            points: PointAugment::default(),
            grid: GridAugment::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Repeat the train split this many times per shuffled epoch.
    pub sample_replication: usize,
    /// Run the validation metrics every this many steps (0 = never).
    pub eval_every: usize,
    /// Write an intermediate checkpoint every this many steps (0 = final only).
    pub checkpoint_every: usize,
    pub augment: AugmentConfig,
    /// Caption pattern used for per-sample text anchors; `{}` takes the class name.
    pub caption: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 600,
            batch: 16,
            lr: 2e-3,
            warmup_steps: 20,
            weight_decay: 0.01,
            sample_replication: 1,
            eval_every: 200,
            checkpoint_every: 0,
            augment: AugmentConfig::default(),
            caption: "a photo of a {}".into(),
        }
    }
}

/// Optional class-merge rule: the listed member classes are scored as one
/// group whose similarity is the maximum over members.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMerge {
    pub merged_name: String,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub k_list: Vec<usize>,
    pub templates: Vec<String>,
    pub probe_shots: usize,
    /// Multi-clip windows (seconds) for audio evaluation; 0 disables.
    pub clip_window_s: f64,
    pub clip_stride_s: f64,
    #[serde(default)]
    pub class_merge: Option<ClassMerge>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_list: vec![1, 2],
            templates: vec![
                "a photo of a {}".into(),
                "a blurry photo of a {}".into(),
                "an image of a {}".into(),
            ],
            probe_shots: 8,
            clip_window_s: 0.0,
            clip_stride_s: 0.0,
            class_merge: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextTeacherSettings {
    pub d: usize,
    pub d_out: usize,
}

impl Default for TextTeacherSettings {
    fn default() -> Self {
        TextTeacherSettings { d: 48, d_out: 32 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub modality: Modality,
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub lens: LensConfig,
    pub backbone: BackboneConfig,
    pub anchors: AnchorSpec,
    pub teacher_image: ImageTeacherConfig,
    pub teacher_text: TextTeacherSettings,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Defaults sized so the full acceptance suite runs on a laptop CPU.
    pub fn default_for(modality: Modality) -> RunConfig {
        let d = 64;
        let n_latents = 16;
        let d_out = 32;
        let tokenizer = TokenizerConfig::default();
        let lens = LensConfig {
            variant: LensVariant::IterCSAttn,
            blocks: 2,
            self_layers: 1,
            tie_weights: false,
            n_latents,
            d,
            heads: 4,
        };
        let backbone = BackboneConfig {
            total_blocks: 4,
            l_first: 3,
            l_last: 4,
            d,
            heads: 4,
            d_out,
            pos_len: n_latents + 1,
            use_cls: true,
            final_norm: true,
            pos_grid: None,
            trainable: false,
        };
        let anchor_list = match modality {
            Modality::Audio => vec![AnchorModality::Image, AnchorModality::Text],
            _ => vec![AnchorModality::Text],
        };
        let caption = match modality {
            Modality::Audio => "the sound of a {}".to_string(),
            Modality::Tactile => "a surface that feels {}".to_string(),
            Modality::Eeg => "a recording of a {} rhythm".to_string(),
            _ => "a photo of a {}".to_string(),
        };
        let templates = match modality {
            Modality::Audio => vec![
                "the sound of a {}".into(),
                "a {} sound".into(),
                "a recording of a {}".into(),
            ],
            Modality::Tactile => vec![
                "a surface that feels {}".into(),
                "a {} surface".into(),
                "a {} texture".into(),
            ],
            Modality::Eeg => vec![
                "a recording of a {} rhythm".into(),
                "a {} rhythm".into(),
                "a {} wave pattern".into(),
            ],
            _ => EvalConfig::default().templates,
        };
        RunConfig {
            seed: 7,
            modality,
            data: DataConfig::default(),
            tokenizer,
            lens,
            backbone,
            anchors: AnchorSpec { anchors: anchor_list, d_out },
            teacher_image: ImageTeacherConfig {
                image_h: 32,
                image_w: 32,
                channels: 3,
                patch: 8,
                d: 32,
                heads: 2,
                blocks: 2,
                d_out,
            },
            teacher_text: TextTeacherSettings::default(),
            train: TrainConfig { caption, ..TrainConfig::default() },
            eval: EvalConfig { templates, ..EvalConfig::default() },
        }
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text).context("parsing run config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Class names for the synthetic generators, fixed per modality.
    pub fn class_names(&self) -> Result<Vec<String>> {
        let pool: &[&str] = match self.modality {
            Modality::PointCloud => &["sphere", "cube", "cylinder", "torus", "cone"],
            Modality::Audio => &["bell", "horn", "whistle", "drone", "click"],
            Modality::Depth => &["plane", "ramp", "dome", "valley", "ridge"],
            Modality::Tactile => &["smooth", "striped", "dotted", "gridded", "rough"],
            Modality::Eeg => &["delta", "theta", "alpha", "beta", "gamma"],
        };
        if self.data.classes < 2 || self.data.classes > pool.len() {
            bail!(
                "{} supports 2..={} classes, config asks for {}",
                self.modality.name(),
                pool.len(),
                self.data.classes
            );
        }
        Ok(pool[..self.data.classes].iter().map(|s| s.to_string()).collect())
    }

    /// Vocabulary for the text teacher: every word of every template and
    /// caption plus all class names, deduplicated, in first-seen order.
    pub fn vocab(&self) -> Result<Vec<String>> {
        let mut vocab: Vec<String> = Vec::new();
        let push_words = |text: &str, vocab: &mut Vec<String>| {
            for raw in text.split_whitespace() {
                let word: String = raw
                    .chars()
                    .filter(|c| c.is_ascii_alphanumeric())
                    .map(|c| c.to_ascii_lowercase())
                    .collect();
                if !word.is_empty() && !vocab.iter().any(|v| *v == word) {
                    vocab.push(word);
                }
            }
        };
        for name in self.class_names()? {
            push_words(&name, &mut vocab);
        }
        push_words(&self.train.caption.replace("{}", " "), &mut vocab);
        for t in &self.eval.templates {
            push_words(&t.replace("{}", " "), &mut vocab);
        }
        if let Some(merge) = &self.eval.class_merge {
            push_words(&merge.merged_name, &mut vocab);
        }
        Ok(vocab)
    }

    /// Every cross-module constraint checked before any compute.
    pub fn validate(&self) -> Result<()> {
        let t = &self.tokenizer;
        match self.modality {
            Modality::PointCloud => {
                if t.groups == 0 || t.neighbors == 0 || t.n_points == 0 {
                    bail!("point tokenizer sizes must be positive");
                }
                if t.groups > t.n_points || t.neighbors > t.n_points {
                    bail!(
                        "groups ({}) and neighbors ({}) cannot exceed n_points ({})",
                        t.groups,
                        t.neighbors,
                        t.n_points
                    );
                }
                if t.fps_start >= t.n_points {
                    bail!("fps start index {} outside cloud of {}", t.fps_start, t.n_points);
                }
            }
            Modality::Audio => {
                if t.clip_seconds <= 0.0 {
                    bail!("clip length must be positive");
                }
                let samples = (t.clip_seconds * t.sample_rate as f64) as usize;
                let win = (t.sample_rate as usize * t.win_ms as usize) / 1000;
                if samples < win {
                    bail!("clip shorter than one analysis window");
                }
            }
            Modality::Depth | Modality::Tactile | Modality::Eeg => {}
        }
        let m = self.tokenizer.token_count(self.modality)?;
        if m == 0 {
            bail!("tokenizer produces no tokens");
        }
        self.anchors.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
        if self.lens.d != self.backbone.d {
            bail!("lens width {} does not match trunk width {}", self.lens.d, self.backbone.d);
        }
        if self.backbone.d_out != self.anchors.d_out {
            bail!(
                "trunk output width {} does not match anchor width {}",
                self.backbone.d_out,
                self.anchors.d_out
            );
        }
        if self.teacher_image.d_out != self.anchors.d_out
            || self.teacher_text.d_out != self.anchors.d_out
        {
            bail!("teacher output widths must all equal anchors.d_out");
        }
        let lens_out = self.lens.output_len(m);
        let expected_pos = lens_out + usize::from(self.backbone.use_cls);
        if self.backbone.pos_len != expected_pos {
            bail!(
                "trunk positional table has {} rows but the lens emits {} tokens (+{} class)",
                self.backbone.pos_len,
                lens_out,
                usize::from(self.backbone.use_cls)
            );
        }
        if self.train.batch == 0 {
            bail!("batch size must be >= 1");
        }
        if self.train.lr <= 0.0 || !self.train.lr.is_finite() {
            bail!("learning rate must be positive and finite");
        }
        if self.eval.k_list.is_empty() {
            bail!("eval needs at least one K");
        }
        for &k in &self.eval.k_list {
            if k == 0 || k > self.data.classes {
                bail!("eval K={} invalid for {} classes", k, self.data.classes);
            }
        }
        if self.eval.templates.is_empty() {
            bail!("eval needs at least one template");
        }
        for t in &self.eval.templates {
            if !t.contains("{}") {
                bail!("template {t:?} has no {{}} slot");
            }
        }
        if !self.train.caption.contains("{}") {
            bail!("caption {:?} has no {{}} slot", self.train.caption);
        }
        if self.eval.probe_shots == 0 {
            bail!("probe shots must be >= 1");
        }
        if self.eval.probe_shots > self.data.train_per_class {
            bail!(
                "probe shots {} exceed train rows per class {}",
                self.eval.probe_shots,
                self.data.train_per_class
            );
        }
        if self.data.train_per_class == 0 || self.data.test_per_class == 0 {
            bail!("train and test splits must be non-empty");
        }
        if let Some(merge) = &self.eval.class_merge {
            if merge.members.len() < 2 {
                bail!("class merge needs at least 2 member classes");
            }
        }
        // Constructing the teachers and model also validates their own
        // invariants (head divisibility, patch tiling); done at build time.
        Ok(())
    }
}
