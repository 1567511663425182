//! Run configuration: flat UTF-8 `key=value` lines, one per knob. Unknown
//! keys are errors; missing keys fall back to the desk-scale defaults, so a
//! config file may list only overrides. serialize -> parse is identity.

use crate::assembly::{ConcatMode, ScanOrder};
use crate::model::ModelDims;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Random,
    Uniform,
}

impl std::str::FromStr for SampleMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(SampleMode::Random),
            "uniform" => Ok(SampleMode::Uniform),
            other => Err(format!("unknown sample mode: {other}")),
        }
    }
}

impl std::fmt::Display for SampleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}",
            match self {
                SampleMode::Random => "random",
                SampleMode::Uniform => "uniform",
            }
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptSource {
    /// Ground-truth boxes of the preceding frames.
    Gt,
    /// Boxes predicted by the current model on the preceding frames.
    Predicted,
}

impl std::str::FromStr for PromptSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gt" => Ok(PromptSource::Gt),
            "predicted" => Ok(PromptSource::Predicted),
            other => Err(format!("unknown prompt source: {other}")),
        }
    }
}

impl std::fmt::Display for PromptSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}",
            match self {
                PromptSource::Gt => "gt",
                PromptSource::Predicted => "predicted",
            }
        )
    }
}

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    BadLine { line: usize, msg: String },
    UnknownKey { line: usize, key: String },
    BadValue { line: usize, key: String, msg: String },
    OutOfRange { key: &'static str, msg: String },
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Io(e) => write!(f, "io error: {e}"),
            ConfigError::BadLine { line, msg } => write!(f, "line {line}: {msg}"),
            ConfigError::UnknownKey { line, key } => write!(f, "line {line}: unknown key {key}"),
            ConfigError::BadValue { line, key, msg } => {
                write!(f, "line {line}: bad value for {key}: {msg}")
            }
            ConfigError::OutOfRange { key, msg } => write!(f, "{key}: {msg}"),
        }
    }
}

impl std::error::Error for ConfigError {}

impl From<std::io::Error> for ConfigError {
    fn from(e: std::io::Error) -> Self {
        ConfigError::Io(e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    // model dimensions
    pub d_model: usize,
    pub n_state: usize,
    pub layers: usize,
    pub patch_size: usize,
    pub template_size: usize,
    pub search_size: usize,
    pub head_hidden: usize,
    // coordinate vocabulary
    pub nbins: usize,
    pub alpha: f64,
    // context configuration
    pub template_count: usize,
    pub prompt_len: usize,
    pub concat_mode: ConcatMode,
    pub scan_order: ScanOrder,
    pub sample_mode: SampleMode,
    pub max_interval: usize,
    // synthetic data
    pub frame_size: usize,
    pub video_len: usize,
    pub train_videos: usize,
    pub distractors: usize,
    // training
    pub batch_size: usize,
    pub steps_stage1: usize,
    pub steps_stage2: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub prompt_source: PromptSource,
    pub smooth_window: usize,
    /// Search-anchor scale range sampled per training sample: at inference
    /// the crop window derives from the model's own (noisy) previous
    /// prediction, and the size head must stay calibrated across that range.
    pub anchor_scale_min: f64,
    pub anchor_scale_max: f64,
    /// Stage-2 anchor center jitter (fraction of the window side): during
    /// occlusion the inference window follows stale predictions, so jittered
    /// training anchors leave the trajectory prompts as the only reliable
    /// location signal on occluded samples.
    pub stage2_center_jitter: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            d_model: 32,
            n_state: 8,
            layers: 2,
            patch_size: 16,
            template_size: 64,
            search_size: 128,
            head_hidden: 32,
            nbins: 400,
            alpha: 2.0,
            template_count: 3,
            prompt_len: 7,
            concat_mode: ConcatMode::Tsts,
            scan_order: ScanOrder::Spatial,
            sample_mode: SampleMode::Random,
            max_interval: 40,
            frame_size: 320,
            video_len: 64,
            train_videos: 12,
            distractors: 2,
            batch_size: 2,
            steps_stage1: 2000,
            steps_stage2: 3500,
            lr_stage1: 0.005,
            lr_stage2: 0.0005,
            prompt_source: PromptSource::Gt,
            smooth_window: 50,
            anchor_scale_min: 0.75,
            anchor_scale_max: 1.3,
            stage2_center_jitter: 0.25,
        }
    }
}

macro_rules! config_fields {
    ($macro_cb:ident) => {
        $macro_cb! {
            (seed, u64),
            (d_model, usize),
            (n_state, usize),
            (layers, usize),
            (patch_size, usize),
            (template_size, usize),
            (search_size, usize),
            (head_hidden, usize),
            (nbins, usize),
            (alpha, f64),
            (template_count, usize),
            (prompt_len, usize),
            (concat_mode, ConcatMode),
            (scan_order, ScanOrder),
            (sample_mode, SampleMode),
            (max_interval, usize),
            (frame_size, usize),
            (video_len, usize),
            (train_videos, usize),
            (distractors, usize),
            (batch_size, usize),
            (steps_stage1, usize),
            (steps_stage2, usize),
            (lr_stage1, f64),
            (lr_stage2, f64),
            (prompt_source, PromptSource),
            (smooth_window, usize),
            (anchor_scale_min, f64),
            (anchor_scale_max, f64),
            (stage2_center_jitter, f64)
        }
    };
}

impl RunConfig {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($(($field:ident, $ty:ty)),*) => {
                $(out.push_str(&format!("{}={}\n", stringify!($field), self.$field));)*
            };
        }
        config_fields!(emit);
        out
    }

    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
                line: i + 1,
                msg: "expected key=value".to_string(),
            })?;
            let key = key.trim();
            let value = value.trim();
            let mut matched = false;
            macro_rules! assign {
                ($(($field:ident, $ty:ty)),*) => {
                    $(
                        if key == stringify!($field) {
                            cfg.$field = value.parse::<$ty>().map_err(|e| ConfigError::BadValue {
                                line: i + 1,
                                key: key.to_string(),
                                msg: format!("{e}"),
                            })?;
                            matched = true;
                        }
                    )*
                };
            }
            config_fields!(assign);
            if !matched {
                return Err(ConfigError::UnknownKey {
                    line: i + 1,
                    key: key.to_string(),
                });
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |key: &'static str, msg: String| Err(ConfigError::OutOfRange { key, msg });
        if self.template_count < 1 {
            return err("template_count", "must be >= 1".into());
        }
        if self.template_size % self.patch_size != 0 || self.search_size % self.patch_size != 0 {
            return err("patch_size", "must divide template and search sizes".into());
        }
        if self.nbins < 2 {
            return err("nbins", "must be >= 2".into());
        }
        if !(self.alpha >= 1.0) {
            return err("alpha", "must be >= 1".into());
        }
        if self.batch_size < 1 {
            return err("batch_size", "must be >= 1".into());
        }
        if self.video_len < 2 {
            return err("video_len", "must be >= 2".into());
        }
        if self.train_videos < 1 {
            return err("train_videos", "must be >= 1".into());
        }
        if self.frame_size < self.search_size {
            return err("frame_size", "must be >= search_size".into());
        }
        if self.max_interval < self.template_count {
            return err("max_interval", "must be >= template_count".into());
        }
        if self.smooth_window < 1 {
            return err("smooth_window", "must be >= 1".into());
        }
        if !(self.lr_stage1 >= 0.0) || !(self.lr_stage2 >= 0.0) {
            return err("lr_stage1", "learning rates must be >= 0".into());
        }
        if !(self.anchor_scale_min > 0.0) || !(self.anchor_scale_max >= self.anchor_scale_min) {
            return err("anchor_scale_min", "need 0 < min <= max".into());
        }
        if !(self.stage2_center_jitter >= 0.0) {
            return err("stage2_center_jitter", "must be >= 0".into());
        }
        Ok(())
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            d_model: self.d_model,
            n_state: self.n_state,
            layers: self.layers,
            patch: self.patch_size,
            template_size: self.template_size,
            search_size: self.search_size,
            nbins: self.nbins,
            alpha: self.alpha,
            prompt_capacity: self.prompt_len,
            head_hidden: self.head_hidden,
        }
    }
}
