//! `key = value` run configuration files.
//!
//! One setting per line; `#` starts a comment. Keys are the field names of
//! [`ModelConfig`] and [`TrainConfig`], plus `stages` (the stage count) and
//! `stageN.kernel`, `stageN.stride`, `stageN.dilation`, `stageN.padding`
//! with `N` counted from 1. A stage whose padding is not given gets the
//! "same" padding `dilation·(kernel−1)/2`. `patch_side` sets both the model
//! and the training patch size.
//!
//! ```text
//! # small run
//! embed_dim = 32
//! stage2.dilation = 1
//! max_steps = 200
//! ```

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tokenization::StageGeometry;
use crate::training::TrainConfig;

/// Named starting points for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preset {
    /// Full-scale settings from the original description.
    #[default]
    Paper,
    /// A reduced model and schedule that fit a single CPU core.
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            _ => Err(Error::Config(format!("unknown preset `{s}` (expected paper or desk)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self {
                model: ModelConfig::default(),
                train: TrainConfig::paper(),
            },
            Preset::Desk => Self {
                model: ModelConfig::desk(),
                train: TrainConfig::desk(),
            },
        }
    }

    /// Applies every setting in `text` on top of `self`.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        #[derive(Default, Clone, Copy)]
        struct StageEdit {
            kernel: Option<usize>,
            stride: Option<usize>,
            dilation: Option<usize>,
            padding: Option<usize>,
        }
        let mut edits: Vec<StageEdit> = Vec::new();
        let mut stage_count = None;
        let mut highest_edited = 0;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| Error::Config(format!("line {}: {m}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;

            fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
                value.parse().map_err(|_| format!("bad value `{value}` for `{key}`"))
            }
            let m = &mut self.model;
            let t = &mut self.train;
            let r: std::result::Result<(), String> = (|| {
                match key {
                    "patch_side" => {
                        m.patch_side = parse(key, value)?;
                        t.patch_side = m.patch_side;
                    }
                    "embed_dim" => m.embed_dim = parse(key, value)?,
                    "heads" => m.heads = parse(key, value)?,
                    "mlp_ratio" => m.mlp_ratio = parse(key, value)?,
                    "shift_pixels" => m.shift_pixels = parse(key, value)?,
                    "activation" => m.activation = value.parse().map_err(|e: Error| e.to_string())?,
                    "use_positional" => m.use_positional = parse(key, value)?,
                    "literal_eq3" => m.literal_eq3 = parse(key, value)?,
                    "token_skips" => m.token_skips = parse(key, value)?,
                    "residual_sign" => m.residual_sign = parse(key, value)?,
                    "norm_eps" => m.norm_eps = parse(key, value)?,
                    "stages" => stage_count = Some(parse::<usize>(key, value)?),
                    "learning_rate" => t.learning_rate = parse(key, value)?,
                    "beta1" => t.beta1 = parse(key, value)?,
                    "beta2" => t.beta2 = parse(key, value)?,
                    "eps_adam" => t.eps_adam = parse(key, value)?,
                    "epochs" => t.epochs = parse(key, value)?,
                    "max_steps" => {
                        t.max_steps = match value {
                            "none" => None,
                            v => Some(parse(key, v)?),
                        }
                    }
                    "patches_per_image" => t.patches_per_image = parse(key, value)?,
                    "batch_size" => t.batch_size = parse(key, value)?,
                    "seed" => t.seed = parse(key, value)?,
                    "augmentation" => t.augmentation = parse(key, value)?,
                    "keep_original_copy" => t.keep_original_copy = parse(key, value)?,
                    _ => {
                        let (stage, field) = key
                            .strip_prefix("stage")
                            .and_then(|s| s.split_once('.'))
                            .ok_or_else(|| format!("unknown key `{key}`"))?;
                        let n: usize = stage
                            .parse()
                            .ok()
                            .filter(|&n| n >= 1)
                            .ok_or_else(|| format!("bad stage number in `{key}`"))?;
                        highest_edited = highest_edited.max(n);
                        if edits.len() < n {
                            edits.resize(n, StageEdit::default());
                        }
                        let e = &mut edits[n - 1];
                        let v = Some(parse(key, value)?);
                        match field {
                            "kernel" => e.kernel = v,
                            "stride" => e.stride = v,
                            "dilation" => e.dilation = v,
                            "padding" => e.padding = v,
                            _ => return Err(format!("unknown key `{key}`")),
                        }
                    }
                }
                Ok(())
            })();
            r.map_err(err)?;
        }

        let count = stage_count.unwrap_or(highest_edited.max(self.model.stages.len()));
        let mut stages = Vec::with_capacity(count);
        for i in 0..count {
            let base = self.model.stages.get(i).copied();
            let e = edits.get(i).copied().unwrap_or_default();
            let touched = e.kernel.is_some() || e.dilation.is_some();
            let kernel = e.kernel.or(base.map(|b| b.kernel));
            let stride = e.stride.or(base.map(|b| b.stride));
            let dilation = e.dilation.or(base.map(|b| b.dilation)).or(Some(1));
            let (Some(kernel), Some(stride), Some(dilation)) = (kernel, stride, dilation) else {
                return Err(Error::Config(format!("stage{} needs kernel and stride", i + 1)));
            };
            let padding = match (e.padding, base) {
                (Some(p), _) => p,
                (None, Some(b)) if !touched => b.padding,
                _ => StageGeometry::same_padded(kernel, stride, dilation).padding,
            };
            stages.push(StageGeometry::new(kernel, stride, dilation, padding));
        }
        if highest_edited > count {
            return Err(Error::Config(format!(
                "stage{highest_edited} configured but stages = {count}"
            )));
        }
        self.model.stages = stages;
        self.model.validate()?;
        self.train.validate()
    }

    pub fn parse(preset: Preset, text: &str) -> Result<Self> {
        let mut c = Self::preset(preset);
        c.apply(text)?;
        Ok(c)
    }

    /// Every setting, in a form [`apply`](Self::apply) reads back.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = format!(
            "patch_side = {}\nembed_dim = {}\nheads = {}\nmlp_ratio = {}\nshift_pixels = {}\n\
             activation = {}\nuse_positional = {}\nliteral_eq3 = {}\ntoken_skips = {}\n\
             residual_sign = {}\nnorm_eps = {:e}\nstages = {}\n",
            m.patch_side,
            m.embed_dim,
            m.heads,
            m.mlp_ratio,
            m.shift_pixels,
            m.activation,
            m.use_positional,
            m.literal_eq3,
            m.token_skips,
            m.residual_sign,
            m.norm_eps,
            m.stages.len()
        );
        for (i, g) in m.stages.iter().enumerate() {
            let n = i + 1;
            s.push_str(&format!(
                "stage{n}.kernel = {}\nstage{n}.stride = {}\nstage{n}.dilation = {}\nstage{n}.padding = {}\n",
                g.kernel, g.stride, g.dilation, g.padding
            ));
        }
        s.push_str(&format!(
            "learning_rate = {:e}\nbeta1 = {}\nbeta2 = {}\neps_adam = {:e}\nepochs = {}\nmax_steps = {}\n\
             patches_per_image = {}\nbatch_size = {}\nseed = {}\naugmentation = {}\nkeep_original_copy = {}\n",
            t.learning_rate,
            t.beta1,
            t.beta2,
            t.eps_adam,
            t.epochs,
            t.max_steps.map_or("none".to_string(), |n| n.to_string()),
            t.patches_per_image,
            t.batch_size,
            t.seed,
            t.augmentation,
            t.keep_original_copy
        ));
        s
    }
}
