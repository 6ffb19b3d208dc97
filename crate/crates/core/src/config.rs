//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` and blank lines are ignored; trailing `# ...`
//! comments are stripped. Unknown keys are errors.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::image::ScaleSizes;
use crate::model::{BackboneConfig, FreezeStage, Mode, ModelConfig};
use crate::pipeline::{InputSpec, FINE_RESIZE_FACTOR};
use crate::train::StageConfig;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub coarse_size: usize,
    pub fine_resize: usize,
    pub crop_size: usize,
    pub hidden_units: usize,
    pub blocks: Vec<usize>,
    pub batch_size: usize,
    pub stage1_updates: usize,
    pub stage1_lr: f64,
    pub stage2_updates: usize,
    pub stage2_lr: f64,
    pub unfreeze_blocks: usize,
    pub single_scale: bool,
    pub augment: bool,
    pub tta: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            coarse_size: 64,
            fine_resize: 128,
            crop_size: 64,
            hidden_units: 32,
            blocks: vec![8, 16, 32, 64],
            batch_size: 32,
            stage1_updates: 150,
            stage1_lr: 0.01,
            stage2_updates: 600,
            stage2_lr: 0.001,
            unfreeze_blocks: 2,
            single_scale: false,
            augment: true,
            tta: true,
        }
    }
}

fn parse_value<T: FromStr>(raw: &str, line: usize, key: &str) -> Result<T, ConfigError> {
    raw.parse().map_err(|_| ConfigError::Parse {
        line,
        message: format!("invalid value {raw:?} for {key}"),
    })
}

fn parse_bool(raw: &str, line: usize, key: &str) -> Result<bool, ConfigError> {
    match raw.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::Parse {
            line,
            message: format!("invalid boolean {raw:?} for {key}"),
        }),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw_line) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw_line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Parse {
                line,
                message: format!("expected key = value, found {content:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "seed" => cfg.seed = parse_value(value, line, key)?,
                "coarse_size" => cfg.coarse_size = parse_value(value, line, key)?,
                "fine_resize" => cfg.fine_resize = parse_value(value, line, key)?,
                "crop_size" => cfg.crop_size = parse_value(value, line, key)?,
                "hidden_units" => cfg.hidden_units = parse_value(value, line, key)?,
                "blocks" => {
                    cfg.blocks = value
                        .split(',')
                        .map(|w| parse_value(w.trim(), line, key))
                        .collect::<Result<_, _>>()?
                }
                "batch_size" => cfg.batch_size = parse_value(value, line, key)?,
                "stage1_updates" => cfg.stage1_updates = parse_value(value, line, key)?,
                "stage1_lr" => cfg.stage1_lr = parse_value(value, line, key)?,
                "stage2_updates" => cfg.stage2_updates = parse_value(value, line, key)?,
                "stage2_lr" => cfg.stage2_lr = parse_value(value, line, key)?,
                "unfreeze_blocks" => cfg.unfreeze_blocks = parse_value(value, line, key)?,
                "single_scale" => cfg.single_scale = parse_bool(value, line, key)?,
                "augment" => cfg.augment = parse_bool(value, line, key)?,
                "tta" => cfg.tta = parse_bool(value, line, key)?,
                _ => {
                    return Err(ConfigError::Parse {
                        line,
                        message: format!("unknown key {key:?}"),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        let sizes = [
            ("coarse_size", self.coarse_size),
            ("fine_resize", self.fine_resize),
            ("crop_size", self.crop_size),
            ("hidden_units", self.hidden_units),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return invalid(format!("{name} must be positive"));
        }
        if self.batch_size < 3 {
            return invalid(format!("batch_size {} must be at least 3", self.batch_size));
        }
        if self.crop_size > self.fine_resize {
            return invalid(format!(
                "crop_size {} exceeds fine_resize {}",
                self.crop_size, self.fine_resize
            ));
        }
        if !self.single_scale && self.crop_size != self.coarse_size {
            return invalid(format!(
                "both views share one backbone, so crop_size ({}) must equal coarse_size ({})",
                self.crop_size, self.coarse_size
            ));
        }
        if !self.single_scale && self.fine_resize != FINE_RESIZE_FACTOR * self.coarse_size {
            return invalid(format!(
                "fine_resize ({}) must be {FINE_RESIZE_FACTOR} x coarse_size ({}) so saved weights determine preprocessing",
                self.fine_resize, self.coarse_size
            ));
        }
        if self.unfreeze_blocks >= self.blocks.len() {
            return invalid(format!(
                "unfreeze_blocks {} must be less than the number of blocks {}",
                self.unfreeze_blocks,
                self.blocks.len()
            ));
        }
        for (name, lr) in [("stage1_lr", self.stage1_lr), ("stage2_lr", self.stage2_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return invalid(format!("{name} must be positive"));
            }
        }
        self.model_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Effective configuration in the same `key = value` format.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let blocks: Vec<String> = self.blocks.iter().map(|b| b.to_string()).collect();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "coarse_size = {}", self.coarse_size);
        let _ = writeln!(s, "fine_resize = {}", self.fine_resize);
        let _ = writeln!(s, "crop_size = {}", self.crop_size);
        let _ = writeln!(s, "hidden_units = {}", self.hidden_units);
        let _ = writeln!(s, "blocks = {}", blocks.join(","));
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "stage1_updates = {}", self.stage1_updates);
        let _ = writeln!(s, "stage1_lr = {:?}", self.stage1_lr);
        let _ = writeln!(s, "stage2_updates = {}", self.stage2_updates);
        let _ = writeln!(s, "stage2_lr = {:?}", self.stage2_lr);
        let _ = writeln!(s, "unfreeze_blocks = {}", self.unfreeze_blocks);
        let _ = writeln!(s, "single_scale = {}", self.single_scale);
        let _ = writeln!(s, "augment = {}", self.augment);
        let _ = writeln!(s, "tta = {}", self.tta);
        s
    }

    pub fn mode(&self) -> Mode {
        if self.single_scale {
            Mode::SingleScale
        } else {
            Mode::MultiScale
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                widths: self.blocks.clone(),
                side: self.coarse_size,
            },
            hidden: self.hidden_units,
            mode: self.mode(),
        }
    }

    pub fn input_spec(&self) -> InputSpec {
        match self.mode() {
            Mode::SingleScale => InputSpec::single(self.coarse_size),
            Mode::MultiScale => InputSpec {
                mode: Mode::MultiScale,
                sizes: ScaleSizes {
                    coarse: self.coarse_size,
                    fine_resize: self.fine_resize,
                    crop: self.crop_size,
                },
            },
        }
    }

    pub fn schedule(&self) -> [StageConfig; 2] {
        [
            StageConfig {
                stage: FreezeStage::Stage1,
                learning_rate: self.stage1_lr,
                updates: self.stage1_updates,
                batch_size: self.batch_size,
                augment: self.augment,
            },
            StageConfig {
                stage: FreezeStage::Stage2 {
                    unfreeze_blocks: self.unfreeze_blocks,
                },
                learning_rate: self.stage2_lr,
                updates: self.stage2_updates,
                batch_size: self.batch_size,
                augment: self.augment,
            },
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_default() {
        assert_eq!(RunConfig::parse("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn parses_values_and_comments() {
        let cfg =
            RunConfig::parse("seed = 9  # trailing\nblocks = 4, 8, 16\nsingle_scale = true\ncoarse_size=32\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.blocks, vec![4, 8, 16]);
        assert_eq!(cfg.mode(), Mode::SingleScale);
        assert_eq!(cfg.input_spec(), InputSpec::single(32));
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert_eq!(
            RunConfig::parse("seed = 1\nbogus = 2\n"),
            Err(ConfigError::Parse {
                line: 2,
                message: "unknown key \"bogus\"".into()
            })
        );
        assert!(matches!(
            RunConfig::parse("\n\nseed: 3"),
            Err(ConfigError::Parse { line: 3, .. })
        ));
        assert!(matches!(
            RunConfig::parse("crop_size = 256\n"),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            RunConfig::parse("unfreeze_blocks = 4\n"),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn saved_weights_determine_the_input_spec() {
        assert!(matches!(
            RunConfig::parse("fine_resize = 96\n"),
            Err(ConfigError::Invalid(_))
        ));
        for text in [
            "",
            "single_scale = true\ncoarse_size = 128\n",
            "coarse_size = 224\ncrop_size = 224\nfine_resize = 448\n",
        ] {
            let cfg = RunConfig::parse(text).unwrap();
            assert_eq!(InputSpec::for_model(&cfg.model_config()), cfg.input_spec());
        }
    }

    #[test]
    fn dump_round_trips() {
        let cfg = RunConfig {
            seed: 77,
            stage2_lr: 3e-4,
            augment: false,
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::parse(&cfg.dump()).unwrap(), cfg);
    }
}
