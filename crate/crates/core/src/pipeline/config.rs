use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::BackendInfo;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::scheduler::{Form, SchedulerParams, Strategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditType {
    Color,
    Texture,
    ObjectReplacement,
    Background,
    Style,
    Face,
}

impl EditType {
    pub const ALL: [EditType; 6] = [
        EditType::Color,
        EditType::Texture,
        EditType::ObjectReplacement,
        EditType::Background,
        EditType::Style,
        EditType::Face,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EditType::Color => "color",
            EditType::Texture => "texture",
            EditType::ObjectReplacement => "object_replacement",
            EditType::Background => "background",
            EditType::Style => "style",
            EditType::Face => "face",
        }
    }

    /// Global edits use an all-ones mask and skip blending.
    pub fn is_global(self) -> bool {
        self == EditType::Style
    }
}

impl fmt::Display for EditType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EditType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EditType::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown edit type {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SapMode {
    #[default]
    Global,
    Region,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaSource {
    #[default]
    SourceBranch,
    InversionTrajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    #[default]
    LatentOptimization,
    NoiseGuidance,
}

macro_rules! snake_from_str {
    ($ty:ty, $($name:literal => $v:expr),+) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($v),)+
                    _ => Err(Error::Validation(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"),
                        s
                    ))),
                }
            }
        }
    };
}

snake_from_str!(SapMode, "global" => SapMode::Global, "region" => SapMode::Region);
snake_from_str!(
    SaSource,
    "source_branch" => SaSource::SourceBranch,
    "inversion_trajectory" => SaSource::InversionTrajectory
);
snake_from_str!(
    GuidanceMode,
    "latent_optimization" => GuidanceMode::LatentOptimization,
    "noise_guidance" => GuidanceMode::NoiseGuidance
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditConfig {
    pub scheduler: SchedulerParams,
    pub tau1: usize,
    pub tau2: usize,
    pub max_it: usize,
    pub cfg_scale: f64,
    /// SA resolutions used by the preservation constraint; absent means all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sa_resolutions: Option<BTreeSet<usize>>,
    #[serde(default)]
    pub sap_mode: SapMode,
    #[serde(default)]
    pub sa_source: SaSource,
    #[serde(default)]
    pub guidance_mode: GuidanceMode,
    pub strategy: Strategy,
}

impl EditConfig {
    pub fn steps(&self) -> usize {
        self.scheduler.steps
    }

    pub fn validate(&self) -> Result<()> {
        self.scheduler.validate()?;
        let t = self.scheduler.steps;
        for (name, tau) in [("tau1", self.tau1), ("tau2", self.tau2)] {
            if tau < 1 || tau > t {
                return Err(Error::Validation(format!("{name} = {tau} outside [1, {t}]")));
            }
        }
        if self.max_it < 1 {
            return Err(Error::Validation("max_it must be at least 1".into()));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::Validation(format!("cfg_scale = {}", self.cfg_scale)));
        }
        if let Some(r) = &self.sa_resolutions {
            if r.is_empty() {
                return Err(Error::Validation("sa_resolutions is empty".into()));
            }
        }
        Ok(())
    }

    pub fn validate_for(&self, info: &BackendInfo) -> Result<()> {
        self.validate()?;
        if self.scheduler.steps > info.timesteps {
            return Err(Error::Validation(format!(
                "T = {} exceeds the backend's {} timesteps",
                self.scheduler.steps, info.timesteps
            )));
        }
        if let Some(r) = &self.sa_resolutions {
            if let Some(bad) = r.iter().find(|v| !info.sa_resolutions.contains(v)) {
                return Err(Error::Validation(format!(
                    "SA resolution {bad} not captured by the backend (has {:?})",
                    info.sa_resolutions
                )));
            }
        }
        Ok(())
    }

    /// Whether the preservation constraint is evaluated at step `t`.
    pub fn sap_active(&self, t: usize) -> bool {
        self.strategy.uses_sap() && t >= self.tau2
    }

    /// Whether the alignment constraint is evaluated at step `t`.
    pub fn caa_active(&self, t: usize) -> bool {
        self.strategy.uses_caa() && t >= self.tau1
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: EditConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_CFG: f64 = 7.5;
pub const DEFAULT_BETA: f64 = 5.0;
pub const DEFAULT_TAU: usize = 25;
pub const COLOR_TAU1: usize = 5;

pub fn rate_for(edit_type: EditType) -> f64 {
    match edit_type {
        EditType::Color => 0.05,
        EditType::Texture | EditType::Background => 0.08,
        EditType::ObjectReplacement => 0.15,
        EditType::Style => 0.1,
        EditType::Face => 0.25,
    }
}

pub fn preset_for_edit_type(edit_type: EditType) -> EditConfig {
    let k = rate_for(edit_type);
    EditConfig {
        scheduler: SchedulerParams {
            beta1: DEFAULT_BETA,
            beta2: DEFAULT_BETA,
            k1: k,
            k2: k,
            steps: DEFAULT_STEPS,
            form: Form::Eq14,
        },
        tau1: if edit_type == EditType::Color { COLOR_TAU1 } else { DEFAULT_TAU },
        tau2: DEFAULT_TAU,
        max_it: 1,
        cfg_scale: DEFAULT_CFG,
        sa_resolutions: (edit_type == EditType::ObjectReplacement).then(|| BTreeSet::from([16, 8])),
        sap_mode: SapMode::Global,
        sa_source: SaSource::SourceBranch,
        guidance_mode: GuidanceMode::LatentOptimization,
        strategy: Strategy::Blc,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditSpec {
    pub source_prompt: String,
    pub target_prompt: String,
    pub target_tokens: Vec<String>,
    pub mask: Option<BinaryMask>,
    pub edit_type: EditType,
}

fn words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

impl EditSpec {
    pub fn validate(&self) -> Result<()> {
        let target = words(&self.target_prompt);
        for tok in &self.target_tokens {
            let w = words(tok);
            let found = !w.is_empty() && target.windows(w.len()).any(|win| win == w.as_slice());
            if !found {
                return Err(Error::Spec(format!(
                    "target token {tok:?} does not occur in {:?}",
                    self.target_prompt
                )));
            }
        }
        if self.mask.is_none() && !self.edit_type.is_global() {
            return Err(Error::Spec(format!(
                "{} edits need a mask",
                self.edit_type
            )));
        }
        Ok(())
    }

    /// Mask used for the update, region constraints and blending.
    pub fn effective_mask(&self, size: usize) -> Result<BinaryMask> {
        if self.edit_type.is_global() {
            return Ok(BinaryMask::ones(size, size));
        }
        match &self.mask {
            Some(m) => m.resample(size, size),
            None => Err(Error::Spec(format!("{} edits need a mask", self.edit_type))),
        }
    }

    /// Whether source latents are blended back outside the mask.
    pub fn blends(&self) -> bool {
        !self.edit_type.is_global()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::lambda_weights;

    #[test]
    fn preset_examples() {
        let c = preset_for_edit_type(EditType::Color);
        assert_eq!((c.scheduler.k1, c.scheduler.k2, c.tau1, c.tau2), (0.05, 0.05, 5, 25));
        let o = preset_for_edit_type(EditType::ObjectReplacement);
        assert_eq!(o.scheduler.k1, 0.15);
        assert_eq!(o.sa_resolutions, Some(BTreeSet::from([16, 8])));
        let f = preset_for_edit_type(EditType::Face);
        assert_eq!((f.scheduler.k1, f.max_it), (0.25, 1));
    }

    #[test]
    fn config_toml_round_trip() {
        for e in EditType::ALL {
            let c = preset_for_edit_type(e);
            assert_eq!(EditConfig::from_toml(&c.to_toml()).unwrap(), c);
        }
    }

    #[test]
    fn config_rejects_bad_windows() {
        let mut c = preset_for_edit_type(EditType::Texture);
        c.tau1 = 0;
        assert!(c.validate().is_err());
        c.tau1 = 51;
        assert!(c.validate().is_err());
        c.tau1 = 25;
        c.max_it = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_edit_type() {
        assert!(matches!("pose".parse::<EditType>(), Err(Error::Validation(_))));
        assert_eq!("object_replacement".parse::<EditType>().unwrap(), EditType::ObjectReplacement);
    }

    #[test]
    fn spec_validation() {
        let mut s = EditSpec {
            source_prompt: "a cat".into(),
            target_prompt: "a tiger".into(),
            target_tokens: vec!["tiger".into()],
            mask: None,
            edit_type: EditType::Style,
        };
        s.validate().unwrap();
        s.edit_type = EditType::Color;
        assert!(matches!(s.validate(), Err(Error::Spec(_))));
        s.edit_type = EditType::Style;
        s.target_tokens = vec!["lion".into()];
        assert!(matches!(s.validate(), Err(Error::Spec(_))));
    }

    #[test]
    fn preset_lambda_endpoints() {
        let p = preset_for_edit_type(EditType::Color).scheduler;
        assert_eq!(lambda_weights(50, &p).unwrap(), (0.0, 5.0));
    }
}
