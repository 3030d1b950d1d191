use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solvers::SearchSettings;

/// Channel-selection criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Loss-gradient weighting and feature-importance gating.
    Cpli,
    /// Feature-importance gating only (gradient factor set to 1).
    CpliNoFl,
    /// Loss-gradient weighting only (gate set to 1).
    CpliNoFi,
    /// Plain reconstruction of the uncompressed response.
    CpBaseline,
    /// Largest summed l1 norm of the filters reading each channel.
    Magnitude,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Cpli,
        Variant::CpliNoFl,
        Variant::CpliNoFi,
        Variant::CpBaseline,
        Variant::Magnitude,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Cpli => "cpli",
            Variant::CpliNoFl => "cpli_no_fl",
            Variant::CpliNoFi => "cpli_no_fi",
            Variant::CpBaseline => "cp_baseline",
            Variant::Magnitude => "magnitude",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

/// How many input channels each prunable conv layer keeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// Keep every channel.
    Full,
    /// Target FLOPs compression ratio, met with one keep fraction shared by
    /// all prunable layers.
    FlopsRatio(f64),
    /// Explicit keep counts for conv layers 2..=L, in order.
    PerLayer(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    pub budget: Budget,
    pub variant: Variant,
    /// Gain on the feature-importance gate.
    pub gamma: f64,
    /// Sampled output locations per image and layer.
    pub num_locations: usize,
    pub probe_images: usize,
    pub search: SearchSettings,
    /// Ridge term of the weight refit.
    pub damping: f64,
    /// Refit the kept weights by least squares; when false the surviving
    /// weights are kept as they are.
    pub refit: bool,
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            budget: Budget::Full,
            variant: Variant::Cpli,
            gamma: 1.0,
            num_locations: 10,
            probe_images: 256,
            search: SearchSettings::default(),
            damping: 0.0,
            refit: true,
            seed: 0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_locations == 0 {
            return Err(Error::invalid("num_locations must be positive"));
        }
        if self.probe_images == 0 {
            return Err(Error::invalid("probe_images must be positive"));
        }
        if !self.gamma.is_finite() {
            return Err(Error::invalid("gamma must be finite"));
        }
        if let Budget::FlopsRatio(r) = self.budget {
            if !(r >= 1.0) || !r.is_finite() {
                return Err(Error::invalid(format!("FLOPs ratio must be at least 1, got {r}")));
            }
        }
        Ok(())
    }
}
