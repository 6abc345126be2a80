//! Declarative staged-network descriptions, loaded from JSON.
//!
//! ```json
//! {
//!   "name": "i3d_r50",
//!   "input_channels": 3,
//!   "data_temporal_stride": 8,
//!   "classes": 400,
//!   "reference_input": { "frames": 4, "resolution": 224 },
//!   "stem": { "kernel": [1, 7, 7], "channels": 64, "stride": [1, 2, 2] },
//!   "pool": { "kernel": [1, 3, 3], "stride": [1, 2, 2] },
//!   "stages": [
//!     { "name": "res2", "block": "bottleneck", "repeat": 3, "width": 64,
//!       "channels": 256, "temporal_kernel": 1, "stride": [1, 1] }
//!   ]
//! }
//! ```
//!
//! Kernels and strides are `[t, h, w]` for the stem and pool and
//! `[temporal, spatial]` for stages. A `bottleneck` block is
//! `[kt×1², width] → [1×3², width] with the stride → [1×1², channels]`; a
//! `basic` block is `[kt×3², width] with the stride → [kt×3², width]`. The
//! first block of a stage gets a 1×1² projection shortcut when channels or
//! resolution change. `classes: 0` drops the classifier. `output_size` entries (`[T, H, W]` at
//! `reference_input`) are optional checks. `pool` and `description` are
//! optional.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const BUILTIN_ARCHS: [(&str, &str); 2] = [
    ("i3d_r18", include_str!("../../data/i3d_r18.json")),
    ("i3d_r50", include_str!("../../data/i3d_r50.json")),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSize {
    pub frames: usize,
    pub resolution: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub kernel: [usize; 3],
    pub channels: usize,
    pub stride: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_size: Option<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_size: Option<[usize; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockType {
    Basic,
    Bottleneck,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: String,
    pub block: BlockType,
    pub repeat: usize,
    pub width: usize,
    pub channels: usize,
    pub temporal_kernel: usize,
    /// `[temporal, spatial]`
    pub stride: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_size: Option<[usize; 3]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub input_channels: usize,
    /// Raw-clip frames per sampled frame; informational.
    pub data_temporal_stride: usize,
    /// Classifier outputs; 0 means no classifier.
    pub classes: usize,
    pub reference_input: InputSize,
    pub stem: StemSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<PoolSpec>,
    pub stages: Vec<StageSpec>,
}

impl ArchSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let arch: Self = serde_json::from_str(text)?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| invalid("arch", format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => invalid("arch", format!("{}:{}:{}: {j}", path.display(), j.line(), j.column())),
            other => other,
        })
    }

    pub fn builtin(name: &str) -> Option<Self> {
        BUILTIN_ARCHS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::from_json(text).expect("built-in architecture is valid"))
    }

    /// A built-in name, or else a path to a JSON file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match Self::builtin(name_or_path) {
            Some(a) => Ok(a),
            None => Self::from_file(name_or_path),
        }
    }

    pub fn with_classes(mut self, classes: usize) -> Self {
        self.classes = classes;
        self
    }

    pub fn stage(&self, name: &str) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |what: &str, v: usize| {
            if v == 0 {
                Err(invalid("arch", format!("{}: {what} must be positive", self.name)))
            } else {
                Ok(())
            }
        };
        positive("input_channels", self.input_channels)?;
        positive("stem channels", self.stem.channels)?;
        for s in &self.stages {
            positive("repeat", s.repeat)?;
            positive("width", s.width)?;
            positive("channels", s.channels)?;
            positive("temporal_kernel", s.temporal_kernel)?;
            if s.block == BlockType::Basic && s.width != s.channels {
                return Err(invalid(
                    "arch",
                    format!("stage {}: basic blocks need width == channels", s.name),
                ));
            }
        }
        let mut names: Vec<&str> = self.stages.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("arch", "duplicate stage names"));
        }
        Ok(())
    }
}
