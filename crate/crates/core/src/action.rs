//! Controllable scene parameters and the bounded corrective actions over them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    KeyLight,
    EnvRotation,
    EnvStrength,
    ContactShadow,
    ZOffset,
    Yaw,
    Scale,
    MaterialValue,
    MaterialSaturation,
    MaterialHue,
    MaterialRoughness,
    Camera,
}

impl Param {
    pub const ALL: [Param; 12] = [
        Param::KeyLight,
        Param::EnvRotation,
        Param::EnvStrength,
        Param::ContactShadow,
        Param::ZOffset,
        Param::Yaw,
        Param::Scale,
        Param::MaterialValue,
        Param::MaterialSaturation,
        Param::MaterialHue,
        Param::MaterialRoughness,
        Param::Camera,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Param::KeyLight => "key_light",
            Param::EnvRotation => "env_rotation",
            Param::EnvStrength => "env_strength",
            Param::ContactShadow => "contact_shadow",
            Param::ZOffset => "z_offset",
            Param::Yaw => "yaw",
            Param::Scale => "scale",
            Param::MaterialValue => "material_value",
            Param::MaterialSaturation => "material_saturation",
            Param::MaterialHue => "material_hue",
            Param::MaterialRoughness => "material_roughness",
            Param::Camera => "camera",
        }
    }
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Param {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Param::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown parameter `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaterialChannel {
    Value,
    Saturation,
    Hue,
    Roughness,
}

impl MaterialChannel {
    pub fn param(self) -> Param {
        match self {
            MaterialChannel::Value => Param::MaterialValue,
            MaterialChannel::Saturation => Param::MaterialSaturation,
            MaterialChannel::Hue => Param::MaterialHue,
            MaterialChannel::Roughness => Param::MaterialRoughness,
        }
    }
}

/// One bounded move on one parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action")]
pub enum CorrectiveAction {
    IncKeyLight { delta: f64 },
    RotateEnv { delta_deg: f64 },
    IncEnvStrength { delta: f64 },
    IncContactShadow { delta: f64 },
    LiftObject { dz: f64 },
    LowerObject { dz: f64 },
    YawCorrect { delta_deg: f64 },
    Rescale { factor: f64 },
    MaterialAdjust { channel: MaterialChannel, delta: f64 },
    AdjustCamera { delta_deg: f64 },
    Noop,
}

/// Action names as they appear in reviewer suggestions and the fallback map.
pub const ACTION_VOCABULARY: [&str; 14] = [
    "inc_key_light",
    "rotate_env",
    "inc_env_strength",
    "inc_contact_shadow",
    "lift_object",
    "lower_object",
    "yaw_correct",
    "rescale",
    "material_value",
    "material_saturation",
    "material_hue",
    "material_roughness",
    "adjust_camera",
    "noop",
];

impl CorrectiveAction {
    pub fn name(&self) -> &'static str {
        match self {
            CorrectiveAction::IncKeyLight { .. } => "inc_key_light",
            CorrectiveAction::RotateEnv { .. } => "rotate_env",
            CorrectiveAction::IncEnvStrength { .. } => "inc_env_strength",
            CorrectiveAction::IncContactShadow { .. } => "inc_contact_shadow",
            CorrectiveAction::LiftObject { .. } => "lift_object",
            CorrectiveAction::LowerObject { .. } => "lower_object",
            CorrectiveAction::YawCorrect { .. } => "yaw_correct",
            CorrectiveAction::Rescale { .. } => "rescale",
            CorrectiveAction::MaterialAdjust { channel, .. } => match channel {
                MaterialChannel::Value => "material_value",
                MaterialChannel::Saturation => "material_saturation",
                MaterialChannel::Hue => "material_hue",
                MaterialChannel::Roughness => "material_roughness",
            },
            CorrectiveAction::AdjustCamera { .. } => "adjust_camera",
            CorrectiveAction::Noop => "noop",
        }
    }

    pub fn is_noop(&self) -> bool {
        matches!(self, CorrectiveAction::Noop)
    }

    pub fn param(&self) -> Option<Param> {
        Some(match self {
            CorrectiveAction::IncKeyLight { .. } => Param::KeyLight,
            CorrectiveAction::RotateEnv { .. } => Param::EnvRotation,
            CorrectiveAction::IncEnvStrength { .. } => Param::EnvStrength,
            CorrectiveAction::IncContactShadow { .. } => Param::ContactShadow,
            CorrectiveAction::LiftObject { .. } | CorrectiveAction::LowerObject { .. } => {
                Param::ZOffset
            }
            CorrectiveAction::YawCorrect { .. } => Param::Yaw,
            CorrectiveAction::Rescale { .. } => Param::Scale,
            CorrectiveAction::MaterialAdjust { channel, .. } => channel.param(),
            CorrectiveAction::AdjustCamera { .. } => Param::Camera,
            CorrectiveAction::Noop => return None,
        })
    }

    /// Signed additive change the action makes to its parameter.
    /// Rescale reports `factor - 1` so the sign reads as grow/shrink.
    pub fn signed_delta(&self) -> f64 {
        match *self {
            CorrectiveAction::IncKeyLight { delta }
            | CorrectiveAction::IncEnvStrength { delta }
            | CorrectiveAction::IncContactShadow { delta }
            | CorrectiveAction::MaterialAdjust { delta, .. } => delta,
            CorrectiveAction::RotateEnv { delta_deg }
            | CorrectiveAction::YawCorrect { delta_deg }
            | CorrectiveAction::AdjustCamera { delta_deg } => delta_deg,
            CorrectiveAction::LiftObject { dz } => dz,
            CorrectiveAction::LowerObject { dz } => -dz,
            CorrectiveAction::Rescale { factor } => factor - 1.0,
            CorrectiveAction::Noop => 0.0,
        }
    }

    /// Size of the move in the units of the step table.
    pub fn magnitude(&self) -> f64 {
        match *self {
            CorrectiveAction::Rescale { factor } => {
                if factor >= 1.0 {
                    factor - 1.0
                } else {
                    1.0 / factor - 1.0
                }
            }
            _ => self.signed_delta().abs(),
        }
    }
}

/// Per-parameter value bounds and per-action maximum step sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionLimits {
    /// Inclusive `[min, max]` value range. Parameters without an entry
    /// (yaw, which wraps) are unbounded.
    pub bounds: BTreeMap<Param, [f64; 2]>,
    /// Largest magnitude a single action may move each parameter. Scale
    /// steps are fractional: 0.1 allows factors in `[1/1.1, 1.1]`.
    pub steps: BTreeMap<Param, f64>,
}

impl Default for ActionLimits {
    fn default() -> Self {
        let bounds = [
            (Param::KeyLight, [0.0, 3.0]),
            (Param::EnvRotation, [-180.0, 180.0]),
            (Param::EnvStrength, [0.0, 3.0]),
            (Param::ContactShadow, [0.0, 1.0]),
            (Param::ZOffset, [-0.2, 0.2]),
            (Param::Scale, [0.5, 2.0]),
            (Param::MaterialValue, [0.0, 1.0]),
            (Param::MaterialSaturation, [0.0, 1.0]),
            (Param::MaterialHue, [0.0, 1.0]),
            (Param::MaterialRoughness, [0.0, 1.0]),
            (Param::Camera, [-30.0, 30.0]),
        ]
        .into_iter()
        .collect();
        let steps = [
            (Param::KeyLight, 0.1),
            (Param::EnvRotation, 15.0),
            (Param::EnvStrength, 0.1),
            (Param::ContactShadow, 0.1),
            (Param::ZOffset, 0.02),
            (Param::Yaw, 5.0),
            (Param::Scale, 0.1),
            (Param::MaterialValue, 0.05),
            (Param::MaterialSaturation, 0.05),
            (Param::MaterialHue, 0.05),
            (Param::MaterialRoughness, 0.05),
            (Param::Camera, 5.0),
        ]
        .into_iter()
        .collect();
        ActionLimits { bounds, steps }
    }
}

impl ActionLimits {
    pub fn step(&self, param: Param) -> f64 {
        self.steps.get(&param).copied().unwrap_or(0.0)
    }

    pub fn bound(&self, param: Param) -> Option<[f64; 2]> {
        self.bounds.get(&param).copied()
    }
}
