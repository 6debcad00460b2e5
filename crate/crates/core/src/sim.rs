//! Deterministic toy scene: a textured ellipsoid on a floor under a sky,
//! painted onto a 64×64 raster with mask, depth, normals, and poses.
//!
//! Exposure level is `key_light + env_strength - 1` (1.0 is nominal) and
//! scales every painted color. The sky's upper rows are a flat color so the
//! exposure channel can be read back from them; the horizon is a straight
//! edge so blur width can be read back from its vertical profile.
//!
//! Oracle quality curves are `max(0, 1 - |error| / tolerance)` per component
//! with the tolerances in [`Tolerances`]; `overall` is their minimum.

use std::collections::BTreeSet;
use std::io::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{ActionLimits, CorrectiveAction, MaterialChannel, Param};
use crate::dsl::normalize_yaw;

pub const RASTER_SIZE: u32 = 64;
/// Pixel row of the support-plane contact line.
pub const SUPPORT_ROW: f64 = 50.0;
pub const HORIZON_ROW: u32 = 40;
pub const PIXELS_PER_METER: f64 = 100.0;
/// Rows of flat sky used for exposure read-back.
pub const SKY_PROBE_ROWS: u32 = 6;
pub const SKY_RGB: [f64; 3] = [130.0, 150.0, 180.0];
pub const FLOOR_RGB: [f64; 3] = [100.0, 90.0, 80.0];
const OBJECT_RX: f64 = 12.0;
const OBJECT_RY: f64 = 10.0;
const OBJECT_DEPTH_M: f64 = 3.0;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("render failure: object covers no pixel (scale {0})")]
    EmptyMask(f64),
    #[error("invalid scene state: {0}")]
    InvalidState(String),
    #[error("contradictory defects: grounding gap and penetration both positive")]
    ContradictoryDefects,
    #[error("invalid defect spec: {0}")]
    InvalidDefects(String),
    #[error("action targets locked parameter {0}")]
    LockedParameter(Param),
    #[error("action on {param} would leave bounds: {value} not in [{min}, {max}]")]
    OutOfBounds {
        param: Param,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("action on {param} moves {magnitude}, above the step limit {limit}")]
    StepTooLarge {
        param: Param,
        magnitude: f64,
        limit: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub value: f64,
    pub saturation: f64,
    pub hue: f64,
    pub roughness: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: [f64; 3],
    pub pitch_deg: f64,
    /// Orbit around the object; shifts the projected object horizontally.
    pub orbit_deg: f64,
    pub fov_deg: f64,
}

impl Default for CameraPose {
    fn default() -> Self {
        CameraPose {
            position: [0.0, 0.6, OBJECT_DEPTH_M],
            pitch_deg: -8.0,
            orbit_deg: 0.0,
            fov_deg: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub object_id: String,
    /// Current object yaw in `[0, 360)`.
    pub object_yaw_deg: f64,
    /// Yaw the sample is supposed to show.
    pub target_yaw_deg: f64,
    /// Positive floats above the support plane, negative penetrates it.
    pub z_offset: f64,
    pub scale: f64,
    pub key_light: f64,
    pub env_rotation_deg: f64,
    pub env_strength: f64,
    pub contact_shadow: f64,
    pub material: Material,
    pub blur: f64,
    pub camera: CameraPose,
    /// False when the underlying asset is broken beyond parameter fixes.
    #[serde(default = "yes")]
    pub asset_viable: bool,
}

fn yes() -> bool {
    true
}

impl SceneState {
    /// Defect-free state showing `object_id` at `target_yaw_deg`.
    pub fn clean(object_id: impl Into<String>, target_yaw_deg: f64) -> Self {
        let object_id = object_id.into();
        let hue = stable_unit(&object_id);
        let yaw = normalize_yaw(target_yaw_deg);
        SceneState {
            object_id,
            object_yaw_deg: yaw,
            target_yaw_deg: yaw,
            z_offset: 0.0,
            scale: 1.0,
            key_light: 1.0,
            env_rotation_deg: 0.0,
            env_strength: 1.0,
            contact_shadow: 0.5,
            material: Material {
                value: 0.8,
                saturation: 0.6,
                hue,
                roughness: 0.5,
            },
            blur: 0.0,
            camera: CameraPose::default(),
            asset_viable: true,
        }
    }

    pub fn exposure_level(&self) -> f64 {
        (self.key_light + self.env_strength - 1.0).max(0.0)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidState(m.to_string()));
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return bad("scale must be positive");
        }
        if !(0.0..360.0).contains(&self.object_yaw_deg) {
            return bad("object yaw must lie in [0, 360)");
        }
        if self.key_light < 0.0 || self.env_strength < 0.0 {
            return bad("light strengths must be non-negative");
        }
        let unit = [
            self.contact_shadow,
            self.blur,
            self.material.value,
            self.material.saturation,
            self.material.hue,
            self.material.roughness,
        ];
        if unit.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("unit-range channel outside [0, 1]");
        }
        if !self.z_offset.is_finite() {
            return bad("z offset must be finite");
        }
        Ok(())
    }

    pub fn param_value(&self, p: Param) -> f64 {
        match p {
            Param::KeyLight => self.key_light,
            Param::EnvRotation => self.env_rotation_deg,
            Param::EnvStrength => self.env_strength,
            Param::ContactShadow => self.contact_shadow,
            Param::ZOffset => self.z_offset,
            Param::Yaw => self.object_yaw_deg,
            Param::Scale => self.scale,
            Param::MaterialValue => self.material.value,
            Param::MaterialSaturation => self.material.saturation,
            Param::MaterialHue => self.material.hue,
            Param::MaterialRoughness => self.material.roughness,
            Param::Camera => self.camera.orbit_deg,
        }
    }

    fn set_param(&mut self, p: Param, v: f64) {
        match p {
            Param::KeyLight => self.key_light = v,
            Param::EnvRotation => self.env_rotation_deg = v,
            Param::EnvStrength => self.env_strength = v,
            Param::ContactShadow => self.contact_shadow = v,
            Param::ZOffset => self.z_offset = v,
            Param::Yaw => self.object_yaw_deg = normalize_yaw(v),
            Param::Scale => self.scale = v,
            Param::MaterialValue => self.material.value = v,
            Param::MaterialSaturation => self.material.saturation = v,
            Param::MaterialHue => self.material.hue = v,
            Param::MaterialRoughness => self.material.roughness = v,
            Param::Camera => self.camera.orbit_deg = v,
        }
    }

    /// Signed yaw error in `(-180, 180]`.
    pub fn yaw_error(&self) -> f64 {
        signed_angle(self.object_yaw_deg - self.target_yaw_deg)
    }
}

pub fn signed_angle(deg: f64) -> f64 {
    let d = deg.rem_euclid(360.0);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

/// Deterministic value in `[0, 1)` from a string (FNV-1a).
pub fn stable_unit(s: &str) -> f64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

// ---------------------------------------------------------------------------
// Defects and the quality oracle

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub grounding_gap: f64,
    pub penetration: f64,
    /// Multiplicative; 1.0 means no scale defect.
    pub scale_error: f64,
    pub yaw_error: f64,
    pub exposure_error: f64,
    pub blur: f64,
}

impl Default for DefectSpec {
    fn default() -> Self {
        DefectSpec {
            grounding_gap: 0.0,
            penetration: 0.0,
            scale_error: 1.0,
            yaw_error: 0.0,
            exposure_error: 0.0,
            blur: 0.0,
        }
    }
}

impl DefectSpec {
    pub fn is_clean(&self) -> bool {
        *self == DefectSpec::default()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.grounding_gap > 0.0 && self.penetration > 0.0 {
            return Err(SimError::ContradictoryDefects);
        }
        if self.grounding_gap < 0.0 || self.penetration < 0.0 {
            return Err(SimError::InvalidDefects(
                "gap and penetration are non-negative".into(),
            ));
        }
        if !(self.scale_error > 0.0) {
            return Err(SimError::InvalidDefects("scale error must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.blur) {
            return Err(SimError::InvalidDefects("blur must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub grounding_m: f64,
    pub yaw_deg: f64,
    pub exposure: f64,
    pub blur: f64,
    pub scale: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            grounding_m: 0.05,
            yaw_deg: 10.0,
            exposure: 0.3,
            blur: 0.5,
            scale: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityVector {
    pub exposure_score: f64,
    pub sharpness: f64,
    pub grounding_score: f64,
    pub scale_score: f64,
    pub yaw_score: f64,
    pub overall: f64,
}

pub fn linear_score(error: f64, tolerance: f64) -> f64 {
    (1.0 - error.abs() / tolerance).max(0.0)
}

/// Apply `defects` on top of `state`. The seed only drives the cosmetic
/// environment-rotation jitter.
pub fn inject_defects(
    state: &SceneState,
    defects: &DefectSpec,
    seed: u64,
) -> Result<SceneState, SimError> {
    defects.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = state.clone();
    out.z_offset = defects.grounding_gap - defects.penetration;
    out.scale = state.scale * defects.scale_error;
    out.object_yaw_deg = normalize_yaw(state.object_yaw_deg + defects.yaw_error);
    out.key_light = state.key_light + defects.exposure_error;
    out.blur = defects.blur;
    out.env_rotation_deg = state.env_rotation_deg + rng.random_range(-10.0..10.0);
    Ok(out)
}

pub fn true_quality(state: &SceneState) -> QualityVector {
    true_quality_with(state, &Tolerances::default())
}

pub fn true_quality_with(state: &SceneState, tol: &Tolerances) -> QualityVector {
    let exposure_score = linear_score(state.exposure_level() - 1.0, tol.exposure);
    let sharpness = linear_score(state.blur, tol.blur);
    let grounding_score = linear_score(state.z_offset, tol.grounding_m);
    let scale_score = linear_score(state.scale - 1.0, tol.scale);
    let yaw_score = linear_score(state.yaw_error(), tol.yaw_deg);
    let overall = exposure_score
        .min(sharpness)
        .min(grounding_score)
        .min(scale_score)
        .min(yaw_score);
    QualityVector {
        exposure_score,
        sharpness,
        grounding_score,
        scale_score,
        yaw_score,
        overall,
    }
}

/// Apply one corrective action. Exactly one parameter group changes.
pub fn apply_action(
    state: &SceneState,
    action: &CorrectiveAction,
    limits: &ActionLimits,
    locked: &BTreeSet<Param>,
) -> Result<SceneState, SimError> {
    let Some(param) = action.param() else {
        return Ok(state.clone());
    };
    if locked.contains(&param) {
        return Err(SimError::LockedParameter(param));
    }
    let limit = limits.step(param);
    let magnitude = action.magnitude();
    if magnitude > limit + 1e-12 {
        return Err(SimError::StepTooLarge {
            param,
            magnitude,
            limit,
        });
    }
    let current = state.param_value(param);
    let next = match action {
        CorrectiveAction::Rescale { factor } => current * factor,
        _ => current + action.signed_delta(),
    };
    if let Some([min, max]) = limits.bound(param) {
        if next < min - 1e-12 || next > max + 1e-12 {
            return Err(SimError::OutOfBounds {
                param,
                value: next,
                min,
                max,
            });
        }
    }
    let mut out = state.clone();
    out.set_param(param, next);
    Ok(out)
}

pub fn material_param(channel: MaterialChannel) -> Param {
    channel.param()
}

// ---------------------------------------------------------------------------
// Rasters

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB8.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; (width * height * 3) as usize],
        }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn mean_brightness(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl MaskImage {
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatRaster {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

impl FloatRaster {
    pub fn get(&self, x: u32, y: u32, c: u32) -> f32 {
        self.data[((y * self.width + x) * self.channels + c) as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPose {
    pub object_id: String,
    /// Object origin: x, height above the support plane, depth.
    pub position: [f64; 3],
    pub yaw_deg: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderBundle {
    pub rgb: RgbImage,
    pub mask: MaskImage,
    pub depth: FloatRaster,
    pub normal: FloatRaster,
    pub object_pose: ObjectPose,
    pub camera_pose: CameraPose,
}

impl RenderBundle {
    /// Rasters share dimensions, depth is finite and normals unit inside the mask.
    pub fn geometry_valid(&self) -> bool {
        self.mask.width == self.rgb.width
            && self.mask.height == self.rgb.height
            && geometry_consistent(&self.mask, &self.depth, &self.normal)
    }
}

/// Depth and normal rasters match the mask's size and are well-formed
/// inside it.
pub fn geometry_consistent(mask: &MaskImage, depth: &FloatRaster, normal: &FloatRaster) -> bool {
    let (w, h) = (mask.width, mask.height);
    if depth.width != w
        || depth.height != h
        || depth.channels != 1
        || normal.width != w
        || normal.height != h
        || normal.channels != 3
    {
        return false;
    }
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let d = depth.get(x, y, 0);
            if !d.is_finite() || d < 0.0 {
                return false;
            }
            let n: f32 = (0..3).map(|c| normal.get(x, y, c).powi(2)).sum();
            if (n.sqrt() - 1.0).abs() > 1e-4 {
                return false;
            }
        }
    }
    true
}

/// Mean luminance of the unblurred sky at nominal exposure.
pub fn nominal_sky_mean() -> f64 {
    SKY_RGB.iter().map(|c| c.round()).sum::<f64>() / 3.0
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn box_blur(rgb: &RgbImage, width: u32) -> RgbImage {
    if width <= 1 {
        return rgb.clone();
    }
    let r = (width / 2) as i64;
    let (w, h) = (rgb.width as i64, rgb.height as i64);
    let mut sums = vec![0.0f64; rgb.data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for dy in -r..=r {
                for dx in -r..=r {
                    let sx = (x + dx).clamp(0, w - 1);
                    let sy = (y + dy).clamp(0, h - 1);
                    let i = ((sy * w + sx) * 3) as usize;
                    for c in 0..3 {
                        acc[c] += rgb.data[i + c] as f64;
                    }
                }
            }
            let i = ((y * w + x) * 3) as usize;
            for c in 0..3 {
                sums[i + c] = acc[c] / (width * width) as f64;
            }
        }
    }
    RgbImage {
        width: rgb.width,
        height: rgb.height,
        data: sums.into_iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(),
    }
}

/// Box-filter width used for a blur level.
pub fn blur_kernel_width(blur: f64) -> u32 {
    1 + 2 * (4.0 * blur.clamp(0.0, 1.0)).round() as u32
}

/// Paint the scene. Pure: the same state always yields the same bundle.
pub fn render(state: &SceneState) -> Result<RenderBundle, SimError> {
    state.validate()?;
    let (w, h) = (RASTER_SIZE, RASTER_SIZE);
    let e = state.exposure_level();
    let rx = OBJECT_RX * state.scale;
    let ry = OBJECT_RY * state.scale;
    let cx = w as f64 / 2.0 + state.camera.orbit_deg / 5.0;
    let bottom = SUPPORT_ROW - state.z_offset * PIXELS_PER_METER;
    let cy = bottom - ry;
    let yaw = state.object_yaw_deg.to_radians();
    let env = state.env_rotation_deg.to_radians();
    let base = hsv_to_rgb(
        state.material.hue,
        state.material.saturation,
        state.material.value,
    );
    let light = {
        let l = [-0.4f64, 0.6, 0.7];
        let n = (l[0] * l[0] + l[1] * l[1] + l[2] * l[2]).sqrt();
        [l[0] / n, l[1] / n, l[2] / n]
    };
    let gap = state.z_offset.max(0.0);

    let mut rgb = RgbImage::new(w, h);
    let mut mask = vec![false; (w * h) as usize];
    let mut depth = vec![0f32; (w * h) as usize];
    let mut normal = vec![0f32; (w * h * 3) as usize];

    for y in 0..h {
        for x in 0..w {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let idx = (y * w + x) as usize;
            let nx = (px - cx) / rx;
            let ny = (py - cy) / ry;
            let r2 = nx * nx + ny * ny;
            let color: [f64; 3];
            if r2 <= 1.0 && py < SUPPORT_ROW {
                let nz = (1.0 - r2).max(0.0).sqrt();
                let n = [nx, -ny, nz];
                let diffuse = (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).max(0.0);
                // Longitude on the visible hemisphere, shifted by the object yaw.
                let phi = nx.clamp(-1.0, 1.0).asin() + yaw;
                let texture = 0.7 + 0.3 * phi.cos();
                let marker = phi.cos() > 0.92 && ny.abs() < 0.35;
                let spec = (1.0 - state.material.roughness) * diffuse.powi(12) * 60.0;
                color = if marker {
                    [235.0 * (0.4 + 0.6 * diffuse), 235.0 * (0.4 + 0.6 * diffuse), 60.0]
                } else {
                    base.map(|c| c * 255.0 * texture * (0.35 + 0.65 * diffuse) + spec)
                };
                mask[idx] = true;
                depth[idx] = (OBJECT_DEPTH_M - 0.1 * state.scale * nz) as f32;
                normal[idx * 3] = n[0] as f32;
                normal[idx * 3 + 1] = n[1] as f32;
                normal[idx * 3 + 2] = n[2] as f32;
            } else if y < HORIZON_ROW {
                color = SKY_RGB;
                depth[idx] = f32::INFINITY;
            } else {
                let stripe = 0.9 + 0.1 * (std::f64::consts::TAU * px / 16.0 + env).cos();
                let sx = (px - cx) / rx.max(1.0);
                let sy = (py - SUPPORT_ROW) / 3.0;
                let shadow = state.contact_shadow
                    * 0.6
                    * (-(sx * sx) * 2.0 - sy * sy).exp()
                    * (-gap / 0.03).exp();
                color = FLOOR_RGB.map(|c| c * stripe * (1.0 - shadow));
                depth[idx] = (OBJECT_DEPTH_M + (SUPPORT_ROW - py) * 0.1).max(0.5) as f32;
                normal[idx * 3 + 1] = 1.0;
            }
            let i = idx * 3;
            for c in 0..3 {
                rgb.data[i + c] = (color[c] * e).round().clamp(0.0, 255.0) as u8;
            }
        }
    }

    if !mask.iter().any(|&m| m) {
        return Err(SimError::EmptyMask(state.scale));
    }
    let rgb = box_blur(&rgb, blur_kernel_width(state.blur));

    Ok(RenderBundle {
        rgb,
        mask: MaskImage {
            width: w,
            height: h,
            data: mask,
        },
        depth: FloatRaster {
            width: w,
            height: h,
            channels: 1,
            data: depth,
        },
        normal: FloatRaster {
            width: w,
            height: h,
            channels: 3,
            data: normal,
        },
        object_pose: ObjectPose {
            object_id: state.object_id.clone(),
            position: [0.0, state.z_offset, 0.0],
            yaw_deg: state.object_yaw_deg,
            scale: state.scale,
        },
        camera_pose: state.camera,
    })
}

/// Mask area of a clean render at unit scale; framing reference.
pub fn nominal_mask_area() -> usize {
    static AREA: std::sync::OnceLock<usize> = std::sync::OnceLock::new();
    *AREA.get_or_init(|| {
        render(&SceneState::clean("reference", 0.0))
            .expect("clean reference render")
            .mask
            .area()
    })
}

// ---------------------------------------------------------------------------
// Serialization

pub const FLOAT_MAGIC: &[u8; 4] = b"DEVF";

pub fn encode_png_rgb(img: &RgbImage) -> Vec<u8> {
    encode_png(img.width, img.height, png::ColorType::Rgb, &img.data)
}

pub fn encode_png_mask(mask: &MaskImage) -> Vec<u8> {
    let data: Vec<u8> = mask.data.iter().map(|&m| if m { 255 } else { 0 }).collect();
    encode_png(mask.width, mask.height, png::ColorType::Grayscale, &data)
}

fn encode_png(width: u32, height: u32, color: png::ColorType, data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("in-memory png header");
        writer.write_image_data(data).expect("in-memory png data");
    }
    out
}

pub fn decode_png_rgb(bytes: &[u8]) -> Result<RgbImage, String> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or("png too large")?];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(format!("expected 8-bit RGB, got {:?}", info.color_type));
    }
    buf.truncate(info.buffer_size());
    Ok(RgbImage {
        width: info.width,
        height: info.height,
        data: buf,
    })
}

pub fn decode_png_mask(bytes: &[u8]) -> Result<MaskImage, String> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or("png too large")?];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(format!("expected 8-bit grayscale, got {:?}", info.color_type));
    }
    buf.truncate(info.buffer_size());
    Ok(MaskImage {
        width: info.width,
        height: info.height,
        data: buf.into_iter().map(|v| v >= 128).collect(),
    })
}

/// 16-byte header (`DEVF`, width, height, channels as u32 LE) then f32 LE samples.
pub fn encode_float_raster(r: &FloatRaster) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + r.data.len() * 4);
    out.write_all(FLOAT_MAGIC).unwrap();
    out.extend_from_slice(&r.width.to_le_bytes());
    out.extend_from_slice(&r.height.to_le_bytes());
    out.extend_from_slice(&r.channels.to_le_bytes());
    for v in &r.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_float_raster(bytes: &[u8]) -> Result<FloatRaster, String> {
    if bytes.len() < 16 || &bytes[0..4] != FLOAT_MAGIC {
        return Err("missing float raster header".into());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let (width, height, channels) = (word(4), word(8), word(12));
    let n = (width as usize) * (height as usize) * (channels as usize);
    if bytes.len() != 16 + n * 4 {
        return Err(format!("expected {} payload bytes, got {}", n * 4, bytes.len() - 16));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FloatRaster {
        width,
        height,
        channels,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean() -> SceneState {
        SceneState::clean("mug", 0.0)
    }

    #[test]
    fn clean_render_invariants() {
        let s = clean();
        let b = render(&s).unwrap();
        assert!(b.mask.area() > 0);
        assert!(b.geometry_valid());
        assert_eq!(b.object_pose.yaw_deg, s.object_yaw_deg);
        assert_eq!(b.rgb.width, RASTER_SIZE);
    }

    #[test]
    fn render_is_deterministic() {
        let s = clean();
        assert_eq!(render(&s).unwrap(), render(&s).unwrap());
    }

    #[test]
    fn yaw_changes_pixels() {
        let a = render(&SceneState::clean("mug", 0.0)).unwrap();
        let b = render(&SceneState::clean("mug", 180.0)).unwrap();
        let differing = a
            .rgb
            .data
            .chunks(3)
            .zip(b.rgb.data.chunks(3))
            .filter(|(p, q)| p != q)
            .count();
        let total = (RASTER_SIZE * RASTER_SIZE) as usize;
        assert!(differing * 100 >= total, "{differing} of {total}");
    }

    #[test]
    fn brightness_monotone_in_lights() {
        let mut prev = 0.0;
        for k in 0..10 {
            let mut s = clean();
            s.key_light = 0.5 + 0.1 * k as f64;
            let m = render(&s).unwrap().rgb.mean_brightness();
            assert!(m >= prev);
            prev = m;
        }
        let mut prev = 0.0;
        for k in 0..10 {
            let mut s = clean();
            s.env_strength = 0.5 + 0.1 * k as f64;
            let m = render(&s).unwrap().rgb.mean_brightness();
            assert!(m >= prev);
            prev = m;
        }
    }

    #[test]
    fn clean_brightness_near_mid_gray() {
        let m = render(&clean()).unwrap().rgb.mean_brightness();
        assert!((m - 128.0).abs() < 16.0, "{m}");
    }

    #[test]
    fn tiny_scale_is_render_failure() {
        let mut s = clean();
        s.scale = 0.01;
        assert!(matches!(render(&s), Err(SimError::EmptyMask(_))));
    }

    #[test]
    fn defect_injection_is_exact() {
        let s = clean();
        let gap = DefectSpec {
            grounding_gap: 0.05,
            ..Default::default()
        };
        assert_eq!(inject_defects(&s, &gap, 1).unwrap().z_offset, 0.05);
        let pen = DefectSpec {
            penetration: 0.02,
            ..Default::default()
        };
        assert_eq!(inject_defects(&s, &pen, 1).unwrap().z_offset, -0.02);
        assert_eq!(
            inject_defects(&s, &gap, 9).unwrap(),
            inject_defects(&s, &gap, 9).unwrap()
        );
        let both = DefectSpec {
            grounding_gap: 0.01,
            penetration: 0.01,
            ..Default::default()
        };
        assert_eq!(
            inject_defects(&s, &both, 1),
            Err(SimError::ContradictoryDefects)
        );
    }

    #[test]
    fn oracle_curves() {
        let q = true_quality(&clean());
        assert_eq!(q.overall, 1.0);
        assert_eq!(q.grounding_score, 1.0);
        let mut s = clean();
        s.z_offset = 0.05;
        assert!(true_quality(&s).grounding_score < 1.0);
        s.z_offset = 0.025;
        assert!((true_quality(&s).grounding_score - 0.5).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for i in 0..50 {
            let mut s = clean();
            s.blur = i as f64 * 0.01;
            let sharp = true_quality(&s).sharpness;
            assert!(sharp < prev);
            prev = sharp;
        }
    }

    #[test]
    fn actions_change_one_parameter() {
        let limits = ActionLimits::default();
        let none = BTreeSet::new();
        let mut s = clean();
        s.z_offset = 0.05;
        let lowered = apply_action(&s, &CorrectiveAction::LowerObject { dz: 0.02 }, &limits, &none)
            .unwrap();
        assert!((lowered.z_offset - 0.03).abs() < 1e-12);

        let mut s = clean();
        s.z_offset = 0.02;
        let lowered = apply_action(&s, &CorrectiveAction::LowerObject { dz: 0.02 }, &limits, &none)
            .unwrap();
        assert_eq!(lowered.z_offset, 0.0);

        let s = clean();
        let lit = apply_action(&s, &CorrectiveAction::IncKeyLight { delta: 0.1 }, &limits, &none)
            .unwrap();
        assert_eq!(lit.key_light, s.key_light + 0.1);
        let mut expect = s.clone();
        expect.key_light = lit.key_light;
        assert_eq!(lit, expect);

        let mut s = SceneState::clean("mug", 90.0);
        s.object_yaw_deg = 95.0;
        let fixed = apply_action(&s, &CorrectiveAction::YawCorrect { delta_deg: -5.0 }, &limits, &none)
            .unwrap();
        assert_eq!(fixed.object_yaw_deg, 90.0);
    }

    #[test]
    fn action_errors() {
        let limits = ActionLimits::default();
        let locked: BTreeSet<Param> = [Param::Camera].into_iter().collect();
        let s = clean();
        assert_eq!(
            apply_action(&s, &CorrectiveAction::AdjustCamera { delta_deg: 1.0 }, &limits, &locked),
            Err(SimError::LockedParameter(Param::Camera))
        );
        let mut top = clean();
        top.key_light = 3.0;
        assert!(matches!(
            apply_action(&top, &CorrectiveAction::IncKeyLight { delta: 0.1 }, &limits, &locked),
            Err(SimError::OutOfBounds { .. })
        ));
        assert!(matches!(
            apply_action(&s, &CorrectiveAction::LowerObject { dz: 0.5 }, &limits, &locked),
            Err(SimError::StepTooLarge { .. })
        ));
    }

    #[test]
    fn float_raster_codec() {
        let b = render(&clean()).unwrap();
        let bytes = encode_float_raster(&b.normal);
        assert_eq!(&bytes[..4], FLOAT_MAGIC);
        assert_eq!(bytes.len(), 16 + 64 * 64 * 3 * 4);
        assert_eq!(decode_float_raster(&bytes).unwrap(), b.normal);
        let png = encode_png_rgb(&b.rgb);
        assert_eq!(decode_png_rgb(&png).unwrap(), b.rgb);
        assert_eq!(decode_png_mask(&encode_png_mask(&b.mask)).unwrap(), b.mask);
    }
}
