//! CV and VLM review channels and the hybrid scorer that fuses them.

use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{
    self, linear_score, nominal_mask_area, nominal_sky_mean, true_quality, RenderBundle,
    SceneState, HORIZON_ROW,
};

pub const REVIEW_SCHEMA_VERSION: &str = "vlm-review/1";

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("raster dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("reviewer transport failure: {0}")]
    Transport(String),
    #[error("malformed reviewer response: {0}")]
    Malformed(String),
    #[error("invalid hybrid weights: w_vlm={w_vlm}, w_cv={w_cv}")]
    InvalidWeights { w_vlm: f64, w_cv: f64 },
    #[error("thresholds out of order: reject {reject} must be below pass {pass}")]
    UnorderedThresholds { reject: f64, pass: f64 },
    #[error("cannot aggregate an empty view list")]
    EmptyViews,
    #[error("scripted reviewer needs the simulator state")]
    MissingOracleState,
}

// ---------------------------------------------------------------------------
// CV channel

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub gap_tolerance: f64,
    pub penetration_tolerance: f64,
    /// Withhold the mask so framing is reported unavailable.
    pub withhold_mask: bool,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            gap_tolerance: 0.01,
            penetration_tolerance: 0.01,
            withhold_mask: false,
        }
    }
}

/// What the CV channel is told about the scene beyond the pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub target_yaw_deg: f64,
}

/// Raw measurements behind the CV scores, used to size corrective actions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvMeasurements {
    /// Estimated exposure level minus one.
    pub exposure_offset: f64,
    pub blur_estimate: f64,
    /// Signed pose yaw minus target, in `(-180, 180]`.
    pub yaw_error_deg: f64,
    pub scale_ratio: f64,
    pub z_offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvSignals {
    pub exposure: f64,
    pub sharpness: f64,
    pub mask_framing: Option<f64>,
    pub contact_gap: f64,
    pub penetration: f64,
    pub physics_ok: bool,
    pub pose_alignment: f64,
    pub cv_score: f64,
    pub measurements: CvMeasurements,
}

fn luminance(px: [u8; 3]) -> f64 {
    (px[0] as f64 + px[1] as f64 + px[2] as f64) / 3.0
}

/// Mean of sky pixels at least five pixels away from the object.
fn sky_mean(bundle: &RenderBundle) -> f64 {
    let (w, _) = (bundle.rgb.width as i64, bundle.rgb.height);
    let limit = HORIZON_ROW as i64 - 5;
    let near_object = |x: i64, y: i64| {
        for dy in -5..=5 {
            for dx in -5..=5 {
                let (sx, sy) = (x + dx, y + dy);
                if sx >= 0 && sy >= 0 && sx < w && sy < limit + 5 && bundle.mask.get(sx as u32, sy as u32) {
                    return true;
                }
            }
        }
        false
    };
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..limit {
        for x in 0..w {
            if !near_object(x, y) {
                sum += luminance(bundle.rgb.pixel(x as u32, y as u32));
                n += 1;
            }
        }
    }
    if n == 0 {
        nominal_sky_mean()
    } else {
        sum / n as f64
    }
}

/// Blur level recovered from the width of the horizon transition in an
/// object-free column.
fn blur_estimate(bundle: &RenderBundle) -> f64 {
    let (w, h) = (bundle.rgb.width, bundle.rgb.height);
    let column = (0..w).find(|&x| {
        let lo = x.saturating_sub(5);
        let hi = (x + 5).min(w - 1);
        (lo..=hi).all(|cx| (0..h).all(|y| !bundle.mask.get(cx, y)))
    });
    let Some(x) = column else {
        return 0.0;
    };
    let top = HORIZON_ROW - 8;
    let bottom = HORIZON_ROW + 7;
    let sky = luminance(bundle.rgb.pixel(x, top));
    let floor = luminance(bundle.rgb.pixel(x, bottom));
    let (lo, hi) = if sky < floor { (sky, floor) } else { (floor, sky) };
    if hi - lo < 2.0 {
        return 0.0;
    }
    let transition = (top..=bottom)
        .map(|y| luminance(bundle.rgb.pixel(x, y)))
        .filter(|&v| v > lo + 0.5 && v < hi - 0.5)
        .count();
    (transition as f64 / 8.0).min(1.0)
}

pub fn cv_review(
    bundle: &RenderBundle,
    meta: &SceneMeta,
    cfg: &CvConfig,
) -> Result<CvSignals, ReviewError> {
    let (w, h) = (bundle.rgb.width, bundle.rgb.height);
    for (name, (rw, rh)) in [
        ("mask", (bundle.mask.width, bundle.mask.height)),
        ("depth", (bundle.depth.width, bundle.depth.height)),
        ("normal", (bundle.normal.width, bundle.normal.height)),
    ] {
        if (rw, rh) != (w, h) {
            return Err(ReviewError::DimensionMismatch(format!(
                "{name} is {rw}x{rh}, rgb is {w}x{h}"
            )));
        }
    }
    if bundle.rgb.data.len() != (w * h * 3) as usize {
        return Err(ReviewError::DimensionMismatch("rgb buffer length".into()));
    }

    let exposure_offset = sky_mean(bundle) / nominal_sky_mean() - 1.0;
    let blur = blur_estimate(bundle);
    let z = bundle.object_pose.position[1];
    let contact_gap = z.max(0.0);
    let penetration = (-z).max(0.0);
    let scale_ratio = bundle.object_pose.scale;
    let yaw_error_deg = sim::signed_angle(bundle.object_pose.yaw_deg - meta.target_yaw_deg);

    let exposure = linear_score(exposure_offset, 0.5);
    let sharpness = linear_score(blur, 0.5);
    let physics = linear_score(z, 0.1);
    let pose_alignment = linear_score(yaw_error_deg, 25.0);
    let mask_framing = (!cfg.withhold_mask).then(|| {
        let ratio = bundle.mask.area() as f64 / nominal_mask_area() as f64;
        if ratio <= 0.0 {
            0.0
        } else {
            // Area grows with the square of scale.
            linear_score(0.5 * ratio.ln(), 1.6f64.ln())
        }
    });

    let mut parts = vec![exposure, sharpness, physics, pose_alignment];
    parts.extend(mask_framing);
    let cv_score = parts.iter().sum::<f64>() / parts.len() as f64;

    Ok(CvSignals {
        exposure,
        sharpness,
        mask_framing,
        contact_gap,
        penetration,
        physics_ok: contact_gap <= cfg.gap_tolerance && penetration <= cfg.penetration_tolerance,
        pose_alignment,
        cv_score,
        measurements: CvMeasurements {
            exposure_offset,
            blur_estimate: blur,
            yaw_error_deg,
            scale_ratio,
            z_offset: z,
        },
    })
}

// ---------------------------------------------------------------------------
// VLM channel

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VlmScores {
    pub lighting: u8,
    pub object_integrity: u8,
    pub composition: u8,
    pub render_quality: u8,
    pub overall: u8,
}

impl VlmScores {
    pub fn all(&self) -> [u8; 5] {
        [
            self.lighting,
            self.object_integrity,
            self.composition,
            self.render_quality,
            self.overall,
        ]
    }

    pub fn uniform(v: u8) -> Self {
        VlmScores {
            lighting: v,
            object_integrity: v,
            composition: v,
            render_quality: v,
            overall: v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VlmDiagnostics {
    pub lighting_diagnosis: String,
    pub structure_consistency: String,
    pub color_consistency: String,
    pub physics_consistency: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairwisePreference {
    Better,
    Worse,
    Tie,
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VlmReview {
    pub scores: VlmScores,
    pub confidence: f64,
    pub issue_tags: Vec<String>,
    pub suggested_actions: Vec<String>,
    pub diagnostics: VlmDiagnostics,
    pub pairwise_preference: PairwisePreference,
    pub asset_viable: bool,
    #[serde(default)]
    pub freeform_verdict: Option<String>,
}

impl VlmReview {
    /// Mean of the five scores on a unit scale.
    pub fn vlm_part(&self) -> f64 {
        self.scores.all().iter().map(|&s| s as f64).sum::<f64>() / 50.0
    }

    pub fn keep(&self) -> bool {
        self.freeform_verdict.as_deref() == Some("keep")
    }

    pub fn check(&self, has_previous: bool) -> Result<(), ReviewError> {
        if let Some(s) = self.scores.all().iter().find(|&&s| s > 10) {
            return Err(ReviewError::Malformed(format!("score {s} outside 0..10")));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(ReviewError::Malformed(format!(
                "confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        if !has_previous && self.pairwise_preference != PairwisePreference::NotApplicable {
            return Err(ReviewError::Malformed(
                "pairwise preference given without a previous render".into(),
            ));
        }
        Ok(())
    }
}

/// Everything a reviewer may look at for one review round.
#[derive(Debug, Clone, Copy)]
pub struct VlmRequest<'a> {
    pub current: &'a RenderBundle,
    pub previous: Option<&'a RenderBundle>,
    pub object_reference: Option<&'a RenderBundle>,
    pub pseudo_reference: Option<&'a RenderBundle>,
    pub mode: &'a str,
    /// 1-based review round within the inner loop.
    pub round: u32,
    /// Simulator truth for the scripted backend; never sent over the wire.
    pub oracle_state: Option<&'a SceneState>,
    pub oracle_previous: Option<&'a SceneState>,
}

pub trait Reviewer: Send + Sync {
    fn review(&self, request: &VlmRequest<'_>) -> Result<VlmReview, ReviewError>;
    fn name(&self) -> &str;
}

/// Deterministic reviewer derived from the simulator's quality oracle.
///
/// Each oracle component drives two named dimensions plus `overall`. A
/// component below [`ScriptedReviewer::FLAG_BELOW`] is flagged; flagged
/// dimensions score `floor(3 + 3q)` (3..5), clean ones `round(10q)`.
#[derive(Debug, Clone, Default)]
pub struct ScriptedReviewer;

impl ScriptedReviewer {
    pub const FLAG_BELOW: f64 = 0.95;
}

pub fn scripted_review(state: &SceneState, previous: Option<&SceneState>) -> VlmReview {
    let q = true_quality(state);
    let flag = ScriptedReviewer::FLAG_BELOW;
    // (component score, dimensions touched)
    let comps: [(f64, [Dim; 2]); 5] = [
        (q.exposure_score, [Dim::Lighting, Dim::RenderQuality]),
        (q.sharpness, [Dim::RenderQuality, Dim::ObjectIntegrity]),
        (q.grounding_score, [Dim::Composition, Dim::ObjectIntegrity]),
        (q.scale_score, [Dim::Composition, Dim::ObjectIntegrity]),
        (q.yaw_score, [Dim::ObjectIntegrity, Dim::Composition]),
    ];
    let score_dim = |d: Option<Dim>| -> u8 {
        let touching: Vec<f64> = comps
            .iter()
            .filter(|(_, dims)| d.is_none_or(|d| dims.contains(&d)))
            .map(|(v, _)| *v)
            .collect();
        let worst = touching.iter().copied().fold(1.0f64, f64::min);
        let s = if worst < flag {
            (3.0 + 3.0 * worst).floor()
        } else {
            (10.0 * worst).round()
        };
        s.clamp(0.0, 10.0) as u8
    };
    let scores = VlmScores {
        lighting: score_dim(Some(Dim::Lighting)),
        object_integrity: score_dim(Some(Dim::ObjectIntegrity)),
        composition: score_dim(Some(Dim::Composition)),
        render_quality: score_dim(Some(Dim::RenderQuality)),
        overall: score_dim(None),
    };

    let mut tags = Vec::new();
    let mut actions = Vec::new();
    let mut lighting = "balanced";
    let mut structure = "consistent";
    let mut physics = "grounded";
    if q.exposure_score < flag {
        if state.exposure_level() < 1.0 {
            lighting = "underexposed";
            tags.push("underexposed");
            actions.push("inc_key_light");
        } else {
            lighting = "overexposed";
            tags.push("overexposed");
            actions.push("inc_env_strength");
        }
    }
    if q.sharpness < flag {
        tags.push("blurry_render");
    }
    if q.grounding_score < flag {
        if state.z_offset > 0.0 {
            physics = "floating";
            tags.push("floating_object");
            actions.push("lower_object");
        } else {
            physics = "penetrating";
            tags.push("penetrating");
            actions.push("lift_object");
        }
    }
    if q.scale_score < flag {
        structure = "scale_mismatch";
        tags.push(if state.scale < 1.0 { "too_small" } else { "too_large" });
        actions.push("rescale");
    }
    if q.yaw_score < flag {
        structure = "pose_mismatch";
        tags.push("wrong_yaw");
        actions.push("yaw_correct");
    }

    let pairwise_preference = match previous {
        None => PairwisePreference::NotApplicable,
        Some(prev) => {
            let before = true_quality(prev).overall;
            if (q.overall - before).abs() < 1e-9 {
                PairwisePreference::Tie
            } else if q.overall > before {
                PairwisePreference::Better
            } else {
                PairwisePreference::Worse
            }
        }
    };

    VlmReview {
        scores,
        confidence: 0.9,
        freeform_verdict: tags.is_empty().then(|| "keep".to_string()),
        issue_tags: tags.into_iter().map(String::from).collect(),
        suggested_actions: actions.into_iter().map(String::from).collect(),
        diagnostics: VlmDiagnostics {
            lighting_diagnosis: lighting.into(),
            structure_consistency: structure.into(),
            color_consistency: "consistent".into(),
            physics_consistency: physics.into(),
        },
        pairwise_preference,
        asset_viable: state.asset_viable,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dim {
    Lighting,
    ObjectIntegrity,
    Composition,
    RenderQuality,
}

impl Reviewer for ScriptedReviewer {
    fn review(&self, request: &VlmRequest<'_>) -> Result<VlmReview, ReviewError> {
        let state = request.oracle_state.ok_or(ReviewError::MissingOracleState)?;
        let previous = request.previous.and(request.oracle_previous);
        Ok(scripted_review(state, previous))
    }

    fn name(&self) -> &str {
        "scripted"
    }
}

/// Never satisfied; suggests lowering on odd rounds and lifting on even ones.
#[derive(Debug, Clone, Default)]
pub struct AdversarialReviewer;

impl Reviewer for AdversarialReviewer {
    fn review(&self, request: &VlmRequest<'_>) -> Result<VlmReview, ReviewError> {
        let action = if request.round % 2 == 1 {
            "lower_object"
        } else {
            "lift_object"
        };
        Ok(VlmReview {
            scores: VlmScores::uniform(6),
            confidence: 0.5,
            issue_tags: vec![],
            suggested_actions: vec![action.into()],
            diagnostics: VlmDiagnostics {
                lighting_diagnosis: "balanced".into(),
                structure_consistency: "consistent".into(),
                color_consistency: "consistent".into(),
                physics_consistency: "uncertain".into(),
            },
            pairwise_preference: if request.previous.is_some() {
                PairwisePreference::Tie
            } else {
                PairwisePreference::NotApplicable
            },
            asset_viable: true,
            freeform_verdict: None,
        })
    }

    fn name(&self) -> &str {
        "adversarial"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn default_timeout_ms() -> u64 {
    30_000
}
fn default_retries() -> u32 {
    2
}
fn default_parallelism() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireImages {
    pub current: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub previous: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub object_reference: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pseudo_reference: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub schema_version: String,
    pub mode: String,
    pub has_previous: bool,
    pub images: WireImages,
}

impl WireRequest {
    pub fn from_request(request: &VlmRequest<'_>) -> Self {
        let enc = |b: &RenderBundle| {
            base64::engine::general_purpose::STANDARD.encode(sim::encode_png_rgb(&b.rgb))
        };
        WireRequest {
            schema_version: REVIEW_SCHEMA_VERSION.into(),
            mode: request.mode.into(),
            has_previous: request.previous.is_some(),
            images: WireImages {
                current: enc(request.current),
                previous: request.previous.map(enc),
                object_reference: request.object_reference.map(enc),
                pseudo_reference: request.pseudo_reference.map(enc),
            },
        }
    }
}

/// Reviewer behind an HTTP endpoint speaking the JSON wire contract.
pub struct RemoteReviewer {
    cfg: RemoteConfig,
    agent: ureq::Agent,
}

impl std::fmt::Debug for RemoteReviewer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteReviewer")
            .field("cfg", &self.cfg)
            .finish_non_exhaustive()
    }
}

impl RemoteReviewer {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .build()
            .into();
        RemoteReviewer { cfg, agent }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.cfg
    }

    fn call_once(&self, body: &WireRequest) -> Result<String, ReviewError> {
        let mut resp = self
            .agent
            .post(&self.cfg.endpoint)
            .send_json(body)
            .map_err(|e| ReviewError::Transport(e.to_string()))?;
        resp.body_mut()
            .read_to_string()
            .map_err(|e| ReviewError::Transport(e.to_string()))
    }
}

impl Reviewer for RemoteReviewer {
    fn review(&self, request: &VlmRequest<'_>) -> Result<VlmReview, ReviewError> {
        let body = WireRequest::from_request(request);
        let mut last = None;
        for _ in 0..=self.cfg.retries {
            match self.call_once(&body) {
                Ok(text) => {
                    let review: VlmReview = serde_json::from_str(&text)
                        .map_err(|e| ReviewError::Malformed(e.to_string()))?;
                    review.check(body.has_previous)?;
                    return Ok(review);
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last.unwrap_or_else(|| ReviewError::Transport("no attempt made".into())))
    }

    fn name(&self) -> &str {
        "remote"
    }
}

// ---------------------------------------------------------------------------
// Fusion and routing

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    pub w_vlm: f64,
    pub w_cv: f64,
    /// A dimension at or below this triggers the cap.
    pub cap_trigger: u8,
    pub cap_value: f64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        HybridConfig {
            w_vlm: 0.70,
            w_cv: 0.30,
            cap_trigger: 3,
            cap_value: 0.40,
        }
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<(), ReviewError> {
        if self.w_vlm < 0.0 || self.w_cv < 0.0 || (self.w_vlm + self.w_cv - 1.0).abs() > 1e-9 {
            return Err(ReviewError::InvalidWeights {
                w_vlm: self.w_vlm,
                w_cv: self.w_cv,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridScore {
    pub value: f64,
    pub capped: bool,
    pub per_view: Vec<f64>,
    pub vlm_part: f64,
    pub cv_part: f64,
    /// Weighted combination before any cap.
    pub raw: f64,
}

pub fn hybrid_score(
    vlm: &VlmReview,
    cv: &CvSignals,
    cfg: &HybridConfig,
) -> Result<HybridScore, ReviewError> {
    cfg.validate()?;
    let vlm_part = vlm.vlm_part();
    let cv_part = cv.cv_score;
    let raw = (cfg.w_vlm * vlm_part + cfg.w_cv * cv_part).clamp(0.0, 1.0);
    let s = &vlm.scores;
    let capped = [s.object_integrity, s.composition, s.render_quality]
        .iter()
        .any(|&d| d <= cfg.cap_trigger);
    let value = if capped { raw.min(cfg.cap_value) } else { raw };
    Ok(HybridScore {
        value,
        capped,
        per_view: vec![value],
        vlm_part,
        cv_part,
        raw,
    })
}

/// Fuse several views of one sample: per-view hybrid values aggregated with
/// [`aggregate_views`], channel parts averaged.
pub fn hybrid_score_views(
    views: &[(VlmReview, CvSignals)],
    cfg: &HybridConfig,
) -> Result<HybridScore, ReviewError> {
    let scored = views
        .iter()
        .map(|(v, c)| hybrid_score(v, c, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let per_view: Vec<f64> = scored.iter().map(|s| s.value).collect();
    let raws: Vec<f64> = scored.iter().map(|s| s.raw).collect();
    let n = scored.len() as f64;
    Ok(HybridScore {
        value: aggregate_views(&per_view)?,
        capped: scored.iter().any(|s| s.capped),
        raw: aggregate_views(&raws)?,
        vlm_part: scored.iter().map(|s| s.vlm_part).sum::<f64>() / n,
        cv_part: scored.iter().map(|s| s.cv_part).sum::<f64>() / n,
        per_view,
    })
}

/// `0.7 * mean + 0.3 * worst`.
pub fn aggregate_views(per_view: &[f64]) -> Result<f64, ReviewError> {
    if per_view.is_empty() {
        return Err(ReviewError::EmptyViews);
    }
    let mean = per_view.iter().sum::<f64>() / per_view.len() as f64;
    let worst = per_view.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(0.7 * mean + 0.3 * worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleRoute {
    Pass,
    Act,
    RejectSample,
    AbandonAsset,
    Inspect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub pass: f64,
    pub reject: f64,
    pub disagreement_margin: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            pass: 0.80,
            reject: 0.40,
            disagreement_margin: 0.5,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), ReviewError> {
        if !(self.reject < self.pass) {
            return Err(ReviewError::UnorderedThresholds {
                reject: self.reject,
                pass: self.pass,
            });
        }
        Ok(())
    }
}

/// Abandon beats everything, then pass, reject, channel disagreement, act.
pub fn route(
    score: &HybridScore,
    vlm: &VlmReview,
    thresholds: &Thresholds,
) -> Result<SampleRoute, ReviewError> {
    thresholds.validate()?;
    Ok(if !vlm.asset_viable {
        SampleRoute::AbandonAsset
    } else if score.value >= thresholds.pass || vlm.keep() {
        SampleRoute::Pass
    } else if score.value < thresholds.reject {
        SampleRoute::RejectSample
    } else if (score.vlm_part - score.cv_part).abs() > thresholds.disagreement_margin {
        SampleRoute::Inspect
    } else {
        SampleRoute::Act
    })
}

/// Pass/fail of each channel on its own, judged against the pass threshold.
pub fn channel_verdicts(score: &HybridScore, thresholds: &Thresholds) -> (bool, bool) {
    (
        score.cv_part >= thresholds.pass,
        score.vlm_part >= thresholds.pass,
    )
}

/// Fraction of review rounds whose CV and VLM pass/fail calls agree.
pub fn channel_agreement(rounds: &[(bool, bool)]) -> Option<f64> {
    if rounds.is_empty() {
        return None;
    }
    let agree = rounds.iter().filter(|(c, v)| c == v).count();
    Some(agree as f64 / rounds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{inject_defects, render, DefectSpec};

    fn review_state(s: &SceneState) -> (VlmReview, CvSignals) {
        let b = render(s).unwrap();
        let cv = cv_review(
            &b,
            &SceneMeta {
                target_yaw_deg: s.target_yaw_deg,
            },
            &CvConfig::default(),
        )
        .unwrap();
        (scripted_review(s, None), cv)
    }

    fn with(d: DefectSpec) -> SceneState {
        inject_defects(&SceneState::clean("mug", 0.0), &d, 3).unwrap()
    }

    #[test]
    fn clean_cv_signals() {
        let (_, cv) = review_state(&SceneState::clean("mug", 0.0));
        assert_eq!(cv.contact_gap, 0.0);
        assert_eq!(cv.penetration, 0.0);
        assert!(cv.physics_ok);
        assert!(cv.exposure > 0.98, "{}", cv.exposure);
        assert_eq!(cv.sharpness, 1.0);
        assert!(cv.mask_framing.unwrap() > 0.99);
    }

    #[test]
    fn floating_measured_from_pose() {
        let (_, cv) = review_state(&with(DefectSpec {
            grounding_gap: 0.05,
            ..Default::default()
        }));
        assert!((cv.contact_gap - 0.05).abs() < 1e-12);
        assert!(!cv.physics_ok);
    }

    #[test]
    fn blur_detected() {
        let (_, cv) = review_state(&with(DefectSpec {
            blur: 1.0,
            ..Default::default()
        }));
        assert!(cv.sharpness < 0.5, "{}", cv.sharpness);
        let (_, cv) = review_state(&with(DefectSpec {
            blur: 0.5,
            ..Default::default()
        }));
        assert!(cv.measurements.blur_estimate > 0.3, "{:?}", cv.measurements);
    }

    #[test]
    fn exposure_measured() {
        for err in [-0.4, -0.2, 0.1, 0.3] {
            let (_, cv) = review_state(&with(DefectSpec {
                exposure_error: err,
                ..Default::default()
            }));
            assert!(
                (cv.measurements.exposure_offset - err).abs() < 0.01,
                "{err}: {}",
                cv.measurements.exposure_offset
            );
        }
    }

    #[test]
    fn withheld_mask_drops_framing() {
        let b = render(&SceneState::clean("mug", 0.0)).unwrap();
        let cfg = CvConfig {
            withhold_mask: true,
            ..Default::default()
        };
        let cv = cv_review(&b, &SceneMeta { target_yaw_deg: 0.0 }, &cfg).unwrap();
        assert_eq!(cv.mask_framing, None);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let mut b = render(&SceneState::clean("mug", 0.0)).unwrap();
        b.mask.width = 32;
        assert!(matches!(
            cv_review(&b, &SceneMeta { target_yaw_deg: 0.0 }, &CvConfig::default()),
            Err(ReviewError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn scripted_clean_keeps() {
        let r = scripted_review(&SceneState::clean("mug", 0.0), None);
        assert!(r.scores.all().iter().all(|&s| s >= 8));
        assert!(r.issue_tags.is_empty());
        assert_eq!(r.freeform_verdict.as_deref(), Some("keep"));
        assert_eq!(r.pairwise_preference, PairwisePreference::NotApplicable);
    }

    #[test]
    fn scripted_floating() {
        let r = scripted_review(
            &with(DefectSpec {
                grounding_gap: 0.05,
                ..Default::default()
            }),
            None,
        );
        assert!(r.issue_tags.contains(&"floating_object".to_string()));
        assert!(r.suggested_actions.contains(&"lower_object".to_string()));
    }

    #[test]
    fn hybrid_examples() {
        let (mut vlm, mut cv) = review_state(&SceneState::clean("mug", 0.0));
        cv.cv_score = 1.0;
        let h = hybrid_score(&vlm, &cv, &HybridConfig::default()).unwrap();
        assert_eq!(h.value, 1.0);
        assert!(!h.capped);

        vlm.scores = VlmScores::uniform(9);
        cv.cv_score = 0.5;
        let h = hybrid_score(&vlm, &cv, &HybridConfig::default()).unwrap();
        assert!((h.value - 0.78).abs() < 1e-12);

        vlm.scores = VlmScores {
            object_integrity: 2,
            ..VlmScores::uniform(7)
        };
        cv.cv_score = 0.6;
        let h = hybrid_score(&vlm, &cv, &HybridConfig::default()).unwrap();
        assert!(h.capped);
        assert_eq!(h.value, 0.40);

        let bad = HybridConfig {
            w_vlm: 0.8,
            ..Default::default()
        };
        assert!(hybrid_score(&vlm, &cv, &bad).is_err());
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(aggregate_views(&[0.3]).unwrap(), 0.3);
        assert!((aggregate_views(&[1.0, 0.5]).unwrap() - 0.675).abs() < 1e-12);
        assert_eq!(
            aggregate_views(&[0.2, 0.9, 0.5]).unwrap(),
            aggregate_views(&[0.9, 0.5, 0.2]).unwrap()
        );
        assert!(aggregate_views(&[]).is_err());
    }

    #[test]
    fn routing_examples() {
        let (mut vlm, _) = review_state(&SceneState::clean("mug", 0.0));
        vlm.freeform_verdict = None;
        let t = Thresholds::default();
        let mk = |value: f64, vlm_part: f64, cv_part: f64| HybridScore {
            value,
            capped: false,
            per_view: vec![value],
            vlm_part,
            cv_part,
            raw: value,
        };
        assert_eq!(route(&mk(0.95, 0.95, 0.95), &vlm, &t).unwrap(), SampleRoute::Pass);
        assert_eq!(route(&mk(0.3, 0.3, 0.3), &vlm, &t).unwrap(), SampleRoute::RejectSample);
        assert_eq!(route(&mk(0.69, 0.9, 0.2), &vlm, &t).unwrap(), SampleRoute::Inspect);
        assert_eq!(route(&mk(0.6, 0.6, 0.6), &vlm, &t).unwrap(), SampleRoute::Act);
        vlm.asset_viable = false;
        assert_eq!(route(&mk(0.95, 0.95, 0.95), &vlm, &t).unwrap(), SampleRoute::AbandonAsset);
        let bad = Thresholds {
            pass: 0.3,
            reject: 0.5,
            ..t
        };
        assert!(route(&mk(0.5, 0.5, 0.5), &vlm, &bad).is_err());
    }

    #[test]
    fn agreement_fraction() {
        assert_eq!(channel_agreement(&[]), None);
        assert_eq!(
            channel_agreement(&[(true, true), (false, true), (false, false), (true, false)]),
            Some(0.5)
        );
    }

    #[test]
    fn malformed_review_rejected() {
        let mut r = scripted_review(&SceneState::clean("mug", 0.0), None);
        r.scores.overall = 11;
        assert!(r.check(false).is_err());
        let mut r = scripted_review(&SceneState::clean("mug", 0.0), None);
        r.pairwise_preference = PairwisePreference::Better;
        assert!(r.check(false).is_err());
        let json = r#"{"scores":{"lighting":1}}"#;
        assert!(serde_json::from_str::<VlmReview>(json).is_err());
    }
}
