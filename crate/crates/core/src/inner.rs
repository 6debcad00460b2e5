//! Generation-time correction loop: render, review, route, then at most one
//! bounded action per round until the sample is accepted or the loop stops.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::{ActionLimits, CorrectiveAction, MaterialChannel, Param, ACTION_VOCABULARY};
use crate::review::{
    channel_verdicts, cv_review, hybrid_score, route, CvConfig, CvSignals, HybridConfig,
    HybridScore, ReviewError, Reviewer, SampleRoute, SceneMeta, Thresholds, VlmRequest, VlmReview,
};
use crate::sim::{self, render, RenderBundle, SceneState, SimError};
use crate::store::{ArtifactId, ArtifactKind, ArtifactStore, SampleRecord, SampleRefs, StoreError};

#[derive(Debug, Error)]
pub enum InnerError {
    #[error("invalid inner-loop config: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Review(#[from] ReviewError),
    #[error("filtered action rejected by the simulator: {0}")]
    Sim(#[from] SimError),
    #[error("loop already terminated")]
    Terminated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InnerConfig {
    pub max_rounds: u32,
    pub plateau_eps: f64,
    pub plateau_k: usize,
    pub flip_limit: usize,
    /// Margin kept from each bound, in action steps.
    pub bound_margin_steps: f64,
    pub limits: ActionLimits,
    pub hybrid: HybridConfig,
    pub thresholds: Thresholds,
    pub cv: CvConfig,
}

impl Default for InnerConfig {
    fn default() -> Self {
        InnerConfig {
            max_rounds: 5,
            plateau_eps: 0.02,
            plateau_k: 2,
            flip_limit: 2,
            bound_margin_steps: 1.0,
            limits: ActionLimits::default(),
            hybrid: HybridConfig::default(),
            thresholds: Thresholds::default(),
            cv: CvConfig::default(),
        }
    }
}

impl InnerConfig {
    pub fn validate(&self) -> Result<(), InnerError> {
        if self.max_rounds < 1 {
            return Err(InnerError::Config("max_rounds must be at least 1".into()));
        }
        if !(self.plateau_eps > 0.0) || self.plateau_k < 2 {
            return Err(InnerError::Config("plateau needs eps > 0 and k >= 2".into()));
        }
        if self.flip_limit < 1 {
            return Err(InnerError::Config("flip_limit must be at least 1".into()));
        }
        self.hybrid.validate()?;
        self.thresholds.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlState {
    pub scene: SceneState,
    pub limits: ActionLimits,
    pub frozen: BTreeSet<Param>,
    pub locked: BTreeSet<Param>,
    pub round: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub param: Param,
    pub delta: f64,
    pub round: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionHistory {
    pub entries: Vec<HistoryEntry>,
}

impl ActionHistory {
    pub fn push(&mut self, param: Param, delta: f64, round: u32) {
        debug_assert!(self.entries.last().is_none_or(|e| e.round <= round));
        self.entries.push(HistoryEntry {
            param,
            delta,
            round,
        });
    }

    /// Sign changes between consecutive moves on `param`, optionally with
    /// one more hypothetical move appended.
    pub fn flips(&self, param: Param, next: Option<f64>) -> usize {
        let signs: Vec<bool> = self
            .entries
            .iter()
            .filter(|e| e.param == param && e.delta != 0.0)
            .map(|e| e.delta > 0.0)
            .chain(next.filter(|d| *d != 0.0).map(|d| d > 0.0))
            .collect();
        signs.windows(2).filter(|w| w[0] != w[1]).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopStatus {
    Accepted,
    Rejected,
    Abandoned,
    Plateaued,
    RoundCapped,
}

impl LoopStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            LoopStatus::Accepted => "accepted",
            LoopStatus::Rejected => "rejected",
            LoopStatus::Abandoned => "abandoned",
            LoopStatus::Plateaued => "plateaued",
            LoopStatus::RoundCapped => "round_capped",
        }
    }
}

/// Deterministic issue-tag → action table, in priority order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallbackMap {
    pub entries: Vec<(String, Vec<String>)>,
}

impl Default for FallbackMap {
    fn default() -> Self {
        let row = |tag: &str, actions: &[&str]| {
            (
                tag.to_string(),
                actions.iter().map(|a| a.to_string()).collect(),
            )
        };
        FallbackMap {
            entries: vec![
                row("underexposed", &["inc_key_light"]),
                row(
                    "overexposed",
                    &["inc_env_strength", "inc_key_light", "material_value"],
                ),
                row("floating_object", &["lower_object"]),
                row("penetrating", &["lift_object"]),
                row("wrong_yaw", &["yaw_correct"]),
                row("too_small", &["rescale"]),
                row("too_large", &["rescale"]),
                row("flat_lighting", &["inc_contact_shadow"]),
            ],
        }
    }
}

/// Tags implied by the diagnostics block, for reviews that omit issue tags.
fn diagnostic_tags(review: &VlmReview, cv: &CvSignals) -> Vec<&'static str> {
    let d = &review.diagnostics;
    let mut out = Vec::new();
    match d.lighting_diagnosis.as_str() {
        "underexposed" => out.push("underexposed"),
        "overexposed" => out.push("overexposed"),
        "flat" | "flat_lighting" => out.push("flat_lighting"),
        _ => {}
    }
    match d.physics_consistency.as_str() {
        "floating" => out.push("floating_object"),
        "penetrating" => out.push("penetrating"),
        _ => {}
    }
    match d.structure_consistency.as_str() {
        "pose_mismatch" => out.push("wrong_yaw"),
        "scale_mismatch" if cv.measurements.scale_ratio < 1.0 => out.push("too_small"),
        "scale_mismatch" => out.push("too_large"),
        _ => {}
    }
    out
}

fn sign_or(value: f64, default: f64) -> f64 {
    if value.abs() < 1e-12 {
        default
    } else {
        value.signum()
    }
}

/// Size a named action from the CV measurements: move against the measured
/// error by at most one step, or a full step when nothing is measured.
pub fn build_action(name: &str, cv: &CvSignals, control: &ControlState) -> Option<CorrectiveAction> {
    let m = &cv.measurements;
    let step = |p: Param| control.limits.step(p);
    let toward = |err: f64, p: Param| -sign_or(err, -1.0) * step(p).min(err.abs().max(0.0));
    let exposure = |p: Param| {
        if m.exposure_offset.abs() < 1e-12 {
            step(p)
        } else {
            toward(m.exposure_offset, p)
        }
    };
    let material = |channel: MaterialChannel, err: f64| CorrectiveAction::MaterialAdjust {
        channel,
        delta: -sign_or(err, -1.0) * step(channel.param()),
    };
    Some(match name {
        "inc_key_light" => CorrectiveAction::IncKeyLight {
            delta: exposure(Param::KeyLight),
        },
        "inc_env_strength" => CorrectiveAction::IncEnvStrength {
            delta: exposure(Param::EnvStrength),
        },
        "rotate_env" => CorrectiveAction::RotateEnv {
            delta_deg: step(Param::EnvRotation),
        },
        "inc_contact_shadow" => CorrectiveAction::IncContactShadow {
            delta: step(Param::ContactShadow),
        },
        "lower_object" => CorrectiveAction::LowerObject {
            dz: if cv.contact_gap > 0.0 {
                step(Param::ZOffset).min(cv.contact_gap)
            } else {
                step(Param::ZOffset)
            },
        },
        "lift_object" => CorrectiveAction::LiftObject {
            dz: if cv.penetration > 0.0 {
                step(Param::ZOffset).min(cv.penetration)
            } else {
                step(Param::ZOffset)
            },
        },
        "yaw_correct" => CorrectiveAction::YawCorrect {
            delta_deg: if m.yaw_error_deg.abs() < 1e-12 {
                step(Param::Yaw)
            } else {
                toward(m.yaw_error_deg, Param::Yaw)
            },
        },
        "rescale" => {
            let s = step(Param::Scale);
            let ratio = m.scale_ratio;
            let factor = if (ratio - 1.0).abs() < 1e-12 || ratio <= 0.0 {
                1.0 + s
            } else {
                (1.0 / ratio).clamp(1.0 / (1.0 + s), 1.0 + s)
            };
            CorrectiveAction::Rescale { factor }
        }
        // Only exposure reaches material value; darker when overexposed.
        "material_value" => material(MaterialChannel::Value, m.exposure_offset),
        "material_saturation" => material(
            MaterialChannel::Saturation,
            control.scene.material.saturation - 0.5,
        ),
        "material_hue" => material(MaterialChannel::Hue, control.scene.material.hue - 0.5),
        "material_roughness" => material(
            MaterialChannel::Roughness,
            control.scene.material.roughness - 0.5,
        ),
        "adjust_camera" => CorrectiveAction::AdjustCamera {
            delta_deg: step(Param::Camera),
        },
        _ => return None,
    })
}

fn next_value(scene: &SceneState, action: &CorrectiveAction, param: Param) -> f64 {
    let cur = scene.param_value(param);
    match action {
        CorrectiveAction::Rescale { factor } => cur * factor,
        _ => cur + action.signed_delta(),
    }
}

/// In vocabulary, not locked, not frozen, within step and plain bounds.
fn is_valid(action: &CorrectiveAction, control: &ControlState) -> bool {
    if !ACTION_VOCABULARY.contains(&action.name()) {
        return false;
    }
    let Some(param) = action.param() else {
        return false;
    };
    if control.locked.contains(&param) || control.frozen.contains(&param) {
        return false;
    }
    let mag = action.magnitude();
    if !(mag > 1e-12) || mag > control.limits.step(param) + 1e-12 {
        return false;
    }
    let next = next_value(&control.scene, action, param);
    match control.limits.bound(param) {
        Some([lo, hi]) => next >= lo - 1e-12 && next <= hi + 1e-12,
        None => next.is_finite(),
    }
}

/// First valid reviewer suggestion, else the fallback action for the
/// highest-priority tag, else noop.
pub fn select_action(
    review: &VlmReview,
    cv: &CvSignals,
    control: &ControlState,
    fallback: &FallbackMap,
) -> CorrectiveAction {
    for name in &review.suggested_actions {
        if let Some(a) = build_action(name, cv, control) {
            if is_valid(&a, control) {
                return a;
            }
        }
    }
    let mut tags: Vec<&str> = review.issue_tags.iter().map(String::as_str).collect();
    tags.extend(diagnostic_tags(review, cv));
    for (tag, actions) in &fallback.entries {
        if !tags.contains(&tag.as_str()) {
            continue;
        }
        for name in actions {
            if let Some(a) = build_action(name, cv, control) {
                if is_valid(&a, control) {
                    return a;
                }
            }
        }
    }
    CorrectiveAction::Noop
}

/// Why the safety filter replaced an action with noop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyVeto {
    Locked,
    Frozen,
    StepLimit,
    NearBound,
    SignFlips,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyOutcome {
    pub action: CorrectiveAction,
    pub frozen: BTreeSet<Param>,
    pub veto: Option<SafetyVeto>,
}

pub fn safety_filter(
    action: &CorrectiveAction,
    history: &ActionHistory,
    control: &ControlState,
    flip_limit: usize,
    margin_steps: f64,
) -> SafetyOutcome {
    let mut frozen = control.frozen.clone();
    let veto = |v: SafetyVeto, frozen: BTreeSet<Param>| SafetyOutcome {
        action: CorrectiveAction::Noop,
        frozen,
        veto: Some(v),
    };
    let Some(param) = action.param() else {
        return SafetyOutcome {
            action: *action,
            frozen,
            veto: None,
        };
    };
    if control.locked.contains(&param) {
        return veto(SafetyVeto::Locked, frozen);
    }
    if frozen.contains(&param) {
        return veto(SafetyVeto::Frozen, frozen);
    }
    let step = control.limits.step(param);
    if action.magnitude() > step + 1e-12 {
        return veto(SafetyVeto::StepLimit, frozen);
    }
    let cur = control.scene.param_value(param);
    let next = next_value(&control.scene, action, param);
    if let Some([lo, hi]) = control.limits.bound(param) {
        let margin = step * margin_steps;
        let outside = next < lo - 1e-12 || next > hi + 1e-12;
        let into_upper = next > cur && next > hi - margin + 1e-12;
        let into_lower = next < cur && next < lo + margin - 1e-12;
        if outside || into_upper || into_lower {
            return veto(SafetyVeto::NearBound, frozen);
        }
    }
    if history.flips(param, Some(action.signed_delta())) >= flip_limit {
        frozen.insert(param);
        return veto(SafetyVeto::SignFlips, frozen);
    }
    SafetyOutcome {
        action: *action,
        frozen,
        veto: None,
    }
}

/// True iff the best of the last `k` scores beats the best before them by
/// less than `eps`.
pub fn detect_plateau(scores: &[f64], eps: f64, k: usize) -> bool {
    if k == 0 || scores.len() < k + 1 {
        return false;
    }
    let (before, recent) = scores.split_at(scores.len() - k);
    let best = |xs: &[f64]| xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    best(recent) - best(before) < eps
}

/// One persisted line per review round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub sample_id: String,
    pub round: u32,
    pub state: SceneState,
    pub frozen: BTreeSet<Param>,
    pub score: Option<HybridScore>,
    pub cv_pass: Option<bool>,
    pub vlm_pass: Option<bool>,
    pub issue_tags: Vec<String>,
    pub suggested: Option<CorrectiveAction>,
    pub action: Option<CorrectiveAction>,
    pub veto: Option<SafetyVeto>,
    pub route: SampleRoute,
    pub status: Option<LoopStatus>,
    pub cause: Option<String>,
    pub thresholds: Thresholds,
    pub render_ref: Option<ArtifactId>,
    pub review_ref: Option<ArtifactId>,
}

/// Review record persisted per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewTrace {
    pub round: u32,
    pub reviewer: String,
    pub vlm: Option<VlmReview>,
    pub cv: Option<CvSignals>,
    pub score: Option<HybridScore>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopRequest {
    pub sample_id: String,
    /// Initial scene, defects already applied.
    pub scene: SceneState,
    pub locked: BTreeSet<Param>,
    pub mode: String,
    /// Canonical action-program text describing the sample, if any.
    pub program: Option<String>,
}

#[derive(Debug, Clone)]
pub struct LoopState {
    pub sample_id: String,
    pub mode: String,
    pub control: ControlState,
    pub history: ActionHistory,
    pub scores: Vec<f64>,
    pub routes: Vec<SampleRoute>,
    pub previous: Option<(SceneState, RenderBundle)>,
    pub terminal: Option<(LoopStatus, Option<String>)>,
    pub last_score: Option<f64>,
    pub last_bundle: Option<RenderBundle>,
}

impl LoopState {
    pub fn new(request: &LoopRequest, cfg: &InnerConfig) -> Self {
        LoopState {
            sample_id: request.sample_id.clone(),
            mode: request.mode.clone(),
            control: ControlState {
                scene: request.scene.clone(),
                limits: cfg.limits.clone(),
                frozen: BTreeSet::new(),
                locked: request.locked.clone(),
                round: 0,
            },
            history: ActionHistory::default(),
            scores: Vec::new(),
            routes: Vec::new(),
            previous: None,
            terminal: None,
            last_score: None,
            last_bundle: None,
        }
    }
}

/// What one step produced, beyond the updated state.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub log: LogRecord,
    pub bundle: Option<RenderBundle>,
    pub review: ReviewTrace,
}

pub struct InnerLoop<'a> {
    pub cfg: &'a InnerConfig,
    pub reviewer: &'a dyn Reviewer,
    pub fallback: &'a FallbackMap,
}

impl<'a> InnerLoop<'a> {
    pub fn new(cfg: &'a InnerConfig, reviewer: &'a dyn Reviewer, fallback: &'a FallbackMap) -> Self {
        InnerLoop {
            cfg,
            reviewer,
            fallback,
        }
    }

    pub fn step(&self, mut s: LoopState) -> Result<(LoopState, StepOutput), InnerError> {
        if s.terminal.is_some() {
            return Err(InnerError::Terminated);
        }
        let cfg = self.cfg;
        s.control.round += 1;
        let round = s.control.round;
        let mut log = LogRecord {
            sample_id: s.sample_id.clone(),
            round,
            state: s.control.scene.clone(),
            frozen: s.control.frozen.clone(),
            score: None,
            cv_pass: None,
            vlm_pass: None,
            issue_tags: vec![],
            suggested: None,
            action: None,
            veto: None,
            route: SampleRoute::RejectSample,
            status: None,
            cause: None,
            thresholds: cfg.thresholds,
            render_ref: None,
            review_ref: None,
        };
        let mut trace = ReviewTrace {
            round,
            reviewer: self.reviewer.name().to_string(),
            vlm: None,
            cv: None,
            score: None,
            error: None,
        };
        let finish = |s: &mut LoopState, log: &mut LogRecord, status: LoopStatus, cause: Option<String>| {
            log.status = Some(status);
            log.cause = cause.clone();
            s.routes.push(log.route);
            s.terminal = Some((status, cause));
        };

        let bundle = match render(&s.control.scene) {
            Ok(b) => b,
            Err(e) => {
                trace.error = Some(format!("render_failure: {e}"));
                finish(&mut s, &mut log, LoopStatus::Rejected, Some("render_failure".into()));
                return Ok((s, StepOutput { log, bundle: None, review: trace }));
            }
        };
        s.last_bundle = Some(bundle.clone());

        let meta = SceneMeta {
            target_yaw_deg: s.control.scene.target_yaw_deg,
        };
        let cv = cv_review(&bundle, &meta, &cfg.cv)?;
        trace.cv = Some(cv);
        let request = VlmRequest {
            current: &bundle,
            previous: s.previous.as_ref().map(|(_, b)| b),
            object_reference: None,
            pseudo_reference: None,
            mode: &s.mode,
            round,
            oracle_state: Some(&s.control.scene),
            oracle_previous: s.previous.as_ref().map(|(st, _)| st),
        };
        let vlm = match self.reviewer.review(&request) {
            Ok(v) => v,
            Err(e) => {
                trace.error = Some(e.to_string());
                log.route = SampleRoute::Inspect;
                finish(&mut s, &mut log, LoopStatus::Rejected, Some(format!("reviewer_error: {e}")));
                return Ok((s, StepOutput { log, bundle: Some(bundle), review: trace }));
            }
        };
        let score = hybrid_score(&vlm, &cv, &cfg.hybrid)?;
        let r = route(&score, &vlm, &cfg.thresholds)?;
        let (cv_pass, vlm_pass) = channel_verdicts(&score, &cfg.thresholds);
        log.cv_pass = Some(cv_pass);
        log.vlm_pass = Some(vlm_pass);
        log.score = Some(score.clone());
        log.issue_tags = vlm.issue_tags.clone();
        log.route = r;
        trace.vlm = Some(vlm.clone());
        trace.score = Some(score.clone());
        s.scores.push(score.raw);
        s.last_score = Some(score.value);

        match r {
            SampleRoute::Pass => finish(&mut s, &mut log, LoopStatus::Accepted, None),
            SampleRoute::AbandonAsset => {
                finish(&mut s, &mut log, LoopStatus::Abandoned, Some("asset_not_viable".into()))
            }
            SampleRoute::RejectSample => {
                finish(&mut s, &mut log, LoopStatus::Rejected, Some("score_below_reject".into()))
            }
            SampleRoute::Inspect => finish(
                &mut s,
                &mut log,
                LoopStatus::Rejected,
                Some("channel_disagreement".into()),
            ),
            SampleRoute::Act => {
                if round >= cfg.max_rounds {
                    finish(&mut s, &mut log, LoopStatus::RoundCapped, None);
                } else {
                    let chosen = select_action(&vlm, &cv, &s.control, self.fallback);
                    log.suggested = Some(chosen);
                    let safe = safety_filter(
                        &chosen,
                        &s.history,
                        &s.control,
                        cfg.flip_limit,
                        cfg.bound_margin_steps,
                    );
                    s.control.frozen = safe.frozen.clone();
                    log.frozen = safe.frozen;
                    log.veto = safe.veto;
                    if safe.action.is_noop() {
                        log.action = Some(CorrectiveAction::Noop);
                        finish(&mut s, &mut log, LoopStatus::Plateaued, Some("no_safe_action".into()));
                    } else if detect_plateau(&s.scores, cfg.plateau_eps, cfg.plateau_k) {
                        finish(&mut s, &mut log, LoopStatus::Plateaued, Some("score_plateau".into()));
                    } else {
                        let param = safe.action.param().expect("non-noop action has a param");
                        let next = sim::apply_action(
                            &s.control.scene,
                            &safe.action,
                            &cfg.limits,
                            &s.control.locked,
                        )?;
                        s.history.push(param, safe.action.signed_delta(), round);
                        log.action = Some(safe.action);
                        s.routes.push(r);
                        s.previous = Some((s.control.scene.clone(), bundle.clone()));
                        s.control.scene = next;
                    }
                }
            }
        }
        Ok((s, StepOutput { log, bundle: Some(bundle), review: trace }))
    }

    /// Step until a terminal status, persisting every round when a store is given.
    pub fn run(
        &self,
        request: &LoopRequest,
        store: Option<&ArtifactStore>,
        round_id: u32,
    ) -> Result<InnerLoopResult, InnerError> {
        self.cfg.validate()?;
        let mut s = LoopState::new(request, self.cfg);
        let mut logs = Vec::new();
        let mut refs = SampleRefs::default();
        let mut trace_refs = Vec::new();
        if let Some(st) = store {
            let scene = st.put_json(&request.scene, ArtifactKind::DiagnosticLog)?;
            let asset = st.put_json(&AssetDescriptor::for_object(&request.scene), ArtifactKind::Mesh)?;
            refs.scene = Some(scene.clone());
            refs.assets.push(asset.clone());
            trace_refs.extend([scene, asset]);
            if let Some(p) = &request.program {
                let id = st.put(p.as_bytes(), ArtifactKind::ActionProgram)?;
                refs.action = Some(id.clone());
                trace_refs.push(id);
            }
        }
        while s.terminal.is_none() {
            let (next, mut out) = self.step(s)?;
            s = next;
            if let Some(st) = store {
                if let Some(b) = &out.bundle {
                    let id = st.put(&sim::encode_png_rgb(&b.rgb), ArtifactKind::RgbImage)?;
                    refs.renders.push(id.clone());
                    out.log.render_ref = Some(id.clone());
                    trace_refs.push(id);
                }
                let review = st.put_json(&out.review, ArtifactKind::ReviewTrace)?;
                refs.reviews.push(review.clone());
                out.log.review_ref = Some(review.clone());
                let log = st.put_json(&out.log, ArtifactKind::DiagnosticLog)?;
                refs.logs.push(log.clone());
                trace_refs.extend([review, log]);
            }
            logs.push(out.log);
        }
        let (status, cause) = s.terminal.clone().expect("loop terminated");
        let mut result = InnerLoopResult {
            sample_id: request.sample_id.clone(),
            status,
            cause,
            final_state: s.control.scene.clone(),
            rounds_used: s.control.round,
            routes: s.routes.clone(),
            frozen: s.control.frozen.clone(),
            final_score: s.last_score,
            trace_refs,
            logs,
        };
        if let Some(st) = store {
            if let Some(b) = &s.last_bundle {
                for (bytes, kind) in geometry_artifacts(b)? {
                    let id = st.put(&bytes, kind)?;
                    refs.geometry.push(id.clone());
                    result.trace_refs.push(id);
                }
            }
            let verdict = VerdictRecord {
                sample_id: request.sample_id.clone(),
                status,
                cause: result.cause.clone(),
                rounds_used: result.rounds_used,
                final_score: result.final_score,
                frozen: result.frozen.clone(),
                final_state: result.final_state.clone(),
            };
            let id = st.put_json(&verdict, ArtifactKind::VerdictRecord)?;
            refs.verdict = Some(id.clone());
            result.trace_refs.push(id);
            st.record_sample(SampleRecord::new(request.sample_id.clone(), round_id, refs))?;
        }
        Ok(result)
    }
}

/// Mask, depth, normal, object pose and camera pose of a render.
pub fn geometry_artifacts(b: &RenderBundle) -> Result<Vec<(Vec<u8>, ArtifactKind)>, InnerError> {
    Ok(vec![
        (sim::encode_png_mask(&b.mask), ArtifactKind::Mask),
        (sim::encode_float_raster(&b.depth), ArtifactKind::DepthMap),
        (sim::encode_float_raster(&b.normal), ArtifactKind::NormalMap),
        (
            serde_json::to_vec(&b.object_pose).map_err(StoreError::from)?,
            ArtifactKind::ObjectPose,
        ),
        (
            serde_json::to_vec(&b.camera_pose).map_err(StoreError::from)?,
            ArtifactKind::CameraPose,
        ),
    ])
}

/// Stand-in for an object asset: the painter's primitive description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetDescriptor {
    pub object_id: String,
    pub primitive: String,
    pub hue: f64,
}

impl AssetDescriptor {
    pub fn for_object(scene: &SceneState) -> Self {
        AssetDescriptor {
            object_id: scene.object_id.clone(),
            primitive: "ellipsoid".into(),
            hue: scene.material.hue,
        }
    }
}

/// Final per-sample verdict; `final_state` is the canonical accepted state
/// when `status` is accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub sample_id: String,
    pub status: LoopStatus,
    pub cause: Option<String>,
    pub rounds_used: u32,
    pub final_score: Option<f64>,
    pub frozen: BTreeSet<Param>,
    pub final_state: SceneState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerLoopResult {
    pub sample_id: String,
    pub status: LoopStatus,
    pub cause: Option<String>,
    pub final_state: SceneState,
    pub rounds_used: u32,
    /// One route per review round.
    pub routes: Vec<SampleRoute>,
    pub frozen: BTreeSet<Param>,
    pub final_score: Option<f64>,
    pub trace_refs: Vec<ArtifactId>,
    pub logs: Vec<LogRecord>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::review::{AdversarialReviewer, ScriptedReviewer};
    use crate::sim::{inject_defects, true_quality, DefectSpec};

    fn request(defects: DefectSpec) -> LoopRequest {
        let scene = inject_defects(&SceneState::clean("mug", 0.0), &defects, 7).unwrap();
        LoopRequest {
            sample_id: "s1".into(),
            scene,
            locked: [Param::Camera].into_iter().collect(),
            mode: "rotation".into(),
            program: None,
        }
    }

    fn control(scene: SceneState) -> ControlState {
        ControlState {
            scene,
            limits: ActionLimits::default(),
            frozen: BTreeSet::new(),
            locked: [Param::Camera].into_iter().collect(),
            round: 1,
        }
    }

    fn signals(scene: &SceneState) -> (VlmReview, CvSignals) {
        let b = render(scene).unwrap();
        let cv = cv_review(
            &b,
            &SceneMeta {
                target_yaw_deg: scene.target_yaw_deg,
            },
            &CvConfig::default(),
        )
        .unwrap();
        (crate::review::scripted_review(scene, None), cv)
    }

    #[test]
    fn prefers_valid_suggestion() {
        let scene = SceneState::clean("mug", 0.0);
        let (mut vlm, cv) = signals(&scene);
        vlm.suggested_actions = vec!["inc_key_light".into()];
        let a = select_action(&vlm, &cv, &control(scene), &FallbackMap::default());
        assert_eq!(a.name(), "inc_key_light");
    }

    #[test]
    fn falls_back_on_tags() {
        let mut scene = SceneState::clean("mug", 0.0);
        scene.key_light = 0.6;
        let (mut vlm, cv) = signals(&scene);
        vlm.suggested_actions.clear();
        vlm.issue_tags = vec!["underexposed".into()];
        let a = select_action(&vlm, &cv, &control(scene), &FallbackMap::default());
        assert_eq!(a.name(), "inc_key_light");
        assert!(a.signed_delta() > 0.0);

        vlm.issue_tags.clear();
        vlm.diagnostics.lighting_diagnosis = "balanced".into();
        assert!(select_action(&vlm, &cv, &control(SceneState::clean("mug", 0.0)), &FallbackMap::default()).is_noop());
    }

    #[test]
    fn overexposed_falls_through_to_key_light() {
        let mut scene = SceneState::clean("mug", 0.0);
        scene.key_light = 2.2;
        scene.env_strength = 0.05;
        let (vlm, cv) = signals(&scene);
        let a = select_action(&vlm, &cv, &control(scene), &FallbackMap::default());
        assert_eq!(a.name(), "inc_key_light");
        assert!(a.signed_delta() < 0.0);
    }

    #[test]
    fn safety_skips_at_bound() {
        let mut scene = SceneState::clean("mug", 0.0);
        scene.key_light = 3.0;
        let out = safety_filter(
            &CorrectiveAction::IncKeyLight { delta: 0.1 },
            &ActionHistory::default(),
            &control(scene),
            2,
            1.0,
        );
        assert!(out.action.is_noop());
        assert_eq!(out.veto, Some(SafetyVeto::NearBound));
    }

    #[test]
    fn safety_freezes_on_flips() {
        let mut h = ActionHistory::default();
        h.push(Param::ZOffset, 0.02, 1);
        h.push(Param::ZOffset, -0.02, 2);
        let out = safety_filter(
            &CorrectiveAction::LiftObject { dz: 0.02 },
            &h,
            &control(SceneState::clean("mug", 0.0)),
            2,
            1.0,
        );
        assert!(out.action.is_noop());
        assert!(out.frozen.contains(&Param::ZOffset));
    }

    #[test]
    fn safety_blocks_camera() {
        let out = safety_filter(
            &CorrectiveAction::AdjustCamera { delta_deg: 5.0 },
            &ActionHistory::default(),
            &control(SceneState::clean("mug", 0.0)),
            2,
            1.0,
        );
        assert_eq!(out.veto, Some(SafetyVeto::Locked));
    }

    #[test]
    fn plateau_examples() {
        assert!(detect_plateau(&[0.5, 0.51, 0.512], 0.05, 2));
        assert!(!detect_plateau(&[0.5, 0.7, 0.9], 0.05, 2));
        assert!(!detect_plateau(&[0.5, 0.5], 0.05, 2));
    }

    #[test]
    fn grounding_defect_steps_lower_then_accepts() {
        let cfg = InnerConfig::default();
        let rev = ScriptedReviewer;
        let fb = FallbackMap::default();
        let lp = InnerLoop::new(&cfg, &rev, &fb);
        let req = request(DefectSpec {
            grounding_gap: 0.05,
            ..Default::default()
        });
        let (s, out) = lp.step(LoopState::new(&req, &cfg)).unwrap();
        assert_eq!(out.log.route, SampleRoute::Act);
        assert_eq!(out.log.action.unwrap().name(), "lower_object");
        assert!((s.control.scene.z_offset - 0.03).abs() < 1e-12);

        let res = lp.run(&req, None, 0).unwrap();
        assert_eq!(res.status, LoopStatus::Accepted);
        assert!(res.rounds_used <= 5);
        assert!(res.final_state.z_offset.abs() < 0.01);
        assert!(true_quality(&res.final_state).overall >= 0.95);
    }

    #[test]
    fn clean_passes_first_round() {
        let cfg = InnerConfig::default();
        let fb = FallbackMap::default();
        let lp = InnerLoop::new(&cfg, &ScriptedReviewer, &fb);
        let res = lp.run(&request(DefectSpec::default()), None, 0).unwrap();
        assert_eq!(res.status, LoopStatus::Accepted);
        assert_eq!(res.rounds_used, 1);
        assert_eq!(res.routes, vec![SampleRoute::Pass]);
    }

    #[test]
    fn render_failure_rejects() {
        let cfg = InnerConfig::default();
        let fb = FallbackMap::default();
        let lp = InnerLoop::new(&cfg, &ScriptedReviewer, &fb);
        let mut req = request(DefectSpec::default());
        req.scene.scale = 0.01;
        let res = lp.run(&req, None, 0).unwrap();
        assert_eq!(res.status, LoopStatus::Rejected);
        assert_eq!(res.cause.as_deref(), Some("render_failure"));
        assert_eq!(res.rounds_used, 1);
    }

    #[test]
    fn nonviable_asset_abandoned() {
        let cfg = InnerConfig::default();
        let fb = FallbackMap::default();
        let lp = InnerLoop::new(&cfg, &ScriptedReviewer, &fb);
        let mut req = request(DefectSpec::default());
        req.scene.asset_viable = false;
        let res = lp.run(&req, None, 0).unwrap();
        assert_eq!(res.status, LoopStatus::Abandoned);
        assert_eq!(res.rounds_used, 1);
    }

    #[test]
    fn adversarial_freezes_z_by_round_three() {
        let cfg = InnerConfig::default();
        let fb = FallbackMap::default();
        let lp = InnerLoop::new(&cfg, &AdversarialReviewer, &fb);
        let res = lp.run(&request(DefectSpec::default()), None, 0).unwrap();
        assert!(res.frozen.contains(&Param::ZOffset));
        assert!(res.rounds_used <= 3);
        assert!(matches!(res.status, LoopStatus::Plateaued | LoopStatus::RoundCapped));
        assert!(res.logs.last().unwrap().frozen.contains(&Param::ZOffset));
    }

    #[test]
    fn run_persists_one_log_per_round() {
        let dir = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(dir.path()).unwrap();
        let cfg = InnerConfig::default();
        let fb = FallbackMap::default();
        let lp = InnerLoop::new(&cfg, &ScriptedReviewer, &fb);
        let req = request(DefectSpec {
            yaw_error: 12.0,
            ..Default::default()
        });
        let res = lp.run(&req, Some(&store), 0).unwrap();
        assert_eq!(res.status, LoopStatus::Accepted);
        let rec = store.sample("s1").unwrap();
        assert_eq!(rec.refs.logs.len() as u32, res.rounds_used);
        assert_eq!(rec.refs.reviews.len() as u32, res.rounds_used);
        assert!(rec.refs.verdict.is_some());
        let trace = store.get_trace("s1").unwrap();
        assert!(!trace.open);
    }
}
