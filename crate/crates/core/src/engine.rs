//! Workspace layout, round orchestration, the simulator evaluation probe,
//! inspection and deterministic replay.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::action::Param;
use crate::config::{ConfigError, EngineConfig, ReviewerConfig, DEMO_CONFIG};
use crate::export::{
    self, audit_sample, build_splits, export_image_pairs, psnr, ssim, write_manifest, EngineReport,
    ExportError, MetricRecord, MetricSource, SampleAudit, SkippedRow, Split, ViewRender,
};
use crate::inner::{
    FallbackMap, InnerConfig, InnerError, InnerLoop, InnerLoopResult, LogRecord, LoopRequest,
    LoopStatus, VerdictRecord,
};
use crate::outer::{
    apply_gates, evaluate_round, find_weak_subsets, plan_expansion, round_verdict, Candidate,
    Direction, ExpansionPlan, GateEscalation, GateLogEntry, GuardReport, OuterError, PerAngleTable,
    PostReviewer, PostReviewerSpec, ReviewerPostGate, RoundSummary, RoundVerdict, ScriptedPostReviewer,
    WeakBin, TRAINING_BINS,
};
use crate::review::{RemoteConfig, RemoteReviewer, Reviewer, SampleRoute, ScriptedReviewer};
use crate::sim::{inject_defects, render, true_quality, DefectSpec, SceneState};
use crate::store::{ArtifactId, ArtifactKind, ArtifactStore, StoreError};

pub const CONFIG_FILE: &str = "engine.toml";
pub const ROTATION_MODE: &str = "rotation";
/// Yaws generated per object: the canonical front plus every training bin.
pub const VIEW_YAWS: [u32; 8] = [0, 45, 90, 135, 180, 225, 270, 315];

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("inner loop: {0}")]
    Inner(#[from] InnerError),
    #[error("outer loop: {0}")]
    Outer(#[from] OuterError),
    #[error("export: {0}")]
    Export(#[from] ExportError),
    #[error("workspace: {0}")]
    Workspace(String),
    #[error("unknown sample `{0}`")]
    UnknownSample(String),
    #[error("unknown round {0}")]
    UnknownRound(u32),
    #[error("interrupted: round {0} left open")]
    Interrupted(u32),
    #[error("replay mismatch for `{sample_id}`: {detail}")]
    ReplayMismatch { sample_id: String, detail: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Workspace

/// `engine.toml`, `store/`, `reports/`, `exports/` under one root.
pub struct Workspace {
    root: PathBuf,
    store: ArtifactStore,
}

impl Workspace {
    /// Create the skeleton, writing the demo config if none exists.
    pub fn init(root: &Path) -> Result<Self, EngineError> {
        std::fs::create_dir_all(root)?;
        for d in ["reports", "exports"] {
            std::fs::create_dir_all(root.join(d))?;
        }
        let cfg = root.join(CONFIG_FILE);
        if !cfg.exists() {
            std::fs::write(&cfg, DEMO_CONFIG)?;
        }
        let store = ArtifactStore::open(root.join("store"))?;
        Ok(Workspace {
            root: root.to_path_buf(),
            store,
        })
    }

    pub fn open(root: &Path) -> Result<Self, EngineError> {
        if !root.join("store").is_dir() {
            return Err(EngineError::Workspace(format!(
                "{} is not an initialized workspace",
                root.display()
            )));
        }
        for d in ["reports", "exports"] {
            std::fs::create_dir_all(root.join(d))?;
        }
        let store = ArtifactStore::open(root.join("store"))?;
        Ok(Workspace {
            root: root.to_path_buf(),
            store,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn store(&self) -> &ArtifactStore {
        &self.store
    }

    /// Resolve a user path against the workspace root.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn report_path(&self, round_id: u32) -> PathBuf {
        self.root.join("reports").join(format!("round-{round_id:04}.json"))
    }

    pub fn grid_path(&self, round_id: u32) -> PathBuf {
        self.root.join("reports").join(format!("round-{round_id:04}.grid.txt"))
    }

    pub fn export_dir(&self, round_id: u32) -> PathBuf {
        self.root.join("exports").join(format!("round-{round_id:04}"))
    }

    pub fn load_report(&self, round_id: u32) -> Result<RoundReport, EngineError> {
        let p = self.report_path(round_id);
        if !p.is_file() {
            return Err(EngineError::UnknownRound(round_id));
        }
        Ok(serde_json::from_slice(&std::fs::read(p)?)?)
    }

    /// Reports of every closed round, in round order.
    pub fn reports(&self) -> Result<Vec<RoundReport>, EngineError> {
        self.store
            .rounds()
            .into_iter()
            .filter(|r| r.is_closed())
            .map(|r| self.load_report(r.round_id))
            .collect()
    }

    pub fn next_round_id(&self) -> u32 {
        self.store.rounds().iter().map(|r| r.round_id).max().unwrap_or(0) + 1
    }
}

// ---------------------------------------------------------------------------
// Requests

/// One inner-loop request of a round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRequest {
    pub object: String,
    pub yaw: u32,
    pub attempt: u32,
}

impl RoundRequest {
    pub fn sample_id(&self, round_id: u32) -> String {
        format!("r{round_id:04}-{}-y{:03}-a{}", self.object, self.yaw, self.attempt)
    }

    pub fn seed(&self, base: u64, round_id: u32) -> u64 {
        let digest = Sha256::digest(
            format!("{base}/{round_id}/{}/{}/{}", self.object, self.yaw, self.attempt).as_bytes(),
        );
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// Camera is locked for rotation samples.
pub fn rotation_locks() -> BTreeSet<Param> {
    [Param::Camera].into_iter().collect()
}

/// Draw the defects of one request from the simulator settings.
pub fn draw_scene(cfg: &EngineConfig, req: &RoundRequest, round_id: u32) -> Result<SceneState, EngineError> {
    let s = &cfg.simulator;
    let seed = req.seed(cfg.seed, round_id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = DefectSpec::default();
    let magnitude = |rng: &mut ChaCha8Rng, max: f64| {
        let m = rng.random_range(0.3..=1.0) * max;
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    };
    if rng.random_bool(s.defect_rate) {
        let n = if rng.random_bool(0.3) { 2 } else { 1 };
        let mut kinds = vec![0u8, 1, 2, 3];
        for _ in 0..n {
            let k = kinds.remove(rng.random_range(0..kinds.len()));
            match k {
                0 => d.yaw_error = magnitude(&mut rng, s.max_yaw_error_deg),
                1 => {
                    let z = magnitude(&mut rng, s.max_grounding_m);
                    if z > 0.0 {
                        d.grounding_gap = z;
                    } else {
                        d.penetration = -z;
                    }
                }
                2 => d.exposure_error = magnitude(&mut rng, s.max_exposure_error),
                _ => d.scale_error = 1.0 + magnitude(&mut rng, s.max_scale_error),
            }
        }
    }
    if rng.random_bool(s.blur_rate) {
        d.blur = rng.random_range(0.5..=1.0) * s.max_blur;
    }
    let mut scene = inject_defects(&SceneState::clean(&req.object, req.yaw as f64), &d, seed)
        .map_err(|e| EngineError::Workspace(format!("defect injection: {e}")))?;
    scene.asset_viable = !rng.random_bool(s.nonviable_rate);
    Ok(scene)
}

pub fn loop_request(cfg: &EngineConfig, req: &RoundRequest, round_id: u32) -> Result<LoopRequest, EngineError> {
    Ok(LoopRequest {
        sample_id: req.sample_id(round_id),
        scene: draw_scene(cfg, req, round_id)?,
        locked: rotation_locks(),
        mode: ROTATION_MODE.into(),
        program: Some(format!("rotate({}, yaw={})", req.object, req.yaw)),
    })
}

pub fn build_reviewer(cfg: &ReviewerConfig) -> Box<dyn Reviewer> {
    match cfg {
        ReviewerConfig::Scripted => Box::new(ScriptedReviewer),
        ReviewerConfig::Remote(r) => Box::new(RemoteReviewer::new(r.clone())),
    }
}

pub fn build_post_reviewer(spec: &PostReviewerSpec, inner: &InnerConfig) -> Box<dyn PostReviewer> {
    match spec {
        PostReviewerSpec::Scripted {
            max_yaw_error_deg,
            min_quality,
        } => Box::new(ScriptedPostReviewer {
            max_yaw_error_deg: *max_yaw_error_deg,
            min_quality: *min_quality,
        }),
        PostReviewerSpec::Remote { endpoint } => Box::new(ReviewerPostGate {
            reviewer: RemoteReviewer::new(RemoteConfig {
                endpoint: endpoint.clone(),
                timeout_ms: 30_000,
                retries: 2,
                parallelism: 1,
            }),
            pass: inner.thresholds.pass,
        }),
    }
}

// ---------------------------------------------------------------------------
// Evaluation probe

/// Bin a generated yaw falls in; the canonical front fills the 360 slot.
pub fn eval_bin(yaw: u32) -> u32 {
    if yaw % 360 == 0 {
        360
    } else {
        yaw
    }
}

/// PSNR and SSIM of a final state against the clean render of its target
/// view, plus its oracle quality. Unrenderable states yield no records.
pub fn probe_sample(
    sample_id: &str,
    object: &str,
    yaw: u32,
    state: &SceneState,
) -> Result<Vec<MetricRecord>, EngineError> {
    let reference = render(&SceneState::clean(object, yaw as f64))
        .map_err(|e| EngineError::Workspace(format!("probe reference render: {e}")))?;
    let Ok(got) = render(state) else {
        return Ok(Vec::new());
    };
    let bin = eval_bin(yaw);
    let rec = |metric: &str, value: f64| MetricRecord {
        metric: metric.into(),
        direction: Direction::Higher,
        value,
        angle_bin: bin,
        sample_id: sample_id.into(),
        source: MetricSource::Computed,
    };
    Ok(vec![
        rec("psnr", psnr(&reference.rgb, &got.rgb)?),
        rec("ssim", ssim(&reference.rgb, &got.rgb)?),
        rec("quality", true_quality(state).overall),
    ])
}

// ---------------------------------------------------------------------------
// Rounds

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEntry {
    pub sample_id: String,
    pub object: String,
    pub yaw: u32,
    pub attempts: u32,
    pub status: LoopStatus,
    pub score: f64,
    pub render: Option<ArtifactId>,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round_id: u32,
    pub stage: String,
    pub chain: (bool, bool, bool),
    pub config_ref: ArtifactId,
    pub requests: usize,
    pub weak_bins: Vec<WeakBin>,
    pub expansion: ExpansionPlan,
    pub statuses: BTreeMap<String, usize>,
    pub candidates: Vec<CandidateEntry>,
    pub accepted: usize,
    pub gate_log_ref: ArtifactId,
    pub table: PerAngleTable,
    pub summary: RoundSummary,
    pub verdict: RoundVerdict,
    pub guards: GuardReport,
    pub manifest_rows: BTreeMap<Split, usize>,
    pub manifest_refs: BTreeMap<Split, ArtifactId>,
    pub skipped: Vec<SkippedRow>,
    pub engine: EngineReport,
    pub sample_ids: Vec<String>,
}

/// Kinds every inner-loop sample must carry to count as complete.
pub fn required_sample_kinds() -> BTreeSet<ArtifactKind> {
    use ArtifactKind::*;
    [RgbImage, Mask, DepthMap, NormalMap, ObjectPose, ReviewTrace, VerdictRecord, DiagnosticLog]
        .into_iter()
        .collect()
}

/// Best attempt first: accepted beats not accepted, then higher score,
/// then the earlier attempt.
fn better(a: &(RoundRequest, InnerLoopResult), b: &(RoundRequest, InnerLoopResult)) -> bool {
    let key = |x: &(RoundRequest, InnerLoopResult)| {
        (
            x.1.status == LoopStatus::Accepted,
            x.1.final_score.unwrap_or(0.0),
        )
    };
    let (ka, kb) = (key(a), key(b));
    ka.0 > kb.0 || (ka.0 == kb.0 && (ka.1 > kb.1 || (ka.1 == kb.1 && a.0.attempt < b.0.attempt)))
}

fn recoverable(r: &InnerLoopResult) -> bool {
    !matches!(r.status, LoopStatus::Abandoned) && r.cause.as_deref() != Some("render_failure")
}

/// Run one round end to end. Stops between inner loops when `stop` is set,
/// leaving the round open.
pub fn run_round(
    ws: &Workspace,
    cfg: &EngineConfig,
    round_id: Option<u32>,
    stop: &AtomicBool,
) -> Result<RoundReport, EngineError> {
    cfg.validate()?;
    let store = ws.store();
    let round_id = round_id.unwrap_or_else(|| ws.next_round_id());
    let rc = cfg.round_config(round_id).clone();
    rc.validate()?;

    let config_ref = store.put_json(cfg, ArtifactKind::DiagnosticLog)?;
    store.open_round(round_id, config_ref.clone())?;

    let catalog = cfg.catalog();
    let previous = store
        .rounds()
        .into_iter()
        .filter(|r| r.round_id < round_id && r.is_closed())
        .next_back()
        .map(|r| ws.load_report(r.round_id))
        .transpose()?;

    let mut requests: Vec<RoundRequest> = catalog
        .iter()
        .flat_map(|o| {
            VIEW_YAWS.iter().map(move |&yaw| RoundRequest {
                object: o.clone(),
                yaw,
                attempt: 0,
            })
        })
        .collect();
    let (weak_bins, expansion) = match (&previous, rc.feedback_enabled) {
        (Some(prev), true) if !prev.table.is_empty() => {
            let weak = find_weak_subsets(&prev.table, &cfg.weak)?;
            let plan = plan_expansion(&weak, rc.expansion_budget, &catalog);
            (weak, plan)
        }
        _ => (Vec::new(), ExpansionPlan::default()),
    };
    for r in &expansion.requests {
        for attempt in 1..=r.count {
            requests.push(RoundRequest {
                object: r.object.clone(),
                yaw: r.bin,
                attempt,
            });
        }
    }

    let reviewer = build_reviewer(&cfg.reviewer);
    let fallback = FallbackMap::default();
    let lp = InnerLoop::new(&cfg.inner, reviewer.as_ref(), &fallback);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .map_err(|e| EngineError::Workspace(format!("thread pool: {e}")))?;
    let results: Vec<Option<Result<(RoundRequest, InnerLoopResult), EngineError>>> = pool.install(|| {
        requests
            .par_iter()
            .map(|req| {
                if stop.load(Ordering::SeqCst) {
                    return None;
                }
                Some((|| {
                    let lr = loop_request(cfg, req, round_id)?;
                    Ok((req.clone(), lp.run(&lr, Some(store), round_id)?))
                })())
            })
            .collect()
    });
    if stop.load(Ordering::SeqCst) || results.iter().any(Option::is_none) {
        return Err(EngineError::Interrupted(round_id));
    }
    let results: Vec<(RoundRequest, InnerLoopResult)> =
        results.into_iter().flatten().collect::<Result<_, _>>()?;

    // Best attempt per (object, yaw).
    let mut best: BTreeMap<(String, u32), &(RoundRequest, InnerLoopResult)> = BTreeMap::new();
    for r in &results {
        let key = (r.0.object.clone(), r.0.yaw);
        match best.get(&key) {
            Some(b) if !better(r, b) => {}
            _ => {
                best.insert(key, r);
            }
        }
    }
    let candidates: Vec<Candidate> = best
        .values()
        .map(|(_, res)| Candidate {
            sample_id: res.sample_id.clone(),
            score: res.final_score.unwrap_or(0.0),
            state: Some(res.final_state.clone()),
            route: res.routes.last().copied(),
            recoverable: recoverable(res),
        })
        .collect();
    let post = build_post_reviewer(&rc.dual_gate.reviewer, &cfg.inner);
    let gates = apply_gates(&candidates, &rc, post.as_ref());
    let gate_log_ref = store.put_json(&gates.log, ArtifactKind::DiagnosticLog)?;
    let kept: BTreeSet<&str> = gates.accepted.iter().map(|c| c.sample_id.as_str()).collect();

    let entries: Vec<CandidateEntry> = best
        .values()
        .map(|(req, res)| -> Result<CandidateEntry, EngineError> {
            Ok(CandidateEntry {
                sample_id: res.sample_id.clone(),
                object: req.object.clone(),
                yaw: req.yaw,
                attempts: results
                    .iter()
                    .filter(|(q, _)| q.object == req.object && q.yaw == req.yaw)
                    .count() as u32,
                status: res.status,
                score: res.final_score.unwrap_or(0.0),
                render: store.sample(&res.sample_id)?.refs.renders.last().cloned(),
                accepted: kept.contains(res.sample_id.as_str()),
            })
        })
        .collect::<Result<_, _>>()?;

    // Evaluation probe over the exported set.
    let accepted_results: Vec<&(RoundRequest, InnerLoopResult)> = best
        .values()
        .copied()
        .filter(|(_, res)| kept.contains(res.sample_id.as_str()))
        .collect();
    let metrics: Vec<MetricRecord> = pool.install(|| {
        accepted_results
            .par_iter()
            .map(|(req, res)| probe_sample(&res.sample_id, &req.object, req.yaw, &res.final_state))
            .collect::<Result<Vec<_>, _>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    let eval: Vec<_> = metrics.iter().map(MetricRecord::eval).collect();
    let table = evaluate_round(&eval)?;
    let summary = RoundSummary::from_table(&table);

    // Pair export.
    let splits = build_splits(&catalog, &cfg.split)?;
    let views: Vec<ViewRender> = entries
        .iter()
        .filter(|e| e.accepted)
        .filter_map(|e| {
            Some(ViewRender {
                object_id: e.object.clone(),
                object_name: format!("{} object", e.object),
                rotation: e.yaw,
                image: e.render.as_ref()?.to_string(),
            })
        })
        .collect();
    let pairs = export_image_pairs(&views, &splits, &cfg.split, &cfg.export);
    let dir = ws.export_dir(round_id);
    let mut manifest_rows = BTreeMap::new();
    let mut manifest_refs = BTreeMap::new();
    for (split, rows) in &pairs.manifests {
        let path = dir.join(format!("{split}.jsonl"));
        write_manifest(&path, *split, rows)?;
        manifest_refs.insert(*split, store.put(&std::fs::read(&path)?, ArtifactKind::ExportManifest)?);
        manifest_rows.insert(*split, rows.len());
    }

    // Engine report over every sample of the round.
    let logs: Vec<LogRecord> = results.iter().flat_map(|(_, r)| r.logs.clone()).collect();
    let required = required_sample_kinds();
    let audits: Vec<SampleAudit> = pool.install(|| {
        results
            .par_iter()
            .map(|(_, r)| audit_sample(store, &r.sample_id, &required))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let engine = export::engine_report(&logs, &audits);

    let escalation = (!candidates.is_empty() && gates.accepted.is_empty()).then(|| {
        let failed = gates.rejected(&candidates);
        GateEscalation {
            failures: failed.len(),
            recoverable: failed.iter().filter(|c| c.recoverable).count(),
        }
    });
    let (verdict, guards) = round_verdict(
        Some(&summary),
        previous.as_ref().map(|p| &p.summary),
        &rc.guards,
        escalation,
    )?;

    let mut statuses = BTreeMap::new();
    for (_, r) in &results {
        *statuses.entry(r.status.as_str().to_string()).or_insert(0) += 1;
    }
    let sample_ids: Vec<String> = results.iter().map(|(_, r)| r.sample_id.clone()).collect();
    let report = RoundReport {
        round_id,
        stage: rc.stage_name(),
        chain: rc.chain(),
        config_ref,
        requests: requests.len(),
        weak_bins,
        expansion,
        statuses,
        candidates: entries,
        accepted: gates.accepted.len(),
        gate_log_ref,
        table,
        summary,
        verdict,
        guards,
        manifest_rows,
        manifest_refs,
        skipped: pairs.skipped,
        engine,
        sample_ids: sample_ids.clone(),
    };
    let report_ref = store.put_json(&report, ArtifactKind::ExportManifest)?;
    std::fs::write(ws.report_path(round_id), serde_json::to_vec_pretty(&report)?)?;
    std::fs::write(ws.grid_path(round_id), report.table.to_grid())?;
    store.close_round(round_id, sample_ids, Some(report_ref), verdict)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Inspection and replay

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleInspection {
    pub sample_id: String,
    pub round_id: u32,
    pub verdict: Option<VerdictRecord>,
    pub routes: Vec<SampleRoute>,
    pub logs: Vec<LogRecord>,
    pub trace: Vec<ArtifactId>,
}

pub fn inspect(ws: &Workspace, sample_id: &str) -> Result<SampleInspection, EngineError> {
    let store = ws.store();
    let rec = store.sample(sample_id).map_err(|e| match e {
        StoreError::UnknownSample(_) => EngineError::UnknownSample(sample_id.to_string()),
        other => other.into(),
    })?;
    let verdict = rec.refs.verdict.as_ref().map(|v| store.get_json(v)).transpose()?;
    let mut logs: Vec<LogRecord> = rec
        .refs
        .logs
        .iter()
        .map(|id| store.get_json(id))
        .collect::<Result<_, _>>()?;
    logs.sort_by_key(|l| l.round);
    let trace = store.get_trace(sample_id)?.ids().into_iter().collect();
    Ok(SampleInspection {
        sample_id: sample_id.to_string(),
        round_id: rec.round_id,
        verdict,
        routes: logs.iter().map(|l| l.route).collect(),
        logs,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayOutcome {
    pub sample_id: String,
    pub routes: Vec<SampleRoute>,
    pub status: LoopStatus,
}

/// Re-run a logged inner loop from its stored scene and round config, and
/// require the same route sequence and final status.
pub fn replay(ws: &Workspace, sample_id: &str) -> Result<ReplayOutcome, EngineError> {
    let store = ws.store();
    let seen = inspect(ws, sample_id)?;
    let rec = store.sample(sample_id)?;
    let round = store
        .round(rec.round_id)
        .ok_or(EngineError::UnknownRound(rec.round_id))?;
    let cfg: EngineConfig = store.get_json(&round.config_ref)?;
    if cfg.reviewer != ReviewerConfig::Scripted {
        return Err(EngineError::Workspace(
            "replay requires the scripted reviewer".into(),
        ));
    }
    let scene_ref = rec
        .refs
        .scene
        .as_ref()
        .ok_or_else(|| EngineError::Workspace(format!("{sample_id} has no scene artifact")))?;
    let scene: SceneState = store.get_json(scene_ref)?;
    let program = rec
        .refs
        .action
        .as_ref()
        .map(|id| store.get(id).map(|b| String::from_utf8_lossy(&b).into_owned()))
        .transpose()?;
    let request = LoopRequest {
        sample_id: sample_id.to_string(),
        scene,
        locked: rotation_locks(),
        mode: ROTATION_MODE.into(),
        program,
    };
    let fallback = FallbackMap::default();
    let reviewer = ScriptedReviewer;
    let result = InnerLoop::new(&cfg.inner, &reviewer, &fallback).run(&request, None, rec.round_id)?;
    let logged = seen.routes.clone();
    if logged != result.routes {
        return Err(EngineError::ReplayMismatch {
            sample_id: sample_id.to_string(),
            detail: format!("routes {:?} vs logged {:?}", result.routes, logged),
        });
    }
    if let Some(v) = &seen.verdict {
        if v.status != result.status {
            return Err(EngineError::ReplayMismatch {
                sample_id: sample_id.to_string(),
                detail: format!("status {} vs logged {}", result.status.as_str(), v.status.as_str()),
            });
        }
    }
    Ok(ReplayOutcome {
        sample_id: sample_id.to_string(),
        routes: result.routes,
        status: result.status,
    })
}

/// Pair export of a closed round, optionally limited to one split.
pub fn export_pairs(
    ws: &Workspace,
    cfg: &EngineConfig,
    round_id: u32,
    split: Option<Split>,
) -> Result<BTreeMap<Split, PathBuf>, EngineError> {
    let report = ws.load_report(round_id)?;
    let splits = build_splits(&cfg.catalog(), &cfg.split)?;
    let views: Vec<ViewRender> = report
        .candidates
        .iter()
        .filter(|e| e.accepted)
        .filter_map(|e| {
            Some(ViewRender {
                object_id: e.object.clone(),
                object_name: format!("{} object", e.object),
                rotation: e.yaw,
                image: e.render.as_ref()?.to_string(),
            })
        })
        .collect();
    let pairs = export_image_pairs(&views, &splits, &cfg.split, &cfg.export);
    let dir = ws.export_dir(round_id);
    let mut out = BTreeMap::new();
    for (s, rows) in &pairs.manifests {
        if split.is_some_and(|want| want != *s) {
            continue;
        }
        let path = dir.join(format!("{s}.jsonl"));
        write_manifest(&path, *s, rows)?;
        out.insert(*s, path);
    }
    Ok(out)
}

/// Samples of a closed round offered to the non-pair exports, grouped by
/// (object, yaw) request.
pub fn export_samples(ws: &Workspace, round_id: u32) -> Result<Vec<export::ExportSample>, EngineError> {
    let report = ws.load_report(round_id)?;
    let accepted: BTreeSet<&str> = report
        .candidates
        .iter()
        .filter(|c| c.accepted)
        .map(|c| c.sample_id.as_str())
        .collect();
    let store = ws.store();
    let mut out = Vec::new();
    for id in &report.sample_ids {
        let verdict: Option<VerdictRecord> = store
            .sample(id)?
            .refs
            .verdict
            .as_ref()
            .map(|v| store.get_json(v))
            .transpose()?;
        let group = verdict
            .as_ref()
            .map(|v| format!("{}@{}", v.final_state.object_id, v.final_state.target_yaw_deg))
            .unwrap_or_default();
        out.push(export::ExportSample {
            sample_id: id.clone(),
            group,
            accepted: accepted.contains(id.as_str()),
        });
    }
    Ok(out)
}

/// Dense rotation samples for the video and trajectory exports, one per
/// accepted canonical front of the round.
pub fn dense_samples(
    ws: &Workspace,
    round_id: u32,
    step_deg: f64,
    fps: f64,
) -> Result<Vec<export::ExportSample>, EngineError> {
    let report = ws.load_report(round_id)?;
    let store = ws.store();
    let mut out = Vec::new();
    for c in report.candidates.iter().filter(|c| c.accepted && c.yaw == 0) {
        let id = format!("{}-dense", c.sample_id);
        if store.sample(&id).is_err() {
            let verdict: VerdictRecord = match &store.sample(&c.sample_id)?.refs.verdict {
                Some(v) => store.get_json(v)?,
                None => continue,
            };
            let program = crate::dsl::parse_program(&format!("rotate({}, yaw=315)", c.object))
                .map_err(|e| EngineError::Workspace(e.to_string()))?;
            export::record_dense_sample(store, &id, round_id, &verdict.final_state, &program, step_deg, fps)?;
        }
        out.push(export::ExportSample {
            sample_id: id,
            group: c.object.clone(),
            accepted: true,
        });
    }
    Ok(out)
}

/// Whether expansion may target a bin.
pub fn targetable(bin: u32) -> bool {
    TRAINING_BINS.contains(&bin)
}

/// The gate log of a round.
pub fn gate_log(ws: &Workspace, round_id: u32) -> Result<Vec<GateLogEntry>, EngineError> {
    let report = ws.load_report(round_id)?;
    Ok(ws.store().get_json(&report.gate_log_ref)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> EngineConfig {
        let mut cfg = EngineConfig::demo();
        cfg.catalog.objects = 6;
        cfg.split.n_train_objects = 4;
        cfg.split.n_val_objects = 1;
        cfg.split.n_test_objects = 1;
        for rc in &mut cfg.schedule {
            rc.expansion_budget = 6;
        }
        cfg
    }

    #[test]
    fn requests_are_deterministic() {
        let cfg = small_cfg();
        let req = RoundRequest {
            object: "obj001".into(),
            yaw: 90,
            attempt: 0,
        };
        assert_eq!(draw_scene(&cfg, &req, 1).unwrap(), draw_scene(&cfg, &req, 1).unwrap());
        assert_eq!(req.sample_id(3), "r0003-obj001-y090-a0");
    }

    #[test]
    fn two_rounds_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::init(dir.path()).unwrap();
        let cfg = small_cfg();
        let stop = AtomicBool::new(false);
        let r1 = run_round(&ws, &cfg, None, &stop).unwrap();
        assert_eq!(r1.round_id, 1);
        assert_eq!(r1.requests, 48);
        assert_eq!(r1.verdict, RoundVerdict::Continue);
        assert_eq!(r1.stage, "base");
        let r2 = run_round(&ws, &cfg, None, &stop).unwrap();
        assert_eq!(r2.round_id, 2);
        assert_eq!(r2.requests, 48 + r2.expansion.total() as usize);
        assert!(r2.expansion.requests.iter().all(|r| targetable(r.bin)));
        assert_eq!(ws.reports().unwrap().len(), 2);
        let cfg_back: EngineConfig = ws.store().get_json(&r2.config_ref).unwrap();
        assert_eq!(cfg_back, cfg);

        for id in r1.sample_ids.iter().step_by(7) {
            replay(&ws, id).unwrap();
        }
        assert!(matches!(inspect(&ws, "nope"), Err(EngineError::UnknownSample(_))));

        let stopped = AtomicBool::new(true);
        assert!(matches!(run_round(&ws, &cfg, None, &stopped), Err(EngineError::Interrupted(3))));
        assert!(!ws.store().round(3).unwrap().is_closed());
    }
}
