//! Round-level loop: per-angle evaluation, weak-bin targeting, the
//! inner/dual gate chain, and regression-guarded round verdicts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::review::{ReviewError, Reviewer, SampleRoute, VlmRequest};
use crate::sim::{render, true_quality, SceneState};

/// The eight evaluation slots; 360 is the front-equivalent full turn.
pub const ANGLE_BINS: [u32; 8] = [45, 90, 135, 180, 225, 270, 315, 360];
/// Bins a training pair may target.
pub const TRAINING_BINS: [u32; 7] = [45, 90, 135, 180, 225, 270, 315];

#[derive(Debug, Error)]
pub enum OuterError {
    #[error("unknown angle bin {0}")]
    UnknownBin(u32),
    #[error("metric `{0}` absent")]
    MetricAbsent(String),
    #[error("malformed guard: {0}")]
    MalformedGuard(String),
    #[error("gate chain (F={0}, I={1}, D={2}) is not one of the four defined stages")]
    UndefinedChain(bool, bool, bool),
    #[error(transparent)]
    Review(#[from] ReviewError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Higher,
    Lower,
}

impl Direction {
    /// Value oriented so that larger is always better.
    pub fn orient(self, v: f64) -> f64 {
        match self {
            Direction::Higher => v,
            Direction::Lower => -v,
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "higher" | "higher_is_better" | "up" => Ok(Direction::Higher),
            "lower" | "lower_is_better" | "down" => Ok(Direction::Lower),
            other => Err(format!("unknown direction `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundVerdict {
    #[serde(rename = "continue")]
    Continue,
    Inspect,
    Regenerate,
    Reject,
    StopOrRevert,
    NoSignal,
}

impl RoundVerdict {
    pub fn as_str(self) -> &'static str {
        match self {
            RoundVerdict::Continue => "continue",
            RoundVerdict::Inspect => "inspect",
            RoundVerdict::Regenerate => "regenerate",
            RoundVerdict::Reject => "reject",
            RoundVerdict::StopOrRevert => "stop_or_revert",
            RoundVerdict::NoSignal => "no_signal",
        }
    }
}

impl fmt::Display for RoundVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

// ---------------------------------------------------------------------------
// Round configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerGate {
    pub enabled: bool,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PostReviewerSpec {
    /// Oracle-backed post reviewer.
    Scripted {
        max_yaw_error_deg: f64,
        min_quality: f64,
    },
    Remote {
        endpoint: String,
    },
}

impl Default for PostReviewerSpec {
    fn default() -> Self {
        PostReviewerSpec::Scripted {
            max_yaw_error_deg: 5.0,
            min_quality: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualGate {
    pub enabled: bool,
    #[serde(default)]
    pub reviewer: PostReviewerSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Guard {
    pub metric: String,
    pub direction: Direction,
    /// Relative tolerance on the previous value.
    #[serde(default = "default_guard_tolerance")]
    pub tolerance: f64,
}

fn default_guard_tolerance() -> f64 {
    0.005
}

impl Guard {
    pub fn validate(&self) -> Result<(), OuterError> {
        if self.metric.trim().is_empty() {
            return Err(OuterError::MalformedGuard("empty metric name".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(OuterError::MalformedGuard(format!(
                "{}: tolerance {} must be non-negative",
                self.metric, self.tolerance
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundConfig {
    pub feedback_enabled: bool,
    pub inner_gate: InnerGate,
    pub dual_gate: DualGate,
    pub expansion_budget: u32,
    #[serde(default)]
    pub guards: Vec<Guard>,
    /// Accept (F, I, D) tuples outside the four-stage chain.
    #[serde(default)]
    pub allow_undefined_chain: bool,
}

impl RoundConfig {
    pub const CHAIN: [(bool, bool, bool); 4] = [
        (false, false, false),
        (true, false, false),
        (true, true, false),
        (true, true, true),
    ];

    pub fn chain(&self) -> (bool, bool, bool) {
        (
            self.feedback_enabled,
            self.inner_gate.enabled,
            self.dual_gate.enabled,
        )
    }

    /// Position in the four-stage chain, if defined.
    pub fn stage(&self) -> Option<usize> {
        Self::CHAIN.iter().position(|c| *c == self.chain())
    }

    pub fn stage_name(&self) -> String {
        match self.stage() {
            Some(0) => "base".into(),
            Some(1) => "+feedback".into(),
            Some(2) => "+inner_gate".into(),
            Some(3) => "+dual_gate".into(),
            _ => {
                let (f, i, d) = self.chain();
                format!("custom(F={},I={},D={})", f as u8, i as u8, d as u8)
            }
        }
    }

    pub fn validate(&self) -> Result<(), OuterError> {
        let (f, i, d) = self.chain();
        if self.stage().is_none() && !self.allow_undefined_chain {
            return Err(OuterError::UndefinedChain(f, i, d));
        }
        for g in &self.guards {
            g.validate()?;
        }
        Ok(())
    }

    pub fn stage_config(stage: usize, threshold: f64, budget: u32) -> Self {
        let (f, i, d) = Self::CHAIN[stage.min(3)];
        RoundConfig {
            feedback_enabled: f,
            inner_gate: InnerGate {
                enabled: i,
                threshold,
            },
            dual_gate: DualGate {
                enabled: d,
                reviewer: PostReviewerSpec::default(),
            },
            expansion_budget: budget,
            guards: vec![],
            allow_undefined_chain: false,
        }
    }
}

// ---------------------------------------------------------------------------
// Per-angle evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub angle_bin: u32,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub mean: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerAngleTable {
    /// Every one of the eight bins is present; empty maps mean no records.
    pub bins: BTreeMap<u32, BTreeMap<String, MetricCell>>,
}

impl Default for PerAngleTable {
    fn default() -> Self {
        PerAngleTable {
            bins: ANGLE_BINS.iter().map(|b| (*b, BTreeMap::new())).collect(),
        }
    }
}

impl PerAngleTable {
    pub fn cell(&self, bin: u32, metric: &str) -> Option<MetricCell> {
        self.bins.get(&bin)?.get(metric).copied()
    }

    pub fn mean(&self, bin: u32, metric: &str) -> Option<f64> {
        self.cell(bin, metric).map(|c| c.mean)
    }

    pub fn count(&self, bin: u32, metric: &str) -> usize {
        self.cell(bin, metric).map_or(0, |c| c.count)
    }

    pub fn metrics(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .bins
            .values()
            .flat_map(|m| m.keys().cloned())
            .collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn is_empty(&self) -> bool {
        self.bins.values().all(|m| m.is_empty())
    }

    /// Count-weighted mean of a metric over all bins.
    pub fn overall(&self, metric: &str) -> Option<f64> {
        let (sum, n) = self
            .bins
            .values()
            .filter_map(|m| m.get(metric))
            .fold((0.0, 0usize), |(s, n), c| (s + c.mean * c.count as f64, n + c.count));
        (n > 0).then(|| sum / n as f64)
    }

    /// Plain-text grid: one row per metric, one column per bin.
    pub fn to_grid(&self) -> String {
        let mut out = format!("{:<16}", "metric");
        for b in ANGLE_BINS {
            out.push_str(&format!("{:>10}", b));
        }
        out.push('\n');
        for m in self.metrics() {
            out.push_str(&format!("{:<16}", m));
            for b in ANGLE_BINS {
                match self.mean(b, &m) {
                    Some(v) => out.push_str(&format!("{:>10.4}", v)),
                    None => out.push_str(&format!("{:>10}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn evaluate_round(records: &[EvalRecord]) -> Result<PerAngleTable, OuterError> {
    let mut sums: BTreeMap<(u32, String), (f64, usize)> = BTreeMap::new();
    for r in records {
        if !ANGLE_BINS.contains(&r.angle_bin) {
            return Err(OuterError::UnknownBin(r.angle_bin));
        }
        let e = sums.entry((r.angle_bin, r.metric.clone())).or_insert((0.0, 0));
        e.0 += r.value;
        e.1 += 1;
    }
    let mut table = PerAngleTable::default();
    for ((bin, metric), (sum, count)) in sums {
        table.bins.get_mut(&bin).expect("known bin").insert(
            metric,
            MetricCell {
                mean: sum / count as f64,
                count,
            },
        );
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum WeakMode {
    BelowMeanDelta { delta: f64 },
    BottomK { k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakPolicy {
    #[serde(flatten)]
    pub mode: WeakMode,
    pub metric: String,
    pub direction: Direction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakBin {
    pub bin: u32,
    /// Direction-adjusted distance below the mean of bin means.
    pub shortfall: f64,
}

/// Weak bins ordered by shortfall (largest first), ties by ascending label.
pub fn find_weak_subsets(
    table: &PerAngleTable,
    policy: &WeakPolicy,
) -> Result<Vec<WeakBin>, OuterError> {
    let scored: Vec<(u32, f64)> = ANGLE_BINS
        .iter()
        .filter_map(|&b| table.mean(b, &policy.metric).map(|m| (b, policy.direction.orient(m))))
        .collect();
    if scored.is_empty() {
        return Err(OuterError::MetricAbsent(policy.metric.clone()));
    }
    let global = scored.iter().map(|(_, v)| v).sum::<f64>() / scored.len() as f64;
    let mut weak: Vec<WeakBin> = match policy.mode {
        WeakMode::BelowMeanDelta { delta } => scored
            .iter()
            .filter(|(_, v)| global - v > delta)
            .map(|&(bin, v)| WeakBin {
                bin,
                shortfall: global - v,
            })
            .collect(),
        WeakMode::BottomK { k } => {
            let mut sorted = scored.clone();
            sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            sorted
                .into_iter()
                .take(k)
                .map(|(bin, v)| WeakBin {
                    bin,
                    shortfall: global - v,
                })
                .collect()
        }
    };
    weak.sort_by(|a, b| b.shortfall.total_cmp(&a.shortfall).then(a.bin.cmp(&b.bin)));
    Ok(weak)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionRequest {
    pub object: String,
    pub bin: u32,
    pub count: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionPlan {
    pub requests: Vec<ExpansionRequest>,
}

impl ExpansionPlan {
    pub fn total(&self) -> u32 {
        self.requests.iter().map(|r| r.count).sum()
    }

    pub fn per_bin(&self) -> BTreeMap<u32, u32> {
        let mut out = BTreeMap::new();
        for r in &self.requests {
            *out.entry(r.bin).or_insert(0) += r.count;
        }
        out
    }
}

/// Spread `budget` over the targetable weak bins one unit at a time,
/// largest shortfall first, cycling objects within each bin.
pub fn plan_expansion(weak: &[WeakBin], budget: u32, catalog: &[String]) -> ExpansionPlan {
    let mut bins: Vec<WeakBin> = weak.iter().copied().filter(|w| w.bin != 360).collect();
    bins.sort_by(|a, b| b.shortfall.total_cmp(&a.shortfall).then(a.bin.cmp(&b.bin)));
    let mut seen = BTreeSet::new();
    bins.retain(|w| seen.insert(w.bin));
    if bins.is_empty() || catalog.is_empty() || budget == 0 {
        return ExpansionPlan::default();
    }
    let mut counts: BTreeMap<(u32, usize), u32> = BTreeMap::new();
    let mut next_object = vec![0usize; bins.len()];
    for unit in 0..budget as usize {
        let slot = unit % bins.len();
        let obj = next_object[slot] % catalog.len();
        next_object[slot] += 1;
        *counts.entry((bins[slot].bin, obj)).or_insert(0) += 1;
    }
    // Keep bins in allocation order, objects in catalog order.
    let mut requests = Vec::new();
    for w in &bins {
        for (i, object) in catalog.iter().enumerate() {
            if let Some(&count) = counts.get(&(w.bin, i)) {
                requests.push(ExpansionRequest {
                    object: object.clone(),
                    bin: w.bin,
                    count,
                });
            }
        }
    }
    ExpansionPlan { requests }
}

// ---------------------------------------------------------------------------
// Gates

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub sample_id: String,
    pub score: f64,
    /// Final simulator state; the scripted post reviewer reads it.
    pub state: Option<SceneState>,
    /// Last inner-loop route, used to classify failures.
    pub route: Option<SampleRoute>,
    /// Whether the sample ended for a reason a retry could fix.
    pub recoverable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDecision {
    Disabled,
    Kept,
    Dropped,
    /// Post reviewer failed; the sample is held for inspection, not kept.
    Inspect,
    NotReached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateLogEntry {
    pub sample_id: String,
    pub score: f64,
    pub inner: GateDecision,
    pub dual: GateDecision,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub accepted: Vec<Candidate>,
    pub log: Vec<GateLogEntry>,
}

impl GateOutcome {
    pub fn rejected<'a>(&'a self, candidates: &'a [Candidate]) -> Vec<&'a Candidate> {
        candidates
            .iter()
            .filter(|c| !self.accepted.iter().any(|a| a.sample_id == c.sample_id))
            .collect()
    }
}

pub trait PostReviewer: Send + Sync {
    fn accept(&self, candidate: &Candidate) -> Result<bool, ReviewError>;
}

/// Accepts when the pose is within `max_yaw_error_deg` of its target and the
/// oracle quality reaches `min_quality`.
#[derive(Debug, Clone)]
pub struct ScriptedPostReviewer {
    pub max_yaw_error_deg: f64,
    pub min_quality: f64,
}

impl PostReviewer for ScriptedPostReviewer {
    fn accept(&self, c: &Candidate) -> Result<bool, ReviewError> {
        let state = c.state.as_ref().ok_or(ReviewError::MissingOracleState)?;
        Ok(state.yaw_error().abs() <= self.max_yaw_error_deg
            && true_quality(state).overall >= self.min_quality)
    }
}

/// Re-renders the candidate and asks a VLM reviewer for an independent call.
pub struct ReviewerPostGate<R: Reviewer> {
    pub reviewer: R,
    pub pass: f64,
}

impl<R: Reviewer> PostReviewer for ReviewerPostGate<R> {
    fn accept(&self, c: &Candidate) -> Result<bool, ReviewError> {
        let state = c.state.as_ref().ok_or(ReviewError::MissingOracleState)?;
        let bundle = render(state).map_err(|e| ReviewError::Malformed(e.to_string()))?;
        let review = self.reviewer.review(&VlmRequest {
            current: &bundle,
            previous: None,
            object_reference: None,
            pseudo_reference: None,
            mode: "post_review",
            round: 1,
            oracle_state: Some(state),
            oracle_previous: None,
        })?;
        Ok(review.asset_viable && (review.keep() || review.vlm_part() >= self.pass))
    }
}

pub fn apply_gates(
    candidates: &[Candidate],
    cfg: &RoundConfig,
    post: &dyn PostReviewer,
) -> GateOutcome {
    let mut accepted = Vec::new();
    let mut log = Vec::new();
    for c in candidates {
        let inner = if !cfg.inner_gate.enabled {
            GateDecision::Disabled
        } else if c.score >= cfg.inner_gate.threshold {
            GateDecision::Kept
        } else {
            GateDecision::Dropped
        };
        let mut note = None;
        let dual = if inner == GateDecision::Dropped {
            GateDecision::NotReached
        } else if !cfg.dual_gate.enabled {
            GateDecision::Disabled
        } else {
            match post.accept(c) {
                Ok(true) => GateDecision::Kept,
                Ok(false) => GateDecision::Dropped,
                Err(e) => {
                    note = Some(e.to_string());
                    GateDecision::Inspect
                }
            }
        };
        let keep = inner != GateDecision::Dropped
            && matches!(dual, GateDecision::Kept | GateDecision::Disabled);
        if keep {
            accepted.push(c.clone());
        }
        log.push(GateLogEntry {
            sample_id: c.sample_id.clone(),
            score: c.score,
            inner,
            dual,
            note,
        });
    }
    GateOutcome { accepted, log }
}

// ---------------------------------------------------------------------------
// Round verdicts

/// Round-level evaluation summary compared across rounds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub metrics: BTreeMap<String, f64>,
}

impl RoundSummary {
    pub fn from_table(table: &PerAngleTable) -> Self {
        RoundSummary {
            metrics: table
                .metrics()
                .into_iter()
                .filter_map(|m| table.overall(&m).map(|v| (m, v)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardOutcome {
    Improved,
    Flat,
    Regressed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardResult {
    pub metric: String,
    pub direction: Direction,
    pub previous: f64,
    pub current: f64,
    pub delta: f64,
    pub tolerance: f64,
    pub outcome: GuardOutcome,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GuardReport {
    pub results: Vec<GuardResult>,
    pub escalated: bool,
}

/// Every candidate of the round failed the gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateEscalation {
    pub failures: usize,
    pub recoverable: usize,
}

pub fn round_verdict(
    current: Option<&RoundSummary>,
    previous: Option<&RoundSummary>,
    guards: &[Guard],
    escalation: Option<GateEscalation>,
) -> Result<(RoundVerdict, GuardReport), OuterError> {
    for g in guards {
        g.validate()?;
    }
    let mut report = GuardReport::default();
    if let Some(esc) = escalation.filter(|e| e.failures > 0) {
        report.escalated = true;
        let verdict = if esc.recoverable * 2 > esc.failures {
            RoundVerdict::Regenerate
        } else {
            RoundVerdict::Reject
        };
        return Ok((verdict, report));
    }
    let Some(cur) = current.filter(|c| !c.metrics.is_empty()) else {
        return Ok((RoundVerdict::NoSignal, report));
    };
    let Some(prev) = previous.filter(|p| !p.metrics.is_empty()) else {
        return Ok((RoundVerdict::Continue, report));
    };
    for g in guards {
        let get = |s: &RoundSummary| {
            s.metrics
                .get(&g.metric)
                .copied()
                .ok_or_else(|| OuterError::MalformedGuard(format!("metric `{}` not in report", g.metric)))
        };
        let (p, c) = (get(prev)?, get(cur)?);
        let delta = g.direction.orient(c) - g.direction.orient(p);
        let outcome = if delta < -g.tolerance * p.abs() {
            GuardOutcome::Regressed
        } else if delta > 0.0 {
            GuardOutcome::Improved
        } else {
            GuardOutcome::Flat
        };
        report.results.push(GuardResult {
            metric: g.metric.clone(),
            direction: g.direction,
            previous: p,
            current: c,
            delta,
            tolerance: g.tolerance,
            outcome,
        });
    }
    if guards.is_empty() {
        return Ok((RoundVerdict::Continue, report));
    }
    let improved = report.results.iter().any(|r| r.outcome == GuardOutcome::Improved);
    let regressed = report.results.iter().any(|r| r.outcome == GuardOutcome::Regressed);
    let verdict = match (improved, regressed) {
        (true, false) => RoundVerdict::Continue,
        (true, true) => RoundVerdict::Inspect,
        _ => RoundVerdict::StopOrRevert,
    };
    Ok((verdict, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(bin: u32, metric: &str, value: f64) -> EvalRecord {
        EvalRecord {
            angle_bin: bin,
            metric: metric.into(),
            value,
        }
    }

    fn table_with(means: &[(u32, f64)]) -> PerAngleTable {
        evaluate_round(
            &means
                .iter()
                .map(|&(b, v)| rec(b, "psnr", v))
                .collect::<Vec<_>>(),
        )
        .unwrap()
    }

    #[test]
    fn per_angle_means() {
        let t = evaluate_round(&[rec(90, "psnr", 10.0), rec(90, "psnr", 20.0)]).unwrap();
        assert_eq!(t.mean(90, "psnr"), Some(15.0));
        assert_eq!(t.count(90, "psnr"), 2);
        assert_eq!(t.count(45, "psnr"), 0);
        assert_eq!(t.mean(45, "psnr"), None);
        let empty = evaluate_round(&[]).unwrap();
        assert!(ANGLE_BINS.iter().all(|b| empty.count(*b, "psnr") == 0));
        assert_eq!(empty.bins.len(), 8);
        assert!(matches!(
            evaluate_round(&[rec(30, "psnr", 1.0)]),
            Err(OuterError::UnknownBin(30))
        ));
    }

    #[test]
    fn weak_bins() {
        let policy = |mode| WeakPolicy {
            mode,
            metric: "psnr".into(),
            direction: Direction::Higher,
        };
        let flat = table_with(&ANGLE_BINS.map(|b| (b, 20.0)));
        assert!(find_weak_subsets(&flat, &policy(WeakMode::BelowMeanDelta { delta: 1.0 }))
            .unwrap()
            .is_empty());

        let one = table_with(&ANGLE_BINS.map(|b| (b, if b == 135 { 18.0 } else { 20.0 })));
        let w = find_weak_subsets(&one, &policy(WeakMode::BelowMeanDelta { delta: 1.0 })).unwrap();
        assert_eq!(w.iter().map(|w| w.bin).collect::<Vec<_>>(), vec![135]);

        let distinct = table_with(&[
            (45, 5.0),
            (90, 1.0),
            (135, 7.0),
            (180, 2.0),
            (225, 8.0),
            (270, 6.0),
            (315, 4.0),
            (360, 3.0),
        ]);
        let w = find_weak_subsets(&distinct, &policy(WeakMode::BottomK { k: 2 })).unwrap();
        assert_eq!(w.iter().map(|w| w.bin).collect::<Vec<_>>(), vec![90, 180]);

        let lower = WeakPolicy {
            mode: WeakMode::BottomK { k: 1 },
            metric: "psnr".into(),
            direction: Direction::Lower,
        };
        assert_eq!(find_weak_subsets(&distinct, &lower).unwrap()[0].bin, 225);
        assert!(matches!(
            find_weak_subsets(&distinct, &WeakPolicy { metric: "lpips".into(), ..lower }),
            Err(OuterError::MetricAbsent(_))
        ));
    }

    #[test]
    fn expansion_allocation() {
        let cat = vec!["a".to_string(), "b".to_string()];
        let w = |bin, shortfall| WeakBin { bin, shortfall };
        let p = plan_expansion(&[w(90, 1.0)], 6, &cat);
        assert_eq!(p.total(), 6);
        assert!(p.requests.iter().all(|r| r.bin == 90));

        let p = plan_expansion(&[w(135, 1.0), w(90, 2.0)], 5, &cat);
        assert_eq!(p.per_bin(), [(90, 3), (135, 2)].into_iter().collect());

        assert_eq!(plan_expansion(&[w(90, 1.0)], 0, &cat).total(), 0);
        assert_eq!(plan_expansion(&[w(360, 5.0)], 4, &cat).total(), 0);
        assert_eq!(plan_expansion(&[], 4, &cat).total(), 0);
        let p = plan_expansion(&[w(90, 2.0), w(135, 1.5), w(90, 0.0)], 3, &cat);
        assert_eq!(p.total(), 3);
        assert_eq!(p.per_bin()[&90], 2);
    }

    fn cand(id: &str, score: f64, yaw_err: f64) -> Candidate {
        let mut s = SceneState::clean(id, 90.0);
        s.object_yaw_deg = 90.0 + yaw_err;
        Candidate {
            sample_id: id.into(),
            score,
            state: Some(s),
            route: None,
            recoverable: true,
        }
    }

    #[test]
    fn gates() {
        let post = ScriptedPostReviewer {
            max_yaw_error_deg: 5.0,
            min_quality: 0.0,
        };
        let cands = vec![cand("a", 0.9, 0.0), cand("b", 0.7, 0.0), cand("c", 0.95, 8.0)];
        let mut cfg = RoundConfig::stage_config(0, 0.8, 0);
        let out = apply_gates(&cands, &cfg, &post);
        assert_eq!(out.accepted, cands);

        cfg = RoundConfig::stage_config(2, 0.8, 0);
        let out = apply_gates(&cands, &cfg, &post);
        let ids: Vec<_> = out.accepted.iter().map(|c| c.sample_id.as_str()).collect();
        assert_eq!(ids, ["a", "c"]);

        cfg = RoundConfig::stage_config(3, 0.8, 0);
        let out = apply_gates(&cands, &cfg, &post);
        let ids: Vec<_> = out.accepted.iter().map(|c| c.sample_id.as_str()).collect();
        assert_eq!(ids, ["a"]);
        assert_eq!(out.log[2].dual, GateDecision::Dropped);
        assert_eq!(out.log[1].dual, GateDecision::NotReached);
    }

    struct Unreachable;
    impl PostReviewer for Unreachable {
        fn accept(&self, _: &Candidate) -> Result<bool, ReviewError> {
            Err(ReviewError::Transport("connection refused".into()))
        }
    }

    #[test]
    fn unreachable_post_reviewer_holds_for_inspection() {
        let cfg = RoundConfig::stage_config(3, 0.5, 0);
        let out = apply_gates(&[cand("a", 0.9, 0.0)], &cfg, &Unreachable);
        assert!(out.accepted.is_empty());
        assert_eq!(out.log[0].dual, GateDecision::Inspect);
        assert!(out.log[0].note.as_deref().unwrap().contains("connection refused"));
    }

    #[test]
    fn chain_validation() {
        let mut cfg = RoundConfig::stage_config(1, 0.8, 4);
        assert!(cfg.validate().is_ok());
        cfg.feedback_enabled = false;
        cfg.dual_gate.enabled = true;
        assert!(matches!(cfg.validate(), Err(OuterError::UndefinedChain(false, false, true))));
        cfg.allow_undefined_chain = true;
        assert!(cfg.validate().is_ok());
    }

    fn summary(pairs: &[(&str, f64)]) -> RoundSummary {
        RoundSummary {
            metrics: pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    #[test]
    fn verdicts() {
        let guards = vec![
            Guard {
                metric: "psnr".into(),
                direction: Direction::Higher,
                tolerance: 0.005,
            },
            Guard {
                metric: "dino".into(),
                direction: Direction::Higher,
                tolerance: 0.005,
            },
        ];
        let prev = summary(&[("psnr", 15.0), ("dino", 0.8)]);
        let up = summary(&[("psnr", 16.0), ("dino", 0.81)]);
        let mixed = summary(&[("psnr", 16.0), ("dino", 0.7)]);
        let down = summary(&[("psnr", 14.0), ("dino", 0.7)]);
        let v = |c: Option<&RoundSummary>, p: Option<&RoundSummary>| {
            round_verdict(c, p, &guards, None).unwrap().0
        };
        assert_eq!(v(Some(&up), Some(&prev)), RoundVerdict::Continue);
        assert_eq!(v(Some(&mixed), Some(&prev)), RoundVerdict::Inspect);
        assert_eq!(v(Some(&down), Some(&prev)), RoundVerdict::StopOrRevert);
        assert_eq!(v(Some(&prev), Some(&prev)), RoundVerdict::StopOrRevert);
        assert_eq!(v(None, Some(&prev)), RoundVerdict::NoSignal);
        assert_eq!(v(Some(&RoundSummary::default()), Some(&prev)), RoundVerdict::NoSignal);
        assert_eq!(v(Some(&up), None), RoundVerdict::Continue);

        let esc = |f, r| round_verdict(Some(&up), Some(&prev), &guards, Some(GateEscalation { failures: f, recoverable: r })).unwrap().0;
        assert_eq!(esc(4, 3), RoundVerdict::Regenerate);
        assert_eq!(esc(4, 2), RoundVerdict::Reject);

        let bad = vec![Guard {
            metric: "psnr".into(),
            direction: Direction::Higher,
            tolerance: -1.0,
        }];
        assert!(round_verdict(Some(&up), Some(&prev), &bad, None).is_err());
    }

    #[test]
    fn verdict_serializes_as_continue() {
        assert_eq!(serde_json::to_string(&RoundVerdict::Continue).unwrap(), "\"continue\"");
        assert_eq!(
            serde_json::to_string(&RoundVerdict::StopOrRevert).unwrap(),
            "\"stop_or_revert\""
        );
    }
}
