//! Object-disjoint splits, manifest writers for every export type, image
//! metrics, metric ingestion, and round/engine aggregations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{sample_states, ActionProgram, SamplingMode};
use crate::inner::{LogRecord, LoopStatus, VerdictRecord};
use crate::outer::{Direction, EvalRecord, ANGLE_BINS, TRAINING_BINS};
use crate::review::channel_agreement;
use crate::sim::{self, render, RgbImage, SceneState};
use crate::store::{ArtifactId, ArtifactKind, ArtifactStore, SampleRecord, SampleRefs, StoreError};

pub const MANIFEST_SCHEMA: &str = "pair-manifest/1";
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("insufficient objects: need {needed}, have {have}")]
    InsufficientObjects { needed: usize, have: usize },
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("image smaller than the {0}x{0} window")]
    TooSmall(u32),
    #[error("direction undeclared for metric `{0}`")]
    UndeclaredDirection(String),
    #[error("metric `{metric}` declared both {first:?} and {second:?}")]
    ConflictingDirection {
        metric: String,
        first: Direction,
        second: Direction,
    },
    #[error("cannot compare different metrics `{0}` and `{1}`")]
    MetricMismatch(String, String),
    #[error("value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("corrupt log line {line}: {message}")]
    CorruptLog { line: usize, message: String },
    #[error("metrics csv row {row}: {message}")]
    BadCsv { row: usize, message: String },
    #[error("{0}")]
    Sampling(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub seed: u64,
    pub n_train_objects: usize,
    pub n_val_objects: usize,
    pub n_test_objects: usize,
    #[serde(default = "default_views")]
    pub target_views_per_object: usize,
}

fn default_views() -> usize {
    7
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            seed: 0,
            n_train_objects: 35,
            n_val_objects: 7,
            n_test_objects: 8,
            target_views_per_object: 7,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_of(&self, object: &str) -> Option<Split> {
        Split::ALL
            .into_iter()
            .find(|s| self.get(*s).iter().any(|o| o == object))
    }
}

/// Seeded shuffle of the distinct objects, then consecutive slices.
pub fn build_splits(objects: &[String], spec: &SplitSpec) -> Result<Splits, ExportError> {
    let mut pool: Vec<String> = objects.to_vec();
    pool.sort();
    pool.dedup();
    let needed = spec.n_train_objects + spec.n_val_objects + spec.n_test_objects;
    if pool.len() < needed {
        return Err(ExportError::InsufficientObjects {
            needed,
            have: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    pool.shuffle(&mut rng);
    let mut it = pool.into_iter();
    let mut take = |n: usize| -> Vec<String> {
        let mut v: Vec<String> = it.by_ref().take(n).collect();
        v.sort();
        v
    };
    Ok(Splits {
        train: take(spec.n_train_objects),
        val: take(spec.n_val_objects),
        test: take(spec.n_test_objects),
    })
}

// ---------------------------------------------------------------------------
// Image-pair export

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairManifestRow {
    pub source_image: String,
    pub target_image: String,
    pub instruction: String,
    pub target_rotation: u32,
    pub object_id: String,
    pub object_name: String,
    pub prompt_version: String,
}

impl PairManifestRow {
    pub fn is_well_formed(&self, training: bool) -> bool {
        let text = [
            &self.source_image,
            &self.target_image,
            &self.instruction,
            &self.object_id,
            &self.object_name,
            &self.prompt_version,
        ];
        text.iter().all(|s| !s.is_empty())
            && if training {
                TRAINING_BINS.contains(&self.target_rotation)
            } else {
                ANGLE_BINS.contains(&self.target_rotation)
            }
    }
}

/// One accepted render of an object at a rotation (0 is the canonical front).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewRender {
    pub object_id: String,
    pub object_name: String,
    pub rotation: u32,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionTemplate {
    pub template: String,
    pub prompt_version: String,
}

impl Default for InstructionTemplate {
    fn default() -> Self {
        InstructionTemplate {
            template: "Rotate the {object_name} from the front view to the {view_name} view"
                .into(),
            prompt_version: "v1".into(),
        }
    }
}

pub fn view_name(rotation: u32) -> &'static str {
    match rotation {
        45 => "front-right",
        90 => "right side",
        135 => "back-right",
        180 => "back",
        225 => "back-left",
        270 => "left side",
        315 => "front-left",
        _ => "front",
    }
}

impl InstructionTemplate {
    pub fn render(&self, object_name: &str, rotation: u32) -> String {
        self.template
            .replace("{object_name}", object_name)
            .replace("{view_name}", view_name(rotation))
            .replace("{rotation}", &rotation.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRow {
    pub object_id: String,
    pub target_rotation: Option<u32>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairExport {
    pub manifests: BTreeMap<Split, Vec<PairManifestRow>>,
    pub skipped: Vec<SkippedRow>,
}

/// Rows for every split object: canonical front as source, the first
/// `target_views_per_object` non-front bins as targets. Missing renders are
/// skipped and logged.
pub fn export_image_pairs(
    views: &[ViewRender],
    splits: &Splits,
    spec: &SplitSpec,
    template: &InstructionTemplate,
) -> PairExport {
    let mut index: BTreeMap<(&str, u32), &ViewRender> = BTreeMap::new();
    for v in views {
        index.entry((v.object_id.as_str(), v.rotation)).or_insert(v);
    }
    let targets: Vec<u32> = TRAINING_BINS
        .iter()
        .copied()
        .take(spec.target_views_per_object.min(TRAINING_BINS.len()))
        .collect();
    let mut out = PairExport::default();
    for split in Split::ALL {
        let rows = out.manifests.entry(split).or_default();
        for object in splits.get(split) {
            let Some(source) = index.get(&(object.as_str(), 0)) else {
                out.skipped.push(SkippedRow {
                    object_id: object.clone(),
                    target_rotation: None,
                    reason: "missing canonical source".into(),
                });
                continue;
            };
            for &rot in &targets {
                match index.get(&(object.as_str(), rot)) {
                    Some(target) => rows.push(PairManifestRow {
                        source_image: source.image.clone(),
                        target_image: target.image.clone(),
                        instruction: template.render(&source.object_name, rot),
                        target_rotation: rot,
                        object_id: object.clone(),
                        object_name: source.object_name.clone(),
                        prompt_version: template.prompt_version.clone(),
                    }),
                    None => out.skipped.push(SkippedRow {
                        object_id: object.clone(),
                        target_rotation: Some(rot),
                        reason: "missing target view".into(),
                    }),
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ManifestHeader {
    schema_version: String,
    split: Split,
    rows: usize,
}

/// JSON-lines manifest: a header line, then one row per pair.
pub fn write_manifest(path: &Path, split: Split, rows: &[PairManifestRow]) -> Result<(), ExportError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = ManifestHeader {
        schema_version: MANIFEST_SCHEMA.into(),
        split,
        rows: rows.len(),
    };
    writeln!(f, "{}", serde_json::to_string(&header)?)?;
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<(Split, Vec<PairManifestRow>), ExportError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let header: ManifestHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l?)?,
        None => {
            return Err(ExportError::CorruptLog {
                line: 1,
                message: "empty manifest".into(),
            })
        }
    };
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            rows.push(serde_json::from_str(&line)?);
        }
    }
    Ok((header.split, rows))
}

// ---------------------------------------------------------------------------
// Other export types

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportMode {
    ImagePairs,
    MultiView,
    VideoSequence,
    GeometryPackage,
    Trajectory,
    Preference,
    Diagnostics,
}

impl ExportMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ExportMode::ImagePairs => "image_pairs",
            ExportMode::MultiView => "multi_view",
            ExportMode::VideoSequence => "video_sequence",
            ExportMode::GeometryPackage => "geometry_package",
            ExportMode::Trajectory => "trajectory",
            ExportMode::Preference => "preference",
            ExportMode::Diagnostics => "diagnostics",
        }
    }

    pub fn required_kinds(self) -> BTreeSet<ArtifactKind> {
        use ArtifactKind::*;
        let kinds: &[ArtifactKind] = match self {
            ExportMode::ImagePairs | ExportMode::MultiView | ExportMode::Preference => &[RgbImage],
            ExportMode::VideoSequence => &[RgbImage, Trajectory],
            ExportMode::GeometryPackage => &[RgbImage, Mask, DepthMap, NormalMap],
            ExportMode::Trajectory => &[Trajectory, ActionProgram],
            ExportMode::Diagnostics => &[VerdictRecord, DiagnosticLog],
        };
        kinds.iter().copied().collect()
    }
}

impl std::str::FromStr for ExportMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            ExportMode::ImagePairs,
            ExportMode::MultiView,
            ExportMode::VideoSequence,
            ExportMode::GeometryPackage,
            ExportMode::Trajectory,
            ExportMode::Preference,
            ExportMode::Diagnostics,
        ]
        .into_iter()
        .find(|m| m.as_str() == s.replace('-', "_"))
        .ok_or_else(|| format!("unknown export mode `{s}`"))
    }
}

/// A sample offered to an export, with the request it belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportSample {
    pub sample_id: String,
    pub group: String,
    pub accepted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExportRow {
    pub sample_id: String,
    pub refs: BTreeMap<String, Vec<ArtifactId>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub timestamps: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paired_with: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    pub sample_id: String,
    pub missing: Vec<ArtifactKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtherManifest {
    pub schema_version: String,
    pub mode: ExportMode,
    pub rows: Vec<ExportRow>,
    pub errors: Vec<RowError>,
}

/// Frames of a densely sampled program, stored under kind `trajectory`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryArtifact {
    pub program: String,
    pub fps: f64,
    pub frames: Vec<TrajectoryFrame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFrame {
    pub index: usize,
    pub yaw_deg: f64,
    pub timestamp_s: f64,
    pub clamped: bool,
    pub image: ArtifactId,
}

/// Render every dense state of `program` from `base` and record the result
/// as a sample with a trajectory.
pub fn record_dense_sample(
    store: &ArtifactStore,
    sample_id: &str,
    round_id: u32,
    base: &SceneState,
    program: &ActionProgram,
    step_deg: f64,
    fps: f64,
) -> Result<SampleRecord, ExportError> {
    let states = sample_states(program, SamplingMode::VideoDense { step_deg }, true)
        .map_err(|e| ExportError::Sampling(e.to_string()))?;
    let mut refs = SampleRefs::default();
    let mut frames = Vec::new();
    for st in &states {
        let mut scene = base.clone();
        scene.object_yaw_deg = crate::dsl::normalize_yaw(base.object_yaw_deg + st.yaw_deg);
        scene.target_yaw_deg = scene.object_yaw_deg;
        let bundle = render(&scene).map_err(|e| ExportError::Sampling(e.to_string()))?;
        let id = store.put(&sim::encode_png_rgb(&bundle.rgb), ArtifactKind::RgbImage)?;
        refs.renders.push(id.clone());
        frames.push(TrajectoryFrame {
            index: st.index,
            yaw_deg: st.yaw_deg,
            timestamp_s: st.index as f64 / fps,
            clamped: st.clamped,
            image: id,
        });
    }
    let traj = TrajectoryArtifact {
        program: program.canonical(),
        fps,
        frames,
    };
    refs.temporal = Some(store.put_json(&traj, ArtifactKind::Trajectory)?);
    refs.action = Some(store.put(program.canonical().as_bytes(), ArtifactKind::ActionProgram)?);
    let rec = SampleRecord::new(sample_id, round_id, refs);
    store.record_sample(rec.clone())?;
    Ok(rec)
}

fn refs_of(kinds: &[ArtifactKind], record: &SampleRecord) -> BTreeMap<String, Vec<ArtifactId>> {
    let all = record.refs.all();
    kinds
        .iter()
        .map(|k| {
            (
                k.as_str().to_string(),
                all.iter().filter(|id| id.kind() == *k).cloned().collect(),
            )
        })
        .collect()
}

pub fn export_other(
    mode: ExportMode,
    samples: &[ExportSample],
    store: &ArtifactStore,
) -> Result<OtherManifest, ExportError> {
    let required = mode.required_kinds();
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    let mut complete: Vec<(&ExportSample, SampleRecord)> = Vec::new();
    for s in samples {
        let report = store.validate_completeness(&s.sample_id, &required)?;
        if !report.complete {
            errors.push(RowError {
                sample_id: s.sample_id.clone(),
                missing: report.missing,
            });
            continue;
        }
        complete.push((s, store.sample(&s.sample_id)?));
    }
    use ArtifactKind::*;
    match mode {
        ExportMode::Preference => {
            let mut groups: BTreeMap<&str, (Vec<&str>, Vec<&str>)> = BTreeMap::new();
            for (s, _) in &complete {
                let g = groups.entry(s.group.as_str()).or_default();
                if s.accepted {
                    g.0.push(&s.sample_id);
                } else {
                    g.1.push(&s.sample_id);
                }
            }
            let find = |id: &str| complete.iter().find(|(s, _)| s.sample_id == id).map(|(_, r)| r);
            for (accepted, rejected) in groups.values() {
                for a in accepted {
                    for r in rejected {
                        let mut refs = BTreeMap::new();
                        refs.insert("chosen".into(), refs_of(&[RgbImage], find(a).unwrap())["rgb_image"].clone());
                        refs.insert("rejected".into(), refs_of(&[RgbImage], find(r).unwrap())["rgb_image"].clone());
                        rows.push(ExportRow {
                            sample_id: a.to_string(),
                            refs,
                            timestamps: vec![],
                            paired_with: Some(r.to_string()),
                        });
                    }
                }
            }
        }
        ExportMode::VideoSequence => {
            for (s, rec) in &complete {
                let traj: TrajectoryArtifact =
                    store.get_json(rec.refs.temporal.as_ref().expect("complete sample"))?;
                let mut refs = BTreeMap::new();
                refs.insert(
                    "frames".into(),
                    traj.frames.iter().map(|f| f.image.clone()).collect(),
                );
                rows.push(ExportRow {
                    sample_id: s.sample_id.clone(),
                    refs,
                    timestamps: traj.frames.iter().map(|f| f.timestamp_s).collect(),
                    paired_with: None,
                });
            }
        }
        _ => {
            let kinds: Vec<ArtifactKind> = match mode {
                ExportMode::GeometryPackage => vec![RgbImage, Mask, DepthMap, NormalMap],
                ExportMode::Trajectory => vec![Trajectory, ActionProgram],
                ExportMode::Diagnostics => vec![VerdictRecord, DiagnosticLog, ReviewTrace],
                _ => vec![RgbImage],
            };
            for (s, rec) in &complete {
                let mut refs = refs_of(&kinds, rec);
                if mode == ExportMode::GeometryPackage {
                    // The final render only: one of each raster.
                    for v in refs.values_mut() {
                        v.drain(..v.len().saturating_sub(1));
                    }
                }
                rows.push(ExportRow {
                    sample_id: s.sample_id.clone(),
                    refs,
                    timestamps: vec![],
                    paired_with: None,
                });
            }
        }
    }
    Ok(OtherManifest {
        schema_version: format!("{}-manifest/1", mode.as_str()),
        mode,
        rows,
        errors,
    })
}

// ---------------------------------------------------------------------------
// Image metrics

fn same_dims(a: &RgbImage, b: &RgbImage) -> Result<(), ExportError> {
    if a.width != b.width || a.height != b.height || a.data.len() != b.data.len() {
        return Err(ExportError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    Ok(())
}

/// PSNR over 8-bit channels, capped at 99 dB for identical inputs.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64, ExportError> {
    same_dims(a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB))
}

pub const SSIM_WINDOW: u32 = 8;

/// Mean SSIM over every 8×8 window position, averaged across channels.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64, ExportError> {
    same_dims(a, b)?;
    let win = SSIM_WINDOW;
    if a.width < win || a.height < win {
        return Err(ExportError::TooSmall(win));
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let n = (win * win) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for c in 0..3u32 {
        for y0 in 0..=(a.height - win) {
            for x0 in 0..=(a.width - win) {
                let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + win {
                    for x in x0..x0 + win {
                        let i = ((y * a.width + x) * 3 + c) as usize;
                        let (p, q) = (a.data[i] as f64, b.data[i] as f64);
                        sx += p;
                        sy += q;
                        sxx += p * p;
                        syy += q * q;
                        sxy += p * q;
                    }
                }
                let (mx, my) = (sx / n, sy / n);
                let vx = (sxx / n - mx * mx).max(0.0);
                let vy = (syy / n - my * my).max(0.0);
                let cov = sxy / n - mx * my;
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                windows += 1;
            }
        }
    }
    Ok(total / windows as f64)
}

// ---------------------------------------------------------------------------
// Metric records

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricSource {
    Computed,
    Ingested,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub direction: Direction,
    pub value: f64,
    pub angle_bin: u32,
    pub sample_id: String,
    pub source: MetricSource,
}

impl MetricRecord {
    pub fn eval(&self) -> EvalRecord {
        EvalRecord {
            angle_bin: self.angle_bin,
            metric: self.metric.clone(),
            value: self.value,
        }
    }
}

/// One declared direction per metric name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DirectionTable {
    pub directions: BTreeMap<String, Direction>,
}

impl DirectionTable {
    pub fn declare(&mut self, metric: &str, direction: Direction) -> Result<(), ExportError> {
        match self.directions.get(metric) {
            Some(&d) if d != direction => Err(ExportError::ConflictingDirection {
                metric: metric.to_string(),
                first: d,
                second: direction,
            }),
            _ => {
                self.directions.insert(metric.to_string(), direction);
                Ok(())
            }
        }
    }

    pub fn get(&self, metric: &str) -> Result<Direction, ExportError> {
        self.directions
            .get(metric)
            .copied()
            .ok_or_else(|| ExportError::UndeclaredDirection(metric.to_string()))
    }

    /// Known metric families.
    pub fn standard() -> Self {
        let mut t = DirectionTable::default();
        for (m, d) in [
            ("psnr", Direction::Higher),
            ("ssim", Direction::Higher),
            ("lpips", Direction::Lower),
            ("clip_i", Direction::Higher),
            ("dino", Direction::Higher),
            ("fid", Direction::Lower),
            ("vie_view", Direction::Higher),
            ("vie_cons", Direction::Higher),
            ("vie_overall", Direction::Higher),
            ("quality", Direction::Higher),
        ] {
            t.declare(m, d).expect("distinct names");
        }
        t
    }
}

/// Signed change where positive always means improvement.
pub fn directional_delta(direction: Direction, base: f64, other: f64) -> f64 {
    match direction {
        Direction::Higher => other - base,
        Direction::Lower => base - other,
    }
}

pub fn normalize_direction(
    base: &MetricRecord,
    other: &MetricRecord,
    table: &DirectionTable,
) -> Result<f64, ExportError> {
    if base.metric != other.metric {
        return Err(ExportError::MetricMismatch(base.metric.clone(), other.metric.clone()));
    }
    let declared = table.get(&base.metric)?;
    for r in [base, other] {
        if r.direction != declared {
            return Err(ExportError::ConflictingDirection {
                metric: r.metric.clone(),
                first: declared,
                second: r.direction,
            });
        }
    }
    Ok(directional_delta(declared, base.value, other.value))
}

/// Arithmetic mean of the view-consistency and identity scores.
pub fn vie_overall(score_view: f64, score_cons: f64) -> Result<f64, ExportError> {
    for v in [score_view, score_cons] {
        if !(0.0..=1.0).contains(&v) {
            return Err(ExportError::OutOfRange(v));
        }
    }
    Ok((score_view + score_cons) / 2.0)
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    metric: String,
    direction: String,
    value: f64,
    angle_bin: u32,
    sample_id: String,
}

/// Externally computed metrics: columns metric,direction,value,angle_bin,sample_id.
pub fn ingest_metrics_csv<R: std::io::Read>(
    reader: R,
    table: &mut DirectionTable,
) -> Result<Vec<MetricRecord>, ExportError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
        let row_no = i + 2;
        let row = row.map_err(|e| ExportError::BadCsv {
            row: row_no,
            message: e.to_string(),
        })?;
        if row.direction.is_empty() {
            return Err(ExportError::UndeclaredDirection(row.metric));
        }
        let direction: Direction = row.direction.parse().map_err(|m| ExportError::BadCsv {
            row: row_no,
            message: m,
        })?;
        if !ANGLE_BINS.contains(&row.angle_bin) {
            return Err(ExportError::BadCsv {
                row: row_no,
                message: format!("unknown angle bin {}", row.angle_bin),
            });
        }
        table.declare(&row.metric, direction)?;
        out.push(MetricRecord {
            metric: row.metric,
            direction,
            value: row.value,
            angle_bin: row.angle_bin,
            sample_id: row.sample_id,
            source: MetricSource::Ingested,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Engine report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineReport {
    pub samples: usize,
    pub render_success_rate: f64,
    pub artifact_completeness_rate: f64,
    /// Over accepted samples; absent when none were accepted.
    pub mean_correction_rounds: Option<f64>,
    pub acceptance_rate: f64,
    pub geometry_validity_rate: f64,
    /// Absent when no round carried both channel calls.
    pub review_reliability: Option<f64>,
}

/// Parse JSON-lines log text, naming the first corrupt line.
pub fn parse_log_lines(text: &str) -> Result<Vec<LogRecord>, ExportError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ExportError::CorruptLog {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Per-sample facts the report needs beyond the logs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleAudit {
    pub sample_id: String,
    pub complete: bool,
    pub geometry_valid: bool,
}

/// Completeness and geometry validity of one stored sample.
pub fn audit_sample(
    store: &ArtifactStore,
    sample_id: &str,
    required: &BTreeSet<ArtifactKind>,
) -> Result<SampleAudit, ExportError> {
    let complete = store.validate_completeness(sample_id, required)?.complete;
    let rec = store.sample(sample_id)?;
    let last = |k: ArtifactKind| rec.refs.geometry.iter().rev().find(|id| id.kind() == k).cloned();
    let geometry_valid = match (
        last(ArtifactKind::Mask),
        last(ArtifactKind::DepthMap),
        last(ArtifactKind::NormalMap),
    ) {
        (Some(m), Some(d), Some(n)) => {
            let mask = sim::decode_png_mask(&store.get(&m)?);
            let depth = sim::decode_float_raster(&store.get(&d)?);
            let normal = sim::decode_float_raster(&store.get(&n)?);
            match (mask, depth, normal) {
                (Ok(m), Ok(d), Ok(n)) => sim::geometry_consistent(&m, &d, &n),
                _ => false,
            }
        }
        _ => false,
    };
    Ok(SampleAudit {
        sample_id: sample_id.to_string(),
        complete,
        geometry_valid,
    })
}

pub fn engine_report(logs: &[LogRecord], audits: &[SampleAudit]) -> EngineReport {
    let mut by_sample: BTreeMap<&str, Vec<&LogRecord>> = BTreeMap::new();
    for l in logs {
        by_sample.entry(&l.sample_id).or_default().push(l);
    }
    let requested = by_sample.len();
    let rate = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let rendered = by_sample
        .values()
        .filter(|ls| ls.iter().any(|l| l.cause.as_deref() != Some("render_failure")))
        .count();
    let accepted_rounds: Vec<u32> = by_sample
        .values()
        .filter_map(|ls| {
            let last = ls.iter().max_by_key(|l| l.round)?;
            (last.status == Some(LoopStatus::Accepted)).then_some(last.round)
        })
        .collect();
    let pairs: Vec<(bool, bool)> = logs
        .iter()
        .filter_map(|l| Some((l.cv_pass?, l.vlm_pass?)))
        .collect();
    EngineReport {
        samples: requested,
        render_success_rate: rate(rendered, requested),
        artifact_completeness_rate: rate(audits.iter().filter(|a| a.complete).count(), audits.len()),
        mean_correction_rounds: (!accepted_rounds.is_empty()).then(|| {
            accepted_rounds.iter().map(|&r| r as f64).sum::<f64>() / accepted_rounds.len() as f64
        }),
        acceptance_rate: rate(accepted_rounds.len(), requested),
        geometry_validity_rate: rate(
            audits.iter().filter(|a| a.geometry_valid).count(),
            audits.len(),
        ),
        review_reliability: channel_agreement(&pairs),
    }
}

/// Verdict records of the given samples, for diagnostics exports and replay.
pub fn verdicts(store: &ArtifactStore, sample_ids: &[String]) -> Result<Vec<VerdictRecord>, ExportError> {
    let mut out = Vec::new();
    for id in sample_ids {
        if let Some(v) = store.sample(id)?.refs.verdict {
            out.push(store.get_json(&v)?);
        }
    }
    Ok(out)
}
