//! Content-addressed artifact store.
//!
//! Artifact bytes live under `objects/<d0d1>/<d2d3>/<digest>.<kind>`, written
//! to a temp file first and renamed into place. Sample and round records are
//! appended as one JSON object per line to `index/samples.jsonl` and
//! `index/rounds.jsonl`. Nothing addressed by an existing id is ever rewritten.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::outer::RoundVerdict;

pub type StoreResult<T> = std::result::Result<T, StoreError>;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("empty payload")]
    EmptyPayload,
    #[error("dangling ref: {0}")]
    DanglingRef(ArtifactId),
    #[error("duplicate sample id: {0}")]
    DuplicateSample(String),
    #[error("unknown sample: {0}")]
    UnknownSample(String),
    #[error("unknown artifact: {0}")]
    UnknownArtifact(ArtifactId),
    #[error("round {0} is not greater than the last round {1}")]
    RoundOrder(u32, u32),
    #[error("round {0} is not open")]
    RoundNotOpen(u32),
    #[error("invalid artifact id `{0}`")]
    InvalidId(String),
    #[error("corrupt index {file} line {line}: {message}")]
    CorruptIndex {
        file: String,
        line: usize,
        message: String,
    },
    #[error("storage i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

/// Every artifact kind the artifact graph can hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    RgbImage,
    Mask,
    DepthMap,
    NormalMap,
    Mesh,
    ObjectPose,
    CameraPose,
    Trajectory,
    ActionProgram,
    ReviewTrace,
    VerdictRecord,
    ExportManifest,
    DiagnosticLog,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 13] = [
        ArtifactKind::RgbImage,
        ArtifactKind::Mask,
        ArtifactKind::DepthMap,
        ArtifactKind::NormalMap,
        ArtifactKind::Mesh,
        ArtifactKind::ObjectPose,
        ArtifactKind::CameraPose,
        ArtifactKind::Trajectory,
        ArtifactKind::ActionProgram,
        ArtifactKind::ReviewTrace,
        ArtifactKind::VerdictRecord,
        ArtifactKind::ExportManifest,
        ArtifactKind::DiagnosticLog,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::RgbImage => "rgb_image",
            ArtifactKind::Mask => "mask",
            ArtifactKind::DepthMap => "depth_map",
            ArtifactKind::NormalMap => "normal_map",
            ArtifactKind::Mesh => "mesh",
            ArtifactKind::ObjectPose => "object_pose",
            ArtifactKind::CameraPose => "camera_pose",
            ArtifactKind::Trajectory => "trajectory",
            ArtifactKind::ActionProgram => "action_program",
            ArtifactKind::ReviewTrace => "review_trace",
            ArtifactKind::VerdictRecord => "verdict_record",
            ArtifactKind::ExportManifest => "export_manifest",
            ArtifactKind::DiagnosticLog => "diagnostic_log",
        }
    }
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArtifactKind {
    type Err = StoreError;

    fn from_str(s: &str) -> StoreResult<Self> {
        ArtifactKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| StoreError::InvalidId(s.to_string()))
    }
}

/// Identity of a stored artifact: the SHA-256 of its bytes plus its kind.
///
/// Displays and parses as `<kind>:<digest>`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ArtifactId {
    digest: String,
    kind: ArtifactKind,
}

impl ArtifactId {
    pub fn for_bytes(bytes: &[u8], kind: ArtifactKind) -> Self {
        let digest = hex::encode(Sha256::digest(bytes));
        ArtifactId { digest, kind }
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn kind(&self) -> ArtifactKind {
        self.kind
    }

    /// Path of the artifact bytes relative to the store root.
    pub fn relative_path(&self) -> PathBuf {
        PathBuf::from("objects")
            .join(&self.digest[0..2])
            .join(&self.digest[2..4])
            .join(format!("{}.{}", self.digest, self.kind))
    }
}

impl fmt::Display for ArtifactId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.digest)
    }
}

impl FromStr for ArtifactId {
    type Err = StoreError;

    fn from_str(s: &str) -> StoreResult<Self> {
        let bad = || StoreError::InvalidId(s.to_string());
        let (kind, digest) = s.split_once(':').ok_or_else(bad)?;
        let kind = kind.parse().map_err(|_| bad())?;
        let valid = digest.len() == 64
            && digest
                .bytes()
                .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
        if !valid {
            return Err(bad());
        }
        Ok(ArtifactId {
            digest: digest.to_string(),
            kind,
        })
    }
}

impl Serialize for ArtifactId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ArtifactId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The artifact references carried by one sample record.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRefs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<ArtifactId>,
    #[serde(default)]
    pub assets: Vec<ArtifactId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<ArtifactId>,
    #[serde(default)]
    pub renders: Vec<ArtifactId>,
    #[serde(default)]
    pub geometry: Vec<ArtifactId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temporal: Option<ArtifactId>,
    /// Ordered by review round.
    #[serde(default)]
    pub reviews: Vec<ArtifactId>,
    /// Per-round control logs, ordered by round.
    #[serde(default)]
    pub logs: Vec<ArtifactId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<ArtifactId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub export: Option<ArtifactId>,
}

impl SampleRefs {
    /// Every reference with its role and review round, in record order.
    fn entries(&self) -> Vec<TraceEntry> {
        let last_round = self.reviews.len().max(self.logs.len()).saturating_sub(1) as u32;
        let mut out = Vec::new();
        let mut push = |role: RefRole, round: u32, id: &ArtifactId| {
            out.push(TraceEntry {
                role,
                round,
                id: id.clone(),
            })
        };
        if let Some(id) = &self.scene {
            push(RefRole::Scene, 0, id);
        }
        for id in &self.assets {
            push(RefRole::Asset, 0, id);
        }
        if let Some(id) = &self.action {
            push(RefRole::Action, 0, id);
        }
        for id in &self.renders {
            push(RefRole::Render, 0, id);
        }
        for id in &self.geometry {
            push(RefRole::Geometry, 0, id);
        }
        if let Some(id) = &self.temporal {
            push(RefRole::Temporal, 0, id);
        }
        for (round, id) in self.reviews.iter().enumerate() {
            push(RefRole::Review, round as u32, id);
        }
        for (round, id) in self.logs.iter().enumerate() {
            push(RefRole::Log, round as u32, id);
        }
        if let Some(id) = &self.verdict {
            push(RefRole::Verdict, last_round, id);
        }
        if let Some(id) = &self.export {
            push(RefRole::Export, last_round, id);
        }
        out
    }

    pub fn all(&self) -> Vec<ArtifactId> {
        self.entries().into_iter().map(|e| e.id).collect()
    }
}

/// One node of the artifact graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub round_id: u32,
    pub refs: SampleRefs,
    pub created_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supersedes: Option<String>,
}

impl SampleRecord {
    pub fn new(sample_id: impl Into<String>, round_id: u32, refs: SampleRefs) -> Self {
        SampleRecord {
            sample_id: sample_id.into(),
            round_id,
            refs,
            created_at: now_rfc3339(),
            supersedes: None,
        }
    }

    pub fn created_at(&self) -> Option<DateTime<Utc>> {
        DateTime::parse_from_rfc3339(&self.created_at)
            .ok()
            .map(|t| t.with_timezone(&Utc))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_id: u32,
    pub config_ref: ArtifactId,
    #[serde(default)]
    pub sample_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_report_ref: Option<ArtifactId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<RoundVerdict>,
    pub created_at: String,
}

impl RoundRecord {
    pub fn is_closed(&self) -> bool {
        self.verdict.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefRole {
    Scene,
    Asset,
    Action,
    Render,
    Geometry,
    Temporal,
    Review,
    Log,
    Verdict,
    Export,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub role: RefRole,
    pub round: u32,
    pub id: ArtifactId,
}

/// All artifacts reachable from a sample, including superseded versions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub sample_id: String,
    /// `sample_id` first, then each record it supersedes.
    pub lineage: Vec<String>,
    pub entries: Vec<TraceEntry>,
    /// No verdict recorded yet.
    pub open: bool,
}

impl Trace {
    pub fn ids(&self) -> BTreeSet<ArtifactId> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    pub fn of_kind(&self, kind: ArtifactKind) -> Vec<&ArtifactId> {
        self.entries
            .iter()
            .filter(|e| e.id.kind() == kind)
            .map(|e| &e.id)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletenessReport {
    pub sample_id: String,
    pub complete: bool,
    pub missing: Vec<ArtifactKind>,
}

pub fn now_rfc3339() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

struct Index {
    samples: HashMap<String, SampleRecord>,
    order: Vec<String>,
    rounds: Vec<RoundRecord>,
}

pub struct ArtifactStore {
    root: PathBuf,
    index: RwLock<Index>,
    sample_log: Mutex<File>,
    round_log: Mutex<File>,
    tmp_counter: AtomicU64,
}

impl fmt::Debug for ArtifactStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ArtifactStore")
            .field("root", &self.root)
            .finish_non_exhaustive()
    }
}

const SAMPLES_FILE: &str = "samples.jsonl";
const ROUNDS_FILE: &str = "rounds.jsonl";

impl ArtifactStore {
    /// Open (creating if needed) a store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> StoreResult<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("objects"))?;
        fs::create_dir_all(root.join("index"))?;
        fs::create_dir_all(root.join("tmp"))?;

        let samples_path = root.join("index").join(SAMPLES_FILE);
        let rounds_path = root.join("index").join(ROUNDS_FILE);
        let sample_lines: Vec<SampleRecord> = read_jsonl(&samples_path)?;
        let round_lines: Vec<RoundRecord> = read_jsonl(&rounds_path)?;

        let mut samples = HashMap::new();
        let mut order = Vec::new();
        for rec in sample_lines {
            order.push(rec.sample_id.clone());
            samples.insert(rec.sample_id.clone(), rec);
        }
        let append = |p: &Path| OpenOptions::new().create(true).append(true).open(p);
        Ok(ArtifactStore {
            sample_log: Mutex::new(append(&samples_path)?),
            round_log: Mutex::new(append(&rounds_path)?),
            root,
            index: RwLock::new(Index {
                samples,
                order,
                rounds: round_lines,
            }),
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, id: &ArtifactId) -> PathBuf {
        self.root.join(id.relative_path())
    }

    pub fn put(&self, bytes: &[u8], kind: ArtifactKind) -> StoreResult<ArtifactId> {
        if bytes.is_empty() {
            return Err(StoreError::EmptyPayload);
        }
        let id = ArtifactId::for_bytes(bytes, kind);
        let dest = self.path_of(&id);
        if dest.exists() {
            return Ok(id);
        }
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent)?;
        }
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = self.root.join("tmp").join(format!(
            "{}-{}-{:?}-{}",
            &id.digest[..16],
            std::process::id(),
            std::thread::current().id(),
            n
        ));
        {
            let mut f = File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_data()?;
        }
        // Concurrent writers of identical content race harmlessly here.
        fs::rename(&tmp, &dest)?;
        Ok(id)
    }

    pub fn put_json<T: Serialize>(&self, value: &T, kind: ArtifactKind) -> StoreResult<ArtifactId> {
        let bytes = serde_json::to_vec(value)?;
        self.put(&bytes, kind)
    }

    pub fn get(&self, id: &ArtifactId) -> StoreResult<Vec<u8>> {
        fs::read(self.path_of(id)).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => StoreError::UnknownArtifact(id.clone()),
            _ => StoreError::Io(e),
        })
    }

    pub fn get_json<T: for<'de> Deserialize<'de>>(&self, id: &ArtifactId) -> StoreResult<T> {
        Ok(serde_json::from_slice(&self.get(id)?)?)
    }

    pub fn contains(&self, id: &ArtifactId) -> bool {
        self.path_of(id).is_file()
    }

    pub fn record_sample(&self, record: SampleRecord) -> StoreResult<String> {
        for id in record.refs.all() {
            if !self.contains(&id) {
                return Err(StoreError::DanglingRef(id));
            }
        }
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');

        let mut index = self.index.write().expect("store index poisoned");
        if index.samples.contains_key(&record.sample_id) {
            return Err(StoreError::DuplicateSample(record.sample_id));
        }
        if let Some(prev) = &record.supersedes {
            if !index.samples.contains_key(prev) {
                return Err(StoreError::UnknownSample(prev.clone()));
            }
        }
        {
            let mut log = self.sample_log.lock().expect("sample log poisoned");
            log.write_all(line.as_bytes())?;
            log.flush()?;
        }
        let id = record.sample_id.clone();
        index.order.push(id.clone());
        index.samples.insert(id.clone(), record);
        Ok(id)
    }

    /// Append a new version of `previous` under a fresh id.
    pub fn supersede(&self, previous: &str, mut record: SampleRecord) -> StoreResult<String> {
        record.supersedes = Some(previous.to_string());
        self.record_sample(record)
    }

    pub fn sample(&self, sample_id: &str) -> StoreResult<SampleRecord> {
        let index = self.index.read().expect("store index poisoned");
        index
            .samples
            .get(sample_id)
            .cloned()
            .ok_or_else(|| StoreError::UnknownSample(sample_id.to_string()))
    }

    /// Records in append order.
    pub fn samples(&self) -> Vec<SampleRecord> {
        let index = self.index.read().expect("store index poisoned");
        index
            .order
            .iter()
            .filter_map(|id| index.samples.get(id).cloned())
            .collect()
    }

    pub fn get_trace(&self, sample_id: &str) -> StoreResult<Trace> {
        let index = self.index.read().expect("store index poisoned");
        let head = index
            .samples
            .get(sample_id)
            .ok_or_else(|| StoreError::UnknownSample(sample_id.to_string()))?;

        let mut lineage = Vec::new();
        let mut entries: Vec<TraceEntry> = Vec::new();
        let mut seen_records = HashSet::new();
        let mut cursor = Some(head);
        while let Some(rec) = cursor {
            if !seen_records.insert(rec.sample_id.clone()) {
                break;
            }
            lineage.push(rec.sample_id.clone());
            entries.extend(rec.refs.entries());
            cursor = rec
                .supersedes
                .as_ref()
                .and_then(|prev| index.samples.get(prev));
        }

        let mut seen = HashSet::new();
        entries.retain(|e| seen.insert(e.id.clone()));
        entries.sort_by(|a, b| {
            (a.round, a.id.kind(), a.role).cmp(&(b.round, b.id.kind(), b.role))
        });
        Ok(Trace {
            sample_id: sample_id.to_string(),
            lineage,
            entries,
            open: head.refs.verdict.is_none(),
        })
    }

    pub fn validate_completeness(
        &self,
        sample_id: &str,
        required: &BTreeSet<ArtifactKind>,
    ) -> StoreResult<CompletenessReport> {
        let rec = self.sample(sample_id)?;
        let present: HashSet<ArtifactKind> = rec
            .refs
            .all()
            .into_iter()
            .filter(|id| self.contains(id))
            .map(|id| id.kind())
            .collect();
        let missing: Vec<ArtifactKind> = required
            .iter()
            .copied()
            .filter(|k| !present.contains(k))
            .collect();
        Ok(CompletenessReport {
            sample_id: sample_id.to_string(),
            complete: missing.is_empty(),
            missing,
        })
    }

    pub fn open_round(&self, round_id: u32, config_ref: ArtifactId) -> StoreResult<RoundRecord> {
        if !self.contains(&config_ref) {
            return Err(StoreError::DanglingRef(config_ref));
        }
        let mut index = self.index.write().expect("store index poisoned");
        if let Some(last) = index.rounds.iter().map(|r| r.round_id).max() {
            if round_id <= last {
                return Err(StoreError::RoundOrder(round_id, last));
            }
        }
        let rec = RoundRecord {
            round_id,
            config_ref,
            sample_ids: Vec::new(),
            eval_report_ref: None,
            verdict: None,
            created_at: now_rfc3339(),
        };
        self.append_round(&mut index, rec.clone())?;
        Ok(rec)
    }

    pub fn close_round(
        &self,
        round_id: u32,
        sample_ids: Vec<String>,
        eval_report_ref: Option<ArtifactId>,
        verdict: RoundVerdict,
    ) -> StoreResult<RoundRecord> {
        if let Some(id) = &eval_report_ref {
            if !self.contains(id) {
                return Err(StoreError::DanglingRef(id.clone()));
            }
        }
        let mut index = self.index.write().expect("store index poisoned");
        let open = latest_round(&index.rounds, round_id)
            .filter(|r| !r.is_closed())
            .cloned()
            .ok_or(StoreError::RoundNotOpen(round_id))?;
        let rec = RoundRecord {
            sample_ids,
            eval_report_ref,
            verdict: Some(verdict),
            created_at: now_rfc3339(),
            ..open
        };
        self.append_round(&mut index, rec.clone())?;
        Ok(rec)
    }

    fn append_round(&self, index: &mut Index, rec: RoundRecord) -> StoreResult<()> {
        let mut line = serde_json::to_string(&rec)?;
        line.push('\n');
        {
            let mut log = self.round_log.lock().expect("round log poisoned");
            log.write_all(line.as_bytes())?;
            log.flush()?;
        }
        index.rounds.push(rec);
        Ok(())
    }

    /// Latest state of every round, ordered by round id.
    pub fn rounds(&self) -> Vec<RoundRecord> {
        let index = self.index.read().expect("store index poisoned");
        let mut ids: Vec<u32> = index.rounds.iter().map(|r| r.round_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter()
            .filter_map(|id| latest_round(&index.rounds, id).cloned())
            .collect()
    }

    pub fn round(&self, round_id: u32) -> Option<RoundRecord> {
        let index = self.index.read().expect("store index poisoned");
        latest_round(&index.rounds, round_id).cloned()
    }
}

fn latest_round(rounds: &[RoundRecord], round_id: u32) -> Option<&RoundRecord> {
    rounds.iter().rev().find(|r| r.round_id == round_id)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> StoreResult<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| StoreError::CorruptIndex {
            file: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn store() -> (tempfile::TempDir, ArtifactStore) {
        let dir = tempfile::tempdir().unwrap();
        let s = ArtifactStore::open(dir.path().join("store")).unwrap();
        (dir, s)
    }

    #[test]
    fn put_is_idempotent() {
        let (_d, s) = store();
        let a = s.put(b"pixels", ArtifactKind::RgbImage).unwrap();
        let b = s.put(b"pixels", ArtifactKind::RgbImage).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest().len(), 64);
        let files: Vec<_> = walk(&s.root().join("objects"));
        assert_eq!(files.len(), 1);
    }

    #[test]
    fn distinct_bytes_distinct_ids() {
        let (_d, s) = store();
        let a = s.put(b"mask-a", ArtifactKind::Mask).unwrap();
        let b = s.put(b"mask-b", ArtifactKind::Mask).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn empty_payload_rejected() {
        let (_d, s) = store();
        assert!(matches!(
            s.put(b"", ArtifactKind::Mask),
            Err(StoreError::EmptyPayload)
        ));
    }

    #[test]
    fn thousand_blobs_round_trip() {
        let (_d, s) = store();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut kept = Vec::new();
        for _ in 0..1000 {
            let len = rng.random_range(1..200);
            let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            let id = s.put(&bytes, ArtifactKind::DiagnosticLog).unwrap();
            kept.push((id, bytes));
        }
        for (id, bytes) in kept {
            assert_eq!(s.get(&id).unwrap(), bytes);
        }
    }

    #[test]
    fn id_display_parses_back() {
        let id = ArtifactId::for_bytes(b"x", ArtifactKind::ReviewTrace);
        let parsed: ArtifactId = id.to_string().parse().unwrap();
        assert_eq!(parsed, id);
        assert!("review_trace:abc".parse::<ArtifactId>().is_err());
        assert!(format!("bogus:{}", id.digest()).parse::<ArtifactId>().is_err());
    }

    #[test]
    fn record_with_refs_is_retrievable() {
        let (_d, s) = store();
        let render = s.put(b"rgb", ArtifactKind::RgbImage).unwrap();
        let review = s.put(b"review", ArtifactKind::ReviewTrace).unwrap();
        let refs = SampleRefs {
            renders: vec![render.clone()],
            reviews: vec![review.clone()],
            ..Default::default()
        };
        s.record_sample(SampleRecord::new("s1", 0, refs)).unwrap();
        let got = s.sample("s1").unwrap();
        assert_eq!(got.refs.renders, vec![render]);
        assert_eq!(got.refs.reviews, vec![review]);
        assert!(got.created_at().is_some());
    }

    #[test]
    fn dangling_ref_is_named() {
        let (_d, s) = store();
        let ghost = ArtifactId::for_bytes(b"never stored", ArtifactKind::Mask);
        let refs = SampleRefs {
            geometry: vec![ghost.clone()],
            ..Default::default()
        };
        match s.record_sample(SampleRecord::new("s1", 0, refs)) {
            Err(StoreError::DanglingRef(id)) => assert_eq!(id, ghost),
            other => panic!("expected dangling ref, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_sample_rejected() {
        let (_d, s) = store();
        s.record_sample(SampleRecord::new("s1", 0, SampleRefs::default()))
            .unwrap();
        assert!(matches!(
            s.record_sample(SampleRecord::new("s1", 0, SampleRefs::default())),
            Err(StoreError::DuplicateSample(_))
        ));
    }

    #[test]
    fn concurrent_writers() {
        let (_d, s) = store();
        let s = Arc::new(s);
        let handles: Vec<_> = (0..4)
            .map(|w| {
                let s = Arc::clone(&s);
                std::thread::spawn(move || {
                    let mut written = Vec::new();
                    for i in 0..50 {
                        if i % 4 != w {
                            continue;
                        }
                        let id = s
                            .put(format!("render {i}").as_bytes(), ArtifactKind::RgbImage)
                            .unwrap();
                        let refs = SampleRefs {
                            renders: vec![id],
                            ..Default::default()
                        };
                        let sid = s.record_sample(SampleRecord::new(format!("s{i}"), 0, refs)).unwrap();
                        written.push(sid);
                    }
                    written
                })
            })
            .collect();
        let mut expected: BTreeSet<String> = BTreeSet::new();
        for h in handles {
            expected.extend(h.join().unwrap());
        }
        assert_eq!(expected.len(), 50);
        let root = s.root().to_path_buf();
        drop(s);
        let reopened = ArtifactStore::open(root).unwrap();
        let got: BTreeSet<String> = reopened.samples().into_iter().map(|r| r.sample_id).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn trace_orders_reviews_by_round() {
        let (_d, s) = store();
        let reviews: Vec<_> = (0..3)
            .map(|i| {
                s.put(format!("review {i}").as_bytes(), ArtifactKind::ReviewTrace)
                    .unwrap()
            })
            .collect();
        let render = s.put(b"rgb", ArtifactKind::RgbImage).unwrap();
        let refs = SampleRefs {
            renders: vec![render],
            reviews: reviews.clone(),
            ..Default::default()
        };
        s.record_sample(SampleRecord::new("s", 0, refs)).unwrap();
        let trace = s.get_trace("s").unwrap();
        let got: Vec<ArtifactId> = trace
            .of_kind(ArtifactKind::ReviewTrace)
            .into_iter()
            .cloned()
            .collect();
        assert_eq!(got, reviews);
        assert!(trace.open);
    }

    #[test]
    fn trace_includes_superseded_versions() {
        let (_d, s) = store();
        let a = s.put(b"a", ArtifactKind::RgbImage).unwrap();
        let b = s.put(b"b", ArtifactKind::RgbImage).unwrap();
        let v = s.put(b"verdict", ArtifactKind::VerdictRecord).unwrap();
        let r = s.put(b"review", ArtifactKind::ReviewTrace).unwrap();
        s.record_sample(SampleRecord::new(
            "v1",
            0,
            SampleRefs {
                renders: vec![a.clone()],
                ..Default::default()
            },
        ))
        .unwrap();
        s.supersede(
            "v1",
            SampleRecord::new(
                "v2",
                0,
                SampleRefs {
                    renders: vec![b.clone()],
                    reviews: vec![r.clone()],
                    verdict: Some(v.clone()),
                    ..Default::default()
                },
            ),
        )
        .unwrap();
        let trace = s.get_trace("v2").unwrap();
        assert_eq!(trace.lineage, vec!["v2", "v1"]);
        assert_eq!(trace.ids(), [a, b, v, r].into_iter().collect());
        assert!(!trace.open);
        // The old version is untouched.
        assert_eq!(s.sample("v1").unwrap().refs.verdict, None);
    }

    #[test]
    fn completeness_reports_missing_kinds() {
        let (_d, s) = store();
        let rgb = s.put(b"rgb", ArtifactKind::RgbImage).unwrap();
        let mask = s.put(b"mask", ArtifactKind::Mask).unwrap();
        let depth = s.put(b"depth", ArtifactKind::DepthMap).unwrap();
        let required: BTreeSet<_> = [
            ArtifactKind::RgbImage,
            ArtifactKind::Mask,
            ArtifactKind::DepthMap,
        ]
        .into_iter()
        .collect();
        s.record_sample(SampleRecord::new(
            "full",
            0,
            SampleRefs {
                renders: vec![rgb.clone()],
                geometry: vec![mask.clone(), depth],
                ..Default::default()
            },
        ))
        .unwrap();
        s.record_sample(SampleRecord::new(
            "partial",
            0,
            SampleRefs {
                renders: vec![rgb],
                geometry: vec![mask],
                ..Default::default()
            },
        ))
        .unwrap();
        let full = s.validate_completeness("full", &required).unwrap();
        assert!(full.complete && full.missing.is_empty());
        let partial = s.validate_completeness("partial", &required).unwrap();
        assert!(!partial.complete);
        assert_eq!(partial.missing, vec![ArtifactKind::DepthMap]);
        assert!(matches!(
            s.validate_completeness("nope", &required),
            Err(StoreError::UnknownSample(_))
        ));
    }

    #[test]
    fn rounds_strictly_increase_and_close() {
        let (_d, s) = store();
        let cfg = s.put(b"cfg", ArtifactKind::DiagnosticLog).unwrap();
        s.open_round(1, cfg.clone()).unwrap();
        assert!(matches!(
            s.open_round(1, cfg.clone()),
            Err(StoreError::RoundOrder(1, 1))
        ));
        assert!(matches!(
            s.close_round(2, vec![], None, RoundVerdict::Continue),
            Err(StoreError::RoundNotOpen(2))
        ));
        s.close_round(1, vec!["a".into()], None, RoundVerdict::Continue)
            .unwrap();
        assert!(s.round(1).unwrap().is_closed());
        s.open_round(2, cfg).unwrap();
        assert_eq!(s.rounds().len(), 2);
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }
}
