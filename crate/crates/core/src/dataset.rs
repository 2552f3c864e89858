//! Append-only JSONL manifests of samples, balance reports, instruction-tuning
//! export and ingestion of externally labeled images.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{
    CameraObjectRelation, ClassTriple, OrientationClass, RelationAxis, RelationClass, ShotClass, ViewpointClass,
};
use crate::prompt::PromptBundle;
use crate::vqa::{make_axis_vqa, QaTemplateSet, VqaError, VqaItem};

pub const MANIFEST_SCHEMA: &str = "ultima.manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate sample id {0}")]
    DuplicateSample(String),
    #[error("unknown sample id {0}")]
    UnknownSample(String),
    #[error("asset {asset_id} is already used by the {existing} split")]
    SplitOverlap { asset_id: String, existing: Split },
    #[error("invalid record {sample_id}: {message}")]
    InvalidRecord { sample_id: String, message: String },
    #[error("review status of {sample_id} cannot change from {from:?} to {to:?}")]
    ReviewTransition {
        sample_id: String,
        from: ReviewStatus,
        to: ReviewStatus,
    },
    #[error("manifest {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("labels file line {line}: {message}")]
    Labels { line: usize, message: String },
    #[error("image file {0} does not exist")]
    MissingImage(PathBuf),
    #[error(transparent)]
    Vqa(#[from] VqaError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Benchmark,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Benchmark => "benchmark",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    #[default]
    Pending,
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    #[default]
    Synthetic,
    Real,
}

/// Per-axis labels; real images may carry only some of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, Serialize, Deserialize)]
pub struct PartialClasses {
    pub orientation: Option<OrientationClass>,
    pub viewpoint: Option<ViewpointClass>,
    pub shot: Option<ShotClass>,
}

impl From<ClassTriple> for PartialClasses {
    fn from(t: ClassTriple) -> Self {
        Self {
            orientation: Some(t.orientation),
            viewpoint: Some(t.viewpoint),
            shot: Some(t.shot),
        }
    }
}

impl PartialClasses {
    /// Canonical class index on `axis`, if labeled.
    pub fn index(&self, axis: RelationAxis) -> Option<usize> {
        match axis {
            RelationAxis::Orientation => self.orientation.map(RelationClass::index),
            RelationAxis::Viewpoint => self.viewpoint.map(RelationClass::index),
            RelationAxis::Shot => self.shot.map(RelationClass::index),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    /// Empty for real images.
    pub asset_id: String,
    pub category: String,
    pub source: SampleSource,
    pub beta: Option<CameraObjectRelation>,
    pub classes: PartialClasses,
    pub prompt: Option<PromptBundle>,
    pub image_path: String,
    /// Conditioning images by kind (`rgb`, `depth`, `mask`, `canny`).
    pub prior_paths: BTreeMap<String, String>,
    pub qas: Vec<VqaItem>,
    pub split: Split,
    pub review: ReviewStatus,
    /// Regeneration counter folded into the id and seed.
    pub attempt: u32,
}

impl SampleRecord {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let fail = |message: String| DatasetError::InvalidRecord {
            sample_id: self.sample_id.clone(),
            message,
        };
        if self.sample_id.is_empty() {
            return Err(fail("empty sample id".into()));
        }
        if let Some(beta) = &self.beta {
            let truth = PartialClasses::from(beta.classes());
            for axis in RelationAxis::ALL {
                if let Some(c) = self.classes.index(axis) {
                    if Some(c) != truth.index(axis) {
                        return Err(fail(format!("{axis} label disagrees with beta")));
                    }
                }
            }
        }
        for (i, qa) in self.qas.iter().enumerate() {
            qa.validate().map_err(|m| fail(format!("qa {i}: {m}")))?;
            if let (Some(idx), Some(truth)) = (qa.answer_index, self.classes.index(qa.task)) {
                if qa.task.class_index(&qa.options[idx]) != Some(truth) {
                    return Err(fail(format!("qa {i}: answer is not the labeled {} class", qa.task)));
                }
            }
        }
        Ok(())
    }
}

/// Hex id of a synthetic sample, stable across runs.
pub fn sample_id_for(asset_id: &str, classes: &ClassTriple, attempt: u32) -> String {
    let mut h = Sha256::new();
    h.update(asset_id.as_bytes());
    for part in [
        classes.orientation.display_name(),
        classes.viewpoint.display_name(),
        classes.shot.display_name(),
    ] {
        h.update([0u8]);
        h.update(part.as_bytes());
    }
    h.update([0u8]);
    h.update(attempt.to_string().as_bytes());
    hex::encode(&h.finalize()[..16])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub schema: String,
    pub version: u32,
    pub config_digest: String,
}

impl ManifestHeader {
    pub fn new(config_digest: impl Into<String>) -> Self {
        Self {
            schema: MANIFEST_SCHEMA.into(),
            version: MANIFEST_VERSION,
            config_digest: config_digest.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Header(ManifestHeader),
    Record(Box<SampleRecord>),
    Review { sample_id: String, status: ReviewStatus },
}

/// In-memory view of a manifest with review events applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    records: Vec<SampleRecord>,
    index: HashMap<String, usize>,
    asset_split: HashMap<String, Split>,
}

impl Manifest {
    pub fn new(header: ManifestHeader) -> Self {
        Self {
            header,
            records: Vec::new(),
            index: HashMap::new(),
            asset_split: HashMap::new(),
        }
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&SampleRecord> {
        self.index.get(sample_id).map(|&i| &self.records[i])
    }

    pub fn contains(&self, sample_id: &str) -> bool {
        self.index.contains_key(sample_id)
    }

    /// Check that `record` could be appended without changing anything.
    pub fn check_append(&self, record: &SampleRecord) -> Result<(), DatasetError> {
        record.validate()?;
        if self.index.contains_key(&record.sample_id) {
            return Err(DatasetError::DuplicateSample(record.sample_id.clone()));
        }
        if !record.asset_id.is_empty() {
            if let Some(&existing) = self.asset_split.get(&record.asset_id) {
                if existing != record.split {
                    return Err(DatasetError::SplitOverlap {
                        asset_id: record.asset_id.clone(),
                        existing,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn append(&mut self, record: SampleRecord) -> Result<(), DatasetError> {
        self.check_append(&record)?;
        if !record.asset_id.is_empty() {
            self.asset_split.insert(record.asset_id.clone(), record.split);
        }
        self.index.insert(record.sample_id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn check_review(&self, sample_id: &str, status: ReviewStatus) -> Result<(), DatasetError> {
        let record = self
            .get(sample_id)
            .ok_or_else(|| DatasetError::UnknownSample(sample_id.to_string()))?;
        if record.review != ReviewStatus::Pending || status == ReviewStatus::Pending {
            return Err(DatasetError::ReviewTransition {
                sample_id: sample_id.to_string(),
                from: record.review,
                to: status,
            });
        }
        Ok(())
    }

    /// Move a pending record to accepted or rejected.
    pub fn set_review(&mut self, sample_id: &str, status: ReviewStatus) -> Result<(), DatasetError> {
        self.check_review(sample_id, status)?;
        let i = self.index[sample_id];
        self.records[i].review = status;
        Ok(())
    }

    /// Compact serialization: header then one line per record with its
    /// current review status.
    pub fn to_jsonl(&self) -> String {
        let mut out = line_json(&Line::Header(self.header.clone()));
        for r in &self.records {
            out.push_str(&line_json(&Line::Record(Box::new(r.clone()))));
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, DatasetError> {
        let mut manifest: Option<Manifest> = None;
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let perr = |message: String| DatasetError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message,
            };
            let line: Line = serde_json::from_str(raw).map_err(|e| perr(e.to_string()))?;
            match (line, manifest.as_mut()) {
                (Line::Header(h), None) => {
                    if h.schema != MANIFEST_SCHEMA || h.version != MANIFEST_VERSION {
                        return Err(perr(format!("unsupported schema {} v{}", h.schema, h.version)));
                    }
                    manifest = Some(Manifest::new(h));
                }
                (Line::Header(_), Some(_)) => return Err(perr("second header".into())),
                (_, None) => return Err(perr("first line must be the header".into())),
                (Line::Record(r), Some(m)) => m.append(*r).map_err(|e| perr(e.to_string()))?,
                (Line::Review { sample_id, status }, Some(m)) => {
                    m.set_review(&sample_id, status).map_err(|e| perr(e.to_string()))?
                }
            }
        }
        manifest.ok_or_else(|| DatasetError::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "empty manifest".into(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, path)
    }
}

fn line_json(line: &Line) -> String {
    let mut s = serde_json::to_string(line).expect("manifest lines serialize");
    s.push('\n');
    s
}

/// Single writer for a manifest file. Holds an exclusive lock on the file
/// and makes every line durable before returning.
pub struct ManifestWriter {
    path: PathBuf,
    file: File,
    manifest: Manifest,
}

impl ManifestWriter {
    /// Open `path` for appending, creating it with `header` when missing.
    /// An existing manifest is replayed and its header kept.
    pub fn open(path: &Path, header: ManifestHeader) -> Result<Self, DatasetError> {
        let exists = path.exists() && std::fs::metadata(path).map_err(io_err(path))?.len() > 0;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .read(true)
            .open(path)
            .map_err(io_err(path))?;
        match file.try_lock() {
            Ok(()) => {}
            Err(std::fs::TryLockError::WouldBlock) => return Err(DatasetError::Locked(path.to_path_buf())),
            Err(std::fs::TryLockError::Error(e)) => return Err(io_err(path)(e)),
        }
        let manifest = if exists {
            let mut text = String::new();
            for line in BufReader::new(&file).lines() {
                text.push_str(&line.map_err(io_err(path))?);
                text.push('\n');
            }
            Manifest::parse(&text, path)?
        } else {
            Manifest::new(header)
        };
        let mut writer = Self {
            path: path.to_path_buf(),
            file,
            manifest,
        };
        if !exists {
            let header = Line::Header(writer.manifest.header.clone());
            writer.write_line(&header)?;
        }
        Ok(writer)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn write_line(&mut self, line: &Line) -> Result<(), DatasetError> {
        let text = line_json(line);
        self.file.write_all(text.as_bytes()).map_err(io_err(&self.path))?;
        self.file.flush().map_err(io_err(&self.path))?;
        self.file.sync_data().map_err(io_err(&self.path))
    }

    pub fn append(&mut self, record: SampleRecord) -> Result<(), DatasetError> {
        self.manifest.check_append(&record)?;
        self.write_line(&Line::Record(Box::new(record.clone())))?;
        self.manifest.append(record)
    }

    pub fn set_review(&mut self, sample_id: &str, status: ReviewStatus) -> Result<(), DatasetError> {
        self.manifest.check_review(sample_id, status)?;
        self.write_line(&Line::Review {
            sample_id: sample_id.to_string(),
            status,
        })?;
        self.manifest.set_review(sample_id, status)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisBalance {
    pub axis: RelationAxis,
    /// Count per class in canonical order.
    pub counts: Vec<(String, usize)>,
    /// max/min over classes; `None` when any class is empty.
    pub ratio: Option<f64>,
    pub uniform: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub split: Option<Split>,
    pub records: usize,
    pub tolerance: f64,
    pub axes: Vec<AxisBalance>,
    pub uniform: bool,
}

/// Per-axis class histograms over non-rejected records (all splits when
/// `split` is `None`). An axis is uniform when every class is empty or
/// max/min is within `tolerance`.
pub fn check_balance(manifest: &Manifest, split: Option<Split>, tolerance: f64) -> BalanceReport {
    let selected: Vec<&SampleRecord> = manifest
        .records()
        .iter()
        .filter(|r| r.review != ReviewStatus::Rejected && split.is_none_or(|s| r.split == s))
        .collect();
    let axes: Vec<AxisBalance> = RelationAxis::ALL
        .iter()
        .map(|&axis| {
            let names = axis.class_names();
            let mut counts = vec![0usize; names.len()];
            for r in &selected {
                if let Some(c) = r.classes.index(axis) {
                    counts[c] += 1;
                }
            }
            let max = *counts.iter().max().expect("non-empty axis");
            let min = *counts.iter().min().expect("non-empty axis");
            let ratio = (min > 0).then(|| max as f64 / min as f64);
            let uniform = max == 0 || ratio.is_some_and(|r| r <= tolerance);
            AxisBalance {
                axis,
                counts: names.iter().map(|n| n.to_string()).zip(counts).collect(),
                ratio,
                uniform,
            }
        })
        .collect();
    BalanceReport {
        split,
        records: selected.len(),
        tolerance,
        uniform: axes.iter().all(|a| a.uniform),
        axes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewFilter {
    AcceptedOnly,
    AcceptedAndPending,
}

impl ReviewFilter {
    pub fn default_for(split: Split) -> Self {
        match split {
            Split::Train => ReviewFilter::AcceptedAndPending,
            Split::Benchmark => ReviewFilter::AcceptedOnly,
        }
    }

    pub fn admits(self, status: ReviewStatus) -> bool {
        match self {
            ReviewFilter::AcceptedOnly => status == ReviewStatus::Accepted,
            ReviewFilter::AcceptedAndPending => status != ReviewStatus::Rejected,
        }
    }
}

/// Conversation objects, one per QA, in manifest then QA order.
pub fn instruction_objects(manifest: &Manifest, split: Split, filter: ReviewFilter) -> Vec<serde_json::Value> {
    let mut out = Vec::new();
    for r in manifest.records() {
        if r.split != split || !filter.admits(r.review) {
            continue;
        }
        for (i, qa) in r.qas.iter().enumerate() {
            out.push(json!({
                "id": format!("{}_{}", r.sample_id, i),
                "image": r.image_path,
                "conversations": [
                    {"from": "human", "value": format!("<image>\n{}", qa.render_prompt())},
                    {"from": "gpt", "value": qa.answer},
                ],
                "task": qa.task,
            }));
        }
    }
    out
}

/// Write a JSON array of conversation objects; returns how many.
pub fn export_instruction_json(
    manifest: &Manifest,
    split: Split,
    filter: ReviewFilter,
    out_path: &Path,
) -> Result<usize, DatasetError> {
    let objects = instruction_objects(manifest, split, filter);
    let mut text = serde_json::to_string_pretty(&objects).expect("json values serialize");
    text.push('\n');
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(out_path, text).map_err(io_err(out_path))?;
    Ok(objects.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOptions {
    pub category: String,
    pub split: Split,
    /// Downsample every label bin to the size of the smallest one.
    pub resample: bool,
    pub seed: u64,
    pub templates: QaTemplateSet,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            category: "person".into(),
            split: Split::Benchmark,
            resample: false,
            seed: 0,
            templates: QaTemplateSet::default(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct LabelRow {
    image: String,
    #[serde(default)]
    orientation: String,
    #[serde(default)]
    viewpoint: String,
    #[serde(default)]
    shot: String,
}

fn parse_label<C: RelationClass>(text: &str, line: usize) -> Result<Option<C>, DatasetError> {
    let t = text.trim();
    if t.is_empty() {
        return Ok(None);
    }
    C::from_name(t).map(Some).ok_or_else(|| DatasetError::Labels {
        line,
        message: format!("unknown {} class {t:?}", C::AXIS),
    })
}

fn stable_u64(text: &str) -> u64 {
    let d = Sha256::digest(text.as_bytes());
    u64::from_be_bytes(d[..8].try_into().expect("32-byte digest"))
}

/// Build records for real images listed in a CSV with columns
/// `image,orientation,viewpoint,shot` (empty cells mean unlabeled). Each
/// record gets one template QA per labeled axis.
pub fn ingest_labeled_images(
    dir: &Path,
    labels: &Path,
    options: &IngestOptions,
) -> Result<Vec<SampleRecord>, DatasetError> {
    options.templates.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(labels)
        .map_err(|e| DatasetError::Labels {
            line: 0,
            message: e.to_string(),
        })?;
    let mut rows = Vec::new();
    for (n, row) in reader.deserialize::<LabelRow>().enumerate() {
        let line = n + 2;
        let row = row.map_err(|e| DatasetError::Labels {
            line,
            message: e.to_string(),
        })?;
        let classes = PartialClasses {
            orientation: parse_label(&row.orientation, line)?,
            viewpoint: parse_label(&row.viewpoint, line)?,
            shot: parse_label(&row.shot, line)?,
        };
        let path = dir.join(&row.image);
        if !path.is_file() {
            return Err(DatasetError::MissingImage(path));
        }
        rows.push((row.image, path, classes));
    }

    let mut keep: Vec<bool> = vec![true; rows.len()];
    if options.resample {
        let mut bins: BTreeMap<[Option<usize>; 3], Vec<usize>> = BTreeMap::new();
        for (i, (_, _, c)) in rows.iter().enumerate() {
            let key = RelationAxis::ALL.map(|axis| c.index(axis));
            bins.entry(key).or_default().push(i);
        }
        let smallest = bins.values().map(Vec::len).min().unwrap_or(0);
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        for members in bins.values() {
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut rng);
            for &i in &shuffled[smallest..] {
                keep[i] = false;
            }
        }
    }

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for ((name, path, classes), kept) in rows.into_iter().zip(keep) {
        if !kept {
            continue;
        }
        let sample_id = format!("real-{}", &hex::encode(Sha256::digest(name.as_bytes()))[..24]);
        if !seen.insert(sample_id.clone()) {
            return Err(DatasetError::DuplicateSample(sample_id));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ stable_u64(&name));
        let mut qas = Vec::new();
        for axis in RelationAxis::ALL {
            if let Some(truth) = classes.index(axis) {
                qas.push(make_axis_vqa(
                    axis,
                    truth,
                    &options.category,
                    &mut rng,
                    &options.templates,
                    &sample_id,
                )?);
            }
        }
        records.push(SampleRecord {
            sample_id,
            asset_id: String::new(),
            category: options.category.clone(),
            source: SampleSource::Real,
            beta: None,
            classes,
            prompt: None,
            image_path: path.to_string_lossy().into_owned(),
            prior_paths: BTreeMap::new(),
            qas,
            split: options.split,
            review: ReviewStatus::Pending,
            attempt: 0,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{enumerate_relation_grid, GridSpec};
    use crate::vqa::make_template_vqas;
    use proptest::prelude::*;

    pub(crate) fn synthetic(asset: &str, beta: CameraObjectRelation, split: Split) -> SampleRecord {
        let classes = beta.classes();
        let sample_id = sample_id_for(asset, &classes, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(stable_u64(&sample_id));
        let qas = make_template_vqas(&beta, "mug", &mut rng, &QaTemplateSet::default(), &sample_id).unwrap();
        SampleRecord {
            image_path: format!("images/{sample_id}.png"),
            sample_id,
            asset_id: asset.into(),
            category: "mug".into(),
            source: SampleSource::Synthetic,
            beta: Some(beta),
            classes: classes.into(),
            prompt: None,
            prior_paths: BTreeMap::new(),
            qas,
            split,
            review: ReviewStatus::Pending,
            attempt: 0,
        }
    }

    fn grid_manifest(assets: usize) -> Manifest {
        let mut m = Manifest::new(ManifestHeader::new("test"));
        for a in 0..assets {
            for beta in enumerate_relation_grid(&GridSpec::default()).unwrap() {
                m.append(synthetic(&format!("asset{a}"), beta, Split::Train)).unwrap();
            }
        }
        m
    }

    fn front() -> CameraObjectRelation {
        CameraObjectRelation::from_degrees(180.0, 0.0, 1.0).unwrap()
    }

    #[test]
    fn append_rules() {
        let mut m = Manifest::new(ManifestHeader::new("x"));
        m.append(synthetic("a", front(), Split::Train)).unwrap();
        assert_eq!(m.len(), 1);
        assert!(matches!(
            m.append(synthetic("a", front(), Split::Train)),
            Err(DatasetError::DuplicateSample(_))
        ));
        let other = CameraObjectRelation::from_degrees(0.0, 0.0, 1.0).unwrap();
        assert!(matches!(
            m.append(synthetic("a", other, Split::Benchmark)),
            Err(DatasetError::SplitOverlap { .. })
        ));
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn inconsistent_labels_rejected() {
        let mut r = synthetic("a", front(), Split::Train);
        r.classes.orientation = Some(OrientationClass::Back);
        assert!(matches!(r.validate(), Err(DatasetError::InvalidRecord { .. })));
    }

    #[test]
    fn balance_of_full_grid() {
        let report = check_balance(&grid_manifest(5), Some(Split::Train), 1.0);
        assert!(report.uniform);
        let counts = |i: usize| report.axes[i].counts.iter().map(|c| c.1).collect::<Vec<_>>();
        assert_eq!(counts(0), vec![45; 8]);
        assert_eq!(counts(1), vec![120; 3]);
        assert_eq!(counts(2), vec![120; 3]);
    }

    #[test]
    fn balance_edge_cases() {
        let empty = Manifest::new(ManifestHeader::new("x"));
        let report = check_balance(&empty, None, 1.0);
        assert!(report.uniform);
        assert!(report.axes.iter().all(|a| a.counts.iter().all(|c| c.1 == 0)));

        let mut m = grid_manifest(1);
        let mut extra = synthetic("other", front(), Split::Train);
        extra.sample_id = "extra".into();
        m.append(extra).unwrap();
        assert!(!check_balance(&m, None, 1.0).uniform);
        m.set_review("extra", ReviewStatus::Rejected).unwrap();
        assert!(check_balance(&m, None, 1.0).uniform);
    }

    #[test]
    fn review_transitions() {
        let mut m = grid_manifest(1);
        let id = m.records()[0].sample_id.clone();
        m.set_review(&id, ReviewStatus::Accepted).unwrap();
        assert!(matches!(
            m.set_review(&id, ReviewStatus::Rejected),
            Err(DatasetError::ReviewTransition { .. })
        ));
        assert!(matches!(
            m.set_review("nope", ReviewStatus::Accepted),
            Err(DatasetError::UnknownSample(_))
        ));
    }

    #[test]
    fn export_counts_and_filters() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest::new(ManifestHeader::new("x"));
        m.append(synthetic("a", front(), Split::Train)).unwrap();
        let out = dir.path().join("train.json");
        assert_eq!(
            export_instruction_json(&m, Split::Train, ReviewFilter::default_for(Split::Train), &out).unwrap(),
            3
        );
        let id = m.records()[0].sample_id.clone();
        m.set_review(&id, ReviewStatus::Rejected).unwrap();
        assert_eq!(
            export_instruction_json(&m, Split::Train, ReviewFilter::default_for(Split::Train), &out).unwrap(),
            0
        );
        let mut b = Manifest::new(ManifestHeader::new("x"));
        b.append(synthetic("b", front(), Split::Benchmark)).unwrap();
        let filter = ReviewFilter::default_for(Split::Benchmark);
        assert!(instruction_objects(&b, Split::Benchmark, filter).is_empty());
        let id = b.records()[0].sample_id.clone();
        b.set_review(&id, ReviewStatus::Accepted).unwrap();
        assert_eq!(instruction_objects(&b, Split::Benchmark, filter).len(), 3);
    }

    #[test]
    fn writer_is_durable_and_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut w = ManifestWriter::open(&path, ManifestHeader::new("d")).unwrap();
        w.append(synthetic("a", front(), Split::Train)).unwrap();
        let id = w.manifest().records()[0].sample_id.clone();
        w.set_review(&id, ReviewStatus::Accepted).unwrap();
        assert!(matches!(
            ManifestWriter::open(&path, ManifestHeader::new("d")),
            Err(DatasetError::Locked(_))
        ));
        let loaded = Manifest::load(&path).unwrap();
        assert_eq!(&loaded, w.manifest());
        drop(w);
        let reopened = ManifestWriter::open(&path, ManifestHeader::new("other")).unwrap();
        assert_eq!(reopened.manifest().header.config_digest, "d");
        assert_eq!(reopened.manifest().records()[0].review, ReviewStatus::Accepted);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let p = Path::new("m.jsonl");
        let header = line_json(&Line::Header(ManifestHeader::new("x")));
        match Manifest::parse(&format!("{header}{{not json\n"), p) {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(Manifest::parse("", p).is_err());
        let rec = line_json(&Line::Record(Box::new(synthetic("a", front(), Split::Train))));
        assert!(matches!(
            Manifest::parse(&rec, p),
            Err(DatasetError::Parse { line: 1, .. })
        ));
    }

    fn write_labels(dir: &Path, rows: &[(&str, &str)]) -> PathBuf {
        let mut csv = String::from("image,orientation,viewpoint,shot\n");
        for (img, o) in rows {
            std::fs::write(dir.join(img), b"x").unwrap();
            csv.push_str(&format!("{img},{o},,\n"));
        }
        let path = dir.join("labels.csv");
        std::fs::write(&path, csv).unwrap();
        path
    }

    #[test]
    fn ingest_with_resampling() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<(String, &str)> = (0..5)
            .map(|i| (format!("f{i}.png"), "Front"))
            .chain((0..2).map(|i| (format!("b{i}.png"), "Back")))
            .collect();
        let borrowed: Vec<(&str, &str)> = rows.iter().map(|(a, b)| (a.as_str(), *b)).collect();
        let labels = write_labels(dir.path(), &borrowed);
        let opts = IngestOptions {
            resample: true,
            ..IngestOptions::default()
        };
        let recs = ingest_labeled_images(dir.path(), &labels, &opts).unwrap();
        let fronts = recs
            .iter()
            .filter(|r| r.classes.orientation == Some(OrientationClass::Front))
            .count();
        assert_eq!((fronts, recs.len() - fronts), (2, 2));
        for r in &recs {
            assert_eq!(r.qas.len(), 1);
            assert_eq!(r.qas[0].task, RelationAxis::Orientation);
            r.validate().unwrap();
        }
        assert_eq!(recs, ingest_labeled_images(dir.path(), &labels, &opts).unwrap());

        let balanced: Vec<(&str, &str)> = vec![
            ("a.png", "Front"),
            ("b.png", "Front"),
            ("c.png", "Front"),
            ("d.png", "Back"),
            ("e.png", "Back"),
            ("f.png", "Back"),
        ];
        let labels = write_labels(dir.path(), &balanced);
        assert_eq!(ingest_labeled_images(dir.path(), &labels, &opts).unwrap().len(), 6);
    }

    #[test]
    fn ingest_errors() {
        let dir = tempfile::tempdir().unwrap();
        let labels = write_labels(dir.path(), &[("a.png", "Forward")]);
        assert!(matches!(
            ingest_labeled_images(dir.path(), &labels, &IngestOptions::default()),
            Err(DatasetError::Labels { line: 2, .. })
        ));
        let labels = dir.path().join("missing.csv");
        std::fs::write(&labels, "image,orientation,viewpoint,shot\nnope.png,Front,,\n").unwrap();
        assert!(matches!(
            ingest_labeled_images(dir.path(), &labels, &IngestOptions::default()),
            Err(DatasetError::MissingImage(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn manifest_round_trip(
            picks in prop::collection::vec((0usize..72, 0usize..4, any::<bool>()), 0..20),
            category in "\\PC{1,12}",
        ) {
            let grid = enumerate_relation_grid(&GridSpec::default()).unwrap();
            let mut m = Manifest::new(ManifestHeader::new("digest"));
            for (g, a, bench) in picks {
                let split = if bench { Split::Benchmark } else { Split::Train };
                let mut r = synthetic(&format!("asset{a}"), grid[g], split);
                r.category = category.clone();
                let _ = m.append(r);
            }
            let text = m.to_jsonl();
            let back = Manifest::parse(&text, Path::new("p")).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(back.to_jsonl(), text);
            let mut splits: HashMap<&str, Split> = HashMap::new();
            for r in m.records() {
                let prev = splits.insert(&r.asset_id, r.split);
                prop_assert!(prev.is_none_or(|p| p == r.split));
            }
        }
    }
}
