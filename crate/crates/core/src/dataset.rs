//! On-disk dataset: a JSON manifest plus PNG images and RLE or heatmap
//! ground truth, with paths relative to the manifest file.
//!
//! ```json
//! {"schema_version": 1,
//!  "vocabulary": {"affordances": ["grasp", "cut"], "task_phrases": {}},
//!  "object_vocabulary": ["knife"],
//!  "records": [{"sample_id": "knife_01", "rgb": "rgb/knife_01.png",
//!               "depth": "depth/knife_01.png", "object": "knife",
//!               "gt": {"grasp": {"mask_rle": {"width": 64, "height": 48, "rle": [...]}},
//!                      "cut": {"heatmap": "heatmaps/knife_01_cut.png"}}}]}
//! ```
//!
//! Task phrases missing from the manifest fall back to [`default_task_phrase`].

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imageio::{self, ImageIoError};
use crate::model::{AffordanceVocabulary, BinaryMask, DepthImage, RgbImage, SaliencyMap};
use crate::rle::{RleError, RleMask};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed manifest: {reason}")]
    Parse { path: String, reason: String },
    #[error("unsupported schema_version {0}")]
    SchemaVersion(u32),
    #[error("record {sample_id:?}: {reason}")]
    Record { sample_id: String, reason: String },
    #[error("invalid manifest: {0}")]
    Invalid(String),
    #[error("record {sample_id:?} has no ground truth for {affordance:?}")]
    NoGroundTruth { sample_id: String, affordance: String },
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error(transparent)]
    Rle(#[from] RleError),
}

pub fn default_task_phrase(affordance: &str) -> Option<&'static str> {
    Some(match affordance {
        "grasp" => "grasp the object",
        "cut" => "cut something with the object",
        "scoop" => "scoop something with the object",
        "contain" => "use the object to contain something",
        "pound" => "pound something with the object",
        "support" => "support something with the object",
        "wrap-grasp" => "hold the object by wrapping your hand around it",
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GroundTruthSpec {
    MaskRle(RleMask),
    Heatmap(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffordanceRecord {
    pub sample_id: String,
    pub rgb: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<PathBuf>,
    pub object: String,
    pub gt: BTreeMap<String, GroundTruthSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabularyFile {
    affordances: Vec<String>,
    #[serde(default)]
    task_phrases: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    schema_version: u32,
    vocabulary: VocabularyFile,
    object_vocabulary: Vec<String>,
    records: Vec<AffordanceRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub schema_version: u32,
    pub vocabulary: AffordanceVocabulary,
    pub object_vocabulary: Vec<String>,
    pub records: Vec<AffordanceRecord>,
}

/// Loaded ground truth for one `(record, affordance)` pair.
#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruth {
    Mask(BinaryMask),
    Heatmap(SaliencyMap),
}

impl GroundTruth {
    /// Binary view used for the F-score: heatmaps are cut at half their peak.
    pub fn binary(&self) -> BinaryMask {
        match self {
            GroundTruth::Mask(m) => m.clone(),
            GroundTruth::Heatmap(h) => crate::metrics::fixations_from_heatmap(h),
        }
    }

    pub fn heatmap(&self) -> Option<&SaliencyMap> {
        match self {
            GroundTruth::Heatmap(h) => Some(h),
            GroundTruth::Mask(_) => None,
        }
    }
}

impl Manifest {
    fn from_file(file: ManifestFile) -> Result<Manifest, DatasetError> {
        if file.schema_version != SCHEMA_VERSION {
            return Err(DatasetError::SchemaVersion(file.schema_version));
        }
        let mut task_phrases = file.vocabulary.task_phrases;
        for a in &file.vocabulary.affordances {
            if !task_phrases.contains_key(a) {
                let phrase = default_task_phrase(a).ok_or_else(|| {
                    DatasetError::Invalid(format!("affordance {a:?} has no task phrase and no default"))
                })?;
                task_phrases.insert(a.clone(), phrase.to_string());
            }
        }
        let m = Manifest {
            schema_version: file.schema_version,
            vocabulary: AffordanceVocabulary {
                affordances: file.vocabulary.affordances,
                task_phrases,
            },
            object_vocabulary: file.object_vocabulary,
            records: file.records,
        };
        m.validate_structure()?;
        Ok(m)
    }

    fn to_file(&self) -> ManifestFile {
        ManifestFile {
            schema_version: self.schema_version,
            vocabulary: VocabularyFile {
                affordances: self.vocabulary.affordances.clone(),
                task_phrases: self.vocabulary.task_phrases.clone(),
            },
            object_vocabulary: self.object_vocabulary.clone(),
            records: self.records.clone(),
        }
    }

    /// Checks everything that does not touch the filesystem.
    pub fn validate_structure(&self) -> Result<(), DatasetError> {
        self.vocabulary
            .validate()
            .map_err(|e| DatasetError::Invalid(e.to_string()))?;
        if self.object_vocabulary.is_empty() {
            return Err(DatasetError::Invalid("object_vocabulary is empty".into()));
        }
        let mut ids = BTreeSet::new();
        for r in &self.records {
            let fail = |reason: String| DatasetError::Record {
                sample_id: r.sample_id.clone(),
                reason,
            };
            if r.sample_id.is_empty() {
                return Err(DatasetError::Invalid("record with empty sample_id".into()));
            }
            if !ids.insert(r.sample_id.as_str()) {
                return Err(fail("duplicate sample_id".into()));
            }
            if !self.object_vocabulary.iter().any(|o| o == &r.object) {
                return Err(fail(format!("object {:?} is not in object_vocabulary", r.object)));
            }
            if r.gt.is_empty() {
                return Err(fail("no ground-truth affordances".into()));
            }
            for (aff, spec) in &r.gt {
                if !self.vocabulary.contains(aff) {
                    return Err(fail(format!("affordance {aff:?} is not in the vocabulary")));
                }
                if let GroundTruthSpec::MaskRle(rle) = spec {
                    let sum = rle
                        .rle
                        .iter()
                        .try_fold(0u64, |acc, c| u64::try_from(*c).ok().and_then(|c| acc.checked_add(c)));
                    if sum != Some((rle.width * rle.height) as u64) {
                        return Err(fail(format!("mask_rle for {aff:?} does not cover {}x{}", rle.width, rle.height)));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn record(&self, sample_id: &str) -> Option<&AffordanceRecord> {
        self.records.iter().find(|r| r.sample_id == sample_id)
    }
}

/// A validated manifest together with the directory its paths resolve
/// against. Decoded images and ground truth are cached on first access.
#[derive(Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    root: PathBuf,
    gt_cache: BTreeMap<(String, String), OnceLock<GroundTruth>>,
}

fn image_dimensions(path: &Path) -> Result<(usize, usize), DatasetError> {
    let (w, h) = image::image_dimensions(path).map_err(|e| match e {
        image::ImageError::IoError(source) => DatasetError::Io {
            path: path.display().to_string(),
            source,
        },
        other => DatasetError::Image(ImageIoError::Decode(format!("{}: {other}", path.display()))),
    })?;
    Ok((w as usize, h as usize))
}

pub fn load_manifest(path: &Path) -> Result<Dataset, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: ManifestFile = serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let manifest = Manifest::from_file(file)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Dataset::new(manifest, root)
}

/// Pretty-printed manifest JSON with a trailing newline.
pub fn manifest_json(manifest: &Manifest) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(&manifest.to_file()).expect("manifest serializes");
    text.push('\n');
    text.into_bytes()
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<(), DatasetError> {
    imageio::write_file(path, &manifest_json(manifest))?;
    Ok(())
}

impl Dataset {
    /// Validates `manifest` against the files under `root`: every referenced
    /// file must exist and every image must share the RGB dimensions.
    pub fn new(manifest: Manifest, root: PathBuf) -> Result<Dataset, DatasetError> {
        manifest.validate_structure()?;
        let mut gt_cache = BTreeMap::new();
        for r in &manifest.records {
            let fail = |reason: String| DatasetError::Record {
                sample_id: r.sample_id.clone(),
                reason,
            };
            let dims = image_dimensions(&root.join(&r.rgb)).map_err(|e| fail(format!("rgb: {e}")))?;
            if let Some(d) = &r.depth {
                let dd = image_dimensions(&root.join(d)).map_err(|e| fail(format!("depth: {e}")))?;
                if dd != dims {
                    return Err(fail(format!("depth is {}x{}, rgb is {}x{}", dd.0, dd.1, dims.0, dims.1)));
                }
            }
            for (aff, spec) in &r.gt {
                let gd = match spec {
                    GroundTruthSpec::MaskRle(m) => (m.width, m.height),
                    GroundTruthSpec::Heatmap(p) => {
                        image_dimensions(&root.join(p)).map_err(|e| fail(format!("{aff} heatmap: {e}")))?
                    }
                };
                if gd != dims {
                    return Err(fail(format!(
                        "{aff} ground truth is {}x{}, rgb is {}x{}",
                        gd.0, gd.1, dims.0, dims.1
                    )));
                }
                gt_cache.insert((r.sample_id.clone(), aff.clone()), OnceLock::new());
            }
        }
        Ok(Dataset {
            manifest,
            root,
            gt_cache,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.root.join(relative)
    }

    pub fn records(&self) -> &[AffordanceRecord] {
        &self.manifest.records
    }

    pub fn load_rgb(&self, record: &AffordanceRecord) -> Result<RgbImage, DatasetError> {
        Ok(imageio::load_rgb(&self.resolve(&record.rgb))?)
    }

    pub fn load_depth(&self, record: &AffordanceRecord) -> Result<Option<DepthImage>, DatasetError> {
        record
            .depth
            .as_ref()
            .map(|p| imageio::load_depth_png(&self.resolve(p)).map_err(DatasetError::from))
            .transpose()
    }

    /// Decodes on first access; concurrent callers share one decoded value.
    pub fn ground_truth(&self, sample_id: &str, affordance: &str) -> Result<&GroundTruth, DatasetError> {
        let missing = || DatasetError::NoGroundTruth {
            sample_id: sample_id.to_string(),
            affordance: affordance.to_string(),
        };
        let cell = self
            .gt_cache
            .get(&(sample_id.to_string(), affordance.to_string()))
            .ok_or_else(missing)?;
        if let Some(gt) = cell.get() {
            return Ok(gt);
        }
        let record = self.manifest.record(sample_id).ok_or_else(missing)?;
        let loaded = match record.gt.get(affordance).ok_or_else(missing)? {
            GroundTruthSpec::MaskRle(rle) => GroundTruth::Mask(rle.decode()?),
            GroundTruthSpec::Heatmap(p) => GroundTruth::Heatmap(imageio::load_heatmap_png(&self.resolve(p))?),
        };
        // A racing thread may have won; either value is identical.
        Ok(cell.get_or_init(|| loaded))
    }

    /// `(record, affordance)` pairs in manifest order, affordances sorted.
    pub fn pairs(&self) -> Vec<(&AffordanceRecord, &str)> {
        self.manifest
            .records
            .iter()
            .flat_map(|r| r.gt.keys().map(move |a| (r, a.as_str())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RgbImage;

    fn write_fixture(dir: &Path) -> PathBuf {
        let img = RgbImage::filled(4, 3, [9, 9, 9]).unwrap();
        imageio::write_file(&dir.join("rgb/a.png"), &imageio::encode_rgb_png(&img, &[]).unwrap()).unwrap();
        let heat = SaliencyMap::new(4, 3, (0..12).map(|i| i as f64 / 11.0).collect()).unwrap();
        imageio::write_file(&dir.join("heat/a.png"), &imageio::encode_heatmap_png(&heat).unwrap()).unwrap();
        let mask = BinaryMask::from_fn(4, 3, |u, _| u < 2).unwrap();
        let manifest = serde_json::json!({
            "schema_version": 1,
            "vocabulary": {"affordances": ["grasp", "cut"], "task_phrases": {"cut": "slice bread"}},
            "object_vocabulary": ["knife"],
            "records": [{
                "sample_id": "a", "rgb": "rgb/a.png", "object": "knife",
                "gt": {"grasp": {"mask_rle": RleMask::from(&mask)}, "cut": {"heatmap": "heat/a.png"}}
            }]
        });
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
        path
    }

    fn edit(path: &Path, f: impl FnOnce(&mut serde_json::Value)) {
        let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        f(&mut v);
        std::fs::write(path, v.to_string()).unwrap();
    }

    #[test]
    fn loads_with_defaults_and_lazy_gt() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path());
        let ds = load_manifest(&path).unwrap();
        assert_eq!(ds.manifest.vocabulary.task_phrase("grasp"), Some("grasp the object"));
        assert_eq!(ds.manifest.vocabulary.task_phrase("cut"), Some("slice bread"));
        let g = ds.ground_truth("a", "grasp").unwrap();
        assert_eq!(g.binary().area(), 6);
        let h = ds.ground_truth("a", "cut").unwrap();
        assert!(h.heatmap().is_some());
        assert!(std::ptr::eq(h, ds.ground_truth("a", "cut").unwrap()));
        assert!(matches!(ds.ground_truth("a", "scoop"), Err(DatasetError::NoGroundTruth { .. })));
        assert_eq!(ds.pairs().iter().map(|(_, a)| *a).collect::<Vec<_>>(), ["cut", "grasp"]);
    }

    #[test]
    fn rejects_duplicate_ids_and_unknown_affordance() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path());
        edit(&path, |v| {
            let r = v["records"][0].clone();
            v["records"].as_array_mut().unwrap().push(r);
        });
        let err = load_manifest(&path).unwrap_err();
        assert!(matches!(&err, DatasetError::Record { sample_id, .. } if sample_id == "a"), "{err}");

        let path = write_fixture(dir.path());
        edit(&path, |v| {
            v["records"][0]["gt"]["fly"] = v["records"][0]["gt"]["grasp"].clone();
        });
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("\"fly\""), "{err}");
    }

    #[test]
    fn rejects_missing_files_and_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path());
        edit(&path, |v| v["records"][0]["depth"] = "depth/missing.png".into());
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("missing.png"), "{err}");

        let path = write_fixture(dir.path());
        edit(&path, |v| {
            v["records"][0]["gt"]["grasp"]["mask_rle"] = serde_json::json!({"width": 2, "height": 2, "rle": [4]});
        });
        assert!(load_manifest(&path).unwrap_err().to_string().contains("2x2"));

        let err = load_manifest(&dir.path().join("nope.json")).unwrap_err();
        assert!(matches!(err, DatasetError::Io { ref path, .. } if path.ends_with("nope.json")));

        let path = write_fixture(dir.path());
        edit(&path, |v| v["schema_version"] = 2.into());
        assert!(matches!(load_manifest(&path), Err(DatasetError::SchemaVersion(2))));
    }

    #[test]
    fn save_load_roundtrip_without_touching_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path());
        let before: Vec<u8> = std::fs::read(&path).unwrap();
        let ds = load_manifest(&path).unwrap();
        ds.ground_truth("a", "cut").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), before);
        let copy = dir.path().join("copy.json");
        save_manifest(&ds.manifest, &copy).unwrap();
        let again = load_manifest(&copy).unwrap();
        assert_eq!(again.manifest, ds.manifest);
    }
}
