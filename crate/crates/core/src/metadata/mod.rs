//! Metadata extraction, canonicalization and the supervision label space.
//!
//! Photos enter the pipeline as [`PhotoRecord`]s: a pixel source plus a map
//! of canonical attribute names ("Image Make", "EXIF FocalLength") to
//! canonical string values. Attributes come from the JPEG APP1/Exif block,
//! from a JSON sidecar, or both (sidecar wins on conflict). The
//! frequency-pruned [`AttributeVocabulary`] defines the label index contract
//! consumed by the sampler and the consistency network.

mod jpeg;
mod tags;
mod tiff;

pub(crate) use jpeg::quantization_tables;
pub use tiff::normalize_value;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::Result;

/// Where a photo's pixels live.
#[derive(Clone, Debug)]
pub enum PixelSource {
    File(PathBuf),
    /// Decoded image held in memory; used by tests and the synthesizer.
    Memory(Arc<image::RgbImage>),
}

impl PixelSource {
    pub fn load(&self) -> Result<Arc<image::RgbImage>> {
        match self {
            PixelSource::File(path) => {
                let img = image::open(path).map_err(|e| match e {
                    image::ImageError::IoError(io) => Error::io(path, io),
                    other => Error::Image(other),
                })?;
                Ok(Arc::new(img.to_rgb8()))
            }
            PixelSource::Memory(img) => Ok(img.clone()),
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match self {
            PixelSource::File(p) => Some(p),
            PixelSource::Memory(_) => None,
        }
    }
}

/// One photo: pixel source plus canonical attribute map.
#[derive(Clone, Debug)]
pub struct PhotoRecord {
    pub photo_id: String,
    pub pixels: PixelSource,
    /// Canonical attribute name -> canonical value. Never contains empty
    /// values; those are dropped at parse time.
    pub attributes: BTreeMap<String, String>,
}

impl PhotoRecord {
    pub fn attribute(&self, name: &str) -> Option<&str> {
        self.attributes.get(name).map(String::as_str)
    }
}

/// Extracts metadata from a photo file, merging the Exif block with the
/// conventional sidecar at `<photo>.exif.json` when present.
///
/// A JPEG without an APP1/Exif segment yields an empty attribute map. A
/// non-JPEG file is only accepted when a sidecar exists.
pub fn extract_metadata(photo_path: &Path) -> Result<PhotoRecord> {
    let photo_id = photo_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| photo_path.to_string_lossy().into_owned());
    extract_metadata_with(photo_path, &photo_id, default_sidecar_path(photo_path).as_deref())
}

/// Conventional sidecar location: the photo path with ".exif.json" appended.
pub fn default_sidecar_path(photo_path: &Path) -> Option<PathBuf> {
    let mut name = photo_path.file_name()?.to_os_string();
    name.push(".exif.json");
    let candidate = photo_path.with_file_name(name);
    candidate.exists().then_some(candidate)
}

/// [`extract_metadata`] with an explicit photo id and sidecar path.
pub fn extract_metadata_with(
    photo_path: &Path,
    photo_id: &str,
    sidecar: Option<&Path>,
) -> Result<PhotoRecord> {
    let bytes = std::fs::read(photo_path).map_err(|e| Error::io(photo_path, e))?;

    let mut attributes = BTreeMap::new();
    if jpeg::is_jpeg(&bytes) {
        if let Some((tiff_data, base)) = jpeg::exif_tiff_payload(&bytes)? {
            // First occurrence wins for duplicate tags.
            for (name, value) in tiff::parse_tiff(&tiff_data, base)? {
                attributes.entry(name).or_insert(value);
            }
        }
    } else if sidecar.is_none() {
        return Err(Error::UnsupportedFormat {
            path: photo_path.to_path_buf(),
        });
    }

    if let Some(sidecar_path) = sidecar {
        let raw = std::fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
        let map: BTreeMap<String, String> = serde_json::from_str(&raw)?;
        for (name, value) in map {
            let value = normalize_value(&name, value.as_bytes());
            if value.is_empty() {
                attributes.remove(&name);
            } else {
                attributes.insert(name, value);
            }
        }
    }

    Ok(PhotoRecord {
        photo_id: photo_id.to_string(),
        pixels: PixelSource::File(photo_path.to_path_buf()),
        attributes,
    })
}

/// Surviving attributes and values after frequency pruning.
///
/// The serialized form fixes the label index contract: attribute order and
/// per-attribute value order are lexicographic, so indices are stable across
/// runs over the same corpus.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct AttributeVocabulary {
    pub tool_version: String,
    pub min_attr_count: u64,
    pub min_value_count: u64,
    pub attributes: Vec<AttributeEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct AttributeEntry {
    pub name: String,
    /// Photos carrying any (pre-pruning) value for this attribute.
    pub photo_count: u64,
    pub values: Vec<ValueEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ValueEntry {
    pub value: String,
    pub count: u64,
}

impl AttributeVocabulary {
    pub fn attr_count(&self) -> usize {
        self.attributes.len()
    }

    /// Label vector width: one slot per attribute plus the three
    /// post-processing slots (re-JPEG, blur, resize).
    pub fn label_dim(&self) -> usize {
        self.attributes.len() + 3
    }

    pub fn attr_index(&self, name: &str) -> Option<usize> {
        self.attributes
            .binary_search_by(|e| e.name.as_str().cmp(name))
            .ok()
    }

    pub fn value_index(&self, attr_idx: usize, value: &str) -> Option<usize> {
        self.attributes[attr_idx]
            .values
            .binary_search_by(|v| v.value.as_str().cmp(value))
            .ok()
    }

    /// Names of all label slots, metadata attributes first, then the three
    /// post-processing slots.
    pub fn slot_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.attributes.iter().map(|a| a.name.clone()).collect();
        names.push("postproc:rejpeg".into());
        names.push("postproc:blur".into());
        names.push("postproc:resize".into());
        names
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// SHA-256 of the serialized vocabulary; checkpoints embed this to
    /// detect label-contract mismatches.
    pub fn fingerprint(&self) -> Result<String> {
        let json = self.to_json_string()?;
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        Ok(format!("{:x}", hasher.finalize()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&raw)?)
    }
}

/// Builds the frequency-pruned vocabulary.
///
/// Attributes are kept iff present in strictly more than `min_attr_count`
/// photos; values are kept iff occurring at least `min_value_count` times.
/// Attributes whose values are all pruned are dropped. Ordering is
/// lexicographic throughout, so repeated builds serialize byte-identically.
pub fn build_vocabulary(
    records: &[PhotoRecord],
    min_attr_count: u64,
    min_value_count: u64,
) -> Result<AttributeVocabulary> {
    if min_attr_count < 1 || min_value_count < 1 {
        return Err(Error::Config(
            "min_attr_count and min_value_count must be at least 1".into(),
        ));
    }
    let mut attr_photos: BTreeMap<&str, u64> = BTreeMap::new();
    let mut value_counts: BTreeMap<(&str, &str), u64> = BTreeMap::new();
    for rec in records {
        for (name, value) in &rec.attributes {
            *attr_photos.entry(name).or_default() += 1;
            *value_counts.entry((name, value)).or_default() += 1;
        }
    }

    let mut attributes = Vec::new();
    for (name, &photo_count) in &attr_photos {
        if photo_count <= min_attr_count {
            continue;
        }
        let values: Vec<ValueEntry> = value_counts
            .range((*name, "")..)
            .take_while(|((n, _), _)| n == name)
            .filter(|(_, &count)| count >= min_value_count)
            .map(|((_, value), &count)| ValueEntry {
                value: value.to_string(),
                count,
            })
            .collect();
        if values.is_empty() {
            continue;
        }
        attributes.push(AttributeEntry {
            name: name.to_string(),
            photo_count,
            values,
        });
    }

    Ok(AttributeVocabulary {
        tool_version: crate::TOOL_VERSION.to_string(),
        min_attr_count,
        min_value_count,
        attributes,
    })
}

/// Immutable corpus index used by the samplers.
///
/// `by_value` lists only vocabulary-admissible values; photos whose value
/// for an attribute was pruned are absent from that attribute's lists but
/// still present in `by_photo`.
#[derive(Debug)]
pub struct CorpusIndex {
    records: Vec<PhotoRecord>,
    id_to_idx: BTreeMap<String, usize>,
    /// [attr_idx][value_idx] -> sorted photo indices sharing that value.
    by_value: Vec<Vec<Vec<usize>>>,
    /// [attr_idx] -> (photo index, value index) for photos carrying any
    /// admissible value, sorted by photo index.
    carriers: Vec<Vec<(usize, usize)>>,
}

/// Builds the corpus index for a vocabulary. Duplicate photo ids are a
/// dataset error.
pub fn index_corpus(records: Vec<PhotoRecord>, vocab: &AttributeVocabulary) -> Result<CorpusIndex> {
    let mut records = records;
    records.sort_by(|a, b| a.photo_id.cmp(&b.photo_id));

    let mut id_to_idx = BTreeMap::new();
    for (idx, rec) in records.iter().enumerate() {
        if id_to_idx.insert(rec.photo_id.clone(), idx).is_some() {
            return Err(Error::Dataset(format!(
                "duplicate photo_id {:?} in corpus",
                rec.photo_id
            )));
        }
    }

    let mut by_value = vec![Vec::new(); vocab.attr_count()];
    let mut carriers = vec![Vec::new(); vocab.attr_count()];
    for (attr_idx, entry) in vocab.attributes.iter().enumerate() {
        by_value[attr_idx] = vec![Vec::new(); entry.values.len()];
        for (photo_idx, rec) in records.iter().enumerate() {
            let Some(value) = rec.attribute(&entry.name) else {
                continue;
            };
            let Some(value_idx) = vocab.value_index(attr_idx, value) else {
                continue;
            };
            by_value[attr_idx][value_idx].push(photo_idx);
            carriers[attr_idx].push((photo_idx, value_idx));
        }
    }

    Ok(CorpusIndex {
        records,
        id_to_idx,
        by_value,
        carriers,
    })
}

impl CorpusIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[PhotoRecord] {
        &self.records
    }

    pub fn record(&self, idx: usize) -> &PhotoRecord {
        &self.records[idx]
    }

    pub fn record_by_id(&self, photo_id: &str) -> Option<&PhotoRecord> {
        self.id_to_idx.get(photo_id).map(|&i| &self.records[i])
    }

    /// Photo indices carrying admissible `value_idx` for `attr_idx`.
    pub fn photos_with_value(&self, attr_idx: usize, value_idx: usize) -> &[usize] {
        &self.by_value[attr_idx][value_idx]
    }

    /// All (photo, value) carriers of an attribute.
    pub fn carriers(&self, attr_idx: usize) -> &[(usize, usize)] {
        &self.carriers[attr_idx]
    }
}

/// One row of the corpus manifest (JSON-lines, one object per photo).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestRow {
    pub photo_id: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sidecar: Option<String>,
}

/// One row of the extracted-records file (JSON-lines).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecordRow {
    pub photo_id: String,
    pub path: String,
    pub attributes: BTreeMap<String, String>,
}

impl RecordRow {
    pub fn from_record(rec: &PhotoRecord) -> Result<Self> {
        let path = rec
            .pixels
            .path()
            .ok_or_else(|| Error::Config("in-memory records cannot be serialized".into()))?;
        Ok(RecordRow {
            photo_id: rec.photo_id.clone(),
            path: path.to_string_lossy().into_owned(),
            attributes: rec.attributes.clone(),
        })
    }

    pub fn into_record(self, base_dir: &Path) -> PhotoRecord {
        let path = resolve_path(base_dir, &self.path);
        PhotoRecord {
            photo_id: self.photo_id,
            pixels: PixelSource::File(path),
            attributes: self.attributes,
        }
    }
}

/// Relative paths in manifests and record files are resolved against the
/// directory containing the file.
pub fn resolve_path(base_dir: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    read_jsonl(path)
}

pub fn read_records(path: &Path) -> Result<Vec<PhotoRecord>> {
    let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let rows: Vec<RecordRow> = read_jsonl(path)?;
    Ok(rows.into_iter().map(|r| r.into_record(&base)).collect())
}

pub fn write_records(path: &Path, records: &[PhotoRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for rec in records {
        let row = RecordRow::from_record(rec)?;
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, attrs: &[(&str, &str)]) -> PhotoRecord {
        PhotoRecord {
            photo_id: id.to_string(),
            pixels: PixelSource::File(PathBuf::from(format!("{id}.jpg"))),
            attributes: attrs
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    #[test]
    fn vocabulary_prunes_by_thresholds() {
        // Attribute X in 8 of 10 photos with values A:5, B:3; thresholds
        // (5, 4) keep only {X: [A]}.
        let mut records = Vec::new();
        for i in 0..5 {
            records.push(record(&format!("a{i}"), &[("X", "A")]));
        }
        for i in 0..3 {
            records.push(record(&format!("b{i}"), &[("X", "B")]));
        }
        records.push(record("c0", &[]));
        records.push(record("c1", &[]));

        let vocab = build_vocabulary(&records, 5, 4).unwrap();
        assert_eq!(vocab.attr_count(), 1);
        assert_eq!(vocab.attributes[0].name, "X");
        assert_eq!(vocab.attributes[0].photo_count, 8);
        assert_eq!(vocab.attributes[0].values.len(), 1);
        assert_eq!(vocab.attributes[0].values[0].value, "A");
        assert_eq!(vocab.attributes[0].values[0].count, 5);
    }

    #[test]
    fn vocabulary_empty_when_thresholds_dominate() {
        let records = vec![record("a", &[("X", "A")]), record("b", &[("X", "A")])];
        let vocab = build_vocabulary(&records, 10, 10).unwrap();
        assert_eq!(vocab.attr_count(), 0);
        let empty = build_vocabulary(&[], 1, 1).unwrap();
        assert_eq!(empty.attr_count(), 0);
    }

    #[test]
    fn vocabulary_serialization_is_deterministic() {
        let records = vec![
            record("a", &[("X", "A"), ("Y", "p")]),
            record("b", &[("X", "A"), ("Y", "p")]),
            record("c", &[("X", "B"), ("Y", "p")]),
        ];
        let v1 = build_vocabulary(&records, 1, 1).unwrap();
        let v2 = build_vocabulary(&records, 1, 1).unwrap();
        assert_eq!(
            v1.to_json_string().unwrap(),
            v2.to_json_string().unwrap()
        );
        assert_eq!(v1.fingerprint().unwrap(), v2.fingerprint().unwrap());
    }

    #[test]
    fn index_counts_match_enumeration() {
        let records = vec![
            record("a", &[("Image Make", "A")]),
            record("b", &[("Image Make", "A")]),
            record("c", &[("Image Make", "B")]),
        ];
        let vocab = build_vocabulary(&records, 1, 1).unwrap();
        let index = index_corpus(records, &vocab).unwrap();
        let attr = vocab.attr_index("Image Make").unwrap();
        let a = vocab.value_index(attr, "A").unwrap();
        let b = vocab.value_index(attr, "B").unwrap();
        assert_eq!(index.photos_with_value(attr, a).len(), 2);
        assert_eq!(index.photos_with_value(attr, b).len(), 1);
        assert_eq!(index.carriers(attr).len(), 3);
    }

    #[test]
    fn pruned_values_absent_from_by_value_but_in_by_photo() {
        let records = vec![
            record("a", &[("X", "A")]),
            record("b", &[("X", "A")]),
            record("c", &[("X", "A")]),
            record("d", &[("X", "rare")]),
        ];
        let vocab = build_vocabulary(&records, 1, 2).unwrap();
        let attr = vocab.attr_index("X").unwrap();
        assert!(vocab.value_index(attr, "rare").is_none());
        let index = index_corpus(records, &vocab).unwrap();
        assert_eq!(index.carriers(attr).len(), 3);
        assert!(index.record_by_id("d").is_some());
    }

    #[test]
    fn empty_vocabulary_gives_empty_index() {
        let records = vec![record("a", &[("X", "A")])];
        let vocab = build_vocabulary(&records, 5, 5).unwrap();
        let index = index_corpus(records, &vocab).unwrap();
        assert_eq!(index.len(), 1);
        assert_eq!(vocab.attr_count(), 0);
    }

    #[test]
    fn duplicate_photo_ids_rejected() {
        let records = vec![record("a", &[]), record("a", &[])];
        let vocab = build_vocabulary(&records, 1, 1).unwrap();
        assert!(matches!(
            index_corpus(records, &vocab),
            Err(Error::Dataset(_))
        ));
    }
}
