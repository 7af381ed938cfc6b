//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic, little-endian u64 header length, JSON header, then
//! the raw tensor data (row-major, little-endian 32-bit floats). The header
//! carries the experiment config, the complete vocabulary plus its
//! fingerprint, the training step, and the tensor directory. Combiner
//! weights live in a separate directory section appended by `train-combiner`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::combiner::CombinerModel;
use crate::config::ExperimentConfig;
use crate::error::Error;
use crate::metadata::AttributeVocabulary;
use crate::sampler::derive_rng;
use crate::Result;

use super::ConsistencyNetwork;

const MAGIC: &[u8; 8] = b"SPLCHK01";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the data section, in f32 elements.
    offset: u64,
    /// Length in f32 elements.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tool_version: String,
    config: ExperimentConfig,
    vocabulary: AttributeVocabulary,
    vocab_fingerprint: String,
    step: u64,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    combiner_tensors: Vec<TensorEntry>,
}

/// A trained model: weights, config, vocabulary fingerprint and step
/// counter, plus the optional combiner section.
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub vocabulary: AttributeVocabulary,
    pub step: u64,
    pub network: ConsistencyNetwork<f32>,
    pub combiner: Option<CombinerModel>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        let mut data: Vec<f32> = Vec::new();
        let names = self.network.tensor_names();
        for (i, name) in names.iter().enumerate() {
            let t = self.network.tensor(i);
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: data.len() as u64,
                len: t.len() as u64,
            });
            data.extend(t.iter().copied());
        }
        let mut combiner_entries = Vec::new();
        if let Some(combiner) = &self.combiner {
            for (name, t) in combiner.tensors() {
                combiner_entries.push(TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                    offset: data.len() as u64,
                    len: t.len() as u64,
                });
                data.extend(t.iter().copied());
            }
        }
        let header = Header {
            tool_version: crate::TOOL_VERSION.to_string(),
            config: self.config.clone(),
            vocabulary: self.vocabulary.clone(),
            vocab_fingerprint: self.vocabulary.fingerprint()?,
            step: self.step,
            tensors: entries,
            combiner_tensors: combiner_entries,
        };
        let header_json = serde_json::to_vec(&header)?;

        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let io_err = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io_err)?;
        w.write_all(&(header_json.len() as u64).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(&header_json).map_err(io_err)?;
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in &data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes).map_err(io_err)?;
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = std::io::BufReader::new(file);
        let io_err = |e| Error::io(path, e);

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes).map_err(io_err)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_json = vec![0u8; header_len];
        r.read_exact(&mut header_json).map_err(io_err)?;
        let header: Header = serde_json::from_slice(&header_json)?;

        let mut raw = Vec::new();
        r.read_to_end(&mut raw).map_err(io_err)?;
        if raw.len() % 4 != 0 {
            return Err(Error::Checkpoint("data section not a multiple of 4 bytes".into()));
        }
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();

        // integrity: fingerprint must match the embedded vocabulary
        let actual = header.vocabulary.fingerprint()?;
        if actual != header.vocab_fingerprint {
            return Err(Error::Checkpoint(
                "embedded vocabulary does not match its recorded fingerprint".into(),
            ));
        }

        let read_tensor = |entry: &TensorEntry| -> Result<ArrayD<f32>> {
            let start = entry.offset as usize;
            let end = start + entry.len as usize;
            let slice = data.get(start..end).ok_or_else(|| {
                Error::Checkpoint(format!("tensor {} out of data bounds", entry.name))
            })?;
            ArrayD::from_shape_vec(entry.shape.clone(), slice.to_vec())
                .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", entry.name)))
        };

        let mut rng = derive_rng(0, 0, 0);
        let mut network = ConsistencyNetwork::<f32>::new(header.config.model.clone(), &mut rng)?;
        let names = network.tensor_names();
        if names.len() != header.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "tensor count mismatch: model has {}, file has {}",
                names.len(),
                header.tensors.len()
            )));
        }
        for (i, (name, entry)) in names.iter().zip(&header.tensors).enumerate() {
            if name != &entry.name {
                return Err(Error::Checkpoint(format!(
                    "tensor name mismatch at {i}: {name} vs {}",
                    entry.name
                )));
            }
            let t = read_tensor(entry)?;
            if t.shape() != network.tensor(i).shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    network.tensor(i).shape()
                )));
            }
            network.assign_tensor(i, t.view());
        }

        let combiner = if header.combiner_tensors.is_empty() {
            None
        } else {
            let loaded: Vec<(String, ArrayD<f32>)> = header
                .combiner_tensors
                .iter()
                .map(|e| Ok((e.name.clone(), read_tensor(e)?)))
                .collect::<Result<_>>()?;
            Some(CombinerModel::from_tensors(&loaded)?)
        };

        Ok(Checkpoint {
            config: header.config,
            vocabulary: header.vocabulary,
            step: header.step,
            network,
            combiner,
        })
    }

    /// Loads a checkpoint and verifies it was trained against `vocab`.
    pub fn load_expecting(path: &Path, vocab: &AttributeVocabulary) -> Result<Self> {
        let ckpt = Self::load(path)?;
        let expected = ckpt.vocabulary.fingerprint()?;
        let actual = vocab.fingerprint()?;
        if expected != actual {
            return Err(Error::VocabularyMismatch { expected, actual });
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metadata::build_vocabulary;
    use crate::net::{BackboneKind, ModelConfig, Objective};
    use crate::sampler::Patch;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_checkpoint() -> Checkpoint {
        let mut cfg = ExperimentConfig::default();
        cfg.model = ModelConfig {
            backbone: BackboneKind::Small,
            conv_channels: vec![4, 8],
            embedding_dim: 16,
            head_widths: vec![16],
            output_dim: 7,
            objective: Objective::Exif,
            combiner_hidden: 8,
            pretrained_encoder: None,
        };
        let vocabulary = build_vocabulary(&[], 1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut network = ConsistencyNetwork::<f32>::new(cfg.model.clone(), &mut rng).unwrap();
        // non-trivial weights in the output layer
        let last = network.tensor_count() - 2;
        for flat in 0..network.tensor(last).len() {
            network.add_to_param(last, flat, rng.gen_range(-0.5..0.5));
        }
        Checkpoint {
            config: cfg,
            vocabulary,
            step: 42,
            network,
            combiner: None,
        }
    }

    #[test]
    fn save_load_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = tiny_checkpoint();

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let patch = Patch {
            pixels: Array3::from_shape_simple_fn((3, 128, 128), || rng.gen_range(0.0..1.0f32)),
            source_photo_id: "p".into(),
            origin: (0, 0),
        };
        let before = ckpt.network.consistency(&patch, &patch).unwrap();

        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.step, 42);
        let after = loaded.network.consistency(&patch, &patch).unwrap();
        assert_eq!(before.probs, after.probs, "forward must be bit-identical");
    }

    #[test]
    fn combiner_section_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut ckpt = tiny_checkpoint();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut combiner = CombinerModel::new(7, 8, &mut rng);
        // give the output layer some signal
        let x = ndarray::Array2::ones((4, 7));
        let y = ndarray::Array1::ones(4);
        let mut adam = super::super::Adam::new(1e-2);
        combiner.fit_batch(&x, &y, &mut adam).unwrap();
        ckpt.combiner = Some(combiner);
        ckpt.save(&path).unwrap();

        let loaded = Checkpoint::load(&path).unwrap();
        let c = loaded.combiner.expect("combiner present");
        let v = crate::net::ConsistencyVector { probs: vec![1.0; 7] };
        let orig = ckpt.combiner.as_ref().unwrap().overall_consistency(&v);
        assert_eq!(c.overall_consistency(&v), orig);
    }

    #[test]
    fn vocabulary_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = tiny_checkpoint();
        ckpt.save(&path).unwrap();

        let other_records = vec![crate::metadata::PhotoRecord {
            photo_id: "z".into(),
            pixels: crate::metadata::PixelSource::File("z.jpg".into()),
            attributes: [("Image Make".to_string(), "A".to_string())].into_iter().collect(),
        }; 3];
        let mut records = Vec::new();
        for (i, mut r) in other_records.into_iter().enumerate() {
            r.photo_id = format!("z{i}");
            records.push(r);
        }
        let other_vocab = build_vocabulary(&records, 1, 1).unwrap();
        match Checkpoint::load_expecting(&path, &other_vocab) {
            Err(Error::VocabularyMismatch { .. }) => {}
            other => panic!("expected VocabularyMismatch, got {:?}", other.map(|_| ())),
        }
        assert!(Checkpoint::load_expecting(&path, &ckpt.vocabulary).is_ok());
    }
}
