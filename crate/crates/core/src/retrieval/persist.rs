//! Store directory: `header.json` plus `image.bin` / `text.bin`, each a flat
//! little-endian matrix holding one row per record that has the feature, in
//! record order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{KnowledgeRecord, KnowledgeStore, Modality};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const HEADER: &str = "header.json";
const IMAGE: &str = "image.bin";
const TEXT: &str = "text.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    count: usize,
    image_dim: Option<usize>,
    text_dim: Option<usize>,
    records: Vec<RecordMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordMeta {
    id: String,
    caption: String,
    keywords: Vec<String>,
    modality: Modality,
    has_image: bool,
    has_text: bool,
}

fn write_rows<F: Scalar>(rows: impl Iterator<Item = Option<Vec<F>>>) -> Vec<u8> {
    let mut out = Vec::new();
    for row in rows.flatten() {
        for x in row {
            x.write_le(&mut out);
        }
    }
    out
}

struct Rows<'a> {
    bytes: &'a [u8],
    dim: usize,
}

impl Rows<'_> {
    fn next<F: Scalar>(&mut self, file: &str) -> Result<Vec<F>> {
        let need = self.dim * F::WIDTH;
        if self.bytes.len() < need {
            return Err(Error::Format(format!("{file}: truncated matrix")));
        }
        let (head, rest) = self.bytes.split_at(need);
        self.bytes = rest;
        Ok(head.chunks_exact(F::WIDTH).map(F::read_le).collect())
    }
}

impl<F: Scalar> KnowledgeStore<F> {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = Header {
            version: FORMAT_VERSION,
            dtype: F::DTYPE.into(),
            count: self.records.len(),
            image_dim: self.image_dim,
            text_dim: self.text_dim,
            records: self
                .records
                .iter()
                .map(|r| RecordMeta {
                    id: r.id.clone(),
                    caption: r.caption.clone(),
                    keywords: r.keywords.clone(),
                    modality: r.modality,
                    has_image: r.image_embedding.is_some(),
                    has_text: r.text_embedding.is_some(),
                })
                .collect(),
        };
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            std::fs::write(&p, bytes).map_err(|e| Error::io(p, e))
        };
        write(HEADER, &serde_json::to_vec_pretty(&header)?)?;
        write(IMAGE, &write_rows(self.records.iter().map(|r| r.image_embedding.clone())))?;
        write(TEXT, &write_rows(self.records.iter().map(|r| r.text_embedding.clone())))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read(&p).map_err(|e| Error::io(p, e))
        };
        let header: Header = serde_json::from_slice(&read(HEADER)?)?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Format(format!("store version {} unsupported", header.version)));
        }
        if header.dtype != F::DTYPE {
            return Err(Error::Format(format!("store dtype {} does not match {}", header.dtype, F::DTYPE)));
        }
        if header.count != header.records.len() {
            return Err(Error::Format("record count disagrees with header".into()));
        }
        let image_bytes = read(IMAGE)?;
        let text_bytes = read(TEXT)?;
        let mut image = Rows {
            bytes: &image_bytes,
            dim: header.image_dim.unwrap_or(0),
        };
        let mut text = Rows {
            bytes: &text_bytes,
            dim: header.text_dim.unwrap_or(0),
        };
        let mut records = Vec::with_capacity(header.count);
        for meta in header.records {
            let image_embedding = meta.has_image.then(|| image.next(IMAGE)).transpose()?;
            let text_embedding = meta.has_text.then(|| text.next(TEXT)).transpose()?;
            records.push(KnowledgeRecord {
                id: meta.id,
                caption: meta.caption,
                keywords: meta.keywords,
                image_embedding,
                text_embedding,
                modality: meta.modality,
            });
        }
        if !image.bytes.is_empty() || !text.bytes.is_empty() {
            return Err(Error::Format("trailing bytes in embedding matrix".into()));
        }
        if records.windows(2).any(|w| w[0].id >= w[1].id) {
            return Err(Error::Format("store records not sorted by unique id".into()));
        }
        Self::from_sorted(records, header.image_dim, header.text_dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_store() {
        let recs = vec![
            KnowledgeRecord {
                id: "b".into(),
                caption: "free air".into(),
                keywords: vec!["free air".into()],
                image_embedding: Some(vec![0.3, 0.4]),
                text_embedding: None,
                modality: Modality::Radiology,
            },
            KnowledgeRecord {
                id: "a".into(),
                caption: "lung".into(),
                keywords: vec![],
                image_embedding: Some(vec![1.0, 1.0]),
                text_embedding: Some(vec![0.0, 2.0]),
                modality: Modality::Other,
            },
        ];
        let store = KnowledgeStore::<f64>::ingest(recs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        store.save(dir.path()).unwrap();
        let back = KnowledgeStore::<f64>::load(dir.path()).unwrap();
        assert_eq!(store, back);
        assert!(KnowledgeStore::<f32>::load(dir.path()).is_err());
    }

    #[test]
    fn missing_directory_names_path() {
        let err = KnowledgeStore::<f64>::load("/nonexistent/store").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/store"));
    }
}
