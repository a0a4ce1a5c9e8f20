//! Corpus ingestion: JSONL (optionally gzip-compressed) into a saved store.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use expert_cfg::retrieval::{read_corpus_jsonl, KnowledgeRecord, KnowledgeStore};
use flate2::read::GzDecoder;

use crate::error::{io_context, Result};

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// Reads a corpus file; gzip input is recognized by its magic bytes.
pub fn read_corpus(path: &Path) -> Result<Vec<KnowledgeRecord<f64>>> {
    let mut file = BufReader::new(File::open(path).map_err(io_context(path))?);
    let gz = file.fill_buf().map_err(io_context(path))?.starts_with(&GZIP_MAGIC);
    let reader: Box<dyn BufRead> = if gz {
        Box::new(BufReader::new(GzDecoder::new(file)))
    } else {
        Box::new(file)
    };
    Ok(read_corpus_jsonl(reader)?)
}

/// A saved store directory, or a corpus file ingested on the fly.
pub fn open_corpus(path: &Path) -> Result<KnowledgeStore<f64>> {
    if path.is_dir() {
        return Ok(KnowledgeStore::load(path)?);
    }
    Ok(KnowledgeStore::ingest(read_corpus(path)?)?)
}

/// Ingests `input` and saves the store under `out`. Returns the record count.
pub fn ingest(input: &Path, out: &Path) -> Result<usize> {
    let store = KnowledgeStore::ingest(read_corpus(input)?)?;
    store.save(out)?;
    Ok(store.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;

    const LINES: &str = concat!(
        r#"{"id":"a","caption":"left effusion","keywords":["effusion"],"image_embedding":[3,4],"text_embedding":[1,0]}"#,
        "\n\n",
        r#"{"id":"b","caption":"right nodule","keywords":["nodule"],"image_embedding":[0,2],"text_embedding":[0,1]}"#,
        "\n",
    );

    #[test]
    fn plain_and_gzip_corpora_ingest_alike() {
        let dir = tempfile::tempdir().unwrap();
        let plain = dir.path().join("c.jsonl");
        std::fs::write(&plain, LINES).unwrap();
        let gz = dir.path().join("c.jsonl.gz");
        let mut enc = GzEncoder::new(File::create(&gz).unwrap(), Compression::default());
        enc.write_all(LINES.as_bytes()).unwrap();
        enc.finish().unwrap();

        assert_eq!(read_corpus(&plain).unwrap(), read_corpus(&gz).unwrap());
        let out = dir.path().join("store");
        assert_eq!(ingest(&gz, &out).unwrap(), 2);
        let store = open_corpus(&out).unwrap();
        assert_eq!(store.get("a").unwrap().image_embedding.as_ref().unwrap(), &vec![0.6, 0.8]);
        assert_eq!(open_corpus(&plain).unwrap().len(), 2);
    }

    #[test]
    fn malformed_lines_name_their_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(&p, format!("{LINES}{{oops\n")).unwrap();
        let e = read_corpus(&p).unwrap_err();
        assert!(e.to_string().contains("line 4"), "{e}");
        assert_eq!(e.exit_code(), 1);
        assert_eq!(read_corpus(&dir.path().join("missing")).unwrap_err().exit_code(), 2);
    }
}
