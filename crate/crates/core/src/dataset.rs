//! Question-answer rows for batch evaluation.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::QuestionType;
use crate::retrieval::{KnowledgeStore, QueryEmbedding};

/// Image reference: a corpus record id or inline query vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VisualRef {
    Corpus(String),
    Inline(QueryEmbedding<f64>),
}

impl VisualRef {
    /// Query vectors: inline ones normalized, or the named record's own embeddings.
    pub fn query(&self, store: Option<&KnowledgeStore<f64>>) -> Result<QueryEmbedding<f64>> {
        match self {
            VisualRef::Inline(q) => QueryEmbedding::new(q.image_embedding.clone(), q.text_embedding.clone()),
            VisualRef::Corpus(id) => {
                let rec = store
                    .and_then(|s| s.get(id))
                    .ok_or_else(|| Error::UnknownRecord(id.clone()))?;
                Ok(QueryEmbedding {
                    image_embedding: rec.image_embedding.clone(),
                    text_embedding: rec.text_embedding.clone(),
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub question: String,
    pub answer: String,
    #[serde(rename = "type")]
    pub kind: QuestionType,
    pub visual_ref: VisualRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_answer_keywords: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    pub line: usize,
    pub message: String,
}

/// Parsed rows with their 1-based line numbers, plus the rows that failed.
/// Rows without an id get `row-<line>`.
pub fn read_dataset_jsonl<R: BufRead>(reader: R) -> Result<(Vec<DatasetRow>, Vec<RowError>)> {
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::io("<dataset>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<DatasetRow>(&line) {
            Ok(mut row) if !crate::text::normalize(&row.answer).is_empty() => {
                row.id.get_or_insert_with(|| format!("row-{line_no}"));
                rows.push(row);
            }
            Ok(_) => errors.push(RowError {
                line: line_no,
                message: "empty answer".into(),
            }),
            Err(e) => errors.push(RowError {
                line: line_no,
                message: e.to_string(),
            }),
        }
    }
    Ok((rows, errors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_and_errors() {
        let text = r#"{"question":"is there air?","answer":"yes","type":"closed","visual_ref":"img-1"}
not json
{"id":"q2","question":"where?","answer":"left lung","type":"open","visual_ref":{"image_embedding":[1,0]},"corpus_answer_keywords":["left lung"]}
{"question":"x","answer":"  ","type":"open","visual_ref":"a"}
"#;
        let (rows, errors) = read_dataset_jsonl(text.as_bytes()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].id.as_deref(), Some("row-1"));
        assert_eq!(rows[0].visual_ref, VisualRef::Corpus("img-1".into()));
        assert!(matches!(rows[1].visual_ref, VisualRef::Inline(_)));
        assert_eq!(errors.iter().map(|e| e.line).collect::<Vec<_>>(), [2, 4]);
    }
}
