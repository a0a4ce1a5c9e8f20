//! Exact k-nearest-neighbour search over caption records.
//!
//! Similarity is the dot product of L2-normalized vectors. Results are ordered
//! by similarity descending, then record id ascending.

mod persist;

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_CLIP_THRESHOLD: f64 = 0.6;
pub const DEFAULT_K: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Radiology,
    Pathology,
    #[default]
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeRecord<F> {
    pub id: String,
    pub caption: String,
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_embedding: Option<Vec<F>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_embedding: Option<Vec<F>>,
    #[serde(default)]
    pub modality: Modality,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QueryEmbedding<F> {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_embedding: Option<Vec<F>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_embedding: Option<Vec<F>>,
}

impl<F: Scalar> QueryEmbedding<F> {
    /// Normalizes whichever embeddings are present.
    pub fn new(image: Option<Vec<F>>, text: Option<Vec<F>>) -> Result<Self> {
        let image = image.map(|v| normalized("query image", v)).transpose()?;
        let text = text.map(|v| normalized("query text", v)).transpose()?;
        if image.is_none() && text.is_none() {
            return Err(Error::contract("query carries no embedding"));
        }
        Ok(Self {
            image_embedding: image,
            text_embedding: text,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Image,
    Text,
    /// Similarity of the normalized sums of image and text vectors.
    Sum,
    /// Per-feature searches merged by each record's best similarity.
    Union,
}

impl Strategy {
    /// `self`, unless the query carries a single feature, which is then searched alone.
    pub fn for_query<F>(self, query: &QueryEmbedding<F>) -> Strategy {
        match (&query.image_embedding, &query.text_embedding) {
            (Some(_), None) => Strategy::Image,
            (None, Some(_)) => Strategy::Text,
            _ => self,
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Strategy::Image),
            "text" => Ok(Strategy::Text),
            "sum" => Ok(Strategy::Sum),
            "union" => Ok(Strategy::Union),
            other => Err(Error::Config(format!("unknown retrieval strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchedFeature {
    Image,
    Text,
    Sum,
    UnionImage,
    UnionText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult<F> {
    pub id: String,
    pub similarity: F,
    pub matched_feature: MatchedFeature,
}

fn norm<F: Scalar>(v: &[F]) -> F {
    v.iter().map(|&x| x * x).sum::<F>().sqrt()
}

fn normalized<F: Scalar>(what: &str, v: Vec<F>) -> Result<Vec<F>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::contract(format!("{what}: non-finite embedding")));
    }
    let n = norm(&v);
    if !(n > F::zero()) {
        return Err(Error::ZeroEmbedding(what.to_string()));
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Normalized sum of whichever vectors are present.
fn combined<F: Scalar>(image: Option<&[F]>, text: Option<&[F]>) -> Option<Vec<F>> {
    let v: Vec<F> = match (image, text) {
        (Some(i), Some(t)) => i.iter().zip(t).map(|(&a, &b)| a + b).collect(),
        (Some(v), None) | (None, Some(v)) => v.to_vec(),
        (None, None) => return None,
    };
    let n = norm(&v);
    // Opposite unit vectors sum to zero; such a record has no combined direction.
    (n > F::zero()).then(|| v.into_iter().map(|x| x / n).collect())
}

/// Candidate ordered so that `a > b` means `a` ranks ahead of `b`.
#[derive(Debug, Clone, Copy)]
struct Ranked<F> {
    sim: F,
    idx: usize,
}

impl<F: PartialOrd> PartialEq for Ranked<F> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<F: PartialOrd> Eq for Ranked<F> {}

impl<F: PartialOrd> PartialOrd for Ranked<F> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<F: PartialOrd> Ord for Ranked<F> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim
            .partial_cmp(&other.sim)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.idx.cmp(&self.idx))
    }
}

/// Best `k` candidates, best first. Index order is id order in the store.
fn top_k<F: Scalar>(scores: impl Iterator<Item = (usize, F)>, k: usize) -> Vec<Ranked<F>> {
    let mut heap: BinaryHeap<Reverse<Ranked<F>>> = BinaryHeap::with_capacity(k + 1);
    for (idx, sim) in scores {
        let cand = Ranked { sim, idx };
        if heap.len() < k {
            heap.push(Reverse(cand));
        } else if let Some(Reverse(worst)) = heap.peek() {
            if cand > *worst {
                heap.pop();
                heap.push(Reverse(cand));
            }
        }
    }
    let mut out: Vec<Ranked<F>> = heap.into_iter().map(|Reverse(c)| c).collect();
    out.sort_by(|a, b| b.cmp(a));
    out
}

/// Immutable record store. Records are kept sorted by id so that results do
/// not depend on ingestion order.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeStore<F> {
    records: Vec<KnowledgeRecord<F>>,
    image_dim: Option<usize>,
    text_dim: Option<usize>,
    combined: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> KnowledgeStore<F> {
    /// Validates and normalizes every record. All duplicate ids are reported
    /// together.
    pub fn ingest(records: impl IntoIterator<Item = KnowledgeRecord<F>>) -> Result<Self> {
        let mut by_id: BTreeMap<String, KnowledgeRecord<F>> = BTreeMap::new();
        let mut dups = Vec::new();
        let mut image_dim = None;
        let mut text_dim = None;
        for mut rec in records {
            if rec.image_embedding.is_none() && rec.text_embedding.is_none() {
                return Err(Error::ZeroEmbedding(rec.id));
            }
            for (emb, dim, what) in [
                (&mut rec.image_embedding, &mut image_dim, "image embedding"),
                (&mut rec.text_embedding, &mut text_dim, "text embedding"),
            ] {
                if let Some(v) = emb.take() {
                    match *dim {
                        None => *dim = Some(v.len()),
                        Some(d) if d != v.len() => {
                            return Err(Error::DimensionMismatch {
                                what,
                                expected: d,
                                actual: v.len(),
                            })
                        }
                        Some(_) => {}
                    }
                    *emb = Some(normalized(&rec.id, v).map_err(|e| match e {
                        Error::ZeroEmbedding(_) => Error::ZeroEmbedding(rec.id.clone()),
                        other => other,
                    })?);
                }
            }
            if by_id.contains_key(&rec.id) {
                dups.push(rec.id.clone());
            } else {
                by_id.insert(rec.id.clone(), rec);
            }
        }
        if !dups.is_empty() {
            dups.sort();
            dups.dedup();
            return Err(Error::DuplicateIds(dups));
        }
        Self::from_sorted(by_id.into_values().collect(), image_dim, text_dim)
    }

    fn from_sorted(records: Vec<KnowledgeRecord<F>>, image_dim: Option<usize>, text_dim: Option<usize>) -> Result<Self> {
        let shared = match (image_dim, text_dim) {
            (Some(a), Some(b)) => a == b,
            _ => true,
        };
        let combined = records
            .iter()
            .map(|r| {
                if shared {
                    combined(r.image_embedding.as_deref(), r.text_embedding.as_deref())
                } else {
                    None
                }
            })
            .collect();
        Ok(Self {
            records,
            image_dim,
            text_dim,
            combined,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[KnowledgeRecord<F>] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&KnowledgeRecord<F>> {
        self.records
            .binary_search_by(|r| r.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn image_dim(&self) -> Option<usize> {
        self.image_dim
    }

    pub fn text_dim(&self) -> Option<usize> {
        self.text_dim
    }

    fn check_query(&self, q: Option<&Vec<F>>, dim: Option<usize>, what: &'static str) -> Result<Vec<F>> {
        let v = q.ok_or_else(|| Error::contract(format!("strategy requires a query {what}")))?;
        if let Some(d) = dim {
            crate::error::ensure_len(what, d, v.len())?;
        }
        Ok(v.clone())
    }

    fn feature_scores<'a>(
        &'a self,
        q: &'a [F],
        pick: fn(&KnowledgeRecord<F>) -> Option<&Vec<F>>,
    ) -> impl Iterator<Item = (usize, F)> + 'a {
        self.records
            .iter()
            .enumerate()
            .filter_map(move |(i, r)| pick(r).map(|v| (i, dot(q, v))))
    }

    fn results(&self, ranked: Vec<Ranked<F>>, feature: MatchedFeature) -> Vec<RetrievalResult<F>> {
        ranked
            .into_iter()
            .map(|c| RetrievalResult {
                id: self.records[c.idx].id.clone(),
                similarity: c.sim,
                matched_feature: feature,
            })
            .collect()
    }

    /// Exact top-`k` search. Records lacking the feature a strategy scores
    /// are skipped.
    pub fn knn(&self, query: &QueryEmbedding<F>, k: usize, strategy: Strategy) -> Result<Vec<RetrievalResult<F>>> {
        if k == 0 {
            return Err(Error::contract("k must be at least 1"));
        }
        fn image<F>(r: &KnowledgeRecord<F>) -> Option<&Vec<F>> {
            r.image_embedding.as_ref()
        }
        fn text<F>(r: &KnowledgeRecord<F>) -> Option<&Vec<F>> {
            r.text_embedding.as_ref()
        }
        match strategy {
            Strategy::Image => {
                let q = self.check_query(query.image_embedding.as_ref(), self.image_dim, "image embedding")?;
                Ok(self.results(top_k(self.feature_scores(&q, image), k), MatchedFeature::Image))
            }
            Strategy::Text => {
                let q = self.check_query(query.text_embedding.as_ref(), self.text_dim, "text embedding")?;
                Ok(self.results(top_k(self.feature_scores(&q, text), k), MatchedFeature::Text))
            }
            Strategy::Sum => {
                let qi = self.check_query(query.image_embedding.as_ref(), self.image_dim, "image embedding")?;
                let qt = self.check_query(query.text_embedding.as_ref(), self.text_dim, "text embedding")?;
                if qi.len() != qt.len() {
                    return Err(Error::contract("sum strategy needs image and text in one space"));
                }
                let q = combined(Some(&qi), Some(&qt))
                    .ok_or_else(|| Error::contract("query image and text cancel out"))?;
                let scores = self
                    .combined
                    .iter()
                    .enumerate()
                    .filter_map(|(i, c)| c.as_ref().map(|v| (i, dot(&q, v))));
                Ok(self.results(top_k(scores, k), MatchedFeature::Sum))
            }
            Strategy::Union => {
                let qi = self.check_query(query.image_embedding.as_ref(), self.image_dim, "image embedding")?;
                let qt = self.check_query(query.text_embedding.as_ref(), self.text_dim, "text embedding")?;
                // A record in the top k by max similarity is in the top k of
                // the feature achieving that max, so merging the two per-feature
                // top-k lists is exact.
                let mut best: BTreeMap<usize, (F, MatchedFeature)> = BTreeMap::new();
                for (cands, feature) in [
                    (top_k(self.feature_scores(&qi, image), k), MatchedFeature::UnionImage),
                    (top_k(self.feature_scores(&qt, text), k), MatchedFeature::UnionText),
                ] {
                    for c in cands {
                        let entry = best.entry(c.idx).or_insert((c.sim, feature));
                        if c.sim > entry.0 {
                            *entry = (c.sim, feature);
                        }
                    }
                }
                let merged = top_k(best.iter().map(|(&i, &(s, _))| (i, s)), k);
                Ok(merged
                    .into_iter()
                    .map(|c| RetrievalResult {
                        id: self.records[c.idx].id.clone(),
                        similarity: c.sim,
                        matched_feature: best[&c.idx].1,
                    })
                    .collect())
            }
        }
    }
}

/// Keeps results with similarity at or above `threshold`, in order.
pub fn clip_score_filter<F: Scalar>(results: Vec<RetrievalResult<F>>, threshold: F) -> Result<Vec<RetrievalResult<F>>> {
    if !(threshold >= -F::one() && threshold <= F::one()) {
        return Err(Error::contract("threshold must lie in [-1, 1]"));
    }
    Ok(results.into_iter().filter(|r| r.similarity >= threshold).collect())
}

/// Reads one record per line; blank lines are skipped. Errors carry the line number.
pub fn read_corpus_jsonl<F: Scalar, R: BufRead>(reader: R) -> Result<Vec<KnowledgeRecord<F>>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<corpus>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("corpus line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Opens a saved store directory, or ingests a JSONL corpus file.
pub fn open_store(path: &Path) -> Result<KnowledgeStore<f64>> {
    if path.is_dir() {
        return KnowledgeStore::load(path);
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    KnowledgeStore::ingest(read_corpus_jsonl(std::io::BufReader::new(file))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, image: Option<Vec<f64>>, text: Option<Vec<f64>>) -> KnowledgeRecord<f64> {
        KnowledgeRecord {
            id: id.into(),
            caption: format!("caption {id}"),
            keywords: vec![],
            image_embedding: image,
            text_embedding: text,
            modality: Modality::Other,
        }
    }

    fn query(image: Option<Vec<f64>>, text: Option<Vec<f64>>) -> QueryEmbedding<f64> {
        QueryEmbedding::new(image, text).unwrap()
    }

    #[test]
    fn empty_store() {
        let s = KnowledgeStore::<f64>::ingest(vec![]).unwrap();
        assert_eq!(s.len(), 0);
        let r = s.knn(&query(Some(vec![1.0]), None), 3, Strategy::Image).unwrap();
        assert!(r.is_empty());
    }

    #[test]
    fn self_retrieval_at_rank_one() {
        let recs = vec![
            rec("a", None, Some(vec![1.0, 0.0, 0.0])),
            rec("b", None, Some(vec![0.0, 2.0, 0.0])),
            rec("c", None, Some(vec![1.0, 1.0, 1.0])),
        ];
        let s = KnowledgeStore::ingest(recs.clone()).unwrap();
        assert_eq!(s.len(), 3);
        for r in &recs {
            let hit = s.knn(&query(None, r.text_embedding.clone()), 1, Strategy::Text).unwrap();
            assert_eq!(hit[0].id, r.id);
            assert!((hit[0].similarity - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn union_picks_best_feature() {
        // A: image sim 0.8, text sim 0. B: image sim 0, text sim 0.9.
        let s = KnowledgeStore::ingest(vec![
            rec("A", Some(vec![0.8, 0.6]), Some(vec![0.0, 1.0])),
            rec("B", Some(vec![0.0, 1.0]), Some(vec![0.9, (1.0f64 - 0.81).sqrt()])),
        ])
        .unwrap();
        let q = query(Some(vec![1.0, 0.0]), Some(vec![1.0, 0.0]));
        let r = s.knn(&q, 1, Strategy::Union).unwrap();
        assert_eq!(r[0].id, "B");
        assert_eq!(r[0].matched_feature, MatchedFeature::UnionText);
        assert!((r[0].similarity - 0.9).abs() < 1e-12);
    }

    #[test]
    fn sum_strategy_hand_case() {
        let s = KnowledgeStore::ingest(vec![
            rec("r1", Some(vec![1.0, 0.0]), Some(vec![1.0, 0.0])),
            rec("r2", Some(vec![0.0, 1.0]), Some(vec![1.0, 0.0])),
            rec("r3", Some(vec![0.0, 1.0]), Some(vec![0.0, 1.0])),
        ])
        .unwrap();
        // Query sum direction (1, 0). Combined: r1 (1,0) → 1; r2 (1,1)/√2 → 1/√2; r3 (0,1) → 0.
        let r = s.knn(&query(Some(vec![1.0, 0.0]), Some(vec![1.0, 0.0])), 2, Strategy::Sum).unwrap();
        assert_eq!(r.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["r1", "r2"]);
        assert!((r[1].similarity - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_id() {
        let s = KnowledgeStore::ingest(vec![
            rec("z", Some(vec![1.0]), None),
            rec("m", Some(vec![1.0]), None),
            rec("a", Some(vec![1.0]), None),
        ])
        .unwrap();
        let r = s.knn(&query(Some(vec![1.0]), None), 2, Strategy::Image).unwrap();
        assert_eq!(r.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["a", "m"]);
    }

    #[test]
    fn ingest_rejections() {
        let err = KnowledgeStore::ingest(vec![
            rec("x", Some(vec![1.0]), None),
            rec("x", Some(vec![1.0]), None),
            rec("y", Some(vec![1.0]), None),
        ])
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateIds(ids) if ids == ["x"]));
        let err = KnowledgeStore::ingest(vec![rec("z", Some(vec![0.0, 0.0]), None)]).unwrap_err();
        assert!(matches!(err, Error::ZeroEmbedding(id) if id == "z"));
        let err = KnowledgeStore::ingest(vec![rec("n", None, None)]).unwrap_err();
        assert!(matches!(err, Error::ZeroEmbedding(_)));
    }

    #[test]
    fn missing_query_feature_is_contract_violation() {
        let s = KnowledgeStore::ingest(vec![rec("a", Some(vec![1.0]), Some(vec![1.0]))]).unwrap();
        let q = query(Some(vec![1.0]), None);
        assert!(matches!(s.knn(&q, 1, Strategy::Text), Err(Error::Contract(_))));
        assert!(matches!(s.knn(&q, 1, Strategy::Union), Err(Error::Contract(_))));
        assert!(s.knn(&q, 0, Strategy::Image).is_err());
    }

    #[test]
    fn clip_filter_keeps_order() {
        let r = |id: &str, s: f64| RetrievalResult {
            id: id.into(),
            similarity: s,
            matched_feature: MatchedFeature::Text,
        };
        let input = vec![r("a", 0.9), r("b", 0.55), r("c", 0.7)];
        let kept = clip_score_filter(input.clone(), DEFAULT_CLIP_THRESHOLD).unwrap();
        assert_eq!(kept.iter().map(|r| r.similarity).collect::<Vec<_>>(), [0.9, 0.7]);
        assert_eq!(clip_score_filter(input.clone(), -1.0).unwrap(), input);
        assert!(clip_score_filter(input, 1.5).is_err());
    }

    #[test]
    fn corpus_jsonl_reports_line_numbers() {
        let text = "{\"id\":\"a\",\"caption\":\"c\",\"text_embedding\":[1,0]}\n\nnot json\n";
        let err = read_corpus_jsonl::<f64, _>(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 3"));
        let ok = read_corpus_jsonl::<f64, _>(&text.as_bytes()[..text.find("\n\n").unwrap()]).unwrap();
        assert_eq!(ok[0].modality, Modality::Other);
    }
}
