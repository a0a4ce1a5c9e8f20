//! The review loop without the HTTP layer: answer, gate, retrieve, annotate,
//! regenerate, deliver.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Mutex, MutexGuard};

use chrono::{DateTime, Utc};
use expert_cfg::annotation::llm::{llm_match_highlights, LlmClient};
use expert_cfg::annotation::{auto_highlight, find_whole_word, highlighted_prompt, merge_spans, ExpertAnnotation, HighlightSpan, SpanSource};
use expert_cfg::dataset::VisualRef;
use expert_cfg::model::{greedy_decode, ModelSpec, SharedModel};
use expert_cfg::retrieval::{clip_score_filter, open_store, KnowledgeStore, QueryEmbedding};
use expert_cfg::{gate, guided_decode, EntropyReport, GatePolicy, GuidanceConfig, Prompt, Verdict};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::ServiceConfig;
use crate::error::{Result, ServiceError};
use crate::item::{
    AnnotationRecord, AnswerRecord, AnswerSource, Delivery, ItemSummary, MaskPreview, Reference, Regeneration,
    ReviewItem, Status, TokenProb, FLAG_NO_GUIDANCE,
};
use crate::store::{check_transition, export_jsonl, EventKind, SessionStore, Snapshot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRequest {
    #[serde(default)]
    pub id: Option<String>,
    pub question: String,
    #[serde(default)]
    pub visual_ref: Option<VisualRef>,
    #[serde(default)]
    pub model_id: Option<String>,
}

impl AnswerRequest {
    pub fn new(question: impl Into<String>) -> Self {
        Self {
            id: None,
            question: question.into(),
            visual_ref: None,
            model_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationInput {
    /// The reference as reviewed; may differ from the retrieved caption.
    pub reference_text: String,
    #[serde(default)]
    pub spans: Vec<HighlightSpan>,
    #[serde(default = "default_editor")]
    pub editor: String,
    /// Defaults to the time of submission.
    #[serde(default)]
    pub timestamp: Option<DateTime<Utc>>,
}

fn default_editor() -> String {
    "expert".into()
}

/// Guidance overrides; missing knobs take the configured defaults. When
/// `beta` is given without `delta`, `delta` follows `ln(beta) + 2`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegenerateInput {
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub max_len: Option<usize>,
}

impl RegenerateInput {
    pub fn from_config(cfg: &GuidanceConfig<f64>) -> Self {
        Self {
            alpha: Some(cfg.alpha),
            beta: Some(cfg.beta),
            gamma: Some(cfg.gamma),
            delta: Some(cfg.delta),
            max_len: None,
        }
    }

    fn resolve(&self, defaults: &GuidanceConfig<f64>) -> Result<GuidanceConfig<f64>> {
        let alpha = self.alpha.unwrap_or(defaults.alpha);
        let gamma = self.gamma.unwrap_or(defaults.gamma);
        let cfg = match (self.beta, self.delta) {
            (None, None) => GuidanceConfig::with_delta(alpha, defaults.beta, gamma, defaults.delta),
            (Some(b), None) => GuidanceConfig::new(alpha, b, gamma),
            (b, Some(d)) => GuidanceConfig::with_delta(alpha, b.unwrap_or(defaults.beta), gamma, d),
        };
        cfg.map_err(|e| ServiceError::validation(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DeliverInput {
    /// Which answer to deliver; regenerated items default to the regenerated one.
    #[serde(default)]
    pub source: Option<AnswerSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Page {
    pub items: Vec<ItemSummary>,
    pub total: usize,
    pub page: usize,
    pub per_page: usize,
}

pub const DEFAULT_PER_PAGE: usize = 50;
pub const MAX_PER_PAGE: usize = 500;

pub struct ReviewService {
    config: ServiceConfig,
    models: BTreeMap<String, SharedModel>,
    corpus: Option<KnowledgeStore<f64>>,
    llm: Option<LlmClient>,
    session: Mutex<SessionStore>,
    busy: Mutex<BTreeSet<String>>,
}

/// Marks an item as in use; dropping releases it.
struct ItemLease<'a> {
    busy: &'a Mutex<BTreeSet<String>>,
    id: String,
}

impl Drop for ItemLease<'_> {
    fn drop(&mut self) {
        lock(self.busy).remove(&self.id);
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn answer_record(text: String, tokens: &[expert_cfg::model::Token], probs: Vec<f64>) -> AnswerRecord {
    AnswerRecord {
        text,
        tokens: tokens
            .iter()
            .zip(probs)
            .map(|(t, prob)| TokenProb {
                token: t.surface.clone(),
                prob,
            })
            .collect(),
    }
}

struct Decoded {
    id: String,
    request: AnswerRequest,
    model_id: String,
    initial: AnswerRecord,
    report: EntropyReport<f64>,
}

impl ReviewService {
    /// Loads models and corpus and opens the session named by `config`.
    pub fn from_config(config: ServiceConfig) -> Result<Self> {
        config.validate()?;
        let base = std::path::Path::new(".");
        let models = config
            .models
            .iter()
            .map(|(id, spec)| Ok((id.clone(), spec.load(base)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let corpus = config.corpus.as_ref().map(|c| open_store(&c.path)).transpose()?;
        let session = match &config.session_dir {
            Some(dir) => SessionStore::open(dir, config.snapshot_every)?,
            None => SessionStore::in_memory(),
        };
        let llm = config
            .llm
            .as_ref()
            .map(LlmClient::from_config)
            .transpose()
            .map_err(expert_cfg::Error::from)?;
        Ok(Self::assemble(config, models, corpus, llm, session))
    }

    /// Service over already-built parts, for embedding and tests.
    pub fn new(
        config: ServiceConfig,
        models: BTreeMap<String, SharedModel>,
        corpus: Option<KnowledgeStore<f64>>,
        session: SessionStore,
    ) -> Result<Self> {
        config.validate()?;
        for id in config.models.keys() {
            if !models.contains_key(id) {
                return Err(ServiceError::validation(format!("model {id:?} configured but not provided")));
            }
        }
        Ok(Self::assemble(config, models, corpus, None, session))
    }

    fn assemble(
        config: ServiceConfig,
        models: BTreeMap<String, SharedModel>,
        corpus: Option<KnowledgeStore<f64>>,
        llm: Option<LlmClient>,
        session: SessionStore,
    ) -> Self {
        Self {
            config,
            models,
            corpus,
            llm,
            session: Mutex::new(session),
            busy: Mutex::new(BTreeSet::new()),
        }
    }

    pub fn with_llm(mut self, client: LlmClient) -> Self {
        self.llm = Some(client);
        self
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn model_spec(&self, id: &str) -> Option<&ModelSpec> {
        self.config.models.get(id)
    }

    fn model(&self, id: &str) -> Result<&SharedModel> {
        self.models
            .get(id)
            .ok_or_else(|| ServiceError::NotFound(format!("model {id}")))
    }

    fn lease(&self, id: &str) -> Result<ItemLease<'_>> {
        if !lock(&self.busy).insert(id.to_string()) {
            return Err(ServiceError::Conflict(format!("item {id} is being processed")));
        }
        Ok(ItemLease {
            busy: &self.busy,
            id: id.to_string(),
        })
    }

    pub fn get(&self, id: &str) -> Result<ReviewItem> {
        lock(&self.session)
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("item {id}")))
    }

    pub fn snapshot(&self) -> Snapshot {
        lock(&self.session).snapshot().clone()
    }

    pub fn events(&self) -> Vec<crate::store::Event> {
        lock(&self.session).events().to_vec()
    }

    pub fn answer(&self, request: AnswerRequest, policy: Option<GatePolicy>) -> Result<ReviewItem> {
        Ok(self.answer_batch(vec![request], policy)?.remove(0))
    }

    /// Answers a batch and gates it as one population: under a top-percent
    /// policy exactly `ceil(p N / 100)` items go to review. Validation runs
    /// before any item is stored, so a rejected batch stores nothing.
    pub fn answer_batch(&self, requests: Vec<AnswerRequest>, policy: Option<GatePolicy>) -> Result<Vec<ReviewItem>> {
        if requests.is_empty() {
            return Err(ServiceError::validation("empty batch"));
        }
        let policy = policy.unwrap_or(self.config.policy);
        policy.validate()?;
        let ids = self.assign_ids(&requests)?;
        for r in &requests {
            self.model(r.model_id.as_deref().unwrap_or(self.config.default_model_id()))?;
            if r.question.trim().is_empty() {
                return Err(ServiceError::validation("empty question"));
            }
            if let Some(v) = &r.visual_ref {
                self.query_for(v)?;
            }
        }
        let decoded = self.decode_all(ids.into_iter().zip(requests).collect())?;
        let reports: Vec<EntropyReport<f64>> = decoded.iter().map(|d| d.report.clone()).collect();
        let verdicts = gate(&reports, policy)?;
        let mut items = Vec::with_capacity(decoded.len());
        for (d, v) in decoded.into_iter().zip(verdicts) {
            let (status, references, delivered) = match v.verdict {
                Verdict::Deliver => (
                    Status::Delivered,
                    Vec::new(),
                    Some(Delivery {
                        answer: d.initial.text.clone(),
                        source: AnswerSource::Initial,
                    }),
                ),
                Verdict::Review => (Status::Pending, self.references(&d.request)?, None),
            };
            items.push(ReviewItem {
                id: d.id,
                question: d.request.question,
                visual_ref: d.request.visual_ref,
                model_id: d.model_id,
                initial: d.initial,
                entropy: d.report,
                policy,
                status,
                references,
                annotation: None,
                regeneration: None,
                delivered,
            });
        }
        let mut session = lock(&self.session);
        for item in &items {
            if session.contains(&item.id) {
                return Err(ServiceError::Conflict(format!("item {} already exists", item.id)));
            }
        }
        for item in &items {
            session.commit(EventKind::Created {
                item: Box::new(item.clone()),
            })?;
        }
        Ok(items)
    }

    fn assign_ids(&self, requests: &[AnswerRequest]) -> Result<Vec<String>> {
        let session = lock(&self.session);
        let mut taken = BTreeSet::new();
        for r in requests {
            if let Some(id) = &r.id {
                if id.trim().is_empty() {
                    return Err(ServiceError::validation("empty item id"));
                }
                if session.contains(id) || !taken.insert(id.clone()) {
                    return Err(ServiceError::Conflict(format!("item {id} already exists")));
                }
            }
        }
        let mut ids = Vec::with_capacity(requests.len());
        for r in requests {
            let id = match &r.id {
                Some(id) => id.clone(),
                None => session.fresh_id(&taken),
            };
            taken.insert(id.clone());
            ids.push(id);
        }
        Ok(ids)
    }

    /// Greedy decodes on up to `pool_size` threads; output order follows input.
    fn decode_all(&self, work: Vec<(String, AnswerRequest)>) -> Result<Vec<Decoded>> {
        let workers = self.config.pool_size.min(work.len()).max(1);
        let chunk = work.len().div_ceil(workers);
        let mut results: Vec<Result<Decoded>> = Vec::with_capacity(work.len());
        std::thread::scope(|s| {
            let handles: Vec<_> = work
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|(id, r)| self.decode_one(id, r)).collect::<Vec<_>>()))
                .collect();
            for h in handles {
                results.extend(h.join().expect("decode worker panicked"));
            }
        });
        results.into_iter().collect()
    }

    fn decode_one(&self, id: &str, request: &AnswerRequest) -> Result<Decoded> {
        let model_id = request
            .model_id
            .clone()
            .unwrap_or_else(|| self.config.default_model_id().to_string());
        let model = self.model(&model_id)?;
        let prompt = Prompt::text(model.vocab().tokenize(&request.question));
        let out = greedy_decode(model.as_ref(), &prompt, self.config.max_len)?;
        let report = EntropyReport::from_decode(&out.steps, out.generated())?;
        Ok(Decoded {
            id: id.to_string(),
            request: request.clone(),
            model_id,
            initial: answer_record(out.answer_text(), out.generated(), out.token_probs()),
            report,
        })
    }

    fn query_for(&self, visual: &VisualRef) -> Result<QueryEmbedding<f64>> {
        visual.query(self.corpus.as_ref()).map_err(|e| match e {
            expert_cfg::Error::UnknownRecord(id) => ServiceError::NotFound(format!("corpus record {id}")),
            e => e.into(),
        })
    }

    /// Top-k references for a pending item. A query carrying only one
    /// feature is searched on that feature alone.
    fn references(&self, request: &AnswerRequest) -> Result<Vec<Reference>> {
        let (Some(store), Some(visual)) = (&self.corpus, &request.visual_ref) else {
            return Ok(Vec::new());
        };
        let query = self.query_for(visual)?;
        let strategy = self.config.retrieval.strategy.for_query(&query);
        let mut hits = store.knn(&query, self.config.retrieval.k, strategy)?;
        if let Some(t) = self.config.retrieval.clip_threshold {
            hits = clip_score_filter(hits, t)?;
        }
        hits.into_iter()
            .map(|h| {
                let rec = store.get(&h.id).expect("hit ids come from the store");
                Ok(Reference {
                    id: h.id.clone(),
                    caption: rec.caption.clone(),
                    keywords: rec.keywords.clone(),
                    similarity: h.similarity,
                    matched_feature: h.matched_feature,
                    suggested_spans: self.suggest(&rec.keywords, &request.question, &rec.caption)?,
                })
            })
            .collect()
    }

    fn suggest(&self, keywords: &[String], question: &str, caption: &str) -> Result<Vec<HighlightSpan>> {
        let Some(client) = &self.llm else {
            return Ok(auto_highlight(keywords, question, caption, None));
        };
        let chosen = llm_match_highlights(client, keywords, question).map_err(expert_cfg::Error::from)?;
        Ok(merge_spans(
            chosen
                .iter()
                .flat_map(|k| find_whole_word(caption, k))
                .map(|r| HighlightSpan::new(r.start, r.end, SpanSource::Llm))
                .collect(),
        ))
    }

    fn mask_preview(&self, item: &ReviewItem, annotation: &ExpertAnnotation) -> Result<MaskPreview> {
        let model = self.model(&item.model_id)?;
        let (prompt, mask) =
            highlighted_prompt::<f64>(model.vocab(), &item.question, &annotation.reference_text, &annotation.spans)
                .map_err(|e| ServiceError::Validation {
                    message: e.to_string(),
                    detail: Some(json!({ "spans": annotation.spans })),
                })?;
        Ok(MaskPreview {
            tokens: prompt.sequence.tokens().iter().map(|t| t.surface.clone()).collect(),
            bits: mask.to_u8(),
        })
    }

    /// Records the expert's (possibly edited) reference and highlights.
    /// Spans are validated and merged; an annotation without spans is
    /// accepted and flagged.
    pub fn submit_annotation(&self, id: &str, input: AnnotationInput) -> Result<ReviewItem> {
        let _lease = self.lease(id)?;
        let item = self.get(id)?;
        let annotation = ExpertAnnotation {
            reference_text: input.reference_text,
            spans: input.spans,
            editor: input.editor,
            timestamp: input.timestamp.unwrap_or_else(Utc::now),
        }
        .normalized()
        .map_err(|e| ServiceError::Validation {
            message: e.to_string(),
            detail: None,
        })?;
        check_transition(&item, Status::Annotated)?;
        let mask = self.mask_preview(&item, &annotation)?;
        let flags = if annotation.spans.is_empty() {
            vec![FLAG_NO_GUIDANCE.to_string()]
        } else {
            Vec::new()
        };
        let record = AnnotationRecord { annotation, mask, flags };
        let mut session = lock(&self.session);
        Ok(session
            .commit(EventKind::Annotated {
                id: id.to_string(),
                record,
            })?
            .clone())
    }

    /// Guided regeneration over `question \n reference` with the annotation's mask.
    pub fn regenerate(&self, id: &str, input: RegenerateInput) -> Result<ReviewItem> {
        let _lease = self.lease(id)?;
        let item = self.get(id)?;
        // Bad input is a validation error whatever state the item is in.
        let cfg = input.resolve(&self.config.guidance)?;
        let max_len = input.max_len.unwrap_or(self.config.max_len);
        if max_len == 0 {
            return Err(ServiceError::validation("max_len must be at least 1"));
        }
        check_transition(&item, Status::Regenerated)?;
        let annotation = &item.annotation.as_ref().expect("annotated items carry an annotation").annotation;
        let model = self.model(&item.model_id)?;
        let (prompt, mask) =
            highlighted_prompt::<f64>(model.vocab(), &item.question, &annotation.reference_text, &annotation.spans)?;
        let out = guided_decode(model.as_ref(), &prompt, &mask, &cfg, max_len)?;
        let regeneration = Regeneration {
            answer: answer_record(out.answer_text(), out.generated(), out.token_probs()),
            cfg,
            max_len,
            steps: out.steps.iter().enumerate().map(|(i, s)| s.summary(i)).collect(),
        };
        let mut session = lock(&self.session);
        Ok(session
            .commit(EventKind::Regenerated {
                id: id.to_string(),
                regeneration: Box::new(regeneration),
            })?
            .clone())
    }

    /// Pending items deliver their initial answer; regenerated items deliver
    /// the regenerated one unless the initial one is requested.
    pub fn deliver(&self, id: &str, input: DeliverInput) -> Result<ReviewItem> {
        let _lease = self.lease(id)?;
        let item = self.get(id)?;
        check_transition(&item, Status::Delivered)?;
        let source = input.source.unwrap_or(match item.status {
            Status::Regenerated => AnswerSource::Regenerated,
            _ => AnswerSource::Initial,
        });
        let answer = match (source, &item.regeneration) {
            (AnswerSource::Initial, _) => item.initial.text.clone(),
            (AnswerSource::Regenerated, Some(r)) => r.answer.text.clone(),
            (AnswerSource::Regenerated, None) => {
                return Err(ServiceError::Conflict(format!("item {id} has no regenerated answer")))
            }
        };
        let mut session = lock(&self.session);
        Ok(session
            .commit(EventKind::Delivered {
                id: id.to_string(),
                delivery: Delivery { answer, source },
            })?
            .clone())
    }

    /// Items ordered by normalized entropy descending, then id ascending.
    /// Pages are 1-based.
    pub fn list_items(&self, status: Option<Status>, page: usize, per_page: usize) -> Result<Page> {
        if page == 0 || per_page == 0 || per_page > MAX_PER_PAGE {
            return Err(ServiceError::validation(format!(
                "page must be >= 1 and per_page in 1..={MAX_PER_PAGE}"
            )));
        }
        let session = lock(&self.session);
        let mut rows: Vec<ItemSummary> = session
            .items()
            .filter(|i| status.is_none_or(|s| i.status == s))
            .map(ItemSummary::from)
            .collect();
        rows.sort_by(|a, b| b.entropy.total_cmp(&a.entropy).then_with(|| a.id.cmp(&b.id)));
        let total = rows.len();
        let items = rows.into_iter().skip((page - 1) * per_page).take(per_page).collect();
        Ok(Page {
            items,
            total,
            page,
            per_page,
        })
    }

    pub fn export(&self, from: Option<u64>, to: Option<u64>) -> Result<String> {
        export_jsonl(lock(&self.session).events(), from, to)
    }

    /// Writes a snapshot now; used on shutdown.
    pub fn checkpoint(&self) -> Result<()> {
        lock(&self.session).checkpoint()
    }
}
