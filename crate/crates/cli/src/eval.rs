//! Benchmark runs over a QA dataset.
//!
//! Every item is decoded once per treatment:
//!
//! * `baseline`: the question alone;
//! * `rag`: question plus the top retrieved caption;
//! * `expert_rag`: question plus the caption an expert would pick, the first
//!   retrieved caption containing the answer (top-1 when none does);
//! * `expert_cfg`: the expert caption with highlights, decoded with guidance.
//!
//! Arms combine treatments with the gate: `rag` applies retrieval to every
//! item, the gated arms apply their treatment to reviewed items only and
//! keep the baseline answer elsewhere. Highlights stand in for the expert:
//! on open questions the ground-truth answer and `corpus_answer_keywords`,
//! on closed ones caption keywords shared with the question.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use expert_cfg::annotation::{auto_highlight, compose_prompt, find_whole_word, highlighted_prompt, merge_spans, HighlightSpan, SpanSource};
use expert_cfg::dataset::{read_dataset_jsonl, DatasetRow, RowError};
use expert_cfg::evaluation::{answer_in_caption, hit_rate, temperature_fit_and_rescore, vqa_score, CalibrationSummary, LogitSample, QuestionType};
use expert_cfg::model::SharedModel;
use expert_cfg::retrieval::{clip_score_filter, KnowledgeStore, Strategy};
use expert_cfg::uncertainty::{is_true_prob_estimator, label_prob_estimator};
use expert_cfg::{gate, greedy_decode, guided_decode, EntropyReport, GatePolicy, GuidanceConfig, Prompt, Verdict};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::ingest::open_corpus;
use crate::manifest::{RunManifest, RunSettings};

pub const BUNDLE_FORMAT: &str = "expert-cfg-eval";
pub const BUNDLE_VERSION: u32 = 1;

/// Arm names in reporting order. The gated arms use the configured policy.
pub const ARMS: [&str; 5] = ["baseline", "rag", "rag_5pct", "expert_rag_5pct", "expert_cfg_5pct"];

/// Strategies in `hitrate_vs_k` column order.
pub const HIT_STRATEGIES: [Strategy; 4] = [Strategy::Image, Strategy::Text, Strategy::Sum, Strategy::Union];

/// Clamp for turning confidences into logits before temperature fitting.
const LOGIT_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub answer: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub id: String,
    #[serde(rename = "type")]
    pub kind: QuestionType,
    pub truth: String,
    pub entropy: EntropyReport<f64>,
    /// Reviewed under the configured policy.
    pub review: bool,
    pub baseline: Outcome,
    /// Treatment outcomes whether or not the item was reviewed; the gated
    /// arms fall back to `baseline` for delivered items when scored.
    pub rag: Outcome,
    pub expert_rag: Outcome,
    pub expert_cfg: Outcome,
    pub references: Vec<String>,
    pub expert_reference: Option<String>,
    pub label_prob: f64,
    pub is_true: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmScore {
    pub arm: String,
    pub open: f64,
    pub closed: f64,
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    pub policy: GatePolicy,
    pub total: usize,
    pub reviewed: usize,
    pub min_reviewed_pe: Option<f64>,
    pub max_delivered_pe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodCalibration {
    pub method: String,
    pub summary: Option<CalibrationSummary<f64>>,
    /// Why `summary` is missing.
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRateRow {
    pub k: usize,
    pub image: f64,
    pub text: f64,
    pub sum: f64,
    pub union: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub format: String,
    pub version: u32,
    pub settings: RunSettings,
    pub rows: usize,
    pub open: usize,
    pub closed: usize,
    pub row_errors: Vec<RowError>,
    pub warnings: Vec<String>,
    pub arms: Vec<ArmScore>,
    pub gate: GateStats,
    pub calibration: Vec<MethodCalibration>,
    /// Over open questions, whose answers can appear in a caption.
    pub hit_rates: Vec<HitRateRow>,
    pub items: Vec<ItemResult>,
}

impl MetricsBundle {
    pub fn arm(&self, name: &str) -> Option<&ArmScore> {
        self.arms.iter().find(|a| a.arm == name)
    }
}

/// The reference an expert would annotate, with its highlights.
#[derive(Debug, Clone)]
pub(crate) struct ExpertContext {
    pub reference: String,
    pub caption: String,
    pub spans: Vec<HighlightSpan>,
}

/// Per-item state shared by evaluation and ablation.
#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    pub baseline: Outcome,
    pub entropy: EntropyReport<f64>,
    pub references: Vec<String>,
    pub rag_caption: Option<String>,
    pub expert: Option<ExpertContext>,
    pub warning: Option<String>,
}

pub(crate) struct Stage {
    pub prepared: Vec<Prepared>,
    pub review: Vec<bool>,
}

pub struct EvalContext {
    pub settings: RunSettings,
    pub rows: Vec<DatasetRow>,
    pub row_errors: Vec<RowError>,
    pub model: SharedModel,
    pub store: Option<KnowledgeStore<f64>>,
    pool: rayon::ThreadPool,
}

impl EvalContext {
    /// Reads the dataset, model and corpus a manifest names. Malformed
    /// dataset rows are logged and skipped.
    pub fn load(m: &RunManifest) -> Result<Self> {
        m.validate()?;
        let file = File::open(&m.dataset).map_err(|e| expert_cfg::Error::io(&m.dataset, e))?;
        let (rows, row_errors) = read_dataset_jsonl(BufReader::new(file))?;
        for e in &row_errors {
            log::warn!("{} line {}: {}", m.dataset.display(), e.line, e.message);
        }
        let model = m.model.load(Path::new("."))?;
        let store = m.corpus.as_deref().map(open_corpus).transpose()?;
        Self::new(m.settings(), rows, row_errors, model, store, m.workers)
    }

    pub fn new(
        settings: RunSettings,
        rows: Vec<DatasetRow>,
        row_errors: Vec<RowError>,
        model: SharedModel,
        store: Option<KnowledgeStore<f64>>,
        workers: usize,
    ) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| CliError::Runtime(format!("worker pool: {e}")))?;
        Ok(Self {
            settings,
            rows,
            row_errors,
            model,
            store,
            pool,
        })
    }

    /// Maps `f` over `0..n` on the worker pool; output order follows input.
    pub(crate) fn par_map<T: Send>(&self, n: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
        self.pool.install(|| (0..n).into_par_iter().map(&f).collect())
    }

    fn plain(&self, text: &str) -> Result<String> {
        let prompt = Prompt::text(self.model.vocab().tokenize(text));
        Ok(greedy_decode(self.model.as_ref(), &prompt, self.settings.max_len)?.answer_text())
    }

    fn outcome(row: &DatasetRow, answer: String) -> Result<Outcome> {
        let score = vqa_score(&answer, &row.answer, row.kind)?;
        Ok(Outcome { answer, score })
    }

    fn prepare(&self, row: &DatasetRow) -> Result<Prepared> {
        let prompt = Prompt::text(self.model.vocab().tokenize(&row.question));
        let out = greedy_decode(self.model.as_ref(), &prompt, self.settings.max_len)?;
        let entropy = EntropyReport::from_decode(&out.steps, out.generated())?;
        let baseline = Self::outcome(row, out.answer_text())?;
        let mut prepared = Prepared {
            baseline,
            entropy,
            references: Vec::new(),
            rag_caption: None,
            expert: None,
            warning: None,
        };
        let Some(store) = &self.store else {
            return Ok(prepared);
        };
        let query = match row.visual_ref.query(Some(store)) {
            Ok(q) => q,
            Err(e @ expert_cfg::Error::UnknownRecord(_)) => {
                prepared.warning = Some(format!("{}: {e}", row_id(row)));
                return Ok(prepared);
            }
            Err(e) => return Err(e.into()),
        };
        let r = &self.settings.retrieval;
        let mut hits = store.knn(&query, r.k, r.strategy.for_query(&query))?;
        if let Some(t) = r.clip_threshold {
            hits = clip_score_filter(hits, t)?;
        }
        let records: Vec<_> = hits
            .iter()
            .map(|h| store.get(&h.id).expect("hit ids come from the store"))
            .collect();
        prepared.references = records.iter().map(|rec| rec.id.clone()).collect();
        prepared.rag_caption = records.first().map(|rec| rec.caption.clone());
        let chosen = match row.kind {
            QuestionType::Open => records
                .iter()
                .find(|rec| answer_in_caption(&row.answer, &rec.caption))
                .or(records.first()),
            QuestionType::Closed => records.first(),
        };
        prepared.expert = chosen.map(|rec| {
            let answer = (row.kind == QuestionType::Open).then_some(row.answer.as_str());
            let mut spans = auto_highlight(&rec.keywords, &row.question, &rec.caption, answer);
            if row.kind == QuestionType::Open {
                for kw in row.corpus_answer_keywords.iter().flatten() {
                    spans.extend(
                        find_whole_word(&rec.caption, kw)
                            .into_iter()
                            .map(|m| HighlightSpan::new(m.start, m.end, SpanSource::Expert)),
                    );
                }
            }
            ExpertContext {
                reference: rec.id.clone(),
                caption: rec.caption.clone(),
                spans: merge_spans(spans),
            }
        });
        Ok(prepared)
    }

    /// Baseline decodes, retrieval and the configured gate.
    pub(crate) fn stage(&self) -> Result<Stage> {
        let prepared = self.par_map(self.rows.len(), |i| self.prepare(&self.rows[i]))?;
        let review = if prepared.is_empty() {
            Vec::new()
        } else {
            let reports: Vec<EntropyReport<f64>> = prepared.iter().map(|p| p.entropy.clone()).collect();
            gate(&reports, self.settings.policy)?
                .into_iter()
                .map(|d| d.verdict == Verdict::Review)
                .collect()
        };
        Ok(Stage { prepared, review })
    }

    /// Guided regeneration on the expert caption; the baseline answer when
    /// nothing was retrieved.
    pub(crate) fn guided(&self, row: &DatasetRow, p: &Prepared, cfg: &GuidanceConfig<f64>) -> Result<Outcome> {
        let Some(x) = &p.expert else {
            return Ok(p.baseline.clone());
        };
        let (prompt, mask) = highlighted_prompt::<f64>(self.model.vocab(), &row.question, &x.caption, &x.spans)?;
        let out = guided_decode(self.model.as_ref(), &prompt, &mask, cfg, self.settings.max_len)?;
        Self::outcome(row, out.answer_text())
    }

    fn with_reference(&self, row: &DatasetRow, p: &Prepared, caption: Option<&str>) -> Result<Outcome> {
        match caption {
            Some(c) => Self::outcome(row, self.plain(&compose_prompt(&row.question, c).0)?),
            None => Ok(p.baseline.clone()),
        }
    }

    fn label_prob(&self, i: usize, row: &DatasetRow) -> Result<f64> {
        let c = &self.settings.calibration;
        let prompt = Prompt::text(self.model.vocab().tokenize(&row.question));
        Ok(label_prob_estimator(
            self.model.as_ref(),
            &prompt,
            c.label_samples,
            c.label_temperature,
            item_seed(self.settings.seed, i),
            self.settings.max_len,
        )?)
    }

    fn is_true(&self, row: &DatasetRow, answer: &str) -> Result<Option<f64>> {
        let prompt = Prompt::text(self.model.vocab().tokenize(&row.question));
        match is_true_prob_estimator(self.model.as_ref(), &prompt, answer, &self.settings.calibration.verdict) {
            Ok(p) => Ok(Some(p)),
            Err(expert_cfg::Error::Config(_)) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Top captions per hit-rate strategy for an open row. A strategy the
    /// query cannot use retrieves nothing.
    fn hit_captions(&self, row: &DatasetRow, kmax: usize) -> Vec<Vec<String>> {
        let Some(store) = &self.store else {
            return vec![Vec::new(); HIT_STRATEGIES.len()];
        };
        let query = row.visual_ref.query(Some(store)).ok();
        HIT_STRATEGIES
            .iter()
            .map(|&s| {
                query
                    .as_ref()
                    .and_then(|q| store.knn(q, kmax, s).ok())
                    .unwrap_or_default()
                    .into_iter()
                    .map(|h| store.get(&h.id).expect("hit ids come from the store").caption.clone())
                    .collect()
            })
            .collect()
    }
}

/// Per-item sampling seed; independent of scheduling.
pub fn item_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn row_id(row: &DatasetRow) -> &str {
    row.id.as_deref().unwrap_or("<row>")
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Open, closed and overall means of `score`.
pub fn score_arm<T>(name: &str, items: &[T], kind: impl Fn(&T) -> QuestionType, score: impl Fn(&T) -> f64) -> ArmScore {
    let of = |k: Option<QuestionType>| mean(items.iter().filter(|i| k.is_none_or(|k| kind(i) == k)).map(&score));
    ArmScore {
        arm: name.to_string(),
        open: of(Some(QuestionType::Open)),
        closed: of(Some(QuestionType::Closed)),
        overall: of(None),
    }
}

pub fn arm_scores(items: &[ItemResult]) -> Vec<ArmScore> {
    let gated = |i: &ItemResult, treated: &Outcome| if i.review { treated.score } else { i.baseline.score };
    let kind = |i: &ItemResult| i.kind;
    vec![
        score_arm(ARMS[0], items, kind, |i| i.baseline.score),
        score_arm(ARMS[1], items, kind, |i| i.rag.score),
        score_arm(ARMS[2], items, kind, |i| gated(i, &i.rag)),
        score_arm(ARMS[3], items, kind, |i| gated(i, &i.expert_rag)),
        score_arm(ARMS[4], items, kind, |i| gated(i, &i.expert_cfg)),
    ]
}

fn gate_stats(policy: GatePolicy, items: &[ItemResult]) -> GateStats {
    let pe = |want: bool| items.iter().filter(move |i| i.review == want).map(|i| i.entropy.normalized_pe);
    GateStats {
        policy,
        total: items.len(),
        reviewed: items.iter().filter(|i| i.review).count(),
        min_reviewed_pe: pe(true).reduce(f64::min),
        max_delivered_pe: pe(false).reduce(f64::max),
    }
}

fn calibrate(method: &str, confidences: &[Option<f64>], items: &[ItemResult], bins: usize) -> MethodCalibration {
    let unavailable = |note: String| MethodCalibration {
        method: method.into(),
        summary: None,
        note: Some(note),
    };
    if items.is_empty() {
        return unavailable("no items".into());
    }
    let Some(conf) = confidences.iter().copied().collect::<Option<Vec<f64>>>() else {
        return unavailable("model vocabulary lacks the verdict tokens".into());
    };
    let samples: Vec<LogitSample<f64>> = conf
        .iter()
        .zip(items)
        .map(|(&c, item)| {
            let c = c.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
            LogitSample {
                logit: (c / (1.0 - c)).ln(),
                correct: item.baseline.score == 1.0,
            }
        })
        .collect();
    match temperature_fit_and_rescore(&samples, bins) {
        Ok(summary) => MethodCalibration {
            method: method.into(),
            summary: Some(summary),
            note: None,
        },
        Err(e) => unavailable(e.to_string()),
    }
}

/// Confidence that the baseline answer is right, from its entropy.
pub fn entropy_confidence(item: &ItemResult) -> f64 {
    1.0 - item.entropy.normalized_pe
}

pub fn run_eval(ctx: &EvalContext) -> Result<MetricsBundle> {
    let s = &ctx.settings;
    let Stage { prepared, review } = ctx.stage()?;
    let items = ctx.par_map(ctx.rows.len(), |i| {
        let (row, p) = (&ctx.rows[i], &prepared[i]);
        let rag = ctx.with_reference(row, p, p.rag_caption.as_deref())?;
        let expert_rag = ctx.with_reference(row, p, p.expert.as_ref().map(|x| x.caption.as_str()))?;
        let expert_cfg = ctx.guided(row, p, &s.guidance)?;
        Ok(ItemResult {
            id: row_id(row).to_string(),
            kind: row.kind,
            truth: row.answer.clone(),
            entropy: p.entropy.clone(),
            review: review[i],
            baseline: p.baseline.clone(),
            rag,
            expert_rag,
            expert_cfg,
            references: p.references.clone(),
            expert_reference: p.expert.as_ref().map(|x| x.reference.clone()),
            label_prob: ctx.label_prob(i, row)?,
            is_true: ctx.is_true(row, &p.baseline.answer)?,
        })
    })?;

    let bins = s.calibration.ece_bins;
    let calibration = vec![
        calibrate("entropy", &items.iter().map(|i| Some(entropy_confidence(i))).collect::<Vec<_>>(), &items, bins),
        calibrate("label_prob", &items.iter().map(|i| Some(i.label_prob)).collect::<Vec<_>>(), &items, bins),
        calibrate("is_true", &items.iter().map(|i| i.is_true).collect::<Vec<_>>(), &items, bins),
    ];

    let open_rows: Vec<usize> = (0..ctx.rows.len())
        .filter(|&i| ctx.rows[i].kind == QuestionType::Open)
        .collect();
    let kmax = s.sweep.hit_ks.iter().copied().max().unwrap_or(1);
    let captions = ctx.par_map(open_rows.len(), |j| Ok(ctx.hit_captions(&ctx.rows[open_rows[j]], kmax)))?;
    let answers: Vec<String> = open_rows.iter().map(|&i| ctx.rows[i].answer.clone()).collect();
    let mut ks = s.sweep.hit_ks.clone();
    ks.sort_unstable();
    ks.dedup();
    let hit_rates = ks
        .iter()
        .map(|&k| {
            let rate = |col: usize| -> Result<f64> {
                let retrieved: Vec<Vec<String>> = captions.iter().map(|c| c[col].clone()).collect();
                Ok(hit_rate(&retrieved, &answers, k)?)
            };
            Ok(HitRateRow {
                k,
                image: rate(0)?,
                text: rate(1)?,
                sum: rate(2)?,
                union: rate(3)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(MetricsBundle {
        format: BUNDLE_FORMAT.into(),
        version: BUNDLE_VERSION,
        settings: s.clone(),
        rows: items.len(),
        open: open_rows.len(),
        closed: items.len() - open_rows.len(),
        row_errors: ctx.row_errors.clone(),
        warnings: prepared.iter().filter_map(|p| p.warning.clone()).collect(),
        arms: arm_scores(&items),
        gate: gate_stats(s.policy, &items),
        calibration,
        hit_rates,
        items,
    })
}
