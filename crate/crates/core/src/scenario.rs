//! Seeded synthetic worlds for end-to-end checks.
//!
//! A world is one one-hot [`OneLayerToy`] spec, a caption corpus and a QA
//! dataset. Each item owns a question ending in a unique `scan<i>` token and
//! a reference caption ending in a unique `series<i>` token; transition rows
//! on those two tokens fix the model's prior answer.
//!
//! Steering items put a wrong answer ahead by a logit margin `P` and give the
//! correct answer token an evidence weight `E = r P`, read out in proportion
//! to the attention mass on that token. Attention is uniform (zero salience),
//! so over the `n` tokens of `question \n reference`:
//!
//! * plain decoding picks the correct answer iff `E / n > P`;
//! * highlighting the answer token with `beta = 3` and `gamma = 1.3` picks it
//!   iff roughly `3.9 E / (n + 2) > P` (the unconditional branch contributes
//!   `(gamma - 1) P` plus a term below `0.001 E`);
//! * with `gamma = 1` the condition is `3 E / (n + 2) > P`.
//!
//! `r` is drawn from `[0.36 n, 0.9 n]`, so plain decoding always fails,
//! guided decoding at the defaults succeeds, and a fraction of items with
//! `r < (n + 2) / 3` fail at `gamma = 1`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::annotation::{auto_highlight, compose_prompt, HighlightSpan};
use crate::dataset::{DatasetRow, VisualRef};
use crate::evaluation::QuestionType;
use crate::guidance::HighlightMask;
use crate::model::{
    EvidenceSpec, MicroConfig, MicroTransformer, OneLayerToy, Prompt, ToySpec, TransitionSpec, Vocab, DEFAULT_WORDS, EOS,
};
use crate::retrieval::{KnowledgeRecord, Modality, QueryEmbedding};

const FINDINGS: &[&str] = &[
    "effusion", "nodule", "fracture", "lesion", "opacity", "mass", "cyst", "edema", "infarct",
    "abscess",
];
const FILLER: &[&str] = &[
    "image", "shows", "the", "left", "right", "upper", "lower", "region", "with", "mild",
    "marked", "adjacent", "tissue", "noted", "lobe", "field", "area", "view",
];
const QUESTION_WORDS: &[&str] = &["what", "abnormality", "is", "seen", "in", "there"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    /// Open items with a wrong prior and highlightable evidence.
    pub steering: usize,
    /// Open items the model answers confidently and correctly.
    pub easy_open: usize,
    /// Yes/no items the model answers confidently and correctly.
    pub closed: usize,
    pub embedding_dim: usize,
    /// Reference filler length range (inclusive).
    pub filler: (usize, usize),
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            steering: 5,
            easy_open: 8,
            closed: 7,
            embedding_dim: 16,
            filler: (3, 8),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticItem {
    pub row: DatasetRow,
    pub steering: bool,
    /// Id of the item's own caption record.
    pub reference_id: String,
    pub wrong_answer: Option<String>,
    /// Evidence-to-margin ratio `r` for steering items.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub model: ToySpec,
    pub corpus: Vec<KnowledgeRecord<f64>>,
    pub items: Vec<SyntheticItem>,
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn perturbed(rng: &mut ChaCha8Rng, base: &[f64], sigma: f64) -> Vec<f64> {
    let v: Vec<f64> = base
        .iter()
        .map(|&x| {
            let z: f64 = StandardNormal.sample(rng);
            x + sigma * z / (base.len() as f64).sqrt()
        })
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

impl SyntheticWorld {
    pub fn generate(config: WorldConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let total = config.steering + config.easy_open + config.closed;
        let mut words: Vec<String> = QUESTION_WORDS
            .iter()
            .chain(FINDINGS)
            .chain(FILLER)
            .map(|w| w.to_string())
            .collect();
        words.extend(["yes".to_string(), "no".to_string()]);
        let mut transitions = Vec::new();
        let mut evidence = Vec::new();
        let mut corpus = Vec::new();
        let mut items = Vec::new();
        // Kinds are interleaved deterministically so every prefix mixes them.
        let mut kinds: Vec<u8> = std::iter::repeat_n(0u8, config.steering)
            .chain(std::iter::repeat_n(1, config.easy_open))
            .chain(std::iter::repeat_n(2, config.closed))
            .collect();
        kinds.shuffle(&mut rng);
        for (i, kind) in kinds.into_iter().enumerate() {
            let scan = format!("scan{i}");
            let series = format!("series{i}");
            words.push(scan.clone());
            words.push(series.clone());
            let finding = *FINDINGS.choose(&mut rng).expect("non-empty");
            let (question, answer, qtype, wrong) = match kind {
                2 => {
                    let yes = rng.gen_bool(0.5);
                    (
                        format!("is there {finding} in {scan}"),
                        if yes { "yes" } else { "no" }.to_string(),
                        QuestionType::Closed,
                        None,
                    )
                }
                _ => {
                    let answer = format!("{finding}{i}");
                    let other = FINDINGS.iter().find(|f| **f != finding).expect("two findings");
                    let wrong = format!("{other}{i}");
                    words.push(answer.clone());
                    words.push(wrong.clone());
                    (
                        format!("what abnormality is seen in {scan}"),
                        answer,
                        QuestionType::Open,
                        Some(wrong),
                    )
                }
            };
            let n_fill = rng.gen_range(config.filler.0..=config.filler.1);
            let mut caption_words: Vec<String> = (0..n_fill)
                .map(|_| FILLER.choose(&mut rng).expect("non-empty").to_string())
                .collect();
            let pos = rng.gen_range(0..=caption_words.len());
            let keyword = if qtype == QuestionType::Closed {
                finding.to_string()
            } else {
                answer.clone()
            };
            caption_words.insert(pos, keyword.clone());
            caption_words.push("in".into());
            caption_words.push(series.clone());
            let caption = caption_words.join(" ");

            let mut ratio = None;
            let row_logits: Vec<(String, f64)> = match (kind, &wrong) {
                (0, Some(wrong)) => {
                    let (prompt, _) = compose_prompt(&question, &caption);
                    let n = crate::model::split_words(&prompt).len() as f64;
                    let p: f64 = rng.gen_range(0.4..1.5);
                    let r = rng.gen_range(0.36 * n..0.9 * n);
                    ratio = Some(r);
                    evidence.push(EvidenceSpec {
                        source: answer.clone(),
                        target: answer.clone(),
                        weight: r * p,
                    });
                    vec![(wrong.clone(), p), (answer.clone(), 0.0)]
                }
                (1, Some(wrong)) => {
                    let m: f64 = rng.gen_range(5.0..9.0);
                    vec![(answer.clone(), m), (wrong.clone(), 0.0)]
                }
                _ => {
                    let m: f64 = rng.gen_range(5.0..9.0);
                    let other = if answer == "yes" { "no" } else { "yes" };
                    vec![(answer.clone(), m), (other.to_string(), 0.0)]
                }
            };
            for last in [&scan, &series] {
                transitions.push(TransitionSpec {
                    last: last.clone(),
                    logits: row_logits.clone(),
                });
            }

            let image = unit(&mut rng, config.embedding_dim);
            let text = unit(&mut rng, config.embedding_dim);
            // Thirds: blurred image query, blurred text query, both clean.
            let (si, st) = match i % 3 {
                0 => (2.5, 0.3),
                1 => (0.3, 2.5),
                _ => (0.3, 0.3),
            };
            let query = QueryEmbedding {
                image_embedding: Some(perturbed(&mut rng, &image, si)),
                text_embedding: Some(perturbed(&mut rng, &text, st)),
            };
            let record_id = format!("rec{i:04}");
            corpus.push(KnowledgeRecord {
                id: record_id.clone(),
                caption,
                keywords: vec![keyword],
                image_embedding: Some(image),
                text_embedding: Some(text),
                modality: Modality::Radiology,
            });
            items.push(SyntheticItem {
                row: DatasetRow {
                    id: Some(format!("item{i:04}")),
                    question,
                    answer: answer.clone(),
                    kind: qtype,
                    visual_ref: VisualRef::Inline(query),
                    corpus_answer_keywords: Some(vec![answer.clone()]),
                },
                steering: kind == 0,
                reference_id: record_id,
                wrong_answer: wrong,
                ratio,
            });
        }
        // Every emitted answer is followed by end-of-sequence.
        let answers: Vec<String> = items
            .iter()
            .flat_map(|it| std::iter::once(it.row.answer.clone()).chain(it.wrong_answer.clone()))
            .chain(["yes".to_string(), "no".to_string()])
            .collect();
        let mut seen = std::collections::BTreeSet::new();
        for a in answers {
            if seen.insert(a.clone()) {
                transitions.push(TransitionSpec {
                    last: a,
                    logits: vec![(EOS.to_string(), 0.0)],
                });
            }
        }
        debug_assert_eq!(items.len(), total);
        let model = ToySpec {
            words: Vocab::new(&words).words().skip(2).map(str::to_string).collect(),
            prior: Vec::new(),
            salience: Vec::new(),
            transitions,
            evidence,
        };
        Self {
            config,
            model,
            corpus,
            items,
        }
    }

    pub fn record(&self, id: &str) -> Option<&KnowledgeRecord<f64>> {
        self.corpus.iter().find(|r| r.id == id)
    }

    /// Ground-truth highlight spans over the item's own caption.
    pub fn expert_spans(&self, item: &SyntheticItem) -> Vec<HighlightSpan> {
        let rec = self.record(&item.reference_id).expect("item record exists");
        auto_highlight(&rec.keywords, &item.row.question, &rec.caption, Some(&item.row.answer))
    }

    pub fn steering_items(&self) -> impl Iterator<Item = &SyntheticItem> {
        self.items.iter().filter(|i| i.steering)
    }

    pub fn dataset(&self) -> Vec<DatasetRow> {
        self.items.iter().map(|i| i.row.clone()).collect()
    }
}

/// A random model, prompt and highlight mask.
#[derive(Debug, Clone)]
pub struct RandomCase<M> {
    pub model: M,
    pub prompt: Prompt<f64>,
    pub mask: HighlightMask,
}

fn random_prompt_and_mask(rng: &mut ChaCha8Rng, vocab: &Vocab, words: &[String]) -> (Prompt<f64>, HighlightMask) {
    let len = rng.gen_range(2..=7);
    let text: Vec<&str> = (0..len)
        .map(|_| words.choose(rng).expect("non-empty").as_str())
        .collect();
    let seq = vocab.tokenize(&text.join(" "));
    let bits = (0..seq.len()).map(|_| rng.gen_bool(0.4)).collect();
    let mask = HighlightMask::new(bits, &seq).expect("text-only prompt");
    (Prompt::text(seq), mask)
}

/// Random one-hot toy with priors, salience, evidence and partial transition rows.
pub fn random_toy_case(seed: u64) -> RandomCase<OneLayerToy<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(4..=8);
    let words: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
    let mut targets = words.clone();
    targets.push(EOS.to_string());
    let mut spec = ToySpec {
        words: words.clone(),
        ..ToySpec::default()
    };
    for w in &targets {
        spec.prior.push((w.clone(), rng.gen_range(-2.0..2.0)));
    }
    for w in &words {
        spec.salience.push((w.clone(), rng.gen_range(-2.0..2.0)));
        if rng.gen_bool(0.5) {
            let mut logits = Vec::new();
            for t in &targets {
                if rng.gen_bool(0.5) {
                    logits.push((t.clone(), rng.gen_range(-3.0..3.0)));
                }
            }
            spec.transitions.push(TransitionSpec {
                last: w.clone(),
                logits,
            });
        }
    }
    for _ in 0..rng.gen_range(1..=4) {
        spec.evidence.push(EvidenceSpec {
            source: words.choose(&mut rng).expect("non-empty").clone(),
            target: targets.choose(&mut rng).expect("non-empty").clone(),
            weight: rng.gen_range(-4.0..6.0),
        });
    }
    let model = OneLayerToy::from_spec(&spec).expect("spec words are in the vocabulary");
    let (prompt, mask) = random_prompt_and_mask(&mut rng, &Vocab::new(&words), &words);
    RandomCase { model, prompt, mask }
}

/// Seeded reference transformer with a random prompt over its vocabulary.
pub fn random_micro_case(seed: u64) -> RandomCase<MicroTransformer<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = MicroTransformer::seeded(MicroConfig::default(), rng.gen());
    let words: Vec<String> = DEFAULT_WORDS.iter().map(|w| w.to_string()).collect();
    let (prompt, mask) = random_prompt_and_mask(&mut rng, &Vocab::new(DEFAULT_WORDS), &words);
    RandomCase { model, prompt, mask }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::highlighted_prompt;
    use crate::guidance::{guided_decode, GuidanceConfig};
    use crate::model::{greedy_decode, GuidableModel, OneLayerToy, Prompt};
    use crate::text::normalize;

    fn world() -> SyntheticWorld {
        SyntheticWorld::generate(WorldConfig::default())
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(world(), world());
        let other = SyntheticWorld::generate(WorldConfig {
            seed: 8,
            ..WorldConfig::default()
        });
        assert_ne!(world(), other);
    }

    #[test]
    fn counts_and_spans() {
        let w = world();
        assert_eq!(w.items.len(), 20);
        assert_eq!(w.steering_items().count(), 5);
        for it in &w.items {
            let spans = w.expert_spans(it);
            assert_eq!(spans.len(), 1, "{}", it.row.question);
        }
    }

    #[test]
    fn easy_items_answered_from_question_alone() {
        let w = world();
        let m = OneLayerToy::<f64>::from_spec(&w.model).unwrap();
        for it in w.items.iter().filter(|i| !i.steering) {
            let p = Prompt::text(m.vocab().tokenize(&it.row.question));
            let d = greedy_decode(&m, &p, 4).unwrap();
            assert_eq!(normalize(&d.answer_text()), it.row.answer);
        }
    }

    #[test]
    fn steering_items_flip_under_guidance() {
        let w = world();
        let m = OneLayerToy::<f64>::from_spec(&w.model).unwrap();
        for it in w.steering_items() {
            let rec = w.record(&it.reference_id).unwrap();
            let spans = w.expert_spans(it);
            let (p, mask) = highlighted_prompt::<f64>(m.vocab(), &it.row.question, &rec.caption, &spans).unwrap();
            let plain = greedy_decode(&m, &p, 4).unwrap();
            assert_eq!(normalize(&plain.answer_text()), *it.wrong_answer.as_ref().unwrap());
            let guided = guided_decode(&m, &p, &mask, &GuidanceConfig::default(), 4).unwrap();
            assert_eq!(normalize(&guided.answer_text()), it.row.answer);
        }
    }
}
