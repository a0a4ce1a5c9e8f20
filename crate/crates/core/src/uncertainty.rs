//! Length-normalized predictive entropy and review gating.
//!
//! Entropy is measured in nats over generated positions only. The
//! normalized value divides by `ln(vocab_size)`, the maximum possible
//! per-step entropy, so it lies in `[0, 1]`.

use std::io::BufRead;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::model::{
    forward_step, greedy_decode, sample_decode, GuidableModel, Prompt, Role, StepDistribution,
    Token, TokenSequence,
};
use crate::scalar::Scalar;
use crate::text::normalize;

const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport<F> {
    pub per_step_entropy: Vec<F>,
    /// Mean per-step entropy (nats).
    pub pe: F,
    pub normalized_pe: F,
    /// Mean log-probability of the emitted tokens.
    pub seq_logprob_mean: F,
}

/// Shannon entropy `-Σ p ln p` with `0 ln 0 = 0`. Terms are summed in
/// ascending order, so the result is independent of token order.
pub fn shannon_entropy<F: Scalar>(probs: &[F]) -> F {
    let mut terms: Vec<F> = probs
        .iter()
        .filter(|&&p| p > F::zero())
        .map(|&p| -(p * p.ln()))
        .collect();
    terms.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    terms.into_iter().sum()
}

/// Entropy of `softmax(logits)` as `ln Z - Σ p_i s_i` with `s_i = l_i - max l`.
///
/// Both sums run in ascending order, so permuting the logits leaves the
/// result unchanged bit for bit, and equal logits give exactly `ln V`.
pub fn entropy_from_logits<F: Scalar>(logits: &[F]) -> F {
    let m = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let mut shifted: Vec<F> = logits.iter().map(|&l| l - m).collect();
    shifted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let z: F = shifted.iter().map(|s| s.exp()).sum();
    let mut terms: Vec<F> = shifted
        .iter()
        .map(|&s| {
            let p = s.exp() / z;
            if p > F::zero() { p * s } else { F::zero() }
        })
        .collect();
    terms.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let h = z.ln() - terms.into_iter().sum::<F>();
    h.max(F::zero())
}

fn check_normalized<F: Scalar>(step: usize, probs: &[F]) -> Result<()> {
    let sum: F = probs.iter().copied().sum();
    let s = sum.to_f64_lossy();
    if (s - 1.0).abs() > NORMALIZATION_TOLERANCE || probs.iter().any(|p| *p < F::zero()) {
        return Err(Error::NotNormalized { step, sum: s });
    }
    Ok(())
}

/// Mean log-probability of `emitted` under the per-step distributions.
pub fn sequence_logprob_normalized<F: Scalar>(
    steps: &[StepDistribution<F>],
    emitted: &[Token],
) -> Result<F> {
    ensure_len("emitted tokens", steps.len(), emitted.len())?;
    if steps.is_empty() {
        return Err(Error::contract("no generated steps"));
    }
    let total: F = steps
        .iter()
        .zip(emitted)
        .map(|(s, t)| s.log_probs[t.id.index()])
        .sum();
    Ok(total / F::from_count(steps.len()))
}

/// Entropy over step distributions. `seq_logprob_mean` is taken at each
/// step's argmax, which is what greedy decoding emits; use
/// [`EntropyReport::from_decode`] for other emitted sequences.
pub fn predictive_entropy<F: Scalar>(steps: &[StepDistribution<F>]) -> Result<EntropyReport<F>> {
    report_from_steps(steps, &vec![None; steps.len()])
}

fn report_from_steps<F: Scalar>(steps: &[StepDistribution<F>], emitted: &[Option<usize>]) -> Result<EntropyReport<F>> {
    let mut per_step = Vec::new();
    let mut logp = F::zero();
    let mut vocab = 0usize;
    for (i, s) in steps.iter().enumerate() {
        check_normalized(i, &s.probabilities)?;
        per_step.push(entropy_from_logits(&s.logits));
        let idx = emitted[i].unwrap_or_else(|| s.argmax().index());
        logp += s.log_probs[idx];
        vocab = vocab.max(s.vocab_size());
    }
    finish_report(per_step, logp, vocab)
}

fn finish_report<F: Scalar>(per_step: Vec<F>, logp: F, vocab: usize) -> Result<EntropyReport<F>> {
    if per_step.is_empty() {
        return Err(Error::contract("no generated steps"));
    }
    let n = F::from_count(per_step.len());
    let pe = per_step.iter().copied().sum::<F>() / n;
    let max = F::from_count(vocab).ln();
    let normalized_pe = if max > F::zero() {
        (pe / max).max(F::zero()).min(F::one())
    } else {
        F::zero()
    };
    Ok(EntropyReport {
        per_step_entropy: per_step,
        pe,
        normalized_pe,
        seq_logprob_mean: logp / n,
    })
}

impl<F: Scalar> EntropyReport<F> {
    /// Report for a decode whose emitted tokens may not be the argmax.
    pub fn from_decode(steps: &[StepDistribution<F>], emitted: &[Token]) -> Result<Self> {
        ensure_len("emitted tokens", steps.len(), emitted.len())?;
        let ids: Vec<Option<usize>> = emitted.iter().map(|t| Some(t.id.index())).collect();
        report_from_steps(steps, &ids)
    }
}

/// How `normalized_pe` is derived from `pe`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyNormalizer {
    /// Divide by `ln(vocab_size)`.
    #[default]
    LogVocab,
    /// Min-max scale `pe` over the batch.
    MinMax,
}

/// Re-normalizes a batch in place. `LogVocab` leaves reports untouched.
pub fn normalize_batch<F: Scalar>(reports: &mut [EntropyReport<F>], normalizer: EntropyNormalizer) {
    if normalizer == EntropyNormalizer::LogVocab || reports.is_empty() {
        return;
    }
    let lo = reports.iter().map(|r| r.pe).fold(F::infinity(), F::min);
    let hi = reports.iter().map(|r| r.pe).fold(F::neg_infinity(), F::max);
    for r in reports.iter_mut() {
        r.normalized_pe = if hi > lo {
            (r.pe - lo) / (hi - lo)
        } else {
            F::zero()
        };
    }
}

/// One line of a decode-trace JSONL file.
///
/// Either a dense distribution (`probs`) or a sparse top-k list with an
/// explicit remainder bucket. The remainder's mass is spread uniformly over
/// `remainder_tokens` outcomes when given, otherwise counted as one outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TraceStep {
    Dense {
        probs: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        emitted: Option<u32>,
    },
    Sparse {
        top: Vec<(u32, f64)>,
        remainder: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        remainder_tokens: Option<u64>,
        vocab_size: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        emitted: Option<u32>,
    },
}

/// Parses a JSONL decode trace; blank lines are skipped.
pub fn read_trace_jsonl<R: BufRead>(reader: R) -> Result<Vec<TraceStep>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<trace>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let step: TraceStep = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("trace line {}: {e}", n + 1)))?;
        out.push(step);
    }
    Ok(out)
}

/// Entropy report over a parsed trace.
pub fn entropy_from_trace(steps: &[TraceStep]) -> Result<EntropyReport<f64>> {
    let mut per_step = Vec::new();
    let mut logp = 0.0;
    let mut vocab = 0usize;
    for (i, step) in steps.iter().enumerate() {
        match step {
            TraceStep::Dense { probs, emitted } => {
                check_normalized(i, probs)?;
                per_step.push(shannon_entropy(probs));
                let idx = emitted
                    .map(|e| e as usize)
                    .or_else(|| crate::scalar::argmax(probs))
                    .ok_or_else(|| Error::contract("empty distribution"))?;
                let p = *probs
                    .get(idx)
                    .ok_or_else(|| Error::contract("emitted id outside distribution"))?;
                logp += p.ln();
                vocab = vocab.max(probs.len());
            }
            TraceStep::Sparse {
                top,
                remainder,
                remainder_tokens,
                vocab_size,
                emitted,
            } => {
                let mut mass: Vec<f64> = top.iter().map(|(_, p)| *p).collect();
                mass.push(*remainder);
                check_normalized(i, &mass)?;
                let mut h = shannon_entropy(&mass[..top.len()]);
                if *remainder > 0.0 {
                    let n = remainder_tokens.unwrap_or(1).max(1) as f64;
                    h += -remainder * (remainder / n).ln();
                }
                per_step.push(h);
                let p = match emitted {
                    Some(e) => top
                        .iter()
                        .find(|(id, _)| id == e)
                        .map(|(_, p)| *p)
                        .unwrap_or_else(|| remainder / remainder_tokens.unwrap_or(1).max(1) as f64),
                    None => top.iter().map(|(_, p)| *p).fold(0.0, f64::max),
                };
                logp += p.ln();
                vocab = vocab.max(*vocab_size);
            }
        }
    }
    finish_report(per_step, logp, vocab)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum GatePolicy {
    /// Review the `p` percent of the batch with the highest entropy.
    TopPercent(f64),
    /// Review every item with `normalized_pe >= tau`.
    FixedThreshold(f64),
}

impl Default for GatePolicy {
    fn default() -> Self {
        GatePolicy::TopPercent(5.0)
    }
}

impl GatePolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            GatePolicy::TopPercent(p) if !(p > 0.0 && p <= 100.0) => {
                Err(Error::contract("top percent must lie in (0, 100]"))
            }
            GatePolicy::FixedThreshold(t) if !(0.0..=1.0).contains(&t) => {
                Err(Error::contract("threshold must lie in [0, 1]"))
            }
            _ => Ok(()),
        }
    }

    /// Number of items `TopPercent(p)` reviews in a batch of `n`: `ceil(p n / 100)`.
    pub fn review_count(percent: f64, n: usize) -> usize {
        let exact = percent * n as f64 / 100.0;
        // Shave representation error so 7% of 100 is 7, not 8.
        let k = (exact - 1e-9).ceil().max(0.0) as usize;
        k.min(n)
    }
}

impl FromStr for GatePolicy {
    type Err = Error;

    /// `top:5` or `threshold:0.4`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, value) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("policy {s:?}: expected kind:value")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("policy {s:?}: bad number")))?;
        let policy = match kind.trim() {
            "top" | "top_percent" => GatePolicy::TopPercent(value),
            "threshold" | "fixed_threshold" => GatePolicy::FixedThreshold(value),
            other => return Err(Error::Config(format!("unknown policy kind {other:?}"))),
        };
        policy.validate()?;
        Ok(policy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Deliver,
    Review,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDecision<F> {
    pub verdict: Verdict,
    pub entropy: F,
}

/// Routes each report to delivery or review.
///
/// `TopPercent` reviews exactly `ceil(p N / 100)` items with the highest
/// normalized entropy; among equal entropies earlier items are reviewed
/// first. `FixedThreshold` reviews items with entropy `>= tau`.
pub fn gate<F: Scalar>(reports: &[EntropyReport<F>], policy: GatePolicy) -> Result<Vec<GateDecision<F>>> {
    policy.validate()?;
    let decide = |review: bool, r: &EntropyReport<F>| GateDecision {
        verdict: if review { Verdict::Review } else { Verdict::Deliver },
        entropy: r.normalized_pe,
    };
    match policy {
        GatePolicy::FixedThreshold(tau) => {
            let tau = F::from_lit(tau);
            Ok(reports.iter().map(|r| decide(r.normalized_pe >= tau, r)).collect())
        }
        GatePolicy::TopPercent(p) => {
            if reports.is_empty() {
                return Err(Error::contract("top-percent gating needs a non-empty batch"));
            }
            let k = GatePolicy::review_count(p, reports.len());
            let mut order: Vec<usize> = (0..reports.len()).collect();
            // Stable sort keeps input order among ties.
            order.sort_by(|&a, &b| {
                reports[b]
                    .normalized_pe
                    .partial_cmp(&reports[a].normalized_pe)
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            let mut review = vec![false; reports.len()];
            for &i in &order[..k] {
                review[i] = true;
            }
            Ok(reports
                .iter()
                .zip(review)
                .map(|(r, flag)| decide(flag, r))
                .collect())
        }
    }
}

/// Sampling-consistency confidence: the fraction of `samples` multinomial
/// decodes at `temperature` whose normalized answer equals the greedy answer.
pub fn label_prob_estimator<F: Scalar, M: GuidableModel<F> + ?Sized>(
    model: &M,
    prompt: &Prompt<F>,
    samples: usize,
    temperature: F,
    seed: u64,
    max_len: usize,
) -> Result<F> {
    if samples == 0 {
        return Err(Error::contract("samples must be at least 1"));
    }
    let greedy = normalize(&greedy_decode(model, prompt, max_len)?.answer_text());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agree = 0usize;
    for _ in 0..samples {
        let sampled = sample_decode(model, prompt, max_len, temperature, &mut rng)?;
        if normalize(&sampled.answer_text()) == greedy {
            agree += 1;
        }
    }
    Ok(F::from_count(agree) / F::from_count(samples))
}

pub const DEFAULT_LABEL_SAMPLES: usize = 10;
pub const DEFAULT_LABEL_TEMPERATURE: f64 = 1.0;

/// Template and verdict words for the self-verification estimator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictTemplate {
    /// Appended after the question and answer.
    pub template: String,
    pub true_word: String,
    pub false_word: String,
}

impl Default for VerdictTemplate {
    fn default() -> Self {
        Self {
            template: "is this answer true?".into(),
            true_word: "true".into(),
            false_word: "false".into(),
        }
    }
}

/// Self-verification confidence: append the answer and the verdict template
/// to the prompt, run one step and return `P(true) / (P(true) + P(false))`.
pub fn is_true_prob_estimator<F: Scalar, M: GuidableModel<F> + ?Sized>(
    model: &M,
    prompt: &Prompt<F>,
    answer: &str,
    verdict: &VerdictTemplate,
) -> Result<F> {
    let vocab = model.vocab();
    let t = vocab
        .id(&verdict.true_word)
        .ok_or_else(|| Error::Config(format!("verdict token {:?} not in vocabulary", verdict.true_word)))?;
    let f = vocab
        .id(&verdict.false_word)
        .ok_or_else(|| Error::Config(format!("verdict token {:?} not in vocabulary", verdict.false_word)))?;
    let suffix = vocab.tokenize(&format!("{answer} {}", verdict.template));
    let mut tokens = prompt.sequence.tokens().to_vec();
    let mut roles = prompt.sequence.roles().to_vec();
    tokens.extend(suffix.tokens().iter().map(|tok| Token {
        offset: None,
        ..tok.clone()
    }));
    roles.extend(std::iter::repeat_n(Role::Prompt, suffix.len()));
    let extended = Prompt {
        sequence: TokenSequence::new(tokens, roles)?,
        visual: prompt.visual.clone(),
    };
    let ctx = crate::model::embed_prompt(model, &extended)?;
    let step = forward_step(model, &ctx, &vec![F::zero(); ctx.len()])?;
    let (pt, pf) = (step.prob(t), step.prob(f));
    if !(pt + pf > F::zero()) {
        return Ok(F::from_lit(0.5));
    }
    Ok(pt / (pt + pf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{OneLayerToy, Vocab, EOS};

    fn dist(p: &[f64]) -> StepDistribution<f64> {
        StepDistribution {
            logits: p.iter().map(|x| x.ln()).collect(),
            probabilities: p.to_vec(),
            log_probs: p.iter().map(|x| x.ln()).collect(),
        }
    }

    fn report(normalized: f64) -> EntropyReport<f64> {
        EntropyReport {
            per_step_entropy: vec![normalized],
            pe: normalized,
            normalized_pe: normalized,
            seq_logprob_mean: 0.0,
        }
    }

    fn tok(i: u32) -> Token {
        Token {
            id: crate::model::TokenId(i),
            surface: String::new(),
            offset: None,
        }
    }

    #[test]
    fn logprob_mean_cases() {
        assert_eq!(sequence_logprob_normalized(&[dist(&[1.0, 0.0])], &[tok(0)]).unwrap(), 0.0);
        let v = sequence_logprob_normalized(&[dist(&[0.5, 0.5]), dist(&[0.25, 0.75])], &[tok(0), tok(0)]).unwrap();
        assert!((v - (-1.0397207708399179)).abs() < 1e-12);
        let e1 = (-1f64).exp();
        let v = sequence_logprob_normalized(&[dist(&[e1, 1.0 - e1])], &[tok(0)]).unwrap();
        assert!((v + 1.0).abs() < 1e-12);
        assert!(sequence_logprob_normalized(&[dist(&[1.0])], &[]).is_err());
    }

    #[test]
    fn entropy_cases() {
        let r = predictive_entropy(&[dist(&[0.25; 4])]).unwrap();
        assert!((r.pe - 4f64.ln()).abs() < 1e-12);
        assert_eq!(r.normalized_pe, 1.0);
        let r = predictive_entropy(&[dist(&[1.0, 0.0, 0.0]), dist(&[0.0, 1.0, 0.0])]).unwrap();
        assert_eq!(r.pe, 0.0);
        assert_eq!(r.normalized_pe, 0.0);
        let r = predictive_entropy(&[dist(&[0.5, 0.5, 0.0, 0.0]), dist(&[0.25; 4])]).unwrap();
        assert!((r.pe - 1.0397207708399179).abs() < 1e-12);
        assert!((r.normalized_pe - 0.75).abs() < 1e-12);
    }

    #[test]
    fn unnormalized_distribution_rejected() {
        let err = predictive_entropy(&[dist(&[0.5, 0.4])]).unwrap_err();
        assert!(matches!(err, Error::NotNormalized { step: 0, .. }));
    }

    #[test]
    fn top_half_reviews_two_highest() {
        let reports: Vec<_> = [0.9, 0.1, 0.5, 0.7].iter().map(|&e| report(e)).collect();
        let d = gate(&reports, GatePolicy::TopPercent(50.0)).unwrap();
        let review: Vec<usize> = d
            .iter()
            .enumerate()
            .filter(|(_, d)| d.verdict == Verdict::Review)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(review, [0, 3]);
    }

    #[test]
    fn threshold_above_range_delivers_all() {
        let reports: Vec<_> = [0.99, 0.1].iter().map(|&e| report(e)).collect();
        let d = gate(&reports, GatePolicy::FixedThreshold(1.0)).unwrap();
        assert!(d.iter().all(|d| d.verdict == Verdict::Deliver));
        let d = gate(&reports, GatePolicy::FixedThreshold(0.0)).unwrap();
        assert!(d.iter().all(|d| d.verdict == Verdict::Review));
    }

    #[test]
    fn five_percent_of_hundred() {
        let reports: Vec<_> = (0..100).map(|i| report(i as f64 / 100.0)).collect();
        let d = gate(&reports, GatePolicy::TopPercent(5.0)).unwrap();
        assert_eq!(d.iter().filter(|d| d.verdict == Verdict::Review).count(), 5);
        assert_eq!(GatePolicy::review_count(7.0, 100), 7);
        assert_eq!(GatePolicy::review_count(5.0, 3), 1);
    }

    #[test]
    fn ties_review_earlier_items() {
        let reports: Vec<_> = [0.5, 0.5, 0.5].iter().map(|&e| report(e)).collect();
        let d = gate(&reports, GatePolicy::TopPercent(50.0)).unwrap();
        let v: Vec<_> = d.iter().map(|d| d.verdict).collect();
        assert_eq!(v, [Verdict::Review, Verdict::Review, Verdict::Deliver]);
    }

    #[test]
    fn empty_top_percent_batch_rejected() {
        assert!(gate::<f64>(&[], GatePolicy::TopPercent(5.0)).is_err());
        assert!(gate::<f64>(&[], GatePolicy::FixedThreshold(0.5)).unwrap().is_empty());
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("top:5".parse::<GatePolicy>().unwrap(), GatePolicy::TopPercent(5.0));
        assert_eq!("threshold:0.4".parse::<GatePolicy>().unwrap(), GatePolicy::FixedThreshold(0.4));
        assert!("top:0".parse::<GatePolicy>().is_err());
        assert!("median:3".parse::<GatePolicy>().is_err());
        let json = serde_json::to_string(&GatePolicy::TopPercent(5.0)).unwrap();
        assert_eq!(json, r#"{"kind":"top_percent","value":5.0}"#);
    }

    #[test]
    fn minmax_normalizer() {
        let mut reports = vec![report(0.2), report(0.6), report(1.0)];
        normalize_batch(&mut reports, EntropyNormalizer::MinMax);
        let n: Vec<f64> = reports.iter().map(|r| r.normalized_pe).collect();
        assert!((n[0]).abs() < 1e-12 && (n[1] - 0.5).abs() < 1e-12 && (n[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sparse_trace_with_remainder() {
        let text = r#"{"top":[[3,0.5],[7,0.25]],"remainder":0.25,"remainder_tokens":2,"vocab_size":8}
{"probs":[0.25,0.25,0.25,0.25]}
"#;
        let steps = read_trace_jsonl(text.as_bytes()).unwrap();
        let r = entropy_from_trace(&steps).unwrap();
        // Step 1 expands to [0.5, 0.25, 0.125, 0.125]: 1.2130075659799042 nats.
        let h1 = -(0.5f64 * 0.5f64.ln() + 0.25 * 0.25f64.ln() + 2.0 * 0.125 * 0.125f64.ln());
        assert!((r.per_step_entropy[0] - h1).abs() < 1e-12);
        assert!((r.per_step_entropy[1] - 4f64.ln()).abs() < 1e-12);
        assert!((r.normalized_pe - (h1 + 4f64.ln()) / 2.0 / 8f64.ln()).abs() < 1e-12);
        assert!(read_trace_jsonl("{\"nope\":1}".as_bytes()).is_err());
    }

    fn verdict_toy(pt: f64, pf: f64) -> OneLayerToy<f64> {
        let vocab = Vocab::new(["q", "yes", "no", "is", "this", "answer", "true", "false", "?"]);
        OneLayerToy::one_hot(vocab).with_transition_probs("?", &[("true", pt), ("false", pf)])
    }

    #[test]
    fn is_true_reads_verdict_mass() {
        let m = verdict_toy(0.8, 0.2);
        let p = Prompt::text(m.vocab().tokenize("q"));
        let c = is_true_prob_estimator(&m, &p, "yes", &VerdictTemplate::default()).unwrap();
        assert!((c - 0.8).abs() < 1e-12);
        let m = verdict_toy(0.5, 0.5);
        let c = is_true_prob_estimator(&m, &p, "yes", &VerdictTemplate::default()).unwrap();
        assert!((c - 0.5).abs() < 1e-12);
    }

    #[test]
    fn is_true_requires_verdict_tokens() {
        let m = OneLayerToy::<f64>::one_hot(Vocab::new(["q"]));
        let p = Prompt::text(m.vocab().tokenize("q"));
        let err = is_true_prob_estimator(&m, &p, "yes", &VerdictTemplate::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn label_prob_of_deterministic_model_is_one() {
        let vocab = Vocab::new(["q", "yes", "no"]);
        let m = OneLayerToy::<f64>::one_hot(vocab)
            .with_transition_probs("q", &[("yes", 1.0)])
            .with_transition_probs("yes", &[(EOS, 1.0)]);
        let p = Prompt::text(m.vocab().tokenize("q"));
        for n in [1, 7, 10] {
            assert_eq!(label_prob_estimator(&m, &p, n, 1.0, 3, 4).unwrap(), 1.0);
        }
        assert!(label_prob_estimator(&m, &p, 0, 1.0, 3, 4).is_err());
    }
}
