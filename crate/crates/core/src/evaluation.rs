//! Calibration and task metrics.
//!
//! The positive class throughout is "answer incorrect", scored by
//! `1 - confidence`. AUC computed that way equals the probability that a
//! correct answer receives higher confidence than an incorrect one.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::scalar::{Field, Scalar};
use crate::text::{normalize, words};

pub const DEFAULT_ECE_BINS: usize = 10;
pub const TEMPERATURE_RANGE: (f64, f64) = (0.05, 20.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample<F> {
    pub confidence: F,
    pub correct: bool,
}

impl<F: Field> ScoredSample<F> {
    pub fn new(confidence: F, correct: bool) -> Result<Self> {
        if !(confidence >= F::zero() && confidence <= F::one()) {
            return Err(Error::contract(format!("confidence {confidence:?} outside [0, 1]")));
        }
        Ok(Self { confidence, correct })
    }
}

fn class_counts<F>(samples: &[ScoredSample<F>]) -> (usize, usize) {
    let pos = samples.iter().filter(|s| s.correct).count();
    (pos, samples.len() - pos)
}

fn cmp_partial<F: PartialOrd>(a: &F, b: &F) -> Ordering {
    a.partial_cmp(b).unwrap_or(Ordering::Equal)
}

/// Mann-Whitney AUC in `O(n log n)`.
///
/// Each tie group of equal confidence contributes
/// `correct_in_group * (incorrect_below + incorrect_in_group / 2)`; the sum is
/// accumulated as a doubled integer so the only rounding is the final division.
pub fn roc_auc<F: Field>(samples: &[ScoredSample<F>]) -> Result<F> {
    let (pos, neg) = class_counts(samples);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both correct and incorrect samples".into()));
    }
    let mut sorted: Vec<&ScoredSample<F>> = samples.iter().collect();
    sorted.sort_by(|a, b| cmp_partial(&a.confidence, &b.confidence));
    let mut doubled: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].confidence == sorted[i].confidence {
            j += 1;
        }
        let group = &sorted[i..j];
        let p = group.iter().filter(|s| s.correct).count() as u128;
        let n = group.len() as u128 - p;
        doubled += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    let denom = 2 * pos as u128 * neg as u128;
    let num = F::from_u128(doubled).ok_or_else(|| Error::contract("count overflow"))?;
    let den = F::from_u128(denom).ok_or_else(|| Error::contract("count overflow"))?;
    Ok(num / den)
}

/// One point of the ROC curve for the "incorrect" class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Items with `1 - confidence >= threshold` are flagged. `+inf` flags none.
    pub threshold: f64,
}

pub fn roc_curve<F: Field>(samples: &[ScoredSample<F>]) -> Result<Vec<RocPoint>> {
    let (correct, incorrect) = class_counts(samples);
    if correct == 0 || incorrect == 0 {
        return Err(Error::UndefinedMetric("ROC needs both classes".into()));
    }
    let mut scored: Vec<(f64, bool)> = samples
        .iter()
        .map(|s| (1.0 - s.confidence.to_f64_lossy(), !s.correct))
        .collect();
    scored.sort_by(|a, b| cmp_partial(&b.0, &a.0));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let thr = scored[i].0;
        while i < scored.len() && scored[i].0 == thr {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / correct as f64,
            tpr: tp as f64 / incorrect as f64,
            threshold: thr,
        });
    }
    Ok(points)
}

pub const ROC_CSV_HEADER: &str = "fpr,tpr,threshold";

pub fn write_roc_csv<W: Write>(points: &[RocPoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{ROC_CSV_HEADER}")?;
    for p in points {
        writeln!(out, "{},{},{}", p.fpr, p.tpr, p.threshold)?;
    }
    Ok(())
}

/// Index of the equal-width bin holding `c`: the `k` with `k/B <= c < (k+1)/B`,
/// with `c = 1` in the last bin. Comparisons are exact in `F`.
fn bin_index<F: Field>(c: F, bins: usize) -> usize {
    let scaled = c * F::from_count(bins);
    let guess = scaled.to_f64_lossy().floor();
    let mut k = if guess.is_finite() && guess > 0.0 {
        (guess as usize).min(bins - 1)
    } else {
        0
    };
    while k > 0 && F::from_count(k) > scaled {
        k -= 1;
    }
    while k + 1 < bins && F::from_count(k + 1) <= scaled {
        k += 1;
    }
    k
}

/// Expected calibration error over `bins` equal-width bins on `[0, 1]`.
/// Empty input scores 0.
pub fn ece<F: Field>(samples: &[ScoredSample<F>], bins: usize) -> Result<F> {
    if bins == 0 {
        return Err(Error::contract("bins must be at least 1"));
    }
    if samples.is_empty() {
        return Ok(F::zero());
    }
    // Per bin: Σ correct − Σ confidence. (n_b/N)|acc_b − conf_b| = |that| / N.
    let mut gap = vec![F::zero(); bins];
    for s in samples {
        let b = bin_index(s.confidence, bins);
        let hit = if s.correct { F::one() } else { F::zero() };
        gap[b] = gap[b] + hit - s.confidence;
    }
    let total = gap.into_iter().fold(F::zero(), |acc, g| acc + g.abs());
    Ok(total / F::from_count(samples.len()))
}

/// Mean squared error between confidence and the 0/1 outcome.
pub fn brier_score<F: Field>(samples: &[ScoredSample<F>]) -> F {
    if samples.is_empty() {
        return F::zero();
    }
    let sum = samples.iter().fold(F::zero(), |acc, s| {
        let y = if s.correct { F::one() } else { F::zero() };
        let d = s.confidence - y;
        acc + d * d
    });
    sum / F::from_count(samples.len())
}

/// A confidence logit: `sigmoid(logit / T)` is the calibrated confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitSample<F> {
    pub logit: F,
    pub correct: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary<F> {
    pub ece: F,
    pub ece_t: F,
    pub bs_t: F,
    pub auc: F,
    pub temperature: F,
    /// Set when the logits were all equal and `T` fell back to 1.
    pub degenerate: bool,
}

fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// Negative log-likelihood of the labels at temperature `t`.
pub fn temperature_nll<F: Scalar>(samples: &[LogitSample<F>], t: F) -> F {
    samples
        .iter()
        .map(|s| {
            let z = s.logit / t;
            // -ln σ(z) = softplus(-z); -ln(1 − σ(z)) = softplus(z).
            let arg = if s.correct { -z } else { z };
            softplus(arg)
        })
        .sum()
}

fn softplus<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Golden-section minimization of a unimodal `f` on `[lo, hi]`.
pub fn golden_section<F: Scalar>(mut lo: F, mut hi: F, tol: F, f: impl Fn(F) -> F) -> F {
    let inv_phi = F::from_lit((5f64.sqrt() - 1.0) / 2.0);
    let mut a = hi - inv_phi * (hi - lo);
    let mut b = lo + inv_phi * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > tol {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - inv_phi * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + inv_phi * (hi - lo);
            fb = f(b);
        }
    }
    (lo + hi) / F::from_lit(2.0)
}

fn confidences<F: Scalar>(samples: &[LogitSample<F>], t: F) -> Vec<ScoredSample<F>> {
    samples
        .iter()
        .map(|s| ScoredSample {
            confidence: sigmoid(s.logit / t),
            correct: s.correct,
        })
        .collect()
}

/// Fits a scalar temperature by NLL and scores raw and rescaled confidences.
pub fn temperature_fit_and_rescore<F: Scalar>(
    samples: &[LogitSample<F>],
    bins: usize,
) -> Result<CalibrationSummary<F>> {
    if samples.is_empty() {
        return Err(Error::UndefinedMetric("no samples to calibrate".into()));
    }
    if samples.iter().any(|s| !s.logit.is_finite()) {
        return Err(Error::contract("non-finite confidence logit"));
    }
    let first = samples[0].logit;
    let degenerate = samples.iter().all(|s| s.logit == first);
    let temperature = if degenerate {
        log::warn!("all confidence logits equal; temperature left at 1");
        F::one()
    } else {
        let (lo, hi) = TEMPERATURE_RANGE;
        golden_section(F::from_lit(lo), F::from_lit(hi), F::from_lit(1e-6), |t| {
            temperature_nll(samples, t)
        })
    };
    let raw = confidences(samples, F::one());
    let scaled = confidences(samples, temperature);
    Ok(CalibrationSummary {
        ece: ece(&raw, bins)?,
        ece_t: ece(&scaled, bins)?,
        bs_t: brier_score(&scaled),
        auc: roc_auc(&raw)?,
        temperature,
        degenerate,
    })
}

/// Sensitivity and specificity when items with `confidence < threshold` are
/// flagged for review and "incorrect" is the positive class.
pub fn sensitivity_specificity<F: Field>(samples: &[ScoredSample<F>], threshold: F) -> Result<(f64, f64)> {
    if !(threshold >= F::zero() && threshold <= F::one()) {
        return Err(Error::contract("threshold must lie in [0, 1]"));
    }
    let (correct, incorrect) = class_counts(samples);
    if correct == 0 || incorrect == 0 {
        return Err(Error::UndefinedMetric("sensitivity/specificity need both classes".into()));
    }
    let tp = samples
        .iter()
        .filter(|s| !s.correct && s.confidence < threshold)
        .count();
    let tn = samples
        .iter()
        .filter(|s| s.correct && s.confidence >= threshold)
        .count();
    Ok((tp as f64 / incorrect as f64, tn as f64 / correct as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    Open,
    Closed,
}

/// Closed questions: exact match after normalization. Open questions: recall
/// of the deduplicated truth tokens in the prediction.
pub fn vqa_score(prediction: &str, truth: &str, kind: QuestionType) -> Result<f64> {
    let truth_norm = normalize(truth);
    if truth_norm.is_empty() {
        return Err(Error::contract("empty ground-truth answer"));
    }
    Ok(match kind {
        QuestionType::Closed => (normalize(prediction) == truth_norm) as u8 as f64,
        QuestionType::Open => {
            let mut truth_tokens = words(truth);
            truth_tokens.sort();
            truth_tokens.dedup();
            let predicted = words(prediction);
            let hits = truth_tokens.iter().filter(|t| predicted.contains(t)).count();
            hits as f64 / truth_tokens.len() as f64
        }
    })
}

/// Whether normalized `answer` occurs in normalized `caption` on word boundaries.
pub fn answer_in_caption(answer: &str, caption: &str) -> bool {
    let a = normalize(answer);
    if a.is_empty() {
        return false;
    }
    format!(" {} ", normalize(caption)).contains(&format!(" {a} "))
}

/// Fraction of queries whose answer appears in one of their top-`k` captions.
/// An empty query list scores 0.
pub fn hit_rate(retrieved: &[Vec<String>], answers: &[String], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::contract("k must be at least 1"));
    }
    ensure_len("answers", retrieved.len(), answers.len())?;
    if answers.is_empty() {
        return Ok(0.0);
    }
    let hits = retrieved
        .iter()
        .zip(answers)
        .filter(|(caps, ans)| caps.iter().take(k).any(|c| answer_in_caption(ans, c)))
        .count();
    Ok(hits as f64 / answers.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    fn s(c: f64, y: bool) -> ScoredSample<f64> {
        ScoredSample { confidence: c, correct: y }
    }

    #[test]
    fn auc_hand_cases() {
        assert_eq!(roc_auc(&[s(0.9, true), s(0.1, false)]).unwrap(), 1.0);
        let v = roc_auc(&[s(0.9, true), s(0.8, false), s(0.4, true)]).unwrap();
        assert_eq!(v, 0.5);
        assert_eq!(roc_auc(&[s(0.5, true), s(0.5, false)]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[s(0.5, true)]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ece_two_bin_case_is_exactly_three_tenths() {
        let r = |n, d| Ratio::new(n, d);
        let samples = [
            ScoredSample { confidence: r(9, 10), correct: true },
            ScoredSample { confidence: r(9, 10), correct: false },
            ScoredSample { confidence: r(2, 10), correct: false },
            ScoredSample { confidence: r(2, 10), correct: false },
        ];
        assert_eq!(ece(&samples, 2).unwrap(), Ratio::new(3i64, 10));
    }

    #[test]
    fn ece_bin_edges() {
        assert_eq!(bin_index(Ratio::new(1i64, 2), 2), 1);
        assert_eq!(bin_index(Ratio::new(1i64, 1), 2), 1);
        assert_eq!(bin_index(Ratio::new(0i64, 1), 10), 0);
        assert_eq!(bin_index(0.3f64, 10), 3);
        assert_eq!(ece(&[s(1.0, true); 5], 10).unwrap(), 0.0);
        assert!(ece(&[s(1.0, true)], 0).is_err());
    }

    #[test]
    fn brier_of_perfect_predictor_is_zero() {
        assert_eq!(brier_score(&[s(1.0, true), s(0.0, false)]), 0.0);
    }

    #[test]
    fn degenerate_logits_keep_unit_temperature() {
        let samples = [
            LogitSample { logit: 0.3, correct: true },
            LogitSample { logit: 0.3, correct: false },
        ];
        let c = temperature_fit_and_rescore(&samples, 10).unwrap();
        assert!(c.degenerate);
        assert_eq!(c.temperature, 1.0);
    }

    #[test]
    fn sensitivity_specificity_cases() {
        let samples = [s(0.2, false), s(0.7, false), s(0.3, true), s(0.9, true)];
        assert_eq!(sensitivity_specificity(&samples, 0.0).unwrap(), (0.0, 1.0));
        // Flag < 0.5: {0.2 wrong, 0.3 right}. TP 1 of 2 wrong; TN 1 of 2 right.
        assert_eq!(sensitivity_specificity(&samples, 0.5).unwrap(), (0.5, 0.5));
        assert_eq!(sensitivity_specificity(&samples, 1.0).unwrap(), (1.0, 0.0));
        assert!(sensitivity_specificity(&[s(0.2, false)], 0.5).is_err());
    }

    #[test]
    fn roc_curve_runs_corner_to_corner() {
        let pts = roc_curve(&[s(0.9, true), s(0.6, false), s(0.4, true), s(0.1, false)]).unwrap();
        assert_eq!((pts[0].fpr, pts[0].tpr), (0.0, 0.0));
        let last = pts.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        let mut buf = Vec::new();
        write_roc_csv(&pts, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("fpr,tpr,threshold\n0,0,inf\n"));
    }

    #[test]
    fn vqa_score_cases() {
        assert_eq!(vqa_score("Yes.", "yes", QuestionType::Closed).unwrap(), 1.0);
        assert_eq!(vqa_score("no", "yes", QuestionType::Closed).unwrap(), 0.0);
        assert_eq!(vqa_score("there is free air present", "free air", QuestionType::Open).unwrap(), 1.0);
        assert_eq!(vqa_score("pa view", "posterior anterior", QuestionType::Open).unwrap(), 0.0);
        assert_eq!(vqa_score("left", "left left lung", QuestionType::Open).unwrap(), 0.5);
        assert!(vqa_score("x", " . ", QuestionType::Open).is_err());
    }

    #[test]
    fn hit_rate_three_query_case() {
        let retrieved = vec![
            vec!["Free air under the diaphragm.".to_string()],
            vec!["normal chest".to_string(), "left pleural effusion".to_string()],
            vec!["kidney cyst".to_string()],
        ];
        let answers = vec!["free air".to_string(), "effusion".to_string(), "liver".to_string()];
        assert_eq!(hit_rate(&retrieved, &answers, 1).unwrap(), 1.0 / 3.0);
        assert_eq!(hit_rate(&retrieved, &answers, 2).unwrap(), 2.0 / 3.0);
        assert!(!answer_in_caption("no", "normal chest"));
        assert!(hit_rate(&retrieved, &answers, 0).is_err());
    }
}
