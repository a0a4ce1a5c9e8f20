use expert_cfg::model::{OneLayerToy, Prompt, StepDistribution, Vocab, EOS};
use expert_cfg::uncertainty::{gate, label_prob_estimator, predictive_entropy, GatePolicy, Verdict};
use expert_cfg::EntropyReport;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dist(logits: Vec<f64>) -> StepDistribution<f64> {
    StepDistribution::from_logits(logits)
}

fn step_sets() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..40).prop_flat_map(|v| prop::collection::vec(prop::collection::vec(-30.0..30.0f64, v), 1..8))
}

fn brute_force(steps: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for logits in steps {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for l in logits {
            let p = (l - m).exp() / z;
            if p > 0.0 {
                total -= p * p.ln();
            }
        }
    }
    total / steps.len() as f64
}

fn report(pe: f64) -> EntropyReport<f64> {
    EntropyReport {
        per_step_entropy: vec![pe],
        pe,
        normalized_pe: pe,
        seq_logprob_mean: 0.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn entropy_matches_brute_force(steps in step_sets()) {
        let r = predictive_entropy(&steps.iter().cloned().map(dist).collect::<Vec<_>>()).unwrap();
        prop_assert!((r.pe - brute_force(&steps)).abs() <= 1e-10);
        prop_assert!((0.0..=1.0).contains(&r.normalized_pe));
        prop_assert!(r.seq_logprob_mean <= 0.0);
    }

    #[test]
    fn entropy_is_permutation_invariant(logits in prop::collection::vec(-10.0..10.0f64, 2..50), seed in any::<u64>()) {
        let mut shuffled = logits.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.gen_range(0..=i));
        }
        let a = predictive_entropy(&[dist(logits)]).unwrap();
        let b = predictive_entropy(&[dist(shuffled)]).unwrap();
        prop_assert_eq!(a.pe, b.pe);
    }

    #[test]
    fn top_percent_flags_the_highest(
        entropies in prop::collection::vec(prop::sample::select(vec![0.0, 0.1, 0.25, 0.5, 0.7, 0.9, 1.0]), 1..120),
        p in 0.5..100.0f64,
    ) {
        let reports: Vec<_> = entropies.iter().map(|&e| report(e)).collect();
        let out = gate(&reports, GatePolicy::TopPercent(p)).unwrap();
        let flagged: Vec<usize> = (0..out.len()).filter(|&i| out[i].verdict == Verdict::Review).collect();
        prop_assert_eq!(flagged.len(), GatePolicy::review_count(p, reports.len()));
        let min_flagged = flagged.iter().map(|&i| entropies[i]).fold(f64::INFINITY, f64::min);
        for (i, &e) in entropies.iter().enumerate() {
            if out[i].verdict == Verdict::Deliver {
                prop_assert!(e <= min_flagged);
                // Ties go to earlier items.
                if e == min_flagged {
                    prop_assert!(flagged.iter().all(|&j| entropies[j] > e || j < i));
                }
            }
        }
    }

    #[test]
    fn threshold_flags_are_monotone(entropies in prop::collection::vec(0.0..=1.0f64, 1..80), t1 in 0.0..=1.0f64, t2 in 0.0..=1.0f64) {
        let reports: Vec<_> = entropies.iter().map(|&e| report(e)).collect();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = gate(&reports, GatePolicy::FixedThreshold(lo)).unwrap();
        let b = gate(&reports, GatePolicy::FixedThreshold(hi)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(!(y.verdict == Verdict::Review && x.verdict == Verdict::Deliver));
        }
    }
}

#[test]
fn uniform_distribution_normalizes_to_one() {
    for v in 2..=3000 {
        let r = predictive_entropy(&[dist(vec![0.0; v])]).unwrap();
        assert_eq!(r.normalized_pe, 1.0, "vocabulary {v}");
    }
}

#[test]
fn degenerate_distribution_has_zero_entropy() {
    let mut logits = vec![-1000.0; 20];
    logits[3] = 0.0;
    let r = predictive_entropy(&[dist(logits)]).unwrap();
    assert_eq!(r.pe, 0.0);
    assert_eq!(r.normalized_pe, 0.0);
}

#[test]
fn five_percent_of_two_hundred_is_ten() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let reports: Vec<_> = (0..200).map(|_| report(rng.gen_range(0.0..1.0))).collect();
    let out = gate(&reports, GatePolicy::TopPercent(5.0)).unwrap();
    assert_eq!(out.iter().filter(|d| d.verdict == Verdict::Review).count(), 10);
}

/// Independent replay of the sampler: one uniform per step, inverse CDF over
/// P(yes) = 0.7 then a forced end-of-sequence.
#[test]
fn label_prob_matches_sampling_oracle() {
    let vocab = Vocab::new(["is", "it", "?", "yes", "no"]);
    let model = OneLayerToy::<f64>::one_hot(vocab.clone())
        .with_transition_probs("?", &[("yes", 0.7), ("no", 0.3)])
        .with_transition_probs("yes", &[(EOS, 1.0)])
        .with_transition_probs("no", &[(EOS, 1.0)]);
    let prompt = Prompt::text(vocab.tokenize("is it ?"));
    for seed in [7u64, 8, 9, 123] {
        let got = label_prob_estimator(&model, &prompt, 10, 1.0, seed, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut agree = 0;
        for _ in 0..10 {
            let u: f64 = rng.gen();
            let _eos: f64 = rng.gen();
            if u < 0.7 {
                agree += 1;
            }
        }
        assert_eq!(got, agree as f64 / 10.0, "seed {seed}");
    }
}
