//! Frozen outputs of the seeded reference transformer. A change here means
//! the weight initialization or forward pass changed.

use expert_cfg::model::{embed_prompt, forward_step, greedy_decode, MicroConfig, MicroTransformer, Prompt};
use expert_cfg::GuidableModel;

const SEED42_FREE_AIR_Q: [f64; 8] = [
    -1.6854250111097595,
    0.3633537834928956,
    -3.660143741696837,
    -1.3177072021537117,
    2.4960272910209467,
    0.02226435844889875,
    -0.9730889942046942,
    0.19093595950677156,
];

#[test]
fn seed_42_logits_are_frozen() {
    let m = MicroTransformer::<f64>::seeded(MicroConfig::default(), 42);
    assert_eq!(m.vocab().len(), 58);
    let p = Prompt::text(m.vocab().tokenize("free air ?"));
    let ctx = embed_prompt(&m, &p).unwrap();
    let step = forward_step(&m, &ctx, &[0.0; 3]).unwrap();
    for (got, want) in step.logits.iter().zip(SEED42_FREE_AIR_Q) {
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
    assert_eq!(m.vocab().word(step.argmax()), ".");
}

#[test]
fn saved_weights_reload_to_identical_decodes() {
    let m = MicroTransformer::<f64>::seeded(MicroConfig::default(), 42);
    let dir = tempfile::tempdir().unwrap();
    let (w, v) = (dir.path().join("w.bin"), dir.path().join("vocab.txt"));
    m.save(&w, &v).unwrap();
    let back = MicroTransformer::<f64>::load(&w, &v).unwrap();
    let p = Prompt::text(m.vocab().tokenize("is there free air under the diaphragm ?"));
    assert_eq!(greedy_decode(&m, &p, 6).unwrap(), greedy_decode(&back, &p, 6).unwrap());
}
