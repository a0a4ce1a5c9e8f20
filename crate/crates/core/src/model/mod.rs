//! Guidable autoregressive models.
//!
//! A [`GuidableModel`] exposes the two hooks guidance needs: the token
//! embedding function (so the unconditional branch can rescale highlighted
//! embeddings) and an additive per-key attention bias applied at every layer
//! and head. Two reference models implement it: [`MicroTransformer`], a small
//! seeded causal transformer, and [`OneLayerToy`], a single-head model whose
//! scores, values and output table can be set by hand.

mod micro;
mod spec;
mod toy;
mod vocab;

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::scalar::{argmax, log_softmax, softmax, Scalar};

pub use micro::{MicroConfig, MicroTransformer, DEFAULT_WORDS};
pub use spec::{ModelSpec, SharedModel};
pub use toy::{EvidenceSpec, OneLayerToy, ToySpec, TransitionSpec};
pub use vocab::{detokenize, split_words, TokenId, Vocab, EOS, UNK};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub id: TokenId,
    /// Text fragment; empty for visual-prefix positions and end-of-sequence.
    pub surface: String,
    /// Byte range in the text the token was cut from, when there is one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<Range<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    VisualPrefix,
    Prompt,
    Generated,
}

/// Ordered tokens with per-position roles. Visual-prefix positions form a
/// contiguous prefix and generated positions a contiguous suffix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<Token>,
    roles: Vec<Role>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<Token>, roles: Vec<Role>) -> Result<Self> {
        ensure_len("token roles", tokens.len(), roles.len())?;
        let rank = |r: &Role| match r {
            Role::VisualPrefix => 0,
            Role::Prompt => 1,
            Role::Generated => 2,
        };
        if roles.windows(2).any(|w| rank(&w[0]) > rank(&w[1])) {
            return Err(Error::contract(
                "roles must be visual prefix, then prompt, then generated",
            ));
        }
        Ok(Self { tokens, roles })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self) -> Vec<TokenId> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    pub fn visual_len(&self) -> usize {
        self.roles
            .iter()
            .take_while(|r| **r == Role::VisualPrefix)
            .count()
    }

    /// Generated suffix.
    pub fn generated(&self) -> &[Token] {
        let n = self
            .roles
            .iter()
            .rev()
            .take_while(|r| **r == Role::Generated)
            .count();
        &self.tokens[self.tokens.len() - n..]
    }

    pub fn push_generated(&mut self, token: Token) {
        self.tokens.push(token);
        self.roles.push(Role::Generated);
    }

    /// Prepends `n` visual-prefix placeholder positions.
    pub fn with_visual_prefix(mut self, n: usize, placeholder: TokenId) -> Self {
        let mut tokens = Vec::with_capacity(n + self.tokens.len());
        tokens.extend((0..n).map(|_| Token {
            id: placeholder,
            surface: String::new(),
            offset: None,
        }));
        tokens.append(&mut self.tokens);
        let mut roles = vec![Role::VisualPrefix; n];
        roles.append(&mut self.roles);
        Self { tokens, roles }
    }
}

/// Decoder input: visual-prefix vectors plus the token sequence whose
/// leading visual-prefix positions they fill.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt<F> {
    pub sequence: TokenSequence,
    pub visual: Vec<Vec<F>>,
}

impl<F: Scalar> Prompt<F> {
    /// Text-only prompt.
    pub fn text(sequence: TokenSequence) -> Self {
        Self {
            sequence,
            visual: Vec::new(),
        }
    }

    /// Prompt with image features prepended as visual-prefix positions.
    pub fn with_visual(visual: Vec<Vec<F>>, text: TokenSequence, placeholder: TokenId) -> Self {
        let sequence = text.with_visual_prefix(visual.len(), placeholder);
        Self { sequence, visual }
    }

    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.sequence.is_empty() {
            return Err(Error::contract("prompt must not be empty"));
        }
        ensure_len(
            "visual prefix positions",
            self.sequence.visual_len(),
            self.visual.len(),
        )?;
        for v in &self.visual {
            ensure_len("visual prefix vector", dim, v.len())?;
        }
        if !self.sequence.generated().is_empty() {
            return Err(Error::contract("prompt already contains generated tokens"));
        }
        Ok(())
    }
}

/// One embedding vector per context position.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEmbeddings<F> {
    dim: usize,
    vectors: Vec<Vec<F>>,
}

impl<F: Scalar> ContextEmbeddings<F> {
    pub fn new(dim: usize, vectors: Vec<Vec<F>>) -> Result<Self> {
        for v in &vectors {
            ensure_len("context vector", dim, v.len())?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::contract("context vectors must be finite"));
            }
        }
        Ok(Self { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[Vec<F>] {
        &self.vectors
    }

    pub fn get(&self, i: usize) -> &[F] {
        &self.vectors[i]
    }

    pub fn push(&mut self, v: Vec<F>) -> Result<()> {
        ensure_len("context vector", self.dim, v.len())?;
        self.vectors.push(v);
        Ok(())
    }

    pub(crate) fn map_positions(&self, mut f: impl FnMut(usize, &[F]) -> Vec<F>) -> Self {
        Self {
            dim: self.dim,
            vectors: self
                .vectors
                .iter()
                .enumerate()
                .map(|(i, v)| f(i, v))
                .collect(),
        }
    }
}

/// Next-token distribution produced by one forward step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDistribution<F> {
    pub logits: Vec<F>,
    pub probabilities: Vec<F>,
    pub log_probs: Vec<F>,
}

impl<F: Scalar> StepDistribution<F> {
    pub fn from_logits(logits: Vec<F>) -> Self {
        let probabilities = softmax(&logits);
        let log_probs = log_softmax(&logits);
        Self {
            logits,
            probabilities,
            log_probs,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.logits.len()
    }

    /// Most likely token; lowest id wins ties.
    pub fn argmax(&self) -> TokenId {
        TokenId(argmax(&self.log_probs).expect("non-empty distribution") as u32)
    }

    pub fn prob(&self, id: TokenId) -> F {
        self.probabilities[id.index()]
    }
}

/// Query-key scores for one (layer, head, query position) row.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRow<F> {
    pub layer: usize,
    pub head: usize,
    pub query: usize,
    /// Pre-bias scores.
    pub e: Vec<F>,
    /// Post-bias scores.
    pub h: Vec<F>,
    /// Attention probabilities.
    pub p: Vec<F>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionScores<F> {
    pub rows: Vec<AttentionRow<F>>,
}

/// Autoregressive model exposing the embedding and attention-bias hooks.
///
/// Implementations must be deterministic and treat an all-zero bias as the
/// unbiased model.
pub trait GuidableModel<F: Scalar>: Send + Sync {
    fn vocab(&self) -> &Vocab;

    fn embedding_dim(&self) -> usize;

    /// Token-to-embedding function.
    fn embed(&self, token: TokenId) -> Vec<F>;

    /// Next-token logits for the last position. Callers go through
    /// [`forward_step`], which validates shapes first.
    fn logits(&self, ctx: &ContextEmbeddings<F>, bias: &[F]) -> Vec<F>;

    /// Attention rows for every layer, head and query position.
    fn attention(&self, ctx: &ContextEmbeddings<F>, bias: &[F]) -> AttentionScores<F>;

    fn vocab_size(&self) -> usize {
        self.vocab().len()
    }
}

/// Embeds a prompt: visual vectors as given, every other position through
/// the model's embedding function.
pub fn embed_prompt<F: Scalar, M: GuidableModel<F> + ?Sized>(
    model: &M,
    prompt: &Prompt<F>,
) -> Result<ContextEmbeddings<F>> {
    let dim = model.embedding_dim();
    prompt.validate(dim)?;
    let mut visual = prompt.visual.iter();
    let vectors = prompt
        .sequence
        .tokens()
        .iter()
        .zip(prompt.sequence.roles())
        .map(|(tok, role)| match role {
            Role::VisualPrefix => visual.next().expect("validated").clone(),
            _ => model.embed(tok.id),
        })
        .collect();
    ContextEmbeddings::new(dim, vectors)
}

fn check_step_inputs<F: Scalar, M: GuidableModel<F> + ?Sized>(
    model: &M,
    ctx: &ContextEmbeddings<F>,
    bias: &[F],
) -> Result<()> {
    if ctx.is_empty() {
        return Err(Error::contract("context must not be empty"));
    }
    ensure_len("context embedding dim", model.embedding_dim(), ctx.dim())?;
    ensure_len("attention bias", ctx.len(), bias.len())?;
    if bias.iter().any(|b| b.is_nan() || *b == F::infinity()) {
        return Err(Error::contract("attention bias must not be NaN or +inf"));
    }
    Ok(())
}

/// One forward pass with an additive per-position attention bias.
pub fn forward_step<F: Scalar, M: GuidableModel<F> + ?Sized>(
    model: &M,
    ctx: &ContextEmbeddings<F>,
    bias: &[F],
) -> Result<StepDistribution<F>> {
    check_step_inputs(model, ctx, bias)?;
    let logits = model.logits(ctx, bias);
    ensure_len("logits", model.vocab_size(), logits.len())?;
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::contract("model produced non-finite logits"));
    }
    Ok(StepDistribution::from_logits(logits))
}

/// Attention trace with the same validation as [`forward_step`].
pub fn attention_trace<F: Scalar, M: GuidableModel<F> + ?Sized>(
    model: &M,
    ctx: &ContextEmbeddings<F>,
    bias: &[F],
) -> Result<AttentionScores<F>> {
    check_step_inputs(model, ctx, bias)?;
    Ok(model.attention(ctx, bias))
}

/// Output of a decode: the prompt extended with generated tokens and the
/// distribution each generated token was chosen from.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded<F> {
    pub sequence: TokenSequence,
    pub steps: Vec<StepDistribution<F>>,
}

impl<F: Scalar> Decoded<F> {
    pub fn generated(&self) -> &[Token] {
        self.sequence.generated()
    }

    /// Generated text without the end-of-sequence marker.
    pub fn answer_text(&self) -> String {
        detokenize(self.generated())
    }

    /// Probability each generated token had when it was emitted.
    pub fn token_probs(&self) -> Vec<F> {
        self.generated()
            .iter()
            .zip(&self.steps)
            .map(|(t, s)| s.prob(t.id))
            .collect()
    }
}

fn decode_loop<F, M, C>(
    model: &M,
    prompt: &Prompt<F>,
    max_len: usize,
    mut choose: C,
) -> Result<Decoded<F>>
where
    F: Scalar,
    M: GuidableModel<F> + ?Sized,
    C: FnMut(&StepDistribution<F>) -> TokenId,
{
    if max_len == 0 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    let mut ctx = embed_prompt(model, prompt)?;
    let mut sequence = prompt.sequence.clone();
    let mut steps = Vec::new();
    let eos = model.vocab().eos();
    for _ in 0..max_len {
        let bias = vec![F::zero(); ctx.len()];
        let step = forward_step(model, &ctx, &bias)?;
        let next = choose(&step);
        sequence.push_generated(model.vocab().token(next));
        steps.push(step);
        if next == eos {
            break;
        }
        ctx.push(model.embed(next))?;
    }
    Ok(Decoded { sequence, steps })
}

/// Greedy decoding: argmax at each step (lowest id on ties), stopping at
/// end-of-sequence or after `max_len` generated tokens.
pub fn greedy_decode<F: Scalar, M: GuidableModel<F> + ?Sized>(
    model: &M,
    prompt: &Prompt<F>,
    max_len: usize,
) -> Result<Decoded<F>> {
    decode_loop(model, prompt, max_len, |s| s.argmax())
}

/// Inverse-CDF draw from `probs` for a uniform variate `u` in `[0, 1)`.
pub fn inverse_cdf<F: Scalar>(probs: &[F], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p.to_f64_lossy();
        if u < acc {
            return i;
        }
    }
    probs
        .iter()
        .rposition(|p| *p > F::zero())
        .unwrap_or(probs.len() - 1)
}

/// Multinomial decoding at `temperature`. Each step draws one `f64`
/// uniform from `rng` and picks by inverse CDF over token ids in order.
pub fn sample_decode<F, M, R>(
    model: &M,
    prompt: &Prompt<F>,
    max_len: usize,
    temperature: F,
    rng: &mut R,
) -> Result<Decoded<F>>
where
    F: Scalar,
    M: GuidableModel<F> + ?Sized,
    R: Rng + ?Sized,
{
    if !(temperature > F::zero()) {
        return Err(Error::contract("temperature must be positive"));
    }
    decode_loop(model, prompt, max_len, |s| {
        let scaled: Vec<F> = s.logits.iter().map(|&l| l / temperature).collect();
        let probs = softmax(&scaled);
        let u: f64 = rng.gen();
        TokenId(inverse_cdf(&probs, u) as u32)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn yes_no_table() -> OneLayerToy<f64> {
        let vocab = Vocab::new(["is", "there", "air", "?", "yes", "no"]);
        OneLayerToy::one_hot(vocab)
            .with_transition_probs("?", &[("yes", 0.9), ("no", 0.1)])
            .with_transition_probs("yes", &[(EOS, 1.0)])
            .with_transition_probs("no", &[(EOS, 1.0)])
    }

    fn prompt(model: &OneLayerToy<f64>, text: &str) -> Prompt<f64> {
        Prompt::text(model.vocab().tokenize(text))
    }

    #[test]
    fn table_model_emits_yes_then_eos() {
        let m = yes_no_table();
        let out = greedy_decode(&m, &prompt(&m, "is there air?"), 8).unwrap();
        let words: Vec<_> = out.generated().iter().map(|t| m.vocab().word(t.id)).collect();
        assert_eq!(words, ["yes", EOS]);
        assert!((out.steps[0].prob(m.vocab().id("yes").unwrap()) - 0.9).abs() < 1e-12);
        assert_eq!(out.answer_text(), "yes");
    }

    #[test]
    fn max_len_caps_generation() {
        let m = yes_no_table();
        let out = greedy_decode(&m, &prompt(&m, "is there air?"), 1).unwrap();
        assert_eq!(out.generated().len(), 1);
        assert_eq!(out.steps.len(), 1);
    }

    #[test]
    fn greedy_is_deterministic() {
        let m = MicroTransformer::<f64>::seeded(MicroConfig::default(), 42);
        let p = Prompt::text(m.vocab().tokenize("is there free air under the diaphragm ?"));
        let a = greedy_decode(&m, &p, 6).unwrap();
        let b = greedy_decode(&m, &p, 6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_prompt_rejected() {
        let m = yes_no_table();
        assert!(greedy_decode(&m, &prompt(&m, ""), 3).is_err());
        assert!(greedy_decode(&m, &prompt(&m, "air"), 0).is_err());
    }

    #[test]
    fn bias_length_mismatch_is_contract_error() {
        let m = yes_no_table();
        let ctx = embed_prompt(&m, &prompt(&m, "is there air?")).unwrap();
        let err = forward_step(&m, &ctx, &[0.0; 2]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn visual_prefix_vectors_are_used_verbatim() {
        let m = yes_no_table();
        let dim = m.embedding_dim();
        let text = m.vocab().tokenize("air ?");
        let p = Prompt::with_visual(vec![vec![0.5; dim]], text, m.vocab().unk());
        let ctx = embed_prompt(&m, &p).unwrap();
        assert_eq!(ctx.len(), 3);
        assert_eq!(ctx.get(0), vec![0.5; dim].as_slice());
        assert_eq!(p.sequence.roles()[0], Role::VisualPrefix);
    }

    #[test]
    fn roles_must_be_ordered() {
        let t = |i| Token {
            id: TokenId(i),
            surface: String::new(),
            offset: None,
        };
        assert!(TokenSequence::new(vec![t(0), t(1)], vec![Role::Generated, Role::Prompt]).is_err());
        assert!(TokenSequence::new(vec![t(0), t(1)], vec![Role::Prompt, Role::VisualPrefix]).is_err());
        assert!(TokenSequence::new(vec![t(0), t(1)], vec![Role::VisualPrefix, Role::Generated]).is_ok());
    }

    #[test]
    fn inverse_cdf_picks_by_cumulative_mass() {
        let p = [0.7, 0.3];
        assert_eq!(inverse_cdf(&p, 0.0), 0);
        assert_eq!(inverse_cdf(&p, 0.69), 0);
        assert_eq!(inverse_cdf(&p, 0.71), 1);
        assert_eq!(inverse_cdf(&p, 0.999_999_999), 1);
    }
}
