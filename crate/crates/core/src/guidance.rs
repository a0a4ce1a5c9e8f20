//! Highlight-guided decoding.
//!
//! Two branches share every generated token:
//!
//! * the conditional branch sees the context unchanged, with attention to
//!   highlighted positions boosted by `ln(beta)`;
//! * the unconditional branch sees highlighted embeddings rescaled by
//!   `alpha` and their attention suppressed by `-delta`.
//!
//! Next-token scores are `gamma * logp_cond - (gamma - 1) * logp_uncond`.

use std::io::Write;

use num_traits::Num;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::model::{
    embed_prompt, forward_step, ContextEmbeddings, GuidableModel, Prompt, Role, StepDistribution,
    Token, TokenSequence,
};
use crate::scalar::{argmax, softmax, Scalar};

pub const DEFAULT_ALPHA: f64 = 0.01;
pub const DEFAULT_BETA: f64 = 3.0;
pub const DEFAULT_GAMMA: f64 = 1.3;
/// Stronger guidance setting; the ablation grid's upper gamma.
pub const STRONG_GAMMA: f64 = 1.5;

/// Offset in `delta = ln(beta) + DELTA_OFFSET`.
pub const DELTA_OFFSET: f64 = 2.0;

/// Binary per-position highlight flags aligned to a [`TokenSequence`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HighlightMask {
    bits: Vec<bool>,
}

impl HighlightMask {
    pub fn zeros(len: usize) -> Self {
        Self {
            bits: vec![false; len],
        }
    }

    /// Mask for `seq`; bits on visual-prefix or generated positions are rejected.
    pub fn new(bits: Vec<bool>, seq: &TokenSequence) -> Result<Self> {
        ensure_len("highlight mask", seq.len(), bits.len())?;
        if bits
            .iter()
            .zip(seq.roles())
            .any(|(&b, r)| b && *r != Role::Prompt)
        {
            return Err(Error::contract(
                "only prompt positions may be highlighted",
            ));
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_zero(&self) -> bool {
        self.count() == 0
    }

    pub fn set(&mut self, i: usize) {
        self.bits[i] = true;
    }

    /// Bits as 0/1 bytes, the form shown in mask previews.
    pub fn to_u8(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| u8::from(b)).collect()
    }

    fn scaled<F: Scalar>(&self, on: F) -> Vec<F> {
        self.bits
            .iter()
            .map(|&b| if b { on } else { F::zero() })
            .collect()
    }
}

/// Guidance knobs: `alpha` rescales highlighted embeddings in the
/// unconditional branch, `beta` boosts highlighted attention in the
/// conditional branch, `gamma` sets guidance strength and `delta`
/// suppresses highlighted attention in the unconditional branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GuidanceConfig<F> {
    pub alpha: F,
    pub beta: F,
    pub gamma: F,
    pub delta: F,
}

impl<F: Scalar> GuidanceConfig<F> {
    /// `delta` follows `ln(beta) + 2`.
    pub fn new(alpha: F, beta: F, gamma: F) -> Result<Self> {
        let delta = Self::delta_for(beta)?;
        Self::with_delta(alpha, beta, gamma, delta)
    }

    pub fn with_delta(alpha: F, beta: F, gamma: F, delta: F) -> Result<Self> {
        let cfg = Self {
            alpha,
            beta,
            gamma,
            delta,
        };
        cfg.validate()?;
        if alpha == F::zero() {
            log::warn!("alpha = 0 removes highlighted tokens from the unconditional context entirely");
        }
        Ok(cfg)
    }

    pub fn delta_for(beta: F) -> Result<F> {
        if !(beta > F::zero()) {
            return Err(Error::contract("beta must be positive"));
        }
        Ok(beta.ln() + F::from_lit(DELTA_OFFSET))
    }

    /// Every knob neutral: the two branches coincide and guidance is a no-op.
    pub fn neutral() -> Self {
        Self {
            alpha: F::one(),
            beta: F::one(),
            gamma: F::one(),
            delta: F::zero(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.delta];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(Error::contract("guidance parameters must be finite"));
        }
        if self.alpha < F::zero() || self.alpha > F::one() {
            return Err(Error::contract("alpha must lie in [0, 1]"));
        }
        if self.beta < F::one() {
            return Err(Error::contract("beta must be at least 1"));
        }
        if self.gamma < F::one() {
            return Err(Error::contract("gamma must be at least 1"));
        }
        if self.delta < F::zero() {
            return Err(Error::contract("delta must be non-negative"));
        }
        Ok(())
    }
}

impl<F: Scalar> Default for GuidanceConfig<F> {
    fn default() -> Self {
        Self::new(
            F::from_lit(DEFAULT_ALPHA),
            F::from_lit(DEFAULT_BETA),
            F::from_lit(DEFAULT_GAMMA),
        )
        .expect("defaults are valid")
    }
}

#[derive(Deserialize)]
struct RawConfig<F> {
    alpha: F,
    beta: F,
    gamma: F,
    #[serde(default)]
    delta: Option<F>,
}

impl<'de, F: Scalar> Deserialize<'de> for GuidanceConfig<F> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawConfig::<F>::deserialize(d)?;
        let built = match raw.delta {
            Some(delta) => Self::with_delta(raw.alpha, raw.beta, raw.gamma, delta),
            None => Self::new(raw.alpha, raw.beta, raw.gamma),
        };
        built.map_err(serde::de::Error::custom)
    }
}

/// Unconditional context: `c̄_i = (alpha - 1) * m_i * c_i + c_i`.
pub fn build_uncond_context<F: Scalar>(
    ctx: &ContextEmbeddings<F>,
    mask: &HighlightMask,
    alpha: F,
) -> Result<ContextEmbeddings<F>> {
    ensure_len("highlight mask", ctx.len(), mask.len())?;
    let m = mask.scaled(F::one());
    let k = alpha - F::one();
    Ok(ctx.map_positions(|i, v| v.iter().map(|&x| k * m[i] * x + x).collect()))
}

/// Conditional-branch bias `ln(beta) * m_i`.
pub fn cond_attention_bias<F: Scalar>(mask: &HighlightMask, beta: F) -> Result<Vec<F>> {
    if !(beta > F::zero()) {
        return Err(Error::contract("beta must be positive"));
    }
    Ok(mask.scaled(beta.ln()))
}

/// Unconditional-branch bias `-delta * m_i`.
pub fn uncond_attention_bias<F: Scalar>(mask: &HighlightMask, delta: F) -> Result<Vec<F>> {
    if delta < F::zero() || delta.is_nan() {
        return Err(Error::contract("delta must be non-negative"));
    }
    Ok(mask.scaled(-delta))
}

/// `gamma * cond - (gamma - 1) * uncond` over log-probabilities, evaluated as
/// `cond + (gamma - 1) * (cond - uncond)`. The two forms are equal in exact
/// arithmetic; the second returns `cond` bit-for-bit when `gamma = 1` or when
/// the branches agree.
pub fn combine_log_probs<T: Num + Copy>(cond: &[T], uncond: &[T], gamma: T) -> Result<Vec<T>> {
    ensure_len("unconditional distribution", cond.len(), uncond.len())?;
    let k = gamma - T::one();
    Ok(cond
        .iter()
        .zip(uncond)
        .map(|(&c, &u)| c + k * (c - u))
        .collect())
}

/// Classifier-free guidance over two step distributions.
pub fn cfg_combine<F: Scalar>(
    cond: &StepDistribution<F>,
    uncond: &StepDistribution<F>,
    gamma: F,
) -> Result<Vec<F>> {
    if gamma < F::one() {
        return Err(Error::contract("gamma must be at least 1"));
    }
    combine_log_probs(&cond.log_probs, &uncond.log_probs, gamma)
}

/// One guided decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedStep<F> {
    pub cond: StepDistribution<F>,
    pub uncond: StepDistribution<F>,
    pub guided_logits: Vec<F>,
    pub chosen: Token,
    /// Probability of `chosen` under softmax of the guided logits.
    pub chosen_prob: F,
}

/// Per-step summary written to JSONL traces for the colormap view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub token_id: u32,
    pub token: String,
    pub prob: f64,
    pub cond_prob: f64,
    pub uncond_prob: f64,
}

impl<F: Scalar> GuidedStep<F> {
    pub fn summary(&self, step: usize) -> StepSummary {
        let id = self.chosen.id;
        StepSummary {
            step,
            token_id: id.0,
            token: self.chosen.surface.clone(),
            prob: self.chosen_prob.to_f64_lossy(),
            cond_prob: self.cond.prob(id).to_f64_lossy(),
            uncond_prob: self.uncond.prob(id).to_f64_lossy(),
        }
    }
}

/// Writes one [`StepSummary`] JSON object per line.
pub fn write_trace_jsonl<F: Scalar, W: Write>(steps: &[GuidedStep<F>], mut out: W) -> Result<()> {
    for (i, s) in steps.iter().enumerate() {
        serde_json::to_writer(&mut out, &s.summary(i))?;
        out.write_all(b"\n")
            .map_err(|e| Error::io("<trace>", e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidedDecode<F> {
    pub sequence: TokenSequence,
    pub steps: Vec<GuidedStep<F>>,
}

impl<F: Scalar> GuidedDecode<F> {
    pub fn generated(&self) -> &[Token] {
        self.sequence.generated()
    }

    pub fn answer_text(&self) -> String {
        crate::model::detokenize(self.generated())
    }

    pub fn token_probs(&self) -> Vec<F> {
        self.steps.iter().map(|s| s.chosen_prob).collect()
    }
}

/// Which branch a single-branch decode follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Cond,
    Uncond,
}

struct Branches<F> {
    cond_ctx: ContextEmbeddings<F>,
    uncond_ctx: ContextEmbeddings<F>,
    cond_bias: Vec<F>,
    uncond_bias: Vec<F>,
}

impl<F: Scalar> Branches<F> {
    fn build<M: GuidableModel<F> + ?Sized>(
        model: &M,
        prompt: &Prompt<F>,
        mask: &HighlightMask,
        cfg: &GuidanceConfig<F>,
    ) -> Result<Self> {
        cfg.validate()?;
        // Re-validate against roles so visual-prefix bits cannot slip in.
        let mask = HighlightMask::new(mask.bits().to_vec(), &prompt.sequence)?;
        let cond_ctx = embed_prompt(model, prompt)?;
        let uncond_ctx = build_uncond_context(&cond_ctx, &mask, cfg.alpha)?;
        Ok(Self {
            cond_ctx,
            uncond_ctx,
            cond_bias: cond_attention_bias(&mask, cfg.beta)?,
            uncond_bias: uncond_attention_bias(&mask, cfg.delta)?,
        })
    }

    /// Generated tokens enter both branches unscaled and unhighlighted.
    fn append(&mut self, embedding: Vec<F>) -> Result<()> {
        self.uncond_ctx.push(embedding.clone())?;
        self.cond_ctx.push(embedding)?;
        self.cond_bias.push(F::zero());
        self.uncond_bias.push(F::zero());
        Ok(())
    }
}

/// Guided greedy decoding: at each step both branches run on the same
/// generated prefix and the argmax of [`cfg_combine`] is emitted (lowest id on
/// ties). Stops at end-of-sequence or after `max_len` tokens.
pub fn guided_decode<F: Scalar, M: GuidableModel<F> + ?Sized>(
    model: &M,
    prompt: &Prompt<F>,
    mask: &HighlightMask,
    cfg: &GuidanceConfig<F>,
    max_len: usize,
) -> Result<GuidedDecode<F>> {
    if max_len == 0 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    let mut branches = Branches::build(model, prompt, mask, cfg)?;
    let mut sequence = prompt.sequence.clone();
    let mut steps = Vec::new();
    let eos = model.vocab().eos();
    for _ in 0..max_len {
        let cond = forward_step(model, &branches.cond_ctx, &branches.cond_bias)?;
        let uncond = forward_step(model, &branches.uncond_ctx, &branches.uncond_bias)?;
        let guided_logits = cfg_combine(&cond, &uncond, cfg.gamma)?;
        let idx = argmax(&guided_logits).expect("non-empty vocabulary");
        let chosen_prob = softmax(&guided_logits)[idx];
        let chosen = model.vocab().token(crate::model::TokenId(idx as u32));
        let id = chosen.id;
        sequence.push_generated(chosen.clone());
        steps.push(GuidedStep {
            cond,
            uncond,
            guided_logits,
            chosen,
            chosen_prob,
        });
        if id == eos {
            break;
        }
        branches.append(model.embed(id))?;
    }
    Ok(GuidedDecode { sequence, steps })
}

/// Greedy decoding of one branch alone, with that branch's context and bias.
pub fn branch_decode<F: Scalar, M: GuidableModel<F> + ?Sized>(
    model: &M,
    prompt: &Prompt<F>,
    mask: &HighlightMask,
    cfg: &GuidanceConfig<F>,
    branch: Branch,
    max_len: usize,
) -> Result<crate::model::Decoded<F>> {
    if max_len == 0 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    let mut branches = Branches::build(model, prompt, mask, cfg)?;
    let mut sequence = prompt.sequence.clone();
    let mut steps = Vec::new();
    let eos = model.vocab().eos();
    for _ in 0..max_len {
        let step = match branch {
            Branch::Cond => forward_step(model, &branches.cond_ctx, &branches.cond_bias)?,
            Branch::Uncond => forward_step(model, &branches.uncond_ctx, &branches.uncond_bias)?,
        };
        let next = step.argmax();
        sequence.push_generated(model.vocab().token(next));
        steps.push(step);
        if next == eos {
            break;
        }
        branches.append(model.embed(next))?;
    }
    Ok(crate::model::Decoded { sequence, steps })
}
