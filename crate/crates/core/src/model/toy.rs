use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionRow, AttentionScores, ContextEmbeddings, GuidableModel, TokenId, Vocab};
use crate::scalar::{softmax, Scalar};

/// Logit given to tokens a transition row does not list. Far enough down that
/// `exp` underflows to zero while log-probabilities stay finite.
const ROW_FLOOR: f64 = -1000.0;

/// Single-layer, single-head model with hand-settable internals.
///
/// The last context position is the only query. Scores are
/// `e_j = <salience, c_j>` unless fixed by [`with_scores`](Self::with_scores);
/// values are `v_j = c_j` unless fixed by [`with_values`](Self::with_values).
/// With `o = Σ_j p_j v_j` the logits are
///
/// ```text
/// logits = prior + row(last token) + readout · o
/// ```
///
/// where `row` is a per-token transition table (the "last token" is the
/// vocabulary entry whose embedding has the largest positive dot product
/// with the last context vector) and `readout` is a sparse evidence matrix.
/// With one-hot embeddings, `o[k]` is the attention mass on token `k`.
#[derive(Debug, Clone)]
pub struct OneLayerToy<F> {
    vocab: Vocab,
    embeddings: Vec<Vec<F>>,
    salience: Vec<F>,
    fixed_scores: Option<Vec<F>>,
    fixed_values: Option<Vec<Vec<F>>>,
    readout: Vec<(usize, usize, F)>,
    prior: Vec<F>,
    transitions: BTreeMap<TokenId, Vec<F>>,
}

impl<F: Scalar> OneLayerToy<F> {
    /// Custom embedding table, one row per vocabulary entry.
    pub fn new(vocab: Vocab, embeddings: Vec<Vec<F>>) -> Self {
        assert_eq!(vocab.len(), embeddings.len(), "one embedding per token");
        let dim = embeddings.first().map_or(0, Vec::len);
        assert!(embeddings.iter().all(|e| e.len() == dim), "ragged embeddings");
        let v = vocab.len();
        Self {
            vocab,
            embeddings,
            salience: vec![F::zero(); dim],
            fixed_scores: None,
            fixed_values: None,
            readout: Vec::new(),
            prior: vec![F::zero(); v],
            transitions: BTreeMap::new(),
        }
    }

    /// One-hot embeddings: `f(token k) = e_k`, so dimension equals vocabulary size.
    pub fn one_hot(vocab: Vocab) -> Self {
        let v = vocab.len();
        let embeddings = (0..v)
            .map(|i| {
                let mut row = vec![F::zero(); v];
                row[i] = F::one();
                row
            })
            .collect();
        Self::new(vocab, embeddings)
    }

    fn id(&self, word: &str) -> TokenId {
        self.vocab
            .id(word)
            .unwrap_or_else(|| panic!("{word:?} not in toy vocabulary"))
    }

    fn dim(&self) -> usize {
        self.salience.len()
    }

    /// Base logit for `word` at every step.
    pub fn with_prior(mut self, word: &str, logit: F) -> Self {
        let id = self.id(word);
        self.prior[id.index()] = logit;
        self
    }

    /// After `last`, add the listed logits; unlisted tokens are pushed to a
    /// floor that gives them zero probability.
    pub fn with_transition_logits(mut self, last: &str, entries: &[(&str, F)]) -> Self {
        let last = self.id(last);
        let mut row = vec![F::from_lit(ROW_FLOOR); self.vocab.len()];
        for (w, l) in entries {
            row[self.id(w).index()] = *l;
        }
        self.transitions.insert(last, row);
        self
    }

    /// Transition row given as probabilities (logits = ln p).
    pub fn with_transition_probs(self, last: &str, entries: &[(&str, f64)]) -> Self {
        let logits: Vec<(&str, F)> = entries
            .iter()
            .map(|(w, p)| (*w, F::from_lit(p.ln())))
            .collect();
        self.with_transition_logits(last, &logits)
    }

    /// Score weight on embedding dimension `dim`.
    pub fn with_salience_dim(mut self, dim: usize, weight: F) -> Self {
        self.salience[dim] = weight;
        self
    }

    /// Score weight for `word` (one-hot layout).
    pub fn with_salience(self, word: &str, weight: F) -> Self {
        let dim = self.id(word).index();
        self.with_salience_dim(dim, weight)
    }

    /// Attending to `source` (one-hot layout) adds `weight · mass` to `target`'s logit.
    pub fn with_evidence(mut self, source: &str, target: &str, weight: F) -> Self {
        let s = self.id(source).index();
        let t = self.id(target).index();
        self.readout.push((t, s, weight));
        self
    }

    /// Readout entry on an arbitrary value dimension.
    pub fn with_readout(mut self, target: TokenId, value_dim: usize, weight: F) -> Self {
        self.readout.push((target.index(), value_dim, weight));
        self
    }

    /// Hand-set pre-bias scores `e_j` for the first `scores.len()` positions.
    pub fn with_scores(mut self, scores: Vec<F>) -> Self {
        self.fixed_scores = Some(scores);
        self
    }

    /// Hand-set value vectors for the first `values.len()` positions.
    pub fn with_values(mut self, values: Vec<Vec<F>>) -> Self {
        self.fixed_values = Some(values);
        self
    }

    fn score(&self, j: usize, c: &[F]) -> F {
        match &self.fixed_scores {
            Some(e) if j < e.len() => e[j],
            _ => dot(&self.salience, c),
        }
    }

    fn value<'a>(&'a self, j: usize, c: &'a [F]) -> &'a [F] {
        match &self.fixed_values {
            Some(v) if j < v.len() => &v[j],
            _ => c,
        }
    }

    fn attention_row(&self, ctx: &ContextEmbeddings<F>, bias: &[F]) -> AttentionRow<F> {
        let e: Vec<F> = ctx
            .vectors()
            .iter()
            .enumerate()
            .map(|(j, c)| self.score(j, c))
            .collect();
        let h: Vec<F> = e.iter().zip(bias).map(|(&e, &b)| e + b).collect();
        let p = softmax(&h);
        AttentionRow {
            layer: 0,
            head: 0,
            query: ctx.len() - 1,
            e,
            h,
            p,
        }
    }

    fn last_token(&self, c: &[F]) -> Option<TokenId> {
        let mut best: Option<(TokenId, F)> = None;
        for &id in self.transitions.keys() {
            let d = dot(&self.embeddings[id.index()], c);
            if d > F::zero() && best.is_none_or(|(_, b)| d > b) {
                best = Some((id, d));
            }
        }
        best.map(|(id, _)| id)
    }
}

/// Declarative one-hot toy model, storable as JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    /// Vocabulary without the reserved tokens.
    pub words: Vec<String>,
    #[serde(default)]
    pub prior: Vec<(String, f64)>,
    #[serde(default)]
    pub salience: Vec<(String, f64)>,
    #[serde(default)]
    pub transitions: Vec<TransitionSpec>,
    #[serde(default)]
    pub evidence: Vec<EvidenceSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionSpec {
    pub last: String,
    pub logits: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSpec {
    pub source: String,
    pub target: String,
    pub weight: f64,
}

impl ToySpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = serde_json::to_vec(self)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

impl<F: Scalar> OneLayerToy<F> {
    pub fn from_spec(spec: &ToySpec) -> Result<Self> {
        let vocab = Vocab::new(&spec.words);
        let known = |w: &str| {
            vocab
                .id(w)
                .map(|_| ())
                .ok_or_else(|| Error::Config(format!("toy spec word {w:?} not in vocabulary")))
        };
        let mut m = Self::one_hot(vocab.clone());
        for (w, l) in &spec.prior {
            known(w)?;
            m = m.with_prior(w, F::from_lit(*l));
        }
        for (w, s) in &spec.salience {
            known(w)?;
            m = m.with_salience(w, F::from_lit(*s));
        }
        for t in &spec.transitions {
            known(&t.last)?;
            let mut entries = Vec::with_capacity(t.logits.len());
            for (w, l) in &t.logits {
                known(w)?;
                entries.push((w.as_str(), F::from_lit(*l)));
            }
            m = m.with_transition_logits(&t.last, &entries);
        }
        for e in &spec.evidence {
            known(&e.source)?;
            known(&e.target)?;
            m = m.with_evidence(&e.source, &e.target, F::from_lit(e.weight));
        }
        Ok(m)
    }
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

impl<F: Scalar> GuidableModel<F> for OneLayerToy<F> {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn embedding_dim(&self) -> usize {
        self.dim()
    }

    fn embed(&self, token: TokenId) -> Vec<F> {
        self.embeddings[token.index()].clone()
    }

    fn logits(&self, ctx: &ContextEmbeddings<F>, bias: &[F]) -> Vec<F> {
        let row = self.attention_row(ctx, bias);
        let value_dim = self
            .fixed_values
            .as_ref()
            .and_then(|v| v.first())
            .map_or(self.dim(), Vec::len);
        let mut out = vec![F::zero(); value_dim];
        for (j, c) in ctx.vectors().iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(self.value(j, c)) {
                *o += row.p[j] * v;
            }
        }
        let mut logits = self.prior.clone();
        let last = ctx.get(ctx.len() - 1);
        if let Some(id) = self.last_token(last) {
            for (l, &t) in logits.iter_mut().zip(&self.transitions[&id]) {
                *l += t;
            }
        }
        for &(target, dim, w) in &self.readout {
            if let Some(&mass) = out.get(dim) {
                logits[target] += w * mass;
            }
        }
        logits
    }

    fn attention(&self, ctx: &ContextEmbeddings<F>, bias: &[F]) -> AttentionScores<F> {
        AttentionScores {
            rows: vec![self.attention_row(ctx, bias)],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{attention_trace, forward_step};

    fn ctx(n: usize, dim: usize) -> ContextEmbeddings<f64> {
        ContextEmbeddings::new(dim, vec![vec![0.0; dim]; n]).unwrap()
    }

    #[test]
    fn bias_ln3_on_first_of_two_equal_scores() {
        let m = OneLayerToy::<f64>::one_hot(Vocab::new(["a"])).with_scores(vec![0.0, 0.0]);
        let att = attention_trace(&m, &ctx(2, 3), &[3f64.ln(), 0.0]).unwrap();
        let p = &att.rows[0].p;
        assert!((p[0] - 0.75).abs() < 1e-12);
        assert!((p[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn bias_multiplies_unnormalized_weight_by_exp_b() {
        let e = vec![0.3, -1.2, 0.7, 2.0];
        let m = OneLayerToy::<f64>::one_hot(Vocab::new(["a"])).with_scores(e.clone());
        let c = ctx(4, 3);
        let base = attention_trace(&m, &c, &[0.0; 4]).unwrap().rows[0].p.clone();
        let b = 0.85;
        let shifted = attention_trace(&m, &c, &[0.0, b, 0.0, 0.0]).unwrap().rows[0].p.clone();
        let before = base[1] / base[3];
        let after = shifted[1] / shifted[3];
        assert!((after / before - b.exp()).abs() < 1e-12);
    }

    #[test]
    fn spec_builds_equivalent_model() {
        let spec = ToySpec {
            words: vec!["q".into(), "yes".into(), "no".into()],
            prior: vec![],
            salience: vec![],
            transitions: vec![TransitionSpec {
                last: "q".into(),
                logits: vec![("yes".into(), 0.7f64.ln()), ("no".into(), 0.3f64.ln())],
            }],
            evidence: vec![EvidenceSpec {
                source: "q".into(),
                target: "no".into(),
                weight: 0.0,
            }],
        };
        let json = serde_json::to_string(&spec).unwrap();
        let back: ToySpec = serde_json::from_str(&json).unwrap();
        let m = OneLayerToy::<f64>::from_spec(&back).unwrap();
        let direct = OneLayerToy::<f64>::one_hot(m.vocab().clone()).with_transition_probs("q", &[("yes", 0.7), ("no", 0.3)]);
        let p = crate::model::Prompt::text(m.vocab().tokenize("q"));
        let c = crate::model::embed_prompt(&m, &p).unwrap();
        assert_eq!(forward_step(&m, &c, &[0.0]).unwrap(), forward_step(&direct, &c, &[0.0]).unwrap());
        let bad = ToySpec {
            words: vec!["q".into()],
            prior: vec![("zzz".into(), 1.0)],
            ..Default::default()
        };
        assert!(OneLayerToy::<f64>::from_spec(&bad).is_err());
    }

    #[test]
    fn evidence_reads_attention_mass() {
        let vocab = Vocab::new(["x", "y", "ans"]);
        let m = OneLayerToy::<f64>::one_hot(vocab.clone()).with_evidence("y", "ans", 4.0);
        let seq = vocab.tokenize("x y");
        let ctx = crate::model::embed_prompt(&m, &crate::model::Prompt::text(seq)).unwrap();
        let step = forward_step(&m, &ctx, &[0.0, 0.0]).unwrap();
        let ans = vocab.id("ans").unwrap().index();
        assert!((step.logits[ans] - 2.0).abs() < 1e-12);
    }
}
