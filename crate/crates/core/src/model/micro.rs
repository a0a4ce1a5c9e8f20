use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionRow, AttentionScores, ContextEmbeddings, GuidableModel, TokenId, Vocab};
use crate::scalar::{softmax, Scalar};

const MAGIC: &[u8; 8] = b"ECFGWT01";

/// Words in the built-in vocabulary used by [`MicroTransformer::seeded`].
pub const DEFAULT_WORDS: &[&str] = &[
    "yes", "no", "true", "false", "is", "are", "there", "the", "a", "of", "in", "on", "what",
    "where", "which", "this", "image", "shows", "show", "free", "air", "under", "diaphragm",
    "left", "right", "lung", "kidney", "liver", "heart", "brain", "mass", "lesion", "fracture",
    "normal", "abnormal", "pneumothorax", "effusion", "posterior", "anterior", "pa", "view",
    "ct", "mri", "x", "ray", "chest", "abdomen", "small", "large", "present", "answer",
    "?", ".", ",", "-", ":",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl Default for MicroConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            layers: 2,
            heads: 4,
            ffn_dim: 64,
        }
    }
}

/// Row-major matrix; `apply` maps an `in_dim` vector to `out_dim`.
#[derive(Debug, Clone, PartialEq)]
struct Matrix<F> {
    out_dim: usize,
    in_dim: usize,
    data: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    fn random(out_dim: usize, in_dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..out_dim * in_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                F::from_lit(z * scale)
            })
            .collect();
        Self {
            out_dim,
            in_dim,
            data,
        }
    }

    fn apply(&self, x: &[F]) -> Vec<F> {
        self.data
            .chunks_exact(self.in_dim)
            .map(|row| row.iter().zip(x).map(|(&w, &v)| w * v).sum())
            .collect()
    }

    fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.in_dim..(i + 1) * self.in_dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer<F> {
    ln1_gain: Vec<F>,
    ln1_bias: Vec<F>,
    wq: Matrix<F>,
    wk: Matrix<F>,
    wv: Matrix<F>,
    wo: Matrix<F>,
    ln2_gain: Vec<F>,
    ln2_bias: Vec<F>,
    w1: Matrix<F>,
    b1: Vec<F>,
    w2: Matrix<F>,
    b2: Vec<F>,
}

/// Small pre-norm causal transformer with seeded weights.
///
/// Positions get sinusoidal encodings inside `logits`, so the embedding hook
/// sees token vectors only. The attention bias is added to the key scores of
/// every head in every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroTransformer<F> {
    vocab: Vocab,
    config: MicroConfig,
    seed: u64,
    embedding: Matrix<F>,
    layers: Vec<Layer<F>>,
    lnf_gain: Vec<F>,
    lnf_bias: Vec<F>,
    unembed: Matrix<F>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    vocab_size: usize,
    dim: usize,
    layers: usize,
    heads: usize,
    ffn_dim: usize,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl<F: Scalar> MicroTransformer<F> {
    /// Built-in vocabulary with weights drawn from `seed`.
    pub fn seeded(config: MicroConfig, seed: u64) -> Self {
        Self::with_vocab(Vocab::new(DEFAULT_WORDS), config, seed)
    }

    pub fn with_vocab(vocab: Vocab, config: MicroConfig, seed: u64) -> Self {
        assert!(config.heads > 0 && config.dim.is_multiple_of(config.heads), "dim divisible by heads");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let v = vocab.len();
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let embedding = Matrix::random(v, d, 1.0, &mut rng);
        let layers = (0..config.layers)
            .map(|_| Layer {
                ln1_gain: vec![F::one(); d],
                ln1_bias: vec![F::zero(); d],
                wq: Matrix::random(d, d, inv(d), &mut rng),
                wk: Matrix::random(d, d, inv(d), &mut rng),
                wv: Matrix::random(d, d, inv(d), &mut rng),
                wo: Matrix::random(d, d, inv(d), &mut rng),
                ln2_gain: vec![F::one(); d],
                ln2_bias: vec![F::zero(); d],
                w1: Matrix::random(config.ffn_dim, d, inv(d), &mut rng),
                b1: vec![F::zero(); config.ffn_dim],
                w2: Matrix::random(d, config.ffn_dim, inv(config.ffn_dim), &mut rng),
                b2: vec![F::zero(); d],
            })
            .collect();
        let unembed = Matrix::random(v, d, 2.0 * inv(d), &mut rng);
        Self {
            vocab,
            config,
            seed,
            embedding,
            layers,
            lnf_gain: vec![F::one(); d],
            lnf_bias: vec![F::zero(); d],
            unembed,
        }
    }

    pub fn config(&self) -> MicroConfig {
        self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn tensors(&self) -> Vec<(String, Vec<usize>, &[F])> {
        let mut out: Vec<(String, Vec<usize>, &[F])> = Vec::new();
        fn mat<F>(name: String, m: &Matrix<F>) -> (String, Vec<usize>, &[F]) {
            (name, vec![m.out_dim, m.in_dim], m.data.as_slice())
        }
        out.push(mat("embedding".into(), &self.embedding));
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.ln1.gain"), vec![l.ln1_gain.len()], &l.ln1_gain));
            out.push((format!("layers.{i}.ln1.bias"), vec![l.ln1_bias.len()], &l.ln1_bias));
            out.push(mat(format!("layers.{i}.wq"), &l.wq));
            out.push(mat(format!("layers.{i}.wk"), &l.wk));
            out.push(mat(format!("layers.{i}.wv"), &l.wv));
            out.push(mat(format!("layers.{i}.wo"), &l.wo));
            out.push((format!("layers.{i}.ln2.gain"), vec![l.ln2_gain.len()], &l.ln2_gain));
            out.push((format!("layers.{i}.ln2.bias"), vec![l.ln2_bias.len()], &l.ln2_bias));
            out.push(mat(format!("layers.{i}.w1"), &l.w1));
            out.push((format!("layers.{i}.b1"), vec![l.b1.len()], &l.b1));
            out.push(mat(format!("layers.{i}.w2"), &l.w2));
            out.push((format!("layers.{i}.b2"), vec![l.b2.len()], &l.b2));
        }
        out.push(("final.gain".into(), vec![self.lnf_gain.len()], &self.lnf_gain));
        out.push(("final.bias".into(), vec![self.lnf_bias.len()], &self.lnf_bias));
        out.push(mat("unembed".into(), &self.unembed));
        out
    }

    /// Serializes weights: 8-byte magic, u64 LE header length, JSON header,
    /// then every tensor as little-endian scalars in header order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let header = Header {
            dtype: F::DTYPE.to_string(),
            vocab_size: self.vocab.len(),
            dim: self.config.dim,
            layers: self.config.layers,
            heads: self.config.heads,
            ffn_dim: self.config.ffn_dim,
            seed: self.seed,
            tensors: tensors
                .iter()
                .map(|(name, shape, _)| TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in tensors {
            for &x in data {
                x.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(vocab: Vocab, bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("weights: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.dtype != F::DTYPE {
            return Err(bad(&format!("dtype {} does not match {}", header.dtype, F::DTYPE)));
        }
        if header.vocab_size != vocab.len() {
            return Err(bad("vocabulary size mismatch"));
        }
        let config = MicroConfig {
            dim: header.dim,
            layers: header.layers,
            heads: header.heads,
            ffn_dim: header.ffn_dim,
        };
        if config.heads == 0 || !config.dim.is_multiple_of(config.heads) {
            return Err(bad("dim not divisible by heads"));
        }
        // Shape template; every tensor is then overwritten from the payload.
        let mut model = Self::with_vocab(vocab, config, header.seed);
        let expected: Vec<(String, Vec<usize>)> = model
            .tensors()
            .into_iter()
            .map(|(n, s, _)| (n, s))
            .collect();
        let listed: Vec<(String, Vec<usize>)> = header
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.shape.clone()))
            .collect();
        if expected != listed {
            return Err(bad("tensor list does not match configuration"));
        }
        let mut payload = &bytes[16 + hlen..];
        let mut take = |n: usize| -> Result<Vec<F>> {
            let need = n * F::WIDTH;
            if payload.len() < need {
                return Err(bad("truncated payload"));
            }
            let (head, rest) = payload.split_at(need);
            payload = rest;
            Ok(head.chunks_exact(F::WIDTH).map(F::read_le).collect())
        };
        let d = config.dim;
        model.embedding.data = take(model.embedding.data.len())?;
        for l in &mut model.layers {
            l.ln1_gain = take(d)?;
            l.ln1_bias = take(d)?;
            l.wq.data = take(d * d)?;
            l.wk.data = take(d * d)?;
            l.wv.data = take(d * d)?;
            l.wo.data = take(d * d)?;
            l.ln2_gain = take(d)?;
            l.ln2_bias = take(d)?;
            l.w1.data = take(config.ffn_dim * d)?;
            l.b1 = take(config.ffn_dim)?;
            l.w2.data = take(d * config.ffn_dim)?;
            l.b2 = take(d)?;
        }
        model.lnf_gain = take(d)?;
        model.lnf_bias = take(d)?;
        model.unembed.data = take(model.unembed.data.len())?;
        if !payload.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(model)
    }

    pub fn save(&self, weights: impl AsRef<Path>, vocab: impl AsRef<Path>) -> Result<()> {
        let weights = weights.as_ref();
        std::fs::write(weights, self.to_bytes()).map_err(|e| Error::io(weights, e))?;
        self.vocab.save(vocab)
    }

    pub fn load(weights: impl AsRef<Path>, vocab: impl AsRef<Path>) -> Result<Self> {
        let weights = weights.as_ref();
        let vocab = Vocab::load(vocab)?;
        let bytes = std::fs::read(weights).map_err(|e| Error::io(weights, e))?;
        Self::from_bytes(vocab, &bytes)
    }

    fn run(&self, ctx: &ContextEmbeddings<F>, bias: &[F], mut trace: Option<&mut Vec<AttentionRow<F>>>) -> Vec<F> {
        let d = self.config.dim;
        let n = ctx.len();
        let heads = self.config.heads;
        let hd = d / heads;
        let scale = F::one() / F::from_count(hd).sqrt();
        let mut x: Vec<Vec<F>> = ctx
            .vectors()
            .iter()
            .enumerate()
            .map(|(pos, v)| {
                let pe = positional(pos, d);
                v.iter().zip(pe).map(|(&a, b)| a + b).collect()
            })
            .collect();
        for (li, layer) in self.layers.iter().enumerate() {
            let normed: Vec<Vec<F>> = x.iter().map(|v| layer_norm(v, &layer.ln1_gain, &layer.ln1_bias)).collect();
            let q: Vec<Vec<F>> = normed.iter().map(|v| layer.wq.apply(v)).collect();
            let k: Vec<Vec<F>> = normed.iter().map(|v| layer.wk.apply(v)).collect();
            let vv: Vec<Vec<F>> = normed.iter().map(|v| layer.wv.apply(v)).collect();
            for i in 0..n {
                let mut concat = vec![F::zero(); d];
                for h in 0..heads {
                    let r = h * hd..(h + 1) * hd;
                    let e: Vec<F> = (0..=i)
                        .map(|j| {
                            let s: F = q[i][r.clone()]
                                .iter()
                                .zip(&k[j][r.clone()])
                                .map(|(&a, &b)| a * b)
                                .sum();
                            s * scale
                        })
                        .collect();
                    let hs: Vec<F> = e.iter().zip(bias).map(|(&e, &b)| e + b).collect();
                    let p = softmax(&hs);
                    for (j, &pj) in p.iter().enumerate() {
                        for (c, &val) in concat[r.clone()].iter_mut().zip(&vv[j][r.clone()]) {
                            *c += pj * val;
                        }
                    }
                    if let Some(t) = trace.as_deref_mut() {
                        t.push(AttentionRow {
                            layer: li,
                            head: h,
                            query: i,
                            e,
                            h: hs,
                            p,
                        });
                    }
                }
                let proj = layer.wo.apply(&concat);
                for (a, b) in x[i].iter_mut().zip(proj) {
                    *a += b;
                }
            }
            for xi in x.iter_mut() {
                let normed = layer_norm(xi, &layer.ln2_gain, &layer.ln2_bias);
                let hidden: Vec<F> = layer
                    .w1
                    .apply(&normed)
                    .into_iter()
                    .zip(&layer.b1)
                    .map(|(a, &b)| gelu(a + b))
                    .collect();
                let out = layer.w2.apply(&hidden);
                for ((a, b), &c) in xi.iter_mut().zip(out).zip(&layer.b2) {
                    *a += b + c;
                }
            }
        }
        let last = layer_norm(&x[n - 1], &self.lnf_gain, &self.lnf_bias);
        self.unembed.apply(&last)
    }
}

fn positional<F: Scalar>(pos: usize, d: usize) -> impl Iterator<Item = F> {
    (0..d).map(move |i| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        F::from_lit(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

fn layer_norm<F: Scalar>(x: &[F], gain: &[F], bias: &[F]) -> Vec<F> {
    let n = F::from_count(x.len());
    let mean = x.iter().copied().sum::<F>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    let inv = F::one() / (var + F::from_lit(1e-5)).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&v, (&g, &b))| (v - mean) * inv * g + b)
        .collect()
}

fn gelu<F: Scalar>(x: F) -> F {
    let c = F::from_lit((2.0 / std::f64::consts::PI).sqrt());
    let half = F::from_lit(0.5);
    half * x * (F::one() + (c * (x + F::from_lit(0.044715) * x * x * x)).tanh())
}

impl<F: Scalar> GuidableModel<F> for MicroTransformer<F> {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn embedding_dim(&self) -> usize {
        self.config.dim
    }

    fn embed(&self, token: TokenId) -> Vec<F> {
        self.embedding.row(token.index()).to_vec()
    }

    fn logits(&self, ctx: &ContextEmbeddings<F>, bias: &[F]) -> Vec<F> {
        self.run(ctx, bias, None)
    }

    fn attention(&self, ctx: &ContextEmbeddings<F>, bias: &[F]) -> AttentionScores<F> {
        let mut rows = Vec::new();
        self.run(ctx, bias, Some(&mut rows));
        AttentionScores { rows }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{attention_trace, embed_prompt, forward_step, Prompt};

    fn model() -> MicroTransformer<f64> {
        MicroTransformer::seeded(MicroConfig::default(), 42)
    }

    fn ctx3(m: &MicroTransformer<f64>) -> ContextEmbeddings<f64> {
        let p = Prompt::text(m.vocab().tokenize("free air ?"));
        embed_prompt(m, &p).unwrap()
    }

    #[test]
    fn seeded_weights_are_reproducible() {
        assert_eq!(model(), model());
        assert_ne!(model(), MicroTransformer::seeded(MicroConfig::default(), 43));
    }

    #[test]
    fn attention_rows_normalize_and_cover_every_head() {
        let m = model();
        let c = ctx3(&m);
        let att = attention_trace(&m, &c, &[0.4, -1.0, 0.0]).unwrap();
        assert_eq!(att.rows.len(), 2 * 4 * 3);
        for row in &att.rows {
            let s: f64 = row.p.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(row.p.iter().all(|&p| p > 0.0));
            for (j, (&e, &h)) in row.e.iter().zip(&row.h).enumerate() {
                let b = [0.4, -1.0, 0.0][j];
                assert_eq!(h, e + b);
            }
        }
    }

    #[test]
    fn weights_roundtrip_through_bytes() {
        let m = model();
        let back = MicroTransformer::<f64>::from_bytes(m.vocab().clone(), &m.to_bytes()).unwrap();
        assert_eq!(m, back);
        let c = ctx3(&m);
        assert_eq!(
            forward_step(&m, &c, &[0.0; 3]).unwrap(),
            forward_step(&back, &c, &[0.0; 3]).unwrap()
        );
    }

    #[test]
    fn weights_reject_wrong_dtype_and_truncation() {
        let m = model();
        let bytes = m.to_bytes();
        assert!(MicroTransformer::<f32>::from_bytes(m.vocab().clone(), &bytes).is_err());
        assert!(MicroTransformer::<f64>::from_bytes(m.vocab().clone(), &bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn f32_model_tracks_f64_model() {
        let a = MicroTransformer::<f64>::seeded(MicroConfig::default(), 42);
        let b = MicroTransformer::<f32>::seeded(MicroConfig::default(), 42);
        let p64 = Prompt::text(a.vocab().tokenize("free air ?"));
        let p32 = Prompt::text(b.vocab().tokenize("free air ?"));
        let s64 = forward_step(&a, &embed_prompt(&a, &p64).unwrap(), &[0.0; 3]).unwrap();
        let s32 = forward_step(&b, &embed_prompt(&b, &p32).unwrap(), &[0.0; 3]).unwrap();
        for (x, y) in s64.logits.iter().zip(&s32.logits) {
            assert!((x - *y as f64).abs() < 1e-3);
        }
    }
}
