//! Cross-attention fusion shared by the attacker's proxy and the victim.
//!
//! Text states attend to projected patches layer by layer (queries from text,
//! keys and values from patches, residual add). The fused representation is
//! the ℓ2-normalised mean of the final text states.

use serde::{Deserialize, Serialize};

use crate::catalog::Lexicon;
use crate::numkit::{softmax_in_place, DenseMatrix, DenseVector, Real, SeededRng, NORM_FLOOR};
use crate::{Error, Result};

// Token-embedding mixture, in units of `1/sqrt(model_dim)` per coordinate.
const GROUP_WEIGHT: f64 = 0.3;
const HOT_WEIGHT: f64 = 0.8;
const TOKEN_NOISE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Std of query/key weights, in units of `1/sqrt(model_dim)`.
    pub attention_gain: f64,
    /// Std of value weights, in units of `1/sqrt(model_dim)`.
    pub value_gain: f64,
    /// Std of the patch projection, in units of `1/sqrt(patch_dim * model_dim)`.
    pub patch_gain: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            model_dim: 32,
            layers: 2,
            heads: 4,
            head_dim: 8,
            attention_gain: 2.0,
            value_gain: 1.5,
            patch_gain: 0.3,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.layers == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("fusion dimensions must be positive".into()));
        }
        if self.heads * self.head_dim != self.model_dim {
            return Err(Error::Config(format!(
                "heads ({}) * head_dim ({}) must equal model_dim ({})",
                self.heads, self.head_dim, self.model_dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights<T> {
    pub query: DenseMatrix<T>,
    pub key: DenseMatrix<T>,
    pub value: DenseMatrix<T>,
}

/// All weights of the fusion stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights<T> {
    pub token_embedding: DenseMatrix<T>,
    pub patch_projection: DenseMatrix<T>,
    pub layers: Vec<Vec<HeadWeights<T>>>,
}

/// Per-(layer, head) intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
struct HeadTrace<T> {
    query: DenseMatrix<T>,
    key: DenseMatrix<T>,
    value: DenseMatrix<T>,
    attention: DenseMatrix<T>,
}

/// Forward-pass record: everything `backward` needs.
#[derive(Debug, Clone)]
pub struct FusionTrace<T> {
    tokens: Vec<u32>,
    patches: DenseMatrix<T>,
    projected: DenseMatrix<T>,
    states: Vec<DenseMatrix<T>>,
    heads: Vec<Vec<HeadTrace<T>>>,
    pooled_norm: T,
    pub fused: DenseVector<T>,
}

impl<T: Real> FusionTrace<T> {
    pub fn final_states(&self) -> &DenseMatrix<T> {
        self.states.last().expect("at least the embedding state")
    }

    /// Attention maps indexed `[layer][head]`, each `L_t × L_v`.
    pub fn attention_maps(&self) -> Vec<Vec<DenseMatrix<T>>> {
        self.heads
            .iter()
            .map(|layer| layer.iter().map(|h| h.attention.clone()).collect())
            .collect()
    }
}

impl<T: Real> FusionWeights<T> {
    /// Seeded initialisation. Token embeddings follow the lexicon's public
    /// semantics: a weak per-group centroid, a signed hotness direction and
    /// strong per-token noise. Same-group tokens are only slightly closer than
    /// others, so items of one category do not pool to nearly the same vector.
    pub fn init(
        cfg: &FusionConfig,
        lexicon: &Lexicon,
        patch_dim: usize,
        rng: &SeededRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let unit = 1.0 / (d as f64).sqrt();

        let mut emb_rng = rng.child("token-embedding");
        let groups: Vec<Vec<f64>> = (0..lexicon.group_count())
            .map(|_| (0..d).map(|_| unit * emb_rng.normal()).collect())
            .collect();
        let hot: Vec<f64> = (0..d).map(|_| unit * emb_rng.normal()).collect();
        let mut token_embedding = DenseMatrix::zeros(lexicon.vocab_size(), d);
        for t in 0..lexicon.vocab_size() as u32 {
            let g = &groups[lexicon.group_index(t)];
            let signed_hot = 2.0 * lexicon.hotness(t) - 1.0;
            for (j, value) in token_embedding.row_mut(t as usize).iter_mut().enumerate() {
                *value = T::lit(
                    GROUP_WEIGHT * g[j]
                        + HOT_WEIGHT * signed_hot * hot[j]
                        + TOKEN_NOISE * unit * emb_rng.normal(),
                );
            }
        }

        let gaussian = |rng: &mut SeededRng, rows: usize, cols: usize, std: f64| {
            let values = (0..rows * cols)
                .map(|_| T::lit(std * rng.normal()))
                .collect();
            DenseMatrix::new(rows, cols, values).expect("shape matches")
        };
        let mut w_rng = rng.child("fusion-weights");
        let patch_projection = gaussian(
            &mut w_rng,
            patch_dim,
            d,
            cfg.patch_gain / ((patch_dim * d) as f64).sqrt(),
        );
        let layers = (0..cfg.layers)
            .map(|_| {
                (0..cfg.heads)
                    .map(|_| HeadWeights {
                        query: gaussian(&mut w_rng, d, cfg.head_dim, cfg.attention_gain * unit),
                        key: gaussian(&mut w_rng, d, cfg.head_dim, cfg.attention_gain * unit),
                        value: gaussian(&mut w_rng, d, cfg.head_dim, cfg.value_gain * unit),
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            token_embedding,
            patch_projection,
            layers,
        })
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let z = |m: &DenseMatrix<T>| DenseMatrix::zeros(m.rows(), m.cols());
        Self {
            token_embedding: z(&self.token_embedding),
            patch_projection: z(&self.patch_projection),
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.iter()
                        .map(|h| HeadWeights {
                            query: z(&h.query),
                            key: z(&h.key),
                            value: z(&h.value),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.token_embedding.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embedding.rows()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_projection.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.layers[0][0].query.cols()
    }

    /// Every weight matrix, in a fixed order.
    pub fn tensors(&self) -> Vec<&DenseMatrix<T>> {
        let mut out = vec![&self.token_embedding, &self.patch_projection];
        for layer in &self.layers {
            for h in layer {
                out.extend([&h.query, &h.key, &h.value]);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseMatrix<T>> {
        let mut out = vec![&mut self.token_embedding, &mut self.patch_projection];
        for layer in &mut self.layers {
            for h in layer {
                out.extend([&mut h.query, &mut h.key, &mut h.value]);
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.is_finite())
    }

    fn check_input(&self, tokens: &[u32], patches: &DenseMatrix<T>) -> Result<()> {
        if tokens.is_empty() || patches.rows() == 0 {
            return Err(Error::InvalidArgument("empty text or patch input".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.vocab_size()) {
            return Err(Error::InvalidArgument(format!(
                "token {t} outside vocabulary of {}",
                self.vocab_size()
            )));
        }
        if patches.cols() != self.patch_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.patch_dim(),
                actual: patches.cols(),
            });
        }
        Ok(())
    }

    pub fn embed_tokens(&self, tokens: &[u32]) -> DenseMatrix<T> {
        let d = self.model_dim();
        let mut x = DenseMatrix::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            x.row_mut(i)
                .copy_from_slice(self.token_embedding.row(t as usize));
        }
        x
    }

    pub fn forward(&self, tokens: &[u32], patches: &DenseMatrix<T>) -> Result<FusionTrace<T>> {
        self.check_input(tokens, patches)?;
        let dh = self.head_dim();
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let projected = patches.matmul(&self.patch_projection)?;
        let mut states = vec![self.embed_tokens(tokens)];
        let mut heads = Vec::with_capacity(self.layers.len());

        for layer in &self.layers {
            let x = states.last().expect("nonempty");
            let mut next = x.clone();
            let mut layer_trace = Vec::with_capacity(layer.len());
            for (h, w) in layer.iter().enumerate() {
                let query = x.matmul(&w.query)?;
                let key = projected.matmul(&w.key)?;
                let value = projected.matmul(&w.value)?;
                let mut attention = query.matmul_nt(&key)?;
                for i in 0..attention.rows() {
                    let row = attention.row_mut(i);
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                    softmax_in_place(row, T::one());
                }
                let out = attention.matmul(&value)?;
                for i in 0..out.rows() {
                    let dst = &mut next.row_mut(i)[h * dh..(h + 1) * dh];
                    for (a, &b) in dst.iter_mut().zip(out.row(i)) {
                        *a += b;
                    }
                }
                layer_trace.push(HeadTrace {
                    query,
                    key,
                    value,
                    attention,
                });
            }
            states.push(next);
            heads.push(layer_trace);
        }

        let pooled = states.last().expect("nonempty").column_means();
        let pooled_norm = pooled.norm();
        if !(pooled_norm.to_f64_lossy() > NORM_FLOOR) {
            return Err(Error::Degenerate(
                "fused representation has zero norm".into(),
            ));
        }
        let fused = pooled.scaled(T::one() / pooled_norm);
        Ok(FusionTrace {
            tokens: tokens.to_vec(),
            patches: patches.clone(),
            projected,
            states,
            heads,
            pooled_norm,
            fused,
        })
    }

    /// Accumulates `∂L/∂weights` into `grads` given `∂L/∂fused`.
    pub fn backward(
        &self,
        trace: &FusionTrace<T>,
        d_fused: &DenseVector<T>,
        grads: &mut Self,
    ) -> Result<()> {
        let d = self.model_dim();
        if d_fused.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: d_fused.len(),
            });
        }
        let dh = self.head_dim();
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let f = &trace.fused;
        let proj = f.dot(d_fused)?;
        let lt = trace.tokens.len();
        let row_grad: Vec<T> = (0..d)
            .map(|j| (d_fused[j] - f[j] * proj) / (trace.pooled_norm * T::lit(lt as f64)))
            .collect();
        let mut dx = DenseMatrix::zeros(lt, d);
        for i in 0..lt {
            dx.row_mut(i).copy_from_slice(&row_grad);
        }
        let mut d_projected = DenseMatrix::zeros(trace.projected.rows(), d);

        for (l, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.states[l];
            let mut dx_prev = dx.clone();
            for (h, w) in layer.iter().enumerate() {
                let ht = &trace.heads[l][h];
                let mut d_out = DenseMatrix::zeros(lt, dh);
                for i in 0..lt {
                    d_out
                        .row_mut(i)
                        .copy_from_slice(&dx.row(i)[h * dh..(h + 1) * dh]);
                }
                let d_attn = d_out.matmul_nt(&ht.value)?;
                let d_value = ht.attention.matmul_tn(&d_out)?;
                let mut d_scores = DenseMatrix::zeros(lt, ht.attention.cols());
                for i in 0..lt {
                    let a = ht.attention.row(i);
                    let g = d_attn.row(i);
                    let inner: T = a.iter().zip(g).map(|(&ai, &gi)| ai * gi).sum();
                    for (k, v) in d_scores.row_mut(i).iter_mut().enumerate() {
                        *v = a[k] * (g[k] - inner) * scale;
                    }
                }
                let d_query = d_scores.matmul(&ht.key)?;
                let d_key = d_scores.matmul_tn(&ht.query)?;

                let gw = &mut grads.layers[l][h];
                gw.query.axpy(T::one(), &x.matmul_tn(&d_query)?)?;
                gw.key.axpy(T::one(), &trace.projected.matmul_tn(&d_key)?)?;
                gw.value
                    .axpy(T::one(), &trace.projected.matmul_tn(&d_value)?)?;
                dx_prev.axpy(T::one(), &d_query.matmul_nt(&w.query)?)?;
                d_projected.axpy(T::one(), &d_key.matmul_nt(&w.key)?)?;
                d_projected.axpy(T::one(), &d_value.matmul_nt(&w.value)?)?;
            }
            dx = dx_prev;
        }

        grads
            .patch_projection
            .axpy(T::one(), &trace.patches.matmul_tn(&d_projected)?)?;
        for (i, &t) in trace.tokens.iter().enumerate() {
            let dst = grads.token_embedding.row_mut(t as usize);
            for (a, &b) in dst.iter_mut().zip(dx.row(i)) {
                *a += b;
            }
        }
        Ok(())
    }
}
