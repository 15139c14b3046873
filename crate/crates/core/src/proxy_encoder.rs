//! The attacker's frozen surrogate of the victim's fusion operator.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::Lexicon;
use crate::fusion::{FusionConfig, FusionWeights};
use crate::numkit::{DenseMatrix, DenseVector, Real, SeededRng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Visual,
}

/// Borrowed item content for a single modality.
#[derive(Debug, Clone, Copy)]
pub enum ModalityContent<'a, T> {
    Text(&'a [u32]),
    Visual(&'a DenseMatrix<T>),
}

/// Output of one proxy forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedOutput<T> {
    /// Unit-norm fused representation.
    pub fused: DenseVector<T>,
    pub text_states: DenseMatrix<T>,
    /// `[layer][head]`, each `L_t × L_v` and row-stochastic.
    pub attention_maps: Vec<Vec<DenseMatrix<T>>>,
}

/// Seeded, never-trained multimodal encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyEncoder<T> {
    config: FusionConfig,
    weights: FusionWeights<T>,
    seed: u64,
}

impl<T: Real> ProxyEncoder<T> {
    pub fn from_seed(
        config: FusionConfig,
        lexicon: &Lexicon,
        patch_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let weights = FusionWeights::init(
            &config,
            lexicon,
            patch_dim,
            &SeededRng::new(seed).child("proxy"),
        )?;
        Ok(Self {
            config,
            weights,
            seed,
        })
    }

    pub fn from_weights(config: FusionConfig, weights: FusionWeights<T>, seed: u64) -> Self {
        Self {
            config,
            weights,
            seed,
        }
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn weights(&self) -> &FusionWeights<T> {
        &self.weights
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Short content hash of the weights.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for m in self.weights.tensors() {
            for v in m.as_slice() {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn encode(&self, text: &[u32], patches: &DenseMatrix<T>) -> Result<FusedOutput<T>> {
        let trace = self.weights.forward(text, patches)?;
        Ok(FusedOutput {
            attention_maps: trace.attention_maps(),
            text_states: trace.final_states().clone(),
            fused: trace.fused,
        })
    }

    /// Fused representation only.
    pub fn fuse(&self, text: &[u32], patches: &DenseMatrix<T>) -> Result<DenseVector<T>> {
        Ok(self.weights.forward(text, patches)?.fused)
    }

    /// Unit-norm embedding through one modality's pathway only: the mean token
    /// embedding, or the mean projected patch.
    pub fn modality_embed(&self, content: ModalityContent<'_, T>) -> Result<DenseVector<T>> {
        match content {
            ModalityContent::Text(tokens) => {
                if tokens.is_empty() {
                    return Err(Error::InvalidArgument("empty text".into()));
                }
                if let Some(&t) = tokens
                    .iter()
                    .find(|&&t| t as usize >= self.weights.vocab_size())
                {
                    return Err(Error::InvalidArgument(format!(
                        "token {t} outside vocabulary"
                    )));
                }
                self.weights
                    .embed_tokens(tokens)
                    .column_means()
                    .l2_normalize()
            }
            ModalityContent::Visual(patches) => {
                if patches.cols() != self.weights.patch_dim() {
                    return Err(Error::DimensionMismatch {
                        expected: self.weights.patch_dim(),
                        actual: patches.cols(),
                    });
                }
                if patches.rows() == 0 {
                    return Err(Error::InvalidArgument("empty patch matrix".into()));
                }
                patches
                    .matmul(&self.weights.patch_projection)?
                    .column_means()
                    .l2_normalize()
            }
        }
    }

    /// Image–text consistency: cosine between the two unimodal embeddings.
    pub fn coherence(&self, text: &[u32], patches: &DenseMatrix<T>) -> Result<T> {
        let t = self.modality_embed(ModalityContent::Text(text))?;
        let v = self.modality_embed(ModalityContent::Visual(patches))?;
        t.cosine(&v)
    }

    /// The `count` tokens closest to `token` by embedding cosine, nearest
    /// first, excluding `token` itself. Ties go to the lower token id.
    pub fn nearest_tokens(&self, token: u32, count: usize) -> Vec<u32> {
        let table = &self.weights.token_embedding;
        let anchor = table.row_vector(token as usize);
        let mut scored: Vec<(T, u32)> = (0..table.rows() as u32)
            .filter(|&t| t != token)
            .filter_map(|t| Some((table.row_vector(t as usize).cosine(&anchor).ok()?, t)))
            .collect();
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        scored.into_iter().take(count).map(|(_, t)| t).collect()
    }
}

/// Combines per-(layer, head) cross-attention maps into one `L_t × L_v` map.
///
/// Heads are averaged within a layer. Across layers the residual path is
/// folded in rollout-style: `agg₁ = M₁`, `aggₗ = ½·Mₗ + ½·aggₗ₋₁`. Convex
/// combinations keep every row stochastic.
pub fn aggregate_attention<T: Real>(maps: &[Vec<DenseMatrix<T>>]) -> Result<DenseMatrix<T>> {
    let mut aggregate: Option<DenseMatrix<T>> = None;
    let half = T::lit(0.5);
    for layer in maps {
        let first = layer
            .first()
            .ok_or_else(|| Error::InvalidArgument("attention layer without heads".into()))?;
        let mut mean = DenseMatrix::zeros(first.rows(), first.cols());
        for m in layer {
            mean.axpy(T::one(), m)?;
        }
        let mean = mean.scaled(T::one() / T::lit(layer.len() as f64));
        aggregate = Some(match aggregate {
            None => mean,
            Some(prev) => mean.scaled(half).add(&prev.scaled(half))?,
        });
    }
    aggregate.ok_or_else(|| Error::InvalidArgument("no attention maps to aggregate".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder() -> ProxyEncoder<f64> {
        ProxyEncoder::from_seed(FusionConfig::default(), &Lexicon::new(512, 4), 16, 9).unwrap()
    }

    fn random_patches(rng: &mut SeededRng, rows: usize) -> DenseMatrix<f64> {
        DenseMatrix::new(rows, 16, (0..rows * 16).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn encode_is_deterministic_and_unit_norm() {
        let enc = encoder();
        let mut rng = SeededRng::new(1);
        for _ in 0..5 {
            let text: Vec<u32> = (0..12).map(|_| rng.below(512) as u32).collect();
            let patches = random_patches(&mut rng, 9);
            let a = enc.encode(&text, &patches).unwrap();
            let b = enc.encode(&text, &patches).unwrap();
            assert_eq!(a, b);
            assert!((a.fused.norm() - 1.0).abs() <= 1e-9);
            for layer in &a.attention_maps {
                for m in layer {
                    for i in 0..m.rows() {
                        assert!((m.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                    }
                }
            }
        }
        assert_eq!(enc, encoder());
        assert_eq!(enc.digest(), encoder().digest());
    }

    #[test]
    fn patch_permutation_permutes_attention_columns() {
        let enc = encoder();
        let mut rng = SeededRng::new(2);
        let text: Vec<u32> = (0..12).map(|_| rng.below(512) as u32).collect();
        let patches = random_patches(&mut rng, 9);
        let perm = [3usize, 0, 8, 1, 2, 7, 6, 4, 5];
        let mut shuffled = DenseMatrix::zeros(9, 16);
        for (dst, &src) in perm.iter().enumerate() {
            shuffled.row_mut(dst).copy_from_slice(patches.row(src));
        }
        let a = enc.encode(&text, &patches).unwrap();
        let b = enc.encode(&text, &shuffled).unwrap();
        for (la, lb) in a.attention_maps.iter().zip(&b.attention_maps) {
            for (ma, mb) in la.iter().zip(lb) {
                for i in 0..ma.rows() {
                    for (dst, &src) in perm.iter().enumerate() {
                        assert!((mb[(i, dst)] - ma[(i, src)]).abs() < 1e-12);
                    }
                }
            }
        }
        assert!(a.fused.sub(&b.fused).unwrap().norm() < 1e-12);

        let row: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let same = DenseMatrix::from_rows(&vec![row; 9]).unwrap();
        let out = enc.encode(&text, &same).unwrap();
        for m in out.attention_maps.iter().flatten() {
            assert!(m.as_slice().iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-12));
        }
    }

    #[test]
    fn modality_embeddings() {
        let enc = encoder();
        let tok = enc
            .modality_embed(ModalityContent::Text(&[17; 12]))
            .unwrap();
        let expected = enc
            .weights()
            .token_embedding
            .row_vector(17)
            .l2_normalize()
            .unwrap();
        assert!(tok.sub(&expected).unwrap().norm() < 1e-12);

        let mut rng = SeededRng::new(3);
        let row: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let patches = DenseMatrix::from_rows(&vec![row.clone(); 9]).unwrap();
        let vis = enc
            .modality_embed(ModalityContent::Visual(&patches))
            .unwrap();
        let single = DenseMatrix::from_rows(&[row]).unwrap();
        let expected = single
            .matmul(&enc.weights().patch_projection)
            .unwrap()
            .row_vector(0)
            .l2_normalize()
            .unwrap();
        assert!(vis.sub(&expected).unwrap().norm() < 1e-12);

        let c = tok.cosine(&vis).unwrap();
        assert!((-1.0..=1.0).contains(&c));
        assert!(enc
            .modality_embed(ModalityContent::Visual(&DenseMatrix::zeros(9, 3)))
            .is_err());
        assert!(enc.modality_embed(ModalityContent::Text(&[])).is_err());
    }

    #[test]
    fn aggregation_rules() {
        let a = DenseMatrix::from_rows(&[vec![0.2f64, 0.8], vec![0.6, 0.4]]).unwrap();
        let b = DenseMatrix::from_rows(&[vec![0.5f64, 0.5], vec![1.0, 0.0]]).unwrap();
        assert_eq!(aggregate_attention(&[vec![a.clone()]]).unwrap(), a);
        assert_eq!(
            aggregate_attention(&[vec![a.clone()], vec![a.clone()]]).unwrap(),
            a
        );
        let two_heads = aggregate_attention(&[vec![a.clone(), b.clone()]]).unwrap();
        assert!((two_heads[(0, 0)] - 0.35).abs() < 1e-12);
        let layered = aggregate_attention(&[vec![a.clone()], vec![b.clone()]]).unwrap();
        for i in 0..2 {
            assert!((layered.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((layered[(1, 0)] - 0.8).abs() < 1e-12);
        assert!(aggregate_attention::<f64>(&[]).is_err());
        assert!(aggregate_attention::<f64>(&[vec![]]).is_err());
    }

    #[test]
    fn fused_output_is_lipschitz_in_patches() {
        let enc = encoder();
        let mut rng = SeededRng::new(4);
        let text: Vec<u32> = (0..12).map(|_| rng.below(512) as u32).collect();
        let patches = random_patches(&mut rng, 9);
        let base = enc.fuse(&text, &patches).unwrap();
        let ratio = |eps: f64, rng: &mut SeededRng| {
            let mut worst: f64 = 0.0;
            for _ in 0..20 {
                let mut p = patches.clone();
                let row = rng.below(9);
                for v in p.row_mut(row) {
                    *v += eps * if rng.coin() { 1.0 } else { -1.0 };
                }
                worst = worst.max(enc.fuse(&text, &p).unwrap().sub(&base).unwrap().norm() / eps);
            }
            worst
        };
        let r1 = ratio(1e-2, &mut SeededRng::new(5));
        let r2 = ratio(1e-2, &mut SeededRng::new(5));
        let r3 = ratio(5e-3, &mut SeededRng::new(5));
        assert_eq!(r1, r2);
        assert!(r1.is_finite() && r1 < 10.0, "ratio {r1}");
        assert!((r1 - r3).abs() / r1 < 0.1, "{r1} vs {r3}");
    }

    #[test]
    fn nearest_tokens_are_the_closest_by_cosine() {
        let enc = encoder();
        let lex = Lexicon::new(512, 4);
        let table = &enc.weights().token_embedding;
        let cos = |a: u32, b: u32| {
            table
                .row_vector(a as usize)
                .cosine(&table.row_vector(b as usize))
                .unwrap()
        };
        let near = enc.nearest_tokens(10, 8);
        assert_eq!(near.len(), 8);
        assert!(!near.contains(&10));
        assert!(near.windows(2).all(|w| cos(10, w[0]) >= cos(10, w[1])));
        let worst = cos(10, near[7]);
        assert!((0..512u32)
            .filter(|t| *t != 10 && !near.contains(t))
            .all(|t| cos(10, t) <= worst));

        // Group structure survives on average even though per-token noise
        // dominates individual neighbours.
        let (mut same, mut other) = (Vec::new(), Vec::new());
        for t in (0..512u32).filter(|&t| t != 10) {
            if lex.group_index(t) == lex.group_index(10) {
                same.push(cos(10, t));
            } else {
                other.push(cos(10, t));
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&same) > mean(&other));
    }
}
