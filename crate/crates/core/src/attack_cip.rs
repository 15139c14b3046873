//! Cross-modal interactive perturbation: attention-guided, budgeted edits to
//! a target's patches and tokens that pull its proxy fused vector toward the
//! exposure centroid while keeping image–text consistency.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attack_ea::Centroid;
use crate::numkit::{DenseMatrix, DenseVector, Real, SeededRng};
use crate::proxy_encoder::{aggregate_attention, ProxyEncoder};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CipConfig {
    /// ℓ∞ budget per patch coordinate.
    pub epsilon: f64,
    /// Visual step size.
    pub eta: f64,
    pub rounds: usize,
    pub k_txt: usize,
    pub k_vis: usize,
    /// Random sign patterns probed per visual step.
    pub probe_count: usize,
    /// Nearest-token candidates per edited position.
    pub candidate_count: usize,
    /// Allowed drift of image–text consistency from the clean pair.
    pub coherence_tolerance: f64,
    pub stop_threshold: f64,
    pub max_token_edits: usize,
    pub seed: u64,
    /// Recompute saliency masks from the current content every round.
    pub interactive: bool,
    pub visual: bool,
    pub textual: bool,
}

impl Default for CipConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.5,
            eta: 0.125,
            rounds: 20,
            k_txt: 2,
            k_vis: 3,
            probe_count: 16,
            candidate_count: 8,
            coherence_tolerance: 0.05,
            stop_threshold: 0.95,
            max_token_edits: 3,
            seed: 0,
            interactive: true,
            visual: true,
            textual: true,
        }
    }
}

impl CipConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [("epsilon", self.epsilon), ("eta", self.eta)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("k_txt", self.k_txt),
            ("k_vis", self.k_vis),
            ("probe_count", self.probe_count),
            ("candidate_count", self.candidate_count),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.coherence_tolerance >= 0.0) {
            return Err(Error::Config("coherence_tolerance must be >= 0".into()));
        }
        if !(self.stop_threshold > 0.0 && self.stop_threshold <= 1.0) {
            return Err(Error::Config("stop_threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Poisoned target content and its offsets from the clean original.
#[derive(Debug, Clone, PartialEq)]
pub struct PoisonedContent<T> {
    pub text: Vec<u32>,
    pub patches: DenseMatrix<T>,
    /// Positions whose token differs from the original.
    pub edited_token_positions: BTreeSet<usize>,
    pub patch_delta: DenseMatrix<T>,
}

impl<T: Real> PoisonedContent<T> {
    /// Unmodified content.
    pub fn clean(text: &[u32], patches: &DenseMatrix<T>) -> Self {
        Self {
            text: text.to_vec(),
            patches: patches.clone(),
            edited_token_positions: BTreeSet::new(),
            patch_delta: DenseMatrix::zeros(patches.rows(), patches.cols()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Threshold,
    Budget,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Masks {
    pub text: Vec<usize>,
    pub visual: Vec<usize>,
    /// A requested `k` exceeded the sequence length.
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenEdit {
    pub round: usize,
    pub position: usize,
    pub from: u32,
    pub to: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CipTrace {
    /// Alignment `cos(φ, z*)` before round 1 and after every round.
    pub scores: Vec<f64>,
    pub masks: Vec<Masks>,
    pub edits: Vec<TokenEdit>,
    /// Index of the adopted visual candidate per round (0 = no move).
    pub visual_choices: Vec<usize>,
    pub termination: Termination,
}

impl CipTrace {
    pub fn initial(&self) -> f64 {
        self.scores[0]
    }

    pub fn last(&self) -> f64 {
        *self
            .scores
            .last()
            .expect("trace starts with the initial score")
    }
}

/// Row means (`s_txt`) and column means (`s_vis`) of an attention map.
pub fn saliency_scores<T: Real>(a: &DenseMatrix<T>) -> Result<(DenseVector<T>, DenseVector<T>)> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::InvalidArgument("empty attention map".into()));
    }
    Ok((a.row_means(), a.column_means()))
}

fn top_indices<T: Real>(scores: &DenseVector<T>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Top-`k` positions per modality, highest score first, ties to the lower
/// index. `k` is clamped to the length.
pub fn build_masks<T: Real>(
    s_txt: &DenseVector<T>,
    s_vis: &DenseVector<T>,
    k_txt: usize,
    k_vis: usize,
) -> Masks {
    Masks {
        text: top_indices(s_txt, k_txt),
        visual: top_indices(s_vis, k_vis),
        clamped: k_txt > s_txt.len() || k_vis > s_vis.len(),
    }
}

/// Masks from the proxy's aggregated attention over `content`.
pub fn masks_for<T: Real>(
    enc: &ProxyEncoder<T>,
    text: &[u32],
    patches: &DenseMatrix<T>,
    cfg: &CipConfig,
) -> Result<Masks> {
    let out = enc.encode(text, patches)?;
    let (s_txt, s_vis) = saliency_scores(&aggregate_attention(&out.attention_maps)?)?;
    Ok(build_masks(&s_txt, &s_vis, cfg.k_txt, cfg.k_vis))
}

fn alignment<T: Real>(
    enc: &ProxyEncoder<T>,
    c: &Centroid<T>,
    text: &[u32],
    patches: &DenseMatrix<T>,
) -> Result<T> {
    enc.fuse(text, patches)?.cosine(&c.z_star)
}

/// Projects `value` onto `[orig - eps, orig + eps]` so that the offset
/// recomputed as `result - orig` is within `eps` exactly, not just up to an
/// ulp of rounding.
fn clip_to_budget<T: Real>(orig: T, value: T, eps: T) -> T {
    let mut clipped = value.max(orig - eps).min(orig + eps);
    // The pull-back doubles each pass and reaches exactly 1, which lands on
    // `orig`, so the loop always ends.
    let mut pull = T::lit(4.0) * T::epsilon();
    while (clipped - orig).abs() > eps {
        clipped = orig + (clipped - orig) * (T::one() - pull);
        pull = pull + pull;
    }
    clipped
}

fn coherent<T: Real>(coherence: T, clean: T, cfg: &CipConfig) -> bool {
    (coherence - clean).abs() <= T::lit(cfg.coherence_tolerance)
}

/// Shared state for one CIP run.
struct Context<'a, T> {
    enc: &'a ProxyEncoder<T>,
    centroid: &'a Centroid<T>,
    original_text: &'a [u32],
    original_patches: &'a DenseMatrix<T>,
    clean_coherence: T,
    cfg: &'a CipConfig,
}

/// Outcome of one visual probe.
#[derive(Debug, Clone)]
pub struct VisualStep<T> {
    pub content: PoisonedContent<T>,
    /// Candidate patch matrices in evaluation order; index 0 is no move.
    pub candidates: Vec<DenseMatrix<T>>,
    /// Alignment per candidate; `None` when rejected for coherence.
    pub candidate_scores: Vec<Option<T>>,
    pub chosen: usize,
}

/// One signed probe over the masked patch rows. Candidate 0 leaves the
/// patches unchanged, so alignment never decreases.
#[allow(clippy::too_many_arguments)]
pub fn visual_step<T: Real>(
    enc: &ProxyEncoder<T>,
    c: &Centroid<T>,
    content: &PoisonedContent<T>,
    original_text: &[u32],
    original_patches: &DenseMatrix<T>,
    m_vis: &[usize],
    cfg: &CipConfig,
    rng: &mut SeededRng,
) -> Result<VisualStep<T>> {
    let ctx = Context::new(enc, c, original_text, original_patches, cfg)?;
    ctx.visual(content, m_vis, rng)
}

/// Greedy token substitution over the masked positions, in mask order.
pub fn textual_step<T: Real>(
    enc: &ProxyEncoder<T>,
    c: &Centroid<T>,
    content: &PoisonedContent<T>,
    original_text: &[u32],
    original_patches: &DenseMatrix<T>,
    m_txt: &[usize],
    cfg: &CipConfig,
) -> Result<(PoisonedContent<T>, Vec<TokenEdit>)> {
    let ctx = Context::new(enc, c, original_text, original_patches, cfg)?;
    ctx.textual(content, m_txt, 0)
}

impl<'a, T: Real> Context<'a, T> {
    fn new(
        enc: &'a ProxyEncoder<T>,
        centroid: &'a Centroid<T>,
        original_text: &'a [u32],
        original_patches: &'a DenseMatrix<T>,
        cfg: &'a CipConfig,
    ) -> Result<Self> {
        Ok(Self {
            clean_coherence: enc.coherence(original_text, original_patches)?,
            enc,
            centroid,
            original_text,
            original_patches,
            cfg,
        })
    }

    fn visual(
        &self,
        content: &PoisonedContent<T>,
        m_vis: &[usize],
        rng: &mut SeededRng,
    ) -> Result<VisualStep<T>> {
        let v = &content.patches;
        if v.shape() != self.original_patches.shape() {
            return Err(Error::DimensionMismatch {
                expected: self.original_patches.rows(),
                actual: v.rows(),
            });
        }
        let eps = T::lit(self.cfg.epsilon);
        let eta = T::lit(self.cfg.eta);
        let mut candidates = vec![v.clone()];
        if !m_vis.is_empty() {
            for _ in 0..self.cfg.probe_count {
                let mut cand = v.clone();
                for &r in m_vis {
                    for j in 0..v.cols() {
                        let sign = if rng.coin() { T::one() } else { -T::one() };
                        let orig = self.original_patches[(r, j)];
                        let moved = cand[(r, j)] + eta * sign;
                        cand.row_mut(r)[j] = clip_to_budget(orig, moved, eps);
                    }
                }
                candidates.push(cand);
            }
        }
        let mut scores = Vec::with_capacity(candidates.len());
        for (i, cand) in candidates.iter().enumerate() {
            let keep = i == 0
                || coherent(
                    self.enc.coherence(&content.text, cand)?,
                    self.clean_coherence,
                    self.cfg,
                );
            scores.push(if keep {
                Some(alignment(self.enc, self.centroid, &content.text, cand)?)
            } else {
                None
            });
        }
        let mut chosen = 0;
        for (i, s) in scores.iter().enumerate() {
            if let (Some(s), Some(best)) = (s, scores[chosen]) {
                if *s > best {
                    chosen = i;
                }
            }
        }
        let patches = candidates[chosen].clone();
        let content = PoisonedContent {
            patch_delta: patches.sub(self.original_patches)?,
            patches,
            text: content.text.clone(),
            edited_token_positions: content.edited_token_positions.clone(),
        };
        Ok(VisualStep {
            content,
            candidates,
            candidate_scores: scores,
            chosen,
        })
    }

    /// Tokens that may replace position `pos`: the current token and its
    /// nearest neighbours not already used elsewhere in the text.
    fn token_candidates(&self, text: &[u32], pos: usize) -> Vec<u32> {
        let current = text[pos];
        let elsewhere: BTreeSet<u32> = text
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != pos)
            .map(|(_, &t)| t)
            .collect();
        std::iter::once(current)
            .chain(
                self.enc
                    .nearest_tokens(current, self.cfg.candidate_count)
                    .into_iter()
                    .filter(|t| !elsewhere.contains(t)),
            )
            .collect()
    }

    fn edit_count(&self, text: &[u32]) -> usize {
        text.iter()
            .zip(self.original_text)
            .filter(|(a, b)| a != b)
            .count()
    }

    fn textual(
        &self,
        content: &PoisonedContent<T>,
        m_txt: &[usize],
        round: usize,
    ) -> Result<(PoisonedContent<T>, Vec<TokenEdit>)> {
        let mut text = content.text.clone();
        if text.len() != self.original_text.len() {
            return Err(Error::DimensionMismatch {
                expected: self.original_text.len(),
                actual: text.len(),
            });
        }
        let mut edits = Vec::new();
        let mut current = alignment(self.enc, self.centroid, &text, &content.patches)?;
        for &pos in m_txt {
            let from = text[pos];
            let mut best: Option<(T, u32)> = None;
            for tok in self.token_candidates(&text, pos).into_iter().skip(1) {
                let mut trial = text.clone();
                trial[pos] = tok;
                if self.edit_count(&trial) > self.cfg.max_token_edits {
                    continue;
                }
                let coh = self.enc.coherence(&trial, &content.patches)?;
                if !coherent(coh, self.clean_coherence, self.cfg) {
                    continue;
                }
                let score = alignment(self.enc, self.centroid, &trial, &content.patches)?;
                if best.is_none_or(|(b, _)| score > b) {
                    best = Some((score, tok));
                }
            }
            if let Some((score, tok)) = best {
                if score > current {
                    text[pos] = tok;
                    current = score;
                    edits.push(TokenEdit {
                        round,
                        position: pos,
                        from,
                        to: tok,
                    });
                }
            }
        }
        let edited = text
            .iter()
            .zip(self.original_text)
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i)
            .collect();
        Ok((
            PoisonedContent {
                text,
                patches: content.patches.clone(),
                edited_token_positions: edited,
                patch_delta: content.patch_delta.clone(),
            },
            edits,
        ))
    }
}

/// Runs up to `cfg.rounds` visual-then-textual rounds, stopping once the
/// alignment reaches `cfg.stop_threshold`.
pub fn run_cip<T: Real>(
    enc: &ProxyEncoder<T>,
    c: &Centroid<T>,
    text: &[u32],
    patches: &DenseMatrix<T>,
    cfg: &CipConfig,
) -> Result<(PoisonedContent<T>, CipTrace)> {
    cfg.validate()?;
    let ctx = Context::new(enc, c, text, patches, cfg)?;
    let rng = SeededRng::new(cfg.seed).child("cip");
    let mut content = PoisonedContent::clean(text, patches);
    let mut trace = CipTrace {
        scores: vec![alignment(enc, c, text, patches)?.to_f64_lossy()],
        masks: Vec::new(),
        edits: Vec::new(),
        visual_choices: Vec::new(),
        termination: Termination::Budget,
    };
    if trace.last() >= cfg.stop_threshold {
        trace.termination = Termination::Threshold;
        return Ok((content, trace));
    }
    let clean_masks = masks_for(enc, text, patches, cfg)?;
    for round in 1..=cfg.rounds {
        let masks = if cfg.interactive {
            masks_for(enc, &content.text, &content.patches, cfg)?
        } else {
            clean_masks.clone()
        };
        if cfg.visual {
            let mut round_rng = rng.child_indexed("round", round as u64);
            let step = ctx.visual(&content, &masks.visual, &mut round_rng)?;
            trace.visual_choices.push(step.chosen);
            content = step.content;
        }
        if cfg.textual {
            let (next, edits) = ctx.textual(&content, &masks.text, round)?;
            content = next;
            trace.edits.extend(edits);
        }
        trace.masks.push(masks);
        trace
            .scores
            .push(alignment(enc, c, &content.text, &content.patches)?.to_f64_lossy());
        if trace.last() >= cfg.stop_threshold {
            trace.termination = Termination::Threshold;
            break;
        }
    }
    Ok((content, trace))
}
