//! The victim recommender: trainable cross-attention fusion of item content,
//! a recency-decayed user state and a bilinear scoring head, trained with a
//! full-softmax next-item NLL.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::{Dataset, Item, ItemId, Lexicon, Split};
use crate::fusion::{FusionConfig, FusionTrace, FusionWeights};
use crate::numkit::{softmax_in_place, SeededRng};
use crate::{Error, Matrix, Result, Vector};

/// Geometric recency decay applied to history items.
pub const RECENCY_DECAY: f64 = 0.8;

/// Longest training prefix fed to the user state. Older items carry weight
/// below `0.8^20 ≈ 0.01` and are dropped.
pub const HISTORY_WINDOW: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Sampled negatives per example; 0 scores against the whole catalog.
    pub negative_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.05,
            batch_size: 64,
            weight_decay: 0.0,
            seed: 0,
            negative_samples: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate < 1.0) {
            return Err(Error::Config("learning_rate must lie in (0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// One next-item training example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    /// Oldest first.
    pub history: Vec<ItemId>,
    pub label: ItemId,
}

/// Every train-split prefix → next item, per user, over benign and
/// malicious interactions in position order.
pub fn training_examples(d: &Dataset) -> Vec<Example> {
    let mut out = Vec::new();
    for seq in d.histories().values() {
        let train: Vec<ItemId> = seq
            .iter()
            .filter(|x| x.split == Split::Train)
            .map(|x| x.item)
            .collect();
        for end in 1..train.len() {
            let start = end.saturating_sub(HISTORY_WINDOW);
            out.push(Example {
                history: train[start..end].to_vec(),
                label: train[end],
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct VictimModel {
    pub fusion: FusionWeights<f64>,
    /// Bilinear scoring map `score = stateᵀ · head · item`.
    pub head: Matrix,
}

/// Item representations under one parameter setting.
#[derive(Debug, Clone)]
pub struct ItemTable {
    /// Row `i` is the fused vector of item `i`.
    pub vectors: Matrix,
}

/// Per-epoch mean training loss.
pub type LossTrace = Vec<f64>;

impl VictimModel {
    /// Fusion weights from `rng`; the head starts as `head_scale · I`.
    pub fn init(
        cfg: &FusionConfig,
        lexicon: &Lexicon,
        patch_dim: usize,
        head_scale: f64,
        rng: &SeededRng,
    ) -> Result<Self> {
        let fusion = FusionWeights::init(cfg, lexicon, patch_dim, rng)?;
        let d = cfg.model_dim;
        Ok(Self {
            fusion,
            head: Matrix::identity(d).scaled(head_scale),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            fusion: self.fusion.zeros_like(),
            head: Matrix::zeros(self.head.rows(), self.head.cols()),
        }
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = self.fusion.tensors();
        out.push(&self.head);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.fusion.tensors_mut();
        out.push(&mut self.head);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.is_finite())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|m| m.as_slice().len()).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|m| m.as_slice())
            .map(|v| v * v)
            .sum()
    }

    pub fn encode_item(&self, item: &Item) -> Result<Vector> {
        Ok(self.fusion.forward(&item.text, &item.patches)?.fused)
    }

    pub fn embed_catalog(&self, items: &[Item]) -> Result<ItemTable> {
        let d = self.head.rows();
        let mut vectors = Matrix::zeros(items.len(), d);
        for (i, item) in items.iter().enumerate() {
            vectors
                .row_mut(i)
                .copy_from_slice(self.encode_item(item)?.as_slice());
        }
        Ok(ItemTable { vectors })
    }

    /// Unit-norm recency-weighted mean of the history's item vectors.
    pub fn build_user_state(&self, history: &[ItemId], items: &[Item]) -> Result<Vector> {
        let table = self.embed_catalog(items)?;
        user_state(&table, history).map(|(u, _)| u)
    }

    pub fn scores(&self, table: &ItemTable, history: &[ItemId]) -> Result<Vector> {
        let (u, _) = user_state(table, history)?;
        table.vectors.matvec(&self.head.matvec_t(&u)?)
    }

    /// Mean NLL of the labels under a full softmax over the catalog.
    pub fn nll_loss(&self, batch: &[Example], items: &[Item]) -> Result<f64> {
        let table = self.embed_catalog(items)?;
        let mut total = 0.0;
        check_batch(batch, items.len())?;
        for ex in batch {
            let mut s = self.scores(&table, &ex.history)?.into_vec();
            softmax_in_place(&mut s, 1.0);
            total -= s[ex.label.index()].ln();
        }
        Ok(total / batch.len() as f64)
    }

    /// Analytic gradient of [`VictimModel::nll_loss`].
    pub fn param_gradient(&self, batch: &[Example], items: &[Item]) -> Result<Self> {
        let mut grads = self.zeros_like();
        self.accumulate_gradient(batch, items, None, &mut grads)?;
        Ok(grads)
    }

    /// Adds the batch gradient to `grads` and returns the batch loss. With
    /// `negatives`, example `b` is scored against its label and
    /// `negatives[b]` only.
    fn accumulate_gradient(
        &self,
        batch: &[Example],
        items: &[Item],
        negatives: Option<&[Vec<usize>]>,
        grads: &mut Self,
    ) -> Result<f64> {
        check_batch(batch, items.len())?;
        let d = self.head.rows();
        let traces: Vec<FusionTrace<f64>> = items
            .iter()
            .map(|it| self.fusion.forward(&it.text, &it.patches))
            .collect::<Result<_>>()?;
        let mut table = ItemTable {
            vectors: Matrix::zeros(items.len(), d),
        };
        for (i, t) in traces.iter().enumerate() {
            table.vectors.row_mut(i).copy_from_slice(t.fused.as_slice());
        }
        let inv_b = 1.0 / batch.len() as f64;
        let mut d_items = Matrix::zeros(items.len(), d);
        let mut loss = 0.0;
        for (b, ex) in batch.iter().enumerate() {
            let (u, raw_norm) = user_state(&table, &ex.history)?;
            let q = self.head.matvec_t(&u)?;
            let candidates: Vec<usize> = match negatives {
                None => (0..items.len()).collect(),
                Some(neg) => std::iter::once(ex.label.index())
                    .chain(neg[b].iter().copied())
                    .collect(),
            };
            let mut p: Vec<f64> = candidates
                .iter()
                .map(|&i| crate::numkit::dot(table.vectors.row(i), q.as_slice()))
                .collect();
            softmax_in_place(&mut p, 1.0);
            let label_slot = candidates
                .iter()
                .position(|&i| i == ex.label.index())
                .unwrap_or(0);
            loss -= p[label_slot].ln();
            // ∂L/∂s = p − onehot(label), scaled by 1/B.
            let mut dq = Vector::zeros(d);
            for (slot, &i) in candidates.iter().enumerate() {
                let ds = (p[slot] - if slot == label_slot { 1.0 } else { 0.0 }) * inv_b;
                if ds == 0.0 {
                    continue;
                }
                crate::numkit::axpy(ds, q.as_slice(), d_items.row_mut(i));
                crate::numkit::axpy(ds, table.vectors.row(i), dq.as_mut_slice());
            }
            for a in 0..d {
                crate::numkit::axpy(u[a], dq.as_slice(), grads.head.row_mut(a));
            }
            let du = self.head.matvec(&dq)?;
            let radial = u.dot(&du)?;
            let mut du_raw = du;
            du_raw.axpy(-radial, &u)?;
            let du_raw = du_raw.scaled(1.0 / raw_norm);
            for (item, w) in decay_weights(&ex.history) {
                crate::numkit::axpy(w, du_raw.as_slice(), d_items.row_mut(item.index()));
            }
        }
        for (i, trace) in traces.iter().enumerate() {
            let row = d_items.row_vector(i);
            if row.iter().any(|&v| v != 0.0) {
                self.fusion.backward(trace, &row, &mut grads.fusion)?;
            }
        }
        Ok(loss * inv_b)
    }

    /// Top-`k` items by score, excluding history items; ties go to the lower id.
    pub fn recommend_topk(
        &self,
        history: &[ItemId],
        items: &[Item],
        k: usize,
    ) -> Result<Vec<ItemId>> {
        let table = self.embed_catalog(items)?;
        self.recommend_from_table(&table, history, k)
    }

    pub fn recommend_from_table(
        &self,
        table: &ItemTable,
        history: &[ItemId],
        k: usize,
    ) -> Result<Vec<ItemId>> {
        let scores = self.scores(table, history)?;
        top_k(scores.as_slice(), history, k)
    }

    /// Writes every parameter tensor as `T name rows cols | values`.
    pub fn write_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("#fpl-victim v1\n");
        for (i, m) in self.tensors().iter().enumerate() {
            let _ = write!(out, "T {i} {} {} |", m.rows(), m.cols());
            for v in m.as_slice() {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint into a model of the same architecture as `self`.
    pub fn read_checkpoint(&self, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut model = self.clone();
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "#fpl-victim v1")) => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing checkpoint header".into(),
                })
            }
        }
        let mut tensors = model.tensors_mut().into_iter();
        for (n, line) in lines {
            let bad = |message: &str| Error::Parse {
                line: n + 1,
                message: message.into(),
            };
            let target = tensors
                .next()
                .ok_or_else(|| bad("more tensors than the model has"))?;
            let (head, values) = line.split_once('|').ok_or_else(|| bad("missing '|'"))?;
            let dims: Vec<usize> = head
                .split_whitespace()
                .skip(2)
                .map(|t| t.parse().map_err(|_| bad("bad dimension")))
                .collect::<Result<_>>()?;
            if dims != [target.rows(), target.cols()] {
                return Err(bad("tensor shape differs from the model"));
            }
            let values: Vec<f64> = values
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad("bad float")))
                .collect::<Result<_>>()?;
            *target =
                Matrix::new(dims[0], dims[1], values).map_err(|_| bad("wrong value count"))?;
        }
        if tensors.next().is_some() {
            return Err(Error::Parse {
                line: 0,
                message: "checkpoint is missing tensors".into(),
            });
        }
        Ok(model)
    }
}

fn check_batch(batch: &[Example], item_count: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    for ex in batch {
        if ex.label.index() >= item_count || ex.history.iter().any(|h| h.index() >= item_count) {
            return Err(Error::InvalidArgument(format!(
                "example references an item outside the catalog ({})",
                ex.label
            )));
        }
    }
    Ok(())
}

/// `(item, weight)` with the most recent item at weight 1.
fn decay_weights(history: &[ItemId]) -> impl Iterator<Item = (ItemId, f64)> + '_ {
    let n = history.len();
    history
        .iter()
        .enumerate()
        .map(move |(k, &item)| (item, RECENCY_DECAY.powi((n - 1 - k) as i32)))
}

/// Normalised user state and the norm of the unnormalised sum.
fn user_state(table: &ItemTable, history: &[ItemId]) -> Result<(Vector, f64)> {
    if history.is_empty() {
        return Err(Error::InvalidArgument("empty history".into()));
    }
    let mut raw = Vector::zeros(table.vectors.cols());
    for (item, w) in decay_weights(history) {
        if item.index() >= table.vectors.rows() {
            return Err(Error::InvalidArgument(format!(
                "history item {item} outside the catalog"
            )));
        }
        crate::numkit::axpy(w, table.vectors.row(item.index()), raw.as_mut_slice());
    }
    let norm = raw.norm();
    Ok((raw.l2_normalize()?, norm))
}

/// Highest `k` scores outside `exclude`, descending, ties to the lower index.
pub fn top_k(scores: &[f64], exclude: &[ItemId], k: usize) -> Result<Vec<ItemId>> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    let excluded: BTreeSet<usize> = exclude.iter().map(|i| i.index()).collect();
    let mut candidates: Vec<usize> = (0..scores.len())
        .filter(|i| !excluded.contains(i))
        .collect();
    if k > candidates.len() {
        return Err(Error::InvalidArgument(format!(
            "K={k} exceeds the {} available candidates",
            candidates.len()
        )));
    }
    let order = |a: &usize, b: &usize| {
        scores[*b]
            .partial_cmp(&scores[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    candidates.select_nth_unstable_by(k - 1, order);
    candidates.truncate(k);
    candidates.sort_by(order);
    Ok(candidates.into_iter().map(|i| ItemId(i as u32)).collect())
}

/// Mini-batch gradient descent from `model`. Shuffling is fixed by
/// `cfg.seed`; `epochs = 0` returns the model unchanged.
pub fn train(
    model: &VictimModel,
    d: &Dataset,
    cfg: &TrainConfig,
) -> Result<(VictimModel, LossTrace)> {
    cfg.validate()?;
    let mut model = model.clone();
    let mut trace = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok((model, trace));
    }
    let mut examples = training_examples(d);
    if examples.is_empty() {
        return Err(Error::InvalidArgument(
            "dataset has no train-split transitions".into(),
        ));
    }
    let n_items = d.items.len();
    if cfg.negative_samples >= n_items {
        return Err(Error::Config(format!(
            "negative_samples {} must be below the catalog size {n_items}",
            cfg.negative_samples
        )));
    }
    let rng = SeededRng::new(cfg.seed).child("train");
    for epoch in 0..cfg.epochs {
        let mut epoch_rng = rng.child_indexed("epoch", epoch as u64);
        epoch_rng.shuffle(&mut examples);
        let mut total = 0.0;
        for batch in examples.chunks(cfg.batch_size) {
            let negatives = (cfg.negative_samples > 0).then(|| {
                batch
                    .iter()
                    .map(|ex| {
                        let mut picks = epoch_rng.sample_indices(n_items - 1, cfg.negative_samples);
                        for p in &mut picks {
                            if *p >= ex.label.index() {
                                *p += 1;
                            }
                        }
                        picks
                    })
                    .collect::<Vec<_>>()
            });
            let mut grads = model.zeros_like();
            let loss =
                model.accumulate_gradient(batch, &d.items, negatives.as_deref(), &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            total += loss * batch.len() as f64;
            for (w, g) in model.tensors_mut().into_iter().zip(grads.tensors()) {
                if cfg.weight_decay > 0.0 {
                    *w = w.scaled(1.0 - cfg.learning_rate * cfg.weight_decay);
                }
                w.axpy(-cfg.learning_rate, g)?;
            }
        }
        let mean = total / examples.len() as f64;
        if !mean.is_finite() || !model.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        trace.push(mean);
    }
    Ok((model, trace))
}
