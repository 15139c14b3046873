//! Exposure alignment: pick high-exposure anchors in the target's category
//! and use their fused centroid as the destination for the target.

use serde::{Deserialize, Serialize};

use crate::catalog::{Dataset, Item, ItemId};
use crate::numkit::{DenseMatrix, DenseVector, Real};
use crate::proxy_encoder::ProxyEncoder;
use crate::{Error, Result};

/// Same-category anchors, most exposed first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub target: ItemId,
    pub anchors: Vec<ItemId>,
    /// Benign train-split interaction count of each anchor.
    pub exposure_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Centroid<T> {
    /// Unit-norm destination.
    pub z_star: DenseVector<T>,
    pub anchors: Vec<ItemId>,
    pub proxy_digest: String,
}

/// Top-`n` items of the target's category by benign train count, excluding
/// the target; ties go to the lower id.
pub fn mine_anchors(d: &Dataset, target: ItemId, n: usize) -> Result<AnchorSet> {
    let category = d
        .item(target)
        .ok_or_else(|| Error::InvalidArgument(format!("target {target} is not in the catalog")))?
        .category;
    if n == 0 {
        return Err(Error::InvalidArgument(
            "anchor count must be at least 1".into(),
        ));
    }
    let counts = d.benign_train_counts();
    let mut pool: Vec<(usize, ItemId)> = d
        .items
        .iter()
        .filter(|it| it.category == category && it.id != target)
        .map(|it| (counts[it.id.index()], it.id))
        .collect();
    if pool.is_empty() {
        return Err(Error::Degenerate(format!(
            "category {category} has no items besides the target"
        )));
    }
    pool.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    pool.truncate(n);
    Ok(AnchorSet {
        target,
        anchors: pool.iter().map(|p| p.1).collect(),
        exposure_counts: pool.iter().map(|p| p.0).collect(),
    })
}

/// `z* = normalize(mean of proxy fused anchor vectors)`.
pub fn compute_centroid<T: Real>(
    enc: &ProxyEncoder<T>,
    items: &[Item],
    anchors: &AnchorSet,
) -> Result<Centroid<T>> {
    if anchors.anchors.is_empty() {
        return Err(Error::InvalidArgument("empty anchor set".into()));
    }
    let fused = anchors
        .anchors
        .iter()
        .map(|&id| {
            let item = items
                .get(id.index())
                .filter(|it| it.id == id)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("anchor {id} is not in the catalog"))
                })?;
            enc.fuse(&item.text, &item.patches.cast())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Centroid {
        z_star: normalized_mean(&fused)?,
        anchors: anchors.anchors.clone(),
        proxy_digest: enc.digest(),
    })
}

/// Unit-norm mean of `vectors`; a mean with norm ≤ 1e-9 is degenerate.
pub fn normalized_mean<T: Real>(vectors: &[DenseVector<T>]) -> Result<DenseVector<T>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::InvalidArgument("no vectors to average".into()))?;
    let mut sum = DenseVector::zeros(first.len());
    for v in vectors {
        sum.axpy(T::one(), v)?;
    }
    let mean = sum.scaled(T::one() / T::lit(vectors.len() as f64));
    if mean.norm() <= T::lit(1e-9) {
        return Err(Error::Degenerate("anchor fused vectors cancel out".into()));
    }
    mean.l2_normalize()
}

/// `1 − cos(φ(text, patches), z*)`, in `[0, 2]`.
pub fn alignment_loss<T: Real>(
    enc: &ProxyEncoder<T>,
    text: &[u32],
    patches: &DenseMatrix<T>,
    c: &Centroid<T>,
) -> Result<T> {
    let fused = enc.fuse(text, patches)?;
    Ok(T::one() - fused.cosine(&c.z_star)?)
}
