//! Evaluation quantities: exposure of the promoted items, ranking utility on
//! held-out interactions, and stealthiness of the poisoned content.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::catalog::{Dataset, ItemId, UserId};
use crate::error::{Error, Result};
use crate::numkit::{psd_sqrt, DenseMatrix, DenseVector, Real};
use crate::proxy_encoder::{ModalityContent, ProxyEncoder};
use crate::victim::VictimModel;

/// Cut-offs reported for every ranking metric.
pub const REPORT_KS: [usize; 3] = [5, 10, 20];

/// Below this norm a modality shift counts as "no change".
const UNPERTURBED_NORM: f64 = 1e-9;

/// Top-`max_k` lists for every benign test user, computed once so that all
/// cut-offs share a single scoring pass.
#[derive(Debug, Clone)]
pub struct RankedUsers {
    max_k: usize,
    /// `(held-out label, ranked recommendations)` per benign user.
    lists: Vec<(ItemId, Vec<ItemId>)>,
}

impl RankedUsers {
    pub fn compute(
        model: &VictimModel,
        d: &Dataset,
        malicious: &[UserId],
        max_k: usize,
    ) -> Result<Self> {
        if max_k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        let skip: BTreeSet<UserId> = malicious.iter().copied().collect();
        let table = model.embed_catalog(&d.items)?;
        let mut lists = Vec::new();
        for (user, history, label) in d.test_cases() {
            if skip.contains(&user) {
                continue;
            }
            lists.push((label, model.recommend_from_table(&table, &history, max_k)?));
        }
        if lists.is_empty() {
            return Err(Error::NoEvaluationUsers);
        }
        Ok(Self { max_k, lists })
    }

    pub fn user_count(&self) -> usize {
        self.lists.len()
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.max_k {
            return Err(Error::InvalidArgument(format!(
                "K = {k} outside 1..={}",
                self.max_k
            )));
        }
        Ok(())
    }

    /// Mean over targets of the fraction of users whose top-`k` holds it.
    pub fn exposure_rate(&self, targets: &[ItemId], k: usize) -> Result<f64> {
        self.check_k(k)?;
        if targets.is_empty() {
            return Err(Error::InvalidArgument("no targets".into()));
        }
        let n = self.lists.len() as f64;
        let total: f64 = targets
            .iter()
            .map(|t| {
                self.lists
                    .iter()
                    .filter(|(_, rec)| rec[..k].contains(t))
                    .count() as f64
                    / n
            })
            .sum();
        Ok(total / targets.len() as f64)
    }

    /// `(HR@k, NDCG@k)` of the held-out labels.
    pub fn ranking(&self, k: usize) -> Result<(f64, f64)> {
        self.check_k(k)?;
        let (mut hits, mut gain) = (0.0, 0.0);
        for (label, rec) in &self.lists {
            if let Some(pos) = rec[..k].iter().position(|i| i == label) {
                hits += 1.0;
                gain += 1.0 / ((pos + 2) as f64).log2();
            }
        }
        let n = self.lists.len() as f64;
        Ok((hits / n, gain / n))
    }
}

/// Fraction of benign test users whose top-`k` contains a target, averaged
/// over targets.
pub fn exposure_rate(
    model: &VictimModel,
    d: &Dataset,
    targets: &[ItemId],
    malicious: &[UserId],
    k: usize,
) -> Result<f64> {
    RankedUsers::compute(model, d, malicious, k)?.exposure_rate(targets, k)
}

/// Leave-last-out `(HR@k, NDCG@k)` over benign test users.
pub fn ranking_metrics(
    model: &VictimModel,
    d: &Dataset,
    malicious: &[UserId],
    k: usize,
) -> Result<(f64, f64)> {
    RankedUsers::compute(model, d, malicious, k)?.ranking(k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RougeVariant {
    Unigram,
    Bigram,
    Lcs,
}

/// ROUGE F1 on token ids, scaled to `[0, 100]`.
pub fn rouge(reference: &[u32], candidate: &[u32], variant: RougeVariant) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InvalidArgument("empty reference".into()));
    }
    let (overlap, ref_len, cand_len) = match variant {
        RougeVariant::Unigram => ngram_overlap(reference, candidate, 1),
        RougeVariant::Bigram => ngram_overlap(reference, candidate, 2),
        RougeVariant::Lcs => (
            lcs_len(reference, candidate),
            reference.len(),
            candidate.len(),
        ),
    };
    if overlap == 0 || ref_len == 0 || cand_len == 0 {
        return Ok(0.0);
    }
    let precision = overlap as f64 / cand_len as f64;
    let recall = overlap as f64 / ref_len as f64;
    Ok(100.0 * 2.0 * precision * recall / (precision + recall))
}

/// Clipped multiset overlap and the n-gram counts of both sides.
fn ngram_overlap(reference: &[u32], candidate: &[u32], n: usize) -> (usize, usize, usize) {
    fn counts(s: &[u32], n: usize) -> BTreeMap<&[u32], usize> {
        let mut map = BTreeMap::new();
        for w in s.windows(n) {
            *map.entry(w).or_default() += 1;
        }
        map
    }
    let (r, c) = (counts(reference, n), counts(candidate, n));
    let overlap = r
        .iter()
        .map(|(g, &n)| n.min(c.get(g).copied().unwrap_or(0)))
        .sum();
    (overlap, r.values().sum(), c.values().sum())
}

fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for &x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Sample mean and unbiased covariance of a set of row vectors.
fn moments<T: Real>(rows: &[DenseVector<T>]) -> Result<(Vec<T>, DenseMatrix<T>)> {
    if rows.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 vectors, got {}",
            rows.len()
        )));
    }
    let dim = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.len(),
        });
    }
    let n = T::lit(rows.len() as f64);
    let mut mean = vec![T::zero(); dim];
    for r in rows {
        for (m, &v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = DenseMatrix::zeros(dim, dim);
    for r in rows {
        for i in 0..dim {
            let di = r.as_slice()[i] - mean[i];
            for j in 0..dim {
                cov[(i, j)] += di * (r.as_slice()[j] - mean[j]);
            }
        }
    }
    Ok((mean, cov.scaled(T::one() / (n - T::one()))))
}

/// Fréchet distance between Gaussian fits of two vector sets.
///
/// The cross term uses `Tr((S1^½ S2 S1^½)^½)`, which equals the trace of
/// `(S1 S2)^½` while staying symmetric.
pub fn frechet_distance<T: Real>(
    clean: &[DenseVector<T>],
    poisoned: &[DenseVector<T>],
) -> Result<T> {
    let (m1, s1) = moments(clean)?;
    let (m2, s2) = moments(poisoned)?;
    if m1.len() != m2.len() {
        return Err(Error::DimensionMismatch {
            expected: m1.len(),
            actual: m2.len(),
        });
    }
    let mean_term = m1
        .iter()
        .zip(&m2)
        .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
    let root1 = psd_sqrt(&s1)?;
    let middle = root1.matmul(&s2)?.matmul(&root1)?;
    // Symmetrise away rounding before the eigen-solve.
    let middle = middle.add(&middle.transpose())?.scaled(T::lit(0.5));
    let cross = psd_sqrt(&middle)?.trace();
    let value = mean_term + s1.trace() + s2.trace() - T::lit(2.0) * cross;
    Ok(value.max(T::zero()))
}

/// Cross-modal consistency of a poisoned item relative to its clean form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coherence {
    /// Change in text/visual embedding cosine.
    pub semantic_dev: f64,
    /// Cosine between the text shift and the visual shift; 0 when unperturbed.
    pub direction_alignment: f64,
    /// Set when either modality did not move.
    pub unperturbed: bool,
}

pub fn coherence_metrics<T: Real>(
    enc: &ProxyEncoder<T>,
    clean: (&[u32], &DenseMatrix<T>),
    poisoned: (&[u32], &DenseMatrix<T>),
) -> Result<Coherence> {
    if clean.0.len() != poisoned.0.len() {
        return Err(Error::DimensionMismatch {
            expected: clean.0.len(),
            actual: poisoned.0.len(),
        });
    }
    if clean.1.shape() != poisoned.1.shape() {
        return Err(Error::InvalidArgument(format!(
            "patch shapes differ: {:?} vs {:?}",
            clean.1.shape(),
            poisoned.1.shape()
        )));
    }
    let text = |t: &[u32]| enc.modality_embed(ModalityContent::Text(t));
    let vis = |p: &DenseMatrix<T>| enc.modality_embed(ModalityContent::Visual(p));
    let (t0, v0) = (text(clean.0)?, vis(clean.1)?);
    let (t1, v1) = (text(poisoned.0)?, vis(poisoned.1)?);
    let semantic_dev = (t1.cosine(&v1)? - t0.cosine(&v0)?).abs().to_f64_lossy();
    let (dt, dv) = (t1.sub(&t0)?, v1.sub(&v0)?);
    let floor = T::lit(UNPERTURBED_NORM);
    if dt.norm() <= floor || dv.norm() <= floor {
        return Ok(Coherence {
            semantic_dev,
            direction_alignment: 0.0,
            unperturbed: true,
        });
    }
    Ok(Coherence {
        semantic_dev,
        direction_alignment: dt.cosine(&dv)?.to_f64_lossy(),
        unperturbed: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
}

impl RougeScores {
    pub fn compute(reference: &[u32], candidate: &[u32]) -> Result<Self> {
        Ok(Self {
            rouge1: rouge(reference, candidate, RougeVariant::Unigram)?,
            rouge2: rouge(reference, candidate, RougeVariant::Bigram)?,
            rouge_l: rouge(reference, candidate, RougeVariant::Lcs)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetStealth {
    pub target: u32,
    pub rouge: RougeScores,
    pub coherence: Coherence,
    /// Largest coordinate of the patch change.
    pub max_patch_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub er: BTreeMap<usize, f64>,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub targets: Vec<TargetStealth>,
    pub frechet: f64,
    /// Largest semantic deviation over targets.
    pub semantic_dev: f64,
    /// Mean direction alignment over perturbed targets; 0 when none moved.
    pub direction_alignment: f64,
    pub evaluated_users: usize,
}

/// Clean and poisoned content of one target, as fed to [`stealth_report`].
pub struct ContentPair<'a, T> {
    pub target: ItemId,
    pub clean_text: &'a [u32],
    pub clean_patches: &'a DenseMatrix<T>,
    pub text: &'a [u32],
    pub patches: &'a DenseMatrix<T>,
}

/// Per-target stealth scores plus the Fréchet distance of patch rows pooled
/// across targets.
pub fn stealth_report<T: Real>(
    enc: &ProxyEncoder<T>,
    pairs: &[ContentPair<'_, T>],
) -> Result<(Vec<TargetStealth>, f64)> {
    let mut out = Vec::with_capacity(pairs.len());
    let (mut clean_rows, mut poisoned_rows) = (Vec::new(), Vec::new());
    for p in pairs {
        let delta = p.patches.sub(p.clean_patches)?;
        out.push(TargetStealth {
            target: p.target.0,
            rouge: RougeScores::compute(p.clean_text, p.text)?,
            coherence: coherence_metrics(
                enc,
                (p.clean_text, p.clean_patches),
                (p.text, p.patches),
            )?,
            max_patch_delta: delta.max_abs().to_f64_lossy(),
        });
        clean_rows.extend((0..p.clean_patches.rows()).map(|r| p.clean_patches.row_vector(r)));
        poisoned_rows.extend((0..p.patches.rows()).map(|r| p.patches.row_vector(r)));
    }
    let frechet = if clean_rows.is_empty() {
        0.0
    } else if delta_free(pairs) {
        // Identical inputs: report an exact zero rather than eigen-solver dust.
        0.0
    } else {
        frechet_distance(&clean_rows, &poisoned_rows)?.to_f64_lossy()
    };
    Ok((out, frechet))
}

fn delta_free<T: Real>(pairs: &[ContentPair<'_, T>]) -> bool {
    pairs.iter().all(|p| p.patches == p.clean_patches)
}

impl MetricsReport {
    pub fn assemble(
        ranked: &RankedUsers,
        targets: &[ItemId],
        stealth: Vec<TargetStealth>,
        frechet: f64,
    ) -> Result<Self> {
        let (mut er, mut hr, mut ndcg) = (BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
        for k in REPORT_KS {
            er.insert(k, ranked.exposure_rate(targets, k)?);
            let (h, n) = ranked.ranking(k)?;
            hr.insert(k, h);
            ndcg.insert(k, n);
        }
        let semantic_dev = stealth
            .iter()
            .map(|s| s.coherence.semantic_dev)
            .fold(0.0, f64::max);
        let moved: Vec<f64> = stealth
            .iter()
            .filter(|s| !s.coherence.unperturbed)
            .map(|s| s.coherence.direction_alignment)
            .collect();
        let direction_alignment = if moved.is_empty() {
            0.0
        } else {
            moved.iter().sum::<f64>() / moved.len() as f64
        };
        Ok(Self {
            er,
            hr,
            ndcg,
            targets: stealth,
            frechet,
            semantic_dev,
            direction_alignment,
            evaluated_users: ranked.user_count(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{generate_catalog, generate_interactions, CatalogConfig, Setting};
    use crate::fusion::FusionConfig;
    use crate::numkit::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn rouge_hand_counts() {
        let (a, b, c, d, x) = (1, 2, 3, 4, 9);
        let r = [a, b, c, d];
        assert_eq!(rouge(&r, &r, RougeVariant::Unigram).unwrap(), 100.0);
        assert_eq!(rouge(&r, &r, RougeVariant::Bigram).unwrap(), 100.0);
        assert_eq!(rouge(&r, &r, RougeVariant::Lcs).unwrap(), 100.0);
        assert_eq!(
            rouge(&r, &[5, 6, 7, 8], RougeVariant::Unigram).unwrap(),
            0.0
        );
        assert_eq!(rouge(&r, &[5, 6, 7, 8], RougeVariant::Lcs).unwrap(), 0.0);
        let cand = [a, b, x, d];
        assert!((rouge(&r, &cand, RougeVariant::Unigram).unwrap() - 75.0).abs() < 1e-12);
        // Bigrams: ab matches, bc / cd do not -> 1/3.
        assert!((rouge(&r, &cand, RougeVariant::Bigram).unwrap() - 100.0 / 3.0).abs() < 1e-12);
        // LCS a,b,d -> 3/4.
        assert!((rouge(&r, &cand, RougeVariant::Lcs).unwrap() - 75.0).abs() < 1e-12);
        assert!(rouge(&[], &cand, RougeVariant::Unigram).is_err());
    }

    #[test]
    fn rouge_clips_repeated_tokens() {
        // Reference has one 7, candidate three: only one counts.
        let v = rouge(&[7, 1, 2], &[7, 7, 7], RougeVariant::Unigram).unwrap();
        assert!((v - 100.0 / 3.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn rouge_f1_is_symmetric(a in prop::collection::vec(0u32..6, 1..10), b in prop::collection::vec(0u32..6, 1..10)) {
            for variant in [RougeVariant::Unigram, RougeVariant::Bigram, RougeVariant::Lcs] {
                let ab = rouge(&a, &b, variant).unwrap();
                let ba = rouge(&b, &a, variant).unwrap();
                prop_assert!((ab - ba).abs() < 1e-9);
                prop_assert!((0.0..=100.0).contains(&ab));
            }
        }
    }

    fn gaussian_rows(
        rng: &mut SeededRng,
        n: usize,
        dim: usize,
        shift: f64,
    ) -> Vec<DenseVector<f64>> {
        (0..n)
            .map(|_| DenseVector::new((0..dim).map(|_| rng.normal() + shift).collect()))
            .collect()
    }

    #[test]
    fn frechet_identity_and_mean_shift() {
        let mut rng = SeededRng::new(3);
        let a = gaussian_rows(&mut rng, 40, 4, 0.0);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
        let u = [0.5, -1.0, 2.0, 0.0];
        let b: Vec<_> = a
            .iter()
            .map(|r| DenseVector::new(r.iter().zip(u).map(|(v, s)| v + s).collect()))
            .collect();
        let expected: f64 = u.iter().map(|s| s * s).sum();
        assert!((frechet_distance(&a, &b).unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn frechet_rejects_bad_inputs() {
        let one = vec![DenseVector::new(vec![1.0, 2.0])];
        let two = vec![
            DenseVector::new(vec![1.0, 2.0]),
            DenseVector::new(vec![0.0, 1.0]),
        ];
        let three = vec![
            DenseVector::new(vec![1.0, 2.0, 3.0]),
            DenseVector::new(vec![0.0, 1.0, 3.0]),
        ];
        assert!(frechet_distance(&one, &two).is_err());
        assert!(matches!(
            frechet_distance(&two, &three),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    /// Closed-form 2x2 oracle: sqrt of a 2x2 PSD matrix `M` is
    /// `(M + sqrt(det M) I) / sqrt(tr M + 2 sqrt(det M))`.
    fn oracle_2d(a: &[DenseVector<f64>], b: &[DenseVector<f64>]) -> f64 {
        let fit = |rows: &[DenseVector<f64>]| {
            let n = rows.len() as f64;
            let mx = rows.iter().map(|r| r.as_slice()[0]).sum::<f64>() / n;
            let my = rows.iter().map(|r| r.as_slice()[1]).sum::<f64>() / n;
            let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
            for r in rows {
                let (dx, dy) = (r.as_slice()[0] - mx, r.as_slice()[1] - my);
                sxx += dx * dx;
                sxy += dx * dy;
                syy += dy * dy;
            }
            (
                (mx, my),
                [
                    [sxx / (n - 1.0), sxy / (n - 1.0)],
                    [sxy / (n - 1.0), syy / (n - 1.0)],
                ],
            )
        };
        let (ma, sa) = fit(a);
        let (mb, sb) = fit(b);
        // Product S_a S_b (not symmetric); its square root trace is
        // sqrt(tr + 2 sqrt(det)) since both eigenvalues are nonnegative.
        let p = [
            [
                sa[0][0] * sb[0][0] + sa[0][1] * sb[1][0],
                sa[0][0] * sb[0][1] + sa[0][1] * sb[1][1],
            ],
            [
                sa[1][0] * sb[0][0] + sa[1][1] * sb[1][0],
                sa[1][0] * sb[0][1] + sa[1][1] * sb[1][1],
            ],
        ];
        let det = p[0][0] * p[1][1] - p[0][1] * p[1][0];
        let tr_sqrt = (p[0][0] + p[1][1] + 2.0 * det.max(0.0).sqrt()).sqrt();
        (ma.0 - mb.0).powi(2) + (ma.1 - mb.1).powi(2) + sa[0][0] + sa[1][1] + sb[0][0] + sb[1][1]
            - 2.0 * tr_sqrt
    }

    #[test]
    fn frechet_matches_closed_form_in_two_dimensions() {
        let mut rng = SeededRng::new(11);
        for case in 0..20 {
            let a = gaussian_rows(&mut rng, 30, 2, 0.0);
            let mixed: Vec<_> = gaussian_rows(&mut rng, 25, 2, 0.3 * case as f64)
                .into_iter()
                .map(|r| {
                    let s = r.as_slice();
                    DenseVector::new(vec![2.0 * s[0], 0.5 * s[0] + s[1]])
                })
                .collect();
            let got = frechet_distance(&a, &mixed).unwrap();
            let want = oracle_2d(&a, &mixed);
            assert!((got - want).abs() < 1e-6, "case {case}: {got} vs {want}");
            assert!(got >= 0.0);
        }
    }

    fn proxy() -> (ProxyEncoder<f64>, Vec<u32>, DenseMatrix<f64>) {
        let cfg = CatalogConfig::default();
        let cat = generate_catalog(&cfg).unwrap();
        let enc =
            ProxyEncoder::from_seed(FusionConfig::default(), &cat.lexicon(), cfg.patch_dim, 5)
                .unwrap();
        let item = &cat.items[0];
        (enc, item.text.clone(), item.patches.clone())
    }

    #[test]
    fn coherence_flags_unperturbed_content() {
        let (enc, text, patches) = proxy();
        let same = coherence_metrics(&enc, (&text, &patches), (&text, &patches)).unwrap();
        assert_eq!(same.semantic_dev, 0.0);
        assert!(same.unperturbed);
        assert_eq!(same.direction_alignment, 0.0);

        let mut edited = text.clone();
        edited[0] = (edited[0] + 1) % 512;
        let text_only = coherence_metrics(&enc, (&text, &patches), (&edited, &patches)).unwrap();
        assert!(text_only.unperturbed);
        assert!(text_only.semantic_dev >= 0.0);
    }

    #[test]
    fn common_direction_yields_positive_alignment() {
        let (enc, text, patches) = proxy();
        // Find a token swap, then push every patch row along the projection
        // preimage of the resulting text shift.
        let t0 = enc.modality_embed(ModalityContent::Text(&text)).unwrap();
        let mut edited = text.clone();
        edited[1] = enc.nearest_tokens(text[1], 1)[0];
        let dt = enc
            .modality_embed(ModalityContent::Text(&edited))
            .unwrap()
            .sub(&t0)
            .unwrap();
        let proj = &enc.weights().patch_projection;
        let push = proj.matvec(&dt).unwrap();
        let mut moved = patches.clone();
        for r in 0..moved.rows() {
            for (v, p) in moved.row_mut(r).iter_mut().zip(push.iter()) {
                *v += 0.5 * p;
            }
        }
        let c = coherence_metrics(&enc, (&text, &patches), (&edited, &moved)).unwrap();
        assert!(!c.unperturbed);
        assert!(c.direction_alignment > 0.0, "{c:?}");
    }

    #[test]
    fn coherence_rejects_shape_mismatch() {
        let (enc, text, patches) = proxy();
        assert!(coherence_metrics(&enc, (&text, &patches), (&text[..3], &patches)).is_err());
    }

    fn small_world() -> (Dataset, VictimModel) {
        let cfg = CatalogConfig {
            item_count: 40,
            user_count: 60,
            ..CatalogConfig::default()
        };
        let cat = generate_catalog(&cfg).unwrap();
        let d = generate_interactions(&cfg, &cat, Setting::ZeroShot, &[ItemId(0)].into()).unwrap();
        let model = VictimModel::init(
            &FusionConfig::default(),
            &cat.lexicon(),
            cfg.patch_dim,
            1.0,
            &SeededRng::new(4),
        )
        .unwrap();
        (d, model)
    }

    #[test]
    fn metrics_match_brute_force_sorting() {
        let (d, model) = small_world();
        let malicious = [UserId(0), UserId(7)];
        let ranked = RankedUsers::compute(&model, &d, &malicious, 20).unwrap();
        let table = model.embed_catalog(&d.items).unwrap();
        let targets = [ItemId(0), ItemId(5)];
        for k in REPORT_KS {
            let (mut hits, mut gain, mut exposed, mut n) = (0.0, 0.0, [0.0; 2], 0.0);
            for (u, history, label) in d.test_cases() {
                if malicious.contains(&u) {
                    continue;
                }
                let scores = model.scores(&table, &history).unwrap();
                let mut order: Vec<usize> = (0..scores.len())
                    .filter(|i| !history.contains(&ItemId(*i as u32)))
                    .collect();
                order.sort_by(|&a, &b| {
                    scores.as_slice()[b]
                        .total_cmp(&scores.as_slice()[a])
                        .then(a.cmp(&b))
                });
                let top: Vec<ItemId> = order[..k].iter().map(|&i| ItemId(i as u32)).collect();
                if let Some(p) = top.iter().position(|&i| i == label) {
                    hits += 1.0;
                    gain += 1.0 / ((p + 2) as f64).log2();
                }
                for (e, t) in exposed.iter_mut().zip(&targets) {
                    *e += f64::from(u8::from(top.contains(t)));
                }
                n += 1.0;
            }
            let (hr, ndcg) = ranked.ranking(k).unwrap();
            assert_eq!(hr, hits / n);
            assert_eq!(ndcg, gain / n);
            assert_eq!(
                ranked.exposure_rate(&targets, k).unwrap(),
                (exposed[0] / n + exposed[1] / n) / 2.0
            );
            assert!(ndcg <= 1.0);
        }
        let (hr1, ndcg1) = ranked.ranking(1).unwrap();
        assert!(ndcg1 <= hr1);
        assert_eq!(ranked.user_count(), d.test_cases().len() - 2);
    }

    #[test]
    fn exposure_rate_averages_over_targets() {
        let ranked = RankedUsers {
            max_k: 2,
            lists: vec![
                (ItemId(9), vec![ItemId(1), ItemId(2)]),
                (ItemId(9), vec![ItemId(1), ItemId(3)]),
                (ItemId(9), vec![ItemId(4), ItemId(5)]),
            ],
        };
        assert!((ranked.exposure_rate(&[ItemId(1)], 2).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((ranked.exposure_rate(&[ItemId(1), ItemId(2)], 2).unwrap() - 0.5).abs() < 1e-12);
        assert!(ranked.exposure_rate(&[ItemId(1)], 3).is_err());
    }

    #[test]
    fn ndcg_contributions() {
        let ranked = |pos: usize| RankedUsers {
            max_k: 5,
            lists: vec![(
                ItemId(0),
                (0..5)
                    .map(|i| ItemId(if i == pos { 0 } else { i as u32 + 10 }))
                    .collect(),
            )],
        };
        assert_eq!(ranked(0).ranking(5).unwrap(), (1.0, 1.0));
        assert_eq!(ranked(2).ranking(5).unwrap(), (1.0, 0.5));
        assert_eq!(ranked(2).ranking(2).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn no_benign_users_is_an_error() {
        let (d, model) = small_world();
        let everyone: Vec<UserId> = d.test_cases().iter().map(|c| c.0).collect();
        assert!(matches!(
            RankedUsers::compute(&model, &d, &everyone, 5),
            Err(Error::NoEvaluationUsers)
        ));
    }
}
