use std::collections::BTreeSet;

use super::{
    CatalogConfig, Dataset, Interaction, Item, ItemId, Lexicon, Provenance, Setting, Split,
    TokenGroup, UserId,
};
use crate::numkit::SeededRng;
use crate::{Error, Matrix, Result};

/// Spread of the per-category base style.
const STYLE_SCALE: f64 = 2.0;
/// Strength of the shared "hot" visual direction, from least to most popular.
const HOT_VISUAL: f64 = 1.0;
/// Strength of the taste factors in the patches.
const TASTE_VISUAL: f64 = 0.2;
/// How sharply user taste tilts item choice.
const TASTE_STRENGTH: f64 = 0.7;
const ITEM_NOISE: f64 = 0.4;
const PATCH_NOISE: f64 = 0.4;
/// Patch rows are scaled by a salience in `[1 - SALIENCE_SPREAD, 1]`.
const SALIENCE_SPREAD: f64 = 0.6;
/// Inverse temperature of the hot-token preference in text sampling.
const HOT_TEXT: f64 = 8.0;
/// Number of latent taste factors shared by items and users.
const TASTE_FACTORS: usize = 3;
const CATEGORY_TOKEN_WEIGHT: f64 = 3.0;
/// Probability that a user's next item comes from their preferred category.
const CATEGORY_AFFINITY: f64 = 0.75;

/// Generated items plus the latent popularity that drives the interaction log.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub config: CatalogConfig,
    pub items: Vec<Item>,
    /// Global popularity rank per item, 0 = most popular.
    pub popularity_rank: Vec<usize>,
    /// Latent visual appeal in `[0, 1]`, expressed along the hot direction.
    pub visual_appeal: Vec<f64>,
    /// Latent textual appeal in `[0, 1]`, expressed through hot tokens.
    pub text_appeal: Vec<f64>,
    /// Latent taste factors per item, expressed in the patches.
    pub factors: Vec<Vec<f64>>,
}

impl Catalog {
    pub fn lexicon(&self) -> Lexicon {
        Lexicon::new(self.config.vocab_size, self.config.category_count)
    }

    /// Zipf weight of every item.
    pub fn popularity_weights(&self) -> Vec<f64> {
        self.popularity_rank
            .iter()
            .map(|&r| ((r + 1) as f64).powf(-self.config.popularity_skew))
            .collect()
    }

    /// The `count` least popular items of `category`, least popular first.
    pub fn least_popular(&self, category: u32, count: usize) -> Vec<ItemId> {
        let mut pool: Vec<&Item> = self
            .items
            .iter()
            .filter(|it| it.category == category)
            .collect();
        pool.sort_by_key(|it| std::cmp::Reverse(self.popularity_rank[it.id.index()]));
        pool.into_iter().take(count).map(|it| it.id).collect()
    }
}

pub fn generate_catalog(cfg: &CatalogConfig) -> Result<Catalog> {
    cfg.validate()?;
    let root = SeededRng::new(cfg.seed);
    let lexicon = Lexicon::new(cfg.vocab_size, cfg.category_count);
    let n = cfg.item_count;

    let mut appeal_rng = root.child("appeal");
    let visual_appeal: Vec<f64> = (0..n).map(|_| appeal_rng.uniform()).collect();
    let text_appeal: Vec<f64> = (0..n).map(|_| appeal_rng.uniform()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (
            visual_appeal[a] + text_appeal[a],
            visual_appeal[b] + text_appeal[b],
        );
        sb.partial_cmp(&sa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut popularity_rank = vec![0; n];
    for (rank, &item) in order.iter().enumerate() {
        popularity_rank[item] = rank;
    }
    let category_of = |i: usize| (i % cfg.category_count) as u32;

    let mut style_rng = root.child("styles");
    let styles: Vec<Vec<f64>> = (0..cfg.category_count)
        .map(|_| {
            (0..cfg.patch_dim)
                .map(|_| STYLE_SCALE * style_rng.normal())
                .collect()
        })
        .collect();
    let hot = unit_direction(&mut root.child("hot-direction"), cfg.patch_dim);
    let mut factor_rng = root.child("factors");
    let factor_dirs: Vec<Vec<f64>> = (0..TASTE_FACTORS)
        .map(|_| unit_direction(&mut factor_rng, cfg.patch_dim))
        .collect();
    let factors: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..TASTE_FACTORS).map(|_| factor_rng.normal()).collect())
        .collect();
    let hot_scale = (cfg.patch_dim as f64).sqrt();

    let pools: Vec<Vec<u32>> = (0..cfg.category_count as u32)
        .map(|c| lexicon.item_pool(c))
        .collect();

    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let category = category_of(i);
        let mut rng = root.child_indexed("item", i as u64);

        let pool = &pools[category as usize];
        let weights: Vec<f64> = pool
            .iter()
            .map(|&t| {
                let base = match lexicon.group(t) {
                    TokenGroup::Category(_) => CATEGORY_TOKEN_WEIGHT,
                    TokenGroup::Generic => 1.0,
                };
                base * (HOT_TEXT * 2.0 * (text_appeal[i] - 0.5) * (lexicon.hotness(t) - 0.5)).exp()
            })
            .collect();
        let text = weighted_sample_without_replacement(&mut rng, pool, weights, cfg.text_len);

        let item_offset: Vec<f64> = (0..cfg.patch_dim)
            .map(|_| ITEM_NOISE * rng.normal())
            .collect();
        let signal: Vec<f64> = (0..cfg.patch_dim)
            .map(|j| {
                let taste: f64 = factors[i]
                    .iter()
                    .zip(&factor_dirs)
                    .map(|(f, dir)| f * dir[j])
                    .sum();
                styles[category as usize][j]
                    + hot_scale
                        * (HOT_VISUAL * (visual_appeal[i] - 0.5) * hot[j] + TASTE_VISUAL * taste)
            })
            .collect();
        let mut patches = Matrix::zeros(cfg.patch_count, cfg.patch_dim);
        for p in 0..cfg.patch_count {
            let salience = 1.0 - SALIENCE_SPREAD * rng.uniform();
            for j in 0..cfg.patch_dim {
                patches[(p, j)] =
                    salience * signal[j] + item_offset[j] + PATCH_NOISE * rng.normal();
            }
        }
        items.push(Item {
            id: ItemId(i as u32),
            category,
            text,
            patches,
        });
    }

    Ok(Catalog {
        config: cfg.clone(),
        items,
        popularity_rank,
        visual_appeal,
        text_appeal,
        factors,
    })
}

/// Draws user histories with Zipf-skewed popularity, a per-user preferred
/// category and a per-user taste over the item factors, then assigns
/// leave-last-out splits.
pub fn generate_interactions(
    cfg: &CatalogConfig,
    catalog: &Catalog,
    setting: Setting,
    targets: &BTreeSet<ItemId>,
) -> Result<Dataset> {
    cfg.validate()?;
    if targets.is_empty() {
        return Err(Error::InvalidArgument("target set is empty".into()));
    }
    if let Some(t) = targets.iter().find(|t| t.index() >= catalog.items.len()) {
        return Err(Error::InvalidArgument(format!(
            "target {t} is not in the catalog"
        )));
    }
    let open_items = catalog.items.len() - targets.len();
    if cfg.history_min < 3 || cfg.history_min > cfg.history_max || cfg.history_max > open_items {
        return Err(Error::Config(format!(
            "history length range {}..={} is infeasible for {open_items} non-target items \
             (need 3 <= min <= max <= items)",
            cfg.history_min, cfg.history_max
        )));
    }
    if setting == Setting::FewShot && cfg.few_shot_count > cfg.user_count {
        return Err(Error::Config(format!(
            "few_shot_count {} exceeds user_count {}",
            cfg.few_shot_count, cfg.user_count
        )));
    }

    let root = SeededRng::new(cfg.seed).child("interactions");
    let weights = catalog.popularity_weights();
    let mut histories: Vec<Vec<ItemId>> = Vec::with_capacity(cfg.user_count);
    for u in 0..cfg.user_count {
        let mut rng = root.child_indexed("user", u as u64);
        let preferred = rng.below(cfg.category_count) as u32;
        let taste: Vec<f64> = (0..TASTE_FACTORS).map(|_| rng.normal()).collect();
        let tilted: Vec<f64> = weights
            .iter()
            .zip(&catalog.factors)
            .map(|(w, f)| {
                w * (TASTE_STRENGTH * f.iter().zip(&taste).map(|(a, b)| a * b).sum::<f64>()).exp()
            })
            .collect();
        let len = cfg.history_min + rng.below(cfg.history_max - cfg.history_min + 1);
        let mut taken = vec![false; catalog.items.len()];
        for t in targets {
            taken[t.index()] = true;
        }
        let mut history = Vec::with_capacity(len);
        while history.len() < len {
            let in_category = rng.uniform() < CATEGORY_AFFINITY;
            let draw = |only_preferred: bool| -> Vec<f64> {
                catalog
                    .items
                    .iter()
                    .map(|it| {
                        let allowed =
                            !taken[it.id.index()] && (!only_preferred || it.category == preferred);
                        if allowed {
                            tilted[it.id.index()]
                        } else {
                            0.0
                        }
                    })
                    .collect()
            };
            let pick = rng
                .weighted_index(&draw(in_category))
                .or_else(|| rng.weighted_index(&draw(false)))
                .expect("history_max <= open items leaves a candidate");
            taken[pick] = true;
            history.push(ItemId(pick as u32));
        }
        histories.push(history);
    }

    if setting == Setting::FewShot {
        let mut rng = root.child("few-shot");
        for &target in targets {
            let mut placed = 0;
            let mut users: Vec<usize> = (0..cfg.user_count).collect();
            rng.shuffle(&mut users);
            for u in users {
                if placed == cfg.few_shot_count {
                    break;
                }
                let h = &mut histories[u];
                if h.contains(&target) {
                    continue;
                }
                // Only train positions; the replaced slot must not hold another target.
                let slots: Vec<usize> = (0..h.len() - 2)
                    .filter(|&k| !targets.contains(&h[k]))
                    .collect();
                if slots.is_empty() {
                    continue;
                }
                let k = slots[rng.below(slots.len())];
                h[k] = target;
                placed += 1;
            }
            if placed < cfg.few_shot_count {
                return Err(Error::Config(format!(
                    "could only place target {target} in {placed} histories"
                )));
            }
        }
    }

    let mut interactions = Vec::new();
    for (u, history) in histories.iter().enumerate() {
        let n = history.len();
        for (k, &item) in history.iter().enumerate() {
            let split = if k + 1 == n {
                Split::Test
            } else if k + 2 == n {
                Split::Validation
            } else {
                Split::Train
            };
            interactions.push(Interaction {
                user: UserId(u as u32),
                item,
                position: k as u32,
                provenance: Provenance::Benign,
                split,
            });
        }
    }

    Ok(Dataset {
        config: cfg.clone(),
        items: catalog.items.clone(),
        users: (0..cfg.user_count as u32).map(UserId).collect(),
        interactions,
    })
}

fn unit_direction(rng: &mut SeededRng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / norm).collect()
}

fn weighted_sample_without_replacement(
    rng: &mut SeededRng,
    pool: &[u32],
    mut weights: Vec<f64>,
    count: usize,
) -> Vec<u32> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let k = rng
            .weighted_index(&weights)
            .expect("pool larger than text_len");
        out.push(pool[k]);
        weights[k] = 0.0;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::DenseVector;

    fn small() -> CatalogConfig {
        CatalogConfig {
            item_count: 40,
            user_count: 120,
            seed: 5,
            ..CatalogConfig::default()
        }
    }

    #[test]
    fn catalog_shape_and_categories() {
        let cfg = CatalogConfig {
            item_count: 10,
            category_count: 2,
            ..small()
        };
        let cat = generate_catalog(&cfg).unwrap();
        assert_eq!(cat.items.len(), 10);
        for c in 0..2 {
            assert!(cat.items.iter().any(|it| it.category == c));
        }
        for it in &cat.items {
            assert_eq!(it.text.len(), cfg.text_len);
            let distinct: BTreeSet<_> = it.text.iter().collect();
            assert_eq!(distinct.len(), cfg.text_len);
            assert_eq!(it.patches.shape(), (cfg.patch_count, cfg.patch_dim));
        }
    }

    #[test]
    fn catalog_is_deterministic() {
        let a = generate_catalog(&small()).unwrap();
        let b = generate_catalog(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_catalog(&CatalogConfig { seed: 6, ..small() }).unwrap();
        assert_ne!(a.items, c.items);
    }

    #[test]
    fn within_category_patches_are_more_similar() {
        let cat = generate_catalog(&CatalogConfig::default()).unwrap();
        let means: Vec<DenseVector<f64>> = cat
            .items
            .iter()
            .map(|it| it.patches.column_means())
            .collect();
        let (mut within, mut nw, mut across, mut na) = (0.0, 0, 0.0, 0);
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                let c = means[i].cosine(&means[j]).unwrap();
                if cat.items[i].category == cat.items[j].category {
                    within += c;
                    nw += 1;
                } else {
                    across += c;
                    na += 1;
                }
            }
        }
        assert!(within / nw as f64 > across / na as f64);
    }

    #[test]
    fn small_vocabulary_is_rejected() {
        let cfg = CatalogConfig {
            vocab_size: 20,
            ..small()
        };
        assert!(matches!(generate_catalog(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn zero_shot_excludes_targets() {
        let cfg = small();
        let cat = generate_catalog(&cfg).unwrap();
        let targets: BTreeSet<ItemId> = cat.least_popular(0, 2).into_iter().collect();
        let d = generate_interactions(&cfg, &cat, Setting::ZeroShot, &targets).unwrap();
        assert_eq!(
            d.interactions
                .iter()
                .filter(|x| targets.contains(&x.item))
                .count(),
            0
        );
        d.validate().unwrap();
    }

    #[test]
    fn few_shot_places_each_target_exactly() {
        let cfg = small();
        let cat = generate_catalog(&cfg).unwrap();
        let targets: BTreeSet<ItemId> = cat.least_popular(1, 1).into_iter().collect();
        let d = generate_interactions(&cfg, &cat, Setting::FewShot, &targets).unwrap();
        let t = *targets.iter().next().unwrap();
        let hits: Vec<_> = d.interactions.iter().filter(|x| x.item == t).collect();
        assert_eq!(hits.len(), 5);
        assert!(hits
            .iter()
            .all(|x| x.split == Split::Train && x.provenance == Provenance::Benign));
        d.validate().unwrap();
    }

    #[test]
    fn interaction_errors() {
        let cfg = small();
        let cat = generate_catalog(&cfg).unwrap();
        let none = BTreeSet::new();
        assert!(generate_interactions(&cfg, &cat, Setting::ZeroShot, &none).is_err());
        let one: BTreeSet<ItemId> = [ItemId(0)].into();
        let bad = CatalogConfig {
            history_min: 9,
            history_max: 4,
            ..cfg.clone()
        };
        assert!(matches!(
            generate_interactions(&bad, &cat, Setting::ZeroShot, &one),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn splits_cover_every_user_once() {
        let cfg = small();
        let cat = generate_catalog(&cfg).unwrap();
        let d = generate_interactions(&cfg, &cat, Setting::ZeroShot, &[ItemId(3)].into()).unwrap();
        for split in [Split::Test, Split::Validation] {
            let users: Vec<_> = d
                .interactions
                .iter()
                .filter(|x| x.split == split)
                .map(|x| x.user)
                .collect();
            let distinct: BTreeSet<_> = users.iter().collect();
            assert_eq!(users.len(), cfg.user_count);
            assert_eq!(distinct.len(), cfg.user_count);
        }
    }

    #[test]
    fn item_frequency_follows_popularity_rank() {
        let cfg = CatalogConfig::default();
        let cat = generate_catalog(&cfg).unwrap();
        let d = generate_interactions(&cfg, &cat, Setting::ZeroShot, &[ItemId(0)].into()).unwrap();
        let mut counts = vec![0usize; cfg.item_count];
        for x in &d.interactions {
            counts[x.item.index()] += 1;
        }
        let mut by_rank = vec![0usize; cfg.item_count];
        for (i, &c) in counts.iter().enumerate() {
            by_rank[cat.popularity_rank[i]] = c;
        }
        // Histogram over popularity-rank bins of 20 items. User taste adds
        // local bumps, so only the overall trend is asserted.
        let bins: Vec<usize> = by_rank.chunks(20).map(|c| c.iter().sum()).collect();
        assert_eq!(bins.iter().max(), Some(&bins[0]), "{bins:?}");
        let discordant = (0..bins.len())
            .flat_map(|i| (i + 1..bins.len()).map(move |j| (i, j)))
            .filter(|&(i, j)| bins[i] < bins[j])
            .count();
        assert!(discordant <= 2, "{bins:?}");
        let half = bins.len() / 2;
        assert!(
            bins[..half].iter().sum::<usize>() > 2 * bins[half..].iter().sum::<usize>(),
            "{bins:?}"
        );
    }
}
