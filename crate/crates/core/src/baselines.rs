//! Attack modes compared in experiments: interaction-only baselines,
//! single-modality content attacks and the cumulative ablation variants.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack_cip::{run_cip, CipConfig, CipTrace, PoisonedContent};
use crate::attack_ea::{compute_centroid, mine_anchors, AnchorSet};
use crate::catalog::{word_enum, Dataset, ItemId, UserId};
use crate::injection::{build_attack_plan, merge_datasets, sessions_from_pools, AttackMode};
use crate::numkit::SeededRng;
use crate::{Error, Proxy, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    NoAttack,
    DirectBoost,
    RandomAttack,
    PopularAttack,
    ImgOnly,
    TxtOnly,
    TabOnly,
    TabImg,
    TabImgTxtIndependent,
    FullCip,
}

word_enum!(BaselineMode {
    NoAttack => "no_attack",
    DirectBoost => "direct_boost",
    RandomAttack => "random_attack",
    PopularAttack => "popular_attack",
    ImgOnly => "img_only",
    TxtOnly => "txt_only",
    TabOnly => "tab_only",
    TabImg => "tab_img",
    TabImgTxtIndependent => "tab_img_txt_independent",
    FullCip => "full_cip",
});

/// Where malicious session histories come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pool {
    /// Every non-target item.
    Uniform,
    /// A fixed random filler set the size of an anchor set.
    Filler,
    /// Globally most-interacted items.
    Popular,
    /// The target's own anchors.
    Anchors,
}

/// CIP steps a mode runs: (visual, textual, interactive).
type ContentSteps = Option<(bool, bool, bool)>;

impl BaselineMode {
    pub const ALL: [BaselineMode; 10] = [
        Self::NoAttack,
        Self::DirectBoost,
        Self::RandomAttack,
        Self::PopularAttack,
        Self::ImgOnly,
        Self::TxtOnly,
        Self::TabOnly,
        Self::TabImg,
        Self::TabImgTxtIndependent,
        Self::FullCip,
    ];

    fn recipe(self) -> Option<(Pool, ContentSteps)> {
        use BaselineMode::*;
        Some(match self {
            NoAttack => return None,
            DirectBoost => (Pool::Uniform, None),
            RandomAttack => (Pool::Filler, None),
            PopularAttack => (Pool::Popular, None),
            ImgOnly => (Pool::Uniform, Some((true, false, true))),
            TxtOnly => (Pool::Uniform, Some((false, true, true))),
            TabOnly => (Pool::Anchors, None),
            TabImg => (Pool::Anchors, Some((true, false, false))),
            TabImgTxtIndependent => (Pool::Anchors, Some((true, true, false))),
            FullCip => (Pool::Anchors, Some((true, true, true))),
        })
    }

    fn attack_mode(self) -> AttackMode {
        match self {
            Self::TabImg => AttackMode::TabImg,
            Self::TabImgTxtIndependent => AttackMode::TabImgTxtIndependent,
            Self::FullCip | Self::ImgOnly | Self::TxtOnly => AttackMode::Full,
            _ => AttackMode::TabOnly,
        }
    }

    pub fn description(self) -> &'static str {
        use BaselineMode::*;
        match self {
            NoAttack => "clean training data",
            DirectBoost => "sessions with uniformly random histories, clean content",
            RandomAttack => "sessions over a fixed random filler set, clean content",
            PopularAttack => "sessions over globally popular items, clean content",
            ImgOnly => "uniform sessions, interactive visual perturbation only",
            TxtOnly => "uniform sessions, interactive token edits only",
            TabOnly => "anchor sessions, clean content",
            TabImg => "anchor sessions, visual perturbation",
            TabImgTxtIndependent => "anchor sessions, visual and token edits with fixed masks",
            FullCip => "anchor sessions, interactive visual and token edits",
        }
    }
}

/// Settings shared by every mode of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackSettings {
    /// Budgets and sizes; the step flags are set per mode.
    pub cip: CipConfig,
    pub anchor_count: usize,
    pub sessions_per_user: usize,
    pub history_len: usize,
}

#[derive(Debug, Clone)]
pub struct PoisonOutcome {
    pub mode: BaselineMode,
    pub dataset: Dataset,
    pub compromised: Vec<UserId>,
    pub session_count: usize,
    pub anchors: BTreeMap<ItemId, AnchorSet>,
    pub overrides: BTreeMap<ItemId, PoisonedContent<f64>>,
    pub traces: BTreeMap<ItemId, CipTrace>,
    pub sampled_with_replacement: bool,
}

impl PoisonOutcome {
    pub fn description(&self) -> &'static str {
        self.mode.description()
    }
}

/// Poisons `d` according to `mode`. Every mode draws compromised users and
/// session randomness from the same child streams of `rng`, so equal seeds
/// give paired runs.
pub fn apply_baseline(
    mode: BaselineMode,
    d: &Dataset,
    targets: &[ItemId],
    rho: f64,
    proxy: &Proxy,
    settings: &AttackSettings,
    rng: &SeededRng,
) -> Result<PoisonOutcome> {
    let Some((pool_kind, steps)) = mode.recipe() else {
        return Ok(PoisonOutcome {
            mode,
            dataset: d.clone(),
            compromised: Vec::new(),
            session_count: 0,
            anchors: BTreeMap::new(),
            overrides: BTreeMap::new(),
            traces: BTreeMap::new(),
            sampled_with_replacement: false,
        });
    };
    let plan = build_attack_plan(
        d,
        targets,
        rho,
        settings.sessions_per_user,
        settings.history_len,
        mode.attack_mode(),
        &rng.child("plan"),
    )?;
    let anchors = targets
        .iter()
        .map(|&t| Ok((t, mine_anchors(d, t, settings.anchor_count)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let non_targets: Vec<ItemId> = d
        .items
        .iter()
        .map(|it| it.id)
        .filter(|id| !targets.contains(id))
        .collect();
    let shared_pool: Vec<ItemId> = match pool_kind {
        Pool::Uniform => non_targets.clone(),
        Pool::Filler => {
            let mut filler_rng = rng.child("filler");
            let n = settings.anchor_count.min(non_targets.len());
            filler_rng
                .sample_indices(non_targets.len(), n)
                .into_iter()
                .map(|i| non_targets[i])
                .collect()
        }
        Pool::Popular => {
            let counts = d.benign_train_counts();
            let mut ranked = non_targets.clone();
            ranked.sort_by(|a, b| counts[b.index()].cmp(&counts[a.index()]).then(a.cmp(b)));
            ranked.truncate(settings.anchor_count);
            ranked
        }
        Pool::Anchors => Vec::new(),
    };
    let pools: BTreeMap<ItemId, Vec<ItemId>> = targets
        .iter()
        .map(|&t| {
            let pool = if pool_kind == Pool::Anchors {
                anchors[&t].anchors.clone()
            } else {
                shared_pool.clone()
            };
            (t, pool)
        })
        .collect();
    if pools.values().any(|p| p.is_empty()) {
        return Err(Error::Degenerate(format!(
            "mode {mode} has an empty history pool"
        )));
    }
    let (sessions, sampled_with_replacement) =
        sessions_from_pools(&plan, &pools, &rng.child("craft"))?;

    let mut overrides = BTreeMap::new();
    let mut traces = BTreeMap::new();
    if let Some((visual, textual, interactive)) = steps {
        for &t in targets {
            let centroid = compute_centroid(proxy, &d.items, &anchors[&t])?;
            let cfg = CipConfig {
                visual,
                textual,
                interactive,
                seed: rng.child_indexed("cip", t.0 as u64).seed(),
                ..settings.cip.clone()
            };
            let item = &d.items[t.index()];
            let (content, trace) = run_cip(proxy, &centroid, &item.text, &item.patches, &cfg)?;
            overrides.insert(t, content);
            traces.insert(t, trace);
        }
    }
    let dataset = merge_datasets(d, &sessions, &overrides)?;
    Ok(PoisonOutcome {
        mode,
        dataset,
        compromised: plan.compromised,
        session_count: sessions.len(),
        anchors,
        overrides,
        traces,
        sampled_with_replacement,
    })
}

impl BaselineMode {
    /// Parses a comma-separated list of mode names.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',').map(|w| Self::from_str(w.trim())).collect()
    }
}
