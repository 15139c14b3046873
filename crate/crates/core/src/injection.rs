//! Builds the malicious side of a poisoned dataset: compromised users,
//! sessions co-locating anchors with targets, and target content overrides.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::attack_cip::PoisonedContent;
use crate::attack_ea::AnchorSet;
use crate::catalog::{Dataset, Interaction, ItemId, Provenance, Split, UserId};
use crate::numkit::SeededRng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Full,
    TabOnly,
    TabImg,
    TabImgTxtIndependent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackPlan {
    pub targets: Vec<ItemId>,
    pub rho: f64,
    /// `⌊ρ·|U|⌋` users, in sampling order.
    pub compromised: Vec<UserId>,
    pub sessions_per_user: usize,
    /// Items per malicious history.
    pub history_len: usize,
    pub mode: AttackMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaliciousSession {
    pub user: UserId,
    pub history: Vec<ItemId>,
    pub label: ItemId,
}

/// Sessions plus the content that replaces each target's catalog entry.
#[derive(Debug, Clone, PartialEq)]
pub struct CraftedAttack {
    pub sessions: Vec<MaliciousSession>,
    pub overrides: BTreeMap<ItemId, PoisonedContent<f64>>,
    /// Some pool was smaller than `history_len`, so histories repeat items.
    pub sampled_with_replacement: bool,
}

/// Compromises the first `⌊ρ·|U|⌋` users of a seeded permutation, so larger
/// budgets extend smaller ones under the same seed.
pub fn build_attack_plan(
    d: &Dataset,
    targets: &[ItemId],
    rho: f64,
    sessions_per_user: usize,
    history_len: usize,
    mode: AttackMode,
    rng: &SeededRng,
) -> Result<AttackPlan> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "rho must lie in (0, 1), got {rho}"
        )));
    }
    if targets.is_empty() {
        return Err(Error::InvalidArgument("no targets".into()));
    }
    if let Some(t) = targets.iter().find(|t| !d.contains_item(**t)) {
        return Err(Error::InvalidArgument(format!(
            "target {t} is not in the catalog"
        )));
    }
    if history_len == 0 {
        return Err(Error::InvalidArgument(
            "malicious history length must be at least 1".into(),
        ));
    }
    let budget = (rho * d.users.len() as f64).floor() as usize;
    if budget == 0 {
        return Err(Error::BudgetTooSmall {
            rho,
            users: d.users.len(),
        });
    }
    let mut users = d.users.clone();
    rng.child("compromised").shuffle(&mut users);
    users.truncate(budget);
    Ok(AttackPlan {
        targets: targets.to_vec(),
        rho,
        compromised: users,
        sessions_per_user,
        history_len,
        mode,
    })
}

/// Sessions whose histories come from the label target's anchor set.
pub fn craft_sessions(
    plan: &AttackPlan,
    anchors: &BTreeMap<ItemId, AnchorSet>,
    poisoned: &BTreeMap<ItemId, PoisonedContent<f64>>,
    rng: &SeededRng,
) -> Result<CraftedAttack> {
    let pools = plan
        .targets
        .iter()
        .map(|t| {
            anchors
                .get(t)
                .map(|a| (*t, a.anchors.clone()))
                .ok_or_else(|| Error::InvalidArgument(format!("no anchors for target {t}")))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let overrides = if plan.mode == AttackMode::TabOnly {
        BTreeMap::new()
    } else {
        for t in &plan.targets {
            if !poisoned.contains_key(t) {
                return Err(Error::InvalidArgument(format!(
                    "no poisoned content for target {t}"
                )));
            }
        }
        poisoned.clone()
    };
    let (sessions, sampled_with_replacement) = sessions_from_pools(plan, &pools, rng)?;
    Ok(CraftedAttack {
        sessions,
        overrides,
        sampled_with_replacement,
    })
}

/// Sessions for every compromised user, labels round-robin over the targets
/// and histories drawn from the label's pool, without replacement when the
/// pool is large enough.
pub fn sessions_from_pools(
    plan: &AttackPlan,
    pools: &BTreeMap<ItemId, Vec<ItemId>>,
    rng: &SeededRng,
) -> Result<(Vec<MaliciousSession>, bool)> {
    let mut rng = rng.child("sessions");
    let mut sessions = Vec::with_capacity(plan.compromised.len() * plan.sessions_per_user);
    let mut with_replacement = false;
    for &user in &plan.compromised {
        for _ in 0..plan.sessions_per_user {
            let label = plan.targets[sessions.len() % plan.targets.len()];
            let pool = pools.get(&label).filter(|p| !p.is_empty()).ok_or_else(|| {
                Error::InvalidArgument(format!("empty history pool for target {label}"))
            })?;
            let history = if pool.len() >= plan.history_len {
                rng.sample_indices(pool.len(), plan.history_len)
                    .into_iter()
                    .map(|i| pool[i])
                    .collect()
            } else {
                with_replacement = true;
                (0..plan.history_len)
                    .map(|_| pool[rng.below(pool.len())])
                    .collect()
            };
            sessions.push(MaliciousSession {
                user,
                history,
                label,
            });
        }
    }
    Ok((sessions, with_replacement))
}

/// Appends each session after the user's last interaction as malicious
/// train-split interactions and applies content overrides.
pub fn merge_datasets(
    benign: &Dataset,
    sessions: &[MaliciousSession],
    overrides: &BTreeMap<ItemId, PoisonedContent<f64>>,
) -> Result<Dataset> {
    if benign
        .interactions
        .iter()
        .any(|x| x.provenance == Provenance::Malicious)
    {
        return Err(Error::InvalidArgument(
            "benign dataset already holds malicious interactions".into(),
        ));
    }
    let mut merged = benign.clone();
    for (id, content) in overrides {
        let item = merged
            .items
            .get_mut(id.index())
            .filter(|it| it.id == *id)
            .ok_or_else(|| Error::InvalidArgument(format!("override for unknown item {id}")))?;
        if content.text.len() != item.text.len() || content.patches.shape() != item.patches.shape()
        {
            return Err(Error::InvalidArgument(format!(
                "override for item {id} changes the content shape"
            )));
        }
        item.text = content.text.clone();
        item.patches = content.patches.clone();
    }
    let known: BTreeSet<UserId> = benign.users.iter().copied().collect();
    let mut next: BTreeMap<UserId, u32> = BTreeMap::new();
    for x in &benign.interactions {
        let slot = next.entry(x.user).or_insert(0);
        *slot = (*slot).max(x.position + 1);
    }
    for s in sessions {
        if !known.contains(&s.user) {
            return Err(Error::InvalidArgument(format!(
                "session for unknown user {}",
                s.user
            )));
        }
        let pos = next.entry(s.user).or_insert(0);
        for &item in s.history.iter().chain(std::iter::once(&s.label)) {
            if !benign.contains_item(item) {
                return Err(Error::InvalidArgument(format!(
                    "session references unknown item {item}"
                )));
            }
            merged.interactions.push(Interaction {
                user: s.user,
                item,
                position: *pos,
                provenance: Provenance::Malicious,
                split: Split::Train,
            });
            *pos += 1;
        }
    }
    Ok(merged)
}
