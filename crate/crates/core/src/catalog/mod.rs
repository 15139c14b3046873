//! Synthetic multimodal catalogs and user interaction logs.
//!
//! Items carry a token sequence and a matrix of patch features. Each category
//! has a visual style and its own slice of the vocabulary; popular items lean
//! on "hot" tokens and a shared hot visual direction, so popularity is
//! partly readable from content. Interaction logs are Zipf-skewed and split
//! leave-last-out.

mod generate;
mod io;
mod lexicon;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Matrix, Result};

pub use generate::{generate_catalog, generate_interactions, Catalog};
pub use io::{read_dataset, write_dataset, SCHEMA_VERSION};
pub use lexicon::{Lexicon, TokenGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u32);

impl ItemId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl UserId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// One catalog entry: a token sequence and `patch_count × patch_dim` features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: ItemId,
    pub category: u32,
    pub text: Vec<u32>,
    pub patches: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Benign,
    Malicious,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Whether target items appear in benign training data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Each target appears in exactly `few_shot_count` benign interactions.
    FewShot,
    /// Targets never appear in benign interactions.
    #[default]
    ZeroShot,
}

macro_rules! word_enum {
    ($ty:ty { $($variant:ident => $word:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $(Self::$variant => $word),+ }
            }
        }

        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl std::str::FromStr for $ty {
            type Err = $crate::Error;
            fn from_str(s: &str) -> $crate::Result<Self> {
                match s {
                    $($word => Ok(Self::$variant),)+
                    other => Err($crate::Error::InvalidArgument(format!(
                        "unknown {} {other:?}", stringify!($ty)
                    ))),
                }
            }
        }
    };
}

pub(crate) use word_enum;

word_enum!(Provenance { Benign => "benign", Malicious => "malicious" });
word_enum!(Split { Train => "train", Validation => "validation", Test => "test" });
word_enum!(Setting { FewShot => "few_shot", ZeroShot => "zero_shot" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: UserId,
    pub item: ItemId,
    pub position: u32,
    pub provenance: Provenance,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogConfig {
    pub item_count: usize,
    pub user_count: usize,
    pub category_count: usize,
    pub text_len: usize,
    pub patch_count: usize,
    pub patch_dim: usize,
    pub vocab_size: usize,
    pub history_min: usize,
    pub history_max: usize,
    pub popularity_skew: f64,
    pub few_shot_count: usize,
    pub seed: u64,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        Self {
            item_count: 200,
            user_count: 1000,
            category_count: 4,
            text_len: 12,
            patch_count: 9,
            patch_dim: 16,
            vocab_size: 512,
            history_min: 6,
            history_max: 14,
            popularity_skew: 1.0,
            few_shot_count: 5,
            seed: 0,
        }
    }
}

impl CatalogConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("item_count", self.item_count),
            ("user_count", self.user_count),
            ("category_count", self.category_count),
            ("text_len", self.text_len),
            ("patch_count", self.patch_count),
            ("patch_dim", self.patch_dim),
            ("vocab_size", self.vocab_size),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.category_count > self.item_count {
            return Err(Error::Config(format!(
                "{} categories cannot be filled by {} items",
                self.category_count, self.item_count
            )));
        }
        if !(self.popularity_skew >= 0.0) {
            return Err(Error::Config("popularity_skew must be >= 0".into()));
        }
        let lexicon = Lexicon::new(self.vocab_size, self.category_count);
        let smallest_pool = (0..self.category_count as u32)
            .map(|c| lexicon.item_pool(c).len())
            .min()
            .unwrap_or(0);
        if smallest_pool < self.text_len {
            return Err(Error::Config(format!(
                "vocabulary of {} leaves {smallest_pool} tokens per category, fewer than text_len {}",
                self.vocab_size, self.text_len
            )));
        }
        Ok(())
    }
}

/// Users, items and a time-ordered interaction log with split labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: CatalogConfig,
    pub items: Vec<Item>,
    pub users: Vec<UserId>,
    pub interactions: Vec<Interaction>,
}

impl Dataset {
    pub fn item(&self, id: ItemId) -> Option<&Item> {
        self.items.get(id.index()).filter(|it| it.id == id)
    }

    pub fn contains_item(&self, id: ItemId) -> bool {
        self.item(id).is_some()
    }

    /// Every user's interactions sorted by position.
    pub fn histories(&self) -> BTreeMap<UserId, Vec<Interaction>> {
        let mut out: BTreeMap<UserId, Vec<Interaction>> = BTreeMap::new();
        for x in &self.interactions {
            out.entry(x.user).or_default().push(*x);
        }
        for seq in out.values_mut() {
            seq.sort_by_key(|x| x.position);
        }
        out
    }

    /// Users with a held-out test interaction, paired with the query history
    /// (all of their other interactions, in order) and the test label.
    pub fn test_cases(&self) -> Vec<(UserId, Vec<ItemId>, ItemId)> {
        self.histories()
            .into_iter()
            .filter_map(|(user, seq)| {
                let label = seq.iter().find(|x| x.split == Split::Test)?.item;
                let history = seq
                    .iter()
                    .filter(|x| x.split != Split::Test)
                    .map(|x| x.item)
                    .collect();
                Some((user, history, label))
            })
            .collect()
    }

    /// Benign interaction counts per item, restricted to the train split.
    pub fn benign_train_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.items.len()];
        for x in &self.interactions {
            if x.provenance == Provenance::Benign && x.split == Split::Train {
                if let Some(c) = counts.get_mut(x.item.index()) {
                    *c += 1;
                }
            }
        }
        counts
    }

    /// Checks referential integrity, per-user ordering and the leave-last-out
    /// structure of benign interactions.
    pub fn validate(&self) -> Result<()> {
        for (i, item) in self.items.iter().enumerate() {
            if item.id.index() != i {
                return Err(Error::InvalidArgument(format!(
                    "item at slot {i} has id {}",
                    item.id
                )));
            }
            if item
                .text
                .iter()
                .any(|&t| t as usize >= self.config.vocab_size)
            {
                return Err(Error::InvalidArgument(format!(
                    "item {} has out-of-vocabulary tokens",
                    item.id
                )));
            }
            if item.patches.shape() != (self.config.patch_count, self.config.patch_dim)
                || item.text.len() != self.config.text_len
            {
                return Err(Error::InvalidArgument(format!(
                    "item {} has the wrong content shape",
                    item.id
                )));
            }
            if !item.patches.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "item {} has non-finite patches",
                    item.id
                )));
            }
        }
        for x in &self.interactions {
            if !self.contains_item(x.item) || x.user.index() >= self.users.len() {
                return Err(Error::InvalidArgument(format!(
                    "interaction ({}, {}) references an unknown user or item",
                    x.user, x.item
                )));
            }
            if x.provenance == Provenance::Malicious && x.split != Split::Train {
                return Err(Error::InvalidArgument(
                    "malicious interactions must be train-only".into(),
                ));
            }
        }
        for (user, seq) in self.histories() {
            if seq.windows(2).any(|w| w[0].position >= w[1].position) {
                return Err(Error::InvalidArgument(format!(
                    "user {user} has non-increasing positions"
                )));
            }
            let benign: Vec<_> = seq
                .iter()
                .filter(|x| x.provenance == Provenance::Benign)
                .collect();
            let n = benign.len();
            for (k, x) in benign.iter().enumerate() {
                let expected = if k + 1 == n {
                    Split::Test
                } else if k + 2 == n {
                    Split::Validation
                } else {
                    Split::Train
                };
                if x.split != expected {
                    return Err(Error::InvalidArgument(format!(
                        "user {user} breaks the leave-last-out split at position {}",
                        x.position
                    )));
                }
            }
        }
        Ok(())
    }
}
