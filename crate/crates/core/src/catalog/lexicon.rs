/// Token groups and "hotness" of the synthetic vocabulary.
///
/// The layout is a fixed function of `(vocab_size, category_count)`, the
/// analog of public word semantics that a pretrained backbone already knows.
/// Token `t` belongs to group `t mod (categories + 1)`; the last group holds
/// generic tokens shared by all categories. Hotness is a low-discrepancy
/// value in `[0, 1)` spread evenly within every group.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    vocab_size: usize,
    category_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenGroup {
    Category(u32),
    Generic,
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;

impl Lexicon {
    pub fn new(vocab_size: usize, category_count: usize) -> Self {
        Self {
            vocab_size,
            category_count,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn category_count(&self) -> usize {
        self.category_count
    }

    /// Number of groups, including the generic one.
    pub fn group_count(&self) -> usize {
        self.category_count + 1
    }

    pub fn group(&self, token: u32) -> TokenGroup {
        let g = token as usize % self.group_count();
        if g == self.category_count {
            TokenGroup::Generic
        } else {
            TokenGroup::Category(g as u32)
        }
    }

    /// Dense group index in `0..group_count()`.
    pub fn group_index(&self, token: u32) -> usize {
        token as usize % self.group_count()
    }

    pub fn hotness(&self, token: u32) -> f64 {
        let rank = (token as usize / self.group_count()) as f64;
        (0.5 + rank * GOLDEN).fract()
    }

    /// Tokens an item of `category` may use: its category group plus generic.
    pub fn item_pool(&self, category: u32) -> Vec<u32> {
        (0..self.vocab_size as u32)
            .filter(|&t| match self.group(t) {
                TokenGroup::Category(c) => c == category,
                TokenGroup::Generic => true,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_partition_the_vocabulary() {
        let lex = Lexicon::new(512, 4);
        let generic = (0..512)
            .filter(|&t| lex.group(t) == TokenGroup::Generic)
            .count();
        assert!(generic > 90 && generic < 115);
        assert_eq!(lex.group(0), TokenGroup::Category(0));
        assert_eq!(lex.group(4), TokenGroup::Generic);
        let pool = lex.item_pool(2);
        assert!(pool
            .iter()
            .all(|&t| matches!(lex.group(t), TokenGroup::Category(2) | TokenGroup::Generic)));
    }

    #[test]
    fn hotness_spreads_within_groups() {
        let lex = Lexicon::new(512, 4);
        let hot: Vec<f64> = (0..512)
            .filter(|t| t % 5 == 1)
            .map(|t| lex.hotness(t))
            .collect();
        assert!(hot.iter().all(|h| (0.0..1.0).contains(h)));
        let mean = hot.iter().sum::<f64>() / hot.len() as f64;
        assert!((mean - 0.5).abs() < 0.05);
        let high = hot.iter().filter(|&&h| h > 0.8).count();
        assert!(high > 10);
    }
}
