use std::collections::BTreeSet;
use std::ops::Range;

/// Evictable tokens per (layer, head): live, inside the reasoning region and
/// outside every protected region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidates {
    num_layers: usize,
    num_heads: usize,
    sets: Vec<BTreeSet<usize>>,
}

impl Candidates {
    /// Same token set at every (layer, head).
    pub fn uniform(num_layers: usize, num_heads: usize, tokens: impl IntoIterator<Item = usize>) -> Self {
        let set: BTreeSet<usize> = tokens.into_iter().collect();
        Self {
            num_layers,
            num_heads,
            sets: vec![set; num_layers * num_heads],
        }
    }

    pub fn from_fn(
        num_layers: usize,
        num_heads: usize,
        range: Range<usize>,
        mut is_live: impl FnMut(usize, usize, usize) -> bool,
    ) -> Self {
        let mut sets = Vec::with_capacity(num_layers * num_heads);
        for l in 0..num_layers {
            for h in 0..num_heads {
                sets.push(range.clone().filter(|&t| is_live(l, h, t)).collect());
            }
        }
        Self {
            num_layers,
            num_heads,
            sets,
        }
    }

    pub fn from_sets(num_layers: usize, num_heads: usize, sets: Vec<BTreeSet<usize>>) -> Self {
        assert_eq!(sets.len(), num_layers * num_heads, "one set per (layer, head)");
        Self {
            num_layers,
            num_heads,
            sets,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn get(&self, layer: usize, head: usize) -> &BTreeSet<usize> {
        &self.sets[layer * self.num_heads + head]
    }

    pub fn contains(&self, layer: usize, head: usize, token: usize) -> bool {
        self.get(layer, head).contains(&token)
    }

    /// Candidates of `(layer, head)` inside `range`.
    pub fn count_in(&self, layer: usize, head: usize, range: Range<usize>) -> usize {
        self.get(layer, head).range(range).count()
    }

    /// Smallest per-head candidate count at `layer`.
    pub fn min_count(&self, layer: usize) -> usize {
        (0..self.num_heads)
            .map(|h| self.get(layer, h).len())
            .min()
            .unwrap_or(0)
    }

    /// Restrict every set to `range`.
    pub fn restrict(&self, range: Range<usize>) -> Self {
        Self {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            sets: self
                .sets
                .iter()
                .map(|s| s.range(range.clone()).copied().collect())
                .collect(),
        }
    }
}
