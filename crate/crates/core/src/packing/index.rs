//! First-fit lookup over an unbounded, append-only list of bins.
//!
//! A max-segment-tree keyed by creation order holds each bin's remaining
//! token and visual-token capacity. Finding the first bin that fits both is a
//! left-first descent that skips any subtree whose maxima are too small.

#[derive(Debug, Clone, Default)]
pub(crate) struct FirstFitIndex {
    leaves: usize,
    len: usize,
    tokens: Vec<u64>,
    visual: Vec<u64>,
}

impl FirstFitIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a bin with the given remaining capacity; returns its slot.
    pub fn push(&mut self, tokens: u64, visual: u64) -> usize {
        if self.len == self.leaves {
            self.grow();
        }
        let slot = self.len;
        self.len += 1;
        self.update(slot, tokens, visual);
        slot
    }

    pub fn update(&mut self, slot: usize, tokens: u64, visual: u64) {
        debug_assert!(slot < self.len);
        let mut node = self.leaves + slot;
        self.tokens[node] = tokens;
        self.visual[node] = visual;
        while node > 1 {
            node /= 2;
            self.tokens[node] = self.tokens[2 * node].max(self.tokens[2 * node + 1]);
            self.visual[node] = self.visual[2 * node].max(self.visual[2 * node + 1]);
        }
    }

    /// Lowest slot whose remaining capacity admits both demands.
    pub fn first_fit(&self, tokens: u64, visual: u64) -> Option<usize> {
        if self.len == 0 {
            return None;
        }
        self.descend(1, tokens, visual)
    }

    fn descend(&self, node: usize, tokens: u64, visual: u64) -> Option<usize> {
        if self.tokens[node] < tokens || self.visual[node] < visual {
            return None;
        }
        if node >= self.leaves {
            return Some(node - self.leaves);
        }
        self.descend(2 * node, tokens, visual)
            .or_else(|| self.descend(2 * node + 1, tokens, visual))
    }

    fn grow(&mut self) {
        let leaves = (self.leaves * 2).max(16);
        let mut tokens = vec![0; 2 * leaves];
        let mut visual = vec![0; 2 * leaves];
        tokens[leaves..leaves + self.len].copy_from_slice(&self.tokens[self.leaves..self.leaves + self.len]);
        visual[leaves..leaves + self.len].copy_from_slice(&self.visual[self.leaves..self.leaves + self.len]);
        for node in (1..leaves).rev() {
            tokens[node] = tokens[2 * node].max(tokens[2 * node + 1]);
            visual[node] = visual[2 * node].max(visual[2 * node + 1]);
        }
        self.leaves = leaves;
        self.tokens = tokens;
        self.visual = visual;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_index_finds_nothing() {
        assert_eq!(FirstFitIndex::new().first_fit(1, 0), None);
    }

    #[test]
    fn needs_both_dimensions() {
        let mut idx = FirstFitIndex::new();
        idx.push(100, 0);
        idx.push(5, 50);
        idx.push(100, 50);
        assert_eq!(idx.first_fit(10, 0), Some(0));
        assert_eq!(idx.first_fit(5, 10), Some(1));
        assert_eq!(idx.first_fit(10, 10), Some(2));
        assert_eq!(idx.first_fit(101, 0), None);
        idx.update(2, 0, 0);
        assert_eq!(idx.first_fit(10, 10), None);
    }

    proptest! {
        #[test]
        fn matches_linear_scan(
            bins in prop::collection::vec((0u64..50, 0u64..50), 0..200),
            updates in prop::collection::vec((0usize..200, 0u64..50, 0u64..50), 0..50),
            queries in prop::collection::vec((0u64..60, 0u64..60), 1..30),
        ) {
            let mut idx = FirstFitIndex::new();
            let mut naive = Vec::new();
            for &(t, v) in &bins {
                idx.push(t, v);
                naive.push((t, v));
            }
            for &(slot, t, v) in &updates {
                if slot < naive.len() {
                    idx.update(slot, t, v);
                    naive[slot] = (t, v);
                }
            }
            for &(t, v) in &queries {
                let expected = naive.iter().position(|&(bt, bv)| bt >= t && bv >= v);
                prop_assert_eq!(idx.first_fit(t, v), expected);
            }
        }
    }
}
