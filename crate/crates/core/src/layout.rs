//! Contiguous row/element distributions.
//!
//! A `Layout` splits `0..global` into one contiguous range per rank, stored
//! as a prefix array. All ranks hold the same layout, so ownership queries
//! never need communication.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    global: usize,
    starts: Vec<usize>,
}

impl Layout {
    /// Splits `global` elements over `ranks` as evenly as possible; the first
    /// `global % ranks` ranks get one extra element.
    pub fn split_even(global: usize, ranks: usize) -> Layout {
        assert!(ranks > 0, "layout needs at least one rank");
        let base = global / ranks;
        let extra = global % ranks;
        let mut starts = Vec::with_capacity(ranks + 1);
        let mut at = 0;
        starts.push(0);
        for r in 0..ranks {
            at += base + usize::from(r < extra);
            starts.push(at);
        }
        Layout { global, starts }
    }

    pub fn from_local_sizes(sizes: &[usize]) -> Layout {
        assert!(!sizes.is_empty(), "layout needs at least one rank");
        let mut starts = Vec::with_capacity(sizes.len() + 1);
        let mut at = 0;
        starts.push(0);
        for &s in sizes {
            at += s;
            starts.push(at);
        }
        Layout { global: at, starts }
    }

    pub fn global_size(&self) -> usize {
        self.global
    }

    pub fn ranks(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn start(&self, rank: usize) -> usize {
        self.starts[rank]
    }

    pub fn range(&self, rank: usize) -> std::ops::Range<usize> {
        self.starts[rank]..self.starts[rank + 1]
    }

    pub fn local_size(&self, rank: usize) -> usize {
        self.starts[rank + 1] - self.starts[rank]
    }

    /// Rank owning global index `idx`.
    pub fn owner_of(&self, idx: usize) -> Result<usize> {
        if idx >= self.global {
            return Err(Error::IndexOutOfRange { k: 0, index: idx as i64, size: self.global });
        }
        // partition_point returns the first start strictly greater than idx
        let r = self.starts.partition_point(|&s| s <= idx) - 1;
        Ok(r)
    }

    /// Local position of global index `idx` on its owner.
    pub fn to_local(&self, rank: usize, idx: usize) -> usize {
        idx - self.starts[rank]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn split_even_covers_all_indices() {
        let l = Layout::split_even(10, 3);
        assert_eq!(l.range(0), 0..4);
        assert_eq!(l.range(1), 4..7);
        assert_eq!(l.range(2), 7..10);
        assert_eq!(l.global_size(), 10);
    }

    #[test]
    fn owner_of_matches_ranges() {
        let l = Layout::split_even(10, 3);
        assert_eq!(l.owner_of(0).unwrap(), 0);
        assert_eq!(l.owner_of(3).unwrap(), 0);
        assert_eq!(l.owner_of(4).unwrap(), 1);
        assert_eq!(l.owner_of(9).unwrap(), 2);
        assert!(l.owner_of(10).is_err());
    }

    #[test]
    fn empty_ranks_are_allowed() {
        let l = Layout::split_even(2, 4);
        assert_eq!(l.local_size(0), 1);
        assert_eq!(l.local_size(2), 0);
        assert_eq!(l.owner_of(1).unwrap(), 1);
    }

    proptest! {
        #[test]
        fn owner_agrees_with_linear_scan(global in 1usize..500, ranks in 1usize..9, idx in 0usize..500) {
            prop_assume!(idx < global);
            let l = Layout::split_even(global, ranks);
            let fast = l.owner_of(idx).unwrap();
            let slow = (0..ranks).find(|&r| l.range(r).contains(&idx)).unwrap();
            prop_assert_eq!(fast, slow);
        }
    }
}
