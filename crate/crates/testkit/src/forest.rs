//! Random star forests and a sequential graph-walk oracle.
//!
//! The oracle never packs or exchanges anything: it walks the global edge
//! list and applies the documented accumulation order directly (ascending
//! source rank, then ascending leaf index per root), so agreement with the
//! production exchange is meaningful down to the last bit.

use rand::Rng;
use starkit_core::{LeafSpec, ReduceOp};

/// A whole forest seen globally: per-rank root counts and leaf edges.
#[derive(Debug, Clone)]
pub struct ForestSpec {
    pub nroots: Vec<usize>,
    pub leaves: Vec<Vec<LeafSpec>>,
}

impl ForestSpec {
    pub fn size(&self) -> usize {
        self.nroots.len()
    }

    /// Leaf-array length each rank needs (max leaf index + 1).
    pub fn leaf_span(&self, rank: usize) -> usize {
        self.leaves[rank].iter().map(|l| l.leaf + 1).max().unwrap_or(0)
    }
}

/// Draws a random forest with bounded fan-in. Leaf indices may have holes;
/// some ranks may own no roots or no leaves.
pub fn random_forest<R: Rng>(
    rng: &mut R,
    size: usize,
    max_roots: usize,
    max_leaves: usize,
    max_fanin: usize,
) -> ForestSpec {
    let nroots: Vec<usize> = (0..size).map(|_| rng.gen_range(0..=max_roots)).collect();
    let mut slots: Vec<(usize, usize)> = Vec::new();
    for (rank, &n) in nroots.iter().enumerate() {
        for off in 0..n {
            slots.push((rank, off));
        }
    }
    let mut fanin = vec![0usize; slots.len()];
    let mut leaves = Vec::with_capacity(size);
    for _ in 0..size {
        let mut mine = Vec::new();
        if !slots.is_empty() {
            let want = rng.gen_range(0..=max_leaves);
            // sparse leaf indices: sample from twice the range, keep distinct
            let mut idx: Vec<usize> = (0..2 * max_leaves.max(1)).collect();
            for i in (1..idx.len()).rev() {
                idx.swap(i, rng.gen_range(0..=i));
            }
            idx.truncate(want);
            idx.sort_unstable();
            for leaf in idx {
                let open: Vec<usize> =
                    (0..slots.len()).filter(|&s| fanin[s] < max_fanin).collect();
                if open.is_empty() {
                    break;
                }
                let slot = open[rng.gen_range(0..open.len())];
                fanin[slot] += 1;
                let (root_rank, root_offset) = slots[slot];
                mine.push(LeafSpec { leaf, root_rank, root_offset });
            }
        }
        leaves.push(mine);
    }
    ForestSpec { nroots, leaves }
}

/// Broadcast oracle: each leaf sees exactly its root's value.
/// `Replace` overwrites the leaf, `Sum` adds into it; holes stay untouched.
pub fn bcast_oracle(
    spec: &ForestSpec,
    rootdata: &[Vec<f64>],
    leaf_init: &[Vec<f64>],
    op: ReduceOp,
) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = leaf_init.to_vec();
    for (rank, edges) in spec.leaves.iter().enumerate() {
        for e in edges {
            let v = rootdata[e.root_rank][e.root_offset];
            match op {
                ReduceOp::Replace => out[rank][e.leaf] = v,
                ReduceOp::Sum => out[rank][e.leaf] += v,
            }
        }
    }
    out
}

/// Reduce oracle: every root folds its contributions in ascending
/// (source rank, leaf index) order. `Sum` adds them into the initial root
/// value one by one; `Replace` keeps the last contribution in that order.
pub fn reduce_oracle(
    spec: &ForestSpec,
    leafdata: &[Vec<f64>],
    root_init: &[Vec<f64>],
    op: ReduceOp,
) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = root_init.to_vec();
    let size = spec.size();
    for owner in 0..size {
        for offset in 0..spec.nroots[owner] {
            for src in 0..size {
                let mut edges: Vec<&LeafSpec> = spec.leaves[src]
                    .iter()
                    .filter(|e| e.root_rank == owner && e.root_offset == offset)
                    .collect();
                edges.sort_by_key(|e| e.leaf);
                for e in edges {
                    let v = leafdata[src][e.leaf];
                    match op {
                        ReduceOp::Replace => out[owner][offset] = v,
                        ReduceOp::Sum => out[owner][offset] += v,
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_forests_respect_their_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let spec = random_forest(&mut rng, 4, 10, 12, 3);
            let mut fanin = std::collections::HashMap::new();
            for (rank, edges) in spec.leaves.iter().enumerate() {
                let mut seen = std::collections::HashSet::new();
                for e in edges {
                    assert!(e.root_rank < 4);
                    assert!(e.root_offset < spec.nroots[e.root_rank]);
                    assert!(seen.insert(e.leaf), "duplicate leaf on rank {rank}");
                    *fanin.entry((e.root_rank, e.root_offset)).or_insert(0usize) += 1;
                }
            }
            assert!(fanin.values().all(|&f| f <= 3));
        }
    }

    #[test]
    fn oracle_handles_fan_in_order() {
        // two ranks, one root on rank 0; rank 0 leaf 3 and rank 1 leaves 1, 2
        // all point at it
        let spec = ForestSpec {
            nroots: vec![1, 0],
            leaves: vec![
                vec![LeafSpec { leaf: 3, root_rank: 0, root_offset: 0 }],
                vec![
                    LeafSpec { leaf: 2, root_rank: 0, root_offset: 0 },
                    LeafSpec { leaf: 1, root_rank: 0, root_offset: 0 },
                ],
            ],
        };
        let leafdata = vec![vec![0.0, 0.0, 0.0, 7.0], vec![0.0, 11.0, 5.0]];
        let sum = reduce_oracle(&spec, &leafdata, &[vec![100.0], vec![]], ReduceOp::Sum);
        assert_eq!(sum[0], vec![100.0 + 7.0 + 11.0 + 5.0]);
        let last = reduce_oracle(&spec, &leafdata, &[vec![0.0], vec![]], ReduceOp::Replace);
        // rank 1's leaf 2 is the last contribution in (rank, leaf) order
        assert_eq!(last[0], vec![5.0]);
    }
}
