//! Node types and the pure structural operations on internal nodes:
//! routing, flush-child selection, flush steps with annihilation,
//! B-tree style split/merge including buffer partitioning, and the
//! per-child min/max leaf-size summaries.

use crate::error::{contract, Result};
use crate::key::Key;
use crate::pager::BlockId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UpdateKind {
    Insert,
    Delete,
}

/// A key plus an insert/delete flag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Update<K> {
    pub key: K,
    pub kind: UpdateKind,
}

impl<K: Key> Update<K> {
    pub fn insert(key: K) -> Self {
        Update {
            key,
            kind: UpdateKind::Insert,
        }
    }

    pub fn delete(key: K) -> Self {
        Update {
            key,
            kind: UpdateKind::Delete,
        }
    }

    pub fn is_insert(&self) -> bool {
        self.kind == UpdateKind::Insert
    }

    /// +1 for an insertion, -1 for a deletion.
    pub fn sign(&self) -> i64 {
        match self.kind {
            UpdateKind::Insert => 1,
            UpdateKind::Delete => -1,
        }
    }
}

/// Outcome of merging one sorted update list into another.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MergeDelta {
    /// Matched insert/delete pairs removed.
    pub annihilated: u64,
    pub inserts: u64,
    pub deletes: u64,
}

/// Merges sorted `incoming` into sorted `dst`. An insertion and a deletion
/// of the same key cancel; a repeated update of the same kind is kept once.
pub fn merge_updates<K: Key>(dst: &mut Vec<Update<K>>, incoming: &[Update<K>]) -> MergeDelta {
    let mut delta = MergeDelta::default();
    if incoming.is_empty() {
        return delta;
    }
    let old = std::mem::take(dst);
    dst.reserve(old.len() + incoming.len());
    let (mut i, mut j) = (0, 0);
    while i < old.len() || j < incoming.len() {
        if j == incoming.len() {
            dst.push(old[i]);
            i += 1;
            continue;
        }
        let u = incoming[j];
        match u.kind {
            UpdateKind::Insert => delta.inserts += 1,
            UpdateKind::Delete => delta.deletes += 1,
        }
        if i == old.len() || u.key < old[i].key {
            dst.push(u);
            j += 1;
        } else if old[i].key < u.key {
            dst.push(old[i]);
            i += 1;
            match u.kind {
                UpdateKind::Insert => delta.inserts -= 1,
                UpdateKind::Delete => delta.deletes -= 1,
            }
        } else {
            if old[i].kind != u.kind {
                delta.annihilated += 1;
            } else {
                dst.push(old[i]);
            }
            i += 1;
            j += 1;
        }
    }
    delta
}

pub fn is_sorted_updates<K: Key>(updates: &[Update<K>]) -> bool {
    updates.windows(2).all(|w| w[0].key < w[1].key)
}

/// Child whose subtree holds the extreme leaf, and that leaf's size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Extreme {
    pub child: usize,
    pub size: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InternalNode<K> {
    pub pivots: Vec<K>,
    pub children: Vec<BlockId>,
    /// All children are leaves.
    pub leaf_children: bool,
    pub buffer: Vec<Update<K>>,
    /// Largest leaf size below each child.
    pub child_max: Vec<u64>,
    /// Smallest leaf size below each child.
    pub child_min: Vec<u64>,
    pub aux_max: Extreme,
    pub aux_min: Extreme,
    pub overfull: bool,
}

impl<K: Key> InternalNode<K> {
    pub fn new(leaf_children: bool) -> Self {
        InternalNode {
            pivots: Vec::new(),
            children: Vec::new(),
            leaf_children,
            buffer: Vec::new(),
            child_max: Vec::new(),
            child_min: Vec::new(),
            aux_max: Extreme::default(),
            aux_min: Extreme::default(),
            overfull: false,
        }
    }

    /// Node over the given children, with their extreme leaf sizes.
    pub fn with_children(
        leaf_children: bool,
        pivots: Vec<K>,
        children: Vec<BlockId>,
        child_max: Vec<u64>,
        child_min: Vec<u64>,
    ) -> Self {
        let mut n = InternalNode::new(leaf_children);
        n.pivots = pivots;
        n.children = children;
        n.child_max = child_max;
        n.child_min = child_min;
        n.recompute_aux();
        n
    }

    pub fn fanout(&self) -> usize {
        self.children.len()
    }

    pub fn route(&self, key: K) -> usize {
        route_key(&self.pivots, key)
    }

    pub fn child_index(&self, id: BlockId) -> Option<usize> {
        self.children.iter().position(|&c| c == id)
    }

    pub fn is_overfull(&self, buffer_cap: u64) -> bool {
        self.buffer.len() as u64 > buffer_cap
    }

    /// Recomputes `aux_max`/`aux_min` from the per-child entries; ties go to
    /// the smallest child index.
    pub fn recompute_aux(&mut self) {
        let mut mx = Extreme::default();
        let mut mn = Extreme {
            child: 0,
            size: u64::MAX,
        };
        for i in 0..self.children.len() {
            if i == 0 || self.child_max[i] > mx.size {
                mx = Extreme {
                    child: i,
                    size: self.child_max[i],
                };
            }
            if self.child_min[i] < mn.size {
                mn = Extreme {
                    child: i,
                    size: self.child_min[i],
                };
            }
        }
        if self.children.is_empty() {
            mn.size = 0;
        }
        self.aux_max = mx;
        self.aux_min = mn;
    }

    pub fn set_child_sizes(&mut self, idx: usize, max: u64, min: u64) {
        self.child_max[idx] = max;
        self.child_min[idx] = min;
        self.recompute_aux();
    }

    /// Inserts `child` to the right of position `idx`, separated by `pivot`.
    pub fn insert_child_after(&mut self, idx: usize, pivot: K, child: BlockId, max: u64, min: u64) {
        self.pivots.insert(idx, pivot);
        self.children.insert(idx + 1, child);
        self.child_max.insert(idx + 1, max);
        self.child_min.insert(idx + 1, min);
        self.recompute_aux();
    }

    /// Removes child `idx` (> 0) together with the pivot to its left.
    pub fn remove_child(&mut self, idx: usize) {
        debug_assert!(idx > 0);
        self.pivots.remove(idx - 1);
        self.children.remove(idx);
        self.child_max.remove(idx);
        self.child_min.remove(idx);
        self.recompute_aux();
    }

    /// Range of buffer positions routed to child `idx`.
    pub fn buffer_run(&self, idx: usize) -> std::ops::Range<usize> {
        let lo = if idx == 0 {
            0
        } else {
            let p = self.pivots[idx - 1];
            self.buffer.partition_point(|u| u.key < p)
        };
        let hi = if idx == self.pivots.len() {
            self.buffer.len()
        } else {
            let p = self.pivots[idx];
            self.buffer.partition_point(|u| u.key < p)
        };
        lo..hi
    }

    /// Removes up to `quantum` of the smallest buffered updates routed to
    /// child `idx` and returns them in key order.
    pub fn take_for_child(&mut self, idx: usize, quantum: u64) -> Vec<Update<K>> {
        let run = self.buffer_run(idx);
        let n = run.len().min(quantum as usize);
        self.buffer.drain(run.start..run.start + n).collect()
    }
}

/// Index `i` with `pivots[i-1] <= key < pivots[i]`, treating the ends as
/// infinite.
pub fn route_key<K: Ord>(pivots: &[K], key: K) -> usize {
    pivots.partition_point(|p| *p <= key)
}

/// Child receiving the most buffered updates and that count. Ties go to the
/// smallest index.
pub fn select_flush_child<K: Key>(node: &InternalNode<K>, buffer_cap: u64) -> Result<(usize, u64)> {
    if node.buffer.is_empty() || (node.buffer.len() as u64) < buffer_cap {
        return contract(format!(
            "flush child selection on a buffer of {} (limit {buffer_cap})",
            node.buffer.len()
        ));
    }
    let mut best = (0, 0u64);
    for idx in 0..node.children.len() {
        let c = node.buffer_run(idx).len() as u64;
        if c > best.1 {
            best = (idx, c);
        }
    }
    Ok(best)
}

/// Moves up to `quantum` updates routed to `child_idx` from the parent's
/// buffer into an internal child's buffer, annihilating matched pairs.
/// Returns the number removed from the parent.
pub fn flush_step<K: Key>(
    parent: &mut InternalNode<K>,
    child_idx: usize,
    child: &mut InternalNode<K>,
    quantum: u64,
) -> u64 {
    let moved = parent.take_for_child(child_idx, quantum);
    merge_updates(&mut child.buffer, &moved);
    moved.len() as u64
}

/// Splits an internal node at its median child. The separator pivot moves
/// up; buffered updates follow their routing.
pub fn split_internal<K: Key>(node: &mut InternalNode<K>) -> (InternalNode<K>, K) {
    let mid = node.children.len() / 2;
    split_internal_at(node, mid)
}

/// Splits before child `mid`; `node` keeps the first `mid` children.
pub fn split_internal_at<K: Key>(node: &mut InternalNode<K>, mid: usize) -> (InternalNode<K>, K) {
    assert!(0 < mid && mid < node.children.len());
    let sep = node.pivots[mid - 1];
    let mut right = InternalNode::new(node.leaf_children);
    right.pivots = node.pivots.split_off(mid);
    node.pivots.pop();
    right.children = node.children.split_off(mid);
    right.child_max = node.child_max.split_off(mid);
    right.child_min = node.child_min.split_off(mid);
    let cut = node.buffer.partition_point(|u| u.key < sep);
    right.buffer = node.buffer.split_off(cut);
    node.overfull = false;
    node.recompute_aux();
    right.recompute_aux();
    (right, sep)
}

/// Concatenates `right` onto `left` with `sep` between them. The merged
/// buffer may be up to twice the limit and is then flagged overfull.
pub fn merge_internal<K: Key>(
    left: &mut InternalNode<K>,
    sep: K,
    right: InternalNode<K>,
    buffer_cap: u64,
) -> Result<()> {
    if left.leaf_children != right.leaf_children {
        return contract("merging internal nodes of different heights");
    }
    if left.pivots.last().is_some_and(|&p| p >= sep) || right.pivots.first().is_some_and(|&p| p < sep)
    {
        return contract("merging non-adjacent internal nodes");
    }
    left.pivots.push(sep);
    left.pivots.extend(right.pivots);
    left.children.extend(right.children);
    left.child_max.extend(right.child_max);
    left.child_min.extend(right.child_min);
    left.buffer.extend(right.buffer);
    left.overfull = left.is_overfull(buffer_cap);
    left.recompute_aux();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ins(keys: &[u64]) -> Vec<Update<u64>> {
        keys.iter().map(|&k| Update::insert(k)).collect()
    }

    fn node(pivots: &[u64], buffer: Vec<Update<u64>>) -> InternalNode<u64> {
        let n = pivots.len() + 1;
        let mut node = InternalNode::with_children(
            true,
            pivots.to_vec(),
            (0..n as u64).map(|i| BlockId(100 + i)).collect(),
            vec![1; n],
            vec![1; n],
        );
        node.buffer = buffer;
        node
    }

    #[test]
    fn routing_is_left_closed() {
        assert_eq!(route_key(&[10u64, 20], 5), 0);
        assert_eq!(route_key(&[10u64, 20], 10), 1);
        assert_eq!(route_key(&[10u64, 20], 25), 2);
    }

    #[test]
    fn flush_child_is_max_multiplicity() {
        let n = node(&[10, 20, 30], ins(&[3, 5, 7, 12, 15, 22, 25, 35]));
        assert_eq!(select_flush_child(&n, 8).unwrap(), (0, 3));
    }

    #[test]
    fn flush_child_unanimous() {
        let keys: Vec<u64> = (0..64).map(|i| 1000 + i).collect();
        let n = node(&[10, 20, 30], ins(&keys));
        assert_eq!(select_flush_child(&n, 64).unwrap(), (3, 64));
        let keys: Vec<u64> = (0..64).map(|i| 20 + i % 10).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let n = node(&[10, 20, 30], ins(&keys));
        assert_eq!(select_flush_child(&n, keys.len() as u64).unwrap(), (2, 10));
    }

    #[test]
    fn flush_child_rejects_small_buffer() {
        let n = node(&[10], ins(&[1]));
        assert!(select_flush_child(&n, 4).is_err());
    }

    #[test]
    fn flush_annihilates_matched_pair() {
        let mut parent = node(&[10], vec![Update::insert(7)]);
        parent.buffer.extend(ins(&[1, 2]));
        parent.buffer.sort_by_key(|u| u.key);
        let mut child = node(&[5], vec![Update::delete(7)]);
        flush_step(&mut parent, 0, &mut child, 16);
        assert!(child.buffer.iter().all(|u| u.key != 7));
        assert_eq!(child.buffer, ins(&[1, 2]));
    }

    #[test]
    fn flush_moves_one_quantum() {
        let bc = 64;
        let keys: Vec<u64> = (0..2 * bc).collect();
        let mut parent = node(&[1000], ins(&keys));
        let mut child = node(&[50], Vec::new());
        let moved = flush_step(&mut parent, 0, &mut child, 16);
        assert_eq!(moved, 16);
        assert_eq!(parent.buffer.len() as u64, 2 * bc - 16);
        assert!(is_sorted_updates(&parent.buffer) && is_sorted_updates(&child.buffer));
    }

    #[test]
    fn split_partitions_children_and_buffer() {
        let mut n = node(&[10, 20, 30, 40], Vec::new());
        let keys: Vec<u64> = (0..100).map(|i| i % 50).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        n.buffer = ins(&keys);
        let (right, sep) = split_internal(&mut n);
        assert_eq!(sep, 20);
        assert_eq!(n.children.len(), 2);
        assert_eq!(right.children.len(), 3);
        assert!(n.buffer.iter().all(|u| u.key < 20));
        assert!(right.buffer.iter().all(|u| u.key >= 20));
        assert_eq!(n.buffer.len() + right.buffer.len(), keys.len());
    }

    #[test]
    fn merge_marks_overfull() {
        let (bc, fq) = (64u64, 16u64);
        let mut left = node(&[10_000], (0..bc).map(Update::insert).collect());
        let right = node(&[30_000], (0..bc - fq).map(|i| Update::insert(20_000 + i)).collect());
        merge_internal(&mut left, 20_000, right, bc).unwrap();
        assert_eq!(left.buffer.len() as u64, 2 * bc - fq);
        assert!(left.overfull);
        assert_eq!(left.children.len(), 4);
        assert!(is_sorted_updates(&left.buffer));
    }

    #[test]
    fn merge_rejects_non_adjacent() {
        let mut left = node(&[50], Vec::new());
        let right = node(&[60], Vec::new());
        assert!(merge_internal(&mut left, 40, right, 64).is_err());
    }

    #[test]
    fn aux_ties_prefer_smallest_index() {
        let mut n = node(&[10, 20], Vec::new());
        n.set_child_sizes(1, 5, 5);
        n.set_child_sizes(2, 5, 1);
        assert_eq!(n.aux_max, Extreme { child: 1, size: 5 });
        assert_eq!(n.aux_min, Extreme { child: 0, size: 1 });
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use std::collections::BTreeSet;

        proptest! {
            #[test]
            fn pigeonhole_count_meets_quantum(
                keys in proptest::collection::btree_set(0u64..1_000_000, 64),
                raw_pivots in proptest::collection::btree_set(1u64..1_000_000, 3),
            ) {
                let pivots: Vec<u64> = raw_pivots.into_iter().collect();
                let n = node(&pivots, ins(&keys.iter().copied().collect::<Vec<_>>()));
                let (idx, count) = select_flush_child(&n, 64).unwrap();
                // counting oracle
                let mut counts = vec![0u64; 4];
                for &k in &keys {
                    counts[pivots.iter().filter(|&&p| p <= k).count()] += 1;
                }
                let best = *counts.iter().max().unwrap();
                prop_assert_eq!(count, best);
                prop_assert_eq!(idx, counts.iter().position(|&c| c == best).unwrap());
                prop_assert!(count >= 64u64.div_ceil(4));
                prop_assert!(count >= 16);
            }

            #[test]
            fn split_then_merge_restores(
                keys in proptest::collection::btree_set(0u64..1000, 0..120),
                raw_pivots in proptest::collection::btree_set(1u64..1000, 4..8),
            ) {
                let pivots: Vec<u64> = raw_pivots.into_iter().collect();
                let original = node(&pivots, ins(&keys.iter().copied().collect::<Vec<_>>()));
                let mut left = original.clone();
                let (right, sep) = split_internal(&mut left);
                merge_internal(&mut left, sep, right, 1000).unwrap();
                prop_assert_eq!(&left.children, &original.children);
                prop_assert_eq!(&left.pivots, &original.pivots);
                prop_assert_eq!(&left.buffer, &original.buffer);
            }

            #[test]
            fn merge_updates_keeps_signed_counts(
                a in proptest::collection::btree_map(0u64..200, any::<bool>(), 0..80),
                b in proptest::collection::btree_map(0u64..200, any::<bool>(), 0..80),
            ) {
                let mk = |m: &std::collections::BTreeMap<u64, bool>| -> Vec<Update<u64>> {
                    m.iter().map(|(&k, &i)| if i { Update::insert(k) } else { Update::delete(k) }).collect()
                };
                let mut dst = mk(&a);
                let src = mk(&b);
                merge_updates(&mut dst, &src);
                prop_assert!(is_sorted_updates(&dst));
                let keys: BTreeSet<u64> = a.keys().chain(b.keys()).copied().collect();
                for k in keys {
                    let before: i64 = a.get(&k).map(|&i| if i { 1 } else { -1 }).unwrap_or(0)
                        + b.get(&k).map(|&i| if i { 1 } else { -1 }).unwrap_or(0);
                    let after: i64 = dst.iter().filter(|u| u.key == k).map(|u| u.sign()).sum();
                    // same-kind repeats collapse to one; opposite kinds cancel
                    prop_assert_eq!(after, before.signum());
                }
            }
        }
    }
}
