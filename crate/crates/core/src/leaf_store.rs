//! Leaves as two-level micro-trees.
//!
//! A leaf page holds a sorted micro-root buffer of updates and a directory
//! of micro-leaves. Micro-leaves are separate pages holding sorted
//! insertions only; deletions live in the buffer until they are flushed
//! into the micro-leaf holding their insertion, where both vanish.
//!
//! `net_size` counts micro-leaf keys plus buffered insertions minus
//! buffered deletions, i.e. the number of live keys routed to the leaf.

use std::ops::Range;

use crate::core_tree::{is_sorted_updates, merge_updates, Update};
use crate::engine::{Ctx, Store, TreeSel};
use crate::error::{contract, integrity, Result};
use crate::key::Key;
use crate::page::Page;
use crate::pager::BlockId;
use crate::params::Params;
use crate::reader::Reader;

/// Directory entry for one micro-leaf. `first` is its lower fence; the
/// fence of the first entry is never consulted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MicroRef<K> {
    pub id: BlockId,
    pub first: K,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct MicroLeaf<K> {
    pub keys: Vec<K>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeafNode<K> {
    pub buffer: Vec<Update<K>>,
    pub micro: Vec<MicroRef<K>>,
    pub net_size: u64,
}

impl<K> Default for LeafNode<K> {
    fn default() -> Self {
        LeafNode {
            buffer: Vec::new(),
            micro: Vec::new(),
            net_size: 0,
        }
    }
}

impl<K: Key> LeafNode<K> {
    pub fn compute_net(&self) -> u64 {
        let stored: i64 = self.micro.iter().map(|m| m.len as i64).sum();
        let buffered: i64 = self.buffer.iter().map(|u| u.sign()).sum();
        (stored + buffered).max(0) as u64
    }

    /// Micro-leaf index responsible for `key`.
    pub fn route_micro(&self, key: K) -> usize {
        if self.micro.len() <= 1 {
            return 0;
        }
        self.micro[1..].partition_point(|m| m.first <= key)
    }

    /// Buffer positions routed to micro-leaf `j`.
    pub fn micro_run(&self, j: usize) -> Range<usize> {
        let lo = if j == 0 {
            0
        } else {
            let f = self.micro[j].first;
            self.buffer.partition_point(|u| u.key < f)
        };
        let hi = if j + 1 >= self.micro.len() {
            self.buffer.len()
        } else {
            let f = self.micro[j + 1].first;
            self.buffer.partition_point(|u| u.key < f)
        };
        lo..hi
    }

    /// Micro-leaf receiving the most buffered updates; ties go left.
    pub fn busiest_micro(&self) -> Option<(usize, usize)> {
        (0..self.micro.len())
            .map(|j| (j, self.micro_run(j).len()))
            .fold(None, |best: Option<(usize, usize)>, (j, c)| match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((j, c)),
            })
    }

    /// Live-key count per micro-leaf after its buffered updates apply.
    pub fn adjusted_counts(&self) -> Vec<i64> {
        (0..self.micro.len())
            .map(|j| {
                let run = self.micro_run(j);
                self.micro[j].len as i64 + self.buffer[run].iter().map(|u| u.sign()).sum::<i64>()
            })
            .collect()
    }
}

/// Applies sorted updates to sorted insertion-only `keys`. A deletion
/// removes its key; a deletion with no matching key is returned.
pub fn apply_to_micro<K: Key>(keys: &mut Vec<K>, updates: &[Update<K>]) -> Vec<Update<K>> {
    let mut out = Vec::with_capacity(keys.len() + updates.len());
    let mut leftover = Vec::new();
    let mut i = 0;
    for u in updates {
        while i < keys.len() && keys[i] < u.key {
            out.push(keys[i]);
            i += 1;
        }
        let present = i < keys.len() && keys[i] == u.key;
        if u.is_insert() {
            if !present {
                out.push(u.key);
            }
        } else if present {
            i += 1;
        } else {
            leftover.push(*u);
        }
    }
    out.extend_from_slice(&keys[i..]);
    *keys = out;
    leftover
}

/// Cuts `keys` into near-equal pieces of at most `cap` each.
fn chunk<K: Key>(keys: Vec<K>, cap: usize) -> Vec<Vec<K>> {
    let parts = keys.len().div_ceil(cap).max(1);
    let base = keys.len() / parts;
    let extra = keys.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut it = keys.into_iter();
    for p in 0..parts {
        out.push(it.by_ref().take(base + usize::from(p < extra)).collect());
    }
    out
}

/// Splits micro-leaf `j` into pieces of at most `cap`, allocating pages
/// for all but the first piece. The leaf and micro-leaf must be resident.
fn split_micro<K: Key>(
    ctx: &Ctx<K>,
    leaf: BlockId,
    j: usize,
    cap: usize,
) -> Result<()> {
    let mut s = ctx.lock();
    let mid = s.leaf(leaf)?.micro[j].id;
    let keys = s.with_micro(mid, |m| std::mem::take(&mut m.keys))?;
    let mut pieces = chunk(keys, cap).into_iter();
    let head = pieces.next().unwrap_or_default();
    let head_len = head.len();
    s.with_micro(mid, |m| m.keys = head)?;
    let mut refs = Vec::new();
    for piece in pieces {
        let first = piece[0];
        let len = piece.len();
        let id = s.alloc_micro(piece);
        refs.push(MicroRef { id, first, len });
    }
    s.with_leaf(ctx.t, leaf, |l| {
        l.micro[j].len = head_len;
        for (k, r) in refs.into_iter().enumerate() {
            l.micro.insert(j + 1 + k, r);
        }
    })
}

/// Restores the micro-leaf size band around index `j`: frees it when
/// empty, splits it above the cap, and merges it into a neighbour below a
/// quarter of the cap. The leaf must be pinned.
async fn normalize_micro<K: Key>(ctx: &Ctx<K>, p: &Params, leaf: BlockId, j: usize) -> Result<()> {
    let cap = p.microleaf_cap as usize;
    let (len, count, mid) = {
        let s = ctx.lock();
        let l = s.leaf(leaf)?;
        if j >= l.micro.len() {
            return Ok(());
        }
        (l.micro[j].len, l.micro.len(), l.micro[j].id)
    };
    if len == 0 {
        let mut s = ctx.lock();
        s.with_leaf(ctx.t, leaf, |l| {
            l.micro.remove(j);
        })?;
        s.free_page(ctx.t, mid)?;
        return Ok(());
    }
    if len > cap {
        let pins = ctx.ensure(&[mid]).await?;
        split_micro(ctx, leaf, j, cap)?;
        ctx.release(pins);
        return Ok(());
    }
    if len >= cap / 4 || count == 1 {
        return Ok(());
    }
    let (lo, hi) = if j + 1 < count { (j, j + 1) } else { (j - 1, j) };
    let (lo_id, hi_id) = {
        let s = ctx.lock();
        let l = s.leaf(leaf)?;
        (l.micro[lo].id, l.micro[hi].id)
    };
    let pins = ctx.ensure(&[lo_id, hi_id]).await?;
    let merged_len = {
        let mut s = ctx.lock();
        let tail = s.micro(hi_id)?.keys.clone();
        s.with_micro(lo_id, |m| m.keys.extend_from_slice(&tail))?;
        let n = s.micro(lo_id)?.keys.len();
        s.with_leaf(ctx.t, leaf, |l| {
            l.micro[lo].len = n;
            l.micro.remove(hi);
        })?;
        s.free_page(ctx.t, hi_id)?;
        n
    };
    if merged_len > cap {
        split_micro(ctx, leaf, lo, cap)?;
    }
    ctx.release(pins);
    Ok(())
}

/// Moves every buffered update routed to the busiest micro-leaf into it.
/// Returns the number of updates that left the buffer. The leaf must be
/// pinned.
pub(crate) async fn micro_flush<K: Key>(ctx: &Ctx<K>, p: &Params, leaf: BlockId) -> Result<usize> {
    let target = {
        let s = ctx.lock();
        let l = s.leaf(leaf)?;
        l.busiest_micro().map(|(j, _)| (j, l.micro[j].id))
    };
    let Some((j, mid)) = target else {
        // No micro-leaves yet: buffered insertions become the first ones.
        let mut s = ctx.lock();
        let inserts: Vec<K> = {
            let l = s.leaf(leaf)?;
            l.buffer.iter().filter(|u| u.is_insert()).map(|u| u.key).collect()
        };
        if inserts.is_empty() {
            return Ok(0);
        }
        let moved = inserts.len();
        let mut refs = Vec::new();
        for piece in chunk(inserts, p.microleaf_cap as usize) {
            let first = piece[0];
            let len = piece.len();
            refs.push(MicroRef {
                id: s.alloc_micro(piece),
                first,
                len,
            });
        }
        s.with_leaf(ctx.t, leaf, |l| {
            l.buffer.retain(|u| !u.is_insert());
            l.micro = refs;
        })?;
        s.stats.micro_flushes += 1;
        return Ok(moved);
    };
    let pins = ctx.ensure(&[mid]).await?;
    let moved = {
        let mut s = ctx.lock();
        let run: Vec<Update<K>> = s.with_leaf(ctx.t, leaf, |l| {
            let r = l.micro_run(j);
            l.buffer.drain(r).collect()
        })?;
        let leftover = s.with_micro(mid, |m| apply_to_micro(&mut m.keys, &run))?;
        let n = s.micro(mid)?.keys.len();
        s.with_leaf(ctx.t, leaf, |l| {
            l.micro[j].len = n;
            merge_updates(&mut l.buffer, &leftover);
            l.net_size = l.compute_net();
        })?;
        s.stats.micro_flushes += 1;
        run.len() - leftover.len()
    };
    ctx.release(pins);
    normalize_micro(ctx, p, leaf, j).await?;
    Ok(moved)
}

/// Micro-flushes until the buffer is back under its cap. The leaf must be
/// pinned.
pub(crate) async fn drain_leaf<K: Key>(ctx: &Ctx<K>, p: &Params, leaf: BlockId) -> Result<()> {
    loop {
        let len = ctx.lock().leaf(leaf)?.buffer.len() as u64;
        if len <= p.microroot_buffer_cap {
            return Ok(());
        }
        if micro_flush(ctx, p, leaf).await? == 0 {
            return Ok(());
        }
    }
}

/// Where a leaf insert batch comes from.
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) enum Feed<'a, K> {
    Batch(&'a [Update<K>]),
    /// Up to `flush_quantum` updates taken from the buffer of `node`'s
    /// child slot `idx`, which is this leaf. The parent must be pinned; its
    /// size entry for the leaf is refreshed in the same step.
    Parent { node: BlockId, idx: usize },
}

/// Merges up to `flush_quantum` sorted updates into the leaf's micro-root
/// buffer, annihilating matched pairs, then drains the buffer if needed.
pub(crate) async fn bulk_insert<K: Key>(
    ctx: &Ctx<K>,
    p: &Params,
    leaf: BlockId,
    feed: Feed<'_, K>,
) -> Result<()> {
    if let Feed::Batch(updates) = feed {
        if !is_sorted_updates(updates) {
            return contract("leaf insert batch is not sorted");
        }
        if updates.len() as u64 > p.flush_quantum {
            return contract(format!(
                "leaf insert batch of {} exceeds the flush quantum {}",
                updates.len(),
                p.flush_quantum
            ));
        }
    }
    let pins = ctx.ensure(&[leaf]).await?;
    {
        let mut s = ctx.lock();
        let updates = match feed {
            Feed::Batch(u) => u.to_vec(),
            Feed::Parent { node, idx } => {
                s.with_internal(ctx.t, node, |n| n.take_for_child(idx, p.flush_quantum))?
            }
        };
        let net = s.with_leaf(ctx.t, leaf, |l| {
            merge_updates(&mut l.buffer, &updates);
            l.net_size = l.compute_net();
            l.net_size
        })?;
        if let Feed::Parent { node, idx } = feed {
            s.with_internal(ctx.t, node, |n| n.set_child_sizes(idx, net, net))?;
        }
    }
    drain_leaf(ctx, p, leaf).await?;
    ctx.release(pins);
    Ok(())
}

/// Records a split of the leaf in slot `idx` of `parent`.
fn link_split<K: Key>(
    s: &mut Store<K>,
    t: TreeSel,
    parent: Option<(BlockId, usize)>,
    left: BlockId,
    right: BlockId,
    sep: K,
) -> Result<()> {
    let Some((node, idx)) = parent else {
        return Ok(());
    };
    let ln = s.leaf(left)?.net_size;
    let rn = s.leaf(right)?.net_size;
    s.with_internal(t, node, |n| {
        n.child_max[idx] = ln;
        n.child_min[idx] = ln;
        n.insert_child_after(idx, sep, right, rn, rn);
    })
}

/// Splits a leaf at the median of its live content. Returns the new right
/// leaf and the separating key. Unless `force` is set the leaf must hold at
/// least `4 tau` keys. When `parent` names the leaf's slot, the new leaf is
/// linked in the same step that creates it; the parent must be pinned.
pub(crate) async fn leaf_split<K: Key>(
    ctx: &Ctx<K>,
    p: &Params,
    leaf: BlockId,
    force: bool,
    parent: Option<(BlockId, usize)>,
) -> Result<(BlockId, K)> {
    let pins = ctx.ensure(&[leaf]).await?;
    let (net, counts, micro_ids) = {
        let s = ctx.lock();
        let l = s.leaf(leaf)?;
        (
            l.net_size,
            l.adjusted_counts(),
            l.micro.iter().map(|m| m.id).collect::<Vec<_>>(),
        )
    };
    if net < 2 || (!force && net < 4 * p.tau) {
        return contract(format!("leaf of {net} keys is too small to split"));
    }
    let target = (net / 2) as i64;
    let mut cum = 0i64;
    let mut pick = None;
    for (j, &c) in counts.iter().enumerate() {
        if cum + c > target {
            pick = Some(j);
            break;
        }
        cum += c;
    }
    let right = match pick {
        None => {
            // Everything live is still buffered.
            let mut s = ctx.lock();
            let live: Vec<K> = s
                .leaf(leaf)?
                .buffer
                .iter()
                .filter(|u| u.is_insert())
                .map(|u| u.key)
                .collect();
            let Some(&sep) = live.get((target - cum) as usize) else {
                return integrity("leaf size disagrees with its content");
            };
            let (micro, buffer) = s.with_leaf(ctx.t, leaf, |l| {
                let cut = l.buffer.partition_point(|u| u.key < sep);
                let buffer = l.buffer.split_off(cut);
                let mcut = l.micro.partition_point(|m| m.first < sep).max(1).min(l.micro.len());
                let micro = l.micro.split_off(mcut);
                l.net_size = l.compute_net();
                (micro, buffer)
            })?;
            let mut r = LeafNode {
                buffer,
                micro,
                net_size: 0,
            };
            r.net_size = r.compute_net();
            let rid = s.alloc_leaf(ctx.t, r);
            link_split(&mut s, ctx.t, parent, leaf, rid, sep)?;
            (rid, sep)
        }
        Some(j) => {
            let mpins = ctx.ensure(&[micro_ids[j]]).await?;
            let mut s = ctx.lock();
            let (run, mut keys) = {
                let l = s.leaf(leaf)?;
                (l.buffer[l.micro_run(j)].to_vec(), s.micro(micro_ids[j])?.keys.clone())
            };
            let mut live = keys.clone();
            apply_to_micro(&mut live, &run);
            let Some(&sep) = live.get((target - cum) as usize) else {
                return integrity("micro-leaf count disagrees with its content");
            };
            let upper = keys.split_off(keys.partition_point(|&k| k < sep));
            let lower_len = keys.len();
            s.with_micro(micro_ids[j], |m| m.keys = keys)?;
            let upper_ref = if upper.is_empty() {
                None
            } else {
                let len = upper.len();
                Some(MicroRef {
                    id: s.alloc_micro(upper),
                    first: sep,
                    len,
                })
            };
            let (micro, buffer) = s.with_leaf(ctx.t, leaf, |l| {
                let cut = l.buffer.partition_point(|u| u.key < sep);
                let buffer = l.buffer.split_off(cut);
                let mut micro: Vec<MicroRef<K>> = upper_ref.into_iter().collect();
                micro.extend(l.micro.split_off(j + 1));
                l.micro[j].len = lower_len;
                l.net_size = l.compute_net();
                (micro, buffer)
            })?;
            let mut r = LeafNode {
                buffer,
                micro,
                net_size: 0,
            };
            if let Some(m) = r.micro.first_mut() {
                m.first = sep;
            }
            r.net_size = r.compute_net();
            let rid = s.alloc_leaf(ctx.t, r);
            link_split(&mut s, ctx.t, parent, leaf, rid, sep)?;
            drop(s);
            ctx.release(mpins);
            (rid, sep)
        }
    };
    // Pieces at the cut may have fallen under the micro-leaf band.
    let last = ctx.lock().leaf(leaf)?.micro.len().saturating_sub(1);
    normalize_micro(ctx, p, leaf, last).await?;
    ctx.release(pins);
    let rpins = ctx.ensure(&[right.0]).await?;
    normalize_micro(ctx, p, right.0, 0).await?;
    ctx.release(rpins);
    ctx.lock().stats.leaf_splits += 1;
    Ok(right)
}

/// Absorbs the adjacent right sibling `right` (separated by `sep`) into
/// `left` and frees it. The merged buffer is drained back under its cap.
/// Returns the merged live size. When `parent` names the left leaf's slot,
/// the right leaf is unlinked in the same step; the parent must be pinned.
pub(crate) async fn leaf_merge<K: Key>(
    ctx: &Ctx<K>,
    p: &Params,
    left: BlockId,
    right: BlockId,
    sep: K,
    parent: Option<(BlockId, usize)>,
) -> Result<u64> {
    let pins = ctx.ensure(&[left, right]).await?;
    let junction = {
        let mut s = ctx.lock();
        let r = s.leaf(right)?.clone();
        let l = s.leaf(left)?;
        let left_ok = l.buffer.last().is_none_or(|u| u.key < sep)
            && (l.micro.len() <= 1 || l.micro.last().is_none_or(|m| m.first < sep));
        let right_ok = r.buffer.first().is_none_or(|u| u.key >= sep)
            && r.micro.get(1).is_none_or(|m| m.first >= sep);
        if !left_ok || !right_ok {
            return contract("merging leaves that are not adjacent");
        }
        let junction = l.micro.len();
        s.with_leaf(ctx.t, left, |l| {
            l.buffer.extend(r.buffer);
            let mut micro = r.micro;
            if let Some(m) = micro.first_mut() {
                m.first = sep;
            }
            l.micro.extend(micro);
            l.net_size = l.compute_net();
        })?;
        s.free_page(ctx.t, right)?;
        if let Some((node, idx)) = parent {
            let net = s.leaf(left)?.net_size;
            s.with_internal(ctx.t, node, |n| {
                n.child_max[idx] = net;
                n.child_min[idx] = net;
                n.remove_child(idx + 1);
            })?;
        }
        s.stats.leaf_merges += 1;
        junction
    };
    if junction > 0 {
        normalize_micro(ctx, p, left, junction).await?;
        normalize_micro(ctx, p, left, junction - 1).await?;
    }
    drain_leaf(ctx, p, left).await?;
    let net = ctx.lock().leaf(left)?.net_size;
    ctx.release(pins);
    Ok(net)
}

/// Raw contents of a leaf within `[lo, hi]`: micro-leaf keys and buffered
/// updates, both sorted. Reads go through `reader`.
pub fn leaf_raw<K: Key>(
    reader: &mut Reader<'_, K>,
    leaf: BlockId,
    lo: K,
    hi: K,
) -> Result<(Vec<K>, Vec<Update<K>>)> {
    let Some(l) = reader.read(leaf)?.as_leaf() else {
        return integrity(format!("page {leaf:?} is not a leaf"));
    };
    let mut keys = Vec::new();
    if !l.micro.is_empty() {
        for m in &l.micro[l.route_micro(lo)..=l.route_micro(hi)] {
            let page: &Page<K> = reader.read(m.id)?;
            let Some(mk) = page.as_micro() else {
                return integrity(format!("page {:?} is not a micro-leaf", m.id));
            };
            let a = mk.keys.partition_point(|&k| k < lo);
            let b = mk.keys.partition_point(|&k| k <= hi);
            keys.extend_from_slice(&mk.keys[a..b]);
        }
    }
    let a = l.buffer.partition_point(|u| u.key < lo);
    let b = l.buffer.partition_point(|u| u.key <= hi);
    Ok((keys, l.buffer[a..b].to_vec()))
}

/// Live keys of a leaf within `[lo, hi]`, sorted.
pub fn leaf_collect<K: Key>(reader: &mut Reader<'_, K>, leaf: BlockId, lo: K, hi: K) -> Result<Vec<K>> {
    if lo > hi {
        return contract("collect range has lo > hi");
    }
    let (mut keys, buffer) = leaf_raw(reader, leaf, lo, hi)?;
    apply_to_micro(&mut keys, &buffer);
    Ok(keys)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;
    use std::sync::{Arc, Mutex};

    use proptest::prelude::*;

    use super::*;
    use crate::engine::testing::{run, store};

    fn small() -> Params {
        // B=16, logBN=2: tau=64, micro cap 32, micro-root cap 16, quantum 4.
        Params::derive(16, 0.5, 256).unwrap()
    }

    fn new_leaf(shared: &Arc<Mutex<Store<u64>>>) -> BlockId {
        shared.lock().unwrap().alloc_leaf(TreeSel::Live, LeafNode::default())
    }

    fn content(shared: &Arc<Mutex<Store<u64>>>, leaf: BlockId) -> Vec<u64> {
        let s = shared.lock().unwrap();
        let mut r = Reader::new(&s.pager);
        leaf_collect(&mut r, leaf, 0, u64::MAX).unwrap()
    }

    /// Checks the structural invariants of one leaf.
    fn check(shared: &Arc<Mutex<Store<u64>>>, leaf: BlockId, p: &Params) {
        let s = shared.lock().unwrap();
        let l = s.pager.peek(leaf).unwrap().as_leaf().unwrap().clone();
        assert!(is_sorted_updates(&l.buffer));
        assert!(l.buffer.len() as u64 <= p.microroot_buffer_cap);
        let mut prev: Option<u64> = None;
        for (j, m) in l.micro.iter().enumerate() {
            let keys = &s.pager.peek(m.id).unwrap().as_micro().unwrap().keys;
            assert_eq!(keys.len(), m.len);
            assert!(m.len as u64 <= p.microleaf_cap);
            if l.micro.len() > 1 {
                assert!(m.len as u64 >= p.microleaf_cap / 4, "micro-leaf {j} holds {}", m.len);
            }
            assert!(keys.windows(2).all(|w| w[0] < w[1]));
            if j > 0 {
                assert!(keys[0] >= m.first);
            }
            if let Some(next) = l.micro.get(j + 1) {
                assert!(*keys.last().unwrap() < next.first);
            }
            if let Some(pv) = prev {
                assert!(keys[0] > pv);
            }
            prev = keys.last().copied();
        }
        assert_eq!(l.net_size, l.compute_net());
        assert_eq!(s.live.census.leaf_sizes[&leaf], l.net_size);
    }

    fn insert_all(shared: &Arc<Mutex<Store<u64>>>, p: &Params, leaf: BlockId, keys: &[u64]) {
        let ctx = Ctx::new(shared.clone(), TreeSel::Live);
        for chunk in keys.chunks(p.flush_quantum as usize) {
            let mut ups: Vec<_> = chunk.iter().map(|&k| Update::insert(k)).collect();
            ups.sort_by_key(|u| u.key);
            run(shared, bulk_insert(&ctx, p, leaf, Feed::Batch(&ups))).0.unwrap();
        }
    }

    #[test]
    fn apply_to_micro_annihilates_and_reports_strays() {
        let mut keys = vec![1u64, 3, 5];
        let left = apply_to_micro(&mut keys, &[Update::delete(0), Update::insert(2), Update::delete(3)]);
        assert_eq!(keys, vec![1, 2, 5]);
        assert_eq!(left, vec![Update::delete(0)]);
    }

    #[test]
    fn insert_then_delete_leaves_nothing() {
        let p = small();
        let shared = store::<u64>(p, 64);
        let leaf = new_leaf(&shared);
        let ctx = Ctx::new(shared.clone(), TreeSel::Live);
        run(&shared, bulk_insert(&ctx, &p, leaf, Feed::Batch(&[Update::insert(7)]))).0.unwrap();
        run(&shared, bulk_insert(&ctx, &p, leaf, Feed::Batch(&[Update::delete(7)]))).0.unwrap();
        assert!(content(&shared, leaf).is_empty());
        assert_eq!(shared.lock().unwrap().leaf(leaf).unwrap().net_size, 0);
    }

    #[test]
    fn full_buffer_moves_a_quantum_to_one_micro_leaf() {
        let p = small();
        let shared = store::<u64>(p, 64);
        let leaf = new_leaf(&shared);
        insert_all(&shared, &p, leaf, &(0..16).collect::<Vec<_>>());
        assert_eq!(shared.lock().unwrap().leaf(leaf).unwrap().buffer.len(), 16);
        insert_all(&shared, &p, leaf, &(16..20).collect::<Vec<_>>());
        let s = shared.lock().unwrap();
        let l = s.leaf(leaf).unwrap();
        assert!(l.buffer.is_empty());
        assert_eq!(l.micro.len(), 1);
        assert!(l.micro[0].len as u64 >= p.flush_quantum);
    }

    #[test]
    fn split_at_four_tau_gives_halves() {
        let p = small();
        let shared = store::<u64>(p, 64);
        let leaf = new_leaf(&shared);
        let keys: Vec<u64> = (0..4 * p.tau).map(|k| k * 3).collect();
        insert_all(&shared, &p, leaf, &keys);
        let ctx = Ctx::new(shared.clone(), TreeSel::Live);
        let (r, _) = run(&shared, leaf_split(&ctx, &p, leaf, false, None));
        let (right, sep) = r.unwrap();
        let (a, b) = (content(&shared, leaf), content(&shared, right));
        assert_eq!(a.len() as u64, 2 * p.tau);
        assert_eq!(b.len() as u64, 2 * p.tau);
        assert!(a.iter().all(|&k| k < sep) && b.iter().all(|&k| k >= sep));
        check(&shared, leaf, &p);
        check(&shared, right, &p);
    }

    #[test]
    fn split_below_threshold_is_refused() {
        let p = small();
        let shared = store::<u64>(p, 64);
        let leaf = new_leaf(&shared);
        insert_all(&shared, &p, leaf, &(0..100).collect::<Vec<_>>());
        let ctx = Ctx::new(shared.clone(), TreeSel::Live);
        let (r, _) = run(&shared, leaf_split(&ctx, &p, leaf, false, None));
        assert!(matches!(r, Err(crate::error::Error::Contract(_))));
    }

    #[test]
    fn single_micro_leaf_is_split_physically() {
        let p = small();
        let shared = store::<u64>(p, 64);
        let leaf = new_leaf(&shared);
        insert_all(&shared, &p, leaf, &(0..30).collect::<Vec<_>>());
        assert_eq!(shared.lock().unwrap().leaf(leaf).unwrap().micro.len(), 1);
        let ctx = Ctx::new(shared.clone(), TreeSel::Live);
        let (right, sep) = run(&shared, leaf_split(&ctx, &p, leaf, true, None)).0.unwrap();
        assert_eq!(sep, 15);
        assert_eq!(content(&shared, leaf), (0..15).collect::<Vec<_>>());
        assert_eq!(content(&shared, right), (15..30).collect::<Vec<_>>());
    }

    #[test]
    fn merge_then_even_split() {
        let p = small();
        let shared = store::<u64>(p, 64);
        let (a, b) = (new_leaf(&shared), new_leaf(&shared));
        insert_all(&shared, &p, a, &(0..2 * p.tau).collect::<Vec<_>>());
        insert_all(&shared, &p, b, &(10_000..10_000 + 4 * p.tau).collect::<Vec<_>>());
        let ctx = Ctx::new(shared.clone(), TreeSel::Live);
        let net = run(&shared, leaf_merge(&ctx, &p, a, b, 10_000, None)).0.unwrap();
        assert_eq!(net, 6 * p.tau);
        assert!(!shared.lock().unwrap().pager.is_allocated(b));
        check(&shared, a, &p);
        let (r, _) = run(&shared, leaf_split(&ctx, &p, a, true, None)).0.unwrap();
        assert_eq!(content(&shared, a).len() as u64, 3 * p.tau);
        assert_eq!(content(&shared, r).len() as u64, 3 * p.tau);
    }

    #[test]
    fn merge_rejects_overlap() {
        let p = small();
        let shared = store::<u64>(p, 64);
        let (a, b) = (new_leaf(&shared), new_leaf(&shared));
        insert_all(&shared, &p, a, &[5, 50]);
        insert_all(&shared, &p, b, &[10]);
        let ctx = Ctx::new(shared.clone(), TreeSel::Live);
        let r = run(&shared, leaf_merge(&ctx, &p, a, b, 10, None)).0;
        assert!(matches!(r, Err(crate::error::Error::Contract(_))));
    }

    #[test]
    fn collect_respects_buffered_deletes_and_range() {
        let p = small();
        let shared = store::<u64>(p, 64);
        let leaf = new_leaf(&shared);
        insert_all(&shared, &p, leaf, &(0..40).collect::<Vec<_>>());
        let ctx = Ctx::new(shared.clone(), TreeSel::Live);
        run(&shared, bulk_insert(&ctx, &p, leaf, Feed::Batch(&[Update::delete(20)]))).0.unwrap();
        let s = shared.lock().unwrap();
        let mut r = Reader::new(&s.pager);
        assert_eq!(leaf_collect(&mut r, leaf, 18, 22).unwrap(), vec![18, 19, 21, 22]);
        assert!(leaf_collect(&mut r, leaf, 100, 200).unwrap().is_empty());
        assert!(leaf_collect(&mut r, leaf, 5, 4).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn random_trace_matches_set_oracle(ops in proptest::collection::vec((any::<bool>(), 0u64..400), 1..1500)) {
            let p = small();
            let shared = store::<u64>(p, 64);
            let leaf = new_leaf(&shared);
            let ctx = Ctx::new(shared.clone(), TreeSel::Live);
            let mut oracle = BTreeSet::new();
            let mut batch: Vec<Update<u64>> = Vec::new();
            let flush = |batch: &mut Vec<Update<u64>>| {
                batch.sort_by_key(|u| u.key);
                run(&shared, bulk_insert(&ctx, &p, leaf, Feed::Batch(batch))).0.unwrap();
                batch.clear();
            };
            for (ins, k) in ops {
                if batch.iter().any(|u| u.key == k) {
                    flush(&mut batch);
                }
                if ins && !oracle.contains(&k) {
                    oracle.insert(k);
                    batch.push(Update::insert(k));
                } else if !ins && oracle.contains(&k) {
                    oracle.remove(&k);
                    batch.push(Update::delete(k));
                }
                if batch.len() as u64 == p.flush_quantum {
                    flush(&mut batch);
                }
            }
            flush(&mut batch);
            check(&shared, leaf, &p);
            prop_assert_eq!(content(&shared, leaf), oracle.iter().copied().collect::<Vec<_>>());
            prop_assert_eq!(shared.lock().unwrap().leaf(leaf).unwrap().net_size, oracle.len() as u64);
        }

        #[test]
        fn split_preserves_union(n in 200u64..600, stride in 1u64..7, force in any::<bool>()) {
            let p = small();
            let shared = store::<u64>(p, 64);
            let leaf = new_leaf(&shared);
            let keys: Vec<u64> = (0..n).map(|k| k * stride).collect();
            insert_all(&shared, &p, leaf, &keys);
            let ctx = Ctx::new(shared.clone(), TreeSel::Live);
            let r = run(&shared, leaf_split(&ctx, &p, leaf, force, None)).0;
            if !force && n < 4 * p.tau {
                prop_assert!(r.is_err());
                return Ok(());
            }
            let (right, sep) = r.unwrap();
            let (a, b) = (content(&shared, leaf), content(&shared, right));
            prop_assert!(a.iter().all(|&k| k < sep) && b.iter().all(|&k| k >= sep));
            prop_assert!(a.len().abs_diff(b.len()) <= 1);
            let mut all = a;
            all.extend(b);
            prop_assert_eq!(all, keys);
            check(&shared, leaf, &p);
            check(&shared, right, &p);
        }
    }
}
