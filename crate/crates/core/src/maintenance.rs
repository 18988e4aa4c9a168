//! The background maintenance cycle.
//!
//! Cycles alternate between a split phase and a merge phase. Each cycle
//! descends along the recorded per-child extremes to the globally largest
//! (or smallest) leaf, splits or merges it when it crosses a threshold,
//! then walks back up the descent path fixing node fanouts one level at a
//! time. After every level the root buffer is drained back under its limit
//! by flushing one quantum at a time along root-to-leaf paths.
//!
//! Everything runs inside [`run_maintenance`], a coroutine that suspends
//! after every block transfer and at every cycle boundary. Each structural
//! change happens in one locked step with all touched pages pinned, so the
//! logical set is consistent at every suspension point.

use crate::core_tree::{flush_step, merge_internal, merge_updates, select_flush_child, split_internal, split_internal_at, InternalNode};
use crate::engine::{yield_now, Ctx, Phase, Store, TreeSel};
use crate::error::{integrity, Result};
use crate::key::Key;
use crate::leaf_store::{bulk_insert, leaf_merge, leaf_split, Feed};
use crate::pager::BlockId;
use crate::params::Params;

/// Per-update I/O accounting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpBudgetMeter {
    /// Transfers performed by the most recent resumption.
    pub ios_since_last_yield: u64,
    /// Largest transfer count of any single resumption.
    pub max_ios_between_yields: u64,
    /// Transfers charged to the most recent user update.
    pub last_update_ios: u64,
    /// Largest transfer count charged to one update outside a rebuild.
    pub max_update_ios: u64,
    /// Largest transfer count charged to one update while a rebuild ran.
    pub max_update_ios_rebuild: u64,
    pub updates: u64,
}

impl OpBudgetMeter {
    pub(crate) fn record_resume(&mut self, ios: u64) {
        self.ios_since_last_yield = ios;
        self.max_ios_between_yields = self.max_ios_between_yields.max(ios);
    }

    pub(crate) fn record_update(&mut self, ios: u64, rebuilding: bool) {
        self.updates += 1;
        self.last_update_ios = ios;
        if rebuilding {
            self.max_update_ios_rebuild = self.max_update_ios_rebuild.max(ios);
        } else {
            self.max_update_ios = self.max_update_ios.max(ios);
        }
    }
}

fn bump(slot: &mut u64, v: u64) {
    *slot = (*slot).max(v);
}

fn child_extremes<K: Key>(s: &Store<K>, id: BlockId) -> Result<(u64, u64)> {
    let page = s.page(id)?;
    if let Some(n) = page.as_internal() {
        Ok((n.aux_max.size, n.aux_min.size))
    } else if let Some(l) = page.as_leaf() {
        Ok((l.net_size, l.net_size))
    } else {
        integrity(format!("page {id:?} is not a tree node"))
    }
}

fn slot_of<K: Key>(s: &Store<K>, parent: BlockId, child: BlockId) -> Result<usize> {
    match s.internal(parent)?.child_index(child) {
        Some(i) => Ok(i),
        None => integrity(format!("{child:?} is not a child of {parent:?}")),
    }
}

/// Copies the extremes of `path[k]` into its parent's entry, bottom-up.
/// Returns the number of levels walked.
async fn aux_walk<K: Key>(ctx: &Ctx<K>, path: &[BlockId]) -> Result<u64> {
    let mut steps = 0;
    for k in (1..path.len()).rev() {
        let (parent, child) = (path[k - 1], path[k]);
        let pins = ctx.ensure(&[parent, child]).await?;
        {
            let mut s = ctx.lock();
            let (mx, mn) = child_extremes(&s, child)?;
            let idx = slot_of(&s, parent, child)?;
            s.with_internal(ctx.t, parent, |n| n.set_child_sizes(idx, mx, mn))?;
        }
        ctx.release(pins);
        steps += 1;
    }
    Ok(steps)
}

/// Pushes one quantum from the last node of `path` to its busiest child,
/// and keeps going down while the receiving child is overfull. Returns the
/// extended path (internal nodes only) and the number of flush steps.
async fn flush_down<K: Key>(ctx: &Ctx<K>, p: &Params, mut path: Vec<BlockId>) -> Result<(Vec<BlockId>, u64)> {
    let mut steps = 0;
    loop {
        steps += 1;
        let node = *path.last().unwrap();
        ctx.touch(node).await?;
        let (idx, child, leaf_children) = {
            let s = ctx.lock();
            let n = s.internal(node)?;
            if n.buffer.is_empty() {
                return Ok((path, steps));
            }
            let (idx, _) = select_flush_child(n, n.buffer.len().min(p.buffer_cap as usize) as u64)?;
            (idx, n.children[idx], n.leaf_children)
        };
        if leaf_children {
            let pins = ctx.ensure(&[node]).await?;
            bulk_insert(ctx, p, child, Feed::Parent { node, idx }).await?;
            ctx.release(pins);
            return Ok((path, steps));
        }
        let pins = ctx.ensure(&[node, child]).await?;
        let overfull = {
            let mut s = ctx.lock();
            let mut c = match s.page(child)?.as_internal() {
                Some(c) => c.clone(),
                None => return integrity("internal node above a leaf level"),
            };
            s.with_internal(ctx.t, node, |n| flush_step(n, idx, &mut c, p.flush_quantum))?;
            let over = c.is_overfull(p.buffer_cap);
            s.with_internal(ctx.t, child, |n| n.buffer = c.buffer)?;
            over
        };
        ctx.release(pins);
        path.push(child);
        if !overfull {
            return Ok((path, steps));
        }
    }
}

/// Drains the node at the end of `path` (whose prefix is its ancestors)
/// until its buffer is within the limit. Returns the iteration count.
pub(crate) async fn drain_node<K: Key>(ctx: &Ctx<K>, p: &Params, path: &[BlockId], walk: &mut u64, depth: &mut u64) -> Result<u64> {
    let node = *path.last().unwrap();
    let mut iters = 0;
    loop {
        ctx.touch(node).await?;
        if ctx.lock().internal(node)?.buffer.len() as u64 <= p.buffer_cap {
            ctx.lock().with_internal(ctx.t, node, |n| n.overfull = false)?;
            return Ok(iters);
        }
        iters += 1;
        let (full, d) = flush_down(ctx, p, path.to_vec()).await?;
        bump(depth, d);
        bump(walk, aux_walk(ctx, &full).await?);
    }
}

/// Restores the root buffer limit.
pub(crate) async fn drain_root<K: Key>(ctx: &Ctx<K>, p: &Params) -> Result<()> {
    let root = ctx.lock().tree(ctx.t).root;
    let (mut walk, mut depth) = (0, 0);
    let iters = drain_node(ctx, p, &[root], &mut walk, &mut depth).await?;
    let mut s = ctx.lock();
    bump(&mut s.stats.l18, iters);
    bump(&mut s.stats.l19, depth);
    bump(&mut s.stats.l24, walk);
    Ok(())
}

/// Follows the extremes from the root to a leaf. Returns the internal
/// nodes on the way, the chosen child slot in the last one, and the leaf.
async fn descend<K: Key>(ctx: &Ctx<K>, largest: bool) -> Result<(Vec<BlockId>, usize, BlockId)> {
    let mut node = ctx.lock().tree(ctx.t).root;
    let mut path = Vec::new();
    loop {
        ctx.touch(node).await?;
        let (idx, child, leaf_children) = {
            let s = ctx.lock();
            let n = s.internal(node)?;
            let idx = if largest { n.aux_max.child } else { n.aux_min.child };
            (idx, n.children[idx], n.leaf_children)
        };
        path.push(node);
        if leaf_children {
            bump(&mut ctx.lock().stats.l3, path.len() as u64);
            return Ok((path, idx, child));
        }
        node = child;
    }
}

/// Split or merge the chosen leaf if it crosses its threshold.
async fn leaf_step<K: Key>(ctx: &Ctx<K>, p: &Params, largest: bool, parent: BlockId, idx: usize, leaf: BlockId) -> Result<()> {
    ctx.touch(leaf).await?;
    let net = ctx.lock().leaf(leaf)?.net_size;
    if largest {
        if net >= 4 * p.tau {
            let pins = ctx.ensure(&[parent, leaf]).await?;
            leaf_split(ctx, p, leaf, false, Some((parent, idx))).await?;
            ctx.release(pins);
        }
        return Ok(());
    }
    // Strictly below 2τ, so the two halves of a fresh split are not
    // immediately merged back.
    if net >= 2 * p.tau {
        return Ok(());
    }
    let (fanout, pivots) = {
        let s = ctx.lock();
        let n = s.internal(parent)?;
        (n.fanout(), n.pivots.clone())
    };
    if fanout < 2 {
        return Ok(());
    }
    let li = if idx + 1 < fanout { idx } else { idx - 1 };
    let (left, right) = {
        let s = ctx.lock();
        let n = s.internal(parent)?;
        (n.children[li], n.children[li + 1])
    };
    let pins = ctx.ensure(&[parent, left, right]).await?;
    let merged = leaf_merge(ctx, p, left, right, pivots[li], Some((parent, li))).await?;
    if merged > 5 * p.tau {
        leaf_split(ctx, p, left, true, Some((parent, li))).await?;
    }
    ctx.release(pins);
    Ok(())
}

/// Splits `node` in half and links the new right half after it in
/// `parent`. Returns the new node.
pub(crate) fn split_child<K: Key>(s: &mut Store<K>, t: TreeSel, parent: BlockId, node: BlockId) -> Result<BlockId> {
    let mid = s.internal(node)?.fanout() / 2;
    split_child_at(s, t, parent, node, mid)
}

pub(crate) fn split_child_at<K: Key>(
    s: &mut Store<K>,
    t: TreeSel,
    parent: BlockId,
    node: BlockId,
    mid: usize,
) -> Result<BlockId> {
    let idx = slot_of(s, parent, node)?;
    let mut left = s.internal(node)?.clone();
    let (right, sep) = split_internal_at(&mut left, mid);
    let (rmax, rmin) = (right.aux_max.size, right.aux_min.size);
    let (lmax, lmin) = (left.aux_max.size, left.aux_min.size);
    let rid = s.alloc_internal(t, right);
    s.with_internal(t, node, |n| *n = left)?;
    s.with_internal(t, parent, |n| {
        n.child_max[idx] = lmax;
        n.child_min[idx] = lmin;
        n.insert_child_after(idx, sep, rid, rmax, rmin);
    })?;
    s.stats.internal_splits += 1;
    Ok(rid)
}

/// Root split: the root keeps its id and buffer; its children move into
/// two new nodes.
pub(crate) fn split_root<K: Key>(s: &mut Store<K>, t: TreeSel, root: BlockId) -> Result<(BlockId, BlockId)> {
    let mid = s.internal(root)?.fanout() / 2;
    split_root_at(s, t, root, mid)
}

pub(crate) fn split_root_at<K: Key>(s: &mut Store<K>, t: TreeSel, root: BlockId, mid: usize) -> Result<(BlockId, BlockId)> {
    let mut left = s.internal(root)?.clone();
    left.buffer.clear();
    left.overfull = false;
    let (right, sep) = split_internal_at(&mut left, mid);
    let (lmax, lmin, rmax, rmin) = (left.aux_max.size, left.aux_min.size, right.aux_max.size, right.aux_min.size);
    let lid = s.alloc_internal(t, left);
    let rid = s.alloc_internal(t, right);
    s.with_internal(t, root, |n| {
        n.leaf_children = false;
        n.pivots = vec![sep];
        n.children = vec![lid, rid];
        n.child_max = vec![lmax, rmax];
        n.child_min = vec![lmin, rmin];
        n.recompute_aux();
    })?;
    s.tree_mut(t).height += 1;
    s.stats.internal_splits += 1;
    Ok((lid, rid))
}

/// Root collapse: the root absorbs its only (internal) child.
fn collapse_root<K: Key>(s: &mut Store<K>, t: TreeSel, root: BlockId, child: BlockId) -> Result<()> {
    let c = s.internal(child)?.clone();
    s.with_internal(t, root, |n| {
        let mut buffer = c.buffer;
        merge_updates(&mut buffer, &n.buffer);
        n.buffer = buffer;
        n.pivots = c.pivots;
        n.children = c.children;
        n.child_max = c.child_max;
        n.child_min = c.child_min;
        n.leaf_children = c.leaf_children;
        n.recompute_aux();
    })?;
    s.free_page(t, child)?;
    s.tree_mut(t).height -= 1;
    s.stats.internal_merges += 1;
    Ok(())
}

/// Fixes the fanout of `path[k]`. Returns the node, if any, left overfull
/// by a merge together with its ancestors.
async fn fix_level<K: Key>(ctx: &Ctx<K>, p: &Params, path: &[BlockId], k: usize) -> Result<Vec<Vec<BlockId>>> {
    let node = path[k];
    if k == 0 {
        ctx.touch(node).await?;
        let (fanout, leaf_children, only) = {
            let s = ctx.lock();
            let n = s.internal(node)?;
            (n.fanout() as u64, n.leaf_children, n.children[0])
        };
        if fanout > p.fanout_max {
            split_root(&mut ctx.lock(), ctx.t, node)?;
        } else if fanout == 1 && !leaf_children {
            let pins = ctx.ensure(&[node, only]).await?;
            collapse_root(&mut ctx.lock(), ctx.t, node, only)?;
            ctx.release(pins);
        }
        return Ok(Vec::new());
    }
    let parent = path[k - 1];
    let pins = ctx.ensure(&[parent, node]).await?;
    let fanout = ctx.lock().internal(node)?.fanout() as u64;
    let mut overfull = Vec::new();
    if fanout > p.fanout_max {
        split_child(&mut ctx.lock(), ctx.t, parent, node)?;
    } else if fanout < p.fanout_min {
        let (idx, pfan) = {
            let s = ctx.lock();
            (slot_of(&s, parent, node)?, s.internal(parent)?.fanout())
        };
        if pfan >= 2 {
            let li = if idx + 1 < pfan { idx } else { idx - 1 };
            let (left, right) = {
                let s = ctx.lock();
                let n = s.internal(parent)?;
                (n.children[li], n.children[li + 1])
            };
            let mpins = ctx.ensure(&[left, right]).await?;
            let split_again = {
                let mut s = ctx.lock();
                let sep = s.internal(parent)?.pivots[li];
                let r: InternalNode<K> = s.internal(right)?.clone();
                let mut l = s.internal(left)?.clone();
                merge_internal(&mut l, sep, r, p.buffer_cap)?;
                let over = l.fanout() as u64 > p.fanout_max;
                let mut halves = vec![(left, l)];
                let mut extra = None;
                if over {
                    let (r2, sep2) = split_internal(&mut halves[0].1);
                    // both halves may still carry more than the limit
                    let mut r2 = r2;
                    r2.overfull = r2.is_overfull(p.buffer_cap);
                    halves[0].1.overfull = halves[0].1.is_overfull(p.buffer_cap);
                    extra = Some((sep2, r2));
                }
                let (l, lnode) = halves.pop().unwrap();
                let (lmax, lmin) = (lnode.aux_max.size, lnode.aux_min.size);
                s.with_internal(ctx.t, l, |n| *n = lnode)?;
                s.free_page(ctx.t, right)?;
                s.with_internal(ctx.t, parent, |n| {
                    n.remove_child(li + 1);
                    n.set_child_sizes(li, lmax, lmin);
                })?;
                s.stats.internal_merges += 1;
                let mut products = vec![left];
                if let Some((sep2, r2)) = extra {
                    let (rmax, rmin) = (r2.aux_max.size, r2.aux_min.size);
                    let rid = s.alloc_internal(ctx.t, r2);
                    s.with_internal(ctx.t, parent, |n| n.insert_child_after(li, sep2, rid, rmax, rmin))?;
                    s.stats.internal_splits += 1;
                    products.push(rid);
                }
                products
            };
            ctx.release(mpins);
            for m in split_again {
                let over = ctx.lock().internal(m).map(|n| n.is_overfull(p.buffer_cap)).unwrap_or(false);
                if over {
                    let mut chain = path[..k].to_vec();
                    chain.push(m);
                    overfull.push(chain);
                }
            }
        }
    } else {
        let mut s = ctx.lock();
        let idx = slot_of(&s, parent, node)?;
        let (mx, mn) = child_extremes(&s, node)?;
        s.with_internal(ctx.t, parent, |n| n.set_child_sizes(idx, mx, mn))?;
    }
    ctx.release(pins);
    Ok(overfull)
}

/// One split-or-merge cycle of the live tree.
pub(crate) async fn cycle<K: Key>(ctx: &Ctx<K>, largest: bool) -> Result<()> {
    {
        let mut s = ctx.lock();
        s.quiescent = false;
        s.phase = if largest { Phase::Split } else { Phase::Merge };
        s.stats.cycles += 1;
        s.cycle_io = s.pager.total_io();
    }
    pass(ctx, largest).await
}

/// The body of a cycle: fix the extreme leaf, then every level on the way
/// back up, draining the root after each.
pub(crate) async fn pass<K: Key>(ctx: &Ctx<K>, largest: bool) -> Result<()> {
    let p = ctx.params();
    let live = ctx.t == TreeSel::Live;
    let (path, idx, leaf) = descend(ctx, largest).await?;
    let parent = *path.last().unwrap();
    leaf_step(ctx, &p, largest, parent, idx, leaf).await?;
    let mut levels = 0;
    for k in (0..path.len()).rev() {
        levels += 1;
        if live {
            let mut s = ctx.lock();
            s.arrivals = 0;
            s.depth = k as u32;
        }
        // A merge below may have collapsed levels above this one already.
        let alive = {
            let s = ctx.lock();
            path[..=k].iter().all(|&id| s.pager.is_allocated(id))
        };
        if !alive {
            break;
        }
        let overfull = fix_level(ctx, &p, &path, k).await?;
        for chain in overfull {
            let (mut walk, mut depth) = (0, 0);
            let iters = drain_node(ctx, &p, &chain, &mut walk, &mut depth).await?;
            let mut s = ctx.lock();
            bump(&mut s.stats.l9, iters);
            bump(&mut s.stats.l11, depth);
            bump(&mut s.stats.l16, walk);
        }
        // Re-sync the entry for this level's node after any draining below.
        if k > 0 {
            let still = ctx.lock().pager.is_allocated(path[k]);
            if still {
                aux_walk(ctx, &path[k - 1..=k]).await?;
            }
        }
        drain_root(ctx, &p).await?;
        if live {
            let mut s = ctx.lock();
            let a = s.arrivals;
            bump(&mut s.stats.arrivals, a);
        }
    }
    bump(&mut ctx.lock().stats.l5, levels);
    Ok(())
}

/// The maintenance coroutine: cycles forever, alternating phases, and
/// suspends at each cycle boundary in addition to every transfer.
pub(crate) async fn run_maintenance<K: Key>(ctx: Ctx<K>) -> Result<()> {
    let mut largest = true;
    loop {
        crate::rebuild::maybe_switch(&ctx)?;
        cycle(&ctx, largest).await?;
        largest = !largest;
        ctx.lock().quiescent = true;
        yield_now().await;
    }
}
