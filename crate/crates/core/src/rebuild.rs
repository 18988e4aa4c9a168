//! Global rebuilding.
//!
//! When the live count drifts far from the count the tree was built for,
//! a shadow tree with re-derived parameters is built next to the live one.
//! A scan walks the live key space left to right in rounds. Each round
//! reads one leaf path, takes the next `buffer_cap` candidate keys, works
//! out which of them are live from every update that can touch them, and
//! appends the survivors at the shadow's right edge. User updates for keys
//! the scan has already passed are mirrored into the shadow's root buffer
//! and drained there like in any tree. Once the scan is done the shadow
//! replaces the live tree at the next maintenance cycle boundary.
//!
//! Each round first brings the pages it needs into cache (suspending per
//! transfer, holding each page) and then reads and appends in one locked
//! step, so it always sees a consistent snapshot.

use std::collections::BTreeMap;

use crate::core_tree::InternalNode;
use crate::engine::{Ctx, Pins, Store, TreeMeta, TreeSel};
use crate::error::{integrity, Result};
use crate::key::Key;
use crate::leaf_store::{LeafNode, MicroRef};
use crate::maintenance::{drain_node, drain_root, pass, split_child_at, split_root_at};
use crate::pager::BlockId;
use crate::params::Params;

/// Start of the part of the key space the scan has not yet copied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cursor<K> {
    From(K),
    Done,
}

#[derive(Clone, Debug)]
pub struct RebuildState<K> {
    pub cursor: Cursor<K>,
    /// Scan finished and the shadow tidied; waiting for the switch.
    pub ready: bool,
    pub rounds: u64,
    pub copied: u64,
}

impl<K: Key> RebuildState<K> {
    /// Whether an update for `key` must also go to the shadow tree: exactly
    /// the keys the scan has already passed.
    pub fn mirrors(&self, key: K) -> bool {
        match self.cursor {
            Cursor::From(lo) => key < lo,
            Cursor::Done => true,
        }
    }
}

/// Growth or shrink trigger against the count `n0` the tree was built for.
pub fn should_rebuild(n0: u64, n_live: u64) -> bool {
    grown(n0, n_live) || shrunk(n0, n_live)
}

/// `n_live >= n0^2 / 2`.
pub fn grown(n0: u64, n_live: u64) -> bool {
    let (n0, n) = (n0 as u128, n_live as u128);
    2 * n >= n0 * n0
}

/// `n_live <= 1.5 sqrt(n0)`, squared to stay in integers.
pub fn shrunk(n0: u64, n_live: u64) -> bool {
    let (n0, n) = (n0 as u128, n_live as u128);
    4 * n * n <= 9 * n0
}

/// A tree starts empty, far below its shrink threshold. The shrink side
/// is armed once the count reaches twice that threshold, `3 sqrt(n0)`.
pub fn arms_shrink(n0: u64, n_live: u64) -> bool {
    let (n0, n) = (n0 as u128, n_live as u128);
    n * n >= 9 * n0
}

/// Sets up an empty shadow tree (a root over one empty leaf) for `params`.
pub(crate) fn begin<K: Key>(s: &mut Store<K>, params: Params) -> Result<()> {
    if s.shadow.is_some() {
        return integrity("a rebuild is already running");
    }
    s.shadow = Some(TreeMeta {
        params,
        root: BlockId(u64::MAX),
        height: 1,
        census: Default::default(),
        relaxed: true,
    });
    // The shadow's working set lives alongside the live one.
    let cap = s.pager.capacity() + params.default_cache_blocks();
    s.pager.set_capacity(cap);
    let leaf = s.alloc_leaf(TreeSel::Shadow, LeafNode::default());
    let root = s.alloc_internal(
        TreeSel::Shadow,
        InternalNode::with_children(true, Vec::new(), vec![leaf], vec![0], vec![0]),
    );
    s.pager.pin(root)?;
    s.tree_mut(TreeSel::Shadow).root = root;
    s.rebuild = Some(RebuildState {
        cursor: Cursor::From(K::min_value()),
        ready: false,
        rounds: 0,
        copied: 0,
    });
    Ok(())
}

/// Everything one round reads, all resident at planning time.
struct Snapshot {
    path: Vec<BlockId>,
    leaf: BlockId,
    micro: Vec<BlockId>,
    edge: Vec<BlockId>,
    last_leaf: BlockId,
}

/// Lays out a round starting at `lo`, or names the first page that still
/// has to be brought in.
fn plan<K: Key>(s: &Store<K>, lo: K, want: usize) -> Result<std::result::Result<(Snapshot, Option<K>), BlockId>> {
    let res = |id: BlockId| s.pager.is_resident(id);
    let mut node = s.live.root;
    let mut path = Vec::new();
    let mut hi = None;
    let leaf = loop {
        if !res(node) {
            return Ok(Err(node));
        }
        let n = s.internal(node)?;
        path.push(node);
        let i = n.route(lo);
        if i < n.pivots.len() {
            hi = Some(n.pivots[i]);
        }
        if n.leaf_children {
            break n.children[i];
        }
        node = n.children[i];
    };
    if !res(leaf) {
        return Ok(Err(leaf));
    }
    let l = s.leaf(leaf)?;
    let mut micro = Vec::new();
    if !l.micro.is_empty() {
        let mut have = 0;
        for m in &l.micro[l.route_micro(lo)..] {
            if !res(m.id) {
                return Ok(Err(m.id));
            }
            let keys = &s.micro(m.id)?.keys;
            have += keys.len() - keys.partition_point(|&k| k < lo);
            micro.push(m.id);
            if have >= want {
                break;
            }
        }
    }
    let mut node = s.tree(TreeSel::Shadow).root;
    let mut edge = Vec::new();
    let last_leaf = loop {
        if !res(node) {
            return Ok(Err(node));
        }
        let n = s.internal(node)?;
        edge.push(node);
        let last = *n.children.last().unwrap();
        if n.leaf_children {
            break last;
        }
        node = last;
    };
    if !res(last_leaf) {
        return Ok(Err(last_leaf));
    }
    if let Some(m) = s.leaf(last_leaf)?.micro.last() {
        if !res(m.id) {
            return Ok(Err(m.id));
        }
    }
    Ok(Ok((
        Snapshot {
            path,
            leaf,
            micro,
            edge,
            last_leaf,
        },
        hi,
    )))
}

/// Reads the round laid out by `snap` and appends its survivors. Returns
/// the new cursor.
fn execute<K: Key>(s: &mut Store<K>, snap: &Snapshot, lo: K, hi: Option<K>, bc: usize) -> Result<Cursor<K>> {
    let below_hi = |k: K| hi.is_none_or(|h| k < h);
    let mut micro_keys = Vec::new();
    for &m in &snap.micro {
        let keys = &s.micro(m)?.keys;
        micro_keys.extend(keys.iter().copied().filter(|&k| k >= lo));
        if micro_keys.len() >= 2 * bc {
            break;
        }
    }
    micro_keys.truncate(2 * bc);
    let mut updates = Vec::new();
    for &id in &snap.path {
        updates.extend(s.internal(id)?.buffer.iter().filter(|u| u.key >= lo && below_hi(u.key)).copied());
    }
    updates.extend(s.leaf(snap.leaf)?.buffer.iter().filter(|u| u.key >= lo).copied());
    let mut cand: Vec<K> = micro_keys.clone();
    cand.extend(updates.iter().filter(|u| u.is_insert()).map(|u| u.key));
    cand.sort_unstable();
    cand.dedup();
    let end = if cand.len() > bc { Some(cand[bc]) } else { hi };
    let in_round = |k: K| end.is_none_or(|e| k < e);
    let mut counts: BTreeMap<K, i64> = BTreeMap::new();
    for &k in micro_keys.iter().filter(|&&k| in_round(k)) {
        *counts.entry(k).or_default() += 1;
    }
    for u in updates.iter().filter(|u| in_round(u.key)) {
        *counts.entry(u.key).or_default() += u.sign();
    }
    let survivors: Vec<K> = counts.into_iter().filter(|&(_, c)| c > 0).map(|(k, _)| k).collect();
    append(s, snap.edge.clone(), snap.last_leaf, &survivors)?;
    let rb = s.rebuild.as_mut().unwrap();
    rb.rounds += 1;
    rb.copied += survivors.len() as u64;
    s.stats.rebuild_rounds += 1;
    Ok(end.map_or(Cursor::Done, Cursor::From))
}

/// Rewrites the size entries along the shadow's right edge, bottom-up.
fn refresh_edge<K: Key>(s: &mut Store<K>, edge: &[BlockId], leaf: BlockId) -> Result<()> {
    let net = s.leaf(leaf)?.net_size;
    let (mut mx, mut mn) = (net, net);
    for &id in edge.iter().rev() {
        s.with_internal(TreeSel::Shadow, id, |n| {
            let i = n.fanout() - 1;
            n.set_child_sizes(i, mx, mn);
            (mx, mn) = (n.aux_max.size, n.aux_min.size);
        })?;
    }
    Ok(())
}

/// Links `child` at the right end of the edge's bottom node, splitting
/// full nodes up the edge. `edge` is kept pointing at the right edge.
fn attach<K: Key>(s: &mut Store<K>, edge: &mut Vec<BlockId>, child: BlockId, sep: K) -> Result<()> {
    let t = TreeSel::Shadow;
    let p = s.tree(t).params;
    let fmax = p.fanout_max as usize;
    // Nodes left behind the edge stay as full as the right side allows.
    let keep = fmax + 1 - p.fanout_min as usize;
    let bottom = *edge.last().unwrap();
    s.with_internal(t, bottom, |n| {
        let i = n.fanout() - 1;
        n.insert_child_after(i, sep, child, 0, 0)
    })?;
    let mut level = edge.len() - 1;
    while s.internal(edge[level])?.fanout() > fmax {
        if level == 0 {
            let (_, right) = split_root_at(s, t, edge[0], keep)?;
            edge.insert(1, right);
            break;
        }
        let right = split_child_at(s, t, edge[level - 1], edge[level], keep)?;
        edge[level] = right;
        level -= 1;
    }
    Ok(())
}

/// Appends sorted keys, all above everything in the shadow, at its right
/// edge. Leaves and micro-leaves are packed three-quarters full.
fn append<K: Key>(s: &mut Store<K>, mut edge: Vec<BlockId>, mut leaf: BlockId, keys: &[K]) -> Result<()> {
    let t = TreeSel::Shadow;
    let p = s.tree(t).params;
    let leaf_fill = (3 * p.tau / 4).max(1);
    let micro_fill = (3 * p.microleaf_cap / 4).max(1) as usize;
    for &k in keys {
        if s.leaf(leaf)?.net_size >= leaf_fill {
            refresh_edge(s, &edge, leaf)?;
            let fresh = s.alloc_leaf(t, LeafNode::default());
            attach(s, &mut edge, fresh, k)?;
            leaf = fresh;
        }
        let last = s.leaf(leaf)?.micro.last().copied();
        match last {
            Some(m) if m.len < micro_fill => {
                s.with_micro(m.id, |mm| mm.keys.push(k))?;
                s.with_leaf(t, leaf, |l| {
                    l.micro.last_mut().unwrap().len += 1;
                    l.net_size += 1;
                })?;
            }
            _ => {
                let id = s.alloc_micro(vec![k]);
                s.with_leaf(t, leaf, |l| {
                    l.micro.push(MicroRef { id, first: k, len: 1 });
                    l.net_size += 1;
                })?;
            }
        }
    }
    refresh_edge(s, &edge, leaf)
}

/// Loads strictly increasing `keys` straight into a fresh shadow tree and
/// marks the scan complete; the rebuild coroutine then only tidies the
/// shadow and hands it over.
pub(crate) fn bulk<K: Key>(s: &mut Store<K>, params: Params, keys: &[K]) -> Result<()> {
    begin(s, params)?;
    let mut node = s.tree(TreeSel::Shadow).root;
    let mut edge = vec![node];
    let leaf = loop {
        let n = s.internal(node)?;
        let last = *n.children.last().unwrap();
        if n.leaf_children {
            break last;
        }
        node = last;
        edge.push(node);
    };
    append(s, edge, leaf, keys)?;
    let rb = s.rebuild.as_mut().unwrap();
    rb.cursor = Cursor::Done;
    rb.copied = keys.len() as u64;
    s.n_live = keys.len() as u64;
    Ok(())
}

/// One round. Returns false once the scan is complete.
async fn round<K: Key>(ctx: &Ctx<K>) -> Result<bool> {
    let mut held: Vec<Pins> = Vec::new();
    let out = loop {
        let missing = {
            let mut s = ctx.lock();
            let lo = match s.rebuild.as_ref().map(|r| r.cursor) {
                Some(Cursor::From(lo)) => lo,
                _ => break false,
            };
            let bc = s.live.params.buffer_cap as usize;
            match plan(&s, lo, 2 * bc)? {
                Err(id) => id,
                Ok((snap, hi)) => {
                    let next = execute(&mut s, &snap, lo, hi, bc)?;
                    s.rebuild.as_mut().unwrap().cursor = next;
                    break true;
                }
            }
        };
        if held.len() > 64 {
            // The tree kept moving under us; start over.
            for h in held.drain(..) {
                ctx.release(h);
            }
        }
        held.push(ctx.ensure(&[missing]).await?);
    };
    for h in held {
        ctx.release(h);
    }
    Ok(out)
}

/// Keeps the shadow's leaves within bounds while it grows.
/// Drains every overfull node below the shadow root, top-down, so the
/// tree goes live with at most the root over its limit.
async fn drain_below_root<K: Key>(ctx: &Ctx<K>, p: &Params) -> Result<()> {
    let root = ctx.lock().tree(TreeSel::Shadow).root;
    let (mut walk, mut depth) = (0, 0);
    let mut stack = vec![vec![root]];
    while let Some(path) = stack.pop() {
        let node = *path.last().unwrap();
        ctx.touch(node).await?;
        if path.len() > 1 && ctx.lock().internal(node)?.buffer.len() as u64 > p.buffer_cap {
            drain_node(ctx, p, &path, &mut walk, &mut depth).await?;
        }
        let n = ctx.lock().internal(node)?.clone();
        if !n.leaf_children {
            for c in n.children.into_iter().rev() {
                let mut next = path.clone();
                next.push(c);
                stack.push(next);
            }
        }
    }
    Ok(())
}

async fn tidy<K: Key>(ctx: &Ctx<K>, finishing: bool) -> Result<()> {
    let p = ctx.params();
    drain_root(ctx, &p).await?;
    if finishing {
        drain_below_root(ctx, &p).await?;
    }
    loop {
        let (leaves, mn, mx) = {
            let s = ctx.lock();
            let c = &s.tree(TreeSel::Shadow).census;
            (c.leaves(), c.min_leaf().unwrap_or(0), c.max_leaf().unwrap_or(0))
        };
        // Between rounds the right-edge leaf is still filling, so small
        // leaves are only merged once the copy is complete.
        let largest = if mx >= 4 * p.tau {
            true
        } else if finishing && leaves > 1 && mn < p.tau / 4 {
            false
        } else {
            return Ok(());
        };
        let churn = |c: &Ctx<K>| {
            let s = c.lock();
            s.stats.leaf_splits + s.stats.leaf_merges
        };
        let before = churn(ctx);
        pass(ctx, largest).await?;
        let after = churn(ctx);
        if after == before {
            return Ok(());
        }
    }
}

/// The rebuild coroutine, run against the shadow tree.
pub(crate) async fn run_rebuild<K: Key>(ctx: Ctx<K>) -> Result<()> {
    debug_assert_eq!(ctx.t, TreeSel::Shadow);
    while round(&ctx).await? {
        tidy(&ctx, false).await?;
    }
    tidy(&ctx, true).await?;
    if let Some(r) = ctx.lock().rebuild.as_mut() {
        r.ready = true;
    }
    Ok(())
}

/// Swaps in a finished shadow tree and frees the old one. Called by
/// maintenance at cycle boundaries only.
pub(crate) fn maybe_switch<K: Key>(ctx: &Ctx<K>) -> Result<()> {
    let mut s = ctx.lock();
    if !s.rebuild.as_ref().is_some_and(|r| r.ready) {
        return Ok(());
    }
    let shadow = s.shadow.take().unwrap();
    let old = std::mem::replace(&mut s.live, shadow);
    let mut stack = vec![old.root];
    let mut pages = Vec::new();
    while let Some(id) = stack.pop() {
        pages.push(id);
        match s.pager.peek(id)? {
            crate::page::Page::Internal(n) => stack.extend(n.children.iter().copied()),
            crate::page::Page::Leaf(l) => pages.extend(l.micro.iter().map(|m| m.id)),
            _ => {}
        }
    }
    for id in pages {
        s.holds.remove(&id);
        if s.pager.is_pinned(id) {
            s.pager.unpin(id)?;
        }
        s.pager.free(id)?;
    }
    let cap = s
        .pager
        .capacity()
        .saturating_sub(old.params.default_cache_blocks())
        .max(s.live.params.default_cache_blocks());
    s.pager.set_capacity(cap);
    s.n0 = s.n_live.max(s.live.params.block);
    s.rebuild = None;
    s.stats.rebuilds += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trigger_thresholds() {
        assert!(!should_rebuild(1_000_000, 1_000_000));
        assert!(should_rebuild(1_000, 500_000));
        assert!(!should_rebuild(1_000, 499_999));
        assert!(should_rebuild(1_000_000, 1500));
        assert!(!should_rebuild(1_000_000, 1501));
        assert!(!arms_shrink(10_000, 299));
        assert!(arms_shrink(10_000, 300));
    }

    #[test]
    fn mirror_rule_follows_cursor() {
        let r = RebuildState {
            cursor: Cursor::From(10u32),
            ready: false,
            rounds: 0,
            copied: 0,
        };
        assert!(r.mirrors(9));
        assert!(!r.mirrors(10));
        let done = RebuildState {
            cursor: Cursor::<u32>::Done,
            ..r
        };
        assert!(done.mirrors(u32::MAX));
    }
}
