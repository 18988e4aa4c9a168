//! Read-only queries.
//!
//! A key's live state is spread over the buffers on its root-to-leaf path
//! and the leaf's micro-tree. Predecessor search gathers the largest
//! insertions at or below the query key from the leaves and from the
//! ancestor buffers, gathers the deletions that could cancel them, and
//! picks the largest uncancelled insertion with [`largest_not_in`]. Range
//! reports combine signed counts over every page that can hold a key in
//! range.
//!
//! Queries read pages through a [`Reader`] and never touch cache state.

use std::collections::{BTreeMap, HashSet};
use std::hash::Hash;

use crate::core_tree::Update;
use crate::error::{contract, integrity, Result};
use crate::key::{Ext, Key};
use crate::page::Page;
use crate::pager::{BlockId, Pager};
use crate::reader::Reader;

/// Blocks read by one query.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct QueryCost {
    /// Every block of every page read, as from an empty cache.
    pub cold: u64,
    /// Blocks read that were not cached.
    pub warm: u64,
    /// Block accesses spent in the selection procedure.
    pub select: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryResult<T> {
    pub value: T,
    pub cost: QueryCost,
}

fn scan(len: usize, block: u64) -> u64 {
    (len as u64).div_ceil(block).max(1)
}

/// `r`-th largest (1-based) of `v`, reordering `v` so that the `r` largest
/// occupy the tail.
fn select_top<T: Ord + Copy>(v: &mut [T], r: usize) -> T {
    let at = v.len() - r;
    *v.select_nth_unstable(at).1
}

/// Largest element of `x` not in `y`, for `|x| = 2|y|` and `y` a subset
/// of `x`. Neither input needs to be sorted. Returns the element (none when
/// both are empty) and the number of block accesses spent, which is linear
/// in `|x| / block`.
pub fn largest_not_in<T: Ord + Copy + Hash>(x: &[T], y: &[T], block: u64) -> Result<(Option<T>, u64)> {
    if x.len() != 2 * y.len() {
        return contract(format!("|X| = {} is not twice |Y| = {}", x.len(), y.len()));
    }
    let xs: HashSet<T> = x.iter().copied().collect();
    if xs.len() != x.len() || y.iter().collect::<HashSet<_>>().len() != y.len() {
        return contract("inputs must be sets");
    }
    if !y.iter().all(|e| xs.contains(e)) {
        return contract("Y is not a subset of X");
    }
    if x.is_empty() {
        return Ok((None, 0));
    }
    let (e, cost) = select_unmatched(x.to_vec(), y.to_vec(), block);
    Ok((Some(e), cost))
}

/// Core of [`largest_not_in`] without the precondition checks; requires
/// `y` a subset of `x` and `|y| < |x|`.
pub(crate) fn select_unmatched<T: Ord + Copy>(mut x: Vec<T>, mut y: Vec<T>, block: u64) -> (T, u64) {
    let mut cost = 0;
    loop {
        // The answer is among the |y|+1 largest of x.
        if x.len() > y.len() + 1 {
            cost += scan(x.len(), block);
            let keep = y.len() + 1;
            select_top(&mut x, keep);
            x.drain(..x.len() - keep);
            let floor = *x.iter().min().unwrap();
            cost += scan(y.len(), block);
            y.retain(|&e| e >= floor);
        }
        if y.is_empty() {
            cost += scan(x.len(), block);
            return (*x.iter().max().unwrap(), cost);
        }
        if x.len() <= block.max(2) as usize {
            // Both lists fit in a block: one read each, the rest in memory.
            cost += scan(x.len(), block) + scan(y.len(), block);
            let best = x.iter().copied().filter(|e| !y.contains(e)).max().unwrap();
            return (best, cost);
        }
        let r = x.len() / 2;
        cost += scan(x.len(), block) + scan(y.len(), block);
        let e = select_top(&mut x, r);
        let above = y.iter().filter(|&&v| v >= e).count();
        if above == r {
            // The r largest of x are all cancelled.
            x.truncate(x.len() - r);
            y.retain(|&v| v < e);
        } else {
            x.drain(..x.len() - r);
            y.retain(|&v| v >= e);
        }
    }
}

/// Root-to-leaf path for `key`, read through `reader`. Returns the
/// internal nodes, the leaf, and the leaf's lower and upper fences.
fn path_to<K: Key>(
    reader: &mut Reader<'_, K>,
    root: BlockId,
    key: K,
) -> Result<(Vec<BlockId>, BlockId, Option<K>, Option<K>)> {
    let mut node = root;
    let mut path = Vec::new();
    let (mut lo, mut hi) = (None, None);
    loop {
        let Some(n) = reader.read(node)?.as_internal() else {
            return integrity(format!("page {node:?} is not an internal node"));
        };
        path.push(node);
        if n.children.is_empty() {
            return integrity("descent reached an empty node");
        }
        let i = n.route(key);
        if i > 0 {
            lo = Some(n.pivots[i - 1]);
        }
        if i < n.pivots.len() {
            hi = Some(n.pivots[i]);
        }
        if n.leaf_children {
            return Ok((path, n.children[i], lo, hi));
        }
        node = n.children[i];
    }
}

fn buffer<'a, K: Key>(reader: &mut Reader<'a, K>, id: BlockId) -> Result<&'a [Update<K>]> {
    match reader.read(id)?.as_internal() {
        Some(n) => Ok(&n.buffer),
        None => integrity(format!("page {id:?} is not an internal node")),
    }
}

/// Leaf insertions `<= q`: whole micro-leaves are read from the one
/// holding `q` leftwards until `want` keys are gathered. Also returns the
/// leaf's buffered updates `<= q`.
fn leaf_below<K: Key>(
    reader: &mut Reader<'_, K>,
    leaf: BlockId,
    q: K,
    want: usize,
) -> Result<(Vec<K>, Vec<Update<K>>)> {
    let Some(l) = reader.read(leaf)?.as_leaf() else {
        return integrity(format!("page {leaf:?} is not a leaf"));
    };
    let mut keys = Vec::new();
    if !l.micro.is_empty() {
        let mut j = l.route_micro(q) as isize;
        while j >= 0 && keys.len() < want {
            let m = l.micro[j as usize];
            let Some(mk) = reader.read(m.id)?.as_micro() else {
                return integrity(format!("page {:?} is not a micro-leaf", m.id));
            };
            let cut = mk.keys.partition_point(|&k| k <= q);
            keys.extend_from_slice(&mk.keys[..cut]);
            j -= 1;
        }
    }
    let cut = l.buffer.partition_point(|u| u.key <= q);
    Ok((keys, l.buffer[..cut].to_vec()))
}

/// Largest live key `<= q`.
pub fn predecessor<K: Key>(
    pager: &Pager<Page<K>>,
    root: BlockId,
    window: usize,
    q: K,
) -> Result<QueryResult<Option<K>>> {
    let mut window = window.max(1);
    loop {
        let mut reader = Reader::new(pager);
        let (value, select, complete) = predecessor_window(&mut reader, root, window, q)?;
        if value.is_some() || complete {
            return Ok(QueryResult {
                value,
                cost: QueryCost {
                    cold: reader.cold,
                    warm: reader.warm,
                    select,
                },
            });
        }
        // Every gathered insertion was cancelled: widen and retry.
        window *= 2;
    }
}

/// One attempt with `window` leaf insertions. The flag reports whether the
/// leftmost leaf was reached, in which case a `None` is final.
fn predecessor_window<K: Key>(
    reader: &mut Reader<'_, K>,
    root: BlockId,
    window: usize,
    q: K,
) -> Result<(Option<K>, u64, bool)> {
    let block = reader.block();
    let mut l1: Vec<K> = Vec::new();
    let mut ld: Vec<K> = Vec::new();
    let mut l2: Vec<K> = Vec::new();
    let mut seen_nodes = HashSet::new();
    let mut probe = q;
    let mut reached_left = false;
    loop {
        let (path, leaf, lo, _) = path_to(reader, root, probe)?;
        for id in path {
            if seen_nodes.insert(id) {
                for u in buffer(reader, id)?.iter().filter(|u| u.key <= q) {
                    if u.is_insert() {
                        l2.push(u.key);
                    } else {
                        ld.push(u.key);
                    }
                }
            }
        }
        let (keys, buf) = leaf_below(reader, leaf, probe, window - l1.len().min(window))?;
        l1.extend(keys);
        for u in buf {
            if u.is_insert() {
                l1.push(u.key);
            } else {
                ld.push(u.key);
            }
        }
        if l1.len() >= window {
            break;
        }
        match lo {
            Some(f) => probe = f - K::one(),
            None => {
                reached_left = true;
                break;
            }
        }
    }
    // L3: the `window` largest insertions of L1 and L2.
    let mut l3 = l1;
    l3.extend(l2);
    l3.sort_unstable();
    l3.dedup();
    let full = l3.len() > window;
    if full {
        l3.drain(..l3.len() - window);
    }
    let members: HashSet<K> = l3.iter().copied().collect();
    ld.sort_unstable();
    ld.dedup();
    ld.retain(|k| members.contains(k));
    let d = ld.len();
    if l3.is_empty() {
        return Ok((None, 0, reached_left && !full));
    }
    // Pad to |X| = 2|Y| with sentinels below every key.
    let mut x: Vec<Ext<K>> = l3.iter().map(|&k| Ext::Key(k)).collect();
    let mut y: Vec<Ext<K>> = ld.iter().map(|&k| Ext::Key(k)).collect();
    if l3.len() >= 2 * d {
        let pad = l3.len() - 2 * d;
        x.extend((0..pad).map(Ext::NegInf));
        y.extend((0..pad).map(Ext::NegInf));
    } else {
        x.extend((0..2 * d - l3.len()).map(Ext::NegInf));
    }
    if y.len() == x.len() {
        return Ok((None, 0, reached_left && !full));
    }
    let (best, cost) = select_unmatched(x, y, block);
    Ok((best.key(), cost, reached_left && !full))
}

/// Live keys in `[a, b]`, sorted.
pub fn range_report<K: Key>(pager: &Pager<Page<K>>, root: BlockId, a: K, b: K) -> Result<QueryResult<Vec<K>>> {
    if a > b {
        return contract("range has a > b");
    }
    let mut reader = Reader::new(pager);
    let mut counts: BTreeMap<K, i64> = BTreeMap::new();
    let mut seen_nodes = HashSet::new();
    let mut probe = a;
    loop {
        let (path, leaf, _, hi) = path_to(&mut reader, root, probe)?;
        for id in path {
            if seen_nodes.insert(id) {
                let buf = buffer(&mut reader, id)?;
                let s = buf.partition_point(|u| u.key < a);
                for u in buf[s..].iter().take_while(|u| u.key <= b) {
                    *counts.entry(u.key).or_default() += u.sign();
                }
            }
        }
        let (keys, buf) = crate::leaf_store::leaf_raw(&mut reader, leaf, a, b)?;
        for k in keys {
            *counts.entry(k).or_default() += 1;
        }
        for u in buf {
            *counts.entry(u.key).or_default() += u.sign();
        }
        match hi {
            Some(h) if h <= b => probe = h,
            _ => break,
        }
    }
    let value = counts.into_iter().filter(|&(_, c)| c > 0).map(|(k, _)| k).collect();
    Ok(QueryResult {
        value,
        cost: QueryCost {
            cold: reader.cold,
            warm: reader.warm,
            select: 0,
        },
    })
}

pub fn member<K: Key>(pager: &Pager<Page<K>>, root: BlockId, window: usize, q: K) -> Result<QueryResult<bool>> {
    let r = predecessor(pager, root, window, q)?;
    Ok(QueryResult {
        value: r.value == Some(q),
        cost: r.cost,
    })
}
