//! The classic amortized B^ε-tree, kept as a yardstick.
//!
//! Internal nodes have up to `B^ε` children and a buffer of up to `B`
//! updates. A full buffer sends every update routed to its busiest child
//! down in one go, and whatever that child overflows with goes further down
//! before the call returns. Leaves hold `[B/4, B]` keys. Queries push the
//! updates on their search path down to the leaf.
//!
//! Nothing bounds the work done by one update: a flush can split or merge
//! nodes all the way down and back up, and a merge can combine two buffers
//! that then flush again. That unbounded tail is what the deamortized tree
//! removes, so this module makes no attempt to smooth it.

use crate::core_tree::{merge_updates, route_key, Update, UpdateKind};
use crate::error::{integrity, PagerError, ParamError, Result};
use crate::key::Key;
use crate::pager::{BlockId, Extent, IoStats, PageCodec, Pager, PagerResult};
use crate::params::{floor_pow, Params};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineParams {
    pub block: u64,
    pub epsilon: f64,
    pub fanout_max: u64,
    pub fanout_min: u64,
    pub buffer_cap: u64,
    pub leaf_min: u64,
    pub leaf_max: u64,
}

impl BaselineParams {
    pub fn new(block: u64, epsilon: f64) -> Result<Self, ParamError> {
        if block < 16 {
            return Err(ParamError::BlockTooSmall(block));
        }
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(ParamError::EpsilonOutOfRange(epsilon));
        }
        let fanout_max = floor_pow(block, epsilon).max(4);
        Ok(BaselineParams {
            block,
            epsilon,
            fanout_max,
            fanout_min: (fanout_max / 2).max(2),
            buffer_cap: block,
            leaf_min: block / 4,
            leaf_max: block,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BNode<K> {
    pub leaf_children: bool,
    pub pivots: Vec<K>,
    pub children: Vec<BlockId>,
    /// Key-sorted, at most one update per key.
    pub buffer: Vec<Update<K>>,
}

impl<K: Key> BNode<K> {
    fn run(&self, idx: usize) -> std::ops::Range<usize> {
        let lo = if idx == 0 {
            0
        } else {
            self.buffer.partition_point(|u| u.key < self.pivots[idx - 1])
        };
        let hi = if idx == self.pivots.len() {
            self.buffer.len()
        } else {
            self.buffer.partition_point(|u| u.key < self.pivots[idx])
        };
        lo..hi
    }

    fn take(&mut self, idx: usize) -> Vec<Update<K>> {
        let r = self.run(idx);
        self.buffer.drain(r).collect()
    }

    fn busiest(&self) -> usize {
        (0..self.children.len())
            .max_by_key(|&i| (self.run(i).len(), std::cmp::Reverse(i)))
            .unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BPage<K> {
    Internal(BNode<K>),
    Leaf(Vec<K>),
}

impl<K: Key> Extent for BPage<K> {
    fn span(&self, block: u64) -> u64 {
        let units = match self {
            BPage::Internal(n) => n.buffer.len() + n.pivots.len() + 2 * n.children.len(),
            BPage::Leaf(keys) => keys.len(),
        };
        (units as u64).div_ceil(block).max(1)
    }
}

impl<K: Key> PageCodec for BPage<K> {
    fn encode(&self, out: &mut Vec<u8>) {
        let len = |out: &mut Vec<u8>, n: usize| out.extend_from_slice(&(n as u32).to_le_bytes());
        match self {
            BPage::Internal(n) => {
                out.push(1);
                out.push(n.leaf_children as u8);
                len(out, n.pivots.len());
                n.pivots.iter().for_each(|p| p.encode_le(out));
                len(out, n.children.len());
                n.children.iter().for_each(|c| out.extend_from_slice(&c.0.to_le_bytes()));
                len(out, n.buffer.len());
                for u in &n.buffer {
                    out.push(if u.is_insert() { 1 } else { 2 });
                    u.key.encode_le(out);
                }
            }
            BPage::Leaf(keys) => {
                out.push(2);
                len(out, keys.len());
                keys.iter().for_each(|k| k.encode_le(out));
            }
        }
    }

    fn decode(bytes: &[u8]) -> PagerResult<Self> {
        let mut r = Bytes { bytes, pos: 0 };
        match r.take(1)?[0] {
            1 => {
                let leaf_children = r.take(1)?[0] != 0;
                let n = r.len()?;
                let pivots = (0..n).map(|_| r.key()).collect::<PagerResult<_>>()?;
                let n = r.len()?;
                let children = (0..n)
                    .map(|_| Ok(BlockId(u64::from_le_bytes(r.take(8)?.try_into().unwrap()))))
                    .collect::<PagerResult<_>>()?;
                let n = r.len()?;
                let buffer = (0..n)
                    .map(|_| {
                        let kind = match r.take(1)?[0] {
                            1 => UpdateKind::Insert,
                            2 => UpdateKind::Delete,
                            t => return Err(PagerError::Codec(format!("bad update kind {t}"))),
                        };
                        Ok(Update { key: r.key()?, kind })
                    })
                    .collect::<PagerResult<_>>()?;
                Ok(BPage::Internal(BNode { leaf_children, pivots, children, buffer }))
            }
            2 => {
                let n = r.len()?;
                let keys = (0..n).map(|_| r.key()).collect::<PagerResult<_>>()?;
                Ok(BPage::Leaf(keys))
            }
            t => Err(PagerError::Codec(format!("bad page tag {t}"))),
        }
    }
}

struct Bytes<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Bytes<'a> {
    fn take(&mut self, n: usize) -> PagerResult<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| PagerError::Codec("truncated page".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn len(&mut self) -> PagerResult<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn key<K: Key>(&mut self) -> PagerResult<K> {
        Ok(K::decode_le(self.take(K::WIDTH)?))
    }
}

/// Structural work done so far.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BaselineStats {
    pub flushes: u64,
    pub leaf_splits: u64,
    pub leaf_merges: u64,
    pub internal_splits: u64,
    pub internal_merges: u64,
}

/// Amortized B^ε-tree over the counting pager.
pub struct AmortizedTree<K> {
    p: BaselineParams,
    pager: Pager<BPage<K>>,
    root: BlockId,
    /// Internal levels above the leaves.
    height: u64,
    len: u64,
    stats: BaselineStats,
    max_update_ios: u64,
    last_update_ios: u64,
}

impl<K: Key> AmortizedTree<K> {
    /// `cache_blocks` defaults to what the deamortized tree would get for
    /// `(B, epsilon, n_cap)`, so the two run with the same memory.
    pub fn new(p: BaselineParams, cache_blocks: u64) -> Self {
        let mut pager = Pager::new(p.block, cache_blocks);
        let leaf = pager.alloc(BPage::Leaf(Vec::new()));
        let root = pager.alloc(BPage::Internal(BNode {
            leaf_children: true,
            pivots: Vec::new(),
            children: vec![leaf],
            buffer: Vec::new(),
        }));
        AmortizedTree {
            p,
            pager,
            root,
            height: 1,
            len: 0,
            stats: BaselineStats::default(),
            max_update_ios: 0,
            last_update_ios: 0,
        }
    }

    pub fn for_params(params: &Params) -> Result<Self, ParamError> {
        Ok(Self::new(
            BaselineParams::new(params.block, params.epsilon)?,
            params.default_cache_blocks(),
        ))
    }

    pub fn params(&self) -> BaselineParams {
        self.p
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn io(&self) -> IoStats {
        self.pager.stats()
    }

    pub fn io_total(&self) -> u64 {
        self.pager.total_io()
    }

    pub fn stats(&self) -> BaselineStats {
        self.stats
    }

    /// `(height, leaves)`, kept up to date without a walk.
    pub fn shape(&self) -> (u64, u64) {
        let s = &self.stats;
        (self.height, 1 + s.leaf_splits - s.leaf_merges)
    }

    pub fn max_update_ios(&self) -> u64 {
        self.max_update_ios
    }

    pub fn last_update_ios(&self) -> u64 {
        self.last_update_ios
    }

    fn load(&mut self, id: BlockId) -> Result<BPage<K>> {
        self.pager.fetch(id)?;
        Ok(self.pager.get(id)?.clone())
    }

    fn load_node(&mut self, id: BlockId) -> Result<BNode<K>> {
        match self.load(id)? {
            BPage::Internal(n) => Ok(n),
            BPage::Leaf(_) => integrity("expected an internal node"),
        }
    }

    fn store(&mut self, id: BlockId, page: BPage<K>) -> Result<()> {
        self.pager.fetch(id)?;
        self.pager.update(id, |p| *p = page)?;
        Ok(())
    }

    pub fn insert(&mut self, key: K) -> Result<()> {
        self.apply(Update::insert(key))
    }

    pub fn delete(&mut self, key: K) -> Result<()> {
        self.apply(Update::delete(key))
    }

    pub fn apply(&mut self, u: Update<K>) -> Result<()> {
        let start = self.pager.total_io();
        let mut root = self.load_node(self.root)?;
        merge_updates(&mut root.buffer, &[u]);
        match u.kind {
            UpdateKind::Insert => self.len += 1,
            UpdateKind::Delete => self.len = self.len.saturating_sub(1),
        }
        self.flush(&mut root)?;
        self.settle_root(root)?;
        let ios = self.pager.total_io() - start;
        self.last_update_ios = ios;
        self.max_update_ios = self.max_update_ios.max(ios);
        Ok(())
    }

    /// Empties full buffers: everything for the busiest child goes down.
    fn flush(&mut self, node: &mut BNode<K>) -> Result<()> {
        while node.buffer.len() as u64 >= self.p.buffer_cap {
            let idx = node.busiest();
            let ups = node.take(idx);
            self.stats.flushes += 1;
            self.push_child(node, idx, ups, None)?;
        }
        Ok(())
    }

    /// Merges `ups` into child `idx`, follows `path` further down if given,
    /// and repairs the child's size. Returns the leaf reached along `path`
    /// with its fences.
    fn push_child(
        &mut self,
        node: &mut BNode<K>,
        idx: usize,
        ups: Vec<Update<K>>,
        path: Option<(K, Option<K>, Option<K>)>,
    ) -> Result<Option<Reached<K>>> {
        let id = node.children[idx];
        let mut reached = None;
        match self.load(id)? {
            BPage::Leaf(mut keys) => {
                apply_to_leaf(&mut keys, &ups);
                if let Some((_, lower, upper)) = path {
                    reached = Some(Reached { keys: keys.clone(), lower, upper });
                }
                self.store(id, BPage::Leaf(keys))?;
                self.fix_leaf(node, idx)?;
            }
            BPage::Internal(mut c) => {
                merge_updates(&mut c.buffer, &ups);
                if let Some(path) = path {
                    reached = self.push_path(&mut c, path)?;
                }
                self.flush(&mut c)?;
                self.store(id, BPage::Internal(c))?;
                self.fix_internal(node, idx)?;
            }
        }
        Ok(reached)
    }

    fn push_path(&mut self, node: &mut BNode<K>, (q, lower, upper): (K, Option<K>, Option<K>)) -> Result<Option<Reached<K>>> {
        let idx = route_key(&node.pivots, q);
        let lower = if idx == 0 { lower } else { Some(node.pivots[idx - 1]) };
        let upper = node.pivots.get(idx).copied().or(upper);
        let ups = node.take(idx);
        self.push_child(node, idx, ups, Some((q, lower, upper)))
    }

    fn fix_leaf(&mut self, node: &mut BNode<K>, idx: usize) -> Result<()> {
        let id = node.children[idx];
        let keys = match self.load(id)? {
            BPage::Leaf(k) => k,
            BPage::Internal(_) => return integrity("expected a leaf"),
        };
        let n = keys.len() as u64;
        if n > self.p.leaf_max {
            let parts = (2 * n).div_ceil(self.p.leaf_max) as usize;
            self.split_leaf(node, idx, keys, parts)?;
        } else if n < self.p.leaf_min && node.children.len() > 1 {
            let (l, r) = if idx + 1 < node.children.len() { (idx, idx + 1) } else { (idx - 1, idx) };
            let mut left = self.load_leaf(node.children[l])?;
            let right = self.load_leaf(node.children[r])?;
            self.stats.leaf_merges += 1;
            left.extend(right);
            self.pager.free(node.children[r])?;
            node.children.remove(r);
            node.pivots.remove(l);
            if left.len() as u64 > self.p.leaf_max {
                self.split_leaf(node, l, left, 2)?;
            } else {
                self.store(node.children[l], BPage::Leaf(left))?;
            }
        }
        Ok(())
    }

    fn load_leaf(&mut self, id: BlockId) -> Result<Vec<K>> {
        match self.load(id)? {
            BPage::Leaf(k) => Ok(k),
            BPage::Internal(_) => integrity("expected a leaf"),
        }
    }

    fn split_leaf(&mut self, node: &mut BNode<K>, idx: usize, keys: Vec<K>, parts: usize) -> Result<()> {
        self.stats.leaf_splits += parts as u64 - 1;
        let n = keys.len();
        let mut chunks: Vec<Vec<K>> = (0..parts).map(|i| keys[i * n / parts..(i + 1) * n / parts].to_vec()).collect();
        let first = chunks.remove(0);
        self.store(node.children[idx], BPage::Leaf(first))?;
        for (j, c) in chunks.into_iter().enumerate() {
            let pivot = c[0];
            let id = self.pager.alloc(BPage::Leaf(c));
            node.children.insert(idx + 1 + j, id);
            node.pivots.insert(idx + j, pivot);
        }
        Ok(())
    }

    /// Splits or merges child `idx` until its fanout is in range. A merge
    /// concatenates two buffers, which may flush again.
    fn fix_internal(&mut self, node: &mut BNode<K>, mut idx: usize) -> Result<()> {
        loop {
            let id = node.children[idx];
            let mut c = self.load_node(id)?;
            let f = c.children.len() as u64;
            if f > self.p.fanout_max {
                let (right, pivot) = split_node(&mut c);
                self.stats.internal_splits += 1;
                self.store(id, BPage::Internal(c))?;
                let rid = self.pager.alloc(BPage::Internal(right));
                node.children.insert(idx + 1, rid);
                node.pivots.insert(idx, pivot);
                // Either half may still be too wide after a big flush.
                self.fix_internal(node, idx + 1)?;
                continue;
            }
            if f < self.p.fanout_min && node.children.len() > 1 {
                let (l, r) = if idx + 1 < node.children.len() { (idx, idx + 1) } else { (idx - 1, idx) };
                let mut left = self.load_node(node.children[l])?;
                let right = self.load_node(node.children[r])?;
                self.stats.internal_merges += 1;
                left.pivots.push(node.pivots[l]);
                left.pivots.extend(right.pivots);
                left.children.extend(right.children);
                left.buffer.extend(right.buffer);
                self.pager.free(node.children[r])?;
                node.children.remove(r);
                node.pivots.remove(l);
                self.flush(&mut left)?;
                self.store(node.children[l], BPage::Internal(left))?;
                idx = l;
                continue;
            }
            return Ok(());
        }
    }

    fn settle_root(&mut self, mut root: BNode<K>) -> Result<()> {
        loop {
            if root.children.len() as u64 > self.p.fanout_max {
                let (right, pivot) = split_node(&mut root);
                let lid = self.pager.alloc(BPage::Internal(root));
                let rid = self.pager.alloc(BPage::Internal(right));
                self.height += 1;
                root = BNode {
                    leaf_children: false,
                    pivots: vec![pivot],
                    children: vec![lid, rid],
                    buffer: Vec::new(),
                };
                self.fix_internal(&mut root, 0)?;
                let last = root.children.len() - 1;
                self.fix_internal(&mut root, last)?;
                continue;
            }
            if root.children.len() == 1 && !root.leaf_children {
                let only = root.children[0];
                let mut c = self.load_node(only)?;
                merge_updates(&mut c.buffer, &root.buffer);
                self.pager.free(only)?;
                self.height -= 1;
                root = c;
                self.flush(&mut root)?;
                continue;
            }
            return self.store(self.root, BPage::Internal(root));
        }
    }

    /// Pushes every update on the path to the leaf covering `q` into that
    /// leaf, restructuring on the way back up.
    fn descend(&mut self, q: K) -> Result<Reached<K>> {
        let mut root = self.load_node(self.root)?;
        let reached = self.push_path(&mut root, (q, None, None))?;
        self.settle_root(root)?;
        reached.map_or_else(|| integrity("search path ended above a leaf"), Ok)
    }

    /// Largest present key `<= q`.
    pub fn predecessor(&mut self, mut q: K) -> Result<Option<K>> {
        loop {
            let r = self.descend(q)?;
            if let Some(&k) = r.keys.iter().rev().find(|&&k| k <= q) {
                return Ok(Some(k));
            }
            match r.lower {
                Some(l) if l > K::min_value() => q = l - K::one(),
                _ => return Ok(None),
            }
        }
    }

    pub fn member(&mut self, k: K) -> Result<bool> {
        Ok(self.predecessor(k)? == Some(k))
    }

    /// Present keys in `[a, b]`, ascending.
    pub fn range(&mut self, a: K, b: K) -> Result<Vec<K>> {
        let mut out = Vec::new();
        let mut at = a;
        while at <= b {
            let r = self.descend(at)?;
            out.extend(r.keys.iter().copied().filter(|&k| k >= at && k <= b));
            match r.upper {
                Some(u) if u > at => at = u,
                _ => break,
            }
        }
        Ok(out)
    }

    /// Logical contents, ascending. Not charged.
    pub fn contents(&self) -> Result<Vec<K>> {
        let mut out = std::collections::BTreeSet::new();
        self.collect(self.root, &mut out)?;
        Ok(out.into_iter().collect())
    }

    fn collect(&self, id: BlockId, out: &mut std::collections::BTreeSet<K>) -> Result<()> {
        match self.pager.peek(id)? {
            BPage::Leaf(keys) => out.extend(keys.iter().copied()),
            BPage::Internal(n) => {
                for &c in &n.children {
                    self.collect(c, out)?;
                }
                for u in &n.buffer {
                    match u.kind {
                        UpdateKind::Insert => out.insert(u.key),
                        UpdateKind::Delete => out.remove(&u.key),
                    };
                }
            }
        }
        Ok(())
    }

    /// Structural check. Not charged.
    pub fn audit(&self) -> Vec<String> {
        let mut v = Vec::new();
        let single = matches!(self.pager.peek(self.root), Ok(BPage::Internal(n)) if n.children.len() == 1 && n.leaf_children);
        let mut depths = Vec::new();
        self.audit_node(self.root, None, None, 0, true, single, &mut depths, &mut v);
        if depths.windows(2).any(|w| w[0] != w[1]) {
            v.push("leaves at different depths".into());
        }
        let (height, leaves) = self.shape();
        if depths.len() as u64 != leaves || depths.first().is_some_and(|&d| d as u64 != height) {
            v.push(format!("shape counters ({height}, {leaves}) disagree with the tree"));
        }
        v
    }

    #[allow(clippy::too_many_arguments)]
    fn audit_node(
        &self,
        id: BlockId,
        lo: Option<K>,
        hi: Option<K>,
        depth: usize,
        is_root: bool,
        single_leaf: bool,
        depths: &mut Vec<usize>,
        v: &mut Vec<String>,
    ) {
        let inside = |k: K| lo.is_none_or(|l| k >= l) && hi.is_none_or(|h| k < h);
        match self.pager.peek(id) {
            Err(e) => v.push(format!("{id:?}: {e}")),
            Ok(BPage::Leaf(keys)) => {
                depths.push(depth);
                let n = keys.len() as u64;
                if !single_leaf && (n < self.p.leaf_min || n > self.p.leaf_max) {
                    v.push(format!("leaf {id:?} holds {n}"));
                }
                if !keys.windows(2).all(|w| w[0] < w[1]) || !keys.iter().all(|&k| inside(k)) {
                    v.push(format!("leaf {id:?} keys out of order or range"));
                }
            }
            Ok(BPage::Internal(n)) => {
                if n.buffer.len() as u64 >= self.p.buffer_cap {
                    v.push(format!("node {id:?} buffers {}", n.buffer.len()));
                }
                let f = n.children.len() as u64;
                if f > self.p.fanout_max || (!is_root && f < self.p.fanout_min) || f == 0 {
                    v.push(format!("node {id:?} has fanout {f}"));
                }
                if n.pivots.len() + 1 != n.children.len() || !n.pivots.windows(2).all(|w| w[0] < w[1]) {
                    v.push(format!("node {id:?} pivots malformed"));
                }
                if !n.buffer.windows(2).all(|w| w[0].key < w[1].key) || !n.buffer.iter().all(|u| inside(u.key)) {
                    v.push(format!("node {id:?} buffer out of order or range"));
                }
                for (i, &c) in n.children.iter().enumerate() {
                    let clo = if i == 0 { lo } else { Some(n.pivots[i - 1]) };
                    let chi = n.pivots.get(i).copied().or(hi);
                    self.audit_node(c, clo, chi, depth + 1, false, single_leaf, depths, v);
                }
            }
        }
    }
}

struct Reached<K> {
    keys: Vec<K>,
    lower: Option<K>,
    upper: Option<K>,
}

fn apply_to_leaf<K: Key>(keys: &mut Vec<K>, ups: &[Update<K>]) {
    for u in ups {
        match (keys.binary_search(&u.key), u.kind) {
            (Err(i), UpdateKind::Insert) => keys.insert(i, u.key),
            (Ok(i), UpdateKind::Delete) => {
                keys.remove(i);
            }
            _ => {}
        }
    }
}

/// Splits `node` in half, buffer included. Returns the right half and the
/// separating pivot.
fn split_node<K: Key>(node: &mut BNode<K>) -> (BNode<K>, K) {
    let mid = node.children.len() / 2;
    let pivot = node.pivots[mid - 1];
    let right = BNode {
        leaf_children: node.leaf_children,
        pivots: node.pivots.split_off(mid),
        children: node.children.split_off(mid),
        buffer: {
            let at = node.buffer.partition_point(|u| u.key < pivot);
            node.buffer.split_off(at)
        },
    };
    node.pivots.pop();
    (right, pivot)
}
