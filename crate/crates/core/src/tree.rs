//! The deamortized dictionary.
//!
//! User updates land in the pinned root buffer at no cost. After every
//! batch of updates (sized for the current count) the maintenance
//! coroutine is resumed until it has
//! performed one block transfer (or several, in low-rate mode), so no
//! update is ever charged more than a constant number of transfers. While a
//! rebuild runs, the rebuild coroutine gets the same allowance after the
//! maintenance one.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::task::Poll;

use crate::core_tree::{is_sorted_updates, merge_updates, InternalNode, Update, UpdateKind};
use crate::engine::{poll_once, Census, Ctx, LoopStats, Phase, Store, Task, TreeMeta, TreeSel, YieldEvent};
use crate::error::{contract, integrity, Result};
use crate::key::Key;
use crate::leaf_store::LeafNode;
use crate::maintenance::{run_maintenance, OpBudgetMeter};
use crate::page::{Page, Superblock};
use crate::pager::{BlockId, IoStats, Pager};
use crate::params::Params;
use crate::query::{self, QueryResult};
use crate::rebuild::{self, arms_shrink, grown, run_rebuild, shrunk};

/// How much checking happens at each quiescent point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AuditLevel {
    #[default]
    Off,
    /// Leaf-size band and overfull census from the running bookkeeping.
    Census,
    /// Full structural walk.
    Full,
}

#[derive(Clone, Debug)]
pub struct TreeConfig {
    pub params: Params,
    /// Cache size in blocks; defaults to [`Params::default_cache_blocks`].
    pub cache_blocks: Option<u64>,
    pub audit: AuditLevel,
    pub record_events: bool,
}

impl TreeConfig {
    pub fn new(params: Params) -> Self {
        TreeConfig {
            params,
            cache_blocks: None,
            audit: AuditLevel::Off,
            record_events: false,
        }
    }
}

/// Shape summary of the live tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeStats {
    pub height: u32,
    pub leaves: usize,
    pub min_leaf: u64,
    pub max_leaf: u64,
    pub overfull: usize,
    pub max_buffer: usize,
    pub root_buffer: usize,
    pub len: u64,
    pub tau: u64,
    pub rebuilding: bool,
}

pub struct DeamoTree<K: Key> {
    shared: Arc<Mutex<Store<K>>>,
    maint: Task,
    rebuild: Option<Task>,
    meter: OpBudgetMeter,
    audit: AuditLevel,
    shrink_armed: bool,
    pending: u64,
    quiescent_points: u64,
    violations: Vec<String>,
}

pub type Tree64 = DeamoTree<u64>;
pub type Tree32 = DeamoTree<u32>;
pub type TreeI64 = DeamoTree<i64>;

impl<K: Key> DeamoTree<K> {
    pub fn new(params: Params) -> Result<Self> {
        Self::with_config(TreeConfig::new(params))
    }

    pub fn with_config(cfg: TreeConfig) -> Result<Self> {
        let p = cfg.params;
        let cache = cfg.cache_blocks.unwrap_or_else(|| p.default_cache_blocks());
        let mut pager = Pager::new(p.block, cache);
        let sb = pager.alloc(Page::Super(Superblock {
            block: p.block,
            epsilon: p.epsilon,
            n_cap: p.n_cap,
            root: BlockId(0),
        }));
        debug_assert_eq!(sb, BlockId(0));
        let mut store = Store {
            pager,
            live: TreeMeta {
                params: p,
                root: BlockId(0),
                height: 1,
                census: Census::default(),
                relaxed: false,
            },
            shadow: None,
            stats: LoopStats::default(),
            events: cfg.record_events.then(Vec::new),
            phase: Phase::Split,
            depth: 0,
            arrivals: 0,
            quiescent: true,
            cycle_io: 0,
            holds: HashMap::new(),
            n_live: 0,
            n0: p.n_cap,
            rebuild: None,
            _key: std::marker::PhantomData,
        };
        let leaf = store.alloc_leaf(TreeSel::Live, LeafNode::default());
        let root = store.alloc_internal(
            TreeSel::Live,
            InternalNode::with_children(true, Vec::new(), vec![leaf], vec![0], vec![0]),
        );
        store.pager.pin(root)?;
        store.live.root = root;
        store.pager.update(BlockId(0), |pg| {
            if let Page::Super(s) = pg {
                s.root = root;
            }
        })?;
        let shared = Arc::new(Mutex::new(store));
        let maint: Task = Box::pin(run_maintenance(Ctx::new(shared.clone(), TreeSel::Live)));
        Ok(DeamoTree {
            shared,
            maint,
            rebuild: None,
            meter: OpBudgetMeter::default(),
            audit: cfg.audit,
            shrink_armed: false,
            pending: 0,
            quiescent_points: 0,
            violations: Vec::new(),
        })
    }

    /// Backs the pager with a page file at `path` (truncated). Pages are
    /// written on eviction and by [`DeamoTree::sync`].
    pub fn attach_file(&mut self, path: &Path) -> Result<()> {
        let p = self.params();
        let page_size = page_size_for::<K>(&p);
        let mut s = self.lock();
        s.pager.attach_file(path, page_size)?;
        drop(s);
        self.sync()
    }

    /// Records the live root in the superblock and writes every page out.
    pub fn sync(&mut self) -> Result<()> {
        let mut s = self.lock();
        let (root, p) = (s.live.root, s.live.params);
        s.pager.fetch(BlockId(0))?;
        s.pager.update(BlockId(0), |pg| {
            *pg = Page::Super(Superblock {
                block: p.block,
                epsilon: p.epsilon,
                n_cap: p.n_cap,
                root,
            })
        })?;
        s.pager.sync()?;
        Ok(())
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Store<K>> {
        self.shared.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Builds a tree holding `keys` (strictly increasing) the way a rebuild
    /// lays one out, then writes everything back and empties the cache.
    /// Leaves start at three quarters of τ, under the relaxed floor a
    /// rebuilt tree starts with.
    pub fn from_sorted(cfg: TreeConfig, keys: &[K]) -> Result<Self> {
        if !keys.windows(2).all(|w| w[0] < w[1]) {
            return contract("bulk load needs strictly increasing keys");
        }
        let mut t = Self::with_config(cfg)?;
        {
            let mut s = t.lock();
            let n = keys.len() as u64;
            let live = s.live.params;
            let params = if n <= live.n_cap { live } else { live.with_capacity(n)? };
            rebuild::bulk(&mut s, params, keys)?;
        }
        t.rebuild = Some(Box::pin(run_rebuild(Ctx::new(t.shared.clone(), TreeSel::Shadow))));
        t.finish_rebuild()?;
        t.lock().pager.drop_cache()?;
        Ok(t)
    }

    pub fn insert(&mut self, key: K) -> Result<()> {
        self.apply(Update::insert(key))
    }

    pub fn delete(&mut self, key: K) -> Result<()> {
        self.apply(Update::delete(key))
    }

    /// Adds `u` to the root buffer and pays the update's share of
    /// background work.
    pub fn apply(&mut self, u: Update<K>) -> Result<()> {
        let start = self.io_total();
        {
            let mut s = self.lock();
            let root = s.live.root;
            s.with_internal(TreeSel::Live, root, |n| merge_updates(&mut n.buffer, &[u]))?;
            if s.rebuild.as_ref().is_some_and(|r| r.mirrors(u.key)) {
                let sroot = s.tree(TreeSel::Shadow).root;
                s.with_internal(TreeSel::Shadow, sroot, |n| merge_updates(&mut n.buffer, &[u]))?;
            }
            match u.kind {
                UpdateKind::Insert => s.n_live += 1,
                UpdateKind::Delete => s.n_live = s.n_live.saturating_sub(1),
            }
            s.arrivals += 1;
        }
        self.pending += 1;
        let (p, n) = (self.params(), self.len());
        if self.pending >= p.update_batch_at(n) {
            self.pending = 0;
            for _ in 0..p.ios_per_update_at(n) {
                self.resume_maintenance()?;
                if self.rebuild.is_some() {
                    self.resume_rebuild()?;
                }
            }
        }
        let rebuilding = self.rebuild.is_some() || self.lock().rebuild.is_some();
        self.meter.record_update(self.io_total() - start, rebuilding);
        self.check_trigger()?;
        Ok(())
    }

    fn check_trigger(&mut self) -> Result<()> {
        let (busy, n0, n) = {
            let s = self.lock();
            (s.rebuild.is_some(), s.n0, s.n_live)
        };
        if busy {
            return Ok(());
        }
        if !self.shrink_armed && arms_shrink(n0, n) {
            self.shrink_armed = true;
        }
        if !(grown(n0, n) || (self.shrink_armed && shrunk(n0, n))) {
            return Ok(());
        }
        let mut s = self.lock();
        let params = s.live.params.with_capacity(n)?;
        rebuild::begin(&mut s, params)?;
        drop(s);
        self.rebuild = Some(Box::pin(run_rebuild(Ctx::new(self.shared.clone(), TreeSel::Shadow))));
        self.shrink_armed = false;
        Ok(())
    }

    fn io_total(&self) -> u64 {
        self.lock().pager.total_io()
    }

    /// Runs maintenance until one transfer happens or a whole cycle
    /// passes without any.
    fn resume_maintenance(&mut self) -> Result<u64> {
        let start = self.io_total();
        loop {
            match poll_once(&mut self.maint) {
                Poll::Ready(Err(e)) => return Err(e),
                Poll::Ready(Ok(())) => return integrity("maintenance coroutine ended"),
                Poll::Pending => {}
            }
            let (io, quiescent, cycle_io) = {
                let s = self.lock();
                (s.pager.total_io(), s.quiescent, s.cycle_io)
            };
            if io > start {
                self.meter.record_resume(io - start);
                return Ok(io - start);
            }
            if quiescent {
                self.quiescent_point()?;
                if io == cycle_io {
                    self.meter.record_resume(0);
                    return Ok(0);
                }
            }
        }
    }

    fn resume_rebuild(&mut self) -> Result<u64> {
        let start = self.io_total();
        if self.rebuild.is_none() {
            return Ok(0);
        }
        loop {
            match poll_once(self.rebuild.as_mut().unwrap()) {
                Poll::Ready(r) => {
                    self.rebuild = None;
                    r?;
                    break;
                }
                Poll::Pending => {
                    if self.io_total() > start {
                        break;
                    }
                }
            }
        }
        let ios = self.io_total() - start;
        self.meter.record_resume(ios);
        Ok(ios)
    }

    fn quiescent_point(&mut self) -> Result<()> {
        self.quiescent_points += 1;
        {
            let mut s = self.lock();
            let tau = s.live.params.tau;
            if s.live.relaxed && s.live.census.min_leaf().is_some_and(|m| m >= tau) {
                s.live.relaxed = false;
            }
        }
        let found = match self.audit {
            AuditLevel::Off => return Ok(()),
            AuditLevel::Census => census_check(&self.lock()),
            AuditLevel::Full => {
                let s = self.lock();
                let mut v = census_check(&s);
                v.extend(full_audit(&s, TreeSel::Live, true));
                v
            }
        };
        if !found.is_empty() && self.violations.len() < 64 {
            let at = self.quiescent_points;
            self.violations.extend(found.into_iter().map(|v| format!("quiescent point {at}: {v}")));
        }
        Ok(())
    }

    /// Violations found by automatic audits so far.
    pub fn violations(&self) -> &[String] {
        &self.violations
    }

    pub fn set_audit(&mut self, level: AuditLevel) {
        self.audit = level;
    }

    /// Full structural check of the current state. Bounds that only hold at
    /// quiescent points are checked when the tree is at one.
    pub fn audit(&self) -> Vec<String> {
        let s = self.lock();
        let mut v = full_audit(&s, TreeSel::Live, s.quiescent);
        if s.quiescent {
            v.extend(census_check(&s));
        }
        if s.shadow.is_some() {
            v.extend(full_audit(&s, TreeSel::Shadow, false).into_iter().map(|e| format!("shadow: {e}")));
        }
        v.extend(leak_check(&s));
        v
    }

    /// Runs maintenance, without user updates, to the next quiescent point.
    pub fn settle(&mut self) -> Result<()> {
        loop {
            match poll_once(&mut self.maint) {
                Poll::Ready(Err(e)) => return Err(e),
                Poll::Ready(Ok(())) => return integrity("maintenance coroutine ended"),
                Poll::Pending => {}
            }
            if self.lock().quiescent {
                return self.quiescent_point();
            }
        }
    }

    /// Drives any running rebuild to completion and through switchover,
    /// without user updates.
    pub fn finish_rebuild(&mut self) -> Result<()> {
        while self.rebuild.is_some() {
            self.resume_maintenance()?;
            self.resume_rebuild()?;
        }
        while self.lock().rebuild.is_some() {
            self.settle()?;
        }
        Ok(())
    }

    pub fn predecessor(&self, q: K) -> Result<Option<K>> {
        Ok(self.predecessor_with_cost(q)?.value)
    }

    pub fn predecessor_with_cost(&self, q: K) -> Result<QueryResult<Option<K>>> {
        let s = self.lock();
        query::predecessor(&s.pager, s.live.root, s.live.params.query_window() as usize, q)
    }

    pub fn member(&self, q: K) -> Result<bool> {
        Ok(self.predecessor(q)? == Some(q))
    }

    pub fn range(&self, a: K, b: K) -> Result<Vec<K>> {
        Ok(self.range_with_cost(a, b)?.value)
    }

    pub fn range_with_cost(&self, a: K, b: K) -> Result<QueryResult<Vec<K>>> {
        let s = self.lock();
        query::range_report(&s.pager, s.live.root, a, b)
    }

    /// Every live key, sorted. Not charged to the pager.
    pub fn contents(&self) -> Result<Vec<K>> {
        self.range(K::min_value(), K::max_value())
    }

    /// Logical size.
    pub fn len(&self) -> u64 {
        self.lock().n_live
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn params(&self) -> Params {
        self.lock().live.params
    }

    pub fn io(&self) -> IoStats {
        self.lock().pager.stats()
    }

    /// Transfers one update may be charged at the current size.
    pub fn update_budget(&self) -> u64 {
        self.params().update_budget_at(self.len())
    }

    pub fn meter(&self) -> OpBudgetMeter {
        self.meter
    }

    pub fn loop_stats(&self) -> LoopStats {
        self.lock().stats.clone()
    }

    pub fn quiescent_points(&self) -> u64 {
        self.quiescent_points
    }

    pub fn is_quiescent(&self) -> bool {
        self.lock().quiescent
    }

    pub fn is_rebuilding(&self) -> bool {
        self.lock().rebuild.is_some()
    }

    /// The live count the current tree was sized for.
    pub fn built_for(&self) -> u64 {
        self.lock().n0
    }

    pub fn take_events(&mut self) -> Vec<YieldEvent> {
        self.lock().events.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn stats(&self) -> TreeStats {
        let s = self.lock();
        let c = &s.live.census;
        let root_buffer = s.pager.peek(s.live.root).ok().and_then(|p| p.as_internal()).map_or(0, |n| n.buffer.len());
        TreeStats {
            height: s.live.height,
            leaves: c.leaves(),
            min_leaf: c.min_leaf().unwrap_or(0),
            max_leaf: c.max_leaf().unwrap_or(0),
            overfull: c.overfull.len(),
            max_buffer: c.overfull.values().copied().max().unwrap_or(0),
            root_buffer,
            len: s.n_live,
            tau: s.live.params.tau,
            rebuilding: s.rebuild.is_some(),
        }
    }

    /// Leaf net sizes of the live tree in key order. Not charged.
    pub fn leaf_sizes(&self) -> Vec<u64> {
        let s = self.lock();
        let mut out = Vec::new();
        let mut stack = vec![s.live.root];
        while let Some(id) = stack.pop() {
            match s.pager.peek(id) {
                Ok(Page::Internal(n)) => stack.extend(n.children.iter().rev().copied()),
                Ok(Page::Leaf(l)) => out.push(l.net_size),
                _ => {}
            }
        }
        out
    }

    /// Byte image of every allocated page, in id order. Not charged.
    pub fn snapshot(&self) -> Vec<u8> {
        use crate::pager::PageCodec;
        let s = self.lock();
        let mut out = Vec::new();
        for id in s.pager.ids() {
            out.extend_from_slice(&id.0.to_le_bytes());
            s.pager.peek(id).unwrap().encode(&mut out);
        }
        out
    }
}

/// Page size for file mode: room for the largest page any step can write.
fn page_size_for<K: Key>(p: &Params) -> u64 {
    let rec = K::WIDTH as u64 + 1;
    let internal = 4 * p.buffer_cap * rec + (p.fanout_max + 2) * (K::WIDTH as u64 + 24) + 64;
    let leaf = 2 * p.microroot_buffer_cap * rec + 8 * (p.tau / p.microleaf_cap + 4) * (K::WIDTH as u64 + 16) + 64;
    let micro = (2 * p.microleaf_cap + p.microroot_buffer_cap) * K::WIDTH as u64 + 64;
    internal.max(leaf).max(micro).div_ceil(4096) * 4096
}

/// Checks from the running bookkeeping: leaf band and overfull census.
fn census_check<K: Key>(s: &Store<K>) -> Vec<String> {
    let mut v = Vec::new();
    let t = &s.live;
    let p = t.params;
    let c = &t.census;
    if c.leaves() > 1 {
        let floor = if t.relaxed { p.tau / 4 } else { p.tau };
        let (mn, mx) = (c.min_leaf().unwrap(), c.max_leaf().unwrap());
        if mn < floor {
            v.push(format!("leaf of {mn} below {floor}"));
        }
        if mx > 5 * p.tau {
            v.push(format!("leaf of {mx} above {}", 5 * p.tau));
        }
    }
    if c.overfull.len() > 2 {
        v.push(format!("{} overfull nodes", c.overfull.len()));
    }
    if let Some((id, &len)) = c.overfull.iter().find(|(_, &len)| len as u64 > 2 * p.buffer_cap) {
        v.push(format!("node {id:?} buffers {len} > {}", 2 * p.buffer_cap));
    }
    if c.overfull.len() == 2 && !c.overfull.contains_key(&t.root) {
        v.push("two overfull nodes, neither the root".into());
    }
    v
}

/// Per-key record of the updates on its path: signed sum and the kind of
/// the shallowest one.
struct KeyTrail {
    sum: i64,
    top: (u32, UpdateKind),
}

struct Walk<'a, K: Key> {
    s: &'a Store<K>,
    p: Params,
    quiescent: bool,
    root: BlockId,
    v: Vec<String>,
    trails: HashMap<K, KeyTrail>,
    leaves: HashMap<BlockId, u64>,
    overfull: HashMap<BlockId, usize>,
    leaf_depth: Option<u32>,
}

impl<K: Key> Walk<'_, K> {
    fn err(&mut self, e: String) {
        if self.v.len() < 32 {
            self.v.push(e);
        }
    }

    fn note(&mut self, key: K, depth: u32, kind: UpdateKind) {
        let sign = if kind == UpdateKind::Insert { 1 } else { -1 };
        let t = self.trails.entry(key).or_insert(KeyTrail { sum: 0, top: (depth, kind) });
        t.sum += sign;
        if depth < t.top.0 {
            t.top = (depth, kind);
        }
    }

    /// Returns the (max, min) leaf size below `id`.
    fn node(&mut self, id: BlockId, lo: Option<K>, hi: Option<K>, depth: u32) -> Option<(u64, u64)> {
        let in_range = |k: K| lo.is_none_or(|l| k >= l) && hi.is_none_or(|h| k < h);
        let page = match self.s.pager.peek(id) {
            Ok(p) => p,
            Err(e) => {
                self.err(format!("{id:?}: {e}"));
                return None;
            }
        };
        match page {
            Page::Internal(n) => {
                if n.children.is_empty() || n.pivots.len() + 1 != n.children.len() {
                    self.err(format!("{id:?}: {} pivots for {} children", n.pivots.len(), n.children.len()));
                    return None;
                }
                if n.child_max.len() != n.children.len() || n.child_min.len() != n.children.len() {
                    self.err(format!("{id:?}: size entries out of step with children"));
                    return None;
                }
                if !n.pivots.windows(2).all(|w| w[0] < w[1]) || !n.pivots.iter().all(|&k| in_range(k)) {
                    self.err(format!("{id:?}: pivots unsorted or outside the node's range"));
                }
                if !is_sorted_updates(&n.buffer) {
                    self.err(format!("{id:?}: buffer not sorted by key"));
                }
                if let Some(u) = n.buffer.iter().find(|u| !in_range(u.key)) {
                    self.err(format!("{id:?}: buffered {:?} outside the node's range", u.key));
                }
                for u in &n.buffer {
                    self.note(u.key, depth, u.kind);
                }
                if n.buffer.len() as u64 > self.p.buffer_cap {
                    self.overfull.insert(id, n.buffer.len());
                }
                if n.buffer.len() as u64 > 2 * self.p.buffer_cap {
                    self.err(format!("{id:?}: buffer {} above twice the limit", n.buffer.len()));
                }
                let f = n.fanout() as u64;
                if self.quiescent {
                    let ok = if id == self.root {
                        f <= self.p.fanout_max && (f >= 2 || n.leaf_children)
                    } else {
                        (self.p.fanout_min..=self.p.fanout_max).contains(&f)
                    };
                    if !ok {
                        self.err(format!("{id:?}: fanout {f}"));
                    }
                }
                let (mut mx, mut mn) = (0, u64::MAX);
                for (i, &c) in n.children.iter().enumerate() {
                    let clo = if i == 0 { lo } else { Some(n.pivots[i - 1]) };
                    let chi = if i == n.pivots.len() { hi } else { Some(n.pivots[i]) };
                    let child_is_leaf = matches!(self.s.pager.peek(c), Ok(Page::Leaf(_)));
                    if child_is_leaf != n.leaf_children {
                        self.err(format!("{id:?}: child {c:?} kind disagrees with the leaf-children flag"));
                        continue;
                    }
                    let Some((cmx, cmn)) = self.node(c, clo, chi, depth + 1) else { continue };
                    if (n.child_max[i], n.child_min[i]) != (cmx, cmn) {
                        self.err(format!(
                            "{id:?}: entry for child {i} says ({}, {}), subtree has ({cmx}, {cmn})",
                            n.child_max[i], n.child_min[i]
                        ));
                    }
                    mx = mx.max(cmx);
                    mn = mn.min(cmn);
                }
                let mut fresh = n.clone();
                fresh.recompute_aux();
                if (fresh.aux_max, fresh.aux_min) != (n.aux_max, n.aux_min) {
                    self.err(format!("{id:?}: stale extremes"));
                }
                Some((mx, mn))
            }
            Page::Leaf(l) => {
                match self.leaf_depth {
                    None => self.leaf_depth = Some(depth),
                    Some(d) if d != depth => self.err(format!("{id:?}: leaf at depth {depth}, others at {d}")),
                    _ => {}
                }
                if l.net_size != l.compute_net() {
                    self.err(format!("{id:?}: net size {} but content says {}", l.net_size, l.compute_net()));
                }
                if !is_sorted_updates(&l.buffer) {
                    self.err(format!("{id:?}: leaf buffer not sorted"));
                }
                if let Some(u) = l.buffer.iter().find(|u| !in_range(u.key)) {
                    self.err(format!("{id:?}: leaf buffers {:?} outside its range", u.key));
                }
                if self.quiescent && l.buffer.len() as u64 > self.p.microroot_buffer_cap {
                    self.err(format!("{id:?}: leaf buffer {} above its limit", l.buffer.len()));
                }
                for u in &l.buffer {
                    self.note(u.key, depth, u.kind);
                }
                let mut prev: Option<K> = None;
                for (j, m) in l.micro.iter().enumerate() {
                    let keys = match self.s.pager.peek(m.id) {
                        Ok(Page::Micro(mk)) => &mk.keys,
                        _ => {
                            self.err(format!("{id:?}: micro entry {j} is not a micro-leaf"));
                            continue;
                        }
                    };
                    if keys.len() != m.len {
                        self.err(format!("{id:?}: micro entry {j} records {} keys, holds {}", m.len, keys.len()));
                    }
                    if self.quiescent && keys.len() as u64 > self.p.microleaf_cap {
                        self.err(format!("{id:?}: micro-leaf {j} holds {} keys", keys.len()));
                    }
                    let next = l.micro.get(j + 1).map(|n| n.first);
                    for &k in keys {
                        if prev.is_some_and(|p| k <= p) || !in_range(k) || next.is_some_and(|f| k >= f) || (j > 0 && k < m.first) {
                            self.err(format!("{id:?}: micro key {k:?} out of order or range"));
                            break;
                        }
                        prev = Some(k);
                    }
                    for &k in keys {
                        self.note(k, depth + 1, UpdateKind::Insert);
                    }
                }
                self.leaves.insert(id, l.net_size);
                Some((l.net_size, l.net_size))
            }
            _ => {
                self.err(format!("{id:?}: not a tree node"));
                None
            }
        }
    }
}

/// Structural audit of one tree through uncounted reads.
fn full_audit<K: Key>(s: &Store<K>, t: TreeSel, quiescent: bool) -> Vec<String> {
    let meta = s.tree(t);
    let mut w = Walk {
        s,
        p: meta.params,
        quiescent,
        root: meta.root,
        v: Vec::new(),
        trails: HashMap::new(),
        leaves: HashMap::new(),
        overfull: HashMap::new(),
        leaf_depth: None,
    };
    w.node(meta.root, None, None, 0);
    let mut v = std::mem::take(&mut w.v);
    for (k, tr) in &w.trails {
        if !(0..=1).contains(&tr.sum) || (tr.sum == 1) != (tr.top.1 == UpdateKind::Insert) {
            v.push(format!("key {k:?}: updates on its path do not form a valid history"));
            break;
        }
    }
    if w.leaf_depth.is_some_and(|d| d != meta.height) {
        v.push(format!("leaves at depth {}, recorded height {}", w.leaf_depth.unwrap(), meta.height));
    }
    if meta.height as u64 > meta.params.height_cap() {
        v.push(format!("height {} above {}", meta.height, meta.params.height_cap()));
    }
    if w.leaves != meta.census.leaf_sizes {
        v.push("leaf census out of step with the tree".into());
    }
    if w.overfull != meta.census.overfull {
        v.push("overfull census out of step with the tree".into());
    }
    if t == TreeSel::Live {
        let live = w.trails.values().filter(|tr| tr.sum == 1).count() as u64;
        if live != s.n_live {
            v.push(format!("{live} live keys, counter says {}", s.n_live));
        }
    }
    v
}

/// Every allocated page must belong to a tree or be the superblock.
fn leak_check<K: Key>(s: &Store<K>) -> Vec<String> {
    let mut reach = std::collections::HashSet::from([BlockId(0)]);
    let mut stack = vec![s.live.root];
    if let Some(sh) = &s.shadow {
        stack.push(sh.root);
    }
    while let Some(id) = stack.pop() {
        if !reach.insert(id) {
            continue;
        }
        match s.pager.peek(id) {
            Ok(Page::Internal(n)) => stack.extend(n.children.iter().copied()),
            Ok(Page::Leaf(l)) => reach.extend(l.micro.iter().map(|m| m.id)),
            _ => {}
        }
    }
    let leaked = s.pager.ids().filter(|id| !reach.contains(id)).count();
    if leaked > 0 {
        vec![format!("{leaked} allocated pages unreachable")]
    } else {
        Vec::new()
    }
}
