//! Shared state for the cooperative maintenance and rebuild coroutines.
//!
//! Structural work runs as `async` code over an `Arc<Mutex<Store>>`. The
//! only suspension point is [`yield_now`], reached right after each block
//! transfer (see [`Ctx::touch`]), so one poll of a coroutine performs at
//! most one I/O. The lock is never held across an await.

use std::collections::{BTreeMap, HashMap};
use std::future::Future;
use std::pin::Pin;
use std::sync::{Arc, Mutex, MutexGuard};
use std::task::{Context, Poll, Waker};

use crate::core_tree::InternalNode;
use crate::error::{integrity, Error, Result};
use crate::key::Key;
use crate::leaf_store::{LeafNode, MicroLeaf};
use crate::page::Page;
use crate::error::PagerError;
use crate::pager::{BlockId, Pager, Step};
use crate::params::Params;

/// Which of the (at most two) trees an operation works on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TreeSel {
    Live,
    Shadow,
}

/// Independent bookkeeping of leaf sizes and overfull buffers, updated on
/// every page mutation so quiescent-point checks are cheap.
#[derive(Clone, Debug, Default)]
pub(crate) struct Census {
    pub leaf_sizes: HashMap<BlockId, u64>,
    size_hist: BTreeMap<u64, usize>,
    pub overfull: HashMap<BlockId, usize>,
}

impl Census {
    pub fn set_leaf(&mut self, id: BlockId, size: u64) {
        if let Some(old) = self.leaf_sizes.insert(id, size) {
            self.unhist(old);
        }
        *self.size_hist.entry(size).or_default() += 1;
    }

    pub fn drop_leaf(&mut self, id: BlockId) {
        if let Some(old) = self.leaf_sizes.remove(&id) {
            self.unhist(old);
        }
    }

    fn unhist(&mut self, size: u64) {
        if let Some(c) = self.size_hist.get_mut(&size) {
            *c -= 1;
            if *c == 0 {
                self.size_hist.remove(&size);
            }
        }
    }

    pub fn set_buffer(&mut self, id: BlockId, len: usize, cap: u64) {
        if len as u64 > cap {
            self.overfull.insert(id, len);
        } else {
            self.overfull.remove(&id);
        }
    }

    pub fn min_leaf(&self) -> Option<u64> {
        self.size_hist.keys().next().copied()
    }

    pub fn max_leaf(&self) -> Option<u64> {
        self.size_hist.keys().next_back().copied()
    }

    pub fn leaves(&self) -> usize {
        self.leaf_sizes.len()
    }
}

#[derive(Clone, Debug)]
pub(crate) struct TreeMeta {
    pub params: Params,
    pub root: BlockId,
    /// Internal levels; the root's children are leaves when this is 1.
    pub height: u32,
    pub census: Census,
    /// Freshly rebuilt: leaves may sit below the usual lower bound until
    /// maintenance has merged them up.
    pub relaxed: bool,
}

/// Largest iteration count observed for each instrumented loop, plus
/// structural event totals.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoopStats {
    pub l3: u64,
    pub l5: u64,
    pub l9: u64,
    pub l11: u64,
    pub l16: u64,
    pub l18: u64,
    pub l19: u64,
    pub l24: u64,
    /// Most user updates admitted during one upward-propagation step.
    pub arrivals: u64,
    pub cycles: u64,
    pub leaf_splits: u64,
    pub leaf_merges: u64,
    pub internal_splits: u64,
    pub internal_merges: u64,
    pub micro_flushes: u64,
    pub rebuilds: u64,
    pub rebuild_rounds: u64,
}

impl LoopStats {
    /// Counters above their caps for `p`: the path loops against
    /// `c_h * logBN`, the drain loops against `ceil(2 * buffer_cap / quantum)`.
    pub fn cap_violations(&self, p: &Params) -> Vec<String> {
        let (h, d) = (p.height_cap(), p.drain_cap());
        [("l3", self.l3, h), ("l5", self.l5, h), ("l11", self.l11, h), ("l19", self.l19, h), ("l9", self.l9, d), ("l18", self.l18, d)]
            .into_iter()
            .filter(|&(_, v, cap)| v > cap)
            .map(|(name, v, cap)| format!("loop {name} ran {v} times, cap {cap}"))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Split,
    Merge,
    Rebuild,
}

/// One record per suspension of a coroutine.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct YieldEvent {
    pub phase: Phase,
    pub depth: u32,
    pub reads: u64,
    pub writes: u64,
    pub root_buffer: usize,
}

pub(crate) struct Store<K: Key> {
    pub pager: Pager<Page<K>>,
    pub live: TreeMeta,
    pub shadow: Option<TreeMeta>,
    pub stats: LoopStats,
    pub events: Option<Vec<YieldEvent>>,
    pub phase: Phase,
    pub depth: u32,
    /// User updates admitted since the current upward step began.
    pub arrivals: u64,
    /// Set at cycle boundaries, cleared when a cycle starts.
    pub quiescent: bool,
    /// Transfer count when the current cycle started.
    pub cycle_io: u64,
    /// Coroutine pin holds: count, and whether the holds own the pager pin.
    pub holds: HashMap<BlockId, (u32, bool)>,
    /// Live keys, and the live count when the current tree was built.
    pub n_live: u64,
    pub n0: u64,
    pub rebuild: Option<crate::rebuild::RebuildState<K>>,
    pub _key: std::marker::PhantomData<K>,
}

fn resident(e: PagerError) -> Error {
    match e {
        PagerError::NotResident(id) => Error::Integrity(format!("page {id:?} used while not resident")),
        PagerError::Fault(id) => Error::Integrity(format!("page {id:?} used after free")),
        e => Error::Pager(e),
    }
}

impl<K: Key> Store<K> {
    pub fn tree(&self, t: TreeSel) -> &TreeMeta {
        match t {
            TreeSel::Live => &self.live,
            TreeSel::Shadow => self.shadow.as_ref().expect("no shadow tree"),
        }
    }

    pub fn tree_mut(&mut self, t: TreeSel) -> &mut TreeMeta {
        match t {
            TreeSel::Live => &mut self.live,
            TreeSel::Shadow => self.shadow.as_mut().expect("no shadow tree"),
        }
    }

    pub fn page(&self, id: BlockId) -> Result<&Page<K>> {
        self.pager.get(id).map_err(resident)
    }

    pub fn internal(&self, id: BlockId) -> Result<&InternalNode<K>> {
        match self.page(id)?.as_internal() {
            Some(n) => Ok(n),
            None => integrity(format!("page {id:?} is not an internal node")),
        }
    }

    pub fn leaf(&self, id: BlockId) -> Result<&LeafNode<K>> {
        match self.page(id)?.as_leaf() {
            Some(n) => Ok(n),
            None => integrity(format!("page {id:?} is not a leaf")),
        }
    }

    pub fn micro(&self, id: BlockId) -> Result<&MicroLeaf<K>> {
        match self.page(id)?.as_micro() {
            Some(n) => Ok(n),
            None => integrity(format!("page {id:?} is not a micro-leaf")),
        }
    }

    pub fn with_internal<R>(
        &mut self,
        t: TreeSel,
        id: BlockId,
        f: impl FnOnce(&mut InternalNode<K>) -> R,
    ) -> Result<R> {
        let (r, len) = self
            .pager
            .update(id, |p| match p.as_internal_mut() {
                Some(n) => {
                    let r = f(n);
                    Ok((r, n.buffer.len()))
                }
                None => integrity(format!("page {id:?} is not an internal node")),
            })
            .map_err(resident)??;
        let tree = self.tree_mut(t);
        let cap = tree.params.buffer_cap;
        tree.census.set_buffer(id, len, cap);
        Ok(r)
    }

    pub fn with_leaf<R>(
        &mut self,
        t: TreeSel,
        id: BlockId,
        f: impl FnOnce(&mut LeafNode<K>) -> R,
    ) -> Result<R> {
        let (r, size) = self
            .pager
            .update(id, |p| match p.as_leaf_mut() {
                Some(l) => {
                    let r = f(l);
                    Ok((r, l.net_size))
                }
                None => integrity(format!("page {id:?} is not a leaf")),
            })
            .map_err(resident)??;
        self.tree_mut(t).census.set_leaf(id, size);
        Ok(r)
    }

    pub fn with_micro<R>(&mut self, id: BlockId, f: impl FnOnce(&mut MicroLeaf<K>) -> R) -> Result<R> {
        self.pager
            .update(id, |p| match p.as_micro_mut() {
                Some(m) => Ok(f(m)),
                None => integrity(format!("page {id:?} is not a micro-leaf")),
            })
            .map_err(resident)?
    }

    pub fn alloc_internal(&mut self, t: TreeSel, node: InternalNode<K>) -> BlockId {
        let len = node.buffer.len();
        let id = self.pager.alloc(Page::Internal(node));
        let tree = self.tree_mut(t);
        let cap = tree.params.buffer_cap;
        tree.census.set_buffer(id, len, cap);
        id
    }

    pub fn alloc_leaf(&mut self, t: TreeSel, leaf: LeafNode<K>) -> BlockId {
        let size = leaf.net_size;
        let id = self.pager.alloc(Page::Leaf(leaf));
        self.tree_mut(t).census.set_leaf(id, size);
        id
    }

    pub fn alloc_micro(&mut self, keys: Vec<K>) -> BlockId {
        self.pager.alloc(Page::Micro(MicroLeaf { keys }))
    }

    /// Frees a page, dropping any pin and census entry it holds.
    pub fn free_page(&mut self, t: TreeSel, id: BlockId) -> Result<Page<K>> {
        if self.pager.is_pinned(id) {
            self.pager.unpin(id)?;
        }
        self.holds.remove(&id);
        let census = &mut self.tree_mut(t).census;
        census.drop_leaf(id);
        census.overfull.remove(&id);
        Ok(self.pager.free(id)?)
    }

    fn record_yield(&mut self) {
        if self.events.is_none() {
            return;
        }
        let root_buffer = self
            .pager
            .peek(self.live.root)
            .ok()
            .and_then(|p| p.as_internal().map(|n| n.buffer.len()))
            .unwrap_or(0);
        let ev = YieldEvent {
            phase: self.phase,
            depth: self.depth,
            reads: self.pager.reads(),
            writes: self.pager.writes(),
            root_buffer,
        };
        if let Some(v) = self.events.as_mut() {
            v.push(ev);
        }
    }
}

/// Resolves on its second poll; the first returns `Pending`.
pub(crate) struct YieldNow(bool);

impl Future for YieldNow {
    type Output = ();

    fn poll(mut self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<()> {
        if self.0 {
            Poll::Ready(())
        } else {
            self.0 = true;
            Poll::Pending
        }
    }
}

pub(crate) fn yield_now() -> YieldNow {
    YieldNow(false)
}

pub(crate) type Task = Pin<Box<dyn Future<Output = Result<()>> + Send>>;

pub(crate) fn poll_once(task: &mut Task) -> Poll<Result<()>> {
    let mut cx = Context::from_waker(Waker::noop());
    task.as_mut().poll(&mut cx)
}

/// Pages pinned by one [`Ctx::ensure`] call.
#[must_use]
pub(crate) struct Pins(Vec<BlockId>);

#[derive(Clone)]
pub(crate) struct Ctx<K: Key> {
    shared: Arc<Mutex<Store<K>>>,
    pub t: TreeSel,
}

impl<K: Key> Ctx<K> {
    pub fn new(shared: Arc<Mutex<Store<K>>>, t: TreeSel) -> Self {
        Ctx { shared, t }
    }

    pub fn lock(&self) -> MutexGuard<'_, Store<K>> {
        self.shared.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn params(&self) -> Params {
        self.lock().tree(self.t).params
    }

    /// Brings `id` into cache, suspending after every block transfer.
    pub async fn touch(&self, id: BlockId) -> Result<()> {
        loop {
            let step = {
                let mut s = self.lock();
                let step = s.pager.step(id)?;
                if step != Step::Resident {
                    s.record_yield();
                }
                step
            };
            if step == Step::Resident {
                return Ok(());
            }
            yield_now().await;
        }
    }

    /// Makes every page in `ids` resident and holds it in cache until
    /// [`Ctx::release`]. Holds nest, across coroutines too.
    pub async fn ensure(&self, ids: &[BlockId]) -> Result<Pins> {
        let mut pins = Vec::new();
        for &id in ids {
            if pins.contains(&id) {
                continue;
            }
            self.touch(id).await?;
            let mut s = self.lock();
            let pinned = s.pager.is_pinned(id);
            let h = s.holds.entry(id).or_insert((0, false));
            h.0 += 1;
            if !pinned {
                h.1 = true;
                s.pager.pin(id)?;
            }
            pins.push(id);
        }
        let s = self.lock();
        if let Some(&id) = ids.iter().find(|&&id| !s.pager.is_resident(id)) {
            return integrity(format!("page {id:?} lost residency while pinned"));
        }
        Ok(Pins(pins))
    }

    pub fn release(&self, pins: Pins) {
        let mut s = self.lock();
        for id in pins.0 {
            let Some(h) = s.holds.get_mut(&id) else { continue };
            h.0 -= 1;
            if h.0 > 0 {
                continue;
            }
            let owned = h.1;
            s.holds.remove(&id);
            if owned && s.pager.is_allocated(id) && s.pager.is_pinned(id) {
                let _ = s.pager.unpin(id);
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    pub fn store<K: Key>(params: Params, cache: u64) -> Arc<Mutex<Store<K>>> {
        let mut pager = Pager::new(params.block, cache);
        let root = pager.alloc(Page::Internal(InternalNode::new(true)));
        Arc::new(Mutex::new(Store {
            pager,
            live: TreeMeta {
                params,
                root,
                height: 1,
                census: Census::default(),
                relaxed: false,
            },
            shadow: None,
            stats: LoopStats::default(),
            events: None,
            phase: Phase::Split,
            depth: 0,
            arrivals: 0,
            quiescent: true,
            cycle_io: 0,
            holds: HashMap::new(),
            n_live: 0,
            n0: 0,
            rebuild: None,
            _key: std::marker::PhantomData,
        }))
    }

    /// Polls `fut` to completion and returns its output and the number of
    /// suspensions, asserting one transfer at most per poll.
    pub fn run<K: Key, T>(
        shared: &Arc<Mutex<Store<K>>>,
        fut: impl Future<Output = Result<T>>,
    ) -> (Result<T>, u64) {
        let mut fut = std::pin::pin!(fut);
        let mut cx = Context::from_waker(Waker::noop());
        let mut yields = 0;
        loop {
            let before = shared.lock().unwrap().pager.total_io();
            let r = fut.as_mut().poll(&mut cx);
            let after = shared.lock().unwrap().pager.total_io();
            assert!(after - before <= 1, "{} transfers in one poll", after - before);
            match r {
                Poll::Ready(v) => return (v, yields),
                Poll::Pending => yields += 1,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;

    #[test]
    fn census_tracks_extremes() {
        let mut c = Census::default();
        c.set_leaf(BlockId(1), 10);
        c.set_leaf(BlockId(2), 30);
        c.set_leaf(BlockId(3), 10);
        assert_eq!((c.min_leaf(), c.max_leaf()), (Some(10), Some(30)));
        c.set_leaf(BlockId(1), 40);
        c.drop_leaf(BlockId(3));
        assert_eq!((c.min_leaf(), c.max_leaf()), (Some(30), Some(40)));
        c.set_buffer(BlockId(1), 5, 4);
        c.set_buffer(BlockId(2), 4, 4);
        assert_eq!(c.overfull.len(), 1);
        c.set_buffer(BlockId(1), 3, 4);
        assert!(c.overfull.is_empty());
    }

    #[test]
    fn touch_yields_once_per_block() {
        let p = Params::derive(16, 0.5, 256).unwrap();
        let shared = store::<u64>(p, 8);
        let id = {
            let mut s = shared.lock().unwrap();
            let id = s.alloc_micro((0..40).collect());
            s.pager.drop_cache().unwrap();
            id
        };
        let ctx = Ctx::new(shared.clone(), TreeSel::Live);
        let (r, yields) = run(&shared, async { ctx.touch(id).await });
        r.unwrap();
        assert_eq!(yields, 3);
        assert!(shared.lock().unwrap().pager.is_resident(id));
    }

    #[test]
    fn ensure_pins_and_release_unpins() {
        let p = Params::derive(16, 0.5, 256).unwrap();
        let shared = store::<u64>(p, 16);
        let (a, b) = {
            let mut s = shared.lock().unwrap();
            (s.alloc_micro(vec![1]), s.alloc_micro(vec![2]))
        };
        let ctx = Ctx::new(shared.clone(), TreeSel::Live);
        let (pins, _) = run(&shared, async { ctx.ensure(&[a, b, a]).await });
        let pins = pins.unwrap();
        assert!(shared.lock().unwrap().pager.is_pinned(a));
        ctx.release(pins);
        let s = shared.lock().unwrap();
        assert!(!s.pager.is_pinned(a) && !s.pager.is_pinned(b));
    }
}
