//! Simulated two-level memory with exact block-transfer accounting.
//!
//! Storage is addressed by [`BlockId`]. Each id names an extent: a page
//! occupying `span` contiguous blocks of `B` records. A page is resident
//! when all of its blocks are cached. Bringing a page in costs one read per
//! block, writing a dirty page back costs one write per block, and
//! [`Pager::step`] performs at most one of those transfers per call so a
//! caller can stop after every single I/O. Replacement is LRU over
//! unpinned pages.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::PagerError;

pub type PagerResult<T> = std::result::Result<T, PagerError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct BlockId(pub u64);

impl BlockId {
    pub const SUPERBLOCK: BlockId = BlockId(0);
}

/// Anything stored in the pager: reports how many blocks it spans.
pub trait Extent {
    fn span(&self, block: u64) -> u64;
}

/// Byte encoding used by the optional page file.
pub trait PageCodec: Sized {
    fn encode(&self, out: &mut Vec<u8>);
    fn decode(bytes: &[u8]) -> PagerResult<Self>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Read,
    Write,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transfer {
    Read,
    Write,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    /// The page is fully cached; nothing was transferred.
    Resident,
    /// One block moved between the levels.
    Moved(Transfer),
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct IoStats {
    pub reads: u64,
    pub writes: u64,
    pub pinned_blocks: Vec<BlockId>,
    pub cache_capacity: u64,
}

impl IoStats {
    pub fn total(&self) -> u64 {
        self.reads + self.writes
    }
}

struct Slot<P> {
    page: P,
    loaded: u64,
    dirty: bool,
    written: u64,
    pinned: bool,
    tick: u64,
}

struct FileBacking {
    file: File,
    page_size: u64,
}

pub struct Pager<P> {
    block: u64,
    capacity: u64,
    slots: Vec<Option<Slot<P>>>,
    lru: BTreeSet<(u64, u64)>,
    used: u64,
    pinned_blocks: u64,
    tick: u64,
    reads: u64,
    writes: u64,
    backing: Option<FileBacking>,
}

impl<P: Extent + PageCodec> Pager<P> {
    /// `block` is the record capacity of one block; `capacity` is the cache
    /// size in blocks.
    pub fn new(block: u64, capacity: u64) -> Self {
        assert!(capacity >= 2, "cache must hold at least two blocks");
        Pager {
            block,
            capacity,
            slots: Vec::new(),
            lru: BTreeSet::new(),
            used: 0,
            pinned_blocks: 0,
            tick: 0,
            reads: 0,
            writes: 0,
            backing: None,
        }
    }

    pub fn block_size(&self) -> u64 {
        self.block
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    /// Resizes the cache. Shrinking evicts lazily: later steps shed the
    /// excess one transfer at a time.
    pub fn set_capacity(&mut self, capacity: u64) {
        assert!(capacity >= 2, "cache must hold at least two blocks");
        self.capacity = capacity.max(self.pinned_blocks + 1);
    }

    pub fn reads(&self) -> u64 {
        self.reads
    }

    pub fn writes(&self) -> u64 {
        self.writes
    }

    pub fn total_io(&self) -> u64 {
        self.reads + self.writes
    }

    pub fn stats(&self) -> IoStats {
        IoStats {
            reads: self.reads,
            writes: self.writes,
            pinned_blocks: self
                .slots
                .iter()
                .enumerate()
                .filter(|(_, s)| s.as_ref().is_some_and(|s| s.pinned))
                .map(|(i, _)| BlockId(i as u64))
                .collect(),
            cache_capacity: self.capacity,
        }
    }

    /// Blocks currently cached.
    pub fn cached_blocks(&self) -> u64 {
        self.used
    }

    pub fn live_pages(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    fn slot(&self, id: BlockId) -> PagerResult<&Slot<P>> {
        self.slots
            .get(id.0 as usize)
            .and_then(|s| s.as_ref())
            .ok_or(PagerError::Fault(id))
    }

    fn slot_mut(&mut self, id: BlockId) -> PagerResult<&mut Slot<P>> {
        self.slots
            .get_mut(id.0 as usize)
            .and_then(|s| s.as_mut())
            .ok_or(PagerError::Fault(id))
    }

    fn bump(&mut self, id: BlockId) {
        self.tick += 1;
        let tick = self.tick;
        let slot = self.slots[id.0 as usize].as_mut().unwrap();
        if slot.loaded > 0 {
            self.lru.remove(&(slot.tick, id.0));
        }
        slot.tick = tick;
        self.lru.insert((tick, id.0));
    }

    /// Allocates a fresh id holding `page`. The page starts cached and dirty;
    /// its first write-back is counted when it is evicted or flushed.
    pub fn alloc(&mut self, page: P) -> BlockId {
        let id = BlockId(self.slots.len() as u64);
        let span = page.span(self.block);
        self.slots.push(Some(Slot {
            page,
            loaded: span,
            dirty: true,
            written: 0,
            pinned: false,
            tick: 0,
        }));
        self.used += span;
        self.bump(id);
        id
    }

    pub fn free(&mut self, id: BlockId) -> PagerResult<P> {
        let slot = self.slot(id)?;
        if slot.pinned {
            return Err(PagerError::Pinned(id));
        }
        let slot = self.slots[id.0 as usize].take().unwrap();
        if slot.loaded > 0 {
            self.lru.remove(&(slot.tick, id.0));
            self.used -= slot.loaded;
        }
        Ok(slot.page)
    }

    pub fn is_allocated(&self, id: BlockId) -> bool {
        self.slot(id).is_ok()
    }

    pub fn is_resident(&self, id: BlockId) -> bool {
        self.slot(id)
            .map(|s| s.loaded > 0 && s.loaded >= s.page.span(self.block))
            .unwrap_or(false)
    }

    pub fn is_pinned(&self, id: BlockId) -> bool {
        self.slot(id).map(|s| s.pinned).unwrap_or(false)
    }

    pub fn pin(&mut self, id: BlockId) -> PagerResult<()> {
        let block = self.block;
        let slot = self.slot(id)?;
        if slot.pinned {
            return Ok(());
        }
        let span = slot.page.span(block);
        if self.pinned_blocks + span > self.capacity - 1 {
            return Err(PagerError::PinExhausted);
        }
        self.pinned_blocks += span;
        self.slot_mut(id)?.pinned = true;
        Ok(())
    }

    pub fn unpin(&mut self, id: BlockId) -> PagerResult<()> {
        let block = self.block;
        let slot = self.slot_mut(id)?;
        if !slot.pinned {
            return Err(PagerError::NotPinned(id));
        }
        slot.pinned = false;
        let span = slot.page.span(block);
        self.pinned_blocks = self.pinned_blocks.saturating_sub(span);
        Ok(())
    }

    /// Least recently used cached page that may be evicted to make room
    /// for `target`.
    fn victim(&self, target: BlockId) -> Option<BlockId> {
        self.lru
            .iter()
            .map(|&(_, id)| BlockId(id))
            .find(|&id| id != target && !self.slots[id.0 as usize].as_ref().unwrap().pinned)
    }

    /// Writes back one block of a dirty victim (true), or drops a clean one
    /// from cache for free (false).
    fn evict_step(&mut self, victim: BlockId) -> PagerResult<bool> {
        let block = self.block;
        let v = self.slots[victim.0 as usize].as_mut().unwrap();
        if v.dirty {
            v.written += 1;
            self.writes += 1;
            if v.written >= v.page.span(block) {
                v.dirty = false;
                v.written = 0;
                self.persist(victim)?;
            }
            return Ok(true);
        }
        self.lru.remove(&(v.tick, victim.0));
        self.used -= v.loaded;
        v.loaded = 0;
        Ok(false)
    }

    /// Advances `id` towards residency by at most one block transfer.
    pub fn step(&mut self, id: BlockId) -> PagerResult<Step> {
        let span = self.slot(id)?.page.span(self.block);
        let loaded = self.slot(id)?.loaded;
        if loaded >= span {
            self.bump(id);
            // Pages allocated or grown in cache may have pushed it past
            // capacity; shed the excess first, one transfer at a time.
            while self.used > self.capacity {
                let Some(victim) = self.victim(id) else { break };
                if self.evict_step(victim)? {
                    return Ok(Step::Moved(Transfer::Write));
                }
            }
            return Ok(Step::Resident);
        }
        while self.used + 1 > self.capacity {
            let victim = self.victim(id).ok_or(PagerError::PinExhausted)?;
            if self.evict_step(victim)? {
                return Ok(Step::Moved(Transfer::Write));
            }
        }
        let first = loaded == 0;
        let slot = self.slot_mut(id)?;
        slot.loaded += 1;
        self.used += 1;
        self.reads += 1;
        if first {
            self.bump(id);
        }
        Ok(Step::Moved(Transfer::Read))
    }

    /// Brings `id` fully into cache, performing as many transfers as needed.
    pub fn fetch(&mut self, id: BlockId) -> PagerResult<()> {
        while let Step::Moved(_) = self.step(id)? {}
        Ok(())
    }

    /// Cached read of a resident page.
    pub fn get(&self, id: BlockId) -> PagerResult<&P> {
        if !self.is_resident(id) {
            return Err(if self.is_allocated(id) {
                PagerError::NotResident(id)
            } else {
                PagerError::Fault(id)
            });
        }
        Ok(&self.slot(id)?.page)
    }

    /// Mutates a resident page and marks it dirty. Growth of the page is
    /// materialised in cache without a read.
    pub fn update<R>(&mut self, id: BlockId, f: impl FnOnce(&mut P) -> R) -> PagerResult<R> {
        if !self.is_resident(id) {
            return Err(if self.is_allocated(id) {
                PagerError::NotResident(id)
            } else {
                PagerError::Fault(id)
            });
        }
        let block = self.block;
        let slot = self.slot_mut(id)?;
        let old_span = slot.page.span(block);
        let r = f(&mut slot.page);
        let new_span = slot.page.span(block);
        slot.loaded = new_span;
        slot.dirty = true;
        slot.written = 0;
        let pinned = slot.pinned;
        self.used = self.used + new_span - old_span;
        if pinned {
            self.pinned_blocks = self.pinned_blocks + new_span - old_span;
        }
        Ok(r)
    }

    /// Uncounted view of a page regardless of residency. Used by audits
    /// and by readers that do their own accounting.
    pub fn peek(&self, id: BlockId) -> PagerResult<&P> {
        Ok(&self.slot(id)?.page)
    }

    /// One-call access: fetches the page (counting any transfers) and, in
    /// write mode, marks it dirty.
    pub fn access(&mut self, id: BlockId, mode: Mode) -> PagerResult<&mut P> {
        self.fetch(id)?;
        let slot = self.slot_mut(id)?;
        if mode == Mode::Write {
            slot.dirty = true;
            slot.written = 0;
        }
        Ok(&mut slot.page)
    }

    /// Writes every dirty cached page back, counting one write per block.
    pub fn flush_all(&mut self) -> PagerResult<()> {
        let ids: Vec<BlockId> = self
            .slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.as_ref().is_some_and(|s| s.dirty && s.loaded > 0))
            .map(|(i, _)| BlockId(i as u64))
            .collect();
        for id in ids {
            let block = self.block;
            let slot = self.slot_mut(id)?;
            let remaining = slot.page.span(block) - slot.written;
            slot.dirty = false;
            slot.written = 0;
            self.writes += remaining;
            self.persist(id)?;
        }
        Ok(())
    }

    /// Writes back every dirty page and evicts every unpinned one, leaving
    /// a cold cache. Write-backs are counted.
    pub fn drop_cache(&mut self) -> PagerResult<()> {
        self.flush_all()?;
        let victims: Vec<(u64, u64)> = self
            .lru
            .iter()
            .copied()
            .filter(|&(_, id)| !self.slots[id as usize].as_ref().unwrap().pinned)
            .collect();
        for (tick, id) in victims {
            self.lru.remove(&(tick, id));
            let slot = self.slots[id as usize].as_mut().unwrap();
            self.used -= slot.loaded;
            slot.loaded = 0;
        }
        Ok(())
    }

    /// Ids of allocated pages in id order.
    pub fn ids(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_some())
            .map(|(i, _)| BlockId(i as u64))
    }

    fn persist(&mut self, id: BlockId) -> PagerResult<()> {
        if self.backing.is_none() {
            return Ok(());
        }
        self.write_page(id)
    }

    /// Opens (truncating) a page file; every completed write-back and every
    /// explicit flush stores the page at offset `id * page_size`.
    pub fn attach_file(&mut self, path: &Path, page_size: u64) -> PagerResult<()> {
        let file = File::options()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)?;
        self.backing = Some(FileBacking { file, page_size });
        Ok(())
    }

    pub fn page_size(&self) -> Option<u64> {
        self.backing.as_ref().map(|b| b.page_size)
    }

    /// Flushes every dirty page and writes all live pages to the file.
    pub fn sync(&mut self) -> PagerResult<()> {
        self.flush_all()?;
        let ids: Vec<BlockId> = self.ids().collect();
        for id in ids {
            self.write_page(id)?;
        }
        if let Some(b) = self.backing.as_mut() {
            b.file.flush()?;
        }
        Ok(())
    }

    fn write_page(&mut self, id: BlockId) -> PagerResult<()> {
        let Some(backing) = self.backing.as_mut() else {
            return Ok(());
        };
        let page = &self.slots[id.0 as usize].as_ref().unwrap().page;
        let mut body = Vec::new();
        page.encode(&mut body);
        let mut rec = Vec::with_capacity(body.len() + 4);
        rec.extend_from_slice(&(body.len() as u32).to_le_bytes());
        rec.extend_from_slice(&body);
        if rec.len() as u64 > backing.page_size {
            return Err(PagerError::Codec(format!(
                "page {:?} needs {} bytes, page size is {}",
                id,
                rec.len(),
                backing.page_size
            )));
        }
        rec.resize(backing.page_size as usize, 0);
        backing.file.seek(SeekFrom::Start(id.0 * backing.page_size))?;
        backing.file.write_all(&rec)?;
        Ok(())
    }

    /// Reads a page image back from the file.
    pub fn read_from_file(&mut self, id: BlockId) -> PagerResult<P> {
        let backing = self
            .backing
            .as_mut()
            .ok_or_else(|| PagerError::Codec("no page file attached".into()))?;
        let mut rec = vec![0u8; backing.page_size as usize];
        backing.file.seek(SeekFrom::Start(id.0 * backing.page_size))?;
        backing.file.read_exact(&mut rec)?;
        let len = u32::from_le_bytes(rec[..4].try_into().unwrap()) as usize;
        P::decode(&rec[4..4 + len])
    }
}
