//! Read-only page access with its own transfer accounting.
//!
//! Queries must not disturb the maintenance cache, so they read pages
//! without touching LRU state and charge themselves instead: `cold` counts
//! every block of every distinct page read (as if the cache were empty),
//! `warm` counts only blocks not currently cached.

use std::collections::HashSet;

use crate::error::Result;
use crate::key::Key;
use crate::page::Page;
use crate::pager::{BlockId, Extent, Pager};

pub struct Reader<'a, K: Key> {
    pager: &'a Pager<Page<K>>,
    seen: HashSet<BlockId>,
    pub cold: u64,
    pub warm: u64,
}

impl<'a, K: Key> Reader<'a, K> {
    pub fn new(pager: &'a Pager<Page<K>>) -> Self {
        Reader {
            pager,
            seen: HashSet::new(),
            cold: 0,
            warm: 0,
        }
    }

    pub fn read(&mut self, id: BlockId) -> Result<&'a Page<K>> {
        let page = self.pager.peek(id)?;
        if self.seen.insert(id) {
            let span = page.span(self.pager.block_size());
            self.cold += span;
            if !self.pager.is_resident(id) {
                self.warm += span;
            }
        }
        Ok(page)
    }

    pub fn block(&self) -> u64 {
        self.pager.block_size()
    }

    /// Charges a scan of `records` in-memory records as block accesses.
    pub fn charge(&mut self, records: u64) {
        let b = self.pager.block_size();
        self.cold += records.div_ceil(b);
    }
}
