//! One interface over the three engines the replayer can drive.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use betree_core::{AmortizedTree, AuditLevel, BaselineParams, DeamoTree, Params, TreeConfig};

use crate::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EngineKind {
    Deamo,
    Baseline,
    Oracle,
}

impl FromStr for EngineKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, HarnessError> {
        match s {
            "deamo" => Ok(EngineKind::Deamo),
            "baseline" => Ok(EngineKind::Baseline),
            "oracle" => Ok(EngineKind::Oracle),
            _ => Err(HarnessError::Usage(format!("unknown engine `{s}`"))),
        }
    }
}

/// Transfers charged to one op. `cold` is what a query would read from an
/// empty cache; for updates it equals `reads + writes`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCost {
    pub reads: u64,
    pub writes: u64,
    pub cold: u64,
}

/// Shape numbers reported with every record.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Shape {
    pub height: u64,
    pub leaves: u64,
    pub overfull: u64,
}

pub enum Engine {
    Deamo(Box<DeamoTree<u64>>),
    Baseline(Box<AmortizedTree<u64>>),
    Oracle(BTreeSet<u64>),
}

impl Engine {
    pub fn new(kind: EngineKind, params: Params, cache_blocks: Option<u64>) -> Result<Engine, HarnessError> {
        Ok(match kind {
            EngineKind::Deamo => {
                let mut cfg = TreeConfig::new(params);
                cfg.cache_blocks = cache_blocks;
                cfg.audit = AuditLevel::Census;
                Engine::Deamo(Box::new(DeamoTree::with_config(cfg)?))
            }
            EngineKind::Baseline => {
                let bp = BaselineParams::new(params.block, params.epsilon).map_err(betree_core::Error::from)?;
                let cache = cache_blocks.unwrap_or_else(|| params.default_cache_blocks());
                Engine::Baseline(Box::new(AmortizedTree::new(bp, cache)))
            }
            EngineKind::Oracle => Engine::Oracle(BTreeSet::new()),
        })
    }

    pub fn kind(&self) -> EngineKind {
        match self {
            Engine::Deamo(_) => EngineKind::Deamo,
            Engine::Baseline(_) => EngineKind::Baseline,
            Engine::Oracle(_) => EngineKind::Oracle,
        }
    }

    pub fn attach_file(&mut self, path: &Path) -> Result<(), HarnessError> {
        match self {
            Engine::Deamo(t) => Ok(t.attach_file(path)?),
            _ => Err(HarnessError::Usage("--file-backed needs the deamo engine".into())),
        }
    }

    pub fn sync(&mut self) -> Result<(), HarnessError> {
        if let Engine::Deamo(t) = self {
            t.sync()?;
        }
        Ok(())
    }

    fn io(&self) -> (u64, u64) {
        match self {
            Engine::Deamo(t) => {
                let s = t.io();
                (s.reads, s.writes)
            }
            Engine::Baseline(t) => {
                let s = t.io();
                (s.reads, s.writes)
            }
            Engine::Oracle(_) => (0, 0),
        }
    }

    fn charged<R>(&mut self, f: impl FnOnce(&mut Engine) -> Result<R, HarnessError>) -> Result<(R, OpCost), HarnessError> {
        let (r0, w0) = self.io();
        let out = f(self)?;
        let (r1, w1) = self.io();
        let (reads, writes) = (r1 - r0, w1 - w0);
        Ok((out, OpCost { reads, writes, cold: reads + writes }))
    }

    pub fn insert(&mut self, k: u64) -> Result<OpCost, HarnessError> {
        Ok(self
            .charged(|e| {
                match e {
                    Engine::Deamo(t) => t.insert(k)?,
                    Engine::Baseline(t) => t.insert(k)?,
                    Engine::Oracle(s) => {
                        s.insert(k);
                    }
                }
                Ok(())
            })?
            .1)
    }

    pub fn delete(&mut self, k: u64) -> Result<OpCost, HarnessError> {
        Ok(self
            .charged(|e| {
                match e {
                    Engine::Deamo(t) => t.delete(k)?,
                    Engine::Baseline(t) => t.delete(k)?,
                    Engine::Oracle(s) => {
                        s.remove(&k);
                    }
                }
                Ok(())
            })?
            .1)
    }

    /// The deamortized tree answers queries without touching the cache,
    /// so its cost comes from the query's own accounting: `reads` are the
    /// blocks that were not cached, `cold` every block visited.
    pub fn predecessor(&mut self, q: u64) -> Result<(Option<u64>, OpCost), HarnessError> {
        match self {
            Engine::Deamo(t) => {
                let r = t.predecessor_with_cost(q)?;
                Ok((r.value, OpCost { reads: r.cost.warm, writes: 0, cold: r.cost.cold }))
            }
            Engine::Baseline(_) => self.charged(|e| match e {
                Engine::Baseline(t) => Ok(t.predecessor(q)?),
                _ => unreachable!(),
            }),
            Engine::Oracle(s) => Ok((s.range(..=q).next_back().copied(), OpCost::default())),
        }
    }

    pub fn member(&mut self, q: u64) -> Result<bool, HarnessError> {
        Ok(match self {
            Engine::Deamo(t) => t.member(q)?,
            Engine::Baseline(t) => t.member(q)?,
            Engine::Oracle(s) => s.contains(&q),
        })
    }

    pub fn range(&mut self, a: u64, b: u64) -> Result<(Vec<u64>, OpCost), HarnessError> {
        match self {
            Engine::Deamo(t) => {
                let r = t.range_with_cost(a, b)?;
                Ok((r.value, OpCost { reads: r.cost.warm, writes: 0, cold: r.cost.cold }))
            }
            Engine::Baseline(_) => self.charged(|e| match e {
                Engine::Baseline(t) => Ok(t.range(a, b)?),
                _ => unreachable!(),
            }),
            Engine::Oracle(s) => Ok((s.range(a..=b).copied().collect(), OpCost::default())),
        }
    }

    pub fn contents(&self) -> Result<Vec<u64>, HarnessError> {
        Ok(match self {
            Engine::Deamo(t) => t.contents()?,
            Engine::Baseline(t) => t.contents()?,
            Engine::Oracle(s) => s.iter().copied().collect(),
        })
    }

    /// Full structural audit of the current state.
    pub fn audit(&self) -> Vec<String> {
        match self {
            Engine::Deamo(t) => t.audit(),
            Engine::Baseline(t) => t.audit(),
            Engine::Oracle(_) => Vec::new(),
        }
    }

    pub fn shape(&self) -> Shape {
        match self {
            Engine::Deamo(t) => {
                let s = t.stats();
                Shape { height: s.height as u64, leaves: s.leaves as u64, overfull: s.overfull as u64 }
            }
            Engine::Baseline(t) => {
                let s = t.shape();
                Shape { height: s.0, leaves: s.1, overfull: 0 }
            }
            Engine::Oracle(_) => Shape::default(),
        }
    }

    /// Leaf merges performed so far.
    pub fn merges(&self) -> u64 {
        match self {
            Engine::Deamo(t) => t.loop_stats().leaf_merges,
            Engine::Baseline(t) => t.stats().leaf_merges,
            Engine::Oracle(_) => 0,
        }
    }
}
