//! Replays a workload against one engine, checking every answer against
//! a sorted-set oracle and auditing as configured.

use std::collections::BTreeSet;
use std::path::PathBuf;

use betree_core::{LoopStats, OpBudgetMeter, Params};

use crate::engine::{Engine, EngineKind};
use crate::report::{digest, MetricsRecord, Summary};
use crate::workload::Op;
use crate::HarnessError;

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub engine: EngineKind,
    pub params: Params,
    pub cache_blocks: Option<u64>,
    /// Full audit after every `audit_every` ops; 0 turns it off. The
    /// deamortized tree also runs its cheap census at every quiescent point.
    pub audit_every: u64,
    pub file_backed: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(engine: EngineKind, params: Params) -> Self {
        RunConfig {
            engine,
            params,
            cache_blocks: None,
            audit_every: 0,
            file_backed: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub summary: Summary,
    pub digest: u64,
    pub len: u64,
    pub merges: u64,
    pub meter: Option<OpBudgetMeter>,
    pub loops: Option<LoopStats>,
    pub rebuilds: u64,
}

pub struct Replayer {
    engine: Engine,
    oracle: BTreeSet<u64>,
    cfg: RunConfig,
    index: u64,
    cumulative: u64,
    max_per_op: u64,
    summary: Summary,
    seen_violations: usize,
    /// Largest per-update budget and loop caps in force so far; both move
    /// with the parameters a rebuild picks.
    budget: u64,
    caps: Params,
}

impl Replayer {
    pub fn new(cfg: RunConfig) -> Result<Self, HarnessError> {
        let mut engine = Engine::new(cfg.engine, cfg.params, cfg.cache_blocks)?;
        if let Some(path) = &cfg.file_backed {
            engine.attach_file(path)?;
        }
        Ok(Replayer {
            engine,
            oracle: BTreeSet::new(),
            budget: cfg.params.update_budget(),
            caps: cfg.params,
            cfg,
            index: 0,
            cumulative: 0,
            max_per_op: 0,
            summary: Summary::default(),
            seen_violations: 0,
        })
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn engine_mut(&mut self) -> &mut Engine {
        &mut self.engine
    }

    pub fn oracle(&self) -> &BTreeSet<u64> {
        &self.oracle
    }

    pub fn summary(&self) -> &Summary {
        &self.summary
    }

    fn mismatch(&self, op: Op, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> HarnessError {
        HarnessError::Mismatch {
            index: self.index,
            op: op.to_string(),
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        }
    }

    fn params(&self) -> Params {
        match &self.engine {
            Engine::Deamo(t) => t.params(),
            _ => self.cfg.params,
        }
    }

    pub fn step(&mut self, op: Op) -> Result<MetricsRecord, HarnessError> {
        let mut k = 0;
        let cost = match op {
            Op::Insert(key) => {
                if !self.oracle.insert(key) {
                    return Err(HarnessError::Usage(format!("op {}: insert of present key {key}", self.index)));
                }
                self.engine.insert(key)?
            }
            Op::Delete(key) => {
                if !self.oracle.remove(&key) {
                    return Err(HarnessError::Usage(format!("op {}: delete of absent key {key}", self.index)));
                }
                self.engine.delete(key)?
            }
            Op::Pred(q) => {
                let (got, cost) = self.engine.predecessor(q)?;
                let want = self.oracle.range(..=q).next_back().copied();
                if got != want {
                    return Err(self.mismatch(op, want, got));
                }
                cost
            }
            Op::Range(a, b) => {
                let (got, cost) = self.engine.range(a, b)?;
                if !got.iter().copied().eq(self.oracle.range(a..=b).copied()) {
                    let want: Vec<u64> = self.oracle.range(a..=b).copied().collect();
                    return Err(self.mismatch(op, want.len(), got.len()));
                }
                k = got.len() as u64;
                cost
            }
        };
        let io = cost.reads + cost.writes;
        self.cumulative += io;
        self.max_per_op = self.max_per_op.max(io);
        let shape = self.engine.shape();
        let rec = MetricsRecord {
            index: self.index,
            op: op.tag(),
            reads: cost.reads,
            writes: cost.writes,
            cold: cost.cold,
            k,
            cumulative: self.cumulative,
            max_per_op: self.max_per_op,
            height: shape.height,
            leaves: shape.leaves,
            overfull: shape.overfull,
        };
        let p = self.params();
        self.summary.add(&rec, p.log_b_n, p.block);
        self.check(op)?;
        self.index += 1;
        Ok(rec)
    }

    fn check(&mut self, op: Op) -> Result<(), HarnessError> {
        let mut found = Vec::new();
        if let Engine::Deamo(t) = &self.engine {
            let p = t.params();
            self.budget = self.budget.max(t.update_budget());
            if p.log_b_n > self.caps.log_b_n {
                self.caps = p;
            }
            let v = t.violations();
            if v.len() > self.seen_violations {
                found.extend(v[self.seen_violations..].iter().cloned());
                self.seen_violations = v.len();
            }
            if op.is_update() {
                let m = t.meter();
                if m.max_update_ios > self.budget || m.max_update_ios_rebuild > 2 * self.budget {
                    found.push(format!(
                        "update charged {} I/Os ({} during a rebuild), budget {}",
                        m.max_update_ios, m.max_update_ios_rebuild, self.budget
                    ));
                }
                found.extend(t.loop_stats().cap_violations(&self.caps));
            }
        }
        let every = self.cfg.audit_every;
        if every > 0 && (self.index + 1) % every == 0 {
            found.extend(self.engine.audit());
        }
        if found.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Violation { index: self.index, details: found })
        }
    }

    /// Final checks: contents against the oracle, then the outcome.
    pub fn finish(mut self) -> Result<Outcome, HarnessError> {
        self.engine.sync()?;
        let got = self.engine.contents()?;
        let want: Vec<u64> = self.oracle.iter().copied().collect();
        let (dg, dw) = (digest(&got), digest(&want));
        if dg != dw {
            return Err(HarnessError::Mismatch {
                index: self.index,
                op: "final digest".into(),
                expected: format!("{dw:016x} over {} keys", want.len()),
                got: format!("{dg:016x} over {} keys", got.len()),
            });
        }
        let (meter, loops, rebuilds) = match &self.engine {
            Engine::Deamo(t) => {
                let loops = t.loop_stats();
                let rebuilds = loops.rebuilds;
                (Some(t.meter()), Some(loops), rebuilds)
            }
            _ => (None, None, 0),
        };
        Ok(Outcome {
            summary: self.summary,
            digest: dg,
            len: want.len() as u64,
            merges: self.engine.merges(),
            meter,
            loops,
            rebuilds,
        })
    }
}

/// Replays `ops` start to finish, handing each record to `sink`.
pub fn replay(
    ops: &[Op],
    cfg: &RunConfig,
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<(), HarnessError>,
) -> Result<Outcome, HarnessError> {
    let mut r = Replayer::new(cfg.clone())?;
    for &op in ops {
        let rec = r.step(op)?;
        sink(&rec)?;
    }
    r.finish()
}
