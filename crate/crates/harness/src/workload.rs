//! Workload ops, the line format, and the generators.
//!
//! One op per line: `I <key>`, `D <key>`, `P <key>`, `R <a> <b>`, keys as
//! unsigned decimal. Blank lines and lines starting with `#` are skipped.

use std::fmt;
use std::str::FromStr;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Op {
    Insert(u64),
    Delete(u64),
    Pred(u64),
    Range(u64, u64),
}

impl Op {
    pub fn is_update(&self) -> bool {
        matches!(self, Op::Insert(_) | Op::Delete(_))
    }

    pub fn tag(&self) -> char {
        match self {
            Op::Insert(_) => 'I',
            Op::Delete(_) => 'D',
            Op::Pred(_) => 'P',
            Op::Range(..) => 'R',
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Insert(k) => write!(f, "I {k}"),
            Op::Delete(k) => write!(f, "D {k}"),
            Op::Pred(k) => write!(f, "P {k}"),
            Op::Range(a, b) => write!(f, "R {a} {b}"),
        }
    }
}

impl FromStr for Op {
    type Err = String;

    fn from_str(line: &str) -> Result<Op, String> {
        let mut it = line.split_whitespace();
        let tag = it.next().ok_or("empty op")?;
        let mut key = || -> Result<u64, String> {
            let t = it.next().ok_or_else(|| format!("missing key in `{line}`"))?;
            t.parse().map_err(|e| format!("bad key `{t}`: {e}"))
        };
        let op = match tag {
            "I" => Op::Insert(key()?),
            "D" => Op::Delete(key()?),
            "P" => Op::Pred(key()?),
            "R" => {
                let (a, b) = (key()?, key()?);
                if a > b {
                    return Err(format!("range {a} > {b}"));
                }
                Op::Range(a, b)
            }
            t => return Err(format!("unknown op `{t}`")),
        };
        if it.next().is_some() {
            return Err(format!("trailing input in `{line}`"));
        }
        Ok(op)
    }
}

pub fn parse(text: &str) -> Result<Vec<Op>, HarnessError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            l.parse().map_err(|msg| HarnessError::Usage(format!("line {}: {msg}", i + 1)))
        })
        .collect()
}

pub fn format(ops: &[Op]) -> String {
    let mut out = String::new();
    for op in ops {
        out.push_str(&op.to_string());
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GenKind {
    Random,
    Sequential,
    Adversarial,
}

impl FromStr for GenKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<GenKind, HarnessError> {
        match s {
            "random" => Ok(GenKind::Random),
            "sequential" => Ok(GenKind::Sequential),
            "adversarial" => Ok(GenKind::Adversarial),
            _ => Err(HarnessError::Usage(format!("unknown workload kind `{s}`"))),
        }
    }
}

/// Live keys with O(1) random pick and removal.
#[derive(Default)]
struct LiveSet {
    keys: Vec<u64>,
    at: std::collections::HashMap<u64, usize>,
}

impl LiveSet {
    fn contains(&self, k: u64) -> bool {
        self.at.contains_key(&k)
    }

    fn insert(&mut self, k: u64) {
        self.at.insert(k, self.keys.len());
        self.keys.push(k);
    }

    fn remove(&mut self, k: u64) {
        let i = self.at.remove(&k).unwrap();
        let last = self.keys.pop().unwrap();
        if last != k {
            self.keys[i] = last;
            self.at.insert(last, i);
        }
    }

    fn pick(&self, rng: &mut StdRng) -> Option<u64> {
        (!self.keys.is_empty()).then(|| self.keys[rng.gen_range(0..self.keys.len())])
    }
}

/// `n` ops, deterministic in `seed`, every insert of an absent key and
/// every delete of a present one.
pub fn generate(kind: GenKind, n: usize, seed: u64) -> Result<Vec<Op>, HarnessError> {
    if n == 0 {
        return Err(HarnessError::Usage("workload size must be at least 1".into()));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    Ok(match kind {
        GenKind::Sequential => (1..=n as u64).map(Op::Insert).collect(),
        GenKind::Random => random(&mut rng, n),
        GenKind::Adversarial => adversarial(&mut rng, n),
    })
}

/// Mixed updates and queries over a universe of `4n` keys: 45% inserts,
/// 25% deletes of a live key, 20% predecessor probes, 10% ranges.
fn random(rng: &mut StdRng, n: usize) -> Vec<Op> {
    let universe = 4 * n as u64;
    let mut live = LiveSet::default();
    let mut ops = Vec::with_capacity(n);
    while ops.len() < n {
        let roll = rng.gen_range(0..100);
        let op = match roll {
            0..=69 => {
                let victim = if roll >= 45 { live.pick(rng) } else { None };
                match victim {
                    Some(k) => {
                        live.remove(k);
                        Op::Delete(k)
                    }
                    None => {
                        let k = rng.gen_range(0..universe);
                        if live.contains(k) {
                            continue;
                        }
                        live.insert(k);
                        Op::Insert(k)
                    }
                }
            }
            70..=89 => Op::Pred(rng.gen_range(0..universe)),
            _ => {
                let a = rng.gen_range(0..universe);
                Op::Range(a, a.saturating_add(rng.gen_range(0..universe / 64 + 1)))
            }
        };
        ops.push(op);
    }
    ops
}

/// Merge cascades: fill a quarter of the budget with spread-out keys, then
/// keep the size steady while draining runs of consecutive keys from a
/// randomly chosen region and adding the same number at the high end.
/// Each drained region empties leaf after leaf, so merges (and, in the
/// classic tree, merged buffers overflowing) keep happening on paths that
/// are not hot in the cache.
fn adversarial(rng: &mut StdRng, n: usize) -> Vec<Op> {
    const GAP: u64 = 8;
    const REGIONS: u64 = 32;
    let fill = (n / 4).max(1) as u64;
    let mut ops: Vec<Op> = (0..fill).map(|i| Op::Insert(i * GAP)).collect();
    let width = fill.div_ceil(REGIONS);
    // Next undeleted index in each region.
    let mut next: Vec<u64> = (0..REGIONS).map(|r| r * width).collect();
    let mut high = fill;
    while ops.len() < n {
        let r = rng.gen_range(0..REGIONS);
        let end = ((r + 1) * width).min(fill);
        let run = rng.gen_range(16..=256);
        for _ in 0..run {
            if ops.len() < n && next[r as usize] < end {
                ops.push(Op::Delete(next[r as usize] * GAP));
                next[r as usize] += 1;
            }
            if ops.len() < n {
                ops.push(Op::Insert(high * GAP));
                high += 1;
            }
        }
    }
    ops
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn valid(ops: &[Op]) -> bool {
        let mut set = BTreeSet::new();
        ops.iter().all(|op| match *op {
            Op::Insert(k) => set.insert(k),
            Op::Delete(k) => set.remove(&k),
            _ => true,
        })
    }

    #[test]
    fn generators_are_deterministic_and_valid() {
        for kind in [GenKind::Random, GenKind::Sequential, GenKind::Adversarial] {
            let a = generate(kind, 5_000, 1).unwrap();
            assert_eq!(a, generate(kind, 5_000, 1).unwrap());
            assert_eq!(a.len(), 5_000);
            assert!(valid(&a), "{kind:?}");
        }
        assert_eq!(generate(GenKind::Random, 10, 1).unwrap(), generate(GenKind::Random, 10, 1).unwrap());
    }

    #[test]
    fn sequential_keys_increase() {
        let ops = generate(GenKind::Sequential, 100, 9).unwrap();
        assert!(ops.windows(2).all(|w| matches!((w[0], w[1]), (Op::Insert(a), Op::Insert(b)) if a < b)));
        assert_eq!(ops[0], Op::Insert(1));
    }

    #[test]
    fn zero_ops_is_a_usage_error() {
        assert!(matches!(generate(GenKind::Random, 0, 1), Err(HarnessError::Usage(_))));
        assert!("bogus".parse::<GenKind>().is_err());
    }

    #[test]
    fn text_round_trip() {
        let ops = generate(GenKind::Random, 500, 4).unwrap();
        assert_eq!(parse(&format(&ops)).unwrap(), ops);
        assert_eq!(parse("# note\n\nI 5\nR 1 9\n").unwrap(), vec![Op::Insert(5), Op::Range(1, 9)]);
    }

    #[test]
    fn bad_lines_are_rejected() {
        for bad in ["X 1", "I", "I -3", "R 5 1", "P 1 2", "I 18446744073709551616"] {
            assert!(parse(bad).is_err(), "{bad}");
        }
    }
}
