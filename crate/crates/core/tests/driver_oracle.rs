use std::collections::BTreeSet;

use betree_core::params::{Constants, Params};
use betree_core::{AuditLevel, DeamoTree, TreeConfig};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Smallest block size whose flush pigeonhole holds; the scheduling
/// constant is raised because one-item flush quanta make paths expensive.
fn small(n_cap: u64) -> Params {
    let p = Params::derive_with(16, 0.9, n_cap, Constants { c_i: 16, ..Constants::default() }).unwrap();
    assert!(p.flush_guaranteed());
    p
}

fn tree(audit: AuditLevel) -> DeamoTree<u64> {
    let mut cfg = TreeConfig::new(small(256));
    cfg.audit = audit;
    DeamoTree::with_config(cfg).unwrap()
}

/// Random valid updates against an oracle; queries probed along the way.
fn replay(seed: u64, ops: usize, universe: u64, audit: AuditLevel) -> (DeamoTree<u64>, BTreeSet<u64>) {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut t = tree(audit);
    let mut oracle = BTreeSet::new();
    for i in 0..ops {
        let k = rng.gen_range(0..universe);
        if oracle.contains(&k) {
            t.delete(k).unwrap();
            oracle.remove(&k);
        } else {
            t.insert(k).unwrap();
            oracle.insert(k);
        }
        if i % 1000 == 0 {
            assert!(t.audit().is_empty(), "at op {i}: {:?}", t.audit());
        }
        if i % 97 == 0 {
            let q = rng.gen_range(0..universe);
            assert_eq!(t.predecessor(q).unwrap(), oracle.range(..=q).next_back().copied(), "pred {q} at op {i}");
        }
    }
    (t, oracle)
}

#[test]
fn random_trace_matches_oracle() {
    let (t, oracle) = replay(7, 20_000, 4_000, AuditLevel::Census);
    assert_eq!(t.contents().unwrap(), oracle.iter().copied().collect::<Vec<_>>());
    assert!(t.violations().is_empty(), "{:?}", t.violations());
    assert!(t.audit().is_empty(), "{:?}", t.audit());
}

#[test]
fn grow_and_shrink_rebuilds_keep_contents() {
    let mut cfg = TreeConfig::new(small(16));
    cfg.audit = AuditLevel::Census;
    let mut t = DeamoTree::<u64>::with_config(cfg).unwrap();
    let mut rng = StdRng::seed_from_u64(3);
    let mut oracle = BTreeSet::new();
    // The budget follows the parameters and the live count.
    let mut budget = t.update_budget();
    for i in 0..12_000u64 {
        let k = rng.gen_range(0..1u64 << 32);
        if oracle.insert(k) {
            if let Err(e) = t.insert(k) {
                panic!("{e} at {i}: {:?} {:?} {:?}", t.io(), t.stats(), t.leaf_sizes());
            }
            budget = budget.max(t.update_budget());
        }
        if i % 500 == 0 {
            assert_eq!(t.contents().unwrap(), oracle.iter().copied().collect::<Vec<_>>(), "at {i}");
            assert!(t.audit().is_empty(), "at {i}: {:?}", t.audit());
        }
    }
    let grown = t.loop_stats().rebuilds;
    assert!(grown >= 1, "no growth rebuild");
    let keys: Vec<u64> = oracle.iter().copied().collect();
    for (i, k) in keys.iter().enumerate() {
        if i % 200 == 0 {
            continue;
        }
        t.delete(*k).unwrap();
        oracle.remove(k);
        budget = budget.max(t.update_budget());
    }
    t.finish_rebuild().unwrap();
    assert!(t.loop_stats().rebuilds > grown, "no shrink rebuild");
    assert_eq!(t.contents().unwrap(), oracle.iter().copied().collect::<Vec<_>>());
    assert!(t.violations().is_empty(), "{:?}", &t.violations()[..t.violations().len().min(5)]);
    assert!(t.audit().is_empty(), "{:?}", t.audit());
    let m = t.meter();
    assert!(m.max_update_ios <= budget, "{m:?}");
    assert!(m.max_update_ios_rebuild <= 2 * budget, "{m:?}");
}
