//! Acceptance criteria 1–10, one pass/fail line each. Runs as a plain
//! binary so the lines always reach the output.

use std::collections::BTreeSet;
use std::time::Instant;

use betree_core::query::largest_not_in;
use betree_core::rebuild::{arms_shrink, grown, shrunk};
use betree_core::{AuditLevel, DeamoTree, OpBudgetMeter, Params, TreeConfig};
use betree_harness::{generate, Engine, GenKind, Op, Outcome, Replayer, RunConfig};
use betree_harness::EngineKind;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

const B: u64 = 256;
const EPS: f64 = 0.5;
const SEEDS: u64 = 50;
const MIXED_OPS: usize = 100_000;
const ADVERSARIAL_OPS: usize = 1_000_000;
const ADVERSARIAL_CAP: u64 = 1 << 20;
/// Predecessor growth may be at most this times the ratio of ceil(logB N).
const PRED_GROWTH_SLACK: f64 = 2.0;
/// Largest/smallest fitted range constant across scales.
const CQ_SPREAD: f64 = 1.25;
/// Block accesses of the selection procedure per (|X|/B + 1).
const SELECT_C: f64 = 8.0;
const K_IO: u64 = 1;

type Verdict = Result<String, String>;

/// Meter readings pooled over every deamortized run.
#[derive(Default)]
struct Pool {
    max_update: u64,
    max_update_rebuild: u64,
    runs: u64,
    loop_caps: Vec<String>,
}

impl Pool {
    fn add(&mut self, m: &OpBudgetMeter) {
        self.max_update = self.max_update.max(m.max_update_ios);
        self.max_update_rebuild = self.max_update_rebuild.max(m.max_update_ios_rebuild);
        self.runs += 1;
    }
}

fn params(n_cap: u64) -> Params {
    Params::derive(B, EPS, n_cap).unwrap()
}

/// Criterion 1: random mixed workloads against the oracle, including a
/// membership probe at every predecessor query key.
fn oracle_equivalence(pool: &mut Pool) -> Verdict {
    let mut probes = 0u64;
    for seed in 0..SEEDS {
        let ops = generate(GenKind::Random, MIXED_OPS, seed).unwrap();
        let mut cfg = RunConfig::new(EngineKind::Deamo, params(MIXED_OPS as u64));
        cfg.audit_every = 25_000;
        let mut r = Replayer::new(cfg).map_err(|e| e.to_string())?;
        for &op in &ops {
            r.step(op).map_err(|e| format!("seed {seed}: {e}"))?;
            probes += !op.is_update() as u64;
            if let Op::Pred(q) = op {
                let want = r.oracle().contains(&q);
                if r.engine_mut().member(q).map_err(|e| e.to_string())? != want {
                    return Err(format!("seed {seed}: member({q}) disagrees"));
                }
                probes += 1;
            }
        }
        let out = r.finish().map_err(|e| format!("seed {seed}: {e}"))?;
        pool.add(out.meter.as_ref().unwrap());
    }
    Ok(format!("{SEEDS} seeds x {MIXED_OPS} ops, {probes} probes and {SEEDS} digests exact"))
}

/// The long adversarial run shared by criteria 2, 3, 4, 7 and 9.
fn adversarial_run(ops: &[Op], engine: EngineKind) -> Result<(Outcome, u64), String> {
    let cfg = RunConfig::new(engine, params(ADVERSARIAL_CAP));
    let mut r = Replayer::new(cfg).map_err(|e| e.to_string())?;
    for &op in ops {
        r.step(op).map_err(|e| format!("{engine:?}: {e}"))?;
    }
    let quiescent = match r.engine() {
        Engine::Deamo(t) => t.quiescent_points(),
        _ => 0,
    };
    Ok((r.finish().map_err(|e| e.to_string())?, quiescent))
}

/// Criterion 8: drives growth and shrink rebuilds at B = 256, checking
/// the trigger after every update and the leaves at every switchover.
fn rebuild_correctness(pool: &mut Pool) -> Verdict {
    let mut cfg = TreeConfig::new(params(B));
    cfg.audit = AuditLevel::Census;
    let mut t = DeamoTree::<u64>::with_config(cfg).map_err(|e| e.to_string())?;
    let mut oracle = BTreeSet::new();
    let mut rng = StdRng::seed_from_u64(8);
    let mut armed = false;
    let mut switches = Vec::new();
    let mut fired = 0;

    let grow = (B * B / 2 + 4_000) as usize;
    let mut keys: Vec<u64> = Vec::new();
    while keys.len() < grow {
        let k = rng.gen_range(0..u64::MAX / 2);
        if oracle.insert(k) {
            keys.push(k);
        }
    }
    oracle.clear();
    let mut plan: Vec<Op> = keys.iter().map(|&k| Op::Insert(k)).collect();
    keys.shuffle(&mut rng);
    plan.extend(keys[..keys.len() - 200].iter().map(|&k| Op::Delete(k)));

    for (i, &op) in plan.iter().enumerate() {
        let busy = t.is_rebuilding();
        let n0 = t.built_for();
        let before = t.loop_stats().rebuilds;
        let r = match op {
            Op::Insert(k) => {
                oracle.insert(k);
                t.insert(k)
            }
            Op::Delete(k) => {
                oracle.remove(&k);
                t.delete(k)
            }
            _ => unreachable!(),
        };
        r.map_err(|e| format!("op {i}: {e}"))?;
        let n = oracle.len() as u64;
        if !busy {
            armed |= arms_shrink(n0, n);
            let want = grown(n0, n) || (armed && shrunk(n0, n));
            if t.is_rebuilding() != want {
                return Err(format!("op {i}: n0 {n0}, n {n}: trigger {} expected {want}", t.is_rebuilding()));
            }
            if want {
                armed = false;
                fired += 1;
            }
        }
        if t.loop_stats().rebuilds > before {
            let tau = t.params().tau;
            let sizes = t.leaf_sizes();
            let (lo, hi) = (tau / 4, 7 * tau / 4);
            if sizes.len() > 1 {
                if let Some(bad) = sizes.iter().find(|&&s| s < lo || s > hi) {
                    return Err(format!("op {i}: new leaf of {bad} outside [{lo}, {hi}]"));
                }
            }
            if !t.contents().unwrap().iter().eq(oracle.iter()) {
                return Err(format!("op {i}: contents differ from the oracle after switchover"));
            }
            switches.push(format!("n0 {n0} -> {} ({} leaves, tau' {tau})", t.built_for(), sizes.len()));
        }
    }
    if let Some(v) = t.violations().first() {
        return Err(v.clone());
    }
    pool.add(&t.meter());
    pool.loop_caps.extend(t.loop_stats().cap_violations(&t.params()));
    if fired < 2 || switches.len() < 2 {
        return Err(format!("expected a growth and a shrink rebuild, saw {fired} triggers, {} switchovers", switches.len()));
    }
    Ok(format!("{} updates, {fired} triggers all exact; switchovers: {}", plan.len(), switches.join("; ")))
}

/// Criterion 5: worst predecessor cost and fitted range constant on
/// trees of 2^16 and 2^24 keys.
fn query_scaling() -> Verdict {
    let mut rows = Vec::new();
    for lg in [16u32, 24] {
        let n = 1u64 << lg;
        let keys: Vec<u64> = (0..n).map(|i| 2 * i + 1).collect();
        let p = params(n);
        let t = DeamoTree::from_sorted(TreeConfig::new(p), &keys).map_err(|e| e.to_string())?;
        drop(keys);
        let mut rng = StdRng::seed_from_u64(lg as u64);
        let mut worst = 0;
        let mut c_q: f64 = 0.0;
        for _ in 0..4_000 {
            let q = rng.gen_range(0..2 * n + 2);
            let r = t.predecessor_with_cost(q).map_err(|e| e.to_string())?;
            let want = (q > 0).then(|| (q - 1 + q % 2).min(2 * n - 1));
            if r.value != want {
                return Err(format!("N=2^{lg}: predecessor({q}) = {:?}, expected {want:?}", r.value));
            }
            worst = worst.max(r.cost.cold);
        }
        for i in 0..400 {
            let a = rng.gen_range(0..2 * n);
            let span = [0, 64, 1 << 12, 1 << 16][i % 4] + rng.gen_range(0..64);
            let r = t.range_with_cost(a, a + span).map_err(|e| e.to_string())?;
            let bound = p.log_b_n as f64 + r.value.len() as f64 / B as f64;
            c_q = c_q.max(r.cost.cold as f64 / bound);
        }
        rows.push((lg, p.log_b_n, worst, c_q));
    }
    let (a, b) = (rows[0], rows[1]);
    let growth = b.2 as f64 / a.2 as f64;
    let allowed = PRED_GROWTH_SLACK * b.1 as f64 / a.1 as f64;
    let spread = a.3.max(b.3) / a.3.min(b.3);
    let detail = format!(
        "worst pred {} -> {} (x{growth:.2}, limit x{allowed:.2}); c_q {:.2} / {:.2} (spread {spread:.2}, limit {CQ_SPREAD})",
        a.2, b.2, a.3, b.3
    );
    if growth <= allowed && spread <= CQ_SPREAD {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn brute(x: &[u64], y: &[u64]) -> Option<u64> {
    x.iter().copied().filter(|e| !y.contains(e)).max()
}

/// Criterion 6: the selection procedure against brute force.
fn selection() -> Verdict {
    let (mut worst_c, mut cases) = (0f64, 0u64);
    let mut check = |x: &[u64], y: &[u64], block: u64| -> Result<u64, String> {
        let (got, cost) = largest_not_in(x, y, block).map_err(|e| e.to_string())?;
        if got != brute(x, y) {
            return Err(format!("X {x:?}, Y {y:?}: got {got:?}"));
        }
        worst_c = worst_c.max(cost as f64 / (x.len() as f64 / block as f64 + 1.0));
        Ok(1)
    };
    // Every X over an 8-element universe, every Y within it of half its size.
    for xm in 0u32..256 {
        let x: Vec<u64> = (0..8).filter(|i| xm >> i & 1 == 1).collect();
        for ym in 0u32..256 {
            if ym & !xm != 0 || 2 * ym.count_ones() != xm.count_ones() {
                continue;
            }
            let y: Vec<u64> = (0..8).filter(|i| ym >> i & 1 == 1).collect();
            for block in [2, 4, 256] {
                cases += check(&x, &y, block)?;
            }
        }
    }
    let exhaustive = cases;
    let mut rng = StdRng::seed_from_u64(6);
    for _ in 0..10_000 {
        let m = rng.gen_range(1..=2048);
        let mut x: BTreeSet<u64> = BTreeSet::new();
        while x.len() < 2 * m {
            x.insert(rng.gen_range(0..1 << 20));
        }
        let mut x: Vec<u64> = x.into_iter().collect();
        x.shuffle(&mut rng);
        let mut y: Vec<u64> = x.choose_multiple(&mut rng, m).copied().collect();
        y.shuffle(&mut rng);
        let block = [16, 64, 256][rng.gen_range(0..3)];
        cases += check(&x, &y, block)?;
    }
    drop(check);
    let detail = format!("{exhaustive} exhaustive and {} random instances exact; cost <= {worst_c:.2}*(|X|/B+1), limit {SELECT_C}", cases - exhaustive);
    if worst_c <= SELECT_C {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Criterion 10: queries leave every page byte-identical.
fn query_purity() -> Verdict {
    let ops = generate(GenKind::Random, 50_000, 10).unwrap();
    let mut t = DeamoTree::<u64>::new(params(1 << 16)).map_err(|e| e.to_string())?;
    for op in ops {
        match op {
            Op::Insert(k) => t.insert(k),
            Op::Delete(k) => t.delete(k),
            _ => Ok(()),
        }
        .map_err(|e| e.to_string())?;
    }
    let before = t.snapshot();
    let io = t.io();
    let mut rng = StdRng::seed_from_u64(10);
    for i in 0..1_000 {
        let q = rng.gen_range(0..200_000);
        match i % 3 {
            0 => drop(t.predecessor(q)),
            1 => drop(t.member(q)),
            _ => drop(t.range(q, q + 5_000)),
        }
    }
    if t.snapshot() != before || t.io() != io {
        return Err("pages or transfer counters changed under queries".into());
    }
    Ok(format!("{} bytes identical across 1000 queries", before.len()))
}

fn main() {
    let start = Instant::now();
    let mut lines: Vec<(u32, Verdict)> = Vec::new();
    let mut pool = Pool::default();

    lines.push((1, oracle_equivalence(&mut pool)));

    let ops = generate(GenKind::Adversarial, ADVERSARIAL_OPS, 2).unwrap();
    let deamo = adversarial_run(&ops, EngineKind::Deamo);
    let baseline = adversarial_run(&ops, EngineKind::Baseline);
    drop(ops);
    let c8 = rebuild_correctness(&mut pool);

    if let Ok((out, _)) = &deamo {
        pool.add(out.meter.as_ref().unwrap());
        pool.loop_caps.extend(out.loops.as_ref().unwrap().cap_violations(&params(ADVERSARIAL_CAP)));
    }
    let c2 = if deamo.is_err() {
        Err("adversarial run failed".to_string())
    } else {
        let d = format!(
            "max {} per update outside rebuilds, {} during rebuilds, over {} runs",
            pool.max_update, pool.max_update_rebuild, pool.runs
        );
        if pool.max_update <= K_IO && pool.max_update_rebuild <= 2 * K_IO {
            Ok(d)
        } else {
            Err(d)
        }
    };
    lines.push((2, c2));

    // The replayer stops on the first census finding (leaf bounds or
    // overfull nodes) at any quiescent point, so a finished run is clean.
    match &deamo {
        Ok((out, q)) if out.rebuilds == 0 => {
            lines.push((3, Ok(format!("{q} quiescent points over {ADVERSARIAL_OPS} adversarial ops, leaves within [tau, 5 tau]"))));
            lines.push((4, Ok(format!("{q} quiescent points, at most 2 overfull nodes each within 2 buffer_cap"))));
        }
        Ok(_) => {
            let why = "a rebuild relaxed the leaf floor".to_string();
            lines.push((3, Err(why.clone())));
            lines.push((4, Err(why)));
        }
        Err(e) => {
            lines.push((3, Err(e.clone())));
            lines.push((4, Err(e.clone())));
        }
    }

    lines.push((5, query_scaling()));
    lines.push((6, selection()));
    lines.push((
        7,
        if pool.loop_caps.is_empty() && deamo.is_ok() && c8.is_ok() {
            Ok(format!("no loop counter above its cap over {} runs", pool.runs))
        } else {
            Err(format!("{:?}", pool.loop_caps))
        },
    ));
    lines.push((8, c8));

    lines.push((
        9,
        match (&deamo, &baseline) {
            (Ok((d, _)), Ok((b, _))) => {
                let (dm, bm) = (d.summary.updates.max, b.summary.updates.max);
                let detail = format!(
                    "max per update: baseline {bm}, deamortized {dm} (x{:.1}); total I/O {} vs {} (x{:.2}); leaf merges {} vs {}",
                    bm as f64 / dm.max(1) as f64,
                    b.summary.total_io,
                    d.summary.total_io,
                    b.summary.total_io as f64 / d.summary.total_io.max(1) as f64,
                    b.merges,
                    d.merges
                );
                if bm > dm {
                    Ok(detail)
                } else {
                    Err(detail)
                }
            }
            (Err(e), _) | (_, Err(e)) => Err(e.clone()),
        },
    ));
    lines.push((10, query_purity()));

    lines.sort_by_key(|l| l.0);
    let mut failed = 0;
    for (n, v) in &lines {
        match v {
            Ok(d) => println!("criterion {n:>2}: PASS  {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2}: FAIL  {d}")
            }
        }
    }
    println!("acceptance: {} of {} passed in {:.0?}", lines.len() - failed, lines.len(), start.elapsed());
    if failed > 0 {
        std::process::exit(1);
    }
}
