//! Quantitative parameters derived from the block size `B`, the trade-off
//! exponent `epsilon` and the capacity bound `N`.
//!
//! Every derived field is a pure function of `(B, epsilon, N, Constants)`.
//! Real powers are floored; a power that lands within `1e-9` of an integer
//! is treated as that integer so that `256^0.25` is `4` and not `3`.

use crate::error::ParamError;

/// Tunable constants the analysis leaves symbolic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Constants {
    /// Scheduling constant: user updates per maintenance I/O are
    /// `flush_quantum / (c_i * logBN)`.
    pub c_i: u64,
    /// Height constant: height and path-loop caps are `c_h * logBN`.
    pub c_h: u64,
    /// Cache size in blocks is `c_m * logBN` (plus the working-set reserve).
    pub c_m: u64,
    /// Block transfers allowed per resumption of the maintenance coroutine.
    pub k_io: u64,
}

impl Default for Constants {
    fn default() -> Self {
        Constants {
            c_i: 4,
            c_h: 8,
            c_m: 4,
            k_io: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Params {
    /// Block size in updates per block.
    pub block: u64,
    pub epsilon: f64,
    pub delta: f64,
    pub n_cap: u64,
    /// `ceil(log_B N)`.
    pub log_b_n: u64,
    pub fanout_max: u64,
    pub fanout_min: u64,
    /// Internal-node buffer limit `floor(B^(1-delta))`.
    pub buffer_cap: u64,
    /// Updates moved per flush step `max(1, floor(B^(1-2 delta)))`.
    pub flush_quantum: u64,
    /// Leaf-size unit `B * logBN^2`.
    pub tau: u64,
    pub microleaf_cap: u64,
    pub microroot_buffer_cap: u64,
    /// User updates accepted per maintenance I/O.
    pub update_batch: u64,
    pub constants: Constants,
}

/// `floor(base^exp)`, snapping to the nearest integer when within rounding noise.
pub(crate) fn floor_pow(base: u64, exp: f64) -> u64 {
    let v = (base as f64).powf(exp);
    let r = v.round();
    if (v - r).abs() <= 1e-9 * r.max(1.0) {
        r as u64
    } else {
        v.floor() as u64
    }
}

/// Smallest `h >= 1` with `base^h >= n`.
pub(crate) fn ceil_log(base: u64, n: u64) -> u64 {
    let mut h = 1;
    let mut p = base as u128;
    while p < n as u128 {
        p *= base as u128;
        h += 1;
    }
    h
}

impl Params {
    pub fn derive(block: u64, epsilon: f64, n_cap: u64) -> Result<Params, ParamError> {
        Params::derive_with(block, epsilon, n_cap, Constants::default())
    }

    pub fn derive_with(
        block: u64,
        epsilon: f64,
        n_cap: u64,
        constants: Constants,
    ) -> Result<Params, ParamError> {
        if block < 16 {
            return Err(ParamError::BlockTooSmall(block));
        }
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(ParamError::EpsilonOutOfRange(epsilon));
        }
        if n_cap < block {
            return Err(ParamError::CapacityBelowBlock { n_cap, block });
        }
        for (name, v) in [
            ("c_i", constants.c_i),
            ("c_h", constants.c_h),
            ("c_m", constants.c_m),
            ("k_io", constants.k_io),
        ] {
            if v == 0 {
                return Err(ParamError::ZeroConstant(name));
            }
        }
        let delta = epsilon / 2.0;
        let log_b_n = ceil_log(block, n_cap);
        let fanout_max = floor_pow(block, delta).max(4);
        let fanout_min = (fanout_max / 2).max(2);
        let buffer_cap = floor_pow(block, 1.0 - delta);
        let flush_quantum = floor_pow(block, 1.0 - 2.0 * delta).max(1);
        if fanout_max + buffer_cap > block {
            return Err(ParamError::NodeDoesNotFit {
                fanout: fanout_max,
                buffer: buffer_cap,
                block,
            });
        }
        let tau = block * log_b_n * log_b_n;
        let update_batch = (flush_quantum / (constants.c_i * log_b_n)).max(1);
        Ok(Params {
            block,
            epsilon,
            delta,
            n_cap,
            log_b_n,
            fanout_max,
            fanout_min,
            buffer_cap,
            flush_quantum,
            tau,
            microleaf_cap: block * log_b_n,
            microroot_buffer_cap: buffer_cap * log_b_n,
            update_batch,
            constants,
        })
    }

    /// Same `(B, epsilon, constants)` with a new capacity bound.
    pub fn with_capacity(&self, n_cap: u64) -> Result<Params, ParamError> {
        Params::derive_with(self.block, self.epsilon, n_cap.max(self.block), self.constants)
    }

    /// Logarithm the maintenance rate is set by at `n_live` keys. A tree
    /// keeps serving until its count reaches about `n_cap^2 / 2`, so past its
    /// capacity the rate follows the live count and the height that comes
    /// with it.
    pub fn rate_log(&self, n_live: u64) -> u64 {
        self.log_b_n.max(ceil_log(self.block, n_live))
    }

    /// User updates accepted per maintenance resumption at `n_live` keys.
    pub fn update_batch_at(&self, n_live: u64) -> u64 {
        (self.flush_quantum / (self.constants.c_i * self.rate_log(n_live))).max(1)
    }

    /// True when fewer than one user update per I/O would be owed, so the
    /// schedule inverts to several I/Os per update.
    pub fn low_rate(&self) -> bool {
        self.low_rate_at(self.n_cap)
    }

    fn low_rate_at(&self, n_live: u64) -> bool {
        self.flush_quantum < self.constants.c_i * self.rate_log(n_live)
    }

    /// True when a full buffer always routes at least one quantum to some
    /// child (`ceil(buffer_cap / fanout_max) >= flush_quantum`). The
    /// at-most-two-overfull-nodes invariant relies on it; desk-scale floors
    /// can break it (e.g. `B = 16`, `epsilon = 0.5`).
    pub fn flush_guaranteed(&self) -> bool {
        self.buffer_cap.div_ceil(self.fanout_max) >= self.flush_quantum
    }

    /// Maintenance I/Os run per accepted user update in low-rate mode.
    pub fn ios_per_update(&self) -> u64 {
        self.ios_per_update_at(self.n_cap)
    }

    pub fn ios_per_update_at(&self, n_live: u64) -> u64 {
        if self.low_rate_at(n_live) {
            (self.constants.c_i * self.rate_log(n_live)).div_ceil(self.flush_quantum)
        } else {
            1
        }
    }

    /// Worst-case block transfers a single user update may be charged.
    pub fn update_budget(&self) -> u64 {
        self.update_budget_at(self.n_cap)
    }

    pub fn update_budget_at(&self, n_live: u64) -> u64 {
        self.constants.k_io * self.ios_per_update_at(n_live)
    }

    /// Cap on height-bounded loops.
    pub fn height_cap(&self) -> u64 {
        self.constants.c_h * self.log_b_n
    }

    /// Cap on the repeated-flush loops that drain a buffer of at most
    /// twice the limit.
    pub fn drain_cap(&self) -> u64 {
        (2 * self.buffer_cap).div_ceil(self.flush_quantum)
    }

    /// Blocks occupied by a full micro-leaf.
    pub fn microleaf_span(&self) -> u64 {
        self.microleaf_cap.div_ceil(self.block) + 1
    }

    /// Default cache size in blocks: `c_m * logBN` plus room for the
    /// largest set of pages one structural step holds at once.
    pub fn default_cache_blocks(&self) -> u64 {
        self.constants.c_m * self.log_b_n + 6 * self.microleaf_span() + 8
    }

    /// Predecessor working-set size `B * logBN`.
    pub fn query_window(&self) -> u64 {
        self.block * self.log_b_n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flush_guarantee_needs_real_block_sizes() {
        assert!(!Params::derive(16, 0.5, 16).unwrap().flush_guaranteed());
        assert!(Params::derive(16, 0.9, 16).unwrap().flush_guaranteed());
        assert!(Params::derive(256, 0.5, 1 << 20).unwrap().flush_guaranteed());
        assert!(Params::derive(4096, 0.5, 1 << 30).unwrap().flush_guaranteed());
    }

    #[test]
    fn b256_eps_half_n_2_20() {
        let p = Params::derive(256, 0.5, 1 << 20).unwrap();
        assert_eq!(p.delta, 0.25);
        assert_eq!(p.log_b_n, 3);
        assert_eq!(p.fanout_max, 4);
        assert_eq!(p.fanout_min, 2);
        assert_eq!(p.buffer_cap, 64);
        assert_eq!(p.flush_quantum, 16);
        assert_eq!(p.tau, 2304);
        assert_eq!(p.microleaf_cap, 768);
        assert_eq!(p.microroot_buffer_cap, 192);
        assert_eq!(p.update_batch, 1);
    }

    #[test]
    fn b16_floor_engages() {
        let p = Params::derive(16, 0.5, 16).unwrap();
        assert_eq!(p.log_b_n, 1);
        assert_eq!(p.tau, 16);
        assert_eq!(p.fanout_max, 4);
    }

    #[test]
    fn b4096_batch() {
        let p = Params::derive(4096, 0.5, 1 << 30).unwrap();
        assert_eq!(p.flush_quantum, 64);
        assert_eq!(p.buffer_cap, 512);
        assert_eq!(p.log_b_n, 3);
        assert_eq!(p.update_batch, 5);
    }

    #[test]
    fn rejects_each_bad_input_distinctly() {
        assert_eq!(
            Params::derive(8, 0.5, 100),
            Err(ParamError::BlockTooSmall(8))
        );
        assert!(matches!(
            Params::derive(256, 1.0, 1 << 20),
            Err(ParamError::EpsilonOutOfRange(_))
        ));
        assert!(matches!(
            Params::derive(256, 0.0, 1 << 20),
            Err(ParamError::EpsilonOutOfRange(_))
        ));
        assert!(matches!(
            Params::derive(256, 0.5, 100),
            Err(ParamError::CapacityBelowBlock { .. })
        ));
        assert!(matches!(
            Params::derive(16, 0.1, 1 << 10),
            Err(ParamError::NodeDoesNotFit { .. })
        ));
    }

    #[test]
    fn low_rate_mode_at_small_block() {
        let p = Params::derive(16, 0.5, 1 << 20).unwrap();
        assert_eq!(p.log_b_n, 5);
        assert_eq!(p.flush_quantum, 4);
        assert!(p.low_rate());
        assert_eq!(p.ios_per_update(), 5);
        let q = Params::derive(256, 0.5, 1 << 20).unwrap();
        assert!(!q.low_rate());
    }

    #[test]
    fn rate_follows_the_live_count_past_capacity() {
        let p = Params::derive(256, 0.5, 256).unwrap();
        assert_eq!((p.update_batch, p.update_batch_at(100)), (4, 4));
        assert_eq!(p.update_batch_at(32_768), 2);
        assert_eq!(p.update_budget_at(32_768), 1);
        let q = Params::derive_with(16, 0.5, 16, Constants { c_i: 16, ..Constants::default() }).unwrap();
        assert_eq!(q.ios_per_update_at(16), 4);
        assert_eq!(q.ios_per_update_at(17), 8);
    }

    #[test]
    fn ceil_log_is_exact_at_powers() {
        assert_eq!(ceil_log(256, 1 << 16), 2);
        assert_eq!(ceil_log(256, (1 << 16) + 1), 3);
        assert_eq!(ceil_log(256, 1 << 24), 3);
        assert_eq!(ceil_log(16, 16), 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn derived_fields_hold_invariants(
                block in 16u64..100_000,
                eps in 0.05f64..0.95,
                extra in 0u64..1_000_000_000,
            ) {
                let n = block + extra;
                if let Ok(p) = Params::derive(block, eps, n) {
                    prop_assert_eq!(p.delta, eps / 2.0);
                    prop_assert!(p.fanout_min >= 2 && p.fanout_min <= p.fanout_max);
                    prop_assert!(p.flush_quantum <= p.buffer_cap && p.buffer_cap <= block);
                    prop_assert_eq!(p.tau, block * p.log_b_n * p.log_b_n);
                    let c = p.constants.c_i * p.log_b_n;
                    prop_assert!(c * p.update_batch <= p.flush_quantum + c);
                    prop_assert_eq!(Params::derive(block, eps, n).unwrap(), p);
                }
            }

            #[test]
            fn tau_monotone_in_capacity(block in 16u64..5000, a in 0u64..1u64 << 40, b in 0u64..1u64 << 40) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let p = Params::derive(block, 0.5, block + lo);
                let q = Params::derive(block, 0.5, block + hi);
                if let (Ok(p), Ok(q)) = (p, q) {
                    prop_assert!(p.tau <= q.tau);
                }
            }
        }
    }
}
