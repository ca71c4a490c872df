//! Block-length schedules.
//!
//! The first pass uses `k_init = min(2^[log2(1/eps)], N/2)`, the second
//! `k2 = min(2^[log2(4/eps_bit)], N/2)` where `eps_bit` is the expected
//! residual error rate after a pass of length `2^K'`. Passes three to six
//! use `N/16, N/8, N/4, N/2`. `[x]` rounds half-up.

use std::fmt;
use std::str::FromStr;

use crate::bitframe::FRAME_BITS;
use crate::error::{param, Error, Result};

/// Number of passes in the adaptive schedule.
pub const PASSES: usize = 6;

/// How `k1` and `k2` are derived from `k_init` and `k_{2,K'}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CombinationMode {
    HighEfficiency,
    MediumEfficiency,
    MediumThroughput,
    HighThroughput,
}

impl CombinationMode {
    pub const ALL: [CombinationMode; 4] = [
        CombinationMode::HighEfficiency,
        CombinationMode::MediumEfficiency,
        CombinationMode::MediumThroughput,
        CombinationMode::HighThroughput,
    ];

    /// `(halve k1, halve k2)`.
    pub fn halving(self) -> (bool, bool) {
        match self {
            CombinationMode::HighEfficiency => (false, false),
            CombinationMode::MediumEfficiency => (false, true),
            CombinationMode::MediumThroughput => (true, false),
            CombinationMode::HighThroughput => (true, true),
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            CombinationMode::HighEfficiency => "he",
            CombinationMode::MediumEfficiency => "me",
            CombinationMode::MediumThroughput => "mt",
            CombinationMode::HighThroughput => "ht",
        }
    }
}

impl fmt::Display for CombinationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for CombinationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "he" | "high-efficiency" => Ok(CombinationMode::HighEfficiency),
            "me" | "medium-efficiency" => Ok(CombinationMode::MediumEfficiency),
            "mt" | "medium-throughput" => Ok(CombinationMode::MediumThroughput),
            "ht" | "high-throughput" => Ok(CombinationMode::HighThroughput),
            other => Err(param(format!("unknown combination mode {other:?}"))),
        }
    }
}

/// Where a schedule came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Adaptive(CombinationMode),
    /// `k1 ~ 0.73/eps`, doubled for three further passes.
    OriginalCascade,
    /// Hand-picked lengths for a reduced frame size; test use only.
    Scaled,
}

impl ScheduleKind {
    /// `he`/`me`/`mt`/`ht`, `orig` or `scaled`.
    pub fn label(self) -> &'static str {
        match self {
            ScheduleKind::Adaptive(m) => m.short_name(),
            ScheduleKind::OriginalCascade => "orig",
            ScheduleKind::Scaled => "scaled",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockSchedule {
    pub epsilon: f64,
    pub n: usize,
    /// Block length of each pass, pass 1 first.
    pub k: Vec<usize>,
    pub k_init: usize,
    /// `k_{2,K'}` before any halving.
    pub k2_base: usize,
    pub k_prime: u32,
    pub epsilon_bit: f64,
    pub kind: ScheduleKind,
}

impl BlockSchedule {
    pub fn passes(&self) -> usize {
        self.k.len()
    }

    /// Block length of 1-based pass `pass`.
    pub fn block_len(&self, pass: usize) -> usize {
        self.k[pass - 1]
    }

    pub fn blocks_in_pass(&self, pass: usize) -> usize {
        self.n / self.block_len(pass)
    }

    pub fn is_scaled(&self) -> bool {
        self.kind == ScheduleKind::Scaled
    }

    /// A schedule with explicit block lengths for frames shorter than
    /// `FRAME_BITS`. Sessions only accept these when scaled mode is enabled.
    pub fn scaled(n: usize, k: &[usize]) -> Result<Self> {
        if !n.is_power_of_two() || n < 2 {
            return Err(param(format!("scaled frame length {n} must be a power of two")));
        }
        if k.is_empty() || k.len() > u8::MAX as usize {
            return Err(param("scaled schedule needs between 1 and 255 passes"));
        }
        for &ki in k {
            if !ki.is_power_of_two() || n % ki != 0 {
                return Err(param(format!("block length {ki} must be a power of two dividing {n}")));
            }
        }
        Ok(BlockSchedule {
            epsilon: 0.0,
            n,
            k: k.to_vec(),
            k_init: k[0],
            k2_base: *k.get(1).unwrap_or(&k[0]),
            k_prime: k[0].trailing_zeros(),
            epsilon_bit: 0.0,
            kind: ScheduleKind::Scaled,
        })
    }

    /// Original Cascade baseline: `k1 = 2^[log2(0.73/eps)]`, doubled for
    /// four passes in total, each clamped to `N/2`.
    pub fn original_cascade(eps: f64, n: usize) -> Result<Self> {
        check_eps(eps)?;
        check_frame(n)?;
        let k1 = pow2_rounded(0.73 / eps, n / 2).max(2);
        let k: Vec<usize> = (0..4).map(|i| (k1 << i).min(n / 2)).collect();
        Ok(BlockSchedule {
            epsilon: eps,
            n,
            k_init: k1,
            k2_base: k[1],
            k_prime: k1.trailing_zeros(),
            epsilon_bit: compute_epsilon_bit(eps, k1.trailing_zeros().max(1))?,
            k,
            kind: ScheduleKind::OriginalCascade,
        })
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 0.5) {
        return Err(param(format!("qber must lie in (0, 0.5), got {eps}")));
    }
    Ok(())
}

fn check_frame(n: usize) -> Result<()> {
    if n != FRAME_BITS {
        return Err(param(format!("frame length must be {FRAME_BITS}, got {n}")));
    }
    Ok(())
}

/// Round-half-up to the nearest integer.
fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// `min(2^[log2(x)], cap)` with `cap` a power of two.
fn pow2_rounded(x: f64, cap: usize) -> usize {
    let exp = round_half_up(x.log2());
    let cap_exp = cap.trailing_zeros() as f64;
    if exp >= cap_exp {
        cap
    } else if exp <= 0.0 {
        1
    } else {
        1usize << exp as u32
    }
}

/// Binary Shannon entropy, with `h(0) = h(1) = 0`.
pub fn binary_entropy(eps: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(param(format!("probability must lie in [0, 1], got {eps}")));
    }
    if eps == 0.0 || eps == 1.0 {
        return Ok(0.0);
    }
    Ok(-eps * eps.log2() - (1.0 - eps) * (1.0 - eps).log2())
}

pub fn compute_k_init(eps: f64, n: usize) -> Result<usize> {
    check_eps(eps)?;
    if n < 2 || !n.is_power_of_two() {
        return Err(param(format!("frame length {n} must be a power of two")));
    }
    Ok(pow2_rounded(1.0 / eps, n / 2))
}

/// Expected residual error rate after a pass with blocks of `2^k_prime` bits.
pub fn compute_epsilon_bit(eps: f64, k_prime: u32) -> Result<f64> {
    check_eps(eps)?;
    if k_prime == 0 || k_prime > 62 {
        return Err(param(format!("K' must lie in 1..=62, got {k_prime}")));
    }
    let q = 1.0 - 2.0 * eps;
    let len = (1u64 << k_prime) as f64;
    Ok(eps * (1.0 - q.powf(len - 1.0)) / (1.0 + q.powf(len)))
}

pub fn compute_k2(eps: f64, k_prime: u32, n: usize) -> Result<usize> {
    let eps_bit = compute_epsilon_bit(eps, k_prime)?;
    if n < 2 || !n.is_power_of_two() {
        return Err(param(format!("frame length {n} must be a power of two")));
    }
    Ok(pow2_rounded(4.0 / eps_bit, n / 2))
}

/// Adaptive six-pass schedule for a `FRAME_BITS` frame.
pub fn build_schedule(eps: f64, n: usize, mode: CombinationMode) -> Result<BlockSchedule> {
    check_eps(eps)?;
    check_frame(n)?;
    let k_init = compute_k_init(eps, n)?;
    // K' tracks k_init so that k_{2,K'} is one value shared by all four modes.
    let k_prime = k_init.trailing_zeros().max(1);
    let epsilon_bit = compute_epsilon_bit(eps, k_prime)?;
    let k2_base = compute_k2(eps, k_prime, n)?;

    let (halve1, halve2) = mode.halving();
    let k1 = if halve1 { k_init / 2 } else { k_init };
    let k2 = if halve2 { k2_base / 2 } else { k2_base };
    if k1 < 2 || k2 < 2 {
        return Err(param(format!(
            "qber {eps} too high for mode {mode}: k1={k1}, k2={k2}"
        )));
    }
    let k = vec![k1, k2, n / 16, n / 8, n / 4, n / 2];
    debug_assert!(k.iter().all(|&ki| ki.is_power_of_two() && n % ki == 0));
    Ok(BlockSchedule {
        epsilon: eps,
        n,
        k,
        k_init,
        k2_base,
        k_prime,
        epsilon_bit,
        kind: ScheduleKind::Adaptive(mode),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const N: usize = FRAME_BITS;

    #[test]
    fn entropy_values() {
        assert_eq!(binary_entropy(0.5).unwrap(), 1.0);
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        assert!((binary_entropy(0.01).unwrap() - 0.080793).abs() < 1e-6);
        assert!((binary_entropy(0.02).unwrap() - 0.14144).abs() < 1e-5);
        assert!(binary_entropy(1.5).is_err());
        assert!(binary_entropy(-0.1).is_err());
    }

    #[test]
    fn k_init_examples() {
        assert_eq!(compute_k_init(0.01, N).unwrap(), 128);
        assert_eq!(compute_k_init(1e-9, N).unwrap(), 32768);
        assert_eq!(compute_k_init(0.25, N).unwrap(), 4);
        assert!(compute_k_init(0.0, N).is_err());
        assert!(compute_k_init(-0.01, N).is_err());
    }

    #[test]
    fn epsilon_bit_example() {
        let v = compute_epsilon_bit(0.01, 7).unwrap();
        assert!((v - 0.008585).abs() < 1e-5, "{v}");
        let tiny = compute_epsilon_bit(1e-9, 7).unwrap();
        assert!(tiny <= 1e-9);
    }

    #[test]
    fn epsilon_bit_bounds_sweep() {
        for i in 1..500 {
            let eps = i as f64 / 1000.0;
            for kp in 1..=16 {
                let v = compute_epsilon_bit(eps, kp).unwrap();
                assert!(v > 0.0 && v < 2.0 * eps, "eps={eps} K'={kp} -> {v}");
            }
        }
    }

    #[test]
    fn k2_examples() {
        assert_eq!(compute_k2(0.01, 7, N).unwrap(), 512);
        assert_eq!(compute_k2(1e-12, 30, N).unwrap(), 32768);
        // oracle: evaluate the closed forms directly at eps = 0.1
        let eps = 0.1f64;
        let kp = (compute_k_init(eps, N).unwrap() as f64).log2().round() as u32;
        let q: f64 = 1.0 - 2.0 * eps;
        let len = 2f64.powi(kp as i32);
        let eb = eps * (1.0 - q.powf(len - 1.0)) / (1.0 + q.powf(len));
        let expected = 2usize.pow(((4.0 / eb).log2() + 0.5).floor() as u32).min(N / 2);
        assert_eq!(compute_k2(eps, kp, N).unwrap(), expected);
    }

    #[test]
    fn schedule_examples() {
        let he = build_schedule(0.01, N, CombinationMode::HighEfficiency).unwrap();
        assert_eq!(he.k, vec![128, 512, 4096, 8192, 16384, 32768]);
        let ht = build_schedule(0.01, N, CombinationMode::HighThroughput).unwrap();
        assert_eq!(ht.k, vec![64, 256, 4096, 8192, 16384, 32768]);
        let mt = build_schedule(0.01, N, CombinationMode::MediumThroughput).unwrap();
        assert_eq!((mt.k[0], mt.k[1]), (mt.k_init / 2, mt.k2_base));
        let me = build_schedule(0.01, N, CombinationMode::MediumEfficiency).unwrap();
        assert_eq!((me.k[0], me.k[1]), (me.k_init, me.k2_base / 2));
    }

    #[test]
    fn schedule_rejects_bad_inputs() {
        assert!(build_schedule(0.01, 1024, CombinationMode::HighEfficiency).is_err());
        assert!(build_schedule(0.45, N, CombinationMode::HighThroughput).is_err());
        assert!(build_schedule(0.5, N, CombinationMode::HighEfficiency).is_err());
    }

    #[test]
    fn original_cascade_schedule() {
        let s = BlockSchedule::original_cascade(0.01, N).unwrap();
        assert_eq!(s.k, vec![64, 128, 256, 512]);
        assert_eq!(s.kind, ScheduleKind::OriginalCascade);
    }

    #[test]
    fn mode_parsing() {
        for m in CombinationMode::ALL {
            assert_eq!(m.short_name().parse::<CombinationMode>().unwrap(), m);
        }
        assert!("xx".parse::<CombinationMode>().is_err());
    }

    proptest! {
        #[test]
        fn schedule_invariants(eps in 0.001f64..0.2, mi in 0usize..4) {
            let mode = CombinationMode::ALL[mi];
            let s = build_schedule(eps, N, mode).unwrap();
            prop_assert!(s.k.iter().all(|&k| k.is_power_of_two() && N % k == 0 && k >= 2));
            prop_assert_eq!(&s.k[2..], &[N / 16, N / 8, N / 4, N / 2][..]);
            prop_assert!(s.k[2] < s.k[3] && s.k[3] < s.k[4] && s.k[4] < s.k[5]);
            prop_assert!(s.k[0] == s.k_init || s.k[0] == s.k_init / 2);
            prop_assert!(s.k[1] == s.k2_base || s.k[1] == s.k2_base / 2);
            let he = build_schedule(eps, N, CombinationMode::HighEfficiency).unwrap();
            let ht = build_schedule(eps, N, CombinationMode::HighThroughput).unwrap();
            prop_assert!(N / ht.k[0] >= N / he.k[0]);
        }

        #[test]
        fn entropy_symmetry(x in 0.0f64..=1.0) {
            let a = binary_entropy(x).unwrap();
            let b = binary_entropy(1.0 - x).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
