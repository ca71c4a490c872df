//! Reconciliation efficiency, frame error rate and throughput.
//!
//! With `m` parity bits disclosed to reconcile `n` bits at error rate `ε`,
//! the efficiency is `f = m / (n h(ε))`, or equivalently `(1 - R) / h(ε)`
//! with code rate `R = 1 - m/n`. Frames that fail verification are thrown
//! away; `f_FER = ((1 - FER)(1 - R) + FER) / h(ε)` charges for them.

use std::time::Duration;

use crate::cascade::FrameRecord;
use crate::error::{param, Result};
use crate::params::binary_entropy;

fn entropy_of_error_rate(eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 0.5) {
        return Err(param(format!("error rate must lie in (0, 0.5), got {eps}")));
    }
    binary_entropy(eps)
}

pub fn efficiency(m: f64, n: f64, eps: f64) -> Result<f64> {
    if !(n > 0.0) || !(m >= 0.0) {
        return Err(param(format!("need n > 0 and m >= 0, got m={m} n={n}")));
    }
    Ok(m / (n * entropy_of_error_rate(eps)?))
}

pub fn efficiency_rate_form(rate: f64, eps: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(param(format!("code rate must lie in [0, 1], got {rate}")));
    }
    Ok((1.0 - rate) / entropy_of_error_rate(eps)?)
}

pub fn efficiency_fer(rate: f64, fer: f64, eps: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&fer) {
        return Err(param(format!("frame error rate must lie in [0, 1], got {fer}")));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(param(format!("code rate must lie in [0, 1], got {rate}")));
    }
    Ok(((1.0 - fer) * (1.0 - rate) + fer) / entropy_of_error_rate(eps)?)
}

/// Additive per-frame totals. Merging is associative and commutative, so
/// workers can accumulate separately.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FrameTotals {
    pub frames: u64,
    pub failed: u64,
    pub n_total: u64,
    pub n_verified: u64,
    /// Disclosed bits of verified frames.
    pub m_verified: u64,
    /// Disclosed bits of all frames.
    pub m_all: u64,
    pub rounds: u64,
    pub backtrack_events: u64,
    pub searchlist_calls: u64,
    pub collisions: u64,
}

impl FrameTotals {
    pub fn add(&mut self, r: &FrameRecord) {
        self.frames += 1;
        self.n_total += r.n_bits;
        self.m_all += r.m_star;
        self.rounds += r.rounds as u64;
        self.backtrack_events += r.backtrack_events;
        self.searchlist_calls += r.searchlist_calls;
        self.collisions += r.collisions;
        if r.verified {
            self.n_verified += r.n_bits;
            self.m_verified += r.m_star;
        } else {
            self.failed += 1;
        }
    }

    pub fn merge(&mut self, o: &FrameTotals) {
        self.frames += o.frames;
        self.failed += o.failed;
        self.n_total += o.n_total;
        self.n_verified += o.n_verified;
        self.m_verified += o.m_verified;
        self.m_all += o.m_all;
        self.rounds += o.rounds;
        self.backtrack_events += o.backtrack_events;
        self.searchlist_calls += o.searchlist_calls;
        self.collisions += o.collisions;
    }

    /// `eps` is the true error rate of the channel.
    pub fn finish(&self, eps: f64, wall: Duration) -> Result<ReconStats> {
        if self.frames == 0 {
            return Err(param("no frames to aggregate"));
        }
        let h = entropy_of_error_rate(eps)?;
        let fer = self.failed as f64 / self.frames as f64;
        let (rate, f, f_fer) = if self.n_verified > 0 {
            let rate = 1.0 - self.m_verified as f64 / self.n_verified as f64;
            let rate = rate.clamp(0.0, 1.0);
            (rate, (1.0 - rate) / h, efficiency_fer(rate, fer, eps)?)
        } else {
            (f64::NAN, f64::NAN, 1.0 / h)
        };
        let secs = wall.as_secs_f64();
        Ok(ReconStats {
            frames: self.frames,
            failed: self.failed,
            n_total: self.n_total,
            m_star: self.m_verified,
            rate,
            f,
            f_fer,
            fer,
            rounds_mean: self.rounds as f64 / self.frames as f64,
            throughput_bps: if secs > 0.0 {
                self.n_verified as f64 / secs
            } else {
                f64::INFINITY
            },
            collisions_avoided: self.backtrack_events - self.searchlist_calls,
            searchlist_calls: self.searchlist_calls,
            backtrack_events: self.backtrack_events,
            wall,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconStats {
    pub frames: u64,
    pub failed: u64,
    /// Input bits of all frames.
    pub n_total: u64,
    /// Disclosed bits over verified frames.
    pub m_star: u64,
    /// Code rate `1 - m/n` over verified frames.
    pub rate: f64,
    pub f: f64,
    pub f_fer: f64,
    pub fer: f64,
    pub rounds_mean: f64,
    /// Verified input bits per second of wall time.
    pub throughput_bps: f64,
    /// Backtracking events settled by the lock bit without a list scan.
    pub collisions_avoided: u64,
    pub searchlist_calls: u64,
    pub backtrack_events: u64,
    pub wall: Duration,
}

pub fn aggregate(records: &[FrameRecord], eps: f64, wall: Duration) -> Result<ReconStats> {
    let mut t = FrameTotals::default();
    records.iter().for_each(|r| t.add(r));
    t.finish(eps, wall)
}
