//! Stop-and-wait against a pipelined scheduler over a simulated link.

use std::sync::Arc;

use qkd_cascade::bitframe::FRAME_BITS;
use qkd_cascade::cascade::{ProtocolContext, ProtocolOptions, Role};
use qkd_cascade::metrics::FrameTotals;
use qkd_cascade::params::{build_schedule, CombinationMode};
use qkd_cascade::pipeline::{run_dual, BscFrames, PipelineConfig};
use qkd_cascade::transport::ChannelConfig;

fn main() -> qkd_cascade::Result<()> {
    let qber = 0.03;
    let frames = 8;
    let schedule = build_schedule(qber, FRAME_BITS, CombinationMode::HighThroughput)?;
    let ctx = ProtocolContext::new(schedule, 11, ProtocolOptions::default())?;
    let source = |side| Arc::new(BscFrames { frame_bits: FRAME_BITS, qber, seed: 11, side });

    for stages in [1, 2, 4, 8] {
        let cfg = PipelineConfig {
            workers: 1,
            stages,
            ..PipelineConfig::default()
        };
        let link = ChannelConfig::new(0.5, 0.1, 3)?;
        let (bob, alice) = run_dual(&cfg, &ctx, frames, link, source(Role::Reference), source(Role::Correcting), true)?;
        let mut totals = FrameTotals::default();
        bob.records().iter().for_each(|r| totals.add(r));
        let stats = totals.finish(qber, bob.stats.wall)?;
        println!(
            "stages {stages}: {:>6.3} Mbit/s, {} link rounds, f = {:.4}, {} bits disclosed",
            stats.throughput_bps / 1e6,
            bob.stats.rounds(),
            stats.f,
            alice.disclosed_bits
        );
    }
    Ok(())
}
