//! The two parties over TCP.
//!
//! With no arguments both run in this process over loopback. Otherwise run
//! `reference <addr>` in one terminal and `correcting <addr>` in another.

use std::net::TcpListener;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use qkd_cascade::bitframe::FRAME_BITS;
use qkd_cascade::cascade::{ProtocolContext, ProtocolOptions, Role};
use qkd_cascade::params::{build_schedule, CombinationMode};
use qkd_cascade::pipeline::{run_correcting, run_reference, BscFrames, PipelineConfig};
use qkd_cascade::transport::{tcp_accept, tcp_connect};

const FRAMES: u64 = 6;
const QBER: f64 = 0.02;

fn setup() -> qkd_cascade::Result<(PipelineConfig, Arc<ProtocolContext>)> {
    let schedule = build_schedule(QBER, FRAME_BITS, CombinationMode::MediumEfficiency)?;
    let cfg = PipelineConfig { workers: 2, stages: 3, ..PipelineConfig::default() };
    Ok((cfg, ProtocolContext::new(schedule, 99, ProtocolOptions::default())?))
}

fn frames(side: Role) -> Arc<BscFrames> {
    Arc::new(BscFrames { frame_bits: FRAME_BITS, qber: QBER, seed: 99, side })
}

fn reference(listener: TcpListener) -> qkd_cascade::Result<()> {
    let (cfg, ctx) = setup()?;
    let link = tcp_accept(&listener)?;
    let r = run_reference(&cfg, &ctx, FRAMES, link, frames(Role::Reference))?;
    println!("reference: {} frames answered, {} parity bits disclosed", r.stats.completed(), r.disclosed_bits);
    Ok(())
}

fn correcting(addr: &str) -> qkd_cascade::Result<()> {
    let (cfg, ctx) = setup()?;
    let link = tcp_connect(addr, Duration::from_secs(30))?;
    let report = run_correcting(&cfg, &ctx, FRAMES, link, frames(Role::Correcting), None)?;
    for o in &report.outcomes {
        let r = &o.record;
        println!("frame {}: verified {} in {} rounds, {} corrections", r.frame_id, r.verified, r.rounds, r.corrections);
    }
    Ok(())
}

fn main() -> qkd_cascade::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match args.iter().map(String::as_str).collect::<Vec<_>>()[..] {
        ["reference", addr] => reference(TcpListener::bind(addr)?),
        ["correcting", addr] => correcting(addr),
        [] => {
            let listener = TcpListener::bind("127.0.0.1:0")?;
            let addr = listener.local_addr()?.to_string();
            let alice = thread::spawn(move || reference(listener));
            correcting(&addr)?;
            alice.join().expect("reference thread panicked")
        }
        _ => {
            eprintln!("usage: tcp_two_party [reference|correcting <addr>]");
            std::process::exit(2);
        }
    }
}
