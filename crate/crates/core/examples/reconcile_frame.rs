//! One frame reconciled in memory, round by round.

use qkd_cascade::bitframe::{generate_frame_pair, FRAME_BITS};
use qkd_cascade::cascade::{CorrectingSession, ProtocolContext, ProtocolOptions, ReferenceSession};
use qkd_cascade::metrics::efficiency;
use qkd_cascade::params::{build_schedule, CombinationMode};

fn main() -> qkd_cascade::Result<()> {
    let qber = 0.02;
    let schedule = build_schedule(qber, FRAME_BITS, CombinationMode::HighEfficiency)?;
    println!("schedule {:?}", schedule.k);
    let ctx = ProtocolContext::new(schedule, 2024, ProtocolOptions::default())?;

    let (a, b) = generate_frame_pair(0, FRAME_BITS, qber, 5)?;
    let errors = a.bits.hamming_distance(&b.bits)?;
    let mut alice = ReferenceSession::new(ctx.clone(), a)?;
    let mut bob = CorrectingSession::new(ctx, b)?;

    let (mut to_alice, _) = bob.step(Vec::new());
    let mut last_pass = 0;
    while !bob.status().is_final() {
        let (to_bob, _) = alice.step(std::mem::take(&mut to_alice));
        to_alice = bob.step(to_bob).0;
        if bob.pass() != last_pass {
            last_pass = bob.pass();
            println!("round {:>4}: pass {last_pass}, {} bits disclosed", bob.rounds(), bob.m_star());
        }
    }
    alice.step(to_alice);

    let r = bob.record();
    println!(
        "{:?} after {} rounds: {} of {errors} errors fixed, f = {:.4}",
        bob.status(),
        r.rounds,
        r.corrections,
        efficiency(r.m_star as f64, r.n_bits as f64, qber)?
    );
    println!(
        "backtracking: {} events, {} list scans, {} collisions",
        r.backtrack_events, r.searchlist_calls, r.collisions
    );
    assert_eq!(alice.frame().bits, bob.frame().bits);
    Ok(())
}
