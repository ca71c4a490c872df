//! Simulated raw key: a BSC pair, cut into frames, shuffled and restored.

use qkd_cascade::bitframe::{
    apply_permutation, build_permutation, generate_bsc_pair, segment, Direction, FRAME_BITS,
};

fn main() -> qkd_cascade::Result<()> {
    let qber = 0.03;
    let (a, b) = generate_bsc_pair(3 * FRAME_BITS + 1000, qber, 42)?;
    let errors = a.hamming_distance(&b)?;
    println!(
        "{} bits, {errors} differ ({:.3}% vs {:.1}% nominal)",
        a.len(),
        100.0 * errors as f64 / a.len() as f64,
        100.0 * qber
    );

    let cut = segment(&b);
    println!("{} frames of {FRAME_BITS} bits, {} bits left over", cut.frames.len(), cut.remainder_len());

    let frame = &cut.frames[0];
    let table = build_permutation(7, frame.len())?;
    let shuffled = apply_permutation(&frame.bits, &table, Direction::Forward)?;
    let restored = apply_permutation(&shuffled, &table, Direction::Inverse)?;
    println!(
        "bit 0 moves to {}; weight kept: {}; inverse restores: {}",
        table.map(0),
        shuffled.count_ones() == frame.bits.count_ones(),
        restored == frame.bits
    );
    Ok(())
}
