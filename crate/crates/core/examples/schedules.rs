//! Block-length schedules for each mode over a range of error rates.

use qkd_cascade::bitframe::FRAME_BITS;
use qkd_cascade::params::{binary_entropy, build_schedule, BlockSchedule, CombinationMode};

fn main() -> qkd_cascade::Result<()> {
    for qber in [0.01, 0.02, 0.03, 0.05, 0.08] {
        let he = build_schedule(qber, FRAME_BITS, CombinationMode::HighEfficiency)?;
        println!(
            "qber {qber}: h = {:.4}, k_init = {}, eps_bit = {:.4e}, K' = {}",
            binary_entropy(qber)?,
            he.k_init,
            he.epsilon_bit,
            he.k_prime
        );
        for mode in CombinationMode::ALL {
            let s = build_schedule(qber, FRAME_BITS, mode)?;
            println!("  {:<4} {:?}", mode.short_name(), s.k);
        }
        println!("  orig {:?}", BlockSchedule::original_cascade(qber, FRAME_BITS)?.k);
    }
    Ok(())
}
