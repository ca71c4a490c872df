//! Salted polynomial digest over GF(2^64) for frame verification.
//!
//! The frame is read as 64-bit words `w_0..w_{L-1}` followed by its bit
//! length, and hashed by Horner evaluation `h <- (h ^ w) * s` with a
//! non-zero salt `s`. Two distinct inputs of equal length collide only if
//! `s` is a root of their difference polynomial, so at most `(L + 1) / 2^64`
//! over the salt; a single flipped bit never collides.

use crate::bitframe::BitVector;

/// x^64 + x^4 + x^3 + x + 1
const REDUCTION: u64 = 0x1B;

/// Carry-less multiplication modulo the reduction polynomial.
pub fn gf64_mul(a: u64, b: u64) -> u64 {
    let mut a = a;
    let mut b = b;
    let mut acc = 0u64;
    while b != 0 {
        if b & 1 == 1 {
            acc ^= a;
        }
        b >>= 1;
        let carry = a >> 63;
        a <<= 1;
        if carry == 1 {
            a ^= REDUCTION;
        }
    }
    acc
}

/// Maps any seed material to a usable (non-zero) salt.
pub fn salt_from(seed: u64) -> u64 {
    let s = crate::bitframe::splitmix64(seed);
    if s == 0 {
        1
    } else {
        s
    }
}

pub fn frame_digest(bits: &BitVector, salt: u64) -> u64 {
    assert_ne!(salt, 0, "salt must be non-zero");
    let mut h = 0u64;
    for &w in bits.as_words() {
        h = gf64_mul(h ^ w, salt);
    }
    gf64_mul(h ^ bits.len() as u64, salt)
}
