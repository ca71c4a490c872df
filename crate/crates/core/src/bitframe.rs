//! Packed bit vectors, key frames, simulated BSC key pairs and the shared
//! shuffling tables.
//!
//! Bits are stored little-endian inside `u64` words, so the byte view
//! (`to_bytes`) packs 8 bits per byte with the lowest index in the
//! least-significant bit.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{param, Result};

/// Protocol frame length in bits.
pub const FRAME_BITS: usize = 1 << 16;

const WORD: usize = 64;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitVector {
    words: Vec<u64>,
    len: usize,
}

impl std::fmt::Debug for BitVector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.len <= 128 {
            let s: String = (0..self.len)
                .map(|i| if self.bit(i) { '1' } else { '0' })
                .collect();
            write!(f, "BitVector({s})")
        } else {
            write!(f, "BitVector(len={}, ones={})", self.len, self.count_ones())
        }
    }
}

impl BitVector {
    /// All-zero vector of `len` bits. Panics if `len == 0`.
    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "BitVector length must be positive");
        BitVector {
            words: vec![0; len.div_ceil(WORD)],
            len,
        }
    }

    pub fn from_bools(bits: &[bool]) -> Result<Self> {
        if bits.is_empty() {
            return Err(param("bit vector must not be empty"));
        }
        let mut v = BitVector::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b {
                v.set(i, true);
            }
        }
        Ok(v)
    }

    /// Parses a string of `'0'`/`'1'` characters, index 0 first.
    pub fn from_bit_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(param(format!("not a bit character: {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_bools(&bits)
    }

    /// Unpacks `len` bits from LSB-first bytes. Bits of `bytes` beyond `len` are ignored.
    pub fn from_bytes(bytes: &[u8], len: usize) -> Result<Self> {
        if len == 0 {
            return Err(param("bit vector must not be empty"));
        }
        if bytes.len() * 8 < len {
            return Err(param(format!(
                "{} bytes cannot hold {len} bits",
                bytes.len()
            )));
        }
        let mut v = BitVector::zeros(len);
        for (wi, chunk) in bytes.chunks(8).take(v.words.len()).enumerate() {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            v.words[wi] = u64::from_le_bytes(buf);
        }
        v.clear_tail();
        Ok(v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        out.truncate(self.len.div_ceil(8));
        out
    }

    pub(crate) fn from_words(words: Vec<u64>, len: usize) -> Self {
        debug_assert_eq!(words.len(), len.div_ceil(WORD));
        let mut v = BitVector { words, len };
        v.clear_tail();
        v
    }

    pub fn random<R: RngCore + ?Sized>(len: usize, rng: &mut R) -> Self {
        let mut v = BitVector::zeros(len);
        for w in v.words.iter_mut() {
            *w = rng.next_u64();
        }
        v.clear_tail();
        v
    }

    fn clear_tail(&mut self) {
        let rem = self.len % WORD;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    /// Always false; kept for API symmetry with collections.
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_words(&self) -> &[u64] {
        &self.words
    }

    /// Checked read.
    pub fn get(&self, i: usize) -> Result<bool> {
        if i >= self.len {
            return Err(param(format!("bit index {i} out of range (len {})", self.len)));
        }
        Ok(self.bit(i))
    }

    /// Unchecked-by-`Result` read; panics on an out-of-range index.
    #[inline]
    pub fn bit(&self, i: usize) -> bool {
        assert!(i < self.len, "bit index {i} out of range (len {})", self.len);
        (self.words[i / WORD] >> (i % WORD)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "bit index {i} out of range (len {})", self.len);
        let mask = 1u64 << (i % WORD);
        if value {
            self.words[i / WORD] |= mask;
        } else {
            self.words[i / WORD] &= !mask;
        }
    }

    #[inline]
    pub fn flip(&mut self, i: usize) {
        assert!(i < self.len, "bit index {i} out of range (len {})", self.len);
        self.words[i / WORD] ^= 1u64 << (i % WORD);
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Number of positions where `self` and `other` differ.
    pub fn hamming_distance(&self, other: &BitVector) -> Result<usize> {
        if self.len != other.len {
            return Err(param(format!(
                "length mismatch: {} vs {}",
                self.len, other.len
            )));
        }
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum())
    }

    /// XOR of the bits in `[start, start + len)`.
    pub fn range_parity(&self, start: usize, len: usize) -> Result<bool> {
        if len == 0 {
            return Err(param("parity range must be non-empty"));
        }
        match start.checked_add(len) {
            Some(end) if end <= self.len => Ok(self.range_parity_unchecked(start, end)),
            _ => Err(param(format!(
                "range [{start}, {start}+{len}) exceeds length {}",
                self.len
            ))),
        }
    }

    fn range_parity_unchecked(&self, start: usize, end: usize) -> bool {
        let (sw, ew) = (start / WORD, (end - 1) / WORD);
        let lo_mask = !0u64 << (start % WORD);
        let hi_mask = !0u64 >> (WORD - 1 - (end - 1) % WORD);
        let ones = if sw == ew {
            (self.words[sw] & lo_mask & hi_mask).count_ones()
        } else {
            let mut acc = (self.words[sw] & lo_mask).count_ones()
                + (self.words[ew] & hi_mask).count_ones();
            for w in &self.words[sw + 1..ew] {
                acc += w.count_ones();
            }
            acc
        };
        ones & 1 == 1
    }

    /// Copies `[start, start + len)` into a new vector.
    pub fn slice(&self, start: usize, len: usize) -> Result<BitVector> {
        if len == 0 || start.checked_add(len).is_none_or(|e| e > self.len) {
            return Err(param(format!(
                "slice [{start}, {start}+{len}) invalid for length {}",
                self.len
            )));
        }
        let mut out = BitVector::zeros(len);
        if start % WORD == 0 {
            let sw = start / WORD;
            let n = out.words.len();
            out.words.copy_from_slice(&self.words[sw..sw + n]);
        } else {
            let shift = start % WORD;
            for (i, w) in out.words.iter_mut().enumerate() {
                let lo = self.words[start / WORD + i] >> shift;
                let hi = self
                    .words
                    .get(start / WORD + i + 1)
                    .map_or(0, |w| w << (WORD - shift));
                *w = lo | hi;
            }
        }
        out.clear_tail();
        Ok(out)
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.bit(i))
    }
}

/// A fixed-length segment of sifted key held by one party.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub id: u32,
    pub bits: BitVector,
}

impl Frame {
    pub fn new(id: u32, bits: BitVector) -> Self {
        Frame { id, bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Result of cutting a key stream into frames.
#[derive(Debug)]
pub struct Segmentation {
    pub frames: Vec<Frame>,
    /// Trailing bits shorter than one frame, left unconsumed.
    pub remainder: Option<BitVector>,
}

impl Segmentation {
    pub fn remainder_len(&self) -> usize {
        self.remainder.as_ref().map_or(0, BitVector::len)
    }
}

/// Cuts `stream` into `FRAME_BITS`-bit frames numbered from 0.
pub fn segment(stream: &BitVector) -> Segmentation {
    segment_with(stream, FRAME_BITS, 0)
}

pub fn segment_with(stream: &BitVector, frame_bits: usize, first_id: u32) -> Segmentation {
    assert!(frame_bits > 0);
    let count = stream.len() / frame_bits;
    let frames = (0..count)
        .map(|i| {
            let bits = stream
                .slice(i * frame_bits, frame_bits)
                .expect("slice within stream");
            Frame::new(first_id + i as u32, bits)
        })
        .collect();
    let used = count * frame_bits;
    let remainder = (used < stream.len()).then(|| {
        stream
            .slice(used, stream.len() - used)
            .expect("remainder within stream")
    });
    Segmentation { frames, remainder }
}

fn check_qber(qber: f64) -> Result<()> {
    if !(0.0..0.5).contains(&qber) {
        return Err(param(format!("qber must lie in [0, 0.5), got {qber}")));
    }
    Ok(())
}

/// Draws a uniformly random string `A` and its image `B` through a binary
/// symmetric channel with crossover probability `qber`.
///
/// The generator is ChaCha8 seeded with `seed`; `A` consumes the first
/// `ceil(n/64)` words and the channel noise follows.
pub fn generate_bsc_pair(n_bits: usize, qber: f64, seed: u64) -> Result<(BitVector, BitVector)> {
    check_qber(qber)?;
    if n_bits == 0 {
        return Err(param("n_bits must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = BitVector::random(n_bits, &mut rng);
    let mut b = a.clone();
    if qber > 0.0 {
        for i in 0..n_bits {
            if rng.random_bool(qber) {
                b.flip(i);
            }
        }
    }
    Ok((a, b))
}

/// Per-frame seed derivation so that a frame's content depends only on
/// `(seed, frame_id)`, not on which worker generates it.
pub fn frame_seed(seed: u64, frame_id: u32) -> u64 {
    splitmix64(seed ^ (frame_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Reference and correcting frames for `frame_id`, drawn from a BSC.
pub fn generate_frame_pair(
    frame_id: u32,
    n_bits: usize,
    qber: f64,
    seed: u64,
) -> Result<(Frame, Frame)> {
    let (a, b) = generate_bsc_pair(n_bits, qber, frame_seed(seed, frame_id))?;
    Ok((Frame::new(frame_id, a), Frame::new(frame_id, b)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// A shuffling map shared by both parties. `forward[i]` is the shuffled
/// position of original position `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PermutationTable {
    forward: Vec<u32>,
    inverse: Vec<u32>,
    seed: Option<u64>,
}

impl PermutationTable {
    pub fn identity(n: usize) -> Self {
        let forward: Vec<u32> = (0..n as u32).collect();
        PermutationTable {
            inverse: forward.clone(),
            forward,
            seed: None,
        }
    }

    pub fn from_forward(forward: Vec<u32>) -> Result<Self> {
        let n = forward.len();
        if n == 0 {
            return Err(param("permutation must not be empty"));
        }
        let mut inverse = vec![u32::MAX; n];
        for (i, &f) in forward.iter().enumerate() {
            let slot = inverse
                .get_mut(f as usize)
                .ok_or_else(|| param(format!("image {f} out of range")))?;
            if *slot != u32::MAX {
                return Err(param(format!("image {f} repeated")));
            }
            *slot = i as u32;
        }
        Ok(PermutationTable {
            forward,
            inverse,
            seed: None,
        })
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn forward(&self) -> &[u32] {
        &self.forward
    }

    pub fn inverse(&self) -> &[u32] {
        &self.inverse
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    #[inline]
    pub fn map(&self, original: usize) -> usize {
        self.forward[original] as usize
    }

    #[inline]
    pub fn unmap(&self, shuffled: usize) -> usize {
        self.inverse[shuffled] as usize
    }
}

/// Seeded uniform Fisher-Yates shuffle of `0..n` (ChaCha8 stream).
pub fn build_permutation(seed: u64, n: usize) -> Result<PermutationTable> {
    if n == 0 || n > u32::MAX as usize {
        return Err(param(format!("permutation size {n} unsupported")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut forward: Vec<u32> = (0..n as u32).collect();
    forward.shuffle(&mut rng);
    let mut inverse = vec![0u32; n];
    for (i, &f) in forward.iter().enumerate() {
        inverse[f as usize] = i as u32;
    }
    Ok(PermutationTable {
        forward,
        inverse,
        seed: Some(seed),
    })
}

pub fn apply_permutation(
    v: &BitVector,
    table: &PermutationTable,
    direction: Direction,
) -> Result<BitVector> {
    if v.len() != table.len() {
        return Err(param(format!(
            "vector length {} does not match table length {}",
            v.len(),
            table.len()
        )));
    }
    let map = match direction {
        Direction::Forward => &table.forward,
        Direction::Inverse => &table.inverse,
    };
    let mut words = vec![0u64; v.as_words().len()];
    for (wi, &w) in v.as_words().iter().enumerate() {
        let mut rest = w;
        while rest != 0 {
            let bit = rest.trailing_zeros() as usize;
            rest &= rest - 1;
            let dst = map[wi * WORD + bit] as usize;
            words[dst / WORD] |= 1u64 << (dst % WORD);
        }
    }
    Ok(BitVector::from_words(words, v.len()))
}

pub fn range_parity(v: &BitVector, start: usize, len: usize) -> Result<bool> {
    v.range_parity(start, len)
}
